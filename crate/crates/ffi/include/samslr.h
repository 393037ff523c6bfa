#ifndef SAMSLR_H
#define SAMSLR_H

/* Generated by cbindgen from src/lib.rs. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Zero means success.
typedef enum SamslrStatus {
  SAMSLR_STATUS_OK = 0,
  SAMSLR_STATUS_NULL_POINTER = 1,
  SAMSLR_STATUS_INVALID_ARGUMENT = 2,
  SAMSLR_STATUS_INVALID_GRAPH = 3,
  SAMSLR_STATUS_UNREACHABLE = 4,
  SAMSLR_STATUS_SHAPE_MISMATCH = 5,
  SAMSLR_STATUS_PARSE_ERROR = 6,
  SAMSLR_STATUS_BAD_FORMAT = 7,
  SAMSLR_STATUS_CHECKPOINT_MISMATCH = 8,
  SAMSLR_STATUS_NON_FINITE = 9,
  SAMSLR_STATUS_MISSING_SAMPLE = 10,
  SAMSLR_STATUS_IO_ERROR = 11,
  SAMSLR_STATUS_CSV_ERROR = 12,
  SAMSLR_STATUS_BUFFER_TOO_SMALL = 13,
  SAMSLR_STATUS_PANIC = 14,
} SamslrStatus;

// Adjacency partition strategy.
typedef enum SamslrPartition {
  SAMSLR_PARTITION_UNIFORM = 0,
  SAMSLR_PARTITION_SPATIAL = 1,
} SamslrPartition;

// Skeleton graph handle.
typedef struct SamslrGraph SamslrGraph;

// Trained network handle, loaded from a checkpoint.
typedef struct SamslrModel SamslrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *samslr_version(void);

// Copies the calling thread's last error message, NUL-terminated and
// truncated to fit, into `buf`. Returns the full message length in bytes.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
uintptr_t samslr_last_error_message(char *buf, uintptr_t len);

// Default 27-node upper-body and hands graph.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum SamslrStatus samslr_graph_default(struct SamslrGraph **out);

// Loads a graph layout file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` a valid handle slot.
enum SamslrStatus samslr_graph_from_file(const char *path, struct SamslrGraph **out);

// # Safety
// `graph` must be null or a handle from this library, not yet freed.
void samslr_graph_free(struct SamslrGraph *graph);

// # Safety
// `graph` must be a live handle; `out` writable.
enum SamslrStatus samslr_graph_num_nodes(const struct SamslrGraph *graph, uintptr_t *out);

// Number of partitions the strategy produces.
uintptr_t samslr_partition_count(enum SamslrPartition strategy);

// Writes the normalized adjacency partitions, row-major
// `partitions x N x N`, into `out`.
//
// # Safety
// `graph` must be a live handle; `out` must hold `len` doubles.
enum SamslrStatus samslr_graph_normalized_adjacency(const struct SamslrGraph *graph,
                                                    enum SamslrPartition strategy,
                                                    double *out,
                                                    uintptr_t len);

// Loads a checkpoint together with the network it was trained with.
//
// # Safety
// `path` must be a NUL-terminated string; `out` a valid handle slot.
enum SamslrStatus samslr_model_load(const char *path, struct SamslrModel **out);

// # Safety
// `model` must be null or a handle from this library, not yet freed.
void samslr_model_free(struct SamslrModel *model);

// # Safety
// `model` must be a live handle; `out` writable.
enum SamslrStatus samslr_model_num_classes(const struct SamslrModel *model, uintptr_t *out);

// Eval-mode class scores for a row-major `(d0, d1, d2, d3)` batch: SL-GCN
// takes `(batch, 3, frames, nodes)`, SSTCN `(batch, frames * keypoints,
// size, size)`. Writes `d0 x num_classes` scores.
//
// # Safety
// `model` must be a live handle not used concurrently; `input` must hold
// the product of `dims` doubles and `scores` must hold `scores_len`.
enum SamslrStatus samslr_model_forward(struct SamslrModel *model,
                                       const double *input,
                                       const uintptr_t *dims,
                                       double *scores,
                                       uintptr_t scores_len);

// Weighted late fusion: `out[c] = sum_m weights[m] * scores[m * n + c]`.
//
// # Safety
// `scores` must hold `modalities * num_classes` doubles, `weights`
// `modalities`, and `out` `num_classes`.
enum SamslrStatus samslr_fuse(const double *scores,
                              uintptr_t modalities,
                              uintptr_t num_classes,
                              const double *weights,
                              double *out);

// Index of the highest score, lowest index among ties.
//
// # Safety
// `scores` must hold `len` doubles; `out` writable.
enum SamslrStatus samslr_predict(const double *scores, uintptr_t len, uintptr_t *out);

// Label-smoothed cross-entropy of one logit vector.
//
// # Safety
// `logits` must hold `len` doubles; `out` writable.
enum SamslrStatus samslr_smoothed_cross_entropy(const double *logits,
                                                uintptr_t len,
                                                uintptr_t label,
                                                double epsilon,
                                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAMSLR_H */
