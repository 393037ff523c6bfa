//! C ABI over `samslr_core`.
//!
//! Every fallible function returns a [`SamslrStatus`]; on failure the
//! message is kept per thread and can be read with
//! [`samslr_last_error_message`]. Handles are opaque and must be released
//! with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ndarray::Array4;
use rand::SeedableRng;
use samslr_core::ensemble::predict;
use samslr_core::graph::{normalize_adjacency, PartitionStrategy, SkeletonGraph};
use samslr_core::losses::smoothed_cross_entropy;
use samslr_core::nn::{Mode, NetRng};
use samslr_core::train::{load_checkpoint, Network, RunConfig};
use samslr_core::Error;

/// Result codes. Zero means success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamslrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidGraph = 3,
    Unreachable = 4,
    ShapeMismatch = 5,
    ParseError = 6,
    BadFormat = 7,
    CheckpointMismatch = 8,
    NonFinite = 9,
    MissingSample = 10,
    IoError = 11,
    CsvError = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

/// Adjacency partition strategy.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamslrPartition {
    Uniform = 0,
    Spatial = 1,
}

/// Skeleton graph handle.
pub struct SamslrGraph(SkeletonGraph);

/// Trained network handle, loaded from a checkpoint.
pub struct SamslrModel {
    net: Network,
    config: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> SamslrStatus {
    match e {
        Error::Graph(_) => SamslrStatus::InvalidGraph,
        Error::Unreachable(..) => SamslrStatus::Unreachable,
        Error::Shape(_) => SamslrStatus::ShapeMismatch,
        Error::InvalidArgument(_) => SamslrStatus::InvalidArgument,
        Error::Parse { .. } => SamslrStatus::ParseError,
        Error::Format { .. } => SamslrStatus::BadFormat,
        Error::CheckpointMismatch(_) => SamslrStatus::CheckpointMismatch,
        Error::NonFinite(_) => SamslrStatus::NonFinite,
        Error::MissingSample { .. } => SamslrStatus::MissingSample,
        Error::Io { .. } => SamslrStatus::IoError,
        Error::Csv(_) => SamslrStatus::CsvError,
    }
}

enum Failure {
    Core(Error),
    Null(&'static str),
    Small(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SamslrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SamslrStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_error(format!("{}: {e}", e.tag()));
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SamslrStatus::NullPointer
        }
        Ok(Err(Failure::Small(need))) => {
            set_error(format!("buffer too small: {need} elements needed"));
            SamslrStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".to_string());
            SamslrStatus::Panic
        }
    }
}

fn nonnull<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: caller passes either null or a valid pointer.
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    // SAFETY: non-null, NUL-terminated by contract.
    let s = unsafe { CStr::from_ptr(p) };
    let s = s
        .to_str()
        .map_err(|_| Error::InvalidArgument("path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn slice_arg<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: caller guarantees `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Failure> {
    if len < need {
        return Err(Failure::Small(need));
    }
    if p.is_null() {
        return Err(Failure::Null("output buffer"));
    }
    // SAFETY: caller guarantees `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, need) })
}

fn write_out<T>(p: *mut T, v: T) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure::Null("output"));
    }
    // SAFETY: non-null and writable by contract.
    unsafe { p.write(v) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn samslr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to fit, into `buf`. Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn samslr_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            // SAFETY: `buf` holds `len` bytes and `n < len`.
            unsafe {
                std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Default 27-node upper-body and hands graph.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn samslr_graph_default(out: *mut *mut SamslrGraph) -> SamslrStatus {
    guard(|| write_out(out, Box::into_raw(Box::new(SamslrGraph(SkeletonGraph::slr27())))))
}

/// Loads a graph layout file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn samslr_graph_from_file(path: *const c_char, out: *mut *mut SamslrGraph) -> SamslrStatus {
    guard(|| {
        let g = SkeletonGraph::from_file(path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(SamslrGraph(g))))
    })
}

/// # Safety
/// `graph` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn samslr_graph_free(graph: *mut SamslrGraph) {
    if !graph.is_null() {
        // SAFETY: allocated by `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(graph) });
    }
}

/// # Safety
/// `graph` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn samslr_graph_num_nodes(graph: *const SamslrGraph, out: *mut usize) -> SamslrStatus {
    guard(|| write_out(out, nonnull(graph, "graph")?.0.num_nodes()))
}

/// Number of partitions the strategy produces.
#[no_mangle]
pub extern "C" fn samslr_partition_count(strategy: SamslrPartition) -> usize {
    match strategy {
        SamslrPartition::Uniform => 1,
        SamslrPartition::Spatial => 3,
    }
}

/// Writes the normalized adjacency partitions, row-major
/// `partitions x N x N`, into `out`.
///
/// # Safety
/// `graph` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn samslr_graph_normalized_adjacency(
    graph: *const SamslrGraph,
    strategy: SamslrPartition,
    out: *mut f64,
    len: usize,
) -> SamslrStatus {
    guard(|| {
        let g = &nonnull(graph, "graph")?.0;
        let strategy = match strategy {
            SamslrPartition::Uniform => PartitionStrategy::Uniform,
            SamslrPartition::Spatial => PartitionStrategy::Spatial,
        };
        let adj = normalize_adjacency(g, strategy);
        let n = g.num_nodes();
        let dst = out_slice(out, len, adj.num_partitions() * n * n)?;
        for (chunk, p) in dst.chunks_mut(n * n).zip(&adj.partitions) {
            for (d, v) in chunk.iter_mut().zip(p.iter()) {
                *d = *v;
            }
        }
        Ok(())
    })
}

/// Loads a checkpoint together with the network it was trained with.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn samslr_model_load(path: *const c_char, out: *mut *mut SamslrModel) -> SamslrStatus {
    guard(|| {
        let (config, net, _) = load_checkpoint(path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(SamslrModel { net, config })))
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn samslr_model_free(model: *mut SamslrModel) {
    if !model.is_null() {
        // SAFETY: allocated by `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn samslr_model_num_classes(model: *const SamslrModel, out: *mut usize) -> SamslrStatus {
    guard(|| write_out(out, nonnull(model, "model")?.config.num_classes))
}

/// Eval-mode class scores for a row-major `(d0, d1, d2, d3)` batch: SL-GCN
/// takes `(batch, 3, frames, nodes)`, SSTCN `(batch, frames * keypoints,
/// size, size)`. Writes `d0 x num_classes` scores.
///
/// # Safety
/// `model` must be a live handle not used concurrently; `input` must hold
/// the product of `dims` doubles and `scores` must hold `scores_len`.
#[no_mangle]
pub unsafe extern "C" fn samslr_model_forward(
    model: *mut SamslrModel,
    input: *const f64,
    dims: *const usize,
    scores: *mut f64,
    scores_len: usize,
) -> SamslrStatus {
    guard(|| {
        // SAFETY: caller passes either null or a valid pointer.
        let model = unsafe { model.as_mut() }.ok_or(Failure::Null("model"))?;
        if dims.is_null() {
            return Err(Failure::Null("dims"));
        }
        // SAFETY: `dims` holds four usize values by contract.
        let d = unsafe { std::slice::from_raw_parts(dims, 4) };
        let total = d.iter().product();
        let x = slice_arg(input, total, "input")?;
        let x = Array4::from_shape_vec((d[0], d[1], d[2], d[3]), x.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut rng = NetRng::seed_from_u64(0);
        let s = model.net.forward(&x, Mode::Eval, &mut rng)?;
        let dst = out_slice(scores, scores_len, s.len())?;
        for (o, v) in dst.iter_mut().zip(s.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Weighted late fusion: `out[c] = sum_m weights[m] * scores[m * n + c]`.
///
/// # Safety
/// `scores` must hold `modalities * num_classes` doubles, `weights`
/// `modalities`, and `out` `num_classes`.
#[no_mangle]
pub unsafe extern "C" fn samslr_fuse(
    scores: *const f64,
    modalities: usize,
    num_classes: usize,
    weights: *const f64,
    out: *mut f64,
) -> SamslrStatus {
    guard(|| {
        let s = slice_arg(scores, modalities * num_classes, "scores")?;
        let w = slice_arg(weights, modalities, "weights")?;
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("weights must be finite and non-negative".into()).into());
        }
        let dst = out_slice(out, num_classes, num_classes)?;
        dst.fill(0.0);
        for (row, &wm) in s.chunks(num_classes.max(1)).zip(w) {
            for (d, v) in dst.iter_mut().zip(row) {
                *d += wm * v;
            }
        }
        Ok(())
    })
}

/// Index of the highest score, lowest index among ties.
///
/// # Safety
/// `scores` must hold `len` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn samslr_predict(scores: *const f64, len: usize, out: *mut usize) -> SamslrStatus {
    guard(|| {
        if len == 0 {
            return Err(Error::InvalidArgument("empty score vector".into()).into());
        }
        write_out(out, predict(slice_arg(scores, len, "scores")?))
    })
}

/// Label-smoothed cross-entropy of one logit vector.
///
/// # Safety
/// `logits` must hold `len` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn samslr_smoothed_cross_entropy(
    logits: *const f64,
    len: usize,
    label: usize,
    epsilon: f64,
    out: *mut f64,
) -> SamslrStatus {
    guard(|| write_out(out, smoothed_cross_entropy(slice_arg(logits, len, "logits")?, label, epsilon)?))
}
