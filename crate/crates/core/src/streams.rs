//! Keypoint sequences and the four SL-GCN input streams, together with
//! coordinate normalization, fixed-length frame sampling and augmentation.

use ndarray::{s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Error, Result};
use crate::graph::SkeletonGraph;

/// Channels per node: x, y, confidence.
pub const CHANNELS: usize = 3;

/// Default clip length fed to SL-GCN.
pub const DEFAULT_SAMPLE_LEN: usize = 150;

/// `T x N x 3` keypoints for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSequence {
    pub data: Array3<f64>,
    /// Frame width and height in pixels.
    pub frame_size: (f64, f64),
    pub sample_id: String,
    pub label: Option<usize>,
    /// Coordinates are in `[-1, 1]` units rather than pixels.
    pub normalized: bool,
}

impl KeypointSequence {
    pub fn new(data: Array3<f64>, frame_size: (f64, f64), sample_id: impl Into<String>) -> Result<Self> {
        let seq = KeypointSequence {
            data,
            frame_size,
            sample_id: sample_id.into(),
            label: None,
            normalized: false,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    pub fn num_frames(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn num_nodes(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn validate(&self) -> Result<()> {
        let (t, _, c) = self.data.dim();
        ensure!(t >= 1, Error::Shape("sequence has no frames".into()));
        ensure!(
            c == CHANNELS,
            Error::Shape(format!("expected {CHANNELS} channels per node, got {c}"))
        );
        ensure!(
            self.data.iter().all(|v| v.is_finite()),
            Error::InvalidArgument(format!("sample {} contains non-finite values", self.sample_id))
        );
        ensure!(
            self.data
                .slice(s![.., .., 2])
                .iter()
                .all(|s| (0.0..=1.0).contains(s)),
            Error::InvalidArgument(format!(
                "sample {} has confidences outside [0, 1]",
                self.sample_id
            ))
        );
        Ok(())
    }

    /// Keeps only the listed node columns, in order.
    pub fn select_nodes(&self, nodes: &[usize]) -> Result<KeypointSequence> {
        let n = self.num_nodes();
        ensure!(
            nodes.iter().all(|&i| i < n),
            Error::Shape(format!("node selection exceeds {n} nodes"))
        );
        let mut out = self.clone();
        out.data = self.data.select(Axis(1), nodes);
        Ok(out)
    }
}

/// Maps pixel coordinates into `[-1, 1]`: `x' = 2x/width - 1`, `y' = 2y/height - 1`.
pub fn normalize_coords(seq: &KeypointSequence) -> Result<KeypointSequence> {
    let (w, h) = seq.frame_size;
    ensure!(
        w > 0.0 && h > 0.0,
        Error::InvalidArgument(format!("frame size must be positive, got {w}x{h}"))
    );
    ensure!(
        !seq.normalized,
        Error::InvalidArgument(format!("sample {} is already normalized", seq.sample_id))
    );
    let mut out = seq.clone();
    out.data
        .slice_mut(s![.., .., 0])
        .mapv_inplace(|x| 2.0 * x / w - 1.0);
    out.data
        .slice_mut(s![.., .., 1])
        .mapv_inplace(|y| 2.0 * y / h - 1.0);
    out.normalized = true;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleMode {
    /// Tile short videos until long enough, then cut a random window.
    #[default]
    RepeatPadRandom,
    /// Evenly spaced frame indices `floor(i * T / target)`.
    Uniform,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_window" | "repeat_pad_random" => Ok(SampleMode::RepeatPadRandom),
            "uniform" => Ok(SampleMode::Uniform),
            other => Err(Error::InvalidArgument(format!("unknown sampling mode `{other}`"))),
        }
    }
}

/// Frame indices for a clip of `target_len` frames drawn from `t` frames.
pub fn sample_indices<R: Rng + ?Sized>(t: usize, target_len: usize, mode: SampleMode, rng: &mut R) -> Vec<usize> {
    match mode {
        SampleMode::Uniform => (0..target_len).map(|i| i * t / target_len).collect(),
        SampleMode::RepeatPadRandom => {
            let tiled = t * target_len.div_ceil(t);
            let start = rng.random_range(0..=tiled - target_len);
            (start..start + target_len).map(|i| i % t).collect()
        }
    }
}

pub fn sample_frames<R: Rng + ?Sized>(
    seq: &KeypointSequence,
    target_len: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<KeypointSequence> {
    ensure!(seq.num_frames() >= 1, Error::Shape("sequence has no frames".into()));
    ensure!(target_len >= 1, Error::InvalidArgument("target length must be positive".into()));
    let idx = sample_indices(seq.num_frames(), target_len, mode, rng);
    let mut out = seq.clone();
    out.data = seq.data.select(Axis(0), &idx);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamKind {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl StreamKind {
    pub const ALL: [StreamKind; 4] = [
        StreamKind::Joint,
        StreamKind::Bone,
        StreamKind::JointMotion,
        StreamKind::BoneMotion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Joint => "joint",
            StreamKind::Bone => "bone",
            StreamKind::JointMotion => "joint_motion",
            StreamKind::BoneMotion => "bone_motion",
        }
    }
}

impl std::fmt::Display for StreamKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StreamKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stream `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamTensor {
    pub kind: StreamKind,
    /// `T x N x 3`.
    pub data: Array3<f64>,
    pub normalized: bool,
}

impl StreamTensor {
    pub fn joints(seq: &KeypointSequence) -> StreamTensor {
        StreamTensor {
            kind: StreamKind::Joint,
            data: seq.data.clone(),
            normalized: seq.normalized,
        }
    }
}

/// Bone vectors: for every bone `(i, j)` node `j` receives `joint_j - joint_i`
/// on x/y and keeps its own confidence. The root's bone is `(0, 0, s_root)`.
pub fn compute_bones(joints: &StreamTensor, topology: &SkeletonGraph) -> Result<StreamTensor> {
    ensure!(
        joints.kind == StreamKind::Joint,
        Error::InvalidArgument(format!("bones are computed from joints, not {}", joints.kind))
    );
    let n = joints.data.len_of(Axis(1));
    ensure!(
        n == topology.num_nodes(),
        Error::Shape(format!(
            "stream has {n} nodes but topology has {}",
            topology.num_nodes()
        ))
    );
    ensure!(
        topology.has_bone_tree(),
        Error::Graph("topology has no bone tree".into())
    );
    let mut bones = joints.data.clone();
    bones.slice_mut(s![.., topology.root(), 0..2]).fill(0.0);
    for (src, dst) in topology.bones() {
        for c in 0..2 {
            let diff = &joints.data.slice(s![.., dst, c]) - &joints.data.slice(s![.., src, c]);
            bones.slice_mut(s![.., dst, c]).assign(&diff);
        }
    }
    Ok(StreamTensor {
        kind: StreamKind::Bone,
        data: bones,
        normalized: joints.normalized,
    })
}

/// Frame differences `f(t+1) - f(t)` with the last frame zero-padded.
///
/// Joint motion keeps the confidence `s_t`; bone motion differences all
/// three channels.
pub fn compute_motion(stream: &StreamTensor) -> Result<StreamTensor> {
    let kind = match stream.kind {
        StreamKind::Joint => StreamKind::JointMotion,
        StreamKind::Bone => StreamKind::BoneMotion,
        other => {
            return Err(Error::InvalidArgument(format!(
                "motion is defined for joint and bone streams, not {other}"
            )))
        }
    };
    let t = stream.data.len_of(Axis(0));
    ensure!(t >= 2, Error::Shape("motion needs at least two frames".into()));
    let mut out = Array3::zeros(stream.data.raw_dim());
    let diff = &stream.data.slice(s![1.., .., ..]) - &stream.data.slice(s![..t - 1, .., ..]);
    out.slice_mut(s![..t - 1, .., ..]).assign(&diff);
    if kind == StreamKind::JointMotion {
        out.slice_mut(s![..t - 1, .., 2])
            .assign(&stream.data.slice(s![..t - 1, .., 2]));
    }
    Ok(StreamTensor {
        kind,
        data: out,
        normalized: stream.normalized,
    })
}

/// Derives any stream kind from (already sampled/augmented) joints.
pub fn make_stream(seq: &KeypointSequence, kind: StreamKind, topology: &SkeletonGraph) -> Result<StreamTensor> {
    let joints = StreamTensor::joints(seq);
    match kind {
        StreamKind::Joint => Ok(joints),
        StreamKind::Bone => compute_bones(&joints, topology),
        StreamKind::JointMotion => compute_motion(&joints),
        StreamKind::BoneMotion => compute_motion(&compute_bones(&joints, topology)?),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationParams {
    pub mirror_prob: f64,
    /// Rotation drawn uniformly from `[-rotation_range, rotation_range]` radians.
    pub rotation_range: f64,
    /// Isotropic scale drawn uniformly from `[lo, hi]`.
    pub scale_range: (f64, f64),
    pub jitter_std: f64,
    /// Global shift per axis drawn uniformly from `[-shift_range, shift_range]`.
    pub shift_range: f64,
    pub temporal_sampling: SampleMode,
    pub target_len: usize,
    pub rng_seed: u64,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        AugmentationParams {
            mirror_prob: 0.5,
            rotation_range: 13f64.to_radians(),
            scale_range: (0.9, 1.1),
            jitter_std: 0.01,
            shift_range: 0.1,
            temporal_sampling: SampleMode::RepeatPadRandom,
            target_len: DEFAULT_SAMPLE_LEN,
            rng_seed: 0,
        }
    }
}

impl AugmentationParams {
    /// No-op transform apart from uniform temporal resampling to `target_len`.
    pub fn identity(target_len: usize) -> Self {
        AugmentationParams {
            mirror_prob: 0.0,
            rotation_range: 0.0,
            scale_range: (1.0, 1.0),
            jitter_std: 0.0,
            shift_range: 0.0,
            temporal_sampling: SampleMode::Uniform,
            target_len,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.mirror_prob),
            Error::InvalidArgument("mirror_prob must lie in [0, 1]".into())
        );
        ensure!(
            (0.0..=std::f64::consts::PI).contains(&self.rotation_range),
            Error::InvalidArgument("rotation_range must lie in [0, pi]".into())
        );
        let (lo, hi) = self.scale_range;
        ensure!(
            lo > 0.0 && lo <= hi,
            Error::InvalidArgument("scale_range must satisfy 0 < lo <= hi".into())
        );
        ensure!(
            self.jitter_std >= 0.0 && self.shift_range >= 0.0,
            Error::InvalidArgument("jitter_std and shift_range must be non-negative".into())
        );
        ensure!(
            self.target_len >= 1,
            Error::InvalidArgument("target_len must be positive".into())
        );
        Ok(())
    }
}

/// Per-sample RNG derived from a run seed and the sample id, so that samples
/// can be processed in any order.
pub fn sample_rng(seed: u64, sample_id: &str, epoch: u64) -> ChaCha8Rng {
    // FNV-1a, stable across toolchains unlike `DefaultHasher`.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in sample_id.bytes().chain(epoch.to_le_bytes()) {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Negates x and swaps left/right node columns.
pub fn mirror(seq: &KeypointSequence, pairs: &[usize]) -> Result<KeypointSequence> {
    ensure!(
        pairs.len() == seq.num_nodes(),
        Error::Shape("mirror pairing does not match node count".into())
    );
    let mut out = seq.clone();
    out.data = seq.data.select(Axis(1), pairs);
    out.data.slice_mut(s![.., .., 0]).mapv_inplace(|x| -x);
    Ok(out)
}

/// Rotates x/y about the origin by `angle` radians.
pub fn rotate(seq: &KeypointSequence, angle: f64) -> KeypointSequence {
    let (sin, cos) = angle.sin_cos();
    let mut out = seq.clone();
    for mut node in out.data.lanes_mut(Axis(2)) {
        let (x, y) = (node[0], node[1]);
        node[0] = cos * x - sin * y;
        node[1] = sin * x + cos * y;
    }
    out
}

/// Applies temporal sampling, mirroring, rotation, scaling, jitter and a
/// global shift, in that order. The RNG is derived from `params.rng_seed` and
/// the sample id, so identical inputs produce identical outputs.
pub fn augment(seq: &KeypointSequence, params: &AugmentationParams, mirror_pairs: &[usize]) -> Result<KeypointSequence> {
    augment_epoch(seq, params, mirror_pairs, 0)
}

pub fn augment_epoch(
    seq: &KeypointSequence,
    params: &AugmentationParams,
    mirror_pairs: &[usize],
    epoch: u64,
) -> Result<KeypointSequence> {
    ensure!(
        seq.normalized,
        Error::InvalidArgument(format!(
            "sample {} must be normalized before augmentation",
            seq.sample_id
        ))
    );
    params.validate()?;
    let mut rng = sample_rng(params.rng_seed, &seq.sample_id, epoch);

    let mut out = sample_frames(seq, params.target_len, params.temporal_sampling, &mut rng)?;
    if params.mirror_prob > 0.0 && rng.random_bool(params.mirror_prob) {
        out = mirror(&out, mirror_pairs)?;
    }
    if params.rotation_range > 0.0 {
        let angle = rng.random_range(-params.rotation_range..=params.rotation_range);
        out = rotate(&out, angle);
    }
    let (lo, hi) = params.scale_range;
    if hi > lo {
        let scale = rng.random_range(lo..=hi);
        out.data.slice_mut(s![.., .., 0..2]).mapv_inplace(|v| v * scale);
    } else if lo != 1.0 {
        out.data.slice_mut(s![.., .., 0..2]).mapv_inplace(|v| v * lo);
    }
    if params.jitter_std > 0.0 {
        let noise = Normal::new(0.0, params.jitter_std).expect("validated std");
        for v in out.data.slice_mut(s![.., .., 0..2]).iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    if params.shift_range > 0.0 {
        for c in 0..2 {
            let shift = rng.random_range(-params.shift_range..=params.shift_range);
            out.data.slice_mut(s![.., .., c]).mapv_inplace(|v| v + shift);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Layout;
    use ndarray::Array;

    fn seq_from(data: Array3<f64>) -> KeypointSequence {
        KeypointSequence::new(data, (512.0, 512.0), "s").unwrap()
    }

    #[test]
    fn normalize_examples() {
        let mut data = Array3::zeros((1, 3, 3));
        data[[0, 0, 0]] = 256.0;
        data[[0, 0, 1]] = 256.0;
        data[[0, 2, 0]] = 384.0;
        let out = normalize_coords(&seq_from(data)).unwrap();
        assert_eq!(out.data[[0, 0, 0]], 0.0);
        assert_eq!(out.data[[0, 0, 1]], 0.0);
        assert_eq!(out.data[[0, 1, 0]], -1.0);
        assert_eq!(out.data[[0, 1, 1]], -1.0);
        assert_eq!(out.data[[0, 2, 0]], 0.5);
        assert!(out.normalized);
    }

    #[test]
    fn normalize_rejects_zero_frame() {
        let mut seq = seq_from(Array3::zeros((1, 1, 3)));
        seq.frame_size = (0.0, 10.0);
        assert!(normalize_coords(&seq).is_err());
    }

    #[test]
    fn uniform_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_indices(150, 150, SampleMode::Uniform, &mut rng), (0..150).collect::<Vec<_>>());
        let idx = sample_indices(300, 150, SampleMode::Uniform, &mut rng);
        assert_eq!(idx, (0..150).map(|i| 2 * i).collect::<Vec<_>>());
    }

    #[test]
    fn repeat_pad_tiles_short_videos() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array::from_shape_fn((75, 1, 3), |(t, _, c)| if c == 2 { 1.0 } else { t as f64 });
        let seq = seq_from(data);
        let out = sample_frames(&seq, 150, SampleMode::RepeatPadRandom, &mut rng).unwrap();
        assert_eq!(out.num_frames(), 150);
        for t in 0..150 {
            let x = out.data[[t, 0, 0]];
            assert!(x >= 0.0 && x < 75.0 && x.fract() == 0.0);
        }
    }

    #[test]
    fn bones_two_node_tree() {
        let g = SkeletonGraph::build(&Layout::chain(2)).unwrap();
        let mut data = Array3::zeros((1, 2, 3));
        data[[0, 0, 0]] = 1.0;
        data[[0, 0, 1]] = 2.0;
        data[[0, 0, 2]] = 0.7;
        data[[0, 1, 0]] = 4.0;
        data[[0, 1, 1]] = 6.0;
        data[[0, 1, 2]] = 0.9;
        let bones = compute_bones(&StreamTensor::joints(&seq_from(data)), &g).unwrap();
        assert_eq!(bones.data[[0, 1, 0]], 3.0);
        assert_eq!(bones.data[[0, 1, 1]], 4.0);
        assert_eq!(bones.data[[0, 1, 2]], 0.9);
        assert_eq!(bones.data[[0, 0, 0]], 0.0);
        assert_eq!(bones.data[[0, 0, 2]], 0.7);
    }

    #[test]
    fn bones_of_identical_joints_vanish() {
        let g = SkeletonGraph::slr27();
        let data = Array::from_shape_fn((4, 27, 3), |(_, _, c)| [0.3, -0.2, 1.0][c]);
        let bones = compute_bones(&StreamTensor::joints(&seq_from(data)), &g).unwrap();
        assert!(bones.data.slice(s![.., .., 0..2]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bones_reject_node_mismatch() {
        let g = SkeletonGraph::build(&Layout::chain(3)).unwrap();
        let joints = StreamTensor::joints(&seq_from(Array3::zeros((2, 2, 3))));
        assert!(matches!(compute_bones(&joints, &g), Err(Error::Shape(_))));
    }

    #[test]
    fn motion_examples() {
        let constant = seq_from(Array::from_elem((5, 2, 3), 0.5));
        let m = compute_motion(&StreamTensor::joints(&constant)).unwrap();
        assert!(m.data.slice(s![.., .., 0..2]).iter().all(|&v| v == 0.0));
        assert_eq!(m.data[[0, 0, 2]], 0.5);
        assert!(m.data.slice(s![4, .., ..]).iter().all(|&v| v == 0.0));

        let drift = seq_from(Array::from_shape_fn((6, 1, 3), |(t, _, c)| if c == 0 { t as f64 } else { 0.0 }));
        let m = compute_motion(&StreamTensor::joints(&drift)).unwrap();
        for t in 0..5 {
            assert_eq!(m.data[[t, 0, 0]], 1.0);
        }

        let single = seq_from(Array3::zeros((1, 2, 3)));
        assert!(compute_motion(&StreamTensor::joints(&single)).is_err());
    }

    #[test]
    fn bone_motion_differences_confidence() {
        let g = SkeletonGraph::build(&Layout::chain(2)).unwrap();
        let data = Array::from_shape_fn((3, 2, 3), |(t, n, c)| if c == 2 { 0.1 * (t + n) as f64 } else { 0.0 });
        let bm = make_stream(&seq_from(data), StreamKind::BoneMotion, &g).unwrap();
        assert!((bm.data[[0, 1, 2]] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn identity_augmentation() {
        let g = SkeletonGraph::slr27();
        let data = Array::from_shape_fn((10, 27, 3), |(t, n, c)| if c == 2 { 1.0 } else { ((t * 31 + n * 7 + c) % 13) as f64 / 13.0 - 0.5 });
        let seq = normalize_free(data);
        let out = augment(&seq, &AugmentationParams::identity(10), &g.mirror_pairs()).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn augment_requires_normalized() {
        let seq = seq_from(Array3::zeros((2, 27, 3)));
        let pairs: Vec<usize> = (0..27).collect();
        assert!(augment(&seq, &AugmentationParams::identity(2), &pairs).is_err());
    }

    #[test]
    fn mirror_is_an_involution() {
        let g = SkeletonGraph::slr27();
        let data = Array::from_shape_fn((3, 27, 3), |(t, n, c)| if c == 2 { 0.5 } else { (t + 2 * n + c) as f64 * 0.01 });
        let seq = normalize_free(data);
        let pairs = g.mirror_pairs();
        let twice = mirror(&mirror(&seq, &pairs).unwrap(), &pairs).unwrap();
        assert_eq!(twice, seq);
    }

    fn normalize_free(data: Array3<f64>) -> KeypointSequence {
        let mut seq = seq_from(data);
        seq.normalized = true;
        seq
    }
}
