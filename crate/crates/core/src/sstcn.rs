//! SSTCN: separable spatial-temporal convolution over per-keypoint feature
//! maps. Stage 1 mixes frames only, stage 2 mixes frames of each keypoint
//! group, stage 3 mixes space within each frame, stage 4 classifies.

use ndarray::{s, Array2, Array4, Axis};

use crate::error::{ensure, Error, Result};
use crate::nn::{
    avg_pool_to, avg_pool_to_backward, batch_loss, channel_shuffle, channel_shuffle_backward, join, reshape4, ActKind,
    Activation, BatchNorm, Conv2d, Dropout, Linear, Mode, Module, NamedBuffers, NamedParams, NetRng,
};
use crate::slgcn::{check_finite_grads, check_finite_scores};

/// Whole-body indices whose feature maps feed the network: nose, four mouth
/// points, shoulders, elbows, wrists, then root, first joints and tips of
/// each hand.
pub const FEATURE_KEYPOINTS: [usize; 33] = [
    0, 71, 77, 74, 80, 5, 6, 7, 8, 9, 10, //
    91, 92, 96, 100, 104, 108, 95, 99, 103, 107, 111, //
    112, 113, 117, 121, 125, 129, 116, 120, 124, 128, 132,
];

pub const DEFAULT_FRAMES: usize = 60;
pub const DEFAULT_KEYPOINTS: usize = 33;

/// `frames x keypoints x h x w` feature maps for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFeatureClip {
    pub sample_id: String,
    pub data: Array4<f64>,
    pub label: Option<usize>,
}

impl KeypointFeatureClip {
    pub fn new(sample_id: impl Into<String>, data: Array4<f64>, label: Option<usize>) -> Result<Self> {
        let clip = KeypointFeatureClip {
            sample_id: sample_id.into(),
            data,
            label,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        let (f, k, h, w) = self.data.dim();
        ensure!(
            f > 0 && k > 0 && h > 0,
            Error::Shape(format!("empty feature clip {f}x{k}x{h}x{w}"))
        );
        ensure!(h == w, Error::Shape(format!("feature maps must be square, got {h}x{w}")));
        ensure!(
            self.data.iter().all(|v| v.is_finite()),
            Error::NonFinite(format!("features of {}", self.sample_id))
        );
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn keypoints(&self) -> usize {
        self.data.dim().1
    }

    pub fn feature_size(&self) -> usize {
        self.data.dim().2
    }
}

/// Non-overlapping max pooling of `(frames, keypoints, H, W)` maps down to
/// `target x target`.
pub fn pool_features(raw: &Array4<f64>, target: usize) -> Result<Array4<f64>> {
    let (f, k, h, w) = raw.dim();
    ensure!(
        target > 0 && h >= target && w >= target && h % target == 0 && w % target == 0,
        Error::Shape(format!("cannot max-pool {h}x{w} maps to {target}x{target}"))
    );
    let (kh, kw) = (h / target, w / target);
    Ok(Array4::from_shape_fn((f, k, target, target), |(a, b, i, j)| {
        raw.slice(s![a, b, i * kh..(i + 1) * kh, j * kw..(j + 1) * kw])
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SstcnConfig {
    pub num_classes: usize,
    pub frames: usize,
    pub keypoints: usize,
    /// Side of the square per-keypoint maps.
    pub feature_size: usize,
    pub dropout_rate: f64,
    /// Width of the hidden temporal layer in stage 1.
    pub temporal_hidden: usize,
    /// Width of the hidden classifier layer.
    pub classifier_hidden: usize,
}

impl SstcnConfig {
    pub const POOLED: usize = 3;

    pub fn standard(num_classes: usize) -> SstcnConfig {
        SstcnConfig {
            num_classes,
            frames: DEFAULT_FRAMES,
            keypoints: DEFAULT_KEYPOINTS,
            feature_size: 24,
            dropout_rate: 0.1,
            temporal_hidden: DEFAULT_FRAMES,
            classifier_hidden: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.num_classes >= 2,
            Error::InvalidArgument("need at least two classes".into())
        );
        ensure!(
            self.frames > 0 && self.keypoints > 0 && self.temporal_hidden > 0 && self.classifier_hidden > 0,
            Error::InvalidArgument("network widths must be positive".into())
        );
        ensure!(
            self.feature_size > 0 && self.feature_size % Self::POOLED == 0,
            Error::InvalidArgument(format!(
                "feature size {} is not a multiple of {}",
                self.feature_size,
                Self::POOLED
            ))
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout_rate),
            Error::InvalidArgument(format!("dropout rate {} outside [0, 1)", self.dropout_rate))
        );
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.frames * self.keypoints
    }
}

/// conv -> BN -> swish -> conv -> BN -> swish -> dropout, added to the input.
#[derive(Debug, Clone)]
struct ResidualPair {
    conv1: Conv2d,
    bn1: BatchNorm,
    act1: Activation,
    conv2: Conv2d,
    bn2: BatchNorm,
    act2: Activation,
    drop: Dropout,
}

impl ResidualPair {
    fn new(first: Conv2d, second: Conv2d, dropout: f64) -> Result<Self> {
        Ok(ResidualPair {
            bn1: BatchNorm::new(first.out_channels),
            bn2: BatchNorm::new(second.out_channels),
            conv1: first,
            conv2: second,
            act1: Activation::new(ActKind::Swish),
            act2: Activation::new(ActKind::Swish),
            drop: Dropout::new(dropout)?,
        })
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode, rng: &mut NetRng) -> Result<Array4<f64>> {
        let h = self.conv1.forward(x)?;
        let h = self.act1.forward(&self.bn1.forward(&h, mode)?);
        let h = self.conv2.forward(&h)?;
        let h = self.act2.forward(&self.bn2.forward(&h, mode)?);
        Ok(self.drop.forward(&h, mode, rng) + x)
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let d = self.drop.backward(dy);
        let d = self.bn2.backward(&self.act2.backward(&d));
        let d = self.conv2.backward(&d);
        let d = self.bn1.backward(&self.act1.backward(&d));
        self.conv1.backward(&d) + dy
    }
}

impl Module for ResidualPair {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.bn1.collect_params(&join(prefix, "bn1"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
        self.bn2.collect_params(&join(prefix, "bn2"), out);
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut NamedBuffers<'a>) {
        self.bn1.collect_buffers(&join(prefix, "bn1"), out);
        self.bn2.collect_buffers(&join(prefix, "bn2"), out);
    }
}

#[derive(Debug, Clone)]
pub struct Sstcn {
    pub config: SstcnConfig,
    temporal: ResidualPair,
    grouped: ResidualPair,
    spatial: ResidualPair,
    fc1: Linear,
    fc_act: Activation,
    fc_drop: Dropout,
    fc2: Linear,
}

impl Sstcn {
    pub fn new(config: &SstcnConfig, rng: &mut NetRng) -> Result<Sstcn> {
        config.validate()?;
        let (f, k) = (config.frames, config.keypoints);
        let c = config.channels();
        let p = config.dropout_rate;
        let temporal = ResidualPair::new(
            Conv2d::pointwise(f, config.temporal_hidden, false, rng)?,
            Conv2d::pointwise(config.temporal_hidden, f, false, rng)?,
            p,
        )?;
        let grouped = ResidualPair::new(
            Conv2d::new(c, c, (3, 3), (1, 1), (1, 1), f, false, rng)?,
            Conv2d::new(c, c, (3, 3), (1, 1), (1, 1), f, false, rng)?,
            p,
        )?;
        let spatial = ResidualPair::new(
            Conv2d::new(k, k, (3, 3), (1, 1), (1, 1), k, false, rng)?,
            Conv2d::new(k, k, (3, 3), (1, 1), (1, 1), k, false, rng)?,
            p,
        )?;
        let pooled = c * SstcnConfig::POOLED * SstcnConfig::POOLED;
        Ok(Sstcn {
            config: config.clone(),
            temporal,
            grouped,
            spatial,
            fc1: Linear::new(pooled, config.classifier_hidden, rng),
            fc_act: Activation::new(ActKind::Swish),
            fc_drop: Dropout::new(p)?,
            fc2: Linear::new(config.classifier_hidden, config.num_classes, rng),
        })
    }

    /// The stage-2 grouped convolutions.
    pub fn grouped_convs(&self) -> [&Conv2d; 2] {
        [&self.grouped.conv1, &self.grouped.conv2]
    }

    /// The stage-3 per-frame grouped convolutions.
    pub fn spatial_convs(&self) -> [&Conv2d; 2] {
        [&self.spatial.conv1, &self.spatial.conv2]
    }

    /// `(B, frames * keypoints, h, w)` frame-major input to `(B, n_c)` scores.
    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode, rng: &mut NetRng) -> Result<Array2<f64>> {
        let h = self.features(x, mode, rng)?;
        let (b, c, _, _) = h.dim();
        let pooled = avg_pool_to(&h, SstcnConfig::POOLED, SstcnConfig::POOLED)?;
        let flat = pooled
            .into_shape_with_order((b, c * SstcnConfig::POOLED * SstcnConfig::POOLED))
            .expect("contiguous pool");
        let z = self.fc1.forward(&flat)?;
        let z = self.fc_act.forward(&z);
        let z = self.fc_drop.forward(&z, mode, rng);
        self.fc2.forward(&z)
    }

    /// Stages 1 to 3; output has the input's frame-major layout.
    pub fn features(&mut self, x: &Array4<f64>, mode: Mode, rng: &mut NetRng) -> Result<Array4<f64>> {
        let cfg = &self.config;
        let (f, k, side) = (cfg.frames, cfg.keypoints, cfg.feature_size);
        let (b, c, h, w) = x.dim();
        ensure!(
            c == f * k && h == side && w == side,
            Error::Shape(format!(
                "expected {f} frames x {k} keypoints of {side}x{side}, got {c} maps of {h}x{w}"
            ))
        );

        let s1 = x.to_shape((b, f, k * h, w)).expect("reshape").to_owned();
        let s1 = self.temporal.forward(&s1, mode, rng)?;

        let s2 = reshape4(s1, (b, c, h, w));
        let s2 = channel_shuffle(&s2, f)?;
        let s2 = self.grouped.forward(&s2, mode, rng)?;
        let s2 = channel_shuffle(&s2, k)?;

        self.spatial_stage(s2, mode, rng)
    }

    /// Stage 3 alone: per-frame grouped convolutions over a frame-major
    /// `(B, frames * keypoints, h, w)` map.
    pub fn spatial_stage(&mut self, x: Array4<f64>, mode: Mode, rng: &mut NetRng) -> Result<Array4<f64>> {
        let (b, c, h, w) = x.dim();
        let (f, k) = (self.config.frames, self.config.keypoints);
        ensure!(
            c == f * k,
            Error::Shape(format!("expected {} channels, got {c}", f * k))
        );
        let s3 = reshape4(x, (b * f, k, h, w));
        let s3 = self.spatial.forward(&s3, mode, rng)?;
        Ok(reshape4(s3, (b, c, h, w)))
    }

    pub fn backward(&mut self, dscores: &Array2<f64>) {
        let (f, k, side) = (self.config.frames, self.config.keypoints, self.config.feature_size);
        let c = f * k;
        let b = dscores.nrows();
        let d = self.fc2.backward(dscores);
        let d = self.fc_drop.backward(&d);
        let d = self.fc_act.backward(&d);
        let d = self.fc1.backward(&d);
        let p = SstcnConfig::POOLED;
        let d = d.into_shape_with_order((b, c, p, p)).expect("contiguous");
        let d = avg_pool_to_backward(&d, side, side);

        let d = reshape4(d, (b * f, k, side, side));
        let d = self.spatial.backward(&d);
        let d = reshape4(d, (b, c, side, side));

        let d = channel_shuffle_backward(&d, k).expect("validated shape");
        let d = self.grouped.backward(&d);
        let d = channel_shuffle_backward(&d, f).expect("validated shape");

        let d = reshape4(d, (b, f, k * side, side));
        self.temporal.backward(&d);
    }

    pub fn loss_and_grad(&mut self, x: &Array4<f64>, labels: &[usize], epsilon: f64, rng: &mut NetRng) -> Result<(f64, Array2<f64>)> {
        self.zero_grad();
        let scores = self.forward(x, Mode::Train, rng)?;
        check_finite_scores(self, &scores)?;
        let (loss, dscores) = batch_loss(&scores, labels, epsilon)?;
        self.backward(&dscores);
        check_finite_grads(self, loss)?;
        Ok((loss, scores))
    }
}

impl Module for Sstcn {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut NamedParams<'a>) {
        self.temporal.collect_params(&join(prefix, "temporal"), out);
        self.grouped.collect_params(&join(prefix, "grouped"), out);
        self.spatial.collect_params(&join(prefix, "spatial"), out);
        self.fc1.collect_params(&join(prefix, "fc1"), out);
        self.fc2.collect_params(&join(prefix, "fc2"), out);
    }

    fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut NamedBuffers<'a>) {
        self.temporal.collect_buffers(&join(prefix, "temporal"), out);
        self.grouped.collect_buffers(&join(prefix, "grouped"), out);
        self.spatial.collect_buffers(&join(prefix, "spatial"), out);
    }
}

/// Stacks clips into the frame-major `(B, frames * keypoints, h, w)` layout.
pub fn stack_clips(clips: &[&KeypointFeatureClip]) -> Result<Array4<f64>> {
    let first = clips
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (f, k, h, w) = first.data.dim();
    let mut out = Array4::zeros((clips.len(), f * k, h, w));
    for (i, clip) in clips.iter().enumerate() {
        ensure!(
            clip.data.dim() == (f, k, h, w),
            Error::Shape("clips in one batch must share a shape".into())
        );
        out.index_axis_mut(Axis(0), i)
            .assign(&clip.data.to_shape((f * k, h, w)).expect("reshape"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn keypoint_selection_is_distinct() {
        let mut v = FEATURE_KEYPOINTS.to_vec();
        v.sort_unstable();
        v.dedup();
        assert_eq!(v.len(), 33);
        assert!(v.iter().all(|&i| i < 133));
    }

    #[test]
    fn pool_takes_window_max() {
        let raw = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let p = pool_features(&raw, 2).unwrap();
        assert_eq!(p.into_raw_vec_and_offset().0, vec![5.0, 7.0, 13.0, 15.0]);
        assert!(pool_features(&Array4::zeros((1, 1, 10, 10)), 4).is_err());
    }

    #[test]
    fn small_model_scores_have_class_width() {
        let cfg = SstcnConfig {
            frames: 4,
            keypoints: 3,
            feature_size: 6,
            temporal_hidden: 5,
            classifier_hidden: 8,
            ..SstcnConfig::standard(7)
        };
        let mut rng = NetRng::seed_from_u64(0);
        let mut net = Sstcn::new(&cfg, &mut rng).unwrap();
        let x = Array4::from_elem((2, 12, 6, 6), 0.5);
        let s = net.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(s.dim(), (2, 7));
        assert_eq!(s.row(0), s.row(1));
        assert!(net.forward(&Array4::zeros((1, 11, 6, 6)), Mode::Eval, &mut rng).is_err());
    }
}
