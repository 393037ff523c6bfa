//! Synthetic whole-body gesture data with class-specific wrist sweeps.
//!
//! Every sample starts from the same rest pose. The right elbow, wrist and
//! hand sweep linearly through the rest position along a direction drawn
//! from the class's own angular sector, so classes are separable by
//! construction.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KeyValueConfig;
use crate::error::{ensure, Error, Result};
use crate::formats::{write_features, write_skeleton, Manifest, ManifestEntry, Split};
use crate::sstcn::{pool_features, FEATURE_KEYPOINTS};
use crate::streams::{sample_indices, SampleMode};

pub const WHOLEBODY_NODES: usize = 133;
const RIGHT_ELBOW: usize = 8;
const RIGHT_WRIST: usize = 10;
const RIGHT_HAND: std::ops::Range<usize> = 112..133;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Held-out samples per class, taken from the end of each class.
    pub val_per_class: usize,
    pub frames: usize,
    /// Standard deviation of per-coordinate pixel noise.
    pub noise: f64,
    pub seed: u64,
    pub frame_size: (f64, f64),
    /// Sweep length range in pixels.
    pub amplitude: (f64, f64),
    /// Angular gap kept free at both ends of every class sector, degrees.
    pub sector_margin_deg: f64,
    pub features: bool,
    pub feature_frames: usize,
    pub feature_size: usize,
    /// Width of the Gaussian bumps in pixels.
    pub feature_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            samples_per_class: 50,
            val_per_class: 10,
            frames: 48,
            noise: 1.0,
            seed: 0,
            frame_size: (512.0, 512.0),
            amplitude: (50.0, 70.0),
            sector_margin_deg: 20.0,
            features: false,
            feature_frames: 60,
            feature_size: 12,
            feature_sigma: 32.0,
        }
    }
}

impl SyntheticSpec {
    pub fn from_config(cfg: &KeyValueConfig) -> Result<Self> {
        let d = SyntheticSpec::default();
        let spec = SyntheticSpec {
            num_classes: cfg.get_or("num_classes", d.num_classes)?,
            samples_per_class: cfg.get_or("samples_per_class", d.samples_per_class)?,
            val_per_class: cfg.get_or("val_per_class", d.val_per_class)?,
            frames: cfg.get_or("frames", d.frames)?,
            noise: cfg.get_or("noise", d.noise)?,
            seed: cfg.get_or("seed", d.seed)?,
            frame_size: (
                cfg.get_or("frame_width", d.frame_size.0)?,
                cfg.get_or("frame_height", d.frame_size.1)?,
            ),
            amplitude: (
                cfg.get_or("amplitude_min", d.amplitude.0)?,
                cfg.get_or("amplitude_max", d.amplitude.1)?,
            ),
            sector_margin_deg: cfg.get_or("sector_margin_deg", d.sector_margin_deg)?,
            features: cfg.get_bool("features", d.features)?,
            feature_frames: cfg.get_or("feature_frames", d.feature_frames)?,
            feature_size: cfg.get_or("feature_size", d.feature_size)?,
            feature_sigma: cfg.get_or("feature_sigma", d.feature_sigma)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.samples_per_class == 0 || self.val_per_class >= self.samples_per_class {
            return bad("val_per_class must be smaller than samples_per_class".into());
        }
        if self.frames < 2 {
            return bad("need at least two frames".into());
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        let (lo, hi) = self.amplitude;
        if !(lo > 0.0 && lo <= hi) {
            return bad("amplitude range must satisfy 0 < min <= max".into());
        }
        if self.sector_margin_deg < 0.0 {
            return bad("negative sector margin makes class direction ranges overlap".into());
        }
        if 2.0 * self.sector_margin_deg >= 360.0 / self.num_classes as f64 {
            return bad(format!(
                "sector margin {} leaves no direction range for {} classes",
                self.sector_margin_deg, self.num_classes
            ));
        }
        if self.frame_size.0 <= 0.0 || self.frame_size.1 <= 0.0 {
            return bad("frame size must be positive".into());
        }
        if self.features && (self.feature_frames == 0 || self.feature_size == 0 || self.feature_sigma <= 0.0) {
            return bad("feature clip dimensions must be positive".into());
        }
        Ok(())
    }

    /// Direction range `[lo, hi)` in radians for `class`.
    pub fn sector(&self, class: usize) -> (f64, f64) {
        let width = TAU / self.num_classes as f64;
        let margin = self.sector_margin_deg.to_radians();
        (class as f64 * width + margin, (class + 1) as f64 * width - margin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub sample_id: String,
    pub label: usize,
    pub split: Split,
    /// `T x 133 x 3` pixel coordinates and confidences.
    pub keypoints: Array3<f64>,
    /// `feature_frames x 33 x s x s`, when requested.
    pub features: Option<Array4<f64>>,
}

/// Rest pose: `133 x 2` pixel coordinates for a 512x512 frame, scaled to
/// the requested frame size.
pub fn rest_pose(frame_size: (f64, f64)) -> Array2<f64> {
    let mut p = Array2::zeros((WHOLEBODY_NODES, 2));
    let mut set = |i: usize, x: f64, y: f64| {
        p[[i, 0]] = x;
        p[[i, 1]] = y;
    };
    let body = [
        (256.0, 150.0),
        (268.0, 138.0),
        (244.0, 138.0),
        (282.0, 145.0),
        (230.0, 145.0),
        (306.0, 220.0),
        (206.0, 220.0),
        (326.0, 300.0),
        (186.0, 300.0),
        (336.0, 370.0),
        (176.0, 370.0),
        (286.0, 380.0),
        (226.0, 380.0),
        (290.0, 440.0),
        (222.0, 440.0),
        (292.0, 500.0),
        (220.0, 500.0),
    ];
    for (i, &(x, y)) in body.iter().enumerate() {
        set(i, x, y);
    }
    let feet = [
        (300.0, 508.0),
        (306.0, 506.0),
        (288.0, 510.0),
        (212.0, 508.0),
        (206.0, 506.0),
        (224.0, 510.0),
    ];
    for (i, &(x, y)) in feet.iter().enumerate() {
        set(17 + i, x, y);
    }
    for i in 0..68 {
        let a = TAU * i as f64 / 68.0;
        let r = 0.6 + 0.4 * ((i % 4) as f64 / 3.0);
        set(23 + i, 256.0 + 30.0 * r * a.cos(), 150.0 + 38.0 * r * a.sin());
    }
    for (root, wrist, side) in [(91, 9, 1.0), (112, 10, -1.0)] {
        let (wx, wy) = body[wrist];
        set(root, wx, wy + 8.0);
        for finger in 0..5 {
            let phi = (60.0 + 15.0 * finger as f64).to_radians();
            let (dx, dy) = (side * phi.cos(), phi.sin());
            for j in 1..=4 {
                let r = 8.0 + 7.0 * j as f64;
                set(root + 4 * finger + j, wx + r * dx, wy + 8.0 + r * dy);
            }
        }
    }
    let (sx, sy) = (frame_size.0 / 512.0, frame_size.1 / 512.0);
    p.column_mut(0).mapv_inplace(|v| v * sx);
    p.column_mut(1).mapv_inplace(|v| v * sy);
    p
}

/// Generates every sample in memory, deterministically from the spec.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rest = rest_pose(spec.frame_size);
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("valid std"));
    let t = spec.frames;
    let mut out = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for class in 0..spec.num_classes {
        let (lo, hi) = spec.sector(class);
        for i in 0..spec.samples_per_class {
            let theta = rng.random_range(lo..hi);
            let amp = rng.random_range(spec.amplitude.0..=spec.amplitude.1);
            let offset = (rng.random_range(-10.0..=10.0), rng.random_range(-10.0..=10.0));
            let (dx, dy) = (theta.cos(), theta.sin());
            let mut kp = Array3::zeros((t, WHOLEBODY_NODES, 3));
            for f in 0..t {
                let s = amp * (f as f64 / (t - 1) as f64 - 0.5);
                for n in 0..WHOLEBODY_NODES {
                    let gain = if n == RIGHT_WRIST || RIGHT_HAND.contains(&n) {
                        1.0
                    } else if n == RIGHT_ELBOW {
                        0.5
                    } else {
                        0.0
                    };
                    let mut x = rest[[n, 0]] + offset.0 + gain * s * dx;
                    let mut y = rest[[n, 1]] + offset.1 + gain * s * dy;
                    if let Some(nz) = &noise {
                        x += nz.sample(&mut rng);
                        y += nz.sample(&mut rng);
                    }
                    kp[[f, n, 0]] = x;
                    kp[[f, n, 1]] = y;
                    kp[[f, n, 2]] = 1.0;
                }
            }
            let features = spec.features.then(|| feature_clip(&kp, spec)).transpose()?;
            let split = if i + spec.val_per_class >= spec.samples_per_class {
                Split::Val
            } else {
                Split::Train
            };
            out.push(SyntheticSample {
                sample_id: format!("c{class:02}_{i:04}"),
                label: class,
                split,
                keypoints: kp,
                features,
            });
        }
    }
    Ok(out)
}

/// Gaussian bumps centred on the feature keypoints, rendered at twice the
/// target resolution and max-pooled down.
fn feature_clip(kp: &Array3<f64>, spec: &SyntheticSpec) -> Result<Array4<f64>> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let idx = sample_indices(kp.dim().0, spec.feature_frames, SampleMode::Uniform, &mut unused);
    let side = 2 * spec.feature_size;
    let (w, h) = spec.frame_size;
    let inv = 1.0 / (2.0 * spec.feature_sigma * spec.feature_sigma);
    let raw = Array4::from_shape_fn(
        (spec.feature_frames, FEATURE_KEYPOINTS.len(), side, side),
        |(f, k, i, j)| {
            let node = FEATURE_KEYPOINTS[k];
            let cx = (j as f64 + 0.5) * w / side as f64;
            let cy = (i as f64 + 0.5) * h / side as f64;
            let (px, py) = (kp[[idx[f], node, 0]], kp[[idx[f], node, 1]]);
            (-((px - cx).powi(2) + (py - cy).powi(2)) * inv).exp()
        },
    );
    pool_features(&raw, spec.feature_size)
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest_path: PathBuf,
    pub feature_manifest_path: Option<PathBuf>,
    pub num_samples: usize,
}

/// Writes keypoint files, optional feature clips and their manifests under
/// `out`.
pub fn write_dataset(spec: &SyntheticSpec, out: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let out = out.as_ref();
    let samples = generate(spec)?;
    let mut skel = Vec::new();
    let mut feat = Vec::new();
    for s in &samples {
        let rel = PathBuf::from("skeletons").join(format!("{}.skel", s.sample_id));
        write_skeleton(out.join(&rel), &s.keypoints)?;
        skel.push(ManifestEntry {
            sample_id: s.sample_id.clone(),
            relative_path: rel,
            label: Some(s.label),
            split: s.split,
        });
        if let Some(f) = &s.features {
            let rel = PathBuf::from("features").join(format!("{}.feat", s.sample_id));
            write_features(out.join(&rel), f)?;
            feat.push(ManifestEntry {
                sample_id: s.sample_id.clone(),
                relative_path: rel,
                label: Some(s.label),
                split: s.split,
            });
        }
    }
    let manifest_path = out.join("manifest.csv");
    Manifest {
        root: out.to_path_buf(),
        entries: skel,
    }
    .write(&manifest_path)?;
    let feature_manifest_path = if spec.features {
        let p = out.join("features.csv");
        Manifest {
            root: out.to_path_buf(),
            entries: feat,
        }
        .write(&p)?;
        Some(p)
    } else {
        None
    };
    ensure!(!samples.is_empty(), Error::InvalidArgument("empty dataset".into()));
    Ok(SyntheticDataset {
        manifest_path,
        feature_manifest_path,
        num_samples: samples.len(),
    })
}
