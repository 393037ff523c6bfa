#![allow(dead_code)]

use ndarray::{Array4, ArrayD};
use rand::SeedableRng;
use samslr_core::nn::{Module, NetRng};

pub const FD_STEP: f64 = 1e-5;

/// Below this magnitude gradients are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Compares the gradients currently stored in `model` against central
/// differences of `loss`, visiting every element of every parameter.
/// Returns the worst element per parameter tensor.
pub fn finite_difference_check<M: Module>(model: &mut M, mut loss: impl FnMut(&mut M) -> f64) -> Vec<GradMismatch> {
    let analytic: Vec<(String, ArrayD<f64>)> = model.params().into_iter().map(|(n, p)| (n, p.grad.clone())).collect();
    let mut worst = Vec::new();
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let mut entry = GradMismatch {
            name: name.clone(),
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
            rel: -1.0,
        };
        for e in 0..grad.len() {
            let original = nth(model, pi, e);
            set_nth(model, pi, e, original + FD_STEP);
            let up = loss(model);
            set_nth(model, pi, e, original - FD_STEP);
            let down = loss(model);
            set_nth(model, pi, e, original);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.as_slice_memory_order().unwrap()[e];
            let rel = rel_error(a, numeric);
            if rel > entry.rel {
                entry = GradMismatch {
                    name: name.clone(),
                    index: e,
                    analytic: a,
                    numeric,
                    rel,
                };
            }
        }
        worst.push(entry);
    }
    worst
}

fn nth<M: Module>(model: &mut M, pi: usize, e: usize) -> f64 {
    model.params()[pi].1.value.as_slice_memory_order().unwrap()[e]
}

fn set_nth<M: Module>(model: &mut M, pi: usize, e: usize, v: f64) {
    model.params()[pi].1.value.as_slice_memory_order_mut().unwrap()[e] = v;
}

pub fn rng(seed: u64) -> NetRng {
    NetRng::seed_from_u64(seed)
}

pub fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut r))
}

use std::path::{Path, PathBuf};

use samslr_core::dataset::{prepare, DEFAULT_FRAME_SIZE};
use samslr_core::graph::NodeSelection;
use samslr_core::synth::{write_dataset, SyntheticSpec};

/// Small two-class synthetic dataset, prepared for the default graph.
pub fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 2,
        samples_per_class: 6,
        val_per_class: 2,
        frames: 16,
        features: true,
        feature_frames: 4,
        feature_size: 12,
        ..SyntheticSpec::default()
    }
}

/// Writes `spec` under `dir/raw`, prepares it under `dir/prep`, and returns
/// `(prepared skeleton manifest, feature manifest)`.
pub fn build_dataset(dir: &Path, spec: &SyntheticSpec) -> (PathBuf, Option<PathBuf>) {
    let raw = write_dataset(spec, dir.join("raw")).unwrap();
    let prep = prepare(&raw.manifest_path, dir.join("prep"), DEFAULT_FRAME_SIZE, &NodeSelection::slr27()).unwrap();
    (prep.manifest_path, raw.feature_manifest_path)
}

/// Config text for a small SL-GCN run rooted at `dir`.
pub fn tiny_slgcn_config(manifest: &Path, out: &str, extra: &str) -> String {
    format!(
        "root = {}\nmanifest = {}\nout = {out}\nnum_classes = 2\nbatch_size = 4\nchannels = 4,4\ngroups = 2\n\
         stride2_blocks = 1\nclip_len = 8\n{extra}",
        manifest.parent().unwrap().parent().unwrap().display(),
        manifest.display(),
    )
}

pub fn write_file(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}
