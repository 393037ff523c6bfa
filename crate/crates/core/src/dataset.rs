//! Dataset preparation and in-memory loading.

use std::path::{Path, PathBuf};

use crate::error::{ensure, Error, Result};
use crate::formats::{read_features, read_skeleton, write_skeleton, Manifest, ManifestEntry, Split};
use crate::graph::NodeSelection;
use crate::sstcn::KeypointFeatureClip;
use crate::streams::{normalize_coords, KeypointSequence};
use crate::synth::WHOLEBODY_NODES;

pub const DEFAULT_FRAME_SIZE: (f64, f64) = (512.0, 512.0);

#[derive(Debug, Clone)]
pub struct PrepareReport {
    pub manifest_path: PathBuf,
    pub num_samples: usize,
}

/// Reduces raw whole-body keypoint files to the selected nodes, maps pixel
/// coordinates into `[-1, 1]`, and writes them with a new manifest under
/// `out`. Files that already have the reduced node count are only
/// normalized.
pub fn prepare(
    manifest_path: impl AsRef<Path>,
    out: impl AsRef<Path>,
    frame_size: (f64, f64),
    selection: &NodeSelection,
) -> Result<PrepareReport> {
    let out = out.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    manifest.check_files(None)?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let data = read_skeleton(manifest.path_of(e))?;
        let seq = KeypointSequence::new(data, frame_size, e.sample_id.clone())?;
        let seq = if seq.num_nodes() == selection.len() {
            seq
        } else {
            ensure!(
                seq.num_nodes() == WHOLEBODY_NODES,
                Error::Shape(format!(
                    "sample {} has {} nodes, expected {WHOLEBODY_NODES} or {}",
                    e.sample_id,
                    seq.num_nodes(),
                    selection.len()
                ))
            );
            seq.select_nodes(&selection.kept)?
        };
        let seq = normalize_coords(&seq)?;
        let rel = PathBuf::from("skeletons").join(format!("{}.skel", e.sample_id));
        write_skeleton(out.join(&rel), &seq.data)?;
        entries.push(ManifestEntry {
            relative_path: rel,
            ..e.clone()
        });
    }
    let manifest_path = out.join("manifest.csv");
    let n = entries.len();
    Manifest {
        root: out.to_path_buf(),
        entries,
    }
    .write(&manifest_path)?;
    Ok(PrepareReport {
        manifest_path,
        num_samples: n,
    })
}

/// Loads prepared (normalized) keypoint files of one split.
pub fn load_skeletons(manifest: &Manifest, split: Split) -> Result<Vec<KeypointSequence>> {
    manifest.check_files(Some(split))?;
    manifest
        .split(split)
        .map(|e| {
            let data = read_skeleton(manifest.path_of(e))?;
            let mut seq = KeypointSequence::new(data, (2.0, 2.0), e.sample_id.clone())?.with_label(e.label);
            seq.normalized = true;
            Ok(seq)
        })
        .collect()
}

pub fn load_feature_clips(manifest: &Manifest, split: Split) -> Result<Vec<KeypointFeatureClip>> {
    manifest.check_files(Some(split))?;
    manifest
        .split(split)
        .map(|e| KeypointFeatureClip::new(e.sample_id.clone(), read_features(manifest.path_of(e))?, e.label))
        .collect()
}
