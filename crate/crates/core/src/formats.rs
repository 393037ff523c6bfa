//! Binary keypoint and feature files, and the dataset manifest.
//!
//! Both binary formats are little-endian: a 4-byte magic, a `u32` version,
//! `u32` dimensions and then `f32` values in row-major order.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, Array4, Dimension};

use crate::error::{ensure, Error, Result};
use crate::streams::CHANNELS;

pub const SKELETON_MAGIC: &[u8; 4] = b"SKEL";
pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
pub const FORMAT_VERSION: u32 = 1;

fn write_tensor<D: Dimension>(path: &Path, magic: &[u8; 4], data: &ndarray::Array<f64, D>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * data.ndim() + 4 * data.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for &d in data.shape() {
        let d = u32::try_from(d).map_err(|_| Error::format(path, "dimension exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_tensor(path: &Path, magic: &[u8; 4], rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = 8 + 4 * rank;
    ensure!(bytes.len() >= header, Error::format(path, "truncated header"));
    ensure!(
        &bytes[..4] == magic,
        Error::format(path, format!("bad magic, expected {}", String::from_utf8_lossy(magic)))
    );
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    ensure!(
        version == FORMAT_VERSION,
        Error::format(path, format!("unsupported version {version}"))
    );
    let shape: Vec<usize> = (0..rank).map(|i| word(8 + 4 * i) as usize).collect();
    let count: usize = shape.iter().product();
    ensure!(
        bytes.len() == header + 4 * count,
        Error::format(
            path,
            format!("payload has {} bytes, shape {shape:?} needs {}", bytes.len() - header, 4 * count)
        )
    );
    let values = bytes[header..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok((shape, values))
}

/// Writes a `T x N x 3` keypoint array.
pub fn write_skeleton(path: impl AsRef<Path>, data: &Array3<f64>) -> Result<()> {
    let path = path.as_ref();
    ensure!(
        data.dim().2 == CHANNELS,
        Error::Shape(format!("keypoints need {CHANNELS} channels"))
    );
    write_tensor(path, SKELETON_MAGIC, data)
}

pub fn read_skeleton(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let path = path.as_ref();
    let (shape, values) = read_tensor(path, SKELETON_MAGIC, 3)?;
    ensure!(
        shape[2] == CHANNELS,
        Error::format(path, format!("expected {CHANNELS} channels, found {}", shape[2]))
    );
    Ok(Array3::from_shape_vec((shape[0], shape[1], shape[2]), values).expect("checked length"))
}

/// Writes a `frames x keypoints x h x w` feature clip.
pub fn write_features(path: impl AsRef<Path>, data: &Array4<f64>) -> Result<()> {
    write_tensor(path.as_ref(), FEATURE_MAGIC, data)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Array4<f64>> {
    let path = path.as_ref();
    let (shape, values) = read_tensor(path, FEATURE_MAGIC, 4)?;
    Ok(Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), values).expect("checked length"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub relative_path: PathBuf,
    pub label: Option<usize>,
    pub split: Split,
}

/// `sample_id,relative_path,label,split` rows; paths are relative to
/// `root`, the directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub const HEADER: [&'static str; 4] = ["sample_id", "relative_path", "label", "split"];

    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(&text, root, &path.display().to_string())
    }

    pub fn parse(text: &str, root: PathBuf, origin: &str) -> Result<Manifest> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let bad = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let header = rdr.headers().map_err(|e| bad(1, e.to_string()))?;
        ensure!(
            header.iter().eq(Self::HEADER),
            bad(1, format!("header must be {}", Self::HEADER.join(",")))
        );
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| bad(line, e.to_string()))?;
            ensure!(rec.len() == 4, bad(line, format!("expected 4 fields, found {}", rec.len())));
            let sample_id = rec[0].trim().to_string();
            ensure!(!sample_id.is_empty(), bad(line, "empty sample_id".into()));
            let label = match rec[2].trim() {
                "" => None,
                s => Some(s.parse().map_err(|_| bad(line, format!("bad label `{s}`")))?),
            };
            let split = rec[3].trim().parse().map_err(|e: Error| bad(line, e.to_string()))?;
            entries.push(ManifestEntry {
                sample_id,
                relative_path: PathBuf::from(rec[1].trim()),
                label,
                split,
            });
        }
        let mut ids: Vec<&str> = entries.iter().map(|e| e.sample_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(bad(0, format!("duplicate sample_id {}", w[0])));
        }
        Ok(Manifest { root, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(Self::HEADER)?;
        for e in &self.entries {
            let label = e.label.map(|l| l.to_string()).unwrap_or_default();
            w.write_record([
                e.sample_id.as_str(),
                &e.relative_path.to_string_lossy(),
                &label,
                e.split.name(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn path_of(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.relative_path)
    }

    /// Every listed file that does not exist, in manifest order.
    pub fn missing(&self, split: Option<Split>) -> Vec<(String, PathBuf)> {
        self.entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| (e.sample_id.clone(), self.path_of(e)))
            .filter(|(_, p)| !p.is_file())
            .collect()
    }

    /// Fails with the first missing file, logging every other one.
    pub fn check_files(&self, split: Option<Split>) -> Result<()> {
        let missing = self.missing(split);
        for (id, path) in &missing {
            log::error!("sample {id}: missing file {}", path.display());
        }
        match missing.into_iter().next() {
            Some((sample_id, path)) => Err(Error::MissingSample { sample_id, path }),
            None => Ok(()),
        }
    }
}
