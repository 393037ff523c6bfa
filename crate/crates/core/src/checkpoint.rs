//! Single-file checkpoints.
//!
//! Layout (little-endian): magic `SCKP`, `u32` version, 32-byte SHA-256 of the
//! embedded configuration text, `u64` step count, `f64` training loss (NaN
//! when unknown), `u32` length and UTF-8 bytes of the configuration text,
//! `u32` tensor count, then per tensor a `u32`-prefixed name, `u32` rank,
//! `u32` dimensions and `f32` values.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::nn::{export_tensors, import_tensors, Module};

pub const MAGIC: &[u8; 4] = b"SCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    /// Running-average training loss of the saved state, if known.
    pub train_loss: Option<f64>,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

pub fn config_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

impl Checkpoint {
    pub fn capture<M: Module + ?Sized>(model: &mut M, config_text: &str, step: u64, train_loss: Option<f64>) -> Self {
        Checkpoint {
            config_text: config_text.to_string(),
            step,
            train_loss,
            tensors: export_tensors(model),
        }
    }

    pub fn digest(&self) -> [u8; 32] {
        config_digest(&self.config_text)
    }

    /// Fails unless `config_text` is exactly the configuration this
    /// checkpoint was produced with.
    pub fn expect_config(&self, config_text: &str) -> Result<()> {
        ensure!(
            config_digest(config_text) == self.digest(),
            Error::CheckpointMismatch("configuration digest differs".into())
        );
        Ok(())
    }

    /// Copies the stored tensors into `model`.
    pub fn restore<M: Module + ?Sized>(&self, model: &mut M) -> Result<()> {
        import_tensors(model, &self.tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.digest());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.train_loss.unwrap_or(f64::NAN).to_le_bytes());
        put_str(&mut b, &self.config_text);
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut b, name);
            b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.iter() {
                b.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        ensure!(r.take(4)? == MAGIC, Error::format(origin, "not a checkpoint"));
        let version = r.u32()?;
        ensure!(
            version == VERSION,
            Error::format(origin, format!("unsupported checkpoint version {version}"))
        );
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let loss = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let config_text = r.string()?;
        ensure!(
            config_digest(&config_text) == digest,
            Error::format(origin, "configuration digest does not match embedded text")
        );
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            tensors.push((name, ArrayD::from_shape_vec(IxDyn(&shape), values).expect("sized")));
        }
        ensure!(r.pos == bytes.len(), Error::format(origin, "trailing bytes"));
        Ok(Checkpoint {
            config_text,
            step,
            train_loss: (!loss.is_nan()).then_some(loss),
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.pos + n <= self.bytes.len(),
            Error::format(self.origin, "truncated checkpoint")
        );
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.origin, "invalid UTF-8"))
    }
}
