//! Skeleton-aware isolated sign language recognition.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod formats;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod slgcn;
pub mod sstcn;
pub mod streams;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
