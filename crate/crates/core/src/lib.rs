//! Compression toolkit for a small wav2vec-style acoustic model:
//! teacher→student distillation, int8 dynamic quantization, and
//! sensitivity pruning, plus the decoding, scoring and benchmark harness
//! used to compare them.

pub mod bench;
pub mod data;
pub mod decode;
pub mod distill;
pub mod error;
pub mod model;
pub mod teacher;
pub mod numerics;
pub mod prune;
pub mod quant;

pub use error::{Error, Result};
