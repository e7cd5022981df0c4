//! "SWAV" v1 float checkpoint.
//!
//! ```text
//! magic        4 bytes  "SWAV"
//! version      u32      1
//! n_conv       u32
//! conv[i]      3 × u32  out_channels, kernel_width, stride
//! d_model      u32
//! n_layers     u32
//! n_heads      u32
//! ffn_dim      u32
//! n_tokens     u32
//! max_frames   u32
//! n_params     u64      must equal the count implied by the config
//! payload      n_params × f32, in AcousticModel::params order
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::{AcousticModel, ConvSpec, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SWAV";
pub const VERSION: u32 = 1;

/// Bytes of the config block, `n_conv` through `max_frames`.
pub(crate) fn config_block_len(config: &ModelConfig) -> usize {
    4 + 12 * config.conv_layers.len() + 6 * 4
}

/// Bytes before the weight payload.
pub fn header_len(config: &ModelConfig) -> usize {
    4 + 4 + config_block_len(config) + 8
}

pub(crate) fn write_config(buf: &mut Vec<u8>, config: &ModelConfig) {
    let mut put = |v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
    put(config.conv_layers.len());
    for c in &config.conv_layers {
        put(c.out_channels);
        put(c.kernel_width);
        put(c.stride);
    }
    put(config.d_model);
    put(config.n_transformer_layers);
    put(config.n_heads);
    put(config.ffn_dim);
    put(config.n_tokens);
    put(config.max_frames);
}

/// Cursor over a byte buffer that reports truncation with its offset.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if available < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - available,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn i8(&mut self) -> Result<i8> {
        Ok(self.take(1)?[0] as i8)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }

    /// Reads and checks magic and version.
    pub fn preamble(&mut self, magic: [u8; 4], version: u32) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != magic {
            return Err(Error::BadMagic {
                expected: magic,
                found,
            });
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::UnsupportedVersion(v));
        }
        Ok(())
    }

    pub fn config(&mut self) -> Result<ModelConfig> {
        let n_conv = self.u32()? as usize;
        if n_conv > 64 {
            return Err(Error::Malformed(format!("{n_conv} conv layers")));
        }
        let mut conv_layers = Vec::with_capacity(n_conv);
        for _ in 0..n_conv {
            let (out_channels, kernel_width, stride) =
                (self.u32()? as usize, self.u32()? as usize, self.u32()? as usize);
            conv_layers.push(ConvSpec::new(out_channels, kernel_width, stride));
        }
        let config = ModelConfig {
            conv_layers,
            d_model: self.u32()? as usize,
            n_transformer_layers: self.u32()? as usize,
            n_heads: self.u32()? as usize,
            ffn_dim: self.u32()? as usize,
            n_tokens: self.u32()? as usize,
            max_frames: self.u32()? as usize,
        };
        config
            .validate()
            .map_err(|e| Error::Malformed(format!("config block: {e}")))?;
        Ok(config)
    }
}

pub(crate) fn push_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl AcousticModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(header_len(self.config()) + 4 * self.count_params());
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        write_config(&mut buf, self.config());
        buf.extend_from_slice(&(self.count_params() as u64).to_le_bytes());
        for p in self.params() {
            push_f32s(&mut buf, p.data());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.preamble(MAGIC, VERSION)?;
        let config = r.config()?;
        let n = r.u64()? as usize;
        if n != config.param_count() {
            return Err(Error::Malformed(format!(
                "payload declares {n} parameters, config implies {}",
                config.param_count()
            )));
        }
        let mut model = AcousticModel::new(config, 0)?;
        for p in model.params_mut() {
            let values = r.f32s(p.len())?;
            p.data_mut().copy_from_slice(&values);
        }
        r.finish()?;
        Ok(model)
    }

    /// Serialized size in bytes: header plus four bytes per parameter.
    pub fn size_bytes(&self) -> usize {
        header_len(self.config()) + 4 * self.count_params()
    }
}

pub fn save_checkpoint(model: &AcousticModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AcousticModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    AcousticModel::from_bytes(&bytes)
}
