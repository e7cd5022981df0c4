//! Quantized model and the "SWQ8" v1 checkpoint.
//!
//! ```text
//! magic        4 bytes  "SWQ8"
//! version      u32      1
//! config block          same layout as the float checkpoint
//! n_float      u64      float values in the next section
//! floats       n_float × f32: conv (weight, bias) per layer, positions,
//!                       then per transformer layer ln1 (gain, bias),
//!                       ln2 (gain, bias)
//! linears      per transformer layer q, k, v, o, ffn.in, ffn.out, then
//!              the head; each one is
//!                scale      f32
//!                zero_point i8   (always 0)
//!                weights    in × out i8, row-major
//!                bias       out × f32
//! ```
//!
//! Little-endian throughout.

use std::path::Path;

use super::linear::QuantizedLinear;
use super::scheme::QuantParams;
use crate::error::{Error, Result};
use crate::model::acoustic::run_encoder;
use crate::model::checkpoint::{config_block_len, push_f32s, write_config, Reader};
use crate::model::{AcousticModel, ConvLayer, EncoderLayer, ForwardOutput, InferenceModel, LayerNorm, ModelConfig};
use crate::numerics::Tensor;

pub const QMAGIC: [u8; 4] = *b"SWQ8";
pub const QVERSION: u32 = 1;

/// Bytes per quantized linear beyond its int8 weights: scale, zero point and
/// one f32 per bias entry.
fn linear_overhead(out_features: usize) -> usize {
    4 + 1 + 4 * out_features
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    config: ModelConfig,
    pub convs: Vec<ConvLayer>,
    pub positions: Tensor,
    pub layers: Vec<EncoderLayer<QuantizedLinear>>,
    pub head: QuantizedLinear,
}

/// Quantizes every transformer linear and the head. Everything else is
/// copied in float.
pub fn quantize_model(model: &AcousticModel) -> Result<QuantizedModel> {
    let layers = model
        .layers
        .iter()
        .map(|l| {
            let [q, k, v, o, ff_in, ff_out] = l.linears().map(|(_, lin)| QuantizedLinear::from_linear(lin));
            Ok(EncoderLayer {
                q: q?,
                k: k?,
                v: v?,
                o: o?,
                ln1: l.ln1.clone(),
                ff_in: ff_in?,
                ff_out: ff_out?,
                ln2: l.ln2.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        config: model.config().clone(),
        convs: model.convs.clone(),
        positions: model.positions.clone(),
        layers,
        head: QuantizedLinear::from_linear(&model.head)?,
    })
}

impl QuantizedModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward(&self, waveform: &Tensor) -> Result<ForwardOutput> {
        run_encoder(&self.config, &self.convs, &self.positions, &self.layers, &self.head, waveform)
    }

    fn linears_mut(&mut self) -> impl Iterator<Item = &mut QuantizedLinear> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.q, &mut l.k, &mut l.v, &mut l.o, &mut l.ff_in, &mut l.ff_out])
            .chain(std::iter::once(&mut self.head))
    }

    fn linears(&self) -> impl Iterator<Item = &QuantizedLinear> {
        self.layers
            .iter()
            .flat_map(|l| l.linears().map(|(_, lin)| lin))
            .chain(std::iter::once(&self.head))
    }

    /// Caches float weights for every linear so inference never unpacks.
    pub fn prepack(mut self) -> Self {
        self.linears_mut().for_each(QuantizedLinear::prepack);
        self
    }

    pub fn is_prepacked(&self) -> bool {
        self.linears().all(|l| l.prepacked().is_some())
    }

    fn float_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.positions);
        for l in &self.layers {
            out.extend([&l.ln1.gain, &l.ln1.bias, &l.ln2.gain, &l.ln2.bias]);
        }
        out
    }

    pub fn count_params(&self) -> usize {
        self.float_tensors().iter().map(|t| t.len()).sum::<usize>()
            + self.linears().map(QuantizedLinear::param_count).sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.size_bytes());
        buf.extend_from_slice(&QMAGIC);
        buf.extend_from_slice(&QVERSION.to_le_bytes());
        write_config(&mut buf, &self.config);
        let floats = self.float_tensors();
        let n_float: usize = floats.iter().map(|t| t.len()).sum();
        buf.extend_from_slice(&(n_float as u64).to_le_bytes());
        for t in floats {
            push_f32s(&mut buf, t.data());
        }
        for l in self.linears() {
            let p = l.weight_params();
            buf.extend_from_slice(&(p.scale as f32).to_le_bytes());
            buf.push(p.zero_point as i8 as u8);
            buf.extend(l.weights_i8().iter().map(|&q| q as u8));
            push_f32s(&mut buf, l.bias.data());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.preamble(QMAGIC, QVERSION)?;
        let config = r.config()?;
        // A float template provides every shape.
        let template = AcousticModel::new(config.clone(), 0)?;
        let mut model = quantize_model(&template)?;
        let expected: usize = model.float_tensors().iter().map(|t| t.len()).sum();
        let n_float = r.u64()? as usize;
        if n_float != expected {
            return Err(Error::Malformed(format!(
                "float section declares {n_float} values, config implies {expected}"
            )));
        }
        let mut convs = Vec::with_capacity(model.convs.len());
        for c in &model.convs {
            convs.push(ConvLayer {
                weight: Tensor::new(c.weight.shape().to_vec(), r.f32s(c.weight.len())?)?,
                bias: Tensor::vector(r.f32s(c.bias.len())?),
                stride: c.stride,
            });
        }
        let positions = Tensor::new(model.positions.shape().to_vec(), r.f32s(model.positions.len())?)?;
        let d = config.d_model;
        let mut norms = Vec::with_capacity(model.layers.len());
        for _ in 0..model.layers.len() {
            let mut ln = || -> Result<LayerNorm> {
                Ok(LayerNorm {
                    gain: Tensor::vector(r.f32s(d)?),
                    bias: Tensor::vector(r.f32s(d)?),
                })
            };
            norms.push((ln()?, ln()?));
        }
        let mut read_linear = |shape: &QuantizedLinear| -> Result<QuantizedLinear> {
            use crate::model::LinearLayer;
            let (i, o) = (shape.in_features(), shape.out_features());
            let scale = r.f32()? as f64;
            let zero_point = r.i8()? as i32;
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::Malformed(format!("weight scale {scale}")));
            }
            let w_q = r.take(i * o)?.iter().map(|&b| b as i8).collect();
            let bias = Tensor::vector(r.f32s(o)?);
            QuantizedLinear::from_parts(w_q, i, o, QuantParams { scale, zero_point }, bias)
        };
        let mut layers = Vec::with_capacity(model.layers.len());
        for (l, (ln1, ln2)) in model.layers.iter().zip(norms) {
            layers.push(EncoderLayer {
                q: read_linear(&l.q)?,
                k: read_linear(&l.k)?,
                v: read_linear(&l.v)?,
                o: read_linear(&l.o)?,
                ln1,
                ff_in: read_linear(&l.ff_in)?,
                ff_out: read_linear(&l.ff_out)?,
                ln2,
            });
        }
        let head = read_linear(&model.head)?;
        r.finish()?;
        model.convs = convs;
        model.positions = positions;
        model.layers = layers;
        model.head = head;
        Ok(model)
    }
}

impl InferenceModel for QuantizedModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn logits(&self, waveform: &Tensor) -> Result<Tensor> {
        Ok(self.forward(waveform)?.logits)
    }
}

/// Exact length of a model's serialized checkpoint, computed from a tally
/// of its parts rather than by serializing.
pub trait SerializedSize {
    fn size_bytes(&self) -> usize;
}

impl SerializedSize for AcousticModel {
    fn size_bytes(&self) -> usize {
        AcousticModel::size_bytes(self)
    }
}

impl SerializedSize for QuantizedModel {
    fn size_bytes(&self) -> usize {
        use crate::model::LinearLayer;
        let header = 4 + 4 + config_block_len(&self.config) + 8;
        let floats: usize = self.float_tensors().iter().map(|t| t.len()).sum();
        let linears: usize = self
            .linears()
            .map(|l| l.in_features() * l.out_features() + linear_overhead(l.out_features()))
            .sum();
        header + 4 * floats + linears
    }
}

pub fn model_size_bytes(model: &impl SerializedSize) -> usize {
    model.size_bytes()
}

pub fn save_quantized(model: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    QuantizedModel::from_bytes(&bytes)
}
