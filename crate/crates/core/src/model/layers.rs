use super::LAYER_NORM_EPS;
use crate::error::Result;
use crate::numerics::{ops, round_to_f32, Rng, Tape, Tensor, Var};

fn init_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.normal() * std;
    }
    round_to_f32(t.data_mut());
    t
}

/// Something that applies `y = x·W + b` to row-major activations.
///
/// The attention block keeps its inputs and weights in float, so layers
/// distinguish the projections that feed it from the others.
pub trait LinearLayer {
    fn in_features(&self) -> usize;
    fn out_features(&self) -> usize;

    /// Projection applied inside the attention block.
    fn project_attention(&self, x: &Tensor) -> Result<Tensor>;

    /// Any other projection (feed-forward, token head).
    fn project(&self, x: &Tensor) -> Result<Tensor>;
}

/// Float linear layer with weight stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub(crate) fn init(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: init_normal(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::add_row(&ops::matmul(x, &self.weight)?, &self.bias)
    }
}

impl LinearLayer for Linear {
    fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    fn project_attention(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }

    fn project(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub(crate) fn init(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::layer_norm(x, &self.gain, &self.bias, LAYER_NORM_EPS)?.y)
    }
}

/// Strided convolution followed by gelu.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `C_out × C_in × K`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvLayer {
    pub(crate) fn init(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = (c_in * kernel) as f64;
        ConvLayer {
            weight: init_normal(&[c_out, c_in, kernel], (2.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::gelu(&ops::conv1d(x, &self.weight, &self.bias, self.stride)?))
    }
}

/// Post-norm transformer encoder layer, generic over how its linear maps are
/// stored (float for training, int8 after quantization).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<L> {
    pub q: L,
    pub k: L,
    pub v: L,
    pub o: L,
    pub ln1: LayerNorm,
    pub ff_in: L,
    pub ff_out: L,
    pub ln2: LayerNorm,
}

/// Scaled dot-product attention over float `N×d` projections. This is the
/// score path that never sees integer tensors.
pub(crate) fn attention_core(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize) -> Result<Tensor> {
    let d = q.shape()[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = ops::slice_cols(q, h * dh, dh)?;
        let kh = ops::slice_cols(k, h * dh, dh)?;
        let vh = ops::slice_cols(v, h * dh, dh)?;
        let scores = ops::scale(&ops::matmul(&qh, &ops::transpose(&kh)?)?, scale);
        let probs = ops::softmax(&scores, 1)?;
        heads.push(ops::matmul(&probs, &vh)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    ops::concat_cols(&refs)
}

impl<L: LinearLayer> EncoderLayer<L> {
    pub fn forward(&self, x: &Tensor, n_heads: usize) -> Result<Tensor> {
        let q = self.q.project_attention(x)?;
        let k = self.k.project_attention(x)?;
        let v = self.v.project_attention(x)?;
        let ctx = attention_core(&q, &k, &v, n_heads)?;
        let attn = self.o.project_attention(&ctx)?;
        let h = self.ln1.forward(&ops::add(x, &attn)?)?;
        let ff = self.ff_out.project(&ops::gelu(&self.ff_in.project(&h)?))?;
        self.ln2.forward(&ops::add(&h, &ff)?)
    }
}

impl EncoderLayer<Linear> {
    pub(crate) fn init(d: usize, ffn: usize, rng: &mut Rng) -> Self {
        EncoderLayer {
            q: Linear::init(d, d, rng),
            k: Linear::init(d, d, rng),
            v: Linear::init(d, d, rng),
            o: Linear::init(d, d, rng),
            ln1: LayerNorm::init(d),
            ff_in: Linear::init(d, ffn, rng),
            ff_out: Linear::init(ffn, d, rng),
            ln2: LayerNorm::init(d),
        }
    }
}

impl<L> EncoderLayer<L> {
    /// The six linear maps in canonical order with their short names.
    pub fn linears(&self) -> [(&'static str, &L); 6] {
        [
            ("attn.q", &self.q),
            ("attn.k", &self.k),
            ("attn.v", &self.v),
            ("attn.o", &self.o),
            ("ffn.in", &self.ff_in),
            ("ffn.out", &self.ff_out),
        ]
    }

    pub fn map<M>(&self, mut f: impl FnMut(&L) -> M) -> EncoderLayer<M> {
        EncoderLayer {
            q: f(&self.q),
            k: f(&self.k),
            v: f(&self.v),
            o: f(&self.o),
            ln1: self.ln1.clone(),
            ff_in: f(&self.ff_in),
            ff_out: f(&self.ff_out),
            ln2: self.ln2.clone(),
        }
    }
}

/// Tape handles for one linear layer.
#[derive(Clone, Copy)]
pub(crate) struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row(y, self.bias)
    }
}

#[derive(Clone, Copy)]
pub(crate) struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

impl NormVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias, LAYER_NORM_EPS)
    }
}

pub(crate) struct LayerVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
    pub ln1: NormVars,
    pub ff_in: LinearVars,
    pub ff_out: LinearVars,
    pub ln2: NormVars,
}

impl LayerVars {
    /// Tape twin of [`EncoderLayer::forward`]; performs the same kernel calls
    /// in the same order.
    pub fn forward(&self, tape: &mut Tape, x: Var, n_heads: usize) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let d = tape.value(q).shape()[1];
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let attn = self.o.forward(tape, ctx)?;
        let res = tape.add(x, attn)?;
        let h = self.ln1.forward(tape, res)?;
        let ff = self.ff_in.forward(tape, h)?;
        let ff = tape.gelu(ff);
        let ff = self.ff_out.forward(tape, ff)?;
        let res = tape.add(h, ff)?;
        self.ln2.forward(tape, res)
    }
}
