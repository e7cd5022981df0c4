use std::borrow::Cow;
use std::cell::Cell;

use super::scheme::{dynamic_activation_params, quantize_weights, QuantParams};
use crate::error::{Error, Result};
use crate::model::{Linear, LinearLayer};
use crate::numerics::{ops, Tensor};

/// Largest inner dimension for which i32 accumulation cannot overflow:
/// |x − zp| ≤ 255 and |w| ≤ 127, and 255 · 127 · 2¹⁵ < 2³¹.
pub const MAX_IN_FEATURES: usize = 1 << 15;

thread_local! {
    static UNPACKS: Cell<u64> = const { Cell::new(0) };
}

/// Number of weight unpacks performed on the current thread so far.
pub fn unpack_count() -> u64 {
    UNPACKS.with(Cell::get)
}

/// Int8 linear layer, weight stored `in × out` with one symmetric scale.
///
/// Neither kernel reads the int8 codes directly. The integer kernel wants
/// them widened to i32, and inside the attention block the layer runs on
/// float weights (`w_q · scale`). Both are unpacked on every call unless they
/// have been prepacked once up front.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear {
    w_q: Vec<i8>,
    in_features: usize,
    out_features: usize,
    w_params: QuantParams,
    pub bias: Tensor,
    prepacked: Option<Packed>,
}

#[derive(Clone, Debug, PartialEq)]
struct Packed {
    float: Tensor,
    wide: Vec<i32>,
}

fn count_unpack() {
    UNPACKS.with(|c| c.set(c.get() + 1));
}

impl QuantizedLinear {
    pub fn from_linear(l: &Linear) -> Result<Self> {
        let (w_q, w_params) = quantize_weights(&l.weight)?;
        Self::from_parts(w_q, l.weight.rows(), l.weight.cols(), w_params, l.bias.clone())
    }

    pub fn from_parts(
        w_q: Vec<i8>,
        in_features: usize,
        out_features: usize,
        w_params: QuantParams,
        bias: Tensor,
    ) -> Result<Self> {
        if w_q.len() != in_features * out_features || bias.len() != out_features {
            return Err(Error::shape("QuantizedLinear", &[in_features, out_features], bias.shape()));
        }
        if in_features > MAX_IN_FEATURES {
            return Err(Error::Config(format!(
                "{in_features} input features would overflow i32 accumulation"
            )));
        }
        if w_params.zero_point != 0 || w_q.contains(&i8::MIN) {
            return Err(Error::Malformed("weights must use the symmetric range [−127, 127]".into()));
        }
        Ok(QuantizedLinear {
            w_q,
            in_features,
            out_features,
            w_params,
            bias,
            prepacked: None,
        })
    }

    pub fn weights_i8(&self) -> &[i8] {
        &self.w_q
    }

    pub fn weight_params(&self) -> QuantParams {
        self.w_params
    }

    /// Float weights `w_q · scale`.
    pub fn dequantized(&self) -> Tensor {
        let s = self.w_params.scale;
        let data = self.w_q.iter().map(|&q| q as f64 * s).collect();
        Tensor::matrix(self.in_features, self.out_features, data).expect("weight shape")
    }

    fn widened(&self) -> Vec<i32> {
        self.w_q.iter().map(|&q| q as i32).collect()
    }

    pub fn prepack(&mut self) {
        if self.prepacked.is_none() {
            self.prepacked = Some(Packed {
                float: self.dequantized(),
                wide: self.widened(),
            });
        }
    }

    /// The cached float weights, once prepacked.
    pub fn prepacked(&self) -> Option<&Tensor> {
        self.prepacked.as_ref().map(|p| &p.float)
    }

    fn float_weights(&self) -> Cow<'_, Tensor> {
        match &self.prepacked {
            Some(p) => Cow::Borrowed(&p.float),
            None => {
                count_unpack();
                Cow::Owned(self.dequantized())
            }
        }
    }

    fn int_weights(&self) -> Cow<'_, [i32]> {
        match &self.prepacked {
            Some(p) => Cow::Borrowed(&p.wide),
            None => {
                count_unpack();
                Cow::Owned(self.widened())
            }
        }
    }

    /// Stored weight and bias elements.
    pub fn param_count(&self) -> usize {
        self.w_q.len() + self.bias.len()
    }
}

impl LinearLayer for QuantizedLinear {
    fn in_features(&self) -> usize {
        self.in_features
    }

    fn out_features(&self) -> usize {
        self.out_features
    }

    fn project_attention(&self, x: &Tensor) -> Result<Tensor> {
        ops::add_row(&ops::matmul(x, &self.float_weights())?, &self.bias)
    }

    fn project(&self, x: &Tensor) -> Result<Tensor> {
        qlinear_forward(x, self)
    }
}

/// Dynamically quantized `x · W + b`.
///
/// `x` is quantized per tensor, the product is accumulated in i32, and the
/// result is rescaled by `s_x · s_w` before the float bias is added.
pub fn qlinear_forward(x: &Tensor, layer: &QuantizedLinear) -> Result<Tensor> {
    let (n, k) = (x.rows(), x.cols());
    if x.rank() != 2 || k != layer.in_features {
        return Err(Error::shape("qlinear_forward", x.shape(), &[layer.in_features, layer.out_features]));
    }
    let m = layer.out_features;
    let p = dynamic_activation_params(x)?;
    let xq: Vec<i32> = x.data().iter().map(|&v| p.quantize(v) as i32 - p.zero_point).collect();
    let acc = int_matmul(&xq, k, &layer.int_weights(), m);
    let combined = p.scale * layer.w_params.scale;
    let b = layer.bias.data();
    let out = acc
        .iter()
        .enumerate()
        .map(|(idx, &a)| a as f64 * combined + b[idx % m])
        .collect();
    Tensor::matrix(n, m, out)
}

/// `x · w` for `x: N×K` and `w: K×M` in exact integer arithmetic, four
/// output rows per pass over `w`.
fn int_matmul(x: &[i32], k: usize, w: &[i32], m: usize) -> Vec<i32> {
    let n = x.len() / k.max(1);
    let mut acc = vec![0i32; n * m];
    let mut blocks = acc.chunks_exact_mut(4 * m);
    let mut i0 = 0;
    for block in &mut blocks {
        let (r0, rest) = block.split_at_mut(m);
        let (r1, rest) = rest.split_at_mut(m);
        let (r2, r3) = rest.split_at_mut(m);
        for p in 0..k {
            let c = [x[i0 * k + p], x[(i0 + 1) * k + p], x[(i0 + 2) * k + p], x[(i0 + 3) * k + p]];
            let wrow = &w[p * m..(p + 1) * m];
            for j in 0..m {
                let wv = wrow[j];
                r0[j] += c[0] * wv;
                r1[j] += c[1] * wv;
                r2[j] += c[2] * wv;
                r3[j] += c[3] * wv;
            }
        }
        i0 += 4;
    }
    for i in i0..n {
        let row = &mut acc[i * m..(i + 1) * m];
        for p in 0..k {
            let c = x[i * k + p];
            for (o, &wv) in row.iter_mut().zip(&w[p * m..(p + 1) * m]) {
                *o += c * wv;
            }
        }
    }
    acc
}

/// Per-element bound on `|qlinear_forward(x) − (x · Ŵ + b)|` against the
/// float layer with the original weights `W`:
///
/// ```text
/// |err_ij| ≤ ½ (s_w · ‖x_i‖₁ + s_x · ‖ŵ_:j‖₁) + 1e-9 · (1 + |y_ij|)
/// ```
///
/// where `ŵ = w_q · s_w`. It follows from
/// `x·w − x̂·ŵ = (x − x̂)·ŵ + x·(w − ŵ)` and the two rounding bounds; the
/// last term absorbs floating-point rounding in the reference product.
pub fn qlinear_error_bound(x: &Tensor, layer: &QuantizedLinear, reference: &Tensor) -> Result<Tensor> {
    let p = dynamic_activation_params(x)?;
    let (n, m) = (x.rows(), layer.out_features);
    let w_hat = layer.dequantized();
    let col_l1: Vec<f64> = (0..m)
        .map(|j| (0..layer.in_features).map(|r| w_hat.data()[r * m + j].abs()).sum())
        .collect();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let x_l1: f64 = x.row(i).iter().map(|v| v.abs()).sum();
        for j in 0..m {
            let y = reference.data()[i * m + j];
            out[i * m + j] = 0.5 * (layer.w_params.scale * x_l1 + p.scale * col_l1[j]) + 1e-9 * (1.0 + y.abs());
        }
    }
    Tensor::matrix(n, m, out)
}
