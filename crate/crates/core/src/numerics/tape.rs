use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d { x: Var, w: Var, b: Var, stride: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    /// Scalar computed outside the tape whose gradient with respect to `x`
    /// was precomputed alongside it.
    Custom { x: Var, grad: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one.
    grad: Option<Tensor>,
}

/// Reverse-mode autodiff tape.
///
/// Every operation appends a node; [`Tape::backward`] walks the nodes in
/// reverse and adds (`+=`) into the gradients of `requires_grad` leaves.
/// Calling `backward` twice accumulates twice; [`Tape::zero_grad`] resets.
/// A tape is confined to the thread that builds it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after [`Tape::backward`]; `None` if nothing reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = ops::add_row(self.value(a), self.value(row))?;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = ops::scale(self.value(a), c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = ops::gelu(self.value(a));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::log_softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let out = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: out.xhat,
            inv_std: out.inv_std,
        };
        Ok(self.push(out.y, op, &[x, gain, bias]))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let out = ops::conv1d(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(out, Op::Conv1d { x, w, b, stride }, &[x, w, b]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let out = ops::slice_cols(self.value(x), start, width)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_cols(&values)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let out = ops::slice_rows(self.value(x), start, count)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    /// Records a scalar computed by external code, with `grad` = ∂value/∂x.
    pub fn custom_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::shape("custom_scalar", self.value(x).shape(), grad.shape()));
        }
        Ok(self.push(Tensor::scalar(value), Op::Custom { x, grad }, &[x]))
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let ga = ops::matmul_a_bt(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = ops::matmul_at_b(self.value(*a), g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, ops::transpose(g)?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let gr = ops::sum_rows(g).reshape(self.value(*row).shape().to_vec())?;
                self.accumulate(grads, *row, gr);
            }
            Op::Mul(a, b) => {
                let ga = ops::mul(g, self.value(*b))?;
                let gb = ops::mul(g, self.value(*a))?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, ops::scale(g, *c)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * ops::gelu_derivative(xv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + k;
                        let dotp: f64 = (0..len).map(|a| gd[idx(a)] * yd[idx(a)]).sum();
                        for a in 0..len {
                            gx[idx(a)] = yd[idx(a)] * (gd[idx(a)] - dotp);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape.to_vec(), gx)?);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let total: f64 = grow.iter().sum();
                    for (gv, &lp) in grow.iter_mut().zip(yrow) {
                        *gv -= lp.exp() * total;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let gain_v = self.value(*gain).data();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gy = &g.data()[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gy[j] * gain_v[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                        ggain[j] += gy[j] * xh[j];
                        gbias[j] += gy[j];
                    }
                    let n = d as f64;
                    for j in 0..d {
                        let dxh = gy[j] * gain_v[j];
                        gx[r * d + j] = inv / n * (n * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                let xshape = self.value(*x).shape().to_vec();
                let gshape = self.value(*gain).shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(xshape, gx)?);
                self.accumulate(grads, *gain, Tensor::new(gshape, ggain)?);
                self.accumulate(grads, *bias, Tensor::new(bshape, gbias)?);
            }
            Op::Conv1d { x, w, b, stride } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (c_in, len) = (xv.shape()[0], xv.shape()[1]);
                let (c_out, kernel) = (wv.shape()[0], wv.shape()[2]);
                let out_len = g.shape()[1];
                if self.nodes[w.0].requires_grad || self.nodes[x.0].requires_grad {
                    let cols = ops::im2col(xv, kernel, *stride, out_len);
                    if self.nodes[w.0].requires_grad {
                        let gw = ops::matmul(g, &cols)?.reshape(wv.shape().to_vec())?;
                        self.accumulate(grads, *w, gw);
                    }
                    if self.nodes[x.0].requires_grad {
                        let wm = Tensor::matrix(c_out, c_in * kernel, wv.data().to_vec())?;
                        let gcols = ops::matmul_at_b(g, &wm)?;
                        let gx = ops::col2im(&gcols, c_in, len, kernel, *stride);
                        self.accumulate(grads, *x, gx);
                    }
                }
                let gb: Vec<f64> = g.data().chunks(out_len).map(|r| r.iter().sum()).collect();
                let bshape = self.value(*b).shape().to_vec();
                self.accumulate(grads, *b, Tensor::new(bshape, gb)?);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (n, m) = (xv.shape()[0], xv.shape()[1]);
                let width = g.shape()[1];
                let mut gx = vec![0.0; n * m];
                for r in 0..n {
                    gx[r * m + start..r * m + start + width].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, Tensor::matrix(n, m, gx)?);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let width = self.value(*p).shape()[1];
                    self.accumulate(grads, *p, ops::slice_cols(g, start, width)?);
                    start += width;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                let m = xv.shape()[1];
                gx.data_mut()[start * m..start * m + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g.item() / xv.len() as f64));
            }
            Op::Custom { x, grad } => self.accumulate(grads, *x, ops::scale(grad, g.item())),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_leaf_gets_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = t.leaf(Tensor::vector(vec![3.0, 4.0]), true);
        let s = t.sum(y);
        let _unused = t.scale(x, 2.0);
        t.backward(s).unwrap();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_twice_accumulates_and_zero_grad_resets() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }
}
