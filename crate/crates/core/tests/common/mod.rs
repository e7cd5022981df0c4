//! Test-only oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls into the code paths it is used to check
//! except through the public API under test.

#![allow(dead_code)]

use swav::distill::{objective_tape, ObjectiveConfig, ProbSeq};
use swav::numerics::{Rng, Tape, Tensor, Var};
use swav::teacher::ctc_loss;

pub fn rand_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * scale).collect()).unwrap()
}

pub fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One differentiable op applied to concrete inputs.
pub struct Case {
    pub op: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn case(op: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> Case {
    Case {
        op,
        inputs,
        build: Box::new(build),
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let m = x.cols();
    for row in out.data_mut().chunks_mut(m) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for v in row {
            *v = (*v - mx).exp() / z;
        }
    }
    out
}

/// One freshly shaped case for every differentiable op on the tape,
/// including the two losses that enter through `custom_scalar`.
pub fn random_cases(rng: &mut Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let (m, k, n) = (dim(rng, 1, 6), dim(rng, 1, 6), dim(rng, 1, 6));
    cases.push(case("matmul", vec![rand_tensor(rng, &[m, k], 1.0), rand_tensor(rng, &[k, n], 1.0)], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    }));
    cases.push(case("transpose", vec![rand_tensor(rng, &[m, n], 1.0)], |t, v| t.transpose(v[0]).unwrap()));
    cases.push(case("add", vec![rand_tensor(rng, &[m, n], 1.0), rand_tensor(rng, &[m, n], 1.0)], |t, v| {
        t.add(v[0], v[1]).unwrap()
    }));
    cases.push(case("add_row", vec![rand_tensor(rng, &[m, n], 1.0), rand_tensor(rng, &[n], 1.0)], |t, v| {
        t.add_row(v[0], v[1]).unwrap()
    }));
    cases.push(case("mul", vec![rand_tensor(rng, &[m, n], 1.0), rand_tensor(rng, &[m, n], 1.0)], |t, v| {
        t.mul(v[0], v[1]).unwrap()
    }));
    let c = rng.normal() * 2.0;
    cases.push(case("scale", vec![rand_tensor(rng, &[m, n], 1.0)], move |t, v| t.scale(v[0], c)));
    cases.push(case("gelu", vec![rand_tensor(rng, &[m, n], 2.0)], |t, v| t.gelu(v[0])));
    cases.push(case("softmax_axis0", vec![rand_tensor(rng, &[m, n], 2.0)], |t, v| t.softmax(v[0], 0).unwrap()));
    cases.push(case("softmax_axis1", vec![rand_tensor(rng, &[m, n], 2.0)], |t, v| t.softmax(v[0], 1).unwrap()));
    cases.push(case("log_softmax_rows", vec![rand_tensor(rng, &[m, n], 2.0)], |t, v| {
        t.log_softmax_rows(v[0]).unwrap()
    }));
    let d = dim(rng, 2, 8);
    cases.push(case(
        "layer_norm",
        vec![rand_tensor(rng, &[m, d], 1.5), rand_tensor(rng, &[d], 1.0), rand_tensor(rng, &[d], 1.0)],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
    ));
    let (c_in, c_out, kw, stride) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3));
    let len = kw + dim(rng, 0, 8);
    cases.push(case(
        "conv1d",
        vec![
            rand_tensor(rng, &[c_in, len], 1.0),
            rand_tensor(rng, &[c_out, c_in, kw], 1.0),
            rand_tensor(rng, &[c_out], 1.0),
        ],
        move |t, v| t.conv1d(v[0], v[1], v[2], stride).unwrap(),
    ));
    let start = rng.below(n);
    let width = dim(rng, 1, n - start);
    cases.push(case("slice_cols", vec![rand_tensor(rng, &[m, n], 1.0)], move |t, v| {
        t.slice_cols(v[0], start, width).unwrap()
    }));
    let n2 = dim(rng, 1, 4);
    cases.push(case(
        "concat_cols",
        vec![rand_tensor(rng, &[m, n], 1.0), rand_tensor(rng, &[m, n2], 1.0)],
        |t, v| t.concat_cols(&[v[0], v[1]]).unwrap(),
    ));
    let row0 = rng.below(m);
    let count = dim(rng, 1, m - row0);
    cases.push(case("slice_rows", vec![rand_tensor(rng, &[m, n], 1.0)], move |t, v| {
        t.slice_rows(v[0], row0, count).unwrap()
    }));
    cases.push(case("sum", vec![rand_tensor(rng, &[m, n], 1.0)], |t, v| t.sum(v[0])));
    cases.push(case("mean", vec![rand_tensor(rng, &[m, n], 1.0)], |t, v| t.mean(v[0])));

    // Distillation objective with respect to student logits and conv output.
    let (frames, tokens) = (dim(rng, 1, 6), dim(rng, 2, 6));
    let teacher = ProbSeq::new(softmax_rows(&rand_tensor(rng, &[frames, tokens], 2.0))).unwrap();
    let temperature = 0.5 + rng.uniform() * 2.0;
    let weight = rng.uniform() * 2.0;
    let conv_shape = [dim(rng, 1, 4), dim(rng, 1, 5)];
    cases.push(case(
        "distill_objective",
        vec![rand_tensor(rng, &[frames, tokens], 2.0), rand_tensor(rng, &conv_shape, 1.0)],
        move |t, v| {
            let cfg = ObjectiveConfig {
                feature_penalty_weight: weight,
                temperature,
            };
            objective_tape(t, &teacher, v[0], v[1], &cfg).unwrap().0
        },
    ));

    // CTC through log-softmax; targets are always alignable.
    let frames = dim(rng, 2, 8);
    let target_len = dim(rng, 1, frames / 2);
    let target: Vec<usize> = (0..target_len).map(|_| 1 + rng.below(tokens - 1)).collect();
    cases.push(case("ctc", vec![rand_tensor(rng, &[frames, tokens], 1.5)], move |t, v| {
        let lp = t.log_softmax_rows(v[0]).unwrap();
        let (value, grad) = ctc_loss(t.value(lp), &target).unwrap();
        t.custom_scalar(lp, value, grad).unwrap()
    }));
    cases
}

/// Contracts the op output with fixed random weights so that every output
/// element contributes a distinct upstream gradient.
fn probe_weights(case: &Case, rng: &mut Rng) -> Tensor {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
    let out = (case.build)(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    rand_tensor(rng, &shape, 1.0)
}

fn probed_loss(case: &Case, inputs: &[Tensor], r: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
    let out = (case.build)(&mut tape, &vars);
    tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Worst elementwise `|a − b| / max(|a|, |b|)`, ignoring pairs that agree
/// to within 1e-6 absolute.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if d <= 1e-6 {
                0.0
            } else {
                d / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max)
}

pub struct GradCheck {
    /// Worst [`rel_err`] over all inputs.
    pub rel: f64,
    /// Worst plain `|analytic − numeric|`.
    pub abs: f64,
}

/// Compares tape gradients with central differences on every input.
pub fn gradient_error(case: &Case, rng: &mut Rng) -> GradCheck {
    let r = probe_weights(case, rng);
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars);
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let h = 1e-4;
    let mut worst = GradCheck { rel: 0.0, abs: 0.0 };
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; case.inputs[i].len()]);
        let mut numeric = vec![0.0; case.inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = case.inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = case.inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *slot = (probed_loss(case, &plus, &r) - probed_loss(case, &minus, &r)) / (2.0 * h);
        }
        worst.rel = worst.rel.max(rel_err(&analytic, &numeric));
        let abs = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst.abs = worst.abs.max(abs);
    }
    worst
}

/// Random row-stochastic matrix; `sharpness` scales the logits.
pub fn random_probs(rng: &mut Rng, frames: usize, tokens: usize, sharpness: f64) -> ProbSeq {
    ProbSeq::new(softmax_rows(&rand_tensor(rng, &[frames, tokens], sharpness))).unwrap()
}

/// Levenshtein distance by plain recursion over suffixes.
pub fn brute_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute_edit_distance(ra, rb) + usize::from(x != y);
            let del = brute_edit_distance(ra, b) + 1;
            let ins = brute_edit_distance(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// Standard normal CDF by Simpson integration of the density from 0.
pub fn normal_cdf(x: f64) -> f64 {
    let n = 2000;
    let a = x.abs();
    let h = a / n as f64;
    let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(0.0) + f(a);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let half = s * h / 3.0;
    if x >= 0.0 {
        0.5 + half
    } else {
        0.5 - half
    }
}
