//! Supervised CTC training for the toy teacher.
//!
//! Distillation needs a competent teacher; on the synthetic task one is
//! trained from scratch with the usual CTC objective.

use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::decode::BLANK;
use crate::distill::{adamw_step, AdamConfig, AdamState, LrSchedule};
use crate::error::{Error, Result};
use crate::model::AcousticModel;
use crate::numerics::{Rng, Tape, Tensor};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// CTC negative log-likelihood of `target` under per-frame `log_probs`
/// (`N×M`, rows log-normalised), divided by the target length, and its
/// gradient with respect to `log_probs`.
///
/// Infeasible alignments (too few frames) are a contract error.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<(f64, Tensor)> {
    let (n, m) = (log_probs.rows(), log_probs.cols());
    if target.is_empty() {
        return Err(Error::Contract("empty CTC target".into()));
    }
    if let Some(&bad) = target.iter().find(|&&t| t == BLANK || t >= m) {
        return Err(Error::Contract(format!("target token {bad} outside [1, {m})")));
    }
    // Extended labels: blank, l1, blank, l2, …, blank.
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&t| [t, BLANK]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, s: usize| log_probs.data()[t * m + ext[s]];
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; n * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..n {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, s) };
        }
    }
    let last = &alpha[(n - 1) * s_len..];
    let log_p = log_add(last[s_len - 1], last[s_len - 2]);
    if log_p == ninf {
        return Err(Error::Contract(format!(
            "{n} frames cannot align a target of {} tokens",
            target.len()
        )));
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![ninf; n * s_len];
    beta[(n - 1) * s_len + s_len - 1] = 0.0;
    beta[(n - 1) * s_len + s_len - 2] = 0.0;
    for t in (0..n - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, s2);
            let mut b = next(s);
            if s + 1 < s_len {
                b = log_add(b, next(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, next(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let scale = target.len() as f64;
    let mut grad = vec![0.0; n * m];
    for t in 0..n {
        for s in 0..s_len {
            let g = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if g > ninf {
                grad[t * m + ext[s]] -= g.exp() / scale;
            }
        }
    }
    Ok((-log_p / scale, Tensor::new(vec![n, m], grad)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            epochs: 10,
            base_lr: 2e-4,
            peak_lr: 2e-3,
            warmup_epochs: 2,
            weight_decay: 0.01,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_ctc: f64,
}

/// Trains `model` with CTC on `train`, one utterance per step.
pub fn train_teacher(
    mut model: AcousticModel,
    train: &[Utterance],
    cfg: &TeacherConfig,
) -> Result<(AcousticModel, Vec<TeacherEpoch>)> {
    if train.is_empty() {
        return Err(Error::Contract("teacher training needs data".into()));
    }
    let schedule = LrSchedule {
        base_lr: cfg.base_lr,
        peak_lr: cfg.peak_lr,
        warmup_epochs: cfg.warmup_epochs,
        epochs: cfg.epochs,
    };
    if cfg.epochs > 0 {
        schedule.validate()?;
    }
    let adam = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(model.params());
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for &i in &order {
            let u = &train[i];
            let mut tape = Tape::new();
            let fwd = model.forward_tape(&mut tape, &u.waveform, true)?;
            let lp = tape.log_softmax_rows(fwd.logits)?;
            let (loss, grad) = ctc_loss(tape.value(lp), &u.tokens)?;
            let l = tape.custom_scalar(lp, loss, grad)?;
            tape.backward(l)?;
            let grads: Vec<_> = fwd.params.iter().map(|&p| tape.take_grad(p)).collect();
            adamw_step(&mut model.params_mut(), &grads, &mut state, lr, &adam)?;
            total += loss;
        }
        let train_ctc = total / train.len() as f64;
        if !train_ctc.is_finite() {
            return Err(Error::NonFinite("teacher CTC loss"));
        }
        history.push(TeacherEpoch { epoch, lr, train_ctc });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::collapse;
    use crate::numerics::ops;

    /// Sum over every frame path whose collapse equals the target.
    fn brute_force_nll(log_probs: &Tensor, target: &[usize]) -> f64 {
        let (n, m) = (log_probs.rows(), log_probs.cols());
        let mut total = 0.0;
        let mut path = vec![0usize; n];
        for code in 0..m.pow(n as u32) {
            let mut c = code;
            for p in path.iter_mut() {
                *p = c % m;
                c /= m;
            }
            if collapse(&path).tokens() == target {
                total += path.iter().enumerate().map(|(t, &k)| log_probs.data()[t * m + k]).sum::<f64>().exp();
            }
        }
        -total.ln() / target.len() as f64
    }

    fn random_log_probs(n: usize, m: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let x = Tensor::new(vec![n, m], (0..n * m).map(|_| rng.normal()).collect()).unwrap();
        ops::log_softmax_rows(&x).unwrap()
    }

    #[test]
    fn matches_path_enumeration() {
        for (seed, target) in [(1, vec![1]), (2, vec![1, 2]), (3, vec![2, 2]), (4, vec![1, 2, 1])] {
            let lp = random_log_probs(5, 3, seed);
            let (loss, _) = ctc_loss(&lp, &target).unwrap();
            let oracle = brute_force_nll(&lp, &target);
            assert!((loss - oracle).abs() < 1e-12, "{target:?}: {loss} vs {oracle}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lp = random_log_probs(4, 3, 9);
        let target = [1, 2];
        let (_, grad) = ctc_loss(&lp, &target).unwrap();
        let h = 1e-6;
        for i in 0..lp.len() {
            let mut up = lp.clone();
            up.data_mut()[i] += h;
            let mut dn = lp.clone();
            dn.data_mut()[i] -= h;
            let fd = (ctc_loss(&up, &target).unwrap().0 - ctc_loss(&dn, &target).unwrap().0) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() < 1e-7, "{i}: {fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn infeasible_and_invalid_targets() {
        let lp = random_log_probs(2, 3, 5);
        // Repeated token needs a blank between: 3 frames minimum.
        assert!(matches!(ctc_loss(&lp, &[1, 1]), Err(Error::Contract(_))));
        assert!(ctc_loss(&lp, &[]).is_err());
        assert!(ctc_loss(&lp, &[3]).is_err());
        assert!(ctc_loss(&lp, &[0]).is_err());
    }
}
