use crate::error::{Error, Result};
use crate::numerics::{ops, Tape, Tensor, Var};

/// Floor applied to student probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-9;

/// `N×M` matrix whose rows are probability distributions over tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbSeq(Tensor);

impl ProbSeq {
    /// Wraps a matrix, checking that entries are non-negative and rows sum
    /// to one within 1e-6.
    pub fn new(probs: Tensor) -> Result<Self> {
        check_rows(&probs, 1e-6)?;
        Ok(ProbSeq(probs))
    }

    /// Row-wise softmax of `logits / temperature`.
    pub fn from_logits(logits: &Tensor, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::Contract("temperature must be positive".into()));
        }
        let scaled = ops::scale(logits, 1.0 / temperature);
        Ok(ProbSeq(ops::softmax(&scaled, 1)?))
    }

    pub fn probs(&self) -> &Tensor {
        &self.0
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn tokens(&self) -> usize {
        self.0.cols()
    }
}

fn check_rows(p: &Tensor, tol: f64) -> Result<()> {
    if p.rank() != 2 {
        return Err(Error::Contract(format!("expected N×M probabilities, got {:?}", p.shape())));
    }
    for i in 0..p.rows() {
        let row = p.row(i);
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract(format!("row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::Contract(format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Mean over frames of KL(T‖S) together with its gradient with respect to
/// `s`. Rows off normalisation by more than 1e-4 are rejected.
pub(crate) fn kl_with_grad(t: &Tensor, s: &Tensor) -> Result<(f64, Tensor)> {
    if t.shape() != s.shape() {
        return Err(Error::shape("kl_distill_loss", t.shape(), s.shape()));
    }
    check_rows(t, 1e-4)?;
    check_rows(s, 1e-4)?;
    let n = t.rows() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; s.len()];
    for (i, (&tv, &sv)) in t.data().iter().zip(s.data()).enumerate() {
        if tv == 0.0 {
            continue;
        }
        let floored = sv.max(PROB_FLOOR);
        total += tv * (tv.ln() - floored.ln());
        if sv > PROB_FLOOR {
            grad[i] = -tv / (sv * n);
        }
    }
    Ok((total / n, Tensor::new(s.shape().to_vec(), grad)?))
}

/// `(1/N) Σᵢ Σⱼ Tᵢⱼ log(Tᵢⱼ / Sᵢⱼ)`: the divergence of the student `s` from
/// the teacher `t`, averaged over frames. Zero-probability teacher entries
/// contribute nothing.
pub fn kl_distill_loss(t: &ProbSeq, s: &ProbSeq) -> Result<f64> {
    Ok(kl_with_grad(&t.0, &s.0)?.0)
}

/// Mean of squared entries of the conv encoder output.
pub fn feature_penalty(conv_out: &Tensor) -> f64 {
    conv_out.data().iter().map(|v| v * v).sum::<f64>() / conv_out.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub feature_penalty_weight: f64,
    pub temperature: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            feature_penalty_weight: 1.0,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub distill: f64,
    pub feature: f64,
    /// `distill + feature_penalty_weight · feature`
    pub total: f64,
}

/// Distillation objective on plain tensors.
pub fn objective(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    student_conv_out: &Tensor,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let t = ProbSeq::from_logits(teacher_logits, cfg.temperature)?;
    let s = ProbSeq::from_logits(student_logits, cfg.temperature)?;
    let distill = kl_distill_loss(&t, &s)?;
    let feature = feature_penalty(student_conv_out);
    Ok(LossBreakdown {
        distill,
        feature,
        total: distill + cfg.feature_penalty_weight * feature,
    })
}

/// Records the objective on a tape. The teacher distribution enters as a
/// constant, so no gradient can reach the teacher.
pub fn objective_tape(
    tape: &mut Tape,
    teacher: &ProbSeq,
    student_logits: Var,
    student_conv_out: Var,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossBreakdown)> {
    let scaled = tape.scale(student_logits, 1.0 / cfg.temperature);
    let s = tape.softmax(scaled, 1)?;
    let (distill, grad) = kl_with_grad(teacher.probs(), tape.value(s))?;
    let kl = tape.custom_scalar(s, distill, grad)?;
    let sq = tape.mul(student_conv_out, student_conv_out)?;
    let feat = tape.mean(sq);
    let feature = tape.value(feat).item();
    let weighted = tape.scale(feat, cfg.feature_penalty_weight);
    let total = tape.add(kl, weighted)?;
    let breakdown = LossBreakdown {
        distill,
        feature,
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}
