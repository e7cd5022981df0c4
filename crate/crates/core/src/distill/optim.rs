use crate::error::{Error, Result};
use crate::numerics::{round_to_f32, Tensor};

/// Per-epoch learning rate: linear warmup from `base_lr` to `peak_lr` over
/// `warmup_epochs`, then linear decay to zero at `epochs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.peak_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }

    /// Rate used throughout `epoch` (evaluated at the epoch's start).
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::Contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.epochs
            )));
        }
        let (e, w, n) = (epoch as f64, self.warmup_epochs as f64, self.epochs as f64);
        if epoch <= self.warmup_epochs {
            if self.warmup_epochs == 0 {
                return Ok(self.peak_lr);
            }
            Ok(self.base_lr + (self.peak_lr - self.base_lr) * e / w)
        } else {
            Ok(self.peak_lr * (n - e) / (n - w))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            betas: (0.9, 0.98),
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(|p| p.len()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One AdamW update. Weight decay is decoupled (`w ← w − lr·wd·w`, applied
/// before the moment update); moments are bias-corrected. A missing gradient
/// counts as zero. Parameters are rounded to `f32` afterwards.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        if let Some(g) = &grads[i] {
            if g.len() != p.len() {
                return Err(Error::shape("adamw_step", p.shape(), g.shape()));
            }
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let decay = 1.0 - lr * cfg.weight_decay;
        let w = p.data_mut();
        for j in 0..w.len() {
            let gj = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
            w[j] *= decay;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            w[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        round_to_f32(w);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule(epochs: usize) -> LrSchedule {
        LrSchedule {
            base_lr: 2.5e-5,
            peak_lr: 2.5e-4,
            warmup_epochs: 2,
            epochs,
        }
    }

    #[test]
    fn schedule_points() {
        let s = default_schedule(12);
        assert_eq!(s.lr_at(0).unwrap(), 2.5e-5);
        assert_eq!(s.lr_at(2).unwrap(), 2.5e-4);
        assert!((s.lr_at(7).unwrap() - 0.5 * 2.5e-4).abs() < 1e-18);
        assert!(matches!(s.lr_at(12), Err(Error::Contract(_))));
    }

    #[test]
    fn schedule_validation() {
        assert!(default_schedule(2).validate().is_err());
        assert!(default_schedule(3).validate().is_ok());
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut w = Tensor::vector(vec![0.5, -1.25]);
        let before = w.clone();
        let mut st = AdamState::new([&w]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adamw_step(&mut [&mut w], &[Some(Tensor::zeros(&[2]))], &mut st, 0.1, &cfg).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_closed_form() {
        let mut w = Tensor::scalar(1.0);
        let mut st = AdamState::new([&w]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adamw_step(&mut [&mut w], &[Some(Tensor::scalar(1.0))], &mut st, 0.1, &cfg).unwrap();
        let expected = (1.0 - 0.1 * (1.0 / (1.0 + 1e-6))) as f32 as f64;
        assert_eq!(w.item(), expected);
        assert!((w.item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_only_path() {
        let mut w = Tensor::scalar(2.0);
        let mut st = AdamState::new([&w]);
        adamw_step(&mut [&mut w], &[Some(Tensor::scalar(0.0))], &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(w.item(), (2.0 * (1.0 - 0.1 * 0.01)) as f32 as f64);
    }
}
