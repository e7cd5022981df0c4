use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::{objective, objective_tape, LossBreakdown, ObjectiveConfig, ProbSeq};
use super::optim::{adamw_step, AdamConfig, AdamState, LrSchedule};
use crate::data::Utterance;
use crate::decode::{best_path_decode, word_error_rate, TokenSeq};
use crate::error::{Error, Result};
use crate::model::{AcousticModel, InferenceModel};
use crate::numerics::{Rng, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub adam_eps: f64,
    pub adam_betas: (f64, f64),
    pub weight_decay: f64,
    /// Utterances per optimizer step. Only 1 is supported.
    pub batch_size: usize,
    pub seed: u64,
    pub feature_penalty_weight: f64,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 12,
            base_lr: 2.5e-5,
            peak_lr: 2.5e-4,
            warmup_epochs: 2,
            adam_eps: 1e-6,
            adam_betas: (0.9, 0.98),
            weight_decay: 0.01,
            batch_size: 1,
            seed: 42,
            feature_penalty_weight: 1.0,
            temperature: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            peak_lr: self.peak_lr,
            warmup_epochs: self.warmup_epochs,
            epochs: self.epochs,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            betas: self.adam_betas,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            feature_penalty_weight: self.feature_penalty_weight,
            temperature: self.temperature,
        }
    }

    /// A zero-epoch config is valid (it trains nothing); otherwise the
    /// schedule must be well formed.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::Config("only batch_size = 1 is supported".into()));
        }
        if self.temperature <= 0.0 || self.feature_penalty_weight < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "temperature must be positive; penalty weight and weight decay nonnegative".into(),
            ));
        }
        if self.epochs > 0 {
            self.schedule().validate()?;
        }
        Ok(())
    }
}

/// Learning rate for `epoch` under the warmup/decay schedule of `cfg`.
pub fn lr_at(epoch: usize, cfg: &DistillConfig) -> Result<f64> {
    cfg.schedule().lr_at(epoch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub train_distill: f64,
    pub train_feature: f64,
    pub val_total: f64,
    pub val_wer: f64,
}

pub struct DistillOutcome {
    /// Student from the epoch with the lowest validation loss, or the input
    /// student when no epoch ran.
    pub student: AcousticModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Corpus WER of `model` on `data` under best-path decoding.
pub fn evaluate_wer(model: &impl InferenceModel, data: &[Utterance]) -> Result<f64> {
    let m = model.config().n_tokens;
    let mut refs = Vec::with_capacity(data.len());
    let mut hyps = Vec::with_capacity(data.len());
    for u in data {
        refs.push(TokenSeq::new(u.tokens.clone(), m)?);
        hyps.push(best_path_decode(&model.logits(&u.waveform)?));
    }
    Ok(word_error_rate(&refs, &hyps)?.wer)
}

struct Cached<'a> {
    utt: &'a Utterance,
    teacher: ProbSeq,
}

fn cache_teacher<'a>(teacher: &AcousticModel, data: &'a [Utterance], temperature: f64) -> Result<Vec<Cached<'a>>> {
    data.iter()
        .map(|u| {
            let logits = teacher.forward(&u.waveform)?.logits;
            Ok(Cached {
                utt: u,
                teacher: ProbSeq::from_logits(&logits, temperature)?,
            })
        })
        .collect()
}

fn mean_loss(student: &AcousticModel, teacher: &AcousticModel, data: &[Utterance], cfg: &DistillConfig) -> Result<f64> {
    let obj = cfg.objective();
    let mut total = 0.0;
    for u in data {
        let t = teacher.forward(&u.waveform)?;
        let s = student.forward(&u.waveform)?;
        total += objective(&t.logits, &s.logits, &s.conv_out, &obj)?.total;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Trains `student` to match `teacher` on `train`, one utterance per step,
/// with the learning rate fixed within each epoch. The teacher is only ever
/// run forward. Validation loss and WER are computed after every epoch.
pub fn distill(
    teacher: &AcousticModel,
    student: AcousticModel,
    train: &[Utterance],
    val: &[Utterance],
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("distillation needs at least one training utterance".into()));
    }
    if cfg.epochs > 0 && val.is_empty() {
        return Err(Error::Contract("distillation needs a validation set".into()));
    }
    if teacher.config().n_tokens != student.config().n_tokens {
        return Err(Error::Contract("teacher and student vocabularies differ".into()));
    }
    let obj = cfg.objective();
    let adam = cfg.adam();
    let cached = cache_teacher(teacher, train, cfg.temperature)?;
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..cached.len()).collect();
    let mut student = student;
    let mut state = AdamState::new(student.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, AcousticModel)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        rng.shuffle(&mut order);
        let mut sum = LossBreakdown::default();
        for &i in &order {
            let item = &cached[i];
            let mut tape = Tape::new();
            let fwd = student.forward_tape(&mut tape, &item.utt.waveform, true)?;
            let (loss, parts) = objective_tape(&mut tape, &item.teacher, fwd.logits, fwd.conv_out, &obj)?;
            tape.backward(loss)?;
            let grads: Vec<_> = fwd.params.iter().map(|&p| tape.take_grad(p)).collect();
            adamw_step(&mut student.params_mut(), &grads, &mut state, lr, &adam)?;
            sum.distill += parts.distill;
            sum.feature += parts.feature;
            sum.total += parts.total;
        }
        let n = order.len() as f64;
        let val_total = mean_loss(&student, teacher, val, cfg)?;
        let val_wer = evaluate_wer(&student, val)?;
        history.push(EpochRecord {
            epoch,
            lr,
            train_total: sum.total / n,
            train_distill: sum.distill / n,
            train_feature: sum.feature / n,
            val_total,
            val_wer,
        });
        if !val_total.is_finite() {
            return Err(Error::NonFinite("validation loss"));
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_total < *b) {
            best = Some((val_total, epoch, student.clone()));
        }
    }
    Ok(match best {
        Some((_, epoch, model)) => DistillOutcome {
            student: model,
            history,
            best_epoch: Some(epoch),
        },
        None => DistillOutcome {
            student,
            history,
            best_epoch: None,
        },
    })
}

/// Writes the per-epoch history as CSV.
pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed(format!("{other:?}")),
    })?;
    if history.is_empty() {
        w.write_record(["epoch", "lr", "train_total", "train_distill", "train_feature", "val_total", "val_wer"])?;
    }
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthSpec};
    use crate::model::{init_student, LayerSelection, ModelConfig};

    fn tiny() -> (AcousticModel, Vec<Utterance>) {
        let cfg = ModelConfig {
            n_transformer_layers: 2,
            ..ModelConfig::default()
        };
        let teacher = AcousticModel::new(cfg, 1).unwrap();
        let data = generate_dataset(&SynthSpec {
            n_utterances: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        (teacher, data)
    }

    #[test]
    fn lr_at_uses_config() {
        let cfg = DistillConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 2.5e-5);
        assert!((lr_at(7, &cfg).unwrap() - 0.5 * cfg.peak_lr).abs() < 1e-18);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (teacher, data) = tiny();
        let student = init_student(&teacher, &LayerSelection::Alternating { keep: 2 }).unwrap();
        let cfg = DistillConfig {
            epochs: 0,
            ..DistillConfig::default()
        };
        let out = distill(&teacher, student.clone(), &data, &data, &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.student, student);
        assert!(matches!(distill(&teacher, student, &[], &data, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn runs_are_deterministic() {
        let (teacher, data) = tiny();
        let student = init_student(&teacher, &LayerSelection::Alternating { keep: 1 }).unwrap();
        let cfg = DistillConfig {
            epochs: 3,
            ..DistillConfig::default()
        };
        let a = distill(&teacher, student.clone(), &data[..3], &data[3..], &cfg).unwrap();
        let b = distill(&teacher, student, &data[..3], &data[3..], &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.student, b.student);
        assert_eq!(a.history.len(), 3);
    }

    #[test]
    fn history_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_history(&p, &[]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap().trim(),
            "epoch,lr,train_total,train_distill,train_feature,val_total,val_wer"
        );
        let rec = EpochRecord {
            epoch: 0,
            lr: 1e-4,
            train_total: 1.0,
            train_distill: 0.5,
            train_feature: 0.5,
            val_total: 0.9,
            val_wer: 0.1,
        };
        write_history(&p, &[rec]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,lr,train_total,train_distill,train_feature,val_total,val_wer\n0,"));
    }
}
