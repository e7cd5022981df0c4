use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{default_frequencies, SynthSpec};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::model::{ConvSpec, ModelConfig};
use crate::teacher::TeacherConfig;

/// Flat settings file shared by every subcommand. Unknown keys are errors;
/// missing keys take the defaults below.
///
/// ```toml
/// # model
/// conv_layers = [[32, 16, 2], [32, 8, 2], [64, 8, 2]]  # out, kernel, stride
/// d_model = 64
/// n_layers = 4
/// n_heads = 4
/// ffn_dim = 256
/// n_tokens = 12
/// max_frames = 128
/// # data
/// n_teacher = 1200     # teacher training set; distillation uses a prefix
/// n_train = 120
/// n_val = 40
/// n_eval = 100
/// min_tokens = 3
/// max_tokens = 6
/// sample_rate = 8000.0
/// noise_std = 0.1
/// segment_len = 64
/// amplitude = 0.5
/// boundary_prob = 0.3
/// # teacher training
/// teacher_epochs = 10
/// teacher_base_lr = 2e-4
/// teacher_peak_lr = 2e-3
/// teacher_warmup_epochs = 2
/// # distillation
/// epochs = 12
/// base_lr = 2.5e-5
/// peak_lr = 2.5e-4
/// warmup_epochs = 2
/// adam_eps = 1e-6
/// adam_beta1 = 0.9
/// adam_beta2 = 0.98
/// weight_decay = 0.01
/// feature_penalty_weight = 1.0
/// temperature = 1.0
/// # benchmark
/// student_layers = 2
/// sweep_layers = [1, 2, 3]
/// data_sizes = [40, 120]
/// timing_repeats = 5
/// parallel = false
/// ```
///
/// The seed comes from the command line, not the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub conv_layers: Vec<[usize; 3]>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_tokens: usize,
    pub max_frames: usize,

    pub n_teacher: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_eval: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub sample_rate: f64,
    pub noise_std: f64,
    pub segment_len: usize,
    pub amplitude: f64,
    pub boundary_prob: f64,

    pub teacher_epochs: usize,
    pub teacher_base_lr: f64,
    pub teacher_peak_lr: f64,
    pub teacher_warmup_epochs: usize,

    pub epochs: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub feature_penalty_weight: f64,
    pub temperature: f64,

    pub student_layers: usize,
    pub sweep_layers: Vec<usize>,
    pub data_sizes: Vec<usize>,
    pub timing_repeats: usize,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let synth = SynthSpec::default();
        let distill = DistillConfig::default();
        let teacher = TeacherConfig::default();
        RunConfig {
            conv_layers: model
                .conv_layers
                .iter()
                .map(|c| [c.out_channels, c.kernel_width, c.stride])
                .collect(),
            d_model: model.d_model,
            n_layers: model.n_transformer_layers,
            n_heads: model.n_heads,
            ffn_dim: model.ffn_dim,
            n_tokens: model.n_tokens,
            max_frames: model.max_frames,
            n_teacher: 1200,
            n_train: 120,
            n_val: 40,
            n_eval: 100,
            min_tokens: synth.min_tokens,
            max_tokens: synth.max_tokens,
            sample_rate: synth.sample_rate,
            noise_std: synth.noise_std,
            segment_len: synth.segment_len,
            amplitude: synth.amplitude,
            boundary_prob: synth.boundary_prob,
            teacher_epochs: teacher.epochs,
            teacher_base_lr: teacher.base_lr,
            teacher_peak_lr: teacher.peak_lr,
            teacher_warmup_epochs: teacher.warmup_epochs,
            epochs: distill.epochs,
            base_lr: distill.base_lr,
            peak_lr: distill.peak_lr,
            warmup_epochs: distill.warmup_epochs,
            adam_eps: distill.adam_eps,
            adam_beta1: distill.adam_betas.0,
            adam_beta2: distill.adam_betas.1,
            weight_decay: distill.weight_decay,
            feature_penalty_weight: distill.feature_penalty_weight,
            temperature: distill.temperature,
            student_layers: 2,
            sweep_layers: vec![1, 2, 3],
            data_sizes: vec![40, 120],
            timing_repeats: 5,
            parallel: false,
        }
    }
}

/// Offsets that give each data split its own seed.
const VAL_SEED_OFFSET: u64 = 1_000_003;
const EVAL_SEED_OFFSET: u64 = 2_000_003;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text)?;
        cfg.model()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            conv_layers: self.conv_layers.iter().map(|&[c, k, s]| ConvSpec::new(c, k, s)).collect(),
            d_model: self.d_model,
            n_transformer_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            n_tokens: self.n_tokens,
            max_frames: self.max_frames,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn synth(&self, seed: u64, n: usize) -> SynthSpec {
        SynthSpec {
            seed,
            n_utterances: n,
            min_tokens: self.min_tokens,
            max_tokens: self.max_tokens,
            frequencies: default_frequencies(self.n_tokens),
            sample_rate: self.sample_rate,
            noise_std: self.noise_std,
            segment_len: self.segment_len,
            amplitude: self.amplitude,
            boundary_prob: self.boundary_prob,
        }
    }

    /// Teacher training pool; the distillation training sets are prefixes.
    pub fn train_spec(&self, seed: u64, n: usize) -> SynthSpec {
        self.synth(seed, n)
    }

    pub fn val_spec(&self, seed: u64) -> SynthSpec {
        self.synth(seed.wrapping_add(VAL_SEED_OFFSET), self.n_val)
    }

    pub fn eval_spec(&self, seed: u64) -> SynthSpec {
        self.synth(seed.wrapping_add(EVAL_SEED_OFFSET), self.n_eval)
    }

    pub fn teacher(&self, seed: u64) -> TeacherConfig {
        TeacherConfig {
            epochs: self.teacher_epochs,
            base_lr: self.teacher_base_lr,
            peak_lr: self.teacher_peak_lr,
            warmup_epochs: self.teacher_warmup_epochs,
            weight_decay: self.weight_decay,
            seed,
        }
    }

    pub fn distill(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            epochs: self.epochs,
            base_lr: self.base_lr,
            peak_lr: self.peak_lr,
            warmup_epochs: self.warmup_epochs,
            adam_eps: self.adam_eps,
            adam_betas: (self.adam_beta1, self.adam_beta2),
            weight_decay: self.weight_decay,
            batch_size: 1,
            seed,
            feature_penalty_weight: self.feature_penalty_weight,
            temperature: self.temperature,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_library_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.model().unwrap(), ModelConfig::default());
        assert_eq!(c.distill(42), DistillConfig::default());
        assert_eq!(c.teacher(42), TeacherConfig::default());
        let spec = c.train_spec(42, 100);
        assert_eq!(spec, SynthSpec::default());
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = RunConfig::from_toml("epochs = 3\nd_model = 32\nconv_layers = [[32, 8, 4]]").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.n_heads, 4);
        assert_eq!(partial.model().unwrap().hop(), 4);
        assert!(matches!(RunConfig::from_toml("epoch = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn splits_use_distinct_seeds() {
        let c = RunConfig::default();
        let seeds = [c.train_spec(42, 1).seed, c.val_spec(42).seed, c.eval_spec(42).seed];
        assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2] && seeds[0] != seeds[2]);
    }
}
