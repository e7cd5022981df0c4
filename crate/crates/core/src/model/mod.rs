//! wav2vec-style acoustic model: a strided convolutional feature encoder,
//! post-norm transformer encoder layers, and a linear token head.

pub(crate) mod acoustic;
pub(crate) mod checkpoint;
mod config;
pub(crate) mod layers;
mod student;

pub use acoustic::{AcousticModel, ForwardOutput, TapeForward};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ConvSpec, ModelConfig};
pub use layers::{ConvLayer, EncoderLayer, LayerNorm, Linear, LinearLayer};
pub use student::{init_student, LayerSelection};

use crate::error::Result;
use crate::numerics::Tensor;

/// Anything that maps a waveform to per-frame token logits.
pub trait InferenceModel {
    fn config(&self) -> &ModelConfig;

    /// Logits of shape `N×M` for a single waveform.
    fn logits(&self, waveform: &Tensor) -> Result<Tensor>;
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
