//! Dense row-major tensors, the kernels that operate on them, and a
//! reverse-mode tape for training.
//!
//! Values are stored as `f64`. Model parameters are additionally kept
//! exactly representable in `f32` (see [`round_to_f32`]) so that checkpoints
//! store them without loss.

pub mod ops;
mod rng;
mod tape;
mod tensor;

pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Rounds every value to the nearest `f32`.
pub fn round_to_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}
