//! Dynamic int8 quantization of the linear layers.
//!
//! Weights are stored as symmetric per-tensor int8; activations are
//! quantized on the fly in every forward pass. Convolutions, layer norms and
//! the attention score path stay in float.

mod linear;
mod model;
mod scheme;

pub use linear::{qlinear_error_bound, qlinear_forward, unpack_count, QuantizedLinear, MAX_IN_FEATURES};
pub use model::{
    load_quantized, model_size_bytes, quantize_model, save_quantized, QuantizedModel, SerializedSize, QMAGIC,
    QVERSION,
};
pub use scheme::{dequantize, dynamic_activation_params, quantize_weights, QuantParams};
