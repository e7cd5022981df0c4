use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One strided convolution of the feature encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel_width: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel_width: usize, stride: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel_width,
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv_layers: Vec<ConvSpec>,
    pub d_model: usize,
    pub n_transformer_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Token inventory size, blank at index 0.
    pub n_tokens: usize,
    /// Length of the learned positional table, i.e. the longest frame
    /// sequence the model accepts.
    pub max_frames: usize,
}

impl Default for ModelConfig {
    /// The toy teacher: three stride-2 convolutions and four transformer layers.
    fn default() -> Self {
        ModelConfig {
            conv_layers: vec![
                ConvSpec::new(32, 16, 2),
                ConvSpec::new(32, 8, 2),
                ConvSpec::new(64, 8, 2),
            ],
            d_model: 64,
            n_transformer_layers: 4,
            n_heads: 4,
            ffn_dim: 256,
            n_tokens: 12,
            max_frames: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.conv_layers.is_empty() {
            return bad("at least one conv layer is required".into());
        }
        if self
            .conv_layers
            .iter()
            .any(|c| c.out_channels == 0 || c.kernel_width == 0 || c.stride == 0)
        {
            return bad("conv layers need positive channels, widths and strides".into());
        }
        let last = self.conv_layers.last().unwrap().out_channels;
        if last != self.d_model {
            return bad(format!(
                "last conv layer has {last} channels but d_model is {}",
                self.d_model
            ));
        }
        if self.n_transformer_layers == 0 {
            return bad("at least one transformer layer is required".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_dim == 0 || self.max_frames == 0 {
            return bad("ffn_dim and max_frames must be positive".into());
        }
        if self.n_tokens < 2 {
            return bad("n_tokens must include the blank and at least one symbol".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Product of conv strides: samples per output frame.
    pub fn hop(&self) -> usize {
        self.conv_layers.iter().map(|c| c.stride).product()
    }

    /// Input samples seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for c in &self.conv_layers {
            rf += (c.kernel_width - 1) * jump;
            jump *= c.stride;
        }
        rf
    }

    /// Frames produced from `samples` input samples, or `None` if the input
    /// is too short for the encoder.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        self.conv_layers.iter().try_fold(samples, |len, c| {
            crate::numerics::ops::conv_out_len(len, c.kernel_width, c.stride)
        })
    }

    /// Parameters of a single transformer layer.
    pub fn layer_param_count(&self) -> usize {
        let d = self.d_model;
        let attention = 4 * (d * d + d);
        let ffn = d * self.ffn_dim + self.ffn_dim + self.ffn_dim * d + d;
        let norms = 2 * 2 * d;
        attention + ffn + norms
    }

    /// Closed-form parameter count for this configuration.
    pub fn param_count(&self) -> usize {
        let mut c_in = 1;
        let mut conv = 0;
        for c in &self.conv_layers {
            conv += c.out_channels * c_in * c.kernel_width + c.out_channels;
            c_in = c.out_channels;
        }
        let positional = self.max_frames * self.d_model;
        let head = self.d_model * self.n_tokens + self.n_tokens;
        conv + positional + self.n_transformer_layers * self.layer_param_count() + head
    }

    /// Scalar weights that belong to linear (matrix-multiply) layers,
    /// including their biases.
    pub fn linear_param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * (d * d + d) + d * self.ffn_dim + self.ffn_dim + self.ffn_dim * d + d;
        self.n_transformer_layers * per_layer + d * self.n_tokens + self.n_tokens
    }

    pub fn with_layers(&self, n_transformer_layers: usize) -> Self {
        ModelConfig {
            n_transformer_layers,
            ..self.clone()
        }
    }
}
