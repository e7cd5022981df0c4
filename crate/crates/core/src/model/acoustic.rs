use super::layers::{LayerVars, LinearVars, NormVars};
use super::{ConvLayer, EncoderLayer, InferenceModel, Linear, LinearLayer, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ops, round_to_f32, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticModel {
    config: ModelConfig,
    pub convs: Vec<ConvLayer>,
    /// `max_frames × d_model`, added to the conv features.
    pub positions: Tensor,
    pub layers: Vec<EncoderLayer<Linear>>,
    pub head: Linear,
}

/// Result of a tape-free forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `N×M` token logits.
    pub logits: Tensor,
    /// `N×C` output of the last convolution, after its activation.
    pub conv_out: Tensor,
}

/// Handles produced by [`AcousticModel::forward_tape`].
pub struct TapeForward {
    pub logits: Var,
    pub conv_out: Var,
    /// Parameter leaves in [`AcousticModel::params`] order.
    pub params: Vec<Var>,
}

impl AcousticModel {
    /// Randomly initialised model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut convs = Vec::with_capacity(config.conv_layers.len());
        let mut c_in = 1;
        for c in &config.conv_layers {
            convs.push(ConvLayer::init(c_in, c.out_channels, c.kernel_width, c.stride, &mut rng));
            c_in = c.out_channels;
        }
        let mut positions = Tensor::zeros(&[config.max_frames, config.d_model]);
        for v in positions.data_mut() {
            *v = rng.normal() * 0.02;
        }
        round_to_f32(positions.data_mut());
        let layers = (0..config.n_transformer_layers)
            .map(|_| EncoderLayer::init(config.d_model, config.ffn_dim, &mut rng))
            .collect();
        let head = Linear::init(config.d_model, config.n_tokens, &mut rng);
        Ok(AcousticModel {
            config,
            convs,
            positions,
            layers,
            head,
        })
    }

    /// Assembles a model from parts; shapes must agree with `config`.
    pub fn from_parts(
        config: ModelConfig,
        convs: Vec<ConvLayer>,
        positions: Tensor,
        layers: Vec<EncoderLayer<Linear>>,
        head: Linear,
    ) -> Result<Self> {
        config.validate()?;
        let model = AcousticModel {
            config,
            convs,
            positions,
            layers,
            head,
        };
        let template = AcousticModel::new(model.config.clone(), 0)?;
        let ok = model.params().len() == template.params().len()
            && model
                .params()
                .iter()
                .zip(template.params())
                .all(|(a, b)| a.shape() == b.shape());
        if !ok {
            return Err(Error::Config("parameter shapes do not match the config".into()));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Exact number of scalar weights, counted from the stored tensors.
    pub fn count_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in canonical order: conv layers (weight, bias),
    /// positional table, then per transformer layer
    /// q, k, v, o (weight, bias each), ln1 (gain, bias), ffn in, ffn out,
    /// ln2, and finally the head (weight, bias).
    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv.{i}.weight"), &c.weight));
            out.push((format!("conv.{i}.bias"), &c.bias));
        }
        out.push(("positions".to_string(), &self.positions));
        for (i, l) in self.layers.iter().enumerate() {
            for (name, lin) in &l.linears()[..4] {
                out.push((format!("layers.{i}.{name}.weight"), &lin.weight));
                out.push((format!("layers.{i}.{name}.bias"), &lin.bias));
            }
            out.push((format!("layers.{i}.ln1.gain"), &l.ln1.gain));
            out.push((format!("layers.{i}.ln1.bias"), &l.ln1.bias));
            for (name, lin) in &l.linears()[4..] {
                out.push((format!("layers.{i}.{name}.weight"), &lin.weight));
                out.push((format!("layers.{i}.{name}.bias"), &lin.bias));
            }
            out.push((format!("layers.{i}.ln2.gain"), &l.ln2.gain));
            out.push((format!("layers.{i}.ln2.bias"), &l.ln2.bias));
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    /// Mutable parameters, same order as [`AcousticModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.positions);
        for l in &mut self.layers {
            for lin in [&mut l.q, &mut l.k, &mut l.v, &mut l.o] {
                out.push(&mut lin.weight);
                out.push(&mut lin.bias);
            }
            out.push(&mut l.ln1.gain);
            out.push(&mut l.ln1.bias);
            for lin in [&mut l.ff_in, &mut l.ff_out] {
                out.push(&mut lin.weight);
                out.push(&mut lin.bias);
            }
            out.push(&mut l.ln2.gain);
            out.push(&mut l.ln2.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    fn check_waveform(&self, waveform: &Tensor) -> Result<usize> {
        check_waveform(&self.config, waveform)
    }

    /// Conv encoder output (`N×C`) for a waveform.
    pub fn encode_features(&self, waveform: &Tensor) -> Result<Tensor> {
        conv_features(&self.convs, waveform)
    }

    pub fn forward(&self, waveform: &Tensor) -> Result<ForwardOutput> {
        run_encoder(&self.config, &self.convs, &self.positions, &self.layers, &self.head, waveform)
    }

    /// Records the forward pass on `tape`. Parameters become leaves that
    /// require gradients when `trainable` is set.
    pub fn forward_tape(&self, tape: &mut Tape, waveform: &Tensor, trainable: bool) -> Result<TapeForward> {
        let n = self.check_waveform(waveform)?;
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect();
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter layout");

        let mut x = tape.constant(waveform.clone().reshape(vec![1, waveform.len()])?);
        for c in &self.convs {
            let (w, b) = (next(), next());
            let y = tape.conv1d(x, w, b, c.stride)?;
            x = tape.gelu(y);
        }
        let conv_out = tape.transpose(x)?;
        let positions = next();
        let pos = tape.slice_rows(positions, 0, n)?;
        let mut h = tape.add(conv_out, pos)?;
        for _ in &self.layers {
            let mut lin = || LinearVars {
                weight: next(),
                bias: next(),
            };
            let (q, k, v, o) = (lin(), lin(), lin(), lin());
            let ln1 = NormVars {
                gain: next(),
                bias: next(),
            };
            let mut lin = || LinearVars {
                weight: next(),
                bias: next(),
            };
            let (ff_in, ff_out) = (lin(), lin());
            let ln2 = NormVars {
                gain: next(),
                bias: next(),
            };
            let vars = LayerVars {
                q,
                k,
                v,
                o,
                ln1,
                ff_in,
                ff_out,
                ln2,
            };
            h = vars.forward(tape, h, self.config.n_heads)?;
        }
        let head = LinearVars {
            weight: next(),
            bias: next(),
        };
        let logits = head.forward(tape, h)?;
        Ok(TapeForward {
            logits,
            conv_out,
            params,
        })
    }
}

/// Frame count for `waveform`, rejecting inputs that are too short or yield
/// more frames than the positional table holds.
pub(crate) fn check_waveform(config: &ModelConfig, waveform: &Tensor) -> Result<usize> {
    let n = config.frames_for(waveform.len()).ok_or(Error::Length {
        op: "forward",
        len: waveform.len(),
        min: config.receptive_field(),
    })?;
    if n > config.max_frames {
        return Err(Error::Contract(format!(
            "waveform of {} samples yields {n} frames; the model accepts at most {}",
            waveform.len(),
            config.max_frames
        )));
    }
    Ok(n)
}

/// Plain forward pass shared by the float and quantized models.
pub(crate) fn run_encoder<L: LinearLayer>(
    config: &ModelConfig,
    convs: &[ConvLayer],
    positions: &Tensor,
    layers: &[EncoderLayer<L>],
    head: &L,
    waveform: &Tensor,
) -> Result<ForwardOutput> {
    let n = check_waveform(config, waveform)?;
    let conv_out = conv_features(convs, waveform)?;
    let pos = ops::slice_rows(positions, 0, n)?;
    let mut h = ops::add(&conv_out, &pos)?;
    for layer in layers {
        h = layer.forward(&h, config.n_heads)?;
    }
    let logits = head.project(&h)?;
    Ok(ForwardOutput { logits, conv_out })
}

/// Runs the conv stack and returns `N×C` features.
pub(crate) fn conv_features(convs: &[ConvLayer], waveform: &Tensor) -> Result<Tensor> {
    let mut x = waveform.clone().reshape(vec![1, waveform.len()])?;
    for c in convs {
        x = c.forward(&x)?;
    }
    ops::transpose(&x)
}

impl InferenceModel for AcousticModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn logits(&self, waveform: &Tensor) -> Result<Tensor> {
        Ok(self.forward(waveform)?.logits)
    }
}
