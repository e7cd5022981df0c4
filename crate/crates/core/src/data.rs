//! Synthetic tone-to-token speech task.
//!
//! Every token is rendered as a fixed-length sinusoid at its own frequency;
//! an utterance concatenates the segments of its transcript and adds
//! Gaussian noise. Adjacent tokens always differ, so every token boundary is
//! audible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decode::BOUNDARY;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Tone frequency in Hz for every non-blank token id.
    pub frequencies: BTreeMap<usize, f64>,
    pub sample_rate: f64,
    pub noise_std: f64,
    /// Samples per token segment.
    pub segment_len: usize,
    pub amplitude: f64,
    /// Probability of a word boundary after a token, where one is allowed.
    pub boundary_prob: f64,
}

impl Default for SynthSpec {
    /// Eleven tones, 400 Hz to 3.4 kHz in 300 Hz steps, at 8 kHz.
    fn default() -> Self {
        SynthSpec {
            seed: 42,
            n_utterances: 100,
            min_tokens: 3,
            max_tokens: 6,
            frequencies: default_frequencies(12),
            sample_rate: 8000.0,
            noise_std: 0.1,
            segment_len: 64,
            amplitude: 0.5,
            boundary_prob: 0.3,
        }
    }
}

/// Evenly spaced tones for token ids `1..n_tokens`.
pub fn default_frequencies(n_tokens: usize) -> BTreeMap<usize, f64> {
    (1..n_tokens)
        .map(|id| (id, 400.0 + 300.0 * (id - 1) as f64))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub waveform: Tensor,
    pub tokens: Vec<usize>,
}

impl SynthSpec {
    /// Checks that tones are distinct, below Nyquist, and at least two DFT
    /// bins apart over a window of `receptive_field` samples.
    pub fn validate(&self, receptive_field: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!(
                "token range [{}, {}] is empty",
                self.min_tokens, self.max_tokens
            ));
        }
        if self.segment_len == 0 || self.sample_rate <= 0.0 || self.noise_std < 0.0 {
            return bad("segment_len, sample_rate and noise_std must be positive".into());
        }
        if self.frequencies.contains_key(&crate::decode::BLANK) {
            return bad("the blank token has no tone".into());
        }
        let tones = self.frequencies.keys().filter(|&&t| t != BOUNDARY).count();
        if tones < 2 {
            return bad("need at least two tone tokens".into());
        }
        let nyquist = self.sample_rate / 2.0;
        let bin = self.sample_rate / receptive_field as f64;
        let mut freqs: Vec<f64> = self.frequencies.values().copied().collect();
        freqs.sort_by(f64::total_cmp);
        if freqs.iter().any(|&f| !(f > 0.0 && f < nyquist)) {
            return bad(format!("tone frequencies must lie in (0, {nyquist}) Hz"));
        }
        for w in freqs.windows(2) {
            if w[1] - w[0] < 2.0 * bin {
                return bad(format!(
                    "tones {} and {} Hz are closer than two DFT bins ({:.1} Hz)",
                    w[0],
                    w[1],
                    2.0 * bin
                ));
            }
        }
        Ok(())
    }

    /// Longest utterance in samples.
    pub fn max_samples(&self) -> usize {
        self.max_tokens * self.segment_len
    }
}

fn transcript(spec: &SynthSpec, rng: &mut Rng) -> Vec<usize> {
    let tones: Vec<usize> = spec.frequencies.keys().copied().filter(|&t| t != BOUNDARY).collect();
    let has_boundary = spec.frequencies.contains_key(&BOUNDARY);
    let len = spec.min_tokens + rng.below(spec.max_tokens - spec.min_tokens + 1);
    let mut out: Vec<usize> = Vec::with_capacity(len);
    for i in 0..len {
        let prev = out.last().copied();
        let boundary_ok = has_boundary && i > 0 && i + 1 < len && prev != Some(BOUNDARY);
        if boundary_ok && rng.uniform() < spec.boundary_prob {
            out.push(BOUNDARY);
            continue;
        }
        loop {
            let t = tones[rng.below(tones.len())];
            if Some(t) != prev {
                out.push(t);
                break;
            }
        }
    }
    out
}

/// Renders a transcript without noise, with the given per-segment phases.
fn render(spec: &SynthSpec, tokens: &[usize], phases: &[f64]) -> Vec<f64> {
    let mut wave = Vec::with_capacity(tokens.len() * spec.segment_len);
    for (t, &phase) in tokens.iter().zip(phases) {
        let f = spec.frequencies[t];
        let w = 2.0 * std::f64::consts::PI * f / spec.sample_rate;
        wave.extend((0..spec.segment_len).map(|n| spec.amplitude * (w * n as f64 + phase).sin()));
    }
    wave
}

/// Deterministic dataset for `spec`; nested in the sense that a larger
/// `n_utterances` with the same seed extends a smaller one.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Vec<Utterance>> {
    let mut root = Rng::new(spec.seed);
    let mut out = Vec::with_capacity(spec.n_utterances);
    for _ in 0..spec.n_utterances {
        let mut rng = root.split();
        let tokens = transcript(spec, &mut rng);
        let phases: Vec<f64> = tokens
            .iter()
            .map(|_| rng.uniform() * 2.0 * std::f64::consts::PI)
            .collect();
        let mut wave = render(spec, &tokens, &phases);
        if spec.noise_std > 0.0 {
            for v in &mut wave {
                *v += rng.normal() * spec.noise_std;
            }
        }
        out.push(Utterance {
            waveform: Tensor::vector(wave),
            tokens,
        });
    }
    Ok(out)
}
