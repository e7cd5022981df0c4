//! Sensitivity pruning: in every weight matrix, zero the entries whose
//! magnitude falls below `sensitivity × std(w)`.
//!
//! Prunable layers are the conv kernels (`conv.<i>`), the six linear maps of
//! each transformer layer (`layers.<i>.attn.q`, …, `layers.<i>.ffn.out`) and
//! the token head (`head`). Biases, layer norms and positions are never
//! pruned.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::AcousticModel;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Any,
    Range(usize, usize),
}

/// Dot-separated layer pattern. A segment is a literal, `*` (any single
/// segment), or an inclusive numeric range `a-b`; a trailing `*` matches one
/// or more remaining segments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPattern {
    text: String,
    segments: Vec<Segment>,
}

impl LayerPattern {
    pub fn parse(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Config("empty layer pattern".into()));
        }
        let segments = text
            .split('.')
            .map(|s| {
                if s == "*" {
                    return Ok(Segment::Any);
                }
                if let Some((a, b)) = s.split_once('-') {
                    let (a, b) = (a.parse::<usize>(), b.parse::<usize>());
                    return match (a, b) {
                        (Ok(a), Ok(b)) if a <= b => Ok(Segment::Range(a, b)),
                        _ => Err(Error::Config(format!("bad range segment {s:?} in {text:?}"))),
                    };
                }
                if s.is_empty() {
                    return Err(Error::Config(format!("empty segment in {text:?}")));
                }
                Ok(Segment::Literal(s.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(LayerPattern {
            text: text.to_string(),
            segments,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn matches(&self, layer: &str) -> bool {
        let parts: Vec<&str> = layer.split('.').collect();
        let n = self.segments.len();
        let tail = self.segments.last() == Some(&Segment::Any);
        if parts.len() < n || (!tail && parts.len() != n) {
            return false;
        }
        self.segments.iter().zip(&parts).all(|(seg, part)| match seg {
            Segment::Any => true,
            Segment::Literal(l) => l == part,
            Segment::Range(a, b) => part.parse::<usize>().is_ok_and(|v| (*a..=*b).contains(&v)),
        })
    }
}

/// Sensitivity per layer group. A layer must match exactly one rule or,
/// failing that, fall into the default group.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMap {
    rules: Vec<(LayerPattern, f64)>,
    default: Option<f64>,
}

impl SensitivityMap {
    pub fn new(default: Option<f64>) -> Result<Self> {
        if let Some(d) = default {
            check_sensitivity(d)?;
        }
        Ok(SensitivityMap {
            rules: Vec::new(),
            default,
        })
    }

    pub fn with_rule(mut self, pattern: &str, sensitivity: f64) -> Result<Self> {
        check_sensitivity(sensitivity)?;
        self.rules.push((LayerPattern::parse(pattern)?, sensitivity));
        Ok(self)
    }

    /// Every layer at the same sensitivity.
    pub fn uniform(sensitivity: f64) -> Result<Self> {
        Self::new(Some(sensitivity))
    }

    /// Group values scaled from a 24-layer model to `depth` layers:
    /// conv 0.1, layers `[⌈3D/24⌉, ⌈17D/24⌉)` 0.3, the remaining late layers
    /// 0.4, and 0 (unpruned) for the early layers and the head.
    pub fn scaled_default(depth: usize) -> Self {
        let mid_start = (3 * depth).div_ceil(24);
        let late_start = (17 * depth).div_ceil(24);
        let mut map = SensitivityMap::new(Some(0.0)).unwrap().with_rule("conv.*", 0.1).unwrap();
        if mid_start < late_start {
            map = map.with_rule(&format!("layers.{}-{}.*", mid_start, late_start - 1), 0.3).unwrap();
        }
        if late_start < depth {
            map = map.with_rule(&format!("layers.{}-{}.*", late_start, depth - 1), 0.4).unwrap();
        }
        map
    }

    /// `(group, sensitivity)` for a layer id.
    pub fn lookup(&self, layer: &str) -> Result<(String, f64)> {
        let hits: Vec<_> = self.rules.iter().filter(|(p, _)| p.matches(layer)).collect();
        match hits.as_slice() {
            [(p, s)] => Ok((p.as_str().to_string(), *s)),
            [] => self
                .default
                .map(|s| ("default".to_string(), s))
                .ok_or_else(|| Error::Config(format!("layer {layer} matches no sensitivity group"))),
            many => Err(Error::Config(format!(
                "layer {layer} matches {} groups: {}",
                many.len(),
                many.iter().map(|(p, _)| p.as_str()).collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

fn check_sensitivity(s: f64) -> Result<()> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::Config(format!("sensitivity {s} must be finite and nonnegative")));
    }
    Ok(())
}

/// Population standard deviation.
fn std_dev(w: &[f64]) -> f64 {
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Keeps entries with `|w| ≥ sensitivity · std(w)`. Returns the pruned
/// weights, the keep-mask and the threshold.
pub fn prune_layer(w: &Tensor, sensitivity: f64) -> Result<(Tensor, Vec<bool>, f64)> {
    check_sensitivity(sensitivity)?;
    if !w.all_finite() {
        return Err(Error::NonFinite("prune_layer"));
    }
    let t = sensitivity * std_dev(w.data());
    let mask: Vec<bool> = w.data().iter().map(|v| v.abs() >= t).collect();
    let mut out = w.clone();
    for (v, &keep) in out.data_mut().iter_mut().zip(&mask) {
        if !keep {
            *v = 0.0;
        }
    }
    Ok((out, mask, t))
}

/// Prunable weight tensors with their layer ids.
pub fn prunable_weights(model: &AcousticModel) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, c) in model.convs.iter().enumerate() {
        out.push((format!("conv.{i}"), &c.weight));
    }
    for (i, l) in model.layers.iter().enumerate() {
        for (name, lin) in l.linears() {
            out.push((format!("layers.{i}.{name}"), &lin.weight));
        }
    }
    out.push(("head".to_string(), &model.head.weight));
    out
}

fn prunable_weights_mut(model: &mut AcousticModel) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = model.convs.iter_mut().map(|c| &mut c.weight).collect();
    for l in &mut model.layers {
        for lin in [&mut l.q, &mut l.k, &mut l.v, &mut l.o, &mut l.ff_in, &mut l.ff_out] {
            out.push(&mut lin.weight);
        }
    }
    out.push(&mut model.head.weight);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerPruneRecord {
    pub layer: String,
    pub group: String,
    pub sensitivity: f64,
    pub threshold: f64,
    pub pruned: usize,
    pub total: usize,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub layers: Vec<LayerPruneRecord>,
    /// Zeroed weights over all prunable weights (including weights that
    /// were already zero).
    pub global_sparsity: f64,
}

impl PruneReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        if self.layers.is_empty() {
            w.write_record(["layer", "group", "sensitivity", "threshold", "pruned", "total", "sparsity"])?;
        }
        for r in &self.layers {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Applies [`prune_layer`] to every prunable layer with its group's
/// sensitivity. Layer sparsity counts all zero entries after pruning.
pub fn prune_model(model: &AcousticModel, smap: &SensitivityMap) -> Result<(AcousticModel, PruneReport)> {
    let ids: Vec<String> = prunable_weights(model).into_iter().map(|(n, _)| n).collect();
    let groups = ids.iter().map(|id| smap.lookup(id)).collect::<Result<Vec<_>>>()?;
    let mut pruned = model.clone();
    let mut layers = Vec::with_capacity(ids.len());
    for ((w, id), (group, s)) in prunable_weights_mut(&mut pruned).into_iter().zip(ids).zip(groups) {
        let (new, _, threshold) = prune_layer(w, s)?;
        *w = new;
        let zeros = w.data().iter().filter(|&&v| v == 0.0).count();
        layers.push(LayerPruneRecord {
            layer: id,
            group,
            sensitivity: s,
            threshold,
            pruned: zeros,
            total: w.len(),
            sparsity: zeros as f64 / w.len() as f64,
        });
    }
    let global_sparsity = sparsity(&pruned);
    Ok((pruned, PruneReport { layers, global_sparsity }))
}

/// Fraction of exactly-zero entries among all prunable weights.
pub fn sparsity(model: &AcousticModel) -> f64 {
    let (mut zeros, mut total) = (0usize, 0usize);
    for (_, w) in prunable_weights(model) {
        zeros += w.data().iter().filter(|&&v| v == 0.0).count();
        total += w.len();
    }
    zeros as f64 / total as f64
}
