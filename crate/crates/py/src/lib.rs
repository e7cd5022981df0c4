//! Python bindings. Waveforms, token lists and probability matrices cross
//! the boundary as plain lists; datasets are lists of `(waveform, tokens)`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use swav::data::{default_frequencies, generate_dataset as gen, SynthSpec, Utterance};
use swav::decode::{best_path_decode, word_error_rate, TokenSeq};
use swav::distill::{distill as run_distill, evaluate_wer as eval_wer, DistillConfig, ProbSeq};
use swav::model::{init_student, AcousticModel, ConvSpec, InferenceModel, LayerSelection, ModelConfig};
use swav::numerics::Tensor;
use swav::prune::SensitivityMap;
use swav::quant::{model_size_bytes, QuantizedModel};
use swav::teacher::{train_teacher as run_teacher, TeacherConfig};
use swav::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn utterances(data: Vec<(Vec<f64>, Vec<usize>)>) -> Vec<Utterance> {
    data.into_iter()
        .map(|(w, tokens)| Utterance {
            waveform: Tensor::vector(w),
            tokens,
        })
        .collect()
}

#[pyclass(name = "ModelConfig", module = "swav", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (conv_layers=None, d_model=64, n_layers=4, n_heads=4, ffn_dim=256, n_tokens=12, max_frames=128))]
    fn new(
        conv_layers: Option<Vec<(usize, usize, usize)>>,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        ffn_dim: usize,
        n_tokens: usize,
        max_frames: usize,
    ) -> PyResult<Self> {
        let conv_layers = match conv_layers {
            Some(c) => c.into_iter().map(|(o, k, s)| ConvSpec::new(o, k, s)).collect(),
            None => ModelConfig::default().conv_layers,
        };
        let inner = ModelConfig {
            conv_layers,
            d_model,
            n_transformer_layers: n_layers,
            n_heads,
            ffn_dim,
            n_tokens,
            max_frames,
        };
        inner.validate().map_err(py_err)?;
        Ok(PyModelConfig { inner })
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_transformer_layers
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn n_tokens(&self) -> usize {
        self.inner.n_tokens
    }

    #[getter]
    fn receptive_field(&self) -> usize {
        self.inner.receptive_field()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "AcousticModel", module = "swav", from_py_object)]
#[derive(Clone)]
struct PyAcousticModel {
    inner: AcousticModel,
}

#[pymethods]
impl PyAcousticModel {
    #[new]
    #[pyo3(signature = (config=None, seed=42))]
    fn new(config: Option<PyModelConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config.map_or_else(ModelConfig::default, |c| c.inner);
        Ok(PyAcousticModel {
            inner: AcousticModel::new(cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyAcousticModel {
            inner: swav::model::load_checkpoint(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        swav::model::save_checkpoint(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config().clone(),
        }
    }

    fn count_params(&self) -> usize {
        self.inner.count_params()
    }

    fn size_bytes(&self) -> usize {
        model_size_bytes(&self.inner)
    }

    /// Per-frame token logits.
    fn logits(&self, waveform: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.logits(&Tensor::vector(waveform)).map_err(py_err)?))
    }

    /// Best-path token ids.
    fn decode(&self, waveform: Vec<f64>) -> PyResult<Vec<usize>> {
        let logits = self.inner.logits(&Tensor::vector(waveform)).map_err(py_err)?;
        Ok(best_path_decode(&logits).tokens().to_vec())
    }

    /// A student initialised from this model's layers; `strategy` is
    /// "alternating" or "last_k".
    #[pyo3(signature = (keep, strategy="alternating"))]
    fn student(&self, keep: usize, strategy: &str) -> PyResult<Self> {
        let sel = match strategy {
            "alternating" => LayerSelection::Alternating { keep },
            "last_k" => LayerSelection::LastK { keep },
            other => return Err(PyValueError::new_err(format!("unknown strategy {other:?}"))),
        };
        Ok(PyAcousticModel {
            inner: init_student(&self.inner, &sel).map_err(py_err)?,
        })
    }

    fn quantize(&self) -> PyResult<PyQuantizedModel> {
        Ok(PyQuantizedModel {
            inner: swav::quant::quantize_model(&self.inner).map_err(py_err)?,
        })
    }

    /// Returns the pruned model and its global sparsity. Without a
    /// sensitivity the depth-scaled default groups are used.
    #[pyo3(signature = (sensitivity=None))]
    fn prune(&self, sensitivity: Option<f64>) -> PyResult<(Self, f64)> {
        let smap = match sensitivity {
            Some(s) => SensitivityMap::uniform(s).map_err(py_err)?,
            None => SensitivityMap::scaled_default(self.inner.config().n_transformer_layers),
        };
        let (m, report) = swav::prune::prune_model(&self.inner, &smap).map_err(py_err)?;
        Ok((PyAcousticModel { inner: m }, report.global_sparsity))
    }
}

#[pyclass(name = "QuantizedModel", module = "swav")]
struct PyQuantizedModel {
    inner: QuantizedModel,
}

#[pymethods]
impl PyQuantizedModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyQuantizedModel {
            inner: swav::quant::load_quantized(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        swav::quant::save_quantized(&self.inner, path).map_err(py_err)
    }

    fn prepack(&mut self) {
        self.inner = self.inner.clone().prepack();
    }

    #[getter]
    fn is_prepacked(&self) -> bool {
        self.inner.is_prepacked()
    }

    fn count_params(&self) -> usize {
        self.inner.count_params()
    }

    fn size_bytes(&self) -> usize {
        model_size_bytes(&self.inner)
    }

    fn logits(&self, waveform: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.logits(&Tensor::vector(waveform)).map_err(py_err)?))
    }

    fn decode(&self, waveform: Vec<f64>) -> PyResult<Vec<usize>> {
        let logits = self.inner.logits(&Tensor::vector(waveform)).map_err(py_err)?;
        Ok(best_path_decode(&logits).tokens().to_vec())
    }
}

/// Synthetic utterances as `(waveform, tokens)` pairs.
#[pyfunction]
#[pyo3(signature = (n, seed=42, n_tokens=12, noise_std=0.1, min_tokens=3, max_tokens=6))]
fn generate_dataset(
    n: usize,
    seed: u64,
    n_tokens: usize,
    noise_std: f64,
    min_tokens: usize,
    max_tokens: usize,
) -> PyResult<Vec<(Vec<f64>, Vec<usize>)>> {
    let spec = SynthSpec {
        seed,
        n_utterances: n,
        frequencies: default_frequencies(n_tokens),
        noise_std,
        min_tokens,
        max_tokens,
        ..SynthSpec::default()
    };
    let data = gen(&spec).map_err(py_err)?;
    Ok(data.into_iter().map(|u| (u.waveform.into_data(), u.tokens)).collect())
}

#[pyfunction]
#[pyo3(signature = (model, data, epochs=10, peak_lr=2e-3, seed=42))]
fn train_teacher(
    model: &PyAcousticModel,
    data: Vec<(Vec<f64>, Vec<usize>)>,
    epochs: usize,
    peak_lr: f64,
    seed: u64,
) -> PyResult<(PyAcousticModel, Vec<f64>)> {
    let cfg = TeacherConfig {
        epochs,
        peak_lr,
        base_lr: peak_lr / 10.0,
        warmup_epochs: TeacherConfig::default().warmup_epochs.min(epochs.saturating_sub(1)),
        seed,
        ..TeacherConfig::default()
    };
    let (m, history) = run_teacher(model.inner.clone(), &utterances(data), &cfg).map_err(py_err)?;
    Ok((PyAcousticModel { inner: m }, history.iter().map(|h| h.train_ctc).collect()))
}

/// Distills `student` towards `teacher`. Returns the best student and one
/// dict per epoch.
#[pyfunction]
#[pyo3(signature = (teacher, student, train, val, epochs=12, feature_penalty_weight=1.0, temperature=1.0, seed=42))]
#[allow(clippy::too_many_arguments)]
fn distill<'py>(
    py: Python<'py>,
    teacher: &PyAcousticModel,
    student: &PyAcousticModel,
    train: Vec<(Vec<f64>, Vec<usize>)>,
    val: Vec<(Vec<f64>, Vec<usize>)>,
    epochs: usize,
    feature_penalty_weight: f64,
    temperature: f64,
    seed: u64,
) -> PyResult<(PyAcousticModel, Vec<Bound<'py, PyDict>>)> {
    let cfg = DistillConfig {
        epochs,
        warmup_epochs: DistillConfig::default().warmup_epochs.min(epochs.saturating_sub(1)),
        feature_penalty_weight,
        temperature,
        seed,
        ..DistillConfig::default()
    };
    let out = run_distill(&teacher.inner, student.inner.clone(), &utterances(train), &utterances(val), &cfg)
        .map_err(py_err)?;
    let mut history = Vec::new();
    for r in &out.history {
        let d = PyDict::new(py);
        d.set_item("epoch", r.epoch)?;
        d.set_item("lr", r.lr)?;
        d.set_item("train_total", r.train_total)?;
        d.set_item("val_total", r.val_total)?;
        d.set_item("val_wer", r.val_wer)?;
        history.push(d);
    }
    Ok((PyAcousticModel { inner: out.student }, history))
}

/// Corpus WER of a float or quantized model.
#[pyfunction]
fn evaluate_wer(model: &Bound<'_, PyAny>, data: Vec<(Vec<f64>, Vec<usize>)>) -> PyResult<f64> {
    let data = utterances(data);
    if let Ok(m) = model.cast::<PyAcousticModel>() {
        return eval_wer(&m.borrow().inner, &data).map_err(py_err);
    }
    if let Ok(m) = model.cast::<PyQuantizedModel>() {
        return eval_wer(&m.borrow().inner, &data).map_err(py_err);
    }
    Err(PyValueError::new_err("expected an AcousticModel or QuantizedModel"))
}

/// Frame-averaged KL(T‖S) of two row-stochastic matrices.
#[pyfunction]
fn kl_distill_loss(teacher: Vec<Vec<f64>>, student: Vec<Vec<f64>>) -> PyResult<f64> {
    let t = ProbSeq::new(matrix(teacher)?).map_err(py_err)?;
    let s = ProbSeq::new(matrix(student)?).map_err(py_err)?;
    swav::distill::kl_distill_loss(&t, &s).map_err(py_err)
}

/// `(substitutions, insertions, deletions)`.
#[pyfunction]
fn edit_distance(reference: Vec<i64>, hypothesis: Vec<i64>) -> (usize, usize, usize) {
    let c = swav::decode::edit_distance(&reference, &hypothesis);
    (c.substitutions, c.insertions, c.deletions)
}

/// WER over token transcripts with word boundaries at token 1.
#[pyfunction]
#[pyo3(signature = (refs, hyps, n_tokens=12))]
fn word_error(refs: Vec<Vec<usize>>, hyps: Vec<Vec<usize>>, n_tokens: usize) -> PyResult<f64> {
    let seqs = |v: Vec<Vec<usize>>| -> PyResult<Vec<TokenSeq>> {
        v.into_iter().map(|t| TokenSeq::new(t, n_tokens).map_err(py_err)).collect()
    };
    Ok(word_error_rate(&seqs(refs)?, &seqs(hyps)?).map_err(py_err)?.wer)
}

#[pyfunction(name = "best_path_decode")]
fn py_best_path_decode(logits: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    Ok(best_path_decode(&matrix(logits)?).tokens().to_vec())
}

/// `(codes, scale)` of the symmetric int8 scheme.
#[pyfunction]
fn quantize_weights(w: Vec<f64>) -> PyResult<(Vec<i8>, f64)> {
    let (q, p) = swav::quant::quantize_weights(&Tensor::vector(w)).map_err(py_err)?;
    Ok((q, p.scale))
}

/// `(pruned, threshold)`.
#[pyfunction]
fn prune_layer(w: Vec<f64>, sensitivity: f64) -> PyResult<(Vec<f64>, f64)> {
    let (p, _, t) = swav::prune::prune_layer(&Tensor::vector(w), sensitivity).map_err(py_err)?;
    Ok((p.into_data(), t))
}

#[pymodule]
#[pyo3(name = "swav")]
fn swav_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyAcousticModel>()?;
    m.add_class::<PyQuantizedModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_wer, m)?)?;
    m.add_function(wrap_pyfunction!(kl_distill_loss, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(word_error, m)?)?;
    m.add_function(wrap_pyfunction!(py_best_path_decode, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_weights, m)?)?;
    m.add_function(wrap_pyfunction!(prune_layer, m)?)?;
    Ok(())
}
