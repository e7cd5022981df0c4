use super::report::{measure_interleaved, BenchReport};
use crate::data::Utterance;
use crate::distill::{distill, evaluate_wer, DistillConfig, EpochRecord};
use crate::error::{Error, Result};
use crate::model::{init_student, AcousticModel, InferenceModel, LayerSelection};
use crate::quant::{model_size_bytes, quantize_model};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepOptions {
    /// Timed passes per model (the median is reported).
    pub repeats: usize,
    /// Train independent configurations on separate threads. Timing always
    /// runs afterwards on one thread.
    pub parallel: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            repeats: 5,
            parallel: false,
        }
    }
}

/// Applies `f` to every item, on scoped threads when `parallel` is set.
/// Results come back in input order either way.
fn map_jobs<T: Sync, R: Send>(items: &[T], parallel: bool, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if !parallel {
        return items.iter().map(f).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = items.iter().map(|it| s.spawn(|| f(it))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment thread panicked"))
            .collect()
    })
}

fn report_float(name: &str, model: &AcousticModel, eval: &[Utterance], cpu_s: f64) -> Result<BenchReport> {
    Ok(BenchReport {
        model: name.to_string(),
        layers: model.config().n_transformer_layers,
        params: model.count_params(),
        bytes: model_size_bytes(model),
        cpu_s,
        wer: evaluate_wer(model, eval)?,
    })
}

/// Median pass times, all models timed together.
fn median_times(models: &[&dyn InferenceModel], eval: &[Utterance], repeats: usize) -> Result<Vec<f64>> {
    Ok(measure_interleaved(models, eval, repeats)?.into_iter().map(|t| t.median_s).collect())
}

/// Distills one Alternating student per layer count and reports the teacher
/// followed by each student, in the order given.
pub fn run_tradeoff_sweep(
    teacher: &AcousticModel,
    layer_counts: &[usize],
    train: &[Utterance],
    val: &[Utterance],
    eval: &[Utterance],
    cfg: &DistillConfig,
    opts: &SweepOptions,
) -> Result<Vec<BenchReport>> {
    let depth = teacher.config().n_transformer_layers;
    if let Some(&bad) = layer_counts.iter().find(|&&k| k == 0 || k > depth) {
        return Err(Error::Selection(format!("cannot build a {bad}-layer student from {depth} layers")));
    }
    let students = map_jobs(layer_counts, opts.parallel, |&k| {
        let student = init_student(teacher, &LayerSelection::Alternating { keep: k })?;
        Ok(distill(teacher, student, train, val, cfg)?.student)
    })?;
    let mut models: Vec<&dyn InferenceModel> = vec![teacher];
    models.extend(students.iter().map(|s| s as &dyn InferenceModel));
    let times = median_times(&models, eval, opts.repeats)?;
    let mut out = vec![report_float("teacher", teacher, eval, times[0])?];
    for ((k, s), &t) in layer_counts.iter().zip(&students).zip(&times[1..]) {
        out.push(report_float(&format!("student-{k}"), s, eval, t)?);
    }
    Ok(out)
}

/// Original, distilled and quantized rows.
pub fn run_table1(
    teacher: &AcousticModel,
    student: &AcousticModel,
    eval: &[Utterance],
    repeats: usize,
) -> Result<Vec<BenchReport>> {
    let q = quantize_model(teacher)?.prepack();
    let times = median_times(&[teacher, student, &q], eval, repeats)?;
    let quantized = BenchReport {
        model: "quantized".into(),
        layers: q.config().n_transformer_layers,
        params: q.count_params(),
        bytes: model_size_bytes(&q),
        cpu_s: times[2],
        wer: evaluate_wer(&q, eval)?,
    };
    Ok(vec![
        report_float("original", teacher, eval, times[0])?,
        report_float("distilled", student, eval, times[1])?,
        quantized,
    ])
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitExperiment {
    pub alternating: Vec<EpochRecord>,
    pub last_k: Vec<EpochRecord>,
}

/// Distills Alternating(k) and LastK(k) students under identical settings.
pub fn run_init_experiment(
    teacher: &AcousticModel,
    k: usize,
    train: &[Utterance],
    val: &[Utterance],
    cfg: &DistillConfig,
    parallel: bool,
) -> Result<InitExperiment> {
    let depth = teacher.config().n_transformer_layers;
    if k == 0 || k >= depth {
        return Err(Error::Contract(format!(
            "k must lie in [1, {depth}); at k = {depth} both strategies copy every layer"
        )));
    }
    let sels = [LayerSelection::Alternating { keep: k }, LayerSelection::LastK { keep: k }];
    let mut runs = map_jobs(&sels, parallel, |sel| {
        Ok(distill(teacher, init_student(teacher, sel)?, train, val, cfg)?.history)
    })?;
    let last_k = runs.pop().unwrap();
    let alternating = runs.pop().unwrap();
    Ok(InitExperiment { alternating, last_k })
}

/// Distills identical Alternating(k) students on nested prefixes of `pool`,
/// one per size, all validated on `val`.
pub fn run_data_experiment(
    teacher: &AcousticModel,
    k: usize,
    sizes: &[usize],
    pool: &[Utterance],
    val: &[Utterance],
    cfg: &DistillConfig,
    parallel: bool,
) -> Result<Vec<(usize, Vec<EpochRecord>)>> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Contract("data sizes must be nondecreasing".into()));
    }
    if let Some(&bad) = sizes.iter().find(|&&n| n == 0 || n > pool.len()) {
        return Err(Error::Contract(format!("size {bad} outside [1, {}]", pool.len())));
    }
    let student = init_student(teacher, &LayerSelection::Alternating { keep: k })?;
    map_jobs(sizes, parallel, |&n| {
        Ok((n, distill(teacher, student.clone(), &pool[..n], val, cfg)?.history))
    })
}
