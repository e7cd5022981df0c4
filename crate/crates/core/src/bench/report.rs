use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::decode::best_path_decode;
use crate::error::{Error, Result};
use crate::model::InferenceModel;

pub const REPORT_HEADER: &str = "model,layers,params,bytes,cpu_s,wer";

/// One row of a size/latency/accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub layers: usize,
    pub params: usize,
    pub bytes: usize,
    /// Median wall-clock seconds for forward + decode over the eval set.
    pub cpu_s: f64,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub median_s: f64,
    pub samples_s: Vec<f64>,
    pub utterances: usize,
}

/// Times forward + best-path decoding over `eval`: one untimed warm-up
/// pass, then `repeats` timed passes whose median is reported.
pub fn measure_inference(model: &impl InferenceModel, eval: &[Utterance], repeats: usize) -> Result<Timing> {
    Ok(measure_interleaved(&[model as &dyn InferenceModel], eval, repeats)?.remove(0))
}

/// Like [`measure_inference`] for several models at once. Within every pass
/// each utterance is run through all models back to back, starting from a
/// different model each time, so that load changes on the machine land on
/// all models alike instead of on whichever one happened to be timed then.
pub fn measure_interleaved(models: &[&dyn InferenceModel], eval: &[Utterance], repeats: usize) -> Result<Vec<Timing>> {
    if repeats < 3 {
        return Err(Error::Contract(format!("need at least 3 timing repeats, got {repeats}")));
    }
    let n = models.len();
    let mut samples = vec![Vec::with_capacity(repeats); n];
    for rep in 0..=repeats {
        let mut totals = vec![0.0; n];
        for (i, u) in eval.iter().enumerate() {
            for j in 0..n {
                let m = (i + j) % n;
                let t = Instant::now();
                std::hint::black_box(best_path_decode(&models[m].logits(&u.waveform)?));
                totals[m] += t.elapsed().as_secs_f64();
            }
        }
        // The first pass only warms up.
        if rep > 0 {
            for (s, t) in samples.iter_mut().zip(totals) {
                s.push(t);
            }
        }
    }
    Ok(samples
        .into_iter()
        .map(|samples_s| {
            let mut sorted = samples_s.clone();
            sorted.sort_by(f64::total_cmp);
            let median_s = if repeats % 2 == 1 {
                sorted[repeats / 2]
            } else {
                0.5 * (sorted[repeats / 2 - 1] + sorted[repeats / 2])
            };
            Timing {
                median_s,
                samples_s,
                utterances: eval.len(),
            }
        })
        .collect())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes reports as CSV under [`REPORT_HEADER`].
pub fn emit_report(reports: &[BenchReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    if reports.is_empty() {
        w.write_record(REPORT_HEADER.split(','))?;
    }
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<BenchReport>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != REPORT_HEADER {
        return Err(Error::Malformed(format!("unexpected report header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Plot data for one curve: an `x,y` CSV.
pub fn write_curve(path: impl AsRef<Path>, points: &[(f64, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["x", "y"])?;
    for (x, y) in points {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
