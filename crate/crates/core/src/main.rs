use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use swav::bench::{
    emit_report, run_data_experiment, run_init_experiment, run_table1, run_tradeoff_sweep, write_curve, RunConfig,
    SweepOptions,
};
use swav::data::{generate_dataset, Utterance};
use swav::decode::{best_path_decode, token_error_rate, word_error_rate, write_dump, TokenSeq, Vocab};
use swav::distill::{distill, evaluate_wer, write_history, EpochRecord};
use swav::model::{init_student, load_checkpoint, save_checkpoint, AcousticModel, InferenceModel, LayerSelection};
use swav::prune::{prune_model, SensitivityMap};
use swav::quant::{load_quantized, model_size_bytes, quantize_model, save_quantized, QMAGIC};
use swav::teacher::train_teacher;
use swav::{Error, Result};

#[derive(Parser)]
#[command(name = "swav", version, about = "Compress a toy wav2vec-style acoustic model and measure the trade-offs")]
struct Cli {
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Flat TOML settings file; see `RunConfig` for keys and defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Alternating,
    LastK,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic train/val/eval splits.
    GenData,
    /// Train the teacher with CTC.
    TrainTeacher,
    /// Distill a smaller student from the teacher.
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, value_enum, default_value = "alternating")]
        init: Init,
    },
    /// Quantize a float checkpoint to int8.
    Quantize {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Sensitivity-prune a float checkpoint.
    Prune {
        #[arg(long)]
        model: Option<PathBuf>,
        /// One sensitivity for every layer instead of the default groups.
        #[arg(long)]
        sensitivity: Option<f64>,
    },
    /// Score a float or quantized checkpoint on the eval split.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Original / distilled / quantized comparison.
    Bench {
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Students of several depths against the teacher.
    SweepLayers {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Alternating versus last-k initialisation curves.
    ExpInit {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        layers: Option<usize>,
    },
    /// Validation curves for nested training sets of several sizes.
    ExpData {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
}

struct Ctx {
    seed: u64,
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data(&self) -> Result<(Vec<Utterance>, Vec<Utterance>, Vec<Utterance>)> {
        let model = self.cfg.model()?;
        let train_spec = self.cfg.train_spec(self.seed, self.cfg.n_teacher.max(self.cfg.n_train));
        train_spec.validate(model.receptive_field())?;
        Ok((
            generate_dataset(&train_spec)?,
            generate_dataset(&self.cfg.val_spec(self.seed))?,
            generate_dataset(&self.cfg.eval_spec(self.seed))?,
        ))
    }

    fn train_teacher(&self, pool: &[Utterance]) -> Result<AcousticModel> {
        let init = AcousticModel::new(self.cfg.model()?, self.seed)?;
        let (teacher, history) = train_teacher(init, &pool[..self.cfg.n_teacher], &self.cfg.teacher(self.seed))?;
        let mut w = csv::Writer::from_path(self.path("teacher_history.csv"))?;
        for h in &history {
            w.serialize(h)?;
        }
        w.flush().map_err(|e| Error::io(self.path("teacher_history.csv"), e))?;
        save_checkpoint(&teacher, self.path("teacher.swav"))?;
        Ok(teacher)
    }

    /// An explicit path, else `<out>/teacher.swav`, else a freshly trained one.
    fn teacher(&self, explicit: Option<&Path>, pool: &[Utterance]) -> Result<AcousticModel> {
        if let Some(p) = explicit {
            return load_checkpoint(p);
        }
        let default = self.path("teacher.swav");
        if default.exists() {
            return load_checkpoint(default);
        }
        eprintln!("no teacher checkpoint found; training one");
        self.train_teacher(pool)
    }
}

fn print_history(h: &[EpochRecord]) {
    for r in h {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  train {:.4}  val {:.4}  val_wer {:.4}",
            r.epoch, r.lr, r.train_total, r.val_total, r.val_wer
        );
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned())
}

fn write_split(dir: &Path, name: &str, data: &[Utterance], vocab: &Vocab) -> Result<()> {
    let seqs = data
        .iter()
        .map(|u| TokenSeq::new(u.tokens.clone(), vocab.n_tokens))
        .collect::<Result<Vec<_>>>()?;
    write_dump(dir.join(format!("{name}.txt")), vocab, &seqs)?;
    let mut bytes = Vec::new();
    let mut index = csv::Writer::from_path(dir.join(format!("{name}.index.csv")))?;
    index.write_record(["utterance", "offset", "samples"])?;
    for (i, u) in data.iter().enumerate() {
        index.write_record([i.to_string(), (bytes.len() / 4).to_string(), u.waveform.len().to_string()])?;
        for &v in u.waveform.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    index.flush().map_err(|e| Error::io(dir, e))?;
    let p = dir.join(format!("{name}.f32"));
    std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
}

fn score(model: &impl InferenceModel, eval: &[Utterance], ctx: &Ctx) -> Result<()> {
    let vocab = Vocab::new(model.config().n_tokens);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    for u in eval {
        refs.push(TokenSeq::new(u.tokens.clone(), vocab.n_tokens)?);
        hyps.push(best_path_decode(&model.logits(&u.waveform)?));
    }
    let w = word_error_rate(&refs, &hyps)?;
    let t = token_error_rate(&refs, &hyps)?;
    write_dump(ctx.path("refs.txt"), &vocab, &refs)?;
    write_dump(ctx.path("hyps.txt"), &vocab, &hyps)?;
    println!(
        "wer {:.4} (S {} I {} D {} of {} words)  token error rate {:.4}",
        w.wer, w.substitutions, w.insertions, w.deletions, w.ref_len, t.wer
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let ctx = Ctx {
        seed: cli.seed,
        cfg,
        out: cli.out,
    };
    let dcfg = ctx.cfg.distill(ctx.seed);
    let opts = SweepOptions {
        repeats: ctx.cfg.timing_repeats,
        parallel: ctx.cfg.parallel,
    };
    let (pool, val, eval) = ctx.data()?;
    let train = &pool[..ctx.cfg.n_train.min(pool.len())];
    match cli.cmd {
        Cmd::GenData => {
            let dir = ctx.path("data");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let vocab = Vocab::new(ctx.cfg.n_tokens);
            for (name, split) in [("train", &pool[..]), ("val", &val[..]), ("eval", &eval[..])] {
                write_split(&dir, name, split, &vocab)?;
            }
            println!("wrote {} / {} / {} utterances to {}", pool.len(), val.len(), eval.len(), dir.display());
        }
        Cmd::TrainTeacher => {
            let teacher = ctx.train_teacher(&pool)?;
            println!("teacher eval wer {:.4}", evaluate_wer(&teacher, &eval)?);
        }
        Cmd::Distill { teacher, layers, init } => {
            let teacher = ctx.teacher(teacher.as_deref(), &pool)?;
            let k = layers.unwrap_or(ctx.cfg.student_layers);
            let sel = match init {
                Init::Alternating => LayerSelection::Alternating { keep: k },
                Init::LastK => LayerSelection::LastK { keep: k },
            };
            let out = distill(&teacher, init_student(&teacher, &sel)?, train, &val, &dcfg)?;
            print_history(&out.history);
            write_history(ctx.path("distill_history.csv"), &out.history)?;
            save_checkpoint(&out.student, ctx.path("student.swav"))?;
            println!("student eval wer {:.4}", evaluate_wer(&out.student, &eval)?);
        }
        Cmd::Quantize { model } => {
            let path = model.unwrap_or_else(|| ctx.path("teacher.swav"));
            let m = load_checkpoint(&path)?;
            let q = quantize_model(&m)?;
            let dest = ctx.path(&format!("{}.swq8", stem(&path)));
            save_quantized(&q, &dest)?;
            let (fb, qb) = (model_size_bytes(&m), model_size_bytes(&q));
            println!("float {fb} bytes, quantized {qb} bytes (ratio {:.3}) -> {}", qb as f64 / fb as f64, dest.display());
            println!("wer float {:.4}, quantized {:.4}", evaluate_wer(&m, &eval)?, evaluate_wer(&q, &eval)?);
        }
        Cmd::Prune { model, sensitivity } => {
            let path = model.unwrap_or_else(|| ctx.path("teacher.swav"));
            let m = load_checkpoint(&path)?;
            let smap = match sensitivity {
                Some(s) => SensitivityMap::uniform(s)?,
                None => SensitivityMap::scaled_default(m.config().n_transformer_layers),
            };
            let (pruned, report) = prune_model(&m, &smap)?;
            report.write_csv(ctx.path("prune_report.csv"))?;
            save_checkpoint(&pruned, ctx.path(&format!("{}.pruned.swav", stem(&path))))?;
            println!("global sparsity {:.4}", report.global_sparsity);
            println!("wer float {:.4}, pruned {:.4}", evaluate_wer(&m, &eval)?, evaluate_wer(&pruned, &eval)?);
        }
        Cmd::Eval { model } => {
            let path = model.unwrap_or_else(|| ctx.path("teacher.swav"));
            let head = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if head.starts_with(&QMAGIC) {
                score(&load_quantized(&path)?, &eval, &ctx)?;
            } else {
                score(&load_checkpoint(&path)?, &eval, &ctx)?;
            }
        }
        Cmd::Bench { teacher } => {
            let teacher = ctx.teacher(teacher.as_deref(), &pool)?;
            let sel = LayerSelection::Alternating {
                keep: ctx.cfg.student_layers,
            };
            let out = distill(&teacher, init_student(&teacher, &sel)?, train, &val, &dcfg)?;
            let rows = run_table1(&teacher, &out.student, &eval, opts.repeats)?;
            emit_report(&rows, ctx.path("table1.csv"))?;
            for r in &rows {
                println!("{:<10} layers {} params {} bytes {} cpu_s {:.4} wer {:.4}", r.model, r.layers, r.params, r.bytes, r.cpu_s, r.wer);
            }
        }
        Cmd::SweepLayers { teacher, counts } => {
            let teacher = ctx.teacher(teacher.as_deref(), &pool)?;
            let counts = counts.unwrap_or_else(|| ctx.cfg.sweep_layers.clone());
            let rows = run_tradeoff_sweep(&teacher, &counts, train, &val, &eval, &dcfg, &opts)?;
            emit_report(&rows, ctx.path("table2.csv"))?;
            for r in &rows {
                println!("{:<10} layers {} params {} cpu_s {:.4} wer {:.4}", r.model, r.layers, r.params, r.cpu_s, r.wer);
            }
        }
        Cmd::ExpInit { teacher, layers } => {
            let teacher = ctx.teacher(teacher.as_deref(), &pool)?;
            let k = layers.unwrap_or(ctx.cfg.student_layers);
            let e = run_init_experiment(&teacher, k, train, &val, &dcfg, opts.parallel)?;
            for (name, h) in [("alternating", &e.alternating), ("last_k", &e.last_k)] {
                let pts: Vec<_> = h.iter().map(|r| (r.epoch as f64, r.val_total)).collect();
                write_curve(ctx.path(&format!("fig1/{name}.csv")), &pts)?;
                write_history(ctx.path(&format!("fig1/{name}_history.csv")), h)?;
            }
            println!("wrote {}", ctx.path("fig1").display());
        }
        Cmd::ExpData { teacher, layers, sizes } => {
            let teacher = ctx.teacher(teacher.as_deref(), &pool)?;
            let k = layers.unwrap_or(ctx.cfg.student_layers);
            let sizes = sizes.unwrap_or_else(|| ctx.cfg.data_sizes.clone());
            let runs = run_data_experiment(&teacher, k, &sizes, &pool, &val, &dcfg, opts.parallel)?;
            for (n, h) in &runs {
                let wer: Vec<_> = h.iter().map(|r| (r.epoch as f64, r.val_wer)).collect();
                let loss: Vec<_> = h.iter().map(|r| (r.epoch as f64, r.val_total)).collect();
                write_curve(ctx.path(&format!("fig2/size_{n}_wer.csv")), &wer)?;
                write_curve(ctx.path(&format!("fig2/size_{n}_loss.csv")), &loss)?;
                if let Some(last) = h.last() {
                    println!("{n:>6} utterances: final val wer {:.4}", last.val_wer);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
