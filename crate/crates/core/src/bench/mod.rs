//! Experiment drivers, timing and report emission.

mod config;
mod experiments;
mod report;

pub use config::RunConfig;
pub use experiments::{
    run_data_experiment, run_init_experiment, run_table1, run_tradeoff_sweep, InitExperiment, SweepOptions,
};
pub use report::{
    emit_report, measure_inference, measure_interleaved, read_report, write_curve, BenchReport, Timing, REPORT_HEADER,
};
