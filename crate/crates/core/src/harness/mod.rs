//! Run configuration, the training loops, evaluation protocols and exports.

mod config;
mod eval;
mod export;
mod train;


pub use config::{Algo, Protocol, RunConfig, KEYS, SEED_ENV};
pub use eval::{episode_seed, evaluate, EvalReport, TaskEval};
pub use export::{
    eval_path, export, load_eval, run_dirs, save_eval, ExportSummary, ExportedRun, HARMONY_HEADER, SUMMARY_HEADER,
    SWEEP_HEADER,
};
pub use train::{
    generate_suite, load_datasets, load_summary, mark_started, run_name, train, DtObjective, IntervalRecord, MaskSet,
    MetricsLog, Phase, RunSummary, TrainedRun, RUN_FILE,
};
