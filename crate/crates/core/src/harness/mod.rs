//! Metrics, sweeps, experiment configuration and run directories.

pub mod experiment;
pub mod format;
pub mod gradsuite;
pub mod metrics;
pub mod sweep;

pub use experiment::{
    check_eta, load_model, prepare, run_once, save_model, write_embeddings, write_json, ExperimentConfig, ModelManifest,
    RunDir, RunResult, Splits,
};
pub use format::fmt_sig6;
pub use gradsuite::{default_seeds, run_grad_suite, CheckKind, CheckOutcome, SuiteReport};
pub use metrics::{confusion_matrix, f1_scores, weighted_accuracy, F1Scores, MetricsReport};
pub use sweep::{
    mean_variance, parse_grid, sweep, write_summary_csv, write_sweep_csv, EtaSummary, SweepFailure, SweepResult,
    SweepRun,
};
