//! Training, evaluation, verification suites and ablation sweeps behind the CLI.

pub mod ablation;
pub mod config;
pub mod suite;
pub mod train;

pub use ablation::{cmd_ablation, AblationReport, Group, Variant, VARIANTS};
pub use config::RunConfig;
pub use suite::{gradcheck_suite, score_report, ScoreReport, SuiteItem};
pub use train::{cmd_dump_activations, cmd_eval, cmd_gen_data, cmd_train, AdamW, MetricsRecord, Predictions};
