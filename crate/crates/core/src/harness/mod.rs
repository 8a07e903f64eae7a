//! Synthetic data, replicated coverage experiments and report files.

pub mod config;
pub mod experiment;
pub mod report;
pub mod seed;
pub mod synthetic;

pub use config::{expand_env, DataSource, ExperimentConfig, ScoreFileSource, OUT_DIR_ENV};
pub use experiment::{
    method_quantiles, replication, run_experiment, test_score_matrix, true_ratios, MethodQuantiles, ReplicationData,
};
pub use report::{emit_report, read_json_report, CoverageReport, MethodSummary, ReportFormat};
pub use seed::{stream_rng, Stream};
pub use synthetic::{gen_synthetic, sample_labels, sample_outputs, SyntheticData, SyntheticSpec};
