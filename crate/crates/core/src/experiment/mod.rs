//! Config-driven experiments: parse a TOML file, build data and clients,
//! run the federation and write manifest, metrics stream, summary and
//! checkpoint.

pub mod config;
pub mod runner;
pub mod summary;

pub use config::{parse_config, DataSpec, ExperimentConfig, Mode, OodSpec, PartitionSpec};
pub use runner::{
    config_hash, federation_config, prepare_data, read_metrics, run_experiment, PreparedData, RunManifest,
    RunOptions, RunReport,
};
pub use summary::{summarize, summary_csv, summary_markdown, SummaryRow};
