//! Experiment runner library behind the `cnorm` binary: config parsing,
//! IDX data loading, synthetic data, orchestration, and result emission.

pub mod checkpoint;
pub mod config;
pub mod idx;
pub mod runner;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{
    load_experiment, parse_experiment, Backbone, Experiment, ExperimentConfig, NormChoice,
    PolicyChoice, StrategyChoice, StreamChoice,
};
pub use idx::{load_mnist_idx, write_mnist_idx, IdxError};
pub use runner::{
    build_summary, compare_layers, format_summary_table, load_mnist_base, run_experiment,
    run_one_seed, MethodSummary, RunReport, SummaryFile,
};
pub use synth::blob_dataset;
