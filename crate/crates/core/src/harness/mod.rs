//! Train, prune, fine-tune and evaluate pipeline plus the multi-seed
//! experiment runner behind the command-line tool.

mod config;
mod data;
mod experiment;
mod pipeline;
mod train;

pub use config::{DataConfig, DataSource, ExperimentConfig, HarnessConfig, NetworkConfig, TrainConfig};
pub use data::{normalize_for, Splits};
pub use experiment::{
    run_experiment, AggregateRow, Cell, CellResult, ExperimentPlan, ExperimentReport, ExperimentRun, SeedValue,
};
pub use pipeline::{
    evaluate, finetune, network_spec, prune, prune_and_finetune, prune_settings, train, CompressionReport,
    LayerReport, Timings,
};
pub use train::{accuracy, sgd_train, EpochStats};
