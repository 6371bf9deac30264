//! Config-driven training runs, learning-rate search, artifact output and
//! the figure/table reproduction drivers.

mod config;
pub mod output;
mod presets;
mod reproduce;
mod summary;
mod train;

pub use config::{default_lr_grid, ExperimentConfig, ModelConfig, OptimizerConfig, OptimizerName, ProbeConfig};
pub use presets::{find_preset, Preset, PRESETS};
pub use reproduce::{condition_ratios, noise_at_init, reproduce, run_seeds, ReproduceOptions, ReproduceOutcome, Target};
pub use summary::{grid_search, summarize, GridRecord, GridSearchResult, MeanStd, Summary};
pub use train::{run_training, EvalRow, NoiseSnapshot, TraceRow, TrainTrace, DIVERGENCE_FACTOR, DIVERGENCE_PATIENCE};
