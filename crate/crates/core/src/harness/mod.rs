//! Training loop, evaluation, experiment grids and presets.

mod ablate;
mod config;
mod metrics;
pub mod presets;
mod schedule;
mod train;

pub use ablate::{ablate, write_ablation_csv, CellResult, GridCell, GridSpec};
pub use config::{flatten, unflatten, ConfigErrors, ModelConfig, SamplerKind, TrainConfig};
pub use metrics::{evaluate, evaluate_predictions, report_from_confusion, ConfusionMatrix, EvalReport};
pub use schedule::lambda_schedule;
pub use train::{evaluation_record, train, train_with, MetricsRecord, TrainData, TrainError, TrainOutcome};
