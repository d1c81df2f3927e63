//! Two-stage training, evaluation and discrepancy analysis.

mod analysis;
mod config;
pub mod metrics;
mod train;

pub use analysis::{
    ablation_run, block_features, bn_discrepancy, evaluate, export_features_csv, mmd_curve, score, write_ablation_csv,
    write_bn_curve_csv, write_mmd_curve_csv, AblationRow, BnCurvePoint, DomainMetrics, EvalReport,
};
pub use config::{TrainConfig, Variant};
pub use metrics::Kernel;
pub use train::{adapt_generator, train_source, write_adapt_log, write_source_log, AdaptOutcome, SourceLogRow};

use crate::data::DataError;
use crate::models::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{stage} step {step}: non-finite loss ({detail})")]
    NonFinite {
        stage: &'static str,
        step: usize,
        detail: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[cfg(test)]
mod tests;
