//! Optimiser, training loop, evaluation metrics, ablation harness and
//! checkpoints.

mod ablation;
mod adam;
mod checkpoint;
mod metrics;
mod run;

pub use ablation::{run_ablation, AblationGrid, AblationReport, AblationRow, Variant};
pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use metrics::{iou, precision_at, EvalReport, Metrics, METRIC_HEADER, THRESHOLDS};
pub use run::{
    batch_gradients, binarize, check_sample, evaluate, history_tsv, initialise, mask_bits, sample_gradients,
    sample_loss, train, EpochRecord, TrainConfig,
};

use crate::data::DataError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged in epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("invalid ablation grid: {0}")]
    Grid(String),
    #[error("malformed ablation report: {0}")]
    Report(String),
}
