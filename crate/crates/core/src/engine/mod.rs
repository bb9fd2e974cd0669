//! A small CNN engine: graph execution with backprop, seeded SGD training,
//! procedural toy datasets, activation capture, and the linearized
//! gradient-support measurement of receptive fields.

mod capture;
mod empirical;
mod model;
pub mod ops;
mod tensor;
mod toy;
mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use capture::{capture_points, capture_run, CapturePoint};
pub use empirical::{empirical_rf, empirical_rf_for, EmpiricalEntry, EmpiricalRf};
pub use model::{EngineModel, ForwardOutput, NodeParams, Trace};
pub use tensor::Tensor;
pub use toy::{generate_toy, Placement, ShapeClass, ToySpec};
pub use train::{evaluate, train, Augment, Dataset, EpochStats, LabeledSet, TrainConfig, TrainResult};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("node `{node}`: {reason}")]
    Shape { node: String, reason: String },
    #[error("non-finite activation at node `{0}`")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("refusing to overwrite existing manifest in {0}")]
    ManifestExists(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Arch(#[from] crate::arch::ArchError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
