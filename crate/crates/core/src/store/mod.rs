//! On-disk formats: ACTD dumps, run manifests and IDX (MNIST) files.

mod actd;
mod idx;
mod manifest;

pub use actd::{
    read_dump, read_header_only, write_dump, DType, DumpBatches, DumpHeader, DumpReader, Split, TensorDump,
    MAGIC, VERSION,
};
pub use idx::{read_idx, IdxArray};
pub use manifest::{LayerEntry, LayerForm, RunManifest, MANIFEST_FILE};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"ACTD\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("unknown dtype code {0}")]
    UnknownDType(u32),
    #[error("truncated file")]
    Truncated,
    #[error("tensor shape must have at least one dimension")]
    EmptyShape,
    #[error("payload has {got} values, shape implies {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
