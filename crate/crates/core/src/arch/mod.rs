//! Architecture graphs: data model, text format and builtin catalog.

mod builtin;
mod dsl;
mod graph;

pub use builtin::{generate_builtin, BuiltinOptions, BUILTIN_NAMES};
pub use dsl::{graph_hash, parse_arch, to_dsl};
pub use graph::{ArchGraph, LayerKind, LayerNode, NodeId, NodeSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}, column {column}: unknown layer kind `{kind}`")]
    UnknownKind {
        line: usize,
        column: usize,
        kind: String,
    },
    #[error("node `{node}` references undeclared node `{target}`")]
    DanglingReference { node: String, target: String },
    #[error("cycle detected through node `{0}`")]
    Cycle(String),
    #[error("second input node `{0}`; exactly one input is allowed")]
    MultipleInputs(String),
    #[error("graph has no input node")]
    MissingInput,
    #[error("duplicate node name `{0}`")]
    DuplicateName(String),
    #[error("node `{0}` is not reachable from the input")]
    Orphan(String),
    #[error("node `{node}`: {reason}")]
    Invalid { node: String, reason: String },
    #[error("unknown builtin architecture `{0}`")]
    UnknownBuiltin(String),
    #[error("residual mask has {got} entries, `{arch}` has {expected} stages")]
    ResidualMaskLength {
        arch: String,
        expected: usize,
        got: usize,
    },
    #[error("line {line}, column {column}: {source}")]
    AtLine {
        line: usize,
        column: usize,
        #[source]
        source: Box<ArchError>,
    },
}

impl ArchError {
    /// The underlying error with any position wrapper removed.
    pub fn root(&self) -> &ArchError {
        match self {
            ArchError::AtLine { source, .. } => source.root(),
            other => other,
        }
    }
}
