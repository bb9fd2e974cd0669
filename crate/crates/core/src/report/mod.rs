//! Run analysis: per-layer tables, tail detection, and the files written to a
//! run directory (`report.json`, `report.csv`, `chart.svg`, `heatmap_<layer>.svg`).

mod build;
mod chart;
mod tail;

use std::path::PathBuf;

use thiserror::Error;

pub use build::{
    analyze_run, build_report, emit_report, load_report, rf_section, AnalysisReport, AnalyzeOptions, LayerFlags,
    LayerReport, ReadoutReport, ReportInputs, RfRow, RfSection, StageSummary, Thresholds, CSV_FILE, REPORT_FILE,
    SCHEMA_VERSION,
};
pub use chart::{heatmap_file_name, render_chart, render_heatmap, CHART_FILE};
pub use tail::{detect_tail, Anchor, TailReport, DEFAULT_EPSILON, DEFAULT_TAU};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("tail detection needs at least 3 conv layers, got {0}")]
    TooFewLayers(usize),
    #[error("{saturations} saturation values but {probes} probe accuracies")]
    LengthMismatch { saturations: usize, probes: usize },
    #[error("non-finite {0} value")]
    NonFinite(&'static str),
    #[error("architecture hash {found} does not match the run's {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("layer `{0}` is not part of this run")]
    UnknownLayer(String),
    #[error("no dumps found in {0}")]
    NoDumps(PathBuf),
    #[error("report has no layers")]
    Empty,
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Rf(#[from] crate::rf::RfError),
    #[error(transparent)]
    Saturation(#[from] crate::saturation::SaturationError),
    #[error(transparent)]
    Probe(#[from] crate::probes::ProbeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
