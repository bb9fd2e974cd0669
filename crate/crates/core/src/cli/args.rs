use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use layerscope::report::{DEFAULT_EPSILON, DEFAULT_TAU};
use layerscope::saturation::DEFAULT_DELTA;

#[derive(Debug, Parser)]
#[command(name = "layerscope", version, about = "Receptive-field, saturation and probe analysis for CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print receptive fields and the border layer of an architecture.
    Rf(RfArgs),
    /// Train a model on a toy or IDX dataset into a run directory.
    Train(TrainArgs),
    /// Dump test-split activations of a trained model.
    Capture(CaptureArgs),
    /// Compute saturation, probes and the tail; write report.json and report.csv.
    Analyze(AnalyzeArgs),
    /// Render chart.svg (and heatmaps) from report.json.
    Chart(ChartArgs),
    /// train, capture, analyze and chart in one go.
    Full(FullArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ArchArgs {
    /// Catalog architecture name.
    #[arg(long, conflicts_with = "arch")]
    pub builtin: Option<String>,
    /// Architecture description file.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Divide builtin conv widths by this factor.
    #[arg(long, default_value_t = 1)]
    pub width_div: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Toy preset (default, canvas64, three) or a JSON spec file.
    #[arg(long, conflicts_with = "idx")]
    pub toy: Option<String>,
    /// Directory with MNIST-style IDX files.
    #[arg(long)]
    pub idx: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Recompute outputs that already exist.
    #[arg(long)]
    pub force: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ThresholdArgs {
    /// Explained-variance fraction for saturation.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f64,
    /// Tail threshold relative to the median saturation of other layers.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Largest probe gain a tail layer may show and still count as unproductive.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Conv layers to probe per position (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub heatmaps: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainOpts {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long)]
    pub hflip: bool,
    #[arg(long, default_value_t = 0)]
    pub crop_pad: usize,
}

#[derive(Debug, Args)]
pub struct RfArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Square input side; enables spatial sizes and the border layer.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Also list single edits that move the border later.
    #[arg(long)]
    pub suggest: bool,
    /// Directory to write rf.json into.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Args)]
pub struct CaptureArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Debug, Args)]
pub struct ChartArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct FullArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}
