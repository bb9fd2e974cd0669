use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tail::{detect_tail, TailReport, DEFAULT_EPSILON, DEFAULT_TAU};
use super::ReportError;
use crate::arch::{graph_hash, ArchGraph, LayerKind};
use crate::probes::{
    extract_features, labels_from_dump, position_heatmap, relative_performance, train_probe, Heatmap, ProbeConfig,
    ProbeMode,
};
use crate::rf::{border_layer, compute_rf, compute_rf_at, published_reference, PublishedRf, RECURRENCE_NOTE};
use crate::saturation::{saturation_of, CovAccumulator, SaturationResult, DEFAULT_DELTA};
use crate::store::{read_dump, DumpReader, LayerForm, RunManifest, MANIFEST_FILE};

pub const SCHEMA_VERSION: &str = "1";
pub const REPORT_FILE: &str = "report.json";
pub const CSV_FILE: &str = "report.csv";

/// Samples per block when streaming dumps into a covariance accumulator.
const STREAM_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfRow {
    pub name: String,
    pub kind: LayerKind,
    pub r: usize,
    pub jump: usize,
    pub spatial: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfSection {
    pub arch: String,
    pub input_size: Option<usize>,
    pub border_node: Option<String>,
    pub solving: Vec<String>,
    pub compressing: Vec<String>,
    pub nodes: Vec<RfRow>,
    pub recurrence_note: String,
    pub published: Option<PublishedRf>,
}

/// Receptive fields of every node, plus the border split when an input size
/// is given.
pub fn rf_section(graph: &ArchGraph, input_size: Option<usize>) -> Result<RfSection, ReportError> {
    let rf = match input_size {
        Some(n) => compute_rf_at(graph, n)?,
        None => compute_rf(graph)?,
    };
    let border = input_size.map(|n| border_layer(graph, &rf, n));
    Ok(RfSection {
        arch: graph.name.clone(),
        input_size,
        border_node: border.as_ref().and_then(|b| b.border_node.clone()),
        solving: border.as_ref().map(|b| b.solving.clone()).unwrap_or_default(),
        compressing: border.as_ref().map(|b| b.compressing.clone()).unwrap_or_default(),
        nodes: rf
            .nodes
            .iter()
            .map(|e| RfRow {
                name: e.name.clone(),
                kind: e.kind,
                r: e.r,
                jump: e.jump,
                spatial: e.spatial,
            })
            .collect(),
        recurrence_note: RECURRENCE_NOTE.to_string(),
        published: published_reference(graph, &rf),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlags {
    pub is_border: bool,
    pub in_tail: bool,
    pub in_solving: bool,
    pub in_compressing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub r: usize,
    pub jump: usize,
    pub dim: usize,
    pub saturation: Option<f64>,
    pub saturation_k: Option<usize>,
    pub probe_accuracy: Option<f64>,
    pub relative_accuracy: Option<f64>,
    pub flags: LayerFlags,
    /// Metrics that could not be computed for this layer.
    pub missing: Vec<String>,
}

/// The probe on the vector that feeds the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutReport {
    pub name: String,
    pub dim: usize,
    pub probe_accuracy: Option<f64>,
    pub relative_accuracy: Option<f64>,
}

/// Mean conv saturation before the border, from the border on, and strictly
/// after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub solving_mean_saturation: Option<f64>,
    pub compressing_mean_saturation: Option<f64>,
    pub post_border_mean_saturation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub delta: f64,
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            tau: DEFAULT_TAU,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: String,
    pub arch: String,
    pub dsl_hash: String,
    pub input_size: usize,
    pub seed: u64,
    pub model_accuracy: f64,
    pub thresholds: Thresholds,
    pub probe_config: ProbeConfig,
    pub rf: RfSection,
    pub layers: Vec<LayerReport>,
    pub readout: Option<ReadoutReport>,
    pub stages: StageSummary,
    pub tail: Option<TailReport>,
    /// Why tail detection was skipped, when it was.
    pub tail_note: Option<String>,
    pub heatmaps: Vec<Heatmap>,
}

/// Per-layer measurements of one run, keyed by layer name.
#[derive(Debug, Clone)]
pub struct ReportInputs<'a> {
    pub manifest: &'a RunManifest,
    pub graph: &'a ArchGraph,
    pub saturation: Vec<(String, Option<SaturationResult>)>,
    pub probes: Vec<(String, Option<f64>)>,
    pub heatmaps: Vec<Heatmap>,
    pub thresholds: Thresholds,
    pub probe_config: ProbeConfig,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn build_report(inputs: ReportInputs<'_>) -> Result<AnalysisReport, ReportError> {
    let m = inputs.manifest;
    let found = graph_hash(inputs.graph);
    if found != m.dsl_hash {
        return Err(ReportError::HashMismatch {
            expected: m.dsl_hash.clone(),
            found,
        });
    }
    for name in inputs.saturation.iter().map(|(n, _)| n).chain(inputs.probes.iter().map(|(n, _)| n)) {
        if !m.layers.iter().any(|l| &l.name == name) {
            return Err(ReportError::UnknownLayer(name.clone()));
        }
    }
    let rf = rf_section(inputs.graph, Some(m.input_size))?;
    let row = |name: &str| rf.nodes.iter().find(|r| r.name == name);
    let relative = |acc: Option<f64>| acc.and_then(|a| relative_performance(a, m.model_accuracy).ok());

    let mut layers = Vec::new();
    let mut readout = None;
    for entry in &m.layers {
        let sat = inputs
            .saturation
            .iter()
            .find(|(n, _)| n == &entry.name)
            .and_then(|(_, s)| s.clone());
        let probe = inputs.probes.iter().find(|(n, _)| n == &entry.name).and_then(|(_, p)| *p);
        if let Some(p) = probe {
            if !p.is_finite() {
                return Err(ReportError::NonFinite("probe accuracy"));
            }
        }
        match entry.form {
            LayerForm::Conv => {
                let rf_row = row(&entry.name).ok_or_else(|| ReportError::UnknownLayer(entry.name.clone()))?;
                let mut missing = Vec::new();
                if sat.is_none() {
                    missing.push("saturation".to_string());
                }
                if probe.is_none() {
                    missing.push("probe_accuracy".to_string());
                }
                layers.push(LayerReport {
                    name: entry.name.clone(),
                    r: rf_row.r,
                    jump: rf_row.jump,
                    dim: entry.shape[1],
                    saturation: sat.as_ref().map(|s| s.value),
                    saturation_k: sat.as_ref().map(|s| s.k),
                    probe_accuracy: probe,
                    relative_accuracy: relative(probe),
                    flags: LayerFlags {
                        is_border: rf.border_node.as_deref() == Some(entry.name.as_str()),
                        in_tail: false,
                        in_solving: rf.solving.contains(&entry.name),
                        in_compressing: rf.compressing.contains(&entry.name),
                    },
                    missing,
                });
            }
            LayerForm::Vector => {
                readout = Some(ReadoutReport {
                    name: entry.name.clone(),
                    dim: entry.shape[1],
                    probe_accuracy: probe,
                    relative_accuracy: relative(probe),
                })
            }
        }
    }
    if layers.is_empty() {
        return Err(ReportError::Empty);
    }

    let sats: Option<Vec<f64>> = layers.iter().map(|l| l.saturation).collect();
    let probes: Option<Vec<f64>> = layers.iter().map(|l| l.probe_accuracy).collect();
    let (tail, tail_note) = match (&sats, layers.len()) {
        (_, n) if n < 3 => (None, Some(format!("tail detection needs at least 3 conv layers, run has {n}"))),
        (None, _) => (None, Some("saturation missing for at least one layer".to_string())),
        (Some(s), _) => (
            Some(detect_tail(s, probes.as_deref(), inputs.thresholds.tau, inputs.thresholds.epsilon)?),
            None,
        ),
    };
    if let Some(range) = tail.as_ref().and_then(|t| t.tail.clone()) {
        for l in &mut layers[range] {
            l.flags.in_tail = true;
        }
    }

    let pick = |pred: &dyn Fn(&LayerReport) -> bool| -> Option<f64> {
        let v: Vec<f64> = layers.iter().filter(|l| pred(l)).filter_map(|l| l.saturation).collect();
        mean(&v)
    };
    let border_at = layers.iter().position(|l| l.flags.is_border);
    let stages = StageSummary {
        solving_mean_saturation: pick(&|l| l.flags.in_solving),
        compressing_mean_saturation: pick(&|l| l.flags.in_compressing),
        post_border_mean_saturation: border_at.and_then(|b| {
            let v: Vec<f64> = layers[b + 1..].iter().filter_map(|l| l.saturation).collect();
            mean(&v)
        }),
    };

    Ok(AnalysisReport {
        schema_version: SCHEMA_VERSION.to_string(),
        arch: m.arch.clone(),
        dsl_hash: m.dsl_hash.clone(),
        input_size: m.input_size,
        seed: m.seed,
        model_accuracy: m.model_accuracy,
        thresholds: inputs.thresholds,
        probe_config: inputs.probe_config,
        rf,
        layers,
        readout,
        stages,
        tail,
        tail_note,
        heatmaps: inputs.heatmaps,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalyzeOptions {
    pub thresholds: Thresholds,
    pub probe: ProbeConfig,
    /// Conv layers that also get a per-position probe heatmap.
    pub heatmap_layers: Vec<String>,
}

fn streamed_saturation(path: &Path, delta: f64) -> Result<SaturationResult, ReportError> {
    let reader = DumpReader::open(path)?;
    let shape = reader.header().shape.clone();
    let mut acc = CovAccumulator::new(shape[1]);
    for block in reader.batches(STREAM_BATCH)? {
        let (data, range) = block?;
        let mut s = shape.clone();
        s[0] = range.len();
        acc.accumulate(&data, &s)?;
    }
    Ok(saturation_of(&acc, delta)?)
}

/// Computes saturation and probes for every dumped layer of a run directory.
pub fn analyze_run(
    run_dir: impl AsRef<Path>,
    graph: &ArchGraph,
    opts: &AnalyzeOptions,
) -> Result<AnalysisReport, ReportError> {
    let dir = run_dir.as_ref();
    if !dir.join(MANIFEST_FILE).exists() || !dir.join("dumps").is_dir() {
        return Err(ReportError::NoDumps(dir.to_path_buf()));
    }
    let manifest = RunManifest::load(dir)?;
    if manifest.layers.is_empty() {
        return Err(ReportError::NoDumps(dir.to_path_buf()));
    }
    let found = graph_hash(graph);
    if found != manifest.dsl_hash {
        return Err(ReportError::HashMismatch {
            expected: manifest.dsl_hash.clone(),
            found,
        });
    }
    manifest.validate(dir)?;
    let labels = labels_from_dump(&read_dump(dir.join(&manifest.labels))?)?;

    let per_layer: Vec<(String, Option<SaturationResult>, Option<f64>)> = manifest
        .layers
        .par_iter()
        .map(|entry| -> Result<_, ReportError> {
            let path = dir.join(&entry.file);
            let sat = match entry.form {
                LayerForm::Conv => Some(streamed_saturation(&path, opts.thresholds.delta)?),
                LayerForm::Vector => None,
            };
            let dump = read_dump(&path)?;
            let mode = match entry.form {
                LayerForm::Conv => ProbeMode::Pooled4x4,
                LayerForm::Vector => ProbeMode::Vector,
            };
            let features = extract_features(&dump, &labels, mode)?;
            let probe = train_probe(&features, &opts.probe)?;
            Ok((entry.name.clone(), sat, Some(probe.accuracy)))
        })
        .collect::<Result<_, _>>()?;

    let mut heatmaps = Vec::new();
    for name in &opts.heatmap_layers {
        let entry = manifest
            .layers
            .iter()
            .find(|l| &l.name == name && l.form == LayerForm::Conv)
            .ok_or_else(|| ReportError::UnknownLayer(name.clone()))?;
        let dump = read_dump(dir.join(&entry.file))?;
        heatmaps.push(position_heatmap(&dump, &labels, &opts.probe, manifest.model_accuracy)?);
    }

    build_report(ReportInputs {
        manifest: &manifest,
        graph,
        saturation: per_layer.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect(),
        probes: per_layer.iter().map(|(n, _, p)| (n.clone(), *p)).collect(),
        heatmaps,
        thresholds: opts.thresholds.clone(),
        probe_config: opts.probe.clone(),
    })
}

/// Formats a number exactly as it appears in the JSON report.
fn num<T: Serialize>(v: Option<T>) -> String {
    match v {
        Some(x) => serde_json::to_string(&x).expect("numbers serialize"),
        None => "null".to_string(),
    }
}

const CSV_HEADER: [&str; 13] = [
    "layer",
    "r",
    "jump",
    "dim",
    "saturation",
    "saturation_k",
    "probe_accuracy",
    "relative_accuracy",
    "is_border",
    "in_tail",
    "in_solving",
    "in_compressing",
    "missing",
];

/// Writes `report.json` and `report.csv` (one row per conv layer).
pub fn emit_report(report: &AnalysisReport, dir: impl AsRef<Path>) -> Result<(), ReportError> {
    let dir = dir.as_ref();
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(dir.join(REPORT_FILE), json)?;

    let mut w = csv::Writer::from_path(dir.join(CSV_FILE))?;
    w.write_record(CSV_HEADER)?;
    for l in &report.layers {
        w.write_record([
            l.name.clone(),
            num(Some(l.r)),
            num(Some(l.jump)),
            num(Some(l.dim)),
            num(l.saturation),
            num(l.saturation_k),
            num(l.probe_accuracy),
            num(l.relative_accuracy),
            l.flags.is_border.to_string(),
            l.flags.in_tail.to_string(),
            l.flags.in_solving.to_string(),
            l.flags.in_compressing.to_string(),
            l.missing.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `report.json` and checks it belongs to the run in the same directory.
pub fn load_report(dir: impl AsRef<Path>) -> Result<AnalysisReport, ReportError> {
    let dir = dir.as_ref();
    let report: AnalysisReport = serde_json::from_str(&std::fs::read_to_string(dir.join(REPORT_FILE))?)?;
    if dir.join(MANIFEST_FILE).exists() {
        let m = RunManifest::load(dir)?;
        if m.dsl_hash != report.dsl_hash {
            return Err(ReportError::HashMismatch {
                expected: m.dsl_hash,
                found: report.dsl_hash,
            });
        }
    }
    Ok(report)
}
