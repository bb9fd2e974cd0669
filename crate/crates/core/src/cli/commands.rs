use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use layerscope::arch::{generate_builtin, parse_arch, ArchGraph, BuiltinOptions};
use layerscope::engine::{
    capture_run, generate_toy, train, Augment, Dataset, EngineModel, LabeledSet, ToySpec, TrainConfig, TrainResult,
};
use layerscope::probes::ProbeConfig;
use layerscope::report::{
    analyze_run, emit_report, heatmap_file_name, load_report, render_chart, render_heatmap, rf_section, AnalyzeOptions,
    RfSection, Thresholds, CHART_FILE, REPORT_FILE,
};
use layerscope::rf::{suggest_surgery, PublishedBound};
use layerscope::store::{read_idx, MANIFEST_FILE};

use super::args::*;
use super::CliError;

const MODEL_FILE: &str = "model.json";
const DATA_FILE: &str = "data.json";
const TRAIN_FILE: &str = "train.json";
const RF_FILE: &str = "rf.json";
const LOCK_FILE: &str = ".layerscope.lock";

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Exclusive claim on a run directory, released on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn load_graph(arch: &ArchArgs, in_channels: usize, num_classes: usize) -> Result<Option<ArchGraph>, CliError> {
    match (&arch.builtin, &arch.arch) {
        (Some(name), _) => {
            let opts = BuiltinOptions {
                in_channels,
                num_classes,
                width_divisor: arch.width_div.max(1),
                ..Default::default()
            };
            Ok(Some(generate_builtin(name, &opts)?))
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
            let g = parse_arch(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            Ok(Some(g))
        }
        (None, None) => Ok(None),
    }
}

fn require_graph(arch: &ArchArgs, in_channels: usize, num_classes: usize) -> Result<ArchGraph, CliError> {
    load_graph(arch, in_channels, num_classes)?.ok_or_else(|| invalid("one of --builtin or --arch is required"))
}

pub fn cmd_rf(args: &RfArgs) -> Result<(), CliError> {
    let graph = require_graph(&args.arch, 3, 10)?;
    let section = rf_section(&graph, args.input_size)?;
    print!("{}", format_rf(&section));
    if args.suggest {
        let Some(n) = args.input_size else {
            return Err(invalid("--suggest needs --input-size"));
        };
        let edits = suggest_surgery(&graph, n)?;
        if edits.is_empty() {
            println!("no single edit moves the border later");
        }
        for e in edits {
            println!(
                "suggest: {} (final r {}, border {}, {} solving convs)",
                e.description,
                e.final_r,
                e.border_node.as_deref().unwrap_or("none"),
                e.solving_convs
            );
        }
    }
    if let Some(out) = &args.out {
        let _lock = RunLock::acquire(out)?;
        let path = out.join(RF_FILE);
        if path.exists() && !args.force {
            eprintln!("{} exists; skipping (use --force to rewrite)", path.display());
        } else {
            write_json(&path, &section)?;
        }
    }
    Ok(())
}

pub fn format_rf(s: &RfSection) -> String {
    let mut out = String::new();
    let size = s.input_size.map_or("-".to_string(), |n| n.to_string());
    out.push_str(&format!("arch: {}  input: {size}\n", s.arch));
    out.push_str(&format!("{:<28} {:<8} {:>6} {:>6} {:>8}\n", "node", "kind", "r", "jump", "spatial"));
    for row in &s.nodes {
        let spatial = row.spatial.map_or("-".to_string(), |v| v.to_string());
        let kind = serde_json::to_value(row.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        out.push_str(&format!("{:<28} {:<8} {:>6} {:>6} {:>8}\n", row.name, kind, row.r, row.jump, spatial));
    }
    let last_conv = s.nodes.iter().rev().find(|r| r.kind == layerscope::arch::LayerKind::Conv);
    if let Some(c) = last_conv {
        out.push_str(&format!("final conv {} r = {}\n", c.name, c.r));
    }
    match (&s.border_node, s.input_size) {
        (Some(b), Some(n)) => out.push_str(&format!("border: {b} (input {n}px)\n")),
        (None, Some(n)) => out.push_str(&format!("border: none (input {n}px)\n")),
        _ => out.push_str("border: needs --input-size\n"),
    }
    if let Some(p) = &s.published {
        let bound = match p.bound {
            PublishedBound::Exact => "",
            PublishedBound::AtLeast => "> ",
        };
        out.push_str(&format!(
            "published final r: {bound}{} ({}), computed {}\n",
            p.published_final_r,
            if p.agrees { "agrees" } else { "differs" },
            p.computed_final_r
        ));
        out.push_str(&format!("note: {}\n", s.recurrence_note));
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Where a run's images come from; stored in the run directory so later
/// stages regenerate the same data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DataSource {
    Toy(ToySpec),
    Idx(PathBuf),
}

impl DataSource {
    fn from_args(data: &DataArgs, input_size: Option<usize>, seed: u64) -> Result<Self, CliError> {
        if let Some(dir) = &data.idx {
            return Ok(DataSource::Idx(dir.clone()));
        }
        let mut spec = ToySpec::resolve(data.toy.as_deref().unwrap_or("default"))?;
        spec.seed = seed;
        if let Some(n) = input_size {
            if n < spec.canvas_size {
                return Err(invalid(format!(
                    "--input-size {n} is smaller than the toy canvas ({}px)",
                    spec.canvas_size
                )));
            }
            spec.upsample_to = (n != spec.canvas_size).then_some(n);
        }
        spec.validate()?;
        Ok(DataSource::Toy(spec))
    }

    fn load(&self) -> Result<Dataset, CliError> {
        match self {
            DataSource::Toy(spec) => Ok(generate_toy(spec)?),
            DataSource::Idx(dir) => {
                let read = |name: &str| read_idx(dir.join(name));
                let train = LabeledSet::from_idx(&read("train-images-idx3-ubyte")?, &read("train-labels-idx1-ubyte")?)?;
                let test = LabeledSet::from_idx(&read("t10k-images-idx3-ubyte")?, &read("t10k-labels-idx1-ubyte")?)?;
                let num_classes = train.labels.iter().chain(&test.labels).max().map_or(0, |m| m + 1);
                Ok(Dataset {
                    train,
                    test,
                    num_classes,
                })
            }
        }
    }

    fn channels_and_classes(&self, data: &Dataset) -> (usize, usize) {
        (data.train.images.c(), data.num_classes)
    }
}

fn stage_done(path: &Path, force: bool, what: &str) -> bool {
    if path.exists() && !force {
        eprintln!("{what}: {} exists; skipping (use --force to redo)", path.display());
        return true;
    }
    false
}

fn train_stage(
    arch: &ArchArgs,
    data: &DataArgs,
    input_size: Option<usize>,
    run: &RunArgs,
    opts: &TrainOpts,
) -> Result<(), CliError> {
    let model_path = run.out.join(MODEL_FILE);
    if stage_done(&model_path, run.force, "train") {
        return Ok(());
    }
    let source = DataSource::from_args(data, input_size, run.seed)?;
    let dataset = source.load()?;
    if let (DataSource::Idx(_), Some(n)) = (&source, input_size) {
        if dataset.train.images.h() != n {
            return Err(invalid(format!(
                "IDX images are {}px; resizing to --input-size {n} is not supported",
                dataset.train.images.h()
            )));
        }
    }
    let (channels, classes) = source.channels_and_classes(&dataset);
    let graph = require_graph(arch, channels, classes)?;
    let mut model = EngineModel::new(graph, run.seed);
    // Shape check before spending time on training.
    model.forward(&dataset.test.images.gather(&[0]), &[])?;
    let cfg = TrainConfig {
        epochs: opts.epochs,
        batch: opts.batch,
        lr: opts.lr,
        momentum: opts.momentum,
        augment: Augment {
            hflip: opts.hflip,
            crop_pad: opts.crop_pad,
        },
        seed: run.seed,
    };
    cfg.validate()?;
    let result = train(&mut model, &dataset, &cfg)?;
    for h in &result.history {
        eprintln!(
            "epoch {:>3}  lr {:.4}  loss {:.4}  train {:.4}  test {:.4}",
            h.epoch + 1,
            h.lr,
            h.loss,
            h.train_accuracy,
            h.test_accuracy
        );
    }
    #[derive(Serialize)]
    struct TrainLog<'a> {
        config: &'a TrainConfig,
        result: &'a TrainResult,
    }
    write_json(&run.out.join(DATA_FILE), &source)?;
    write_json(
        &run.out.join(TRAIN_FILE),
        &TrainLog {
            config: &cfg,
            result: &result,
        },
    )?;
    model.save(&model_path)?;
    Ok(())
}

fn capture_stage(run: &RunArgs) -> Result<(), CliError> {
    let manifest = run.out.join(MANIFEST_FILE);
    if stage_done(&manifest, run.force, "capture") {
        return Ok(());
    }
    let model_path = run.out.join(MODEL_FILE);
    if !model_path.exists() {
        return Err(invalid(format!("no trained model in {}; run `train` first", run.out.display())));
    }
    let model = EngineModel::load(&model_path)?;
    let source: DataSource = serde_json::from_reader(File::open(run.out.join(DATA_FILE))?)?;
    let dataset = source.load()?;
    if manifest.exists() {
        std::fs::remove_file(&manifest)?;
    }
    let dumps = run.out.join("dumps");
    if dumps.exists() {
        std::fs::remove_dir_all(&dumps)?;
    }
    let m = capture_run(&model, &dataset.test, &run.out)?;
    eprintln!(
        "capture: {} layers, {} samples, model accuracy {:.4}",
        m.layers.len(),
        dataset.test.len(),
        m.model_accuracy
    );
    Ok(())
}

fn analyze_stage(arch: &ArchArgs, run: &RunArgs, t: &ThresholdArgs) -> Result<(), CliError> {
    if stage_done(&run.out.join(REPORT_FILE), run.force, "analyze") {
        return Ok(());
    }
    if !run.out.join(MANIFEST_FILE).exists() || !run.out.join("dumps").is_dir() {
        return Err(invalid(format!("no dumps found in {}", run.out.display())));
    }
    let graph = match load_graph(arch, 1, 2)? {
        Some(g) if arch.arch.is_some() => g,
        _ => {
            let model_path = run.out.join(MODEL_FILE);
            if !model_path.exists() {
                return Err(invalid("no model.json in the run directory; pass --arch"));
            }
            EngineModel::load(model_path)?.graph
        }
    };
    let opts = AnalyzeOptions {
        thresholds: Thresholds {
            delta: t.delta,
            tau: t.tau,
            epsilon: t.epsilon,
        },
        probe: ProbeConfig {
            seed: run.seed,
            ..Default::default()
        },
        heatmap_layers: t.heatmaps.clone(),
    };
    let report = analyze_run(&run.out, &graph, &opts)?;
    emit_report(&report, &run.out)?;
    for l in &report.layers {
        eprintln!(
            "{:<20} r {:>4}  saturation {}  probe {}{}{}",
            l.name,
            l.r,
            l.saturation.map_or("null".into(), |v| format!("{v:.3}")),
            l.probe_accuracy.map_or("null".into(), |v| format!("{v:.4}")),
            if l.flags.is_border { "  [border]" } else { "" },
            if l.flags.in_tail { "  [tail]" } else { "" },
        );
    }
    Ok(())
}

fn chart_stage(run: &RunArgs) -> Result<(), CliError> {
    if stage_done(&run.out.join(CHART_FILE), run.force, "chart") {
        return Ok(());
    }
    if !run.out.join(REPORT_FILE).exists() {
        return Err(invalid(format!("no report.json in {}; run `analyze` first", run.out.display())));
    }
    let report = load_report(&run.out)?;
    std::fs::write(run.out.join(CHART_FILE), render_chart(&report)?)?;
    for h in &report.heatmaps {
        std::fs::write(run.out.join(heatmap_file_name(&h.layer_name)), render_heatmap(h)?)?;
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let _lock = RunLock::acquire(&a.run.out)?;
    train_stage(&a.arch, &a.data, a.input_size, &a.run, &a.train)
}

pub fn cmd_capture(a: &CaptureArgs) -> Result<(), CliError> {
    if !a.run.out.is_dir() {
        return Err(invalid(format!("run directory {} does not exist", a.run.out.display())));
    }
    let _lock = RunLock::acquire(&a.run.out)?;
    capture_stage(&a.run)
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<(), CliError> {
    if !a.run.out.is_dir() {
        return Err(invalid(format!("no dumps found in {}", a.run.out.display())));
    }
    let _lock = RunLock::acquire(&a.run.out)?;
    analyze_stage(&a.arch, &a.run, &a.thresholds)
}

pub fn cmd_chart(a: &ChartArgs) -> Result<(), CliError> {
    if !a.run.out.is_dir() {
        return Err(invalid(format!("run directory {} does not exist", a.run.out.display())));
    }
    let _lock = RunLock::acquire(&a.run.out)?;
    chart_stage(&a.run)
}

/// Each stage is skipped when its output exists; `--force` redoes every stage.
pub fn cmd_full(a: &FullArgs) -> Result<(), CliError> {
    if a.arch.builtin.is_none() && a.arch.arch.is_none() {
        return Err(invalid("one of --builtin or --arch is required"));
    }
    let _lock = RunLock::acquire(&a.run.out)?;
    train_stage(&a.arch, &a.data, a.input_size, &a.run, &a.train)?;
    capture_stage(&a.run)?;
    analyze_stage(&a.arch, &a.run, &a.thresholds)?;
    chart_stage(&a.run)
}
