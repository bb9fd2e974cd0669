//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use std::path::Path;

use layerscope::arch::{generate_builtin, ArchGraph, BuiltinOptions, LayerKind, NodeSpec};
use layerscope::engine::{capture_run, generate_toy, train, EngineModel, ToySpec, TrainConfig, TrainResult};
use layerscope::report::{analyze_run, AnalysisReport, AnalyzeOptions};
use layerscope::saturation::CovAccumulator;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Eigenvalues of a symmetric `d×d` row-major matrix by cyclic Jacobi
/// rotations, sorted descending.
pub fn jacobi_eigenvalues(mut a: Vec<f64>, d: usize) -> Vec<f64> {
    let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Biased covariance of `n` rows of `d` features, mean subtracted first.
pub fn two_pass_covariance(rows: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for r in rows.chunks(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for r in rows.chunks(d) {
        for i in 0..d {
            let xi = r[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += xi * (r[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);
    cov
}

/// Fewest leading eigenvalues whose sum reaches `delta` of the total.
pub fn oracle_k(eig_desc: &[f64], delta: f64) -> usize {
    let clamped: Vec<f64> = eig_desc.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return 1;
    }
    let mut acc = 0.0;
    for (i, v) in clamped.iter().enumerate() {
        acc += v;
        if acc >= delta * total {
            return i + 1;
        }
    }
    clamped.len()
}

/// Standard normal sample by Box-Muller.
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Correlated Gaussian rows: white noise through a random mixing matrix with
/// geometrically decaying column scales, plus a random offset.
pub fn gaussian_instance(seed: u64) -> (usize, usize, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..=32);
    let n = rng.gen_range(2 * d..=10_000);
    let decay: f64 = rng.gen_range(0.3..1.0);
    let mix: Vec<f64> = (0..d * d)
        .map(|i| gauss(&mut rng) * decay.powi((i % d) as i32))
        .collect();
    let offset: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let mut rows = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        for i in 0..d {
            rows.push(offset[i] + (0..d).map(|j| mix[i * d + j] * z[j]).sum::<f64>());
        }
    }
    (n, d, rows)
}

/// Feeds rows to a fresh accumulator in random-sized blocks.
pub fn stream(rows: &[f32], n: usize, d: usize, seed: u64) -> CovAccumulator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = CovAccumulator::new(d);
    let mut start = 0;
    while start < n {
        let len = rng.gen_range(1..=512).min(n - start);
        acc.accumulate(&rows[start * d..(start + len) * d], &[len, d]).unwrap();
        start += len;
    }
    acc
}

/// A random chain of up to 8 convs and pools, with optional BN/ReLU between.
pub fn random_sequential_graph(seed: u64) -> ArchGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(1..=8);
    let mut specs = vec![NodeSpec::input(1)];
    let mut prev = "input".to_string();
    let mut jump = 1;
    for i in 0..depth {
        let stride = if jump >= 16 { 1 } else { rng.gen_range(1..=3) };
        jump *= stride;
        let name = format!("n{i}");
        match rng.gen_range(0..4) {
            0 => {
                let k = rng.gen_range(1..=4);
                let kind = if rng.gen() { LayerKind::MaxPool } else { LayerKind::AvgPool };
                let p = rng.gen_range(0..=(k - 1) / 2);
                specs.push(NodeSpec::pool(kind, &name, k, stride, p, &prev));
            }
            _ => {
                let k = rng.gen_range(1..=5);
                let d = if k > 1 { rng.gen_range(1..=3) } else { 1 };
                let k_eff = d * (k - 1) + 1;
                let p = rng.gen_range(0..=(k_eff - 1) / 2);
                specs.push(NodeSpec::conv(&name, k, stride, d, p, 2, &prev));
            }
        }
        prev = name;
        if rng.gen_bool(0.3) {
            let n = format!("r{i}");
            specs.push(NodeSpec::unary(LayerKind::ReLU, &n, &prev));
            prev = n;
        }
    }
    ArchGraph::from_specs(format!("random{seed}"), &specs).expect("generated graph is valid")
}

/// Builtins whose layer graph is a chain: VGGs, plus ResNets with every
/// residual disabled.
pub fn sequential_builtins() -> Vec<ArchGraph> {
    layerscope::arch::BUILTIN_NAMES
        .iter()
        .map(|&name| {
            let mask = name.starts_with("resnet").then(|| vec![false; 4]);
            let g = generate_builtin(
                name,
                &BuiltinOptions {
                    residual_mask: mask,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(g.is_sequential(), "{name}");
            g
        })
        .collect()
}

pub struct DeskRun {
    pub train: TrainResult,
    pub report: AnalysisReport,
    pub graph: ArchGraph,
}

/// Trains desk10 on a toy task, captures the test split and analyzes it.
pub fn desk_run(spec: &ToySpec, cfg: &TrainConfig, dir: &Path) -> DeskRun {
    let data = generate_toy(spec).unwrap();
    let opts = BuiltinOptions {
        in_channels: spec.channels,
        num_classes: data.num_classes,
        ..Default::default()
    };
    let graph = generate_builtin("desk10", &opts).unwrap();
    let mut model = EngineModel::new(graph.clone(), cfg.seed);
    let train_result = train(&mut model, &data, cfg).unwrap();
    capture_run(&model, &data.test, dir).unwrap();
    let report = analyze_run(dir, &graph, &AnalyzeOptions::default()).unwrap();
    DeskRun {
        train: train_result,
        report,
        graph,
    }
}
