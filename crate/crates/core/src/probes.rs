//! Linear probes: multinomial logistic regression trained on frozen activations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::TensorDump;

/// Side of the adaptive-pooling grid used for conv-layer probe features.
pub const POOL_GRID: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("layer `{layer}`: expected a {expected} dump, got shape {shape:?}")]
    WrongRank {
        layer: String,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("feature map is empty ({h}×{w})")]
    EmptyMap { h: usize, w: usize },
    #[error("position ({h}, {w}) outside a {height}×{width} map")]
    PositionOutOfRange {
        h: usize,
        w: usize,
        height: usize,
        width: usize,
    },
    #[error("{labels} labels for {rows} samples")]
    LabelCount { rows: usize, labels: usize },
    #[error("label {0} is not a non-negative integer")]
    BadLabel(f32),
    #[error("training split contains a single class")]
    SingleClass,
    #[error("features contain non-finite values")]
    NonFinite,
    #[error("too few rows ({0}) for a train/held-out split")]
    TooFewRows(usize),
    #[error("model accuracy must be positive")]
    ZeroModelAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ProbeMode {
    /// 4×4 adaptive average pooling, flattened channel-major.
    Pooled4x4,
    /// The channel vector at one feature-map position.
    PerPosition { h: usize, w: usize },
    /// A dump that is already N×C.
    Vector,
}

/// Design matrix for one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFeatures {
    pub layer_name: String,
    pub mode: ProbeMode,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub x: Vec<f32>,
    pub y: Vec<usize>,
}

/// Converts a label dump (f32 class ids) to indices.
pub fn labels_from_dump(dump: &TensorDump) -> Result<Vec<usize>, ProbeError> {
    dump.data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(ProbeError::BadLabel(v))
            }
        })
        .collect()
}

/// Splits `n` into `parts` contiguous bands. When `n >= parts`, sizes differ by
/// at most one with the larger bands first; smaller maps map each band to a
/// single row.
pub fn adaptive_bands(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    if n >= parts {
        let (base, rem) = (n / parts, n % parts);
        let mut start = 0;
        (0..parts)
            .map(|i| {
                let len = base + usize::from(i < rem);
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    } else {
        (0..parts)
            .map(|i| {
                let s = i * n / parts;
                s..s + 1
            })
            .collect()
    }
}

pub fn extract_features(
    dump: &TensorDump,
    labels: &[usize],
    mode: ProbeMode,
) -> Result<ProbeFeatures, ProbeError> {
    let rows = dump.shape[0];
    if labels.len() != rows {
        return Err(ProbeError::LabelCount {
            rows,
            labels: labels.len(),
        });
    }
    let (cols, x) = match mode {
        ProbeMode::Vector => {
            let &[_, c] = dump.shape.as_slice() else {
                return Err(ProbeError::WrongRank {
                    layer: dump.layer_name.clone(),
                    expected: "N×C",
                    shape: dump.shape.clone(),
                });
            };
            (c, dump.data.clone())
        }
        ProbeMode::Pooled4x4 | ProbeMode::PerPosition { .. } => {
            let &[_, c, h, w] = dump.shape.as_slice() else {
                return Err(ProbeError::WrongRank {
                    layer: dump.layer_name.clone(),
                    expected: "N×C×H×W",
                    shape: dump.shape.clone(),
                });
            };
            if h == 0 || w == 0 {
                return Err(ProbeError::EmptyMap { h, w });
            }
            let plane = h * w;
            match mode {
                ProbeMode::PerPosition { h: ph, w: pw } => {
                    if ph >= h || pw >= w {
                        return Err(ProbeError::PositionOutOfRange {
                            h: ph,
                            w: pw,
                            height: h,
                            width: w,
                        });
                    }
                    let x = dump
                        .data
                        .chunks_exact(c * plane)
                        .flat_map(|s| (0..c).map(move |ch| s[ch * plane + ph * w + pw]))
                        .collect();
                    (c, x)
                }
                _ => {
                    let rb = adaptive_bands(h, POOL_GRID);
                    let cb = adaptive_bands(w, POOL_GRID);
                    let cols = c * POOL_GRID * POOL_GRID;
                    let mut x = Vec::with_capacity(rows * cols);
                    for sample in dump.data.chunks_exact(c * plane) {
                        for map in sample.chunks_exact(plane) {
                            for r in &rb {
                                for q in &cb {
                                    let mut acc = 0.0f64;
                                    for i in r.clone() {
                                        for j in q.clone() {
                                            acc += map[i * w + j] as f64;
                                        }
                                    }
                                    x.push((acc / (r.len() * q.len()) as f64) as f32);
                                }
                            }
                        }
                    }
                    (cols, x)
                }
            }
        }
    };
    Ok(ProbeFeatures {
        layer_name: dump.layer_name.clone(),
        mode,
        rows,
        cols,
        x,
        y: labels.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub passes: usize,
    pub lr: f64,
    pub batch: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            passes: 30,
            lr: 0.1,
            batch: 64,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    /// Step size for a pass: divided by 10 after one and after two thirds.
    pub fn lr_at(&self, pass: usize) -> f64 {
        let mut lr = self.lr;
        if pass * 3 >= self.passes {
            lr *= 0.1;
        }
        if pass * 3 >= 2 * self.passes {
            lr *= 0.1;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub layer_name: String,
    pub mode: ProbeMode,
    pub num_classes: usize,
    pub features: usize,
    /// Row-major `num_classes × features`, acting on standardized inputs.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub config: ProbeConfig,
    pub train_rows: usize,
    pub heldout_rows: usize,
    pub accuracy: f64,
}

impl Probe {
    pub fn predict(&self, row: &[f32]) -> usize {
        let z: Vec<f64> = row
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(&v, (m, s))| (v as f64 - m) / s)
            .collect();
        argmax(&logits(&self.weights, &self.bias, &z))
    }
}

fn logits(weights: &[f64], bias: &[f64], z: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(k, b)| b + weights[k * z.len()..(k + 1) * z.len()].iter().zip(z).map(|(w, x)| w * x).sum::<f64>())
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains a probe on a seeded split of the rows and reports held-out accuracy.
pub fn train_probe(f: &ProbeFeatures, cfg: &ProbeConfig) -> Result<Probe, ProbeError> {
    if f.x.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite);
    }
    let n = f.rows;
    let n_train = ((n as f64) * cfg.train_fraction).floor() as usize;
    if n_train == 0 || n_train >= n {
        return Err(ProbeError::TooFewRows(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let (train, heldout) = idx.split_at(n_train);

    let first = f.y[train[0]];
    if train.iter().all(|&i| f.y[i] == first) {
        return Err(ProbeError::SingleClass);
    }
    let classes = f.y.iter().copied().max().unwrap_or(0) + 1;
    let dim = f.cols;

    let mut mean = vec![0.0f64; dim];
    for &i in train {
        for (m, &v) in mean.iter_mut().zip(&f.x[i * dim..(i + 1) * dim]) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    let mut var = vec![0.0f64; dim];
    for &i in train {
        for ((s, &v), m) in var.iter_mut().zip(&f.x[i * dim..(i + 1) * dim]).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / n_train as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let standardize = |i: usize| -> Vec<f64> {
        f.x[i * dim..(i + 1) * dim]
            .iter()
            .zip(mean.iter().zip(&std))
            .map(|(&v, (m, s))| (v as f64 - m) / s)
            .collect()
    };
    let z_train: Vec<Vec<f64>> = train.iter().map(|&i| standardize(i)).collect();

    let mut w = vec![0.0f64; classes * dim];
    let mut b = vec![0.0f64; classes];
    let mut order: Vec<usize> = (0..n_train).collect();
    let batch = cfg.batch.max(1);
    let mut gw = vec![0.0f64; classes * dim];
    let mut gb = vec![0.0f64; classes];
    for pass in 0..cfg.passes {
        let lr = cfg.lr_at(pass);
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            for &r in chunk {
                let z = &z_train[r];
                let mut p = logits(&w, &b, z);
                softmax_in_place(&mut p);
                p[f.y[train[r]]] -= 1.0;
                for (k, &pk) in p.iter().enumerate() {
                    gb[k] += pk;
                    for (g, x) in gw[k * dim..(k + 1) * dim].iter_mut().zip(z) {
                        *g += pk * x;
                    }
                }
            }
            let scale = lr / chunk.len() as f64;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= scale * g;
            }
            for (bi, g) in b.iter_mut().zip(&gb) {
                *bi -= scale * g;
            }
        }
    }

    let mut probe = Probe {
        layer_name: f.layer_name.clone(),
        mode: f.mode,
        num_classes: classes,
        features: dim,
        weights: w,
        bias: b,
        feature_mean: mean,
        feature_std: std,
        config: cfg.clone(),
        train_rows: n_train,
        heldout_rows: heldout.len(),
        accuracy: 0.0,
    };
    let correct = heldout
        .iter()
        .filter(|&&i| probe.predict(&f.x[i * dim..(i + 1) * dim]) == f.y[i])
        .count();
    probe.accuracy = correct as f64 / heldout.len() as f64;
    Ok(probe)
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Probe accuracy as a fraction of the model's own accuracy; may exceed 1.
pub fn relative_performance(probe_accuracy: f64, model_accuracy: f64) -> Result<f64, ProbeError> {
    if model_accuracy <= 0.0 {
        return Err(ProbeError::ZeroModelAccuracy);
    }
    Ok(probe_accuracy / model_accuracy)
}

/// Per-position probe results over one feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub layer_name: String,
    pub height: usize,
    pub width: usize,
    /// Row-major held-out accuracies.
    pub accuracy: Vec<f64>,
    /// Row-major accuracies relative to the model.
    pub relative: Vec<f64>,
}

/// Trains one probe per feature-map position.
pub fn position_heatmap(
    dump: &TensorDump,
    labels: &[usize],
    cfg: &ProbeConfig,
    model_accuracy: f64,
) -> Result<Heatmap, ProbeError> {
    let &[_, _, h, w] = dump.shape.as_slice() else {
        return Err(ProbeError::WrongRank {
            layer: dump.layer_name.clone(),
            expected: "N×C×H×W",
            shape: dump.shape.clone(),
        });
    };
    let accuracy: Vec<f64> = (0..h * w)
        .into_par_iter()
        .map(|pos| {
            let f = extract_features(dump, labels, ProbeMode::PerPosition { h: pos / w, w: pos % w })?;
            Ok(train_probe(&f, cfg)?.accuracy)
        })
        .collect::<Result<_, ProbeError>>()?;
    let relative = accuracy
        .iter()
        .map(|&a| relative_performance(a, model_accuracy))
        .collect::<Result<_, _>>()?;
    Ok(Heatmap {
        layer_name: dump.layer_name.clone(),
        height: h,
        width: w,
        accuracy,
        relative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_dump(h: usize, w: usize) -> TensorDump {
        let data = (0..h * w).map(|v| v as f32).collect();
        TensorDump::new("m", vec![1, 1, h, w], data).unwrap()
    }

    #[test]
    fn bands() {
        let sizes = |n| adaptive_bands(n, 4).iter().map(|r| r.len()).collect::<Vec<_>>();
        assert_eq!(sizes(4), [1, 1, 1, 1]);
        assert_eq!(sizes(5), [2, 1, 1, 1]);
        assert_eq!(sizes(7), [2, 2, 2, 1]);
        assert_eq!(sizes(8), [2, 2, 2, 2]);
        assert_eq!(adaptive_bands(2, 4), [0..1, 0..1, 1..2, 1..2]);
    }

    #[test]
    fn pooled_4x4_is_identity_on_4x4() {
        let d = map_dump(4, 4);
        let f = extract_features(&d, &[0], ProbeMode::Pooled4x4).unwrap();
        assert_eq!(f.x, d.data);
        assert_eq!(f.cols, 16);
    }

    #[test]
    fn pooled_8x8_averages_2x2_blocks() {
        let d = map_dump(8, 8);
        let f = extract_features(&d, &[0], ProbeMode::Pooled4x4).unwrap();
        assert_eq!(f.x[0], (0.0 + 1.0 + 8.0 + 9.0) / 4.0);
        assert_eq!(f.x[15], (54.0 + 55.0 + 62.0 + 63.0) / 4.0);
    }

    #[test]
    fn pooled_5x5_matches_brute_force() {
        let d = map_dump(5, 5);
        let f = extract_features(&d, &[0], ProbeMode::Pooled4x4).unwrap();
        // Band edges per axis: [0,2) [2,3) [3,4) [4,5).
        let edges = [(0usize, 2usize), (2, 3), (3, 4), (4, 5)];
        for (bi, &(r0, r1)) in edges.iter().enumerate() {
            for (bj, &(c0, c1)) in edges.iter().enumerate() {
                let mut s = 0.0;
                let mut n = 0.0;
                for i in r0..r1 {
                    for j in c0..c1 {
                        s += (i * 5 + j) as f32;
                        n += 1.0;
                    }
                }
                assert_eq!(f.x[bi * 4 + bj], s / n);
            }
        }
        assert_eq!(f.x[0], 3.0);
    }

    #[test]
    fn per_position_selects_channel_vector() {
        let data: Vec<f32> = (0..2 * 3 * 2 * 2).map(|v| v as f32).collect();
        let d = TensorDump::new("m", vec![2, 3, 2, 2], data).unwrap();
        let f = extract_features(&d, &[0, 1], ProbeMode::PerPosition { h: 1, w: 0 }).unwrap();
        assert_eq!(f.cols, 3);
        assert_eq!(&f.x[..3], &[2.0, 6.0, 10.0]);
        assert_eq!(&f.x[3..], &[14.0, 18.0, 22.0]);
        assert!(matches!(
            extract_features(&d, &[0, 1], ProbeMode::PerPosition { h: 2, w: 0 }),
            Err(ProbeError::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn relative() {
        assert_eq!(relative_performance(0.5, 0.5), Ok(1.0));
        assert_eq!(relative_performance(0.25, 0.5), Ok(0.5));
        assert_eq!(relative_performance(0.25, 0.0), Err(ProbeError::ZeroModelAccuracy));
    }

    #[test]
    fn single_class_rejected() {
        let f = ProbeFeatures {
            layer_name: "x".into(),
            mode: ProbeMode::Vector,
            rows: 10,
            cols: 1,
            x: (0..10).map(|v| v as f32).collect(),
            y: vec![1; 10],
        };
        assert_eq!(train_probe(&f, &ProbeConfig::default()), Err(ProbeError::SingleClass));
        let mut g = f.clone();
        g.y[0] = 0;
        g.x[3] = f32::INFINITY;
        assert_eq!(train_probe(&g, &ProbeConfig::default()), Err(ProbeError::NonFinite));
    }

    #[test]
    fn lr_schedule() {
        let cfg = ProbeConfig::default();
        assert_eq!(cfg.lr_at(0), 0.1);
        assert!((cfg.lr_at(10) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(20) - 0.001).abs() < 1e-15);
    }
}
