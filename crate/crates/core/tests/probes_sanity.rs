mod common;

use common::gauss;
use layerscope::probes::{extract_features, train_probe, ProbeConfig, ProbeFeatures, ProbeMode};
use layerscope::store::TensorDump;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn features(x: Vec<f32>, y: Vec<usize>, cols: usize) -> ProbeFeatures {
    ProbeFeatures {
        layer_name: "test".into(),
        mode: ProbeMode::Vector,
        rows: y.len(),
        cols,
        x,
        y,
    }
}

/// Two isotropic blobs whose centers are 10 sigma apart along a random direction.
fn blobs(n: usize, dim: usize, seed: u64) -> ProbeFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir: Vec<f64> = (0..dim).map(|_| gauss(&mut rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v *= 5.0 / norm);
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let sign = if class == 0 { -1.0 } else { 1.0 };
        for &dv in &dir {
            x.push((sign * dv + gauss(&mut rng)) as f32);
        }
        y.push(class);
    }
    features(x, y, dim)
}

#[test]
fn separable_blobs_are_learned() {
    let f = blobs(2000, 16, 3);
    let p = train_probe(&f, &ProbeConfig::default()).unwrap();
    assert!(p.accuracy >= 0.99, "{}", p.accuracy);
    assert_eq!(p.heldout_rows, 400);
}

#[test]
fn permuted_labels_give_chance_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, dim, k) = (5000, 20, 10);
    let x: Vec<f32> = (0..n * dim).map(|_| gauss(&mut rng) as f32).collect();
    let mut y: Vec<usize> = (0..n).map(|i| i % k).collect();
    y.shuffle(&mut rng);
    let p = train_probe(&features(x, y, dim), &ProbeConfig::default()).unwrap();
    assert!((0.07..=0.13).contains(&p.accuracy), "{}", p.accuracy);
}

#[test]
fn fixed_seed_is_bit_identical() {
    let f = blobs(600, 8, 9);
    let cfg = ProbeConfig {
        seed: 42,
        ..Default::default()
    };
    let a = train_probe(&f, &cfg).unwrap();
    let b = train_probe(&f.clone(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>(), b.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>());
}

#[test]
fn accuracy_invariant_under_per_feature_affine_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 6;
    // Overlapping blobs so accuracy is informative, not saturated.
    let n = 800;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % 3;
        for j in 0..dim {
            x.push((gauss(&mut rng) + if j == c { 1.0 } else { 0.0 }) as f32);
        }
        y.push(c);
    }
    // Power-of-two scales and small integer shifts keep the f32 inputs exact
    // through standardization.
    let scale: Vec<f32> = (0..dim).map(|_| [0.25f32, 0.5, 2.0, 4.0][rng.gen_range(0..4)]).collect();
    let shift: Vec<f32> = (0..dim).map(|_| rng.gen_range(-4..=4) as f32).collect();
    let moved: Vec<f32> = x.iter().enumerate().map(|(i, &v)| v * scale[i % dim] + shift[i % dim]).collect();
    let cfg = ProbeConfig::default();
    let a = train_probe(&features(x, y.clone(), dim), &cfg).unwrap();
    let b = train_probe(&features(moved, y, dim), &cfg).unwrap();
    assert!((a.accuracy - b.accuracy).abs() <= 1.0 / a.heldout_rows as f64, "{} vs {}", a.accuracy, b.accuracy);
}

#[test]
fn pooled_features_from_conv_dump() {
    let (n, c, h, w) = (40, 3, 8, 8);
    let data: Vec<f32> = (0..n * c * h * w).map(|i| (i % 17) as f32).collect();
    let dump = TensorDump::new("conv1", vec![n, c, h, w], data.clone()).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let f = extract_features(&dump, &labels, ProbeMode::Pooled4x4).unwrap();
    assert_eq!((f.rows, f.cols), (n, c * 16));
    // Oracle: average the 2×2 block behind cell (1, 2) of channel 2, sample 5.
    let at = |s: usize, ch: usize, i: usize, j: usize| data[((s * c + ch) * h + i) * w + j];
    let expect = (at(5, 2, 2, 4) + at(5, 2, 2, 5) + at(5, 2, 3, 4) + at(5, 2, 3, 5)) / 4.0;
    assert!((f.x[5 * f.cols + 2 * 16 + 6] - expect).abs() < 1e-6);
}
