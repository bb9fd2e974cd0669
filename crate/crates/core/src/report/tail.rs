//! Detection of low-saturation runs at either end of the conv sequence.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ReportError;

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Prefix,
    Suffix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    /// Conv-layer index range, `None` when no prefix or suffix qualifies.
    pub tail: Option<Range<usize>>,
    pub anchor: Option<Anchor>,
    pub tau: f64,
    pub epsilon: f64,
    /// Probe-accuracy change of each tail layer over its predecessor.
    pub deltas: Vec<f64>,
    pub mean_gain: Option<f64>,
    /// Every delta is below `epsilon`. `None` without a tail or probe data.
    pub confirmed: Option<bool>,
    /// Interior low-saturation runs; reported, never treated as a tail.
    pub anomalies: Vec<Range<usize>>,
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn qualifies(sats: &[f64], range: Range<usize>, tau: f64) -> bool {
    let outside = sats
        .iter()
        .enumerate()
        .filter(|(i, _)| !range.contains(i))
        .map(|(_, &s)| s);
    let threshold = tau * median(outside);
    sats[range].iter().all(|&s| s < threshold)
}

/// Longest prefix or suffix whose every saturation is below `tau` times the
/// median saturation of the remaining layers. Prefix wins only when strictly
/// longer. With probe accuracies, the tail is confirmed when no tail layer
/// improves on its predecessor by `epsilon` or more.
pub fn detect_tail(
    saturations: &[f64],
    probe_accuracies: Option<&[f64]>,
    tau: f64,
    epsilon: f64,
) -> Result<TailReport, ReportError> {
    let n = saturations.len();
    if n < 3 {
        return Err(ReportError::TooFewLayers(n));
    }
    if let Some(p) = probe_accuracies {
        if p.len() != n {
            return Err(ReportError::LengthMismatch {
                saturations: n,
                probes: p.len(),
            });
        }
    }
    if saturations.iter().any(|s| !s.is_finite()) {
        return Err(ReportError::NonFinite("saturation"));
    }

    let prefix = (1..n).rev().find(|&l| qualifies(saturations, 0..l, tau)).unwrap_or(0);
    let suffix = (1..n).rev().find(|&l| qualifies(saturations, n - l..n, tau)).unwrap_or(0);
    let (tail, anchor) = if prefix > suffix {
        (Some(0..prefix), Some(Anchor::Prefix))
    } else if suffix > 0 {
        (Some(n - suffix..n), Some(Anchor::Suffix))
    } else {
        (None, None)
    };

    let mut deltas = Vec::new();
    if let (Some(t), Some(p)) = (&tail, probe_accuracies) {
        for i in t.clone() {
            if i > 0 {
                deltas.push(p[i] - p[i - 1]);
            }
        }
    }
    let mean_gain = (!deltas.is_empty()).then(|| deltas.iter().sum::<f64>() / deltas.len() as f64);
    let confirmed = match (&tail, probe_accuracies) {
        (Some(_), Some(_)) => Some(deltas.iter().all(|&d| d < epsilon)),
        _ => None,
    };

    // Interior runs of layers below tau times the overall median.
    let threshold = tau * median(saturations.iter().copied());
    let mut anomalies = Vec::new();
    let mut start = None;
    for i in 0..=n {
        let low = i < n && saturations[i] < threshold && !tail.as_ref().is_some_and(|t| t.contains(&i));
        match (low, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if s > 0 && i < n {
                    anomalies.push(s..i);
                }
                start = None;
            }
            _ => {}
        }
    }

    Ok(TailReport {
        tail,
        anchor,
        tau,
        epsilon,
        deltas,
        mean_gain,
        confirmed,
        anomalies,
    })
}
