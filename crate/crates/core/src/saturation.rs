//! Layer saturation: the share of a layer's output dimensions needed to explain
//! a fixed fraction (by default 99%) of the activation variance.
//!
//! Conv activations are treated as one sample per spatial position with the
//! channel count as dimensionality, so an `N×C×H×W` block contributes `N·H·W`
//! samples of dimension `C`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::TensorDump;

pub const DEFAULT_DELTA: f64 = 0.99;

#[derive(Debug, Error, PartialEq)]
pub enum SaturationError {
    #[error("dimension mismatch: accumulator has {expected} features, block has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("block shape {0:?} is neither N×C nor N×C×H×W or does not match its data")]
    BadShape(Vec<usize>),
    #[error("need at least 2 samples, have {0}")]
    TooFewSamples(u64),
    #[error("accumulator contains non-finite values")]
    NonFinite,
    #[error("delta must lie in (0, 1], got {0}")]
    BadDelta(f64),
}

/// Mergeable first/second moment sums for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CovAccumulator {
    d: usize,
    n: u64,
    sum: Vec<f64>,
    /// Row-major `d×d` sum of outer products.
    moment2: Vec<f64>,
}

impl CovAccumulator {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            n: 0,
            sum: vec![0.0; d],
            moment2: vec![0.0; d * d],
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    pub fn moment2(&self) -> &[f64] {
        &self.moment2
    }

    /// Adds a block shaped `N×C` or `N×C×H×W` (row-major).
    pub fn accumulate(&mut self, block: &[f32], shape: &[usize]) -> Result<(), SaturationError> {
        let (n, c, hw) = match *shape {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => return Err(SaturationError::BadShape(shape.to_vec())),
        };
        if c != self.d {
            return Err(SaturationError::DimensionMismatch {
                expected: self.d,
                got: c,
            });
        }
        if block.len() != n * c * hw {
            return Err(SaturationError::BadShape(shape.to_vec()));
        }
        let d = self.d;
        let mut x = vec![0.0f64; c * hw];
        for sample in block.chunks_exact(c * hw) {
            for (dst, &src) in x.iter_mut().zip(sample) {
                *dst = src as f64;
            }
            for (ch, row) in x.chunks_exact(hw).enumerate() {
                self.sum[ch] += row.iter().sum::<f64>();
            }
            // moment2 += X·Xᵀ with X the C×HW matrix of this sample.
            unsafe {
                matrixmultiply::dgemm(
                    d,
                    hw,
                    d,
                    1.0,
                    x.as_ptr(),
                    hw as isize,
                    1,
                    x.as_ptr(),
                    1,
                    hw as isize,
                    1.0,
                    self.moment2.as_mut_ptr(),
                    d as isize,
                    1,
                );
            }
        }
        self.n += (n * hw) as u64;
        Ok(())
    }

    /// Adds every sample of a dump.
    pub fn accumulate_dump(&mut self, dump: &TensorDump) -> Result<(), SaturationError> {
        self.accumulate(&dump.data, &dump.shape)
    }

    /// Combines two accumulators; equivalent to accumulating both streams.
    pub fn merge(&self, other: &Self) -> Result<Self, SaturationError> {
        if self.d != other.d {
            return Err(SaturationError::DimensionMismatch {
                expected: self.d,
                got: other.d,
            });
        }
        Ok(Self {
            d: self.d,
            n: self.n + other.n,
            sum: self.sum.iter().zip(&other.sum).map(|(a, b)| a + b).collect(),
            moment2: self
                .moment2
                .iter()
                .zip(&other.moment2)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Biased (1/n) covariance, symmetrized.
    pub fn covariance(&self) -> Result<DMatrix<f64>, SaturationError> {
        if self.n < 2 {
            return Err(SaturationError::TooFewSamples(self.n));
        }
        if self.sum.iter().chain(&self.moment2).any(|v| !v.is_finite()) {
            return Err(SaturationError::NonFinite);
        }
        let n = self.n as f64;
        let d = self.d;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        Ok(DMatrix::from_fn(d, d, |i, j| {
            let m = 0.5 * (self.moment2[i * d + j] + self.moment2[j * d + i]);
            m / n - mean[i] * mean[j]
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationResult {
    pub k: usize,
    pub d: usize,
    pub value: f64,
    pub delta: f64,
    pub samples: u64,
    /// Covariance spectrum, descending, clamped at zero.
    pub eigvals: Vec<f64>,
}

/// Number of leading eigendirections needed to reach `delta` of the total
/// variance, divided by the dimensionality.
pub fn saturation_of(acc: &CovAccumulator, delta: f64) -> Result<SaturationResult, SaturationError> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(SaturationError::BadDelta(delta));
    }
    let cov = acc.covariance()?;
    let eig = SymmetricEigen::new(cov);
    let mut eigvals: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    eigvals.sort_by(|a, b| b.total_cmp(a));
    let k = retained_directions(&eigvals, delta);
    let d = acc.dim();
    Ok(SaturationResult {
        k,
        d,
        value: k as f64 / d as f64,
        delta,
        samples: acc.count(),
        eigvals,
    })
}

/// Smallest `k` whose leading `k` eigenvalues reach `delta` of their total.
/// A zero spectrum counts as one direction.
pub fn retained_directions(eigvals_desc: &[f64], delta: f64) -> usize {
    let total: f64 = eigvals_desc.iter().sum();
    if total <= 0.0 {
        return 1;
    }
    let target = delta * total;
    let mut acc = 0.0;
    for (i, v) in eigvals_desc.iter().enumerate() {
        acc += v;
        if acc >= target {
            return i + 1;
        }
    }
    eigvals_desc.len().max(1)
}
