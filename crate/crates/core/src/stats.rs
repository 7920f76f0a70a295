//! Reproducible reductions and small statistical fits used by the studies.

use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};

/// Pairwise (cascade) summation in index order.
///
/// The reduction tree depends only on the slice length, so results are
/// bit-identical regardless of how the values were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().fold(0.0, |acc, &x| acc + x);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Mean and batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Mean with a standard error from contiguous batch means.
///
/// Batches are formed in index order; with fewer samples than batches each
/// sample is its own batch.
pub fn batch_means(xs: &[f64], batches: usize) -> MeanEstimate {
    let n = xs.len();
    let m = mean(xs);
    let b = batches.min(n).max(1);
    if b < 2 {
        return MeanEstimate {
            mean: m,
            stderr: f64::INFINITY,
            samples: n,
        };
    }
    let mut means = Vec::with_capacity(b);
    for k in 0..b {
        let lo = k * n / b;
        let hi = (k + 1) * n / b;
        means.push(mean(&xs[lo..hi]));
    }
    let bm = mean(&means);
    let dev: Vec<f64> = means.iter().map(|&x| (x - bm) * (x - bm)).collect();
    let var = pairwise_sum(&dev) / (b - 1) as f64;
    MeanEstimate {
        mean: m,
        stderr: (var / b as f64).sqrt(),
        samples: n,
    }
}

/// Weighted least-squares line fit `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope implied by the weights.
    pub slope_stderr: f64,
}

pub fn weighted_line_fit(x: &[f64], y: &[f64], w: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() != w.len() {
        return invalid("line fit: length mismatch");
    }
    if x.len() < 2 {
        return invalid("line fit needs at least two points");
    }
    if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return invalid("line fit weights must be positive and finite");
    }
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..x.len() {
        sxx += w[i] * (x[i] - xm) * (x[i] - xm);
        sxy += w[i] * (x[i] - xm) * (y[i] - ym);
    }
    if sxx <= 0.0 {
        return invalid("line fit: abscissae are all equal");
    }
    let slope = sxy / sxx;
    Ok(LineFit {
        slope,
        intercept: ym - slope * xm,
        slope_stderr: (1.0 / sxx).sqrt(),
    })
}

/// Log-log slope of `|values|` against `ns`, weighted by `1/stderr_log^2`.
///
/// `stderr` is the standard error of each value; it is mapped to the log scale
/// by the delta method. Values and standard errors are floored at `floor`.
pub fn loglog_slope(ns: &[f64], values: &[f64], stderr: &[f64], floor: f64) -> Result<LineFit> {
    if ns.len() != values.len() || ns.len() != stderr.len() {
        return invalid("log-log fit: length mismatch");
    }
    let x: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let y: Vec<f64> = values.iter().map(|v| v.abs().max(floor).ln()).collect();
    let w: Vec<f64> = values
        .iter()
        .zip(stderr)
        .map(|(v, s)| {
            let rel = s.max(floor) / v.abs().max(floor);
            1.0 / (rel * rel).max(floor)
        })
        .collect();
    weighted_line_fit(&x, &y, &w)
}
