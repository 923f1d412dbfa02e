//! Error statistics, cumulative curves and the landmark-consistency filter.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Median, mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub median: f64,
    pub mean: f64,
    /// Normalized by `N`, not `N - 1`.
    pub std: f64,
}

pub fn error_stats(distances: &[f64]) -> Result<ErrorStats> {
    if distances.is_empty() {
        return Err(Error::Validation("no distances".into()));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::Validation("distances must be finite".into()));
    }
    let mut s = distances.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    let mean = s.iter().sum::<f64>() / n as f64;
    let var = s.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
    Ok(ErrorStats {
        median,
        mean,
        std: var.sqrt(),
    })
}

/// Fraction of distances `<=` each threshold.
pub fn cumulative_curve(distances: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let mut s = distances.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len().max(1) as f64;
    thresholds
        .iter()
        .map(|t| s.partition_point(|d| d <= t) as f64 / n)
        .collect()
}

/// Evenly spaced thresholds from 0 to `max` inclusive.
pub fn default_thresholds(max: f64, count: usize) -> Vec<f64> {
    let count = count.max(2);
    (0..count)
        .map(|i| max * i as f64 / (count - 1) as f64)
        .collect()
}

/// Per-vertex distances with their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub distances: Vec<f64>,
    pub stats: ErrorStats,
    pub thresholds: Vec<f64>,
    pub curve: Vec<f64>,
}

impl DistanceReport {
    pub fn new(distances: Vec<f64>, thresholds: Vec<f64>) -> Result<Self> {
        let stats = error_stats(&distances)?;
        let curve = cumulative_curve(&distances, &thresholds);
        Ok(Self {
            distances,
            stats,
            thresholds,
            curve,
        })
    }
}

pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub score: f64,
    /// Landmark attaining the score.
    pub worst: usize,
}

/// `score = max_i ‖diag(w, h)⁻¹ (k2_i − shift − k1_i)‖₂`; the image is
/// discarded when `score >= threshold`.
pub fn landmark_consistency_filter(
    k1: &[[f64; 2]],
    k2: &[[f64; 2]],
    bbox_w: f64,
    bbox_h: f64,
    shift: [f64; 2],
    threshold: f64,
) -> Result<FilterDecision> {
    check_dim("landmarks", k1.len(), k2.len())?;
    if !(bbox_w > 0.0) || !(bbox_h > 0.0) {
        return Err(Error::Validation("bounding box must be positive".into()));
    }
    let mut score = 0.0;
    let mut worst = 0;
    for (i, (a, b)) in k1.iter().zip(k2).enumerate() {
        let dx = (b[0] - shift[0] - a[0]) / bbox_w;
        let dy = (b[1] - shift[1] - a[1]) / bbox_h;
        let s = (dx * dx + dy * dy).sqrt();
        if s > score {
            score = s;
            worst = i;
        }
    }
    Ok(FilterDecision {
        keep: score < threshold,
        score,
        worst,
    })
}
