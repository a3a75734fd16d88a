use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Below this many calibration scores the quantile is coarse.
pub const MIN_RECOMMENDED_SCORES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub target_tpr: f64,
    /// Pass rate of the calibration scores at the chosen threshold.
    pub achieved_tpr: f64,
    pub scores: Vec<f64>,
}

/// Nearest-rank upper quantile: the smallest observed score `τ` with
/// `|{s ≤ τ}| / n ≥ target_tpr`.
pub fn calibrate_threshold(scores_in: &[f64], target_tpr: f64) -> Result<f64> {
    if scores_in.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(invalid(format!("target TPR must lie in (0, 1], got {target_tpr}")));
    }
    if scores_in.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "calibrate_threshold" });
    }
    if scores_in.len() < MIN_RECOMMENDED_SCORES {
        warn!("calibrating on only {} scores", scores_in.len());
    }
    let mut sorted = scores_in.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let covers = |k: usize| k as f64 / n as f64 >= target_tpr;
    let mut k = ((target_tpr * n as f64).ceil() as usize).clamp(1, n);
    while k > 1 && covers(k - 1) {
        k -= 1;
    }
    while k < n && !covers(k) {
        k += 1;
    }
    Ok(sorted[k - 1])
}

/// Fraction of `scores` that pass (`s ≤ τ`).
pub fn pass_rate(scores: &[f64], tau: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s <= tau).count() as f64 / scores.len() as f64
}
