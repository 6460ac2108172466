//! Pose and map accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::se2::{normalize_angle, Pose2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorSummary {
    pub mae_trans: f64,
    pub mae_rot: f64,
    pub rmse_trans: f64,
    pub rmse_rot: f64,
}

/// Index-matched translation and heading errors. Both sequences must
/// share the gauge of pose 0.
pub fn pose_errors(estimated: &[Pose2], truth: &[Pose2]) -> Result<PoseErrorSummary> {
    if estimated.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: estimated.len(),
            right: truth.len(),
        });
    }
    if estimated.is_empty() {
        return Err(Error::EmptyInput("no poses"));
    }
    let n = estimated.len() as f64;
    let mut s = [0.0f64; 4];
    for (e, t) in estimated.iter().zip(truth) {
        let dt = (e.t - t.t).norm();
        let dr = normalize_angle(e.theta - t.theta).abs();
        s[0] += dt;
        s[1] += dr;
        s[2] += dt * dt;
        s[3] += dr * dr;
    }
    Ok(PoseErrorSummary {
        mae_trans: s[0] / n,
        mae_rot: s[1] / n,
        rmse_trans: (s[2] / n).sqrt(),
        rmse_rot: (s[3] / n).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapAccuracy {
    pub auc: f64,
    pub precision: f64,
    pub n_cells_scored: usize,
}

fn check_layouts(estimate: &Grid2D, truth: &Grid2D) -> Result<()> {
    if estimate.layout() != truth.layout() {
        return Err(Error::Validation(
            "estimate and truth layouts differ".into(),
        ));
    }
    Ok(())
}

/// Area under the ROC curve of estimate log-odds against truth labels
/// (occupied > 0, free < 0). Cells unknown in either map (exactly 0) are
/// skipped. Tied scores count one half.
pub fn map_auc(estimate: &Grid2D, truth: &Grid2D) -> Result<f64> {
    Ok(auc_scored(estimate, truth)?.0)
}

fn auc_scored(estimate: &Grid2D, truth: &Grid2D) -> Result<(f64, usize)> {
    check_layouts(estimate, truth)?;
    let mut scored: Vec<(f64, bool)> = estimate
        .values()
        .iter()
        .zip(truth.values())
        .filter(|(e, t)| **t != 0.0 && **e != 0.0)
        .map(|(e, t)| (*e, *t > 0.0))
        .collect();
    if scored.is_empty() {
        return Err(Error::Metric("no scored cells"));
    }
    let positives = scored.iter().filter(|(_, l)| *l).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric("single-class truth"));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann–Whitney: sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let mut k = i;
        while k + 1 < scored.len() && scored[k + 1].0 == scored[i].0 {
            k += 1;
        }
        let mean_rank = (i + k) as f64 / 2.0 + 1.0;
        let pos = scored[i..=k].iter().filter(|(_, l)| *l).count();
        rank_sum += mean_rank * pos as f64;
        i = k + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok((u / (p * n), scored.len()))
}

/// Fraction of predicted-occupied cells (log-odds > 0) that are occupied
/// in the truth, over cells where the truth is known.
pub fn map_precision(estimate: &Grid2D, truth: &Grid2D) -> Result<f64> {
    check_layouts(estimate, truth)?;
    let mut predicted = 0usize;
    let mut correct = 0usize;
    for (e, t) in estimate.values().iter().zip(truth.values()) {
        if *t != 0.0 && *e > 0.0 {
            predicted += 1;
            if *t > 0.0 {
                correct += 1;
            }
        }
    }
    if predicted == 0 {
        return Err(Error::Metric("no predicted-occupied cells"));
    }
    Ok(correct as f64 / predicted as f64)
}

pub fn map_accuracy(estimate: &Grid2D, truth: &Grid2D) -> Result<MapAccuracy> {
    let (auc, n_cells_scored) = auc_scored(estimate, truth)?;
    Ok(MapAccuracy {
        auc,
        precision: map_precision(estimate, truth)?,
        n_cells_scored,
    })
}

/// The metrics object written by the `eval` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae_trans: f64,
    pub mae_rot: f64,
    pub rmse_trans: f64,
    pub rmse_rot: f64,
    pub auc: f64,
    pub precision: f64,
}

impl Metrics {
    pub fn new(poses: PoseErrorSummary, map: MapAccuracy) -> Self {
        Self {
            mae_trans: poses.mae_trans,
            mae_rot: poses.mae_rot,
            rmse_trans: poses.rmse_trans,
            rmse_rot: poses.rmse_rot,
            auc: map.auc,
            precision: map.precision,
        }
    }
}
