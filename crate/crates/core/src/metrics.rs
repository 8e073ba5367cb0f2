//! Run metrics (MAE, MSPR, IWP), reference baseline predictors, and
//! FLOPs / battery estimates.

use crate::geometry::Direction;
use crate::seqmodel::{forward, ArchSpec, ModelError, ModelKind, SequenceModelParams};
use crate::sim::{total_prefetched_area, StepRecord};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("cohorts do not cover the same users")]
    MismatchedCohorts,
    #[error("non-positive input")]
    NonPositiveInput,
    #[error("no model produced a usable prediction")]
    DegeneratePrediction,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn rad_to_deg(r: f64) -> f64 {
    r * 180.0 / PI
}

pub fn frac_to_pct(f: f64) -> f64 {
    f * 100.0
}

/// Aggregates for one user's run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub user_id: u32,
    pub video_id: u32,
    /// Mean angular error in radians.
    pub mae: f64,
    /// Mean successful prefetch ratio in [0, 1].
    pub mspr: f64,
    pub total_prefetched_area: f64,
}

impl RunMetrics {
    pub fn from_records(user_id: u32, video_id: u32, records: &[StepRecord]) -> Result<Self, MetricsError> {
        Ok(RunMetrics {
            user_id,
            video_id,
            mae: mae(records)?,
            mspr: mspr(records)?,
            total_prefetched_area: total_prefetched_area(records),
        })
    }
}

/// Mean of the recorded per-tick angular errors, in radians.
pub fn mae(records: &[StepRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(records.iter().map(|r| r.gamma).sum::<f64>() / records.len() as f64)
}

/// Mean of the recorded per-tick overlap ratios, in [0, 1].
pub fn mspr(records: &[StepRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(records.iter().map(|r| r.overlap_ratio).sum::<f64>() / records.len() as f64)
}

fn sorted_by_user(metrics: &[RunMetrics]) -> Vec<RunMetrics> {
    let mut v = metrics.to_vec();
    v.sort_by_key(|m| m.user_id);
    v
}

fn check_matched(baseline: &[RunMetrics], ours: &[RunMetrics]) -> Result<(Vec<RunMetrics>, Vec<RunMetrics>), MetricsError> {
    if baseline.is_empty() || baseline.len() != ours.len() {
        return Err(if baseline.is_empty() { MetricsError::Empty } else { MetricsError::MismatchedCohorts });
    }
    let b = sorted_by_user(baseline);
    let o = sorted_by_user(ours);
    if b.iter().zip(&o).any(|(x, y)| x.user_id != y.user_id) {
        return Err(MetricsError::MismatchedCohorts);
    }
    Ok((b, o))
}

/// Improvement on the worst prediction: the MSPR delta of the user whose
/// baseline MSPR is minimal (ties broken toward the lowest user id).
pub fn iwp(baseline: &[RunMetrics], ours: &[RunMetrics]) -> Result<f64, MetricsError> {
    let (b, o) = check_matched(baseline, ours)?;
    let mut worst = 0usize;
    for (i, m) in b.iter().enumerate() {
        if m.mspr < b[worst].mspr {
            worst = i;
        }
    }
    Ok(o[worst].mspr - b[worst].mspr)
}

/// Oracle ensemble prediction: evaluates every per-user model on the window
/// and returns the prediction closest to the actual future direction.
pub fn ecls_oracle_predict(
    per_user_models: &[SequenceModelParams],
    window: &[f64],
    truth: &Direction,
) -> Result<Direction, MetricsError> {
    if per_user_models.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut best: Option<(f64, Direction)> = None;
    for model in per_user_models {
        let raw = forward(model, window)?;
        let Ok(dir) = Direction::new(raw[0], raw[1], raw[2]) else {
            continue;
        };
        let dist = dir.angular_distance(truth);
        if best.map(|(d, _)| dist < d).unwrap_or(true) {
            best = Some((dist, dir));
        }
    }
    best.map(|(_, d)| d).ok_or(MetricsError::DegeneratePrediction)
}

/// Mean angular distance between two equally long direction windows; the
/// user-similarity measure for the nearest-neighbor baseline.
pub fn cub360_window_distance(a: &[Direction], b: &[Direction]) -> Result<f64, MetricsError> {
    if a.is_empty() || a.len() != b.len() {
        return Err(MetricsError::MismatchedCohorts);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x.angular_distance(y)).sum::<f64>() / a.len() as f64)
}

const KNN_WEIGHT_EPS: f64 = 1e-6;

/// Weighted average of the `k` nearest neighbors' predicted directions,
/// weights `1 / (distance + 1e-6)`.
pub fn cub360_knn_predict(
    neighbor_predictions: &[(Direction, f64)],
    k: usize,
) -> Result<Direction, MetricsError> {
    if neighbor_predictions.is_empty() || k == 0 {
        return Err(MetricsError::Empty);
    }
    let mut sorted = neighbor_predictions.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    sorted.truncate(k);
    let mut sum = [0.0f64; 3];
    for (dir, dist) in &sorted {
        let w = 1.0 / (dist + KNN_WEIGHT_EPS);
        let a = dir.as_array();
        for (acc, v) in sum.iter_mut().zip(a) {
            *acc += w * v;
        }
    }
    Direction::new(sum[0], sum[1], sum[2]).or(Ok(sorted[0].0))
}

/// Forward-pass FLOPs: `2 S (I + D) D * 4` for the LSTM, `2 (S I) O` for
/// the linear map (one addition or multiplication = one FLOP).
pub fn flops_forward_pass(arch: &ArchSpec) -> u64 {
    let (i, d, o, s) = (
        arch.input_dim as u64,
        arch.hidden_dim as u64,
        arch.output_dim as u64,
        arch.sequence_length as u64,
    );
    match arch.kind {
        ModelKind::Lstm => 2 * s * (i + d) * d * 4,
        ModelKind::Linear => 2 * (s * i) * o,
    }
}

/// FLOPs for one training cycle (forward plus backward), three times the
/// forward pass.
pub fn flops_per_training_cycle(arch: &ArchSpec) -> u64 {
    3 * flops_forward_pass(arch)
}

/// Adaptation steps a battery can sustain:
/// `floor(battery / (joules_per_flop * flops_per_step))`.
pub fn battery_steps(
    battery_joules: f64,
    joules_per_flop: f64,
    flops_per_step: u64,
) -> Result<u64, MetricsError> {
    if battery_joules < 0.0 || joules_per_flop <= 0.0 || flops_per_step == 0 {
        return Err(MetricsError::NonPositiveInput);
    }
    Ok((battery_joules / (joules_per_flop * flops_per_step as f64)).floor() as u64)
}

/// Min / max / mean summary of a per-user delta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeStat {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl RangeStat {
    fn over(values: impl Iterator<Item = f64> + Clone) -> RangeStat {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        let mut n = 0usize;
        for v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
            n += 1;
        }
        RangeStat { min, max, mean: sum / n as f64 }
    }
}

/// Per-user comparison row inside a [`CohortReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserDelta {
    pub user_id: u32,
    pub baseline_mae_deg: f64,
    pub ours_mae_deg: f64,
    pub delta_mae_deg: f64,
    pub baseline_mspr_pct: f64,
    pub ours_mspr_pct: f64,
    pub delta_mspr_pct: f64,
}

/// Two-method cohort comparison for one video: per-user metrics, delta
/// ranges, and the improvement on the worst baseline user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub video_id: u32,
    pub users: Vec<UserDelta>,
    pub delta_mae_deg: RangeStat,
    pub delta_mspr_pct: RangeStat,
    pub iwp_pct: f64,
}

impl CohortReport {
    pub fn build(
        video_id: u32,
        baseline: &[RunMetrics],
        ours: &[RunMetrics],
    ) -> Result<CohortReport, MetricsError> {
        let iwp_val = iwp(baseline, ours)?;
        let (b, o) = check_matched(baseline, ours)?;
        let users: Vec<UserDelta> = b
            .iter()
            .zip(&o)
            .map(|(bm, om)| UserDelta {
                user_id: bm.user_id,
                baseline_mae_deg: rad_to_deg(bm.mae),
                ours_mae_deg: rad_to_deg(om.mae),
                delta_mae_deg: rad_to_deg(om.mae - bm.mae),
                baseline_mspr_pct: frac_to_pct(bm.mspr),
                ours_mspr_pct: frac_to_pct(om.mspr),
                delta_mspr_pct: frac_to_pct(om.mspr - bm.mspr),
            })
            .collect();
        Ok(CohortReport {
            video_id,
            delta_mae_deg: RangeStat::over(users.iter().map(|u| u.delta_mae_deg)),
            delta_mspr_pct: RangeStat::over(users.iter().map(|u| u.delta_mspr_pct)),
            iwp_pct: frac_to_pct(iwp_val),
            users,
        })
    }

    /// One CSV row per video: delta ranges plus means, and the IWP.
    pub fn csv_header() -> &'static str {
        "video,delta_mae_min_deg,delta_mae_max_deg,delta_mae_mean_deg,\
         delta_mspr_min_pct,delta_mspr_max_pct,delta_mspr_mean_pct,iwp_pct"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.video_id,
            self.delta_mae_deg.min,
            self.delta_mae_deg.max,
            self.delta_mae_deg.mean,
            self.delta_mspr_pct.min,
            self.delta_mspr_pct.max,
            self.delta_mspr_pct.mean,
            self.iwp_pct
        )
    }
}
