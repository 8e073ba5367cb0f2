//! Discrete-time 360-degree streaming simulator.
//!
//! Per tick the simulated user (1) accounts the missing part of the current
//! viewport against the previously requested prefetch, (2) predicts the next
//! viewing direction and prefetch angle and issues the next request, and
//! (3) in adaptive modes takes one online SGD step on each model using the
//! realized direction and angular error. The first `sequence_length` ticks
//! are warm-up and produce no records.

use crate::geometry::{cap_area, cap_intersection_area, Direction, GeometryError, SphericalCap};
use crate::metalearn::{adapt_online, MetaConfig};
use crate::seqmodel::{forward, ModelError, SequenceModelParams, TrainingExample};
use crate::trace::Trace;
use std::collections::BTreeSet;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("trace has {got} ticks, needs more than {need}")]
    TraceTooShort { got: usize, need: usize },
    #[error("no records")]
    Empty,
    #[error("malformed record row {0}")]
    MalformedRecord(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Fixed actual-viewport half-angle and the prefetch clamp range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewportConfig {
    pub alpha: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ViewportConfig {
    /// Clamp range defaults to `[alpha, PI/2]`.
    pub fn with_alpha(alpha: f64) -> Self {
        ViewportConfig { alpha, beta_min: alpha, beta_max: PI / 2.0 }
    }
}

impl Default for ViewportConfig {
    fn default() -> Self {
        ViewportConfig::with_alpha(PI / 8.0)
    }
}

/// Adaptation policy during playback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    AdaptiveFull,
    /// Adapt only for the first `window` recorded ticks.
    AdaptivePartial { window: usize },
    FrozenGlobal,
}

impl SimMode {
    fn adapts_at(&self, record_index: usize) -> bool {
        match self {
            SimMode::AdaptiveFull => true,
            SimMode::AdaptivePartial { window } => record_index < *window,
            SimMode::FrozenGlobal => false,
        }
    }
}

/// The request decided at tick `t - 1` for tick `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefetchDecision {
    pub predicted: Direction,
    /// Predicted angular error, clamped to `[0, PI]`.
    pub predicted_gamma: f64,
    /// Prefetch half-angle `predicted_gamma + alpha`, clamped to the
    /// viewport range.
    pub beta: f64,
}

/// Tile accounting for one tick (discrete-tile mode only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileCounts {
    pub prefetched: u32,
    pub missing: u32,
}

/// Per-tick simulation outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub tick: usize,
    pub actual: Direction,
    pub decision: PrefetchDecision,
    /// Realized angle between actual and predicted direction.
    pub gamma: f64,
    pub overlap_ratio: f64,
    pub prefetched_area: f64,
    pub missing_area: f64,
    pub tiles: Option<TileCounts>,
}

/// Equirectangular tile grid; rows split the polar angle, columns the
/// longitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
}

impl Default for TileGrid {
    fn default() -> Self {
        TileGrid { rows: 16, cols: 16 }
    }
}

impl TileGrid {
    /// Cell containing a direction.
    pub fn cell_of(&self, d: &Direction) -> (usize, usize) {
        let theta = d.z().clamp(-1.0, 1.0).acos();
        let mut phi = d.y().atan2(d.x());
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        let r = ((theta / PI) * self.rows as f64).floor() as usize;
        let c = ((phi / (2.0 * PI)) * self.cols as f64).floor() as usize;
        (r.min(self.rows - 1), c.min(self.cols - 1))
    }

    /// Unit direction at the center of cell `(r, c)`.
    pub fn cell_center(&self, r: usize, c: usize) -> Direction {
        let theta = (r as f64 + 0.5) * PI / self.rows as f64;
        let phi = (c as f64 + 0.5) * 2.0 * PI / self.cols as f64;
        Direction::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
            .expect("cell centers are unit")
    }

    /// Cells whose center lies within `alpha` of `u`.
    pub fn viewport_cells(&self, u: &Direction, alpha: f64) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.cell_center(r, c).angular_distance(u) <= alpha {
                    out.insert((r, c));
                }
            }
        }
        out
    }

    /// The 3x3 block around a cell: columns wrap around in longitude, rows
    /// clamp at the poles (clamped duplicates collapse).
    pub fn prefetch_block(&self, r: usize, c: usize) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for dr in -1i64..=1 {
            let rr = (r as i64 + dr).clamp(0, self.rows as i64 - 1) as usize;
            for dc in -1i64..=1 {
                let cc = (c as i64 + dc).rem_euclid(self.cols as i64) as usize;
                out.insert((rr, cc));
            }
        }
        out
    }
}

/// Tile accounting for one tick: prefetched = 3x3 block around the predicted
/// direction's cell, missing = viewport cells not prefetched.
pub fn tile_mode_step(
    u: &Direction,
    decision: &PrefetchDecision,
    grid: &TileGrid,
    alpha: f64,
) -> TileCounts {
    let (r, c) = grid.cell_of(&decision.predicted);
    let block = grid.prefetch_block(r, c);
    let viewport = grid.viewport_cells(u, alpha);
    let missing = viewport.iter().filter(|cell| !block.contains(cell)).count();
    TileCounts { prefetched: block.len() as u32, missing: missing as u32 }
}

/// Simulation switches beyond the adaptation mode.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub mode: SimMode,
    /// Adapt every `adapt_cadence`-th recorded tick (1 = every tick).
    pub adapt_cadence: usize,
    pub tile_grid: Option<TileGrid>,
}

impl SimOptions {
    pub fn new(mode: SimMode) -> Self {
        SimOptions { mode, adapt_cadence: 1, tile_grid: None }
    }
}

/// Records plus the models in their final (possibly adapted) state.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub records: Vec<StepRecord>,
    pub final_vd: SequenceModelParams,
    pub final_pa: SequenceModelParams,
}

fn padded_window(hist: &[f64], len: usize) -> Vec<f64> {
    if hist.len() >= len {
        hist[hist.len() - len..].to_vec()
    } else {
        let mut w = vec![0.0; len - hist.len()];
        w.extend_from_slice(hist);
        w
    }
}

/// Runs one user's playback.
///
/// Per tick `t` past warm-up: account the realized viewport against the
/// pending request, predict `(v(t+1), gamma_hat(t+1))` and decide
/// `beta(t+1) = clamp(gamma_hat + alpha)`, then (in adaptive modes) adapt
/// the direction model on the realized direction and the angle model on the
/// realized error. The gamma history seen by the angle model is
/// left-padded with zeros until `sequence_length` errors have been
/// observed. A non-normalizable direction prediction falls back to the
/// previous prediction.
pub fn simulate_user(
    trace: &Trace,
    vd: &SequenceModelParams,
    pa: &SequenceModelParams,
    viewport: &ViewportConfig,
    opts: &SimOptions,
    meta_cfg: &MetaConfig,
) -> Result<SimOutcome, SimError> {
    let s_vd = vd.arch.sequence_length;
    let s_pa = pa.arch.sequence_length;
    let len = trace.len();
    if len <= s_vd {
        return Err(SimError::TraceTooShort { got: len, need: s_vd });
    }

    let flat = trace.flat_components();
    let alpha_area = cap_area(viewport.alpha);
    let mut cur_vd = vd.clone();
    let mut cur_pa = pa.clone();
    let mut gamma_hist: Vec<f64> = Vec::with_capacity(len);
    let mut pending: Option<PrefetchDecision> = None;
    let mut prev_pred: Option<Direction> = None;
    let mut records: Vec<StepRecord> = Vec::with_capacity(len - s_vd);
    let cadence = opts.adapt_cadence.max(1);

    for t in 0..len {
        let actual = trace.samples[t];

        // (1) account the realized viewport against the pending request
        let mut adapt_pa_input: Option<Vec<f64>> = None;
        let mut recorded = false;
        if let Some(dec) = pending.take() {
            let gamma = actual.angular_distance(&dec.predicted);
            let cap_u = SphericalCap::new(actual, viewport.alpha)?;
            let cap_v = SphericalCap::new(dec.predicted, dec.beta)?;
            let inter = cap_intersection_area(&cap_u, &cap_v);
            let tiles = opts
                .tile_grid
                .as_ref()
                .map(|grid| tile_mode_step(&actual, &dec, grid, viewport.alpha));
            records.push(StepRecord {
                tick: t,
                actual,
                decision: dec,
                gamma,
                overlap_ratio: inter / alpha_area,
                prefetched_area: cap_area(dec.beta),
                missing_area: alpha_area - inter,
                tiles,
            });
            adapt_pa_input = Some(padded_window(&gamma_hist, s_pa));
            gamma_hist.push(gamma);
            recorded = true;
        }

        // (2) predict and decide the request for t + 1
        if t + 1 < len && t + 1 >= s_vd {
            let vd_in = &flat[(t + 1 - s_vd) * 3..(t + 1) * 3];
            let raw = forward(&cur_vd, vd_in)?;
            let predicted = Direction::new(raw[0], raw[1], raw[2])
                .ok()
                .or(prev_pred)
                .unwrap_or(actual);
            prev_pred = Some(predicted);

            let pa_in = padded_window(&gamma_hist, s_pa);
            let predicted_gamma = forward(&cur_pa, &pa_in)?[0].clamp(0.0, PI);
            let beta = (predicted_gamma + viewport.alpha).clamp(viewport.beta_min, viewport.beta_max);
            pending = Some(PrefetchDecision { predicted, predicted_gamma, beta });
        }

        // (3) adapt on the freshest realized example
        if recorded {
            let rec_idx = records.len() - 1;
            if opts.mode.adapts_at(rec_idx) && rec_idx % cadence == 0 {
                let vd_example = TrainingExample {
                    inputs: flat[(t - s_vd) * 3..t * 3].to_vec(),
                    label: actual.as_array().to_vec(),
                };
                cur_vd = adapt_online(&cur_vd, &vd_example, meta_cfg.adapt_lr)?;
                let pa_example = TrainingExample {
                    inputs: adapt_pa_input.expect("set when recorded"),
                    label: vec![records[rec_idx].gamma],
                };
                cur_pa = adapt_online(&cur_pa, &pa_example, meta_cfg.adapt_lr)?;
            }
        }
    }

    Ok(SimOutcome { records, final_vd: cur_vd, final_pa: cur_pa })
}

/// The constant prefetch angle whose cap area equals the run's mean
/// prefetched cap area: `arccos(mean(cos beta_t))`, clamped to the viewport
/// range.
pub fn equal_bandwidth_beta(records: &[StepRecord], viewport: &ViewportConfig) -> Result<f64, SimError> {
    if records.is_empty() {
        return Err(SimError::Empty);
    }
    let mean_cos = records.iter().map(|r| r.decision.beta.cos()).sum::<f64>() / records.len() as f64;
    Ok(mean_cos.clamp(-1.0, 1.0).acos().clamp(viewport.beta_min, viewport.beta_max))
}

/// Re-accounts a record stream under one constant prefetch angle; the
/// direction decisions are untouched. Used for equal-bandwidth comparisons.
pub fn apply_constant_beta(records: &[StepRecord], beta: f64, alpha: f64) -> Result<Vec<StepRecord>, SimError> {
    let alpha_area = cap_area(alpha);
    records
        .iter()
        .map(|r| {
            let cap_u = SphericalCap::new(r.actual, alpha)?;
            let cap_v = SphericalCap::new(r.decision.predicted, beta)?;
            let inter = cap_intersection_area(&cap_u, &cap_v);
            Ok(StepRecord {
                decision: PrefetchDecision { beta, ..r.decision },
                overlap_ratio: inter / alpha_area,
                prefetched_area: cap_area(beta),
                missing_area: alpha_area - inter,
                ..r.clone()
            })
        })
        .collect()
}

/// Total prefetched cap area over a run (the bandwidth proxy).
pub fn total_prefetched_area(records: &[StepRecord]) -> f64 {
    records.iter().map(|r| r.prefetched_area).sum()
}

const CSV_HEADER: &str = "t,ux,uy,uz,vx,vy,vz,gamma,gamma_hat,beta,overlap_ratio,prefetched_area,missing_area";
const CSV_HEADER_TILES: &str = "t,ux,uy,uz,vx,vy,vz,gamma,gamma_hat,beta,overlap_ratio,prefetched_area,missing_area,prefetched_tiles,missing_tiles";

/// Serializes records to the documented CSV stream. Floats are written in
/// shortest round-trip form, so parsing back reproduces identical bits.
pub fn records_to_csv(records: &[StepRecord]) -> String {
    let tiles = records.first().map(|r| r.tiles.is_some()).unwrap_or(false);
    let mut out = String::new();
    out.push_str(if tiles { CSV_HEADER_TILES } else { CSV_HEADER });
    out.push('\n');
    for r in records {
        let u = r.actual.as_array();
        let v = r.decision.predicted.as_array();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.tick,
            u[0],
            u[1],
            u[2],
            v[0],
            v[1],
            v[2],
            r.gamma,
            r.decision.predicted_gamma,
            r.decision.beta,
            r.overlap_ratio,
            r.prefetched_area,
            r.missing_area
        ));
        if let Some(tc) = r.tiles {
            out.push_str(&format!(",{},{}", tc.prefetched, tc.missing));
        }
        out.push('\n');
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<StepRecord>, SimError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or(SimError::Empty)?;
    let tiles = match header.trim() {
        h if h == CSV_HEADER_TILES => true,
        h if h == CSV_HEADER => false,
        _ => return Err(SimError::MalformedRecord(0)),
    };
    let want = if tiles { 15 } else { 13 };
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != want {
            return Err(SimError::MalformedRecord(row));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| SimError::MalformedRecord(row));
        let tick = f[0].trim().parse::<usize>().map_err(|_| SimError::MalformedRecord(row))?;
        let actual = Direction::from_unit(num(f[1])?, num(f[2])?, num(f[3])?)
            .map_err(|_| SimError::MalformedRecord(row))?;
        let predicted = Direction::from_unit(num(f[4])?, num(f[5])?, num(f[6])?)
            .map_err(|_| SimError::MalformedRecord(row))?;
        let tile_counts = if tiles {
            let p = f[13].trim().parse::<u32>().map_err(|_| SimError::MalformedRecord(row))?;
            let m = f[14].trim().parse::<u32>().map_err(|_| SimError::MalformedRecord(row))?;
            Some(TileCounts { prefetched: p, missing: m })
        } else {
            None
        };
        out.push(StepRecord {
            tick,
            actual,
            decision: PrefetchDecision {
                predicted,
                predicted_gamma: num(f[8])?,
                beta: num(f[9])?,
            },
            gamma: num(f[7])?,
            overlap_ratio: num(f[10])?,
            prefetched_area: num(f[11])?,
            missing_area: num(f[12])?,
            tiles: tile_counts,
        });
    }
    Ok(out)
}
