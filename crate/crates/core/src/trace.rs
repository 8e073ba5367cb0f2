//! Head-tracking traces: CSV ingestion, fixed-tick resampling, and
//! synthetic-cohort generation.
//!
//! A trace is one user's viewing-direction time series for one video,
//! resampled onto a uniform tick grid anchored at playback time zero.

use crate::geometry::{Direction, GeometryError, Quaternion};
use crate::rngutil::seeded_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed row {0}")]
    MalformedRow(usize),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("trace has no samples")]
    EmptyTrace,
    #[error("first tick has no samples (first sample at {0} s)")]
    LeadingGap(f64),
    #[error("trace length {got} not above required {need}")]
    TraceTooShort { got: usize, need: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One raw head-tracking sample.
#[derive(Debug, Clone, Copy)]
pub struct TraceSample {
    pub timestamp: f64,
    pub direction: Direction,
}

/// A resampled per-user, per-video direction series at fixed tick length.
#[derive(Debug, Clone)]
pub struct Trace {
    pub user_id: u32,
    pub video_id: u32,
    pub tick_seconds: f64,
    pub samples: Vec<Direction>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Flattens the series to `[x0, y0, z0, x1, ...]` for model windows.
    pub fn flat_components(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.samples.len() * 3);
        for d in &self.samples {
            out.extend_from_slice(&d.as_array());
        }
        out
    }

    /// Reinterprets each tick as a raw sample at the tick start time.
    pub fn to_samples(&self) -> Vec<TraceSample> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, d)| TraceSample { timestamp: i as f64 * self.tick_seconds, direction: *d })
            .collect()
    }
}

/// Motion archetypes for the synthetic cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionPattern {
    Fixate,
    SmoothScan,
    RandomWalk,
    RegimeSwitching,
}

impl MotionPattern {
    pub fn parse(s: &str) -> Option<MotionPattern> {
        match s {
            "fixate" => Some(MotionPattern::Fixate),
            "smooth-scan" => Some(MotionPattern::SmoothScan),
            "random-walk" => Some(MotionPattern::RandomWalk),
            "regime-switching" => Some(MotionPattern::RegimeSwitching),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MotionPattern::Fixate => "fixate",
            MotionPattern::SmoothScan => "smooth-scan",
            MotionPattern::RandomWalk => "random-walk",
            MotionPattern::RegimeSwitching => "regime-switching",
        }
    }
}

/// Generator profile for one synthetic user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUserProfile {
    pub pattern: MotionPattern,
    /// Angular speed scale in radians per second.
    pub angular_velocity: f64,
    /// Per-tick perturbation scale in radians.
    pub noise: f64,
    pub seed: u64,
}

const QUAT_HEADER: [&str; 5] = ["t", "qw", "qx", "qy", "qz"];
const DIR_HEADER: [&str; 4] = ["t", "x", "y", "z"];

enum CsvLayout {
    Quaternion,
    Direction,
}

/// Parses a trace CSV stream.
///
/// Two headers are accepted: `t,qw,qx,qy,qz[,px,py,pz]` (camera quaternions;
/// position columns ignored) and `t,x,y,z` (raw directions). Quaternions are
/// converted by rotating the canonical `forward` axis. Rows must be finite
/// and strictly increasing in time.
pub fn parse_trace_csv(text: &str, forward: &Direction) -> Result<Vec<TraceSample>, TraceError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(TraceError::EmptyTrace)?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();

    let layout = if cols.len() >= 5 && cols[..5] == QUAT_HEADER {
        CsvLayout::Quaternion
    } else if cols.len() == 4 && cols[..4] == DIR_HEADER {
        CsvLayout::Direction
    } else {
        let missing = QUAT_HEADER
            .iter()
            .find(|c| !cols.contains(c))
            .copied()
            .unwrap_or("qw");
        return Err(TraceError::MissingColumn(missing.to_string()));
    };
    let expected_fields = match layout {
        CsvLayout::Quaternion => cols.len(), // optional px,py,pz tail
        CsvLayout::Direction => 4,
    };

    let mut samples = Vec::new();
    let mut prev_t = f64::NEG_INFINITY;
    for (row_idx, (_, line)) in lines.enumerate() {
        let row = row_idx + 1;
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| TraceError::MalformedRow(row))?;
        if fields.len() != expected_fields || fields.iter().any(|v| !v.is_finite()) {
            return Err(TraceError::MalformedRow(row));
        }
        let t = fields[0];
        if t <= prev_t {
            return Err(TraceError::MalformedRow(row));
        }
        prev_t = t;

        let direction = match layout {
            CsvLayout::Quaternion => {
                let q = Quaternion::new(fields[1], fields[2], fields[3], fields[4])
                    .map_err(|_| TraceError::MalformedRow(row))?;
                crate::geometry::quat_to_direction(&q, forward)
                    .map_err(|_| TraceError::MalformedRow(row))?
            }
            CsvLayout::Direction => Direction::new(fields[1], fields[2], fields[3])
                .map_err(|_| TraceError::MalformedRow(row))?,
        };
        samples.push(TraceSample { timestamp: t, direction });
    }
    Ok(samples)
}

/// Boundary nudge for float tick bucketing: samples within ~1e-9 ticks of a
/// boundary snap upward.
const GRID_EPS: f64 = 1e-9;

fn tick_index(t: f64, tick_seconds: f64) -> usize {
    ((t / tick_seconds) + GRID_EPS).floor().max(0.0) as usize
}

/// Resamples raw samples onto a fixed tick grid anchored at time zero.
///
/// Each tick's direction is the renormalized arithmetic mean of the tick's
/// samples; empty ticks copy the previous tick (forward fill). A degenerate
/// zero mean falls back to the tick's last raw sample. The first tick must
/// contain at least one sample.
pub fn resample(
    samples: &[TraceSample],
    tick_seconds: f64,
    user_id: u32,
    video_id: u32,
) -> Result<Trace, TraceError> {
    if samples.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    let first = samples[0].timestamp;
    if tick_index(first, tick_seconds) > 0 {
        return Err(TraceError::LeadingGap(first));
    }
    let last = samples[samples.len() - 1].timestamp;
    let n_ticks = tick_index(last, tick_seconds) + 1;

    let mut sums = vec![[0.0f64; 3]; n_ticks];
    let mut counts = vec![0u32; n_ticks];
    let mut last_raw: Vec<Option<Direction>> = vec![None; n_ticks];
    for s in samples {
        let idx = tick_index(s.timestamp, tick_seconds).min(n_ticks - 1);
        let a = s.direction.as_array();
        for (acc, v) in sums[idx].iter_mut().zip(a) {
            *acc += v;
        }
        counts[idx] += 1;
        last_raw[idx] = Some(s.direction);
    }

    let mut out = Vec::with_capacity(n_ticks);
    for i in 0..n_ticks {
        if counts[i] == 0 {
            // forward fill; i == 0 is excluded by the LeadingGap check
            let prev: Direction = out[i - 1];
            out.push(prev);
            continue;
        }
        let [sx, sy, sz] = sums[i];
        match Direction::new(sx, sy, sz) {
            Ok(d) => out.push(d),
            Err(_) => out.push(last_raw[i].expect("non-empty tick")),
        }
    }
    Ok(Trace { user_id, video_id, tick_seconds, samples: out })
}

/// Orthonormal tangent basis at a point on the sphere.
fn tangent_basis(d: &Direction) -> ([f64; 3], [f64; 3]) {
    let a = d.as_array();
    let pick = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let mut e1 = [
        a[1] * pick[2] - a[2] * pick[1],
        a[2] * pick[0] - a[0] * pick[2],
        a[0] * pick[1] - a[1] * pick[0],
    ];
    let n = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    for v in &mut e1 {
        *v /= n;
    }
    let e2 = [
        a[1] * e1[2] - a[2] * e1[1],
        a[2] * e1[0] - a[0] * e1[2],
        a[0] * e1[1] - a[1] * e1[0],
    ];
    (e1, e2)
}

fn combine(d: &Direction, e1: &[f64; 3], e2: &[f64; 3], cd: f64, c1: f64, c2: f64) -> Direction {
    let a = d.as_array();
    Direction::new(
        cd * a[0] + c1 * e1[0] + c2 * e2[0],
        cd * a[1] + c1 * e1[1] + c2 * e2[1],
        cd * a[2] + c1 * e1[2] + c2 * e2[2],
    )
    .expect("unit combination")
}

/// Perturbs `d` by an offset angle toward a random tangent azimuth.
fn jitter(d: &Direction, angle: f64, rng: &mut impl Rng) -> Direction {
    if angle <= 0.0 {
        return *d;
    }
    let (e1, e2) = tangent_basis(d);
    let az = rng.random_range(0.0..2.0 * PI);
    combine(d, &e1, &e2, angle.cos(), angle.sin() * az.cos(), angle.sin() * az.sin())
}

/// Von Mises sample on (-PI, PI] via the Best-Fisher rejection scheme.
fn sample_von_mises(kappa: f64, rng: &mut impl Rng) -> f64 {
    if kappa < 1e-8 {
        return rng.random_range(-PI..PI);
    }
    let a = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let b = (a - (2.0 * a).sqrt()) / (2.0 * kappa);
    let r = (1.0 + b * b) / (2.0 * b);
    loop {
        let u1: f64 = rng.random_range(0.0..1.0);
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        let u2: f64 = rng.random_range(0.0..1.0);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random_range(0.0..1.0);
            let th = f.clamp(-1.0, 1.0).acos();
            return if u3 > 0.5 { th } else { -th };
        }
    }
}

/// Geodesic walker state: position plus a transported tangent heading.
struct Walker {
    pos: Direction,
    heading: [f64; 3],
}

impl Walker {
    fn new(pos: Direction, rng: &mut impl Rng) -> Self {
        let (e1, e2) = tangent_basis(&pos);
        let az = rng.random_range(0.0..2.0 * PI);
        let heading = [
            az.cos() * e1[0] + az.sin() * e2[0],
            az.cos() * e1[1] + az.sin() * e2[1],
            az.cos() * e1[2] + az.sin() * e2[2],
        ];
        Walker { pos, heading }
    }

    /// Rotates the heading within the tangent plane by `delta`, then takes a
    /// geodesic step of length `step`, parallel-transporting the heading.
    fn advance(&mut self, step: f64, delta: f64) {
        let p = self.pos.as_array();
        let h = self.heading;
        let cross = [
            p[1] * h[2] - p[2] * h[1],
            p[2] * h[0] - p[0] * h[2],
            p[0] * h[1] - p[1] * h[0],
        ];
        let (cd, sd) = (delta.cos(), delta.sin());
        let h = [
            cd * h[0] + sd * cross[0],
            cd * h[1] + sd * cross[1],
            cd * h[2] + sd * cross[2],
        ];
        let (cs, ss) = (step.cos(), step.sin());
        let new_pos = Direction::new(
            cs * p[0] + ss * h[0],
            cs * p[1] + ss * h[1],
            cs * p[2] + ss * h[2],
        )
        .expect("geodesic step stays on sphere");
        let np = new_pos.as_array();
        let mut nh = [
            -ss * p[0] + cs * h[0],
            -ss * p[1] + cs * h[1],
            -ss * p[2] + cs * h[2],
        ];
        // re-orthonormalize against drift
        let dot = nh[0] * np[0] + nh[1] * np[1] + nh[2] * np[2];
        for k in 0..3 {
            nh[k] -= dot * np[k];
        }
        let n = (nh[0] * nh[0] + nh[1] * nh[1] + nh[2] * nh[2]).sqrt();
        for v in &mut nh {
            *v /= n;
        }
        self.pos = new_pos;
        self.heading = nh;
    }
}

/// Generates a deterministic synthetic trace for one user profile.
///
/// Patterns: `fixate` holds a base direction with jitter bounded by the
/// noise scale; `smooth-scan` follows a great circle at the given angular
/// velocity; `random-walk` takes per-tick geodesic steps of length
/// `velocity * tick` with a von Mises heading perturbation
/// (`kappa = 1/noise^2`); `regime-switching` alternates fixate and
/// random-walk phases of 3 to 8 seconds.
pub fn generate_synthetic(
    profile: &SyntheticUserProfile,
    duration_seconds: f64,
    tick_seconds: f64,
    user_id: u32,
    video_id: u32,
) -> Trace {
    assert!(duration_seconds >= tick_seconds, "duration below one tick");
    let n_ticks = (duration_seconds / tick_seconds).round().max(1.0) as usize;
    let mut rng = seeded_rng(profile.seed, 0x7261_6365);

    let base = jitter(
        &Direction::new(1.0, 0.0, 0.0).unwrap(),
        rng.random_range(0.0..PI),
        &mut rng,
    );
    let step = profile.angular_velocity * tick_seconds;
    let kappa = if profile.noise > 0.0 { 1.0 / (profile.noise * profile.noise) } else { f64::INFINITY };

    let mut samples = Vec::with_capacity(n_ticks);
    match profile.pattern {
        MotionPattern::Fixate => {
            for _ in 0..n_ticks {
                let off = rng.random_range(0.0..=1.0) * profile.noise;
                samples.push(jitter(&base, off, &mut rng));
            }
        }
        MotionPattern::SmoothScan => {
            let (e1, e2) = tangent_basis(&base);
            for i in 0..n_ticks {
                let ang = step * i as f64;
                let on_path = combine(&base, &e1, &e2, ang.cos(), ang.sin(), 0.0);
                let off = rng.random_range(0.0..=1.0) * profile.noise;
                samples.push(jitter(&on_path, off, &mut rng));
            }
        }
        MotionPattern::RandomWalk => {
            let mut w = Walker::new(base, &mut rng);
            for _ in 0..n_ticks {
                samples.push(w.pos);
                let delta = if kappa.is_finite() { sample_von_mises(kappa, &mut rng) } else { 0.0 };
                w.advance(step, delta);
            }
        }
        MotionPattern::RegimeSwitching => {
            let mut w = Walker::new(base, &mut rng);
            let mut fixating = true;
            let phase_ticks = |rng: &mut rand_chacha::ChaCha12Rng, tick: f64| -> usize {
                let lo = (3.0 / tick).round().max(1.0) as usize;
                let hi = (8.0 / tick).round().max(2.0) as usize;
                rng.random_range(lo..=hi)
            };
            let mut remaining = phase_ticks(&mut rng, tick_seconds);
            for _ in 0..n_ticks {
                if remaining == 0 {
                    fixating = !fixating;
                    remaining = phase_ticks(&mut rng, tick_seconds);
                }
                remaining -= 1;
                if fixating {
                    let off = rng.random_range(0.0..=1.0) * profile.noise.min(0.05);
                    samples.push(jitter(&w.pos, off, &mut rng));
                } else {
                    let delta = if kappa.is_finite() { sample_von_mises(kappa, &mut rng) } else { 0.0 };
                    w.advance(step, delta);
                    samples.push(w.pos);
                }
            }
        }
    }

    Trace { user_id, video_id, tick_seconds, samples }
}
