//! Reptile meta-training and online per-user adaptation.
//!
//! A task is one user's series for one video: direction windows for the
//! viewing-direction model, prefetch-error windows for the angle model.
//! Each meta-iteration samples tasks uniformly, runs `k` local SGD steps
//! per task from the shared parameters, and moves the shared parameters
//! toward the per-task results.

use crate::geometry::Direction;
use crate::rngutil::{derive_seed, seeded_rng};
use crate::seqmodel::{
    forward, loss_and_grad, sgd_step, ArchSpec, ModelError, Objective, SequenceModelParams,
    TrainingExample,
};
use crate::trace::Trace;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("task pool is empty")]
    EmptyPool,
    #[error("trace user {user} video {video} has {got} ticks, needs more than {need}")]
    TraceTooShort { user: u32, video: u32, got: usize, need: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite parameters after meta-iteration {0}")]
    NonFinite(usize),
}

/// Learning rates and loop sizes for meta-training and adaptation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaConfig {
    /// Local (inner) SGD rate.
    pub local_lr: f64,
    /// Meta (outer) step size.
    pub meta_lr: f64,
    /// Online adaptation rate.
    pub adapt_lr: f64,
    /// Inner SGD steps per sampled task.
    pub local_steps: usize,
    /// Tasks sampled per meta-iteration.
    pub task_batch: usize,
    pub meta_iterations: usize,
    /// Windows per inner SGD step.
    pub batch_size: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            local_lr: 0.1,
            meta_lr: 0.1,
            adapt_lr: 0.001,
            local_steps: 1,
            task_batch: 10,
            meta_iterations: 200,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    ViewingDirection,
    PrefetchAngle,
}

/// Sliding-window regression task over one user/video series.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub user_id: u32,
    pub video_id: u32,
    dim: usize,
    sequence_length: usize,
    /// `ticks * dim` values, time-major.
    series: Arc<Vec<f64>>,
}

impl TaskSpec {
    fn new(
        kind: TaskKind,
        user_id: u32,
        video_id: u32,
        dim: usize,
        sequence_length: usize,
        series: Vec<f64>,
    ) -> Result<Self, MetaError> {
        let ticks = series.len() / dim;
        if ticks <= sequence_length {
            return Err(MetaError::TraceTooShort {
                user: user_id,
                video: video_id,
                got: ticks,
                need: sequence_length,
            });
        }
        Ok(TaskSpec { kind, user_id, video_id, dim, sequence_length, series: Arc::new(series) })
    }

    /// Number of distinct (window, label) pairs.
    pub fn example_count(&self) -> usize {
        self.series.len() / self.dim - self.sequence_length
    }

    /// The window starting at tick `start` with the next tick as label.
    pub fn example(&self, start: usize) -> TrainingExample {
        let s = self.sequence_length * self.dim;
        let at = start * self.dim;
        TrainingExample {
            inputs: self.series[at..at + s].to_vec(),
            label: self.series[at + s..at + s + self.dim].to_vec(),
        }
    }

    pub fn sample_batch(&self, rng: &mut ChaCha12Rng, n: usize) -> Vec<TrainingExample> {
        let count = self.example_count();
        (0..n).map(|_| self.example(rng.random_range(0..count))).collect()
    }
}

/// A task plus the mini-batch size used when it is trained on.
pub struct SampledTask<'a> {
    pub task: &'a TaskSpec,
    pub batch_size: usize,
}

impl Objective for SampledTask<'_> {
    fn loss_and_grad_at(
        &self,
        params: &SequenceModelParams,
        rng: &mut ChaCha12Rng,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let batch = self.task.sample_batch(rng, self.batch_size);
        loss_and_grad(params, &batch)
    }
}

/// Uniformly sampled set of tasks, with an optional leave-one-out exclusion.
#[derive(Debug, Clone)]
pub struct TaskPool {
    pub tasks: Vec<TaskSpec>,
    pub exclusion: Option<(u32, u32)>,
}

impl TaskPool {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

fn excluded(exclusion: Option<(u32, u32)>, trace: &Trace) -> bool {
    exclusion == Some((trace.user_id, trace.video_id))
}

/// Builds viewing-direction tasks: windows of directions, next direction as
/// label. Traces matching the exclusion contribute nothing.
pub fn build_vd_tasks(
    traces: &[Trace],
    exclusion: Option<(u32, u32)>,
    sequence_length: usize,
) -> Result<TaskPool, MetaError> {
    let mut tasks = Vec::new();
    for tr in traces.iter().filter(|t| !excluded(exclusion, t)) {
        tasks.push(TaskSpec::new(
            TaskKind::ViewingDirection,
            tr.user_id,
            tr.video_id,
            3,
            sequence_length,
            tr.flat_components(),
        )?);
    }
    tasks.sort_by_key(|t| (t.user_id, t.video_id));
    Ok(TaskPool { tasks, exclusion })
}

/// Replays a frozen viewing-direction model over a trace, producing the
/// per-tick angular error series `gamma(t)` for `t >= sequence_length`.
pub fn replay_gamma(vd: &SequenceModelParams, trace: &Trace) -> Result<Vec<f64>, MetaError> {
    let s = vd.arch.sequence_length;
    if trace.len() <= s {
        return Err(MetaError::TraceTooShort {
            user: trace.user_id,
            video: trace.video_id,
            got: trace.len(),
            need: s,
        });
    }
    let flat = trace.flat_components();
    let mut gammas = Vec::with_capacity(trace.len() - s);
    let mut prev_pred: Option<Direction> = None;
    for t in s..trace.len() {
        let raw = forward(vd, &flat[(t - s) * 3..t * 3])?;
        let pred = Direction::new(raw[0], raw[1], raw[2])
            .ok()
            .or(prev_pred)
            .unwrap_or(trace.samples[t - 1]);
        prev_pred = Some(pred);
        gammas.push(pred.angular_distance(&trace.samples[t]));
    }
    Ok(gammas)
}

/// Builds prefetch-angle tasks by replaying the frozen meta VD model over
/// each trace; windows of gamma values, next gamma as label.
pub fn build_pa_tasks(
    vd_model: &SequenceModelParams,
    traces: &[Trace],
    exclusion: Option<(u32, u32)>,
    sequence_length: usize,
) -> Result<TaskPool, MetaError> {
    let included: Vec<&Trace> = traces.iter().filter(|t| !excluded(exclusion, t)).collect();
    let mut tasks = included
        .par_iter()
        .map(|tr| {
            let gammas = replay_gamma(vd_model, tr)?;
            TaskSpec::new(TaskKind::PrefetchAngle, tr.user_id, tr.video_id, 1, sequence_length, gammas)
        })
        .collect::<Result<Vec<_>, MetaError>>()?;
    tasks.sort_by_key(|t| (t.user_id, t.video_id));
    Ok(TaskPool { tasks, exclusion })
}

/// Runs one task's inner loop from `theta`, returning the accumulated
/// displacement `theta - theta'` (summed SGD steps).
fn inner_displacement(
    theta: &SequenceModelParams,
    objective: &dyn Objective,
    cfg: &MetaConfig,
    seed: u64,
) -> Result<Vec<f64>, ModelError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (_, delta) = crate::seqmodel::sgd_k_steps_with_delta(
        theta,
        objective,
        cfg.local_steps,
        cfg.local_lr,
        &mut rng,
    )?;
    Ok(delta)
}

/// Reptile meta-training over any family of objectives.
///
/// Per iteration: sample `task_batch` objectives uniformly with replacement,
/// run `local_steps` inner SGD steps each from the shared parameters (in
/// parallel; per-slot RNG streams are fixed up front so the result does not
/// depend on scheduling), then apply
/// `theta <- theta - meta_lr * mean(theta - theta'_i)`.
pub fn reptile_train<T: Objective>(
    tasks: &[T],
    arch: &ArchSpec,
    cfg: &MetaConfig,
    seed: u64,
) -> Result<SequenceModelParams, MetaError> {
    if tasks.is_empty() {
        return Err(MetaError::EmptyPool);
    }
    let mut theta = init_model(arch, seed);
    let mut pick_rng = seeded_rng(seed, 0x7361_6d70);
    let n = cfg.task_batch.max(1);
    let mut mean_delta = vec![0.0; theta.values.len()];

    for iter in 0..cfg.meta_iterations {
        let slots: Vec<(usize, u64)> = (0..n)
            .map(|slot| {
                let task_idx = pick_rng.random_range(0..tasks.len());
                let slot_seed = derive_seed(seed, ((iter as u64) << 20) | slot as u64);
                (task_idx, slot_seed)
            })
            .collect();
        let deltas: Vec<Vec<f64>> = slots
            .par_iter()
            .map(|(task_idx, slot_seed)| inner_displacement(&theta, &tasks[*task_idx], cfg, *slot_seed))
            .collect::<Result<_, ModelError>>()?;

        mean_delta.iter_mut().for_each(|v| *v = 0.0);
        for delta in &deltas {
            for (m, d) in mean_delta.iter_mut().zip(delta) {
                *m += d;
            }
        }
        let inv = 1.0 / n as f64;
        for (v, m) in theta.values.iter_mut().zip(&mean_delta) {
            *v -= cfg.meta_lr * (m * inv);
        }
        if !theta.all_finite() {
            return Err(MetaError::NonFinite(iter));
        }
    }
    Ok(theta)
}

/// Seed used for parameter initialization inside [`reptile_train`].
pub fn init_model(arch: &ArchSpec, seed: u64) -> SequenceModelParams {
    crate::seqmodel::init_params(arch, derive_seed(seed, 0x6d65_7461))
}

/// [`reptile_train`] over a [`TaskPool`] with the configured batch size.
pub fn reptile_train_pool(
    pool: &TaskPool,
    arch: &ArchSpec,
    cfg: &MetaConfig,
    seed: u64,
) -> Result<SequenceModelParams, MetaError> {
    let objectives: Vec<SampledTask> = pool
        .tasks
        .iter()
        .map(|task| SampledTask { task, batch_size: cfg.batch_size })
        .collect();
    reptile_train(&objectives, arch, cfg, seed)
}

/// One online adaptation step on the single freshest example.
pub fn adapt_online(
    model: &SequenceModelParams,
    window: &TrainingExample,
    adapt_lr: f64,
) -> Result<SequenceModelParams, ModelError> {
    let (_, grad) = loss_and_grad(model, std::slice::from_ref(window))?;
    sgd_step(model, &grad, adapt_lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::init_params;
    use crate::trace::{generate_synthetic, MotionPattern, SyntheticUserProfile};

    /// Quadratic surrogate objective: `L = 0.5 |theta - c|^2`.
    pub(crate) struct Quadratic {
        pub center: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn loss_and_grad_at(
            &self,
            params: &SequenceModelParams,
            _rng: &mut ChaCha12Rng,
        ) -> Result<(f64, Vec<f64>), ModelError> {
            let grad: Vec<f64> = params.values.iter().zip(&self.center).map(|(t, c)| t - c).collect();
            let loss = 0.5 * grad.iter().map(|g| g * g).sum::<f64>();
            Ok((loss, grad))
        }
    }

    fn tiny_arch() -> ArchSpec {
        ArchSpec::lstm(2, 3, 2, 4)
    }

    fn fixate_trace(seed: u64, ticks: usize) -> Trace {
        let p = SyntheticUserProfile {
            pattern: MotionPattern::Fixate,
            angular_velocity: 0.0,
            noise: 0.01,
            seed,
        };
        generate_synthetic(&p, ticks as f64 * 0.1, 0.1, seed as u32, 1)
    }

    #[test]
    fn vd_window_arithmetic() {
        let traces = vec![fixate_trace(1, 101), fixate_trace(2, 150)];
        let pool = build_vd_tasks(&traces, None, 100).unwrap();
        assert_eq!(pool.tasks[0].example_count(), 1);
        assert_eq!(pool.tasks[1].example_count(), 50);
    }

    #[test]
    fn vd_exclusion_filters_pair() {
        let traces = vec![fixate_trace(1, 120), fixate_trace(3, 120)];
        let pool = build_vd_tasks(&traces, Some((3, 1)), 100).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.tasks[0].user_id, 1);
    }

    #[test]
    fn vd_rejects_short_trace() {
        let traces = vec![fixate_trace(1, 100)];
        assert!(matches!(
            build_vd_tasks(&traces, None, 100),
            Err(MetaError::TraceTooShort { .. })
        ));
    }

    #[test]
    fn pa_replay_is_deterministic_and_zero_for_perfect_model() {
        let trace = fixate_trace(7, 60);
        let arch = ArchSpec::lstm(3, 4, 3, 10);
        let vd = init_params(&arch, 3);
        let a = replay_gamma(&vd, &trace).unwrap();
        let b = replay_gamma(&vd, &trace).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
    }

    #[test]
    fn sgd_k_steps_quadratic_matches_hand_algebra() {
        let arch = tiny_arch();
        let theta = init_params(&arch, 4);
        let center = vec![0.25; theta.values.len()];
        let q = Quadratic { center: center.clone() };
        let mut rng = seeded_rng(0, 0);
        let eta = 0.1;
        let one = crate::seqmodel::sgd_k_steps(&theta, &q, 1, eta, &mut rng).unwrap();
        for ((got, t), c) in one.values.iter().zip(&theta.values).zip(&center) {
            let want = t - eta * (t - c);
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn reptile_zero_gradient_is_fixed_point() {
        let arch = tiny_arch();
        let theta0 = init_model(&arch, 5);
        let q = Quadratic { center: theta0.values.clone() };
        let cfg = MetaConfig { meta_iterations: 7, task_batch: 3, ..Default::default() };
        let out = reptile_train(&[q], &arch, &cfg, 5).unwrap();
        assert_eq!(out.values, theta0.values);
    }

    #[test]
    fn reptile_zero_meta_lr_returns_init() {
        let arch = tiny_arch();
        let q = Quadratic { center: vec![1.0; arch.param_count()] };
        let cfg = MetaConfig { meta_lr: 0.0, meta_iterations: 4, ..Default::default() };
        let out = reptile_train(&[q], &arch, &cfg, 9).unwrap();
        assert_eq!(out.values, init_model(&arch, 9).values);
    }

    #[test]
    fn reptile_single_quadratic_meta_step() {
        let arch = tiny_arch();
        let theta0 = init_model(&arch, 11);
        let center = vec![-0.5; theta0.values.len()];
        let q = Quadratic { center: center.clone() };
        let cfg = MetaConfig {
            local_lr: 0.1,
            meta_lr: 0.2,
            local_steps: 1,
            task_batch: 4,
            meta_iterations: 1,
            ..Default::default()
        };
        let out = reptile_train(&[q], &arch, &cfg, 11).unwrap();
        for ((got, t), c) in out.values.iter().zip(&theta0.values).zip(&center) {
            let want = t - 0.2 * 0.1 * (t - c);
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn reptile_empty_pool_errors() {
        let arch = tiny_arch();
        let tasks: Vec<Quadratic> = vec![];
        assert!(matches!(
            reptile_train(&tasks, &arch, &MetaConfig::default(), 1),
            Err(MetaError::EmptyPool)
        ));
    }

    #[test]
    fn k2_produces_finite_parameters() {
        let traces = vec![fixate_trace(1, 40), fixate_trace(2, 40)];
        let pool = build_vd_tasks(&traces, None, 10).unwrap();
        let arch = ArchSpec::lstm(3, 4, 3, 10);
        let cfg = MetaConfig { local_steps: 2, meta_iterations: 10, task_batch: 3, batch_size: 4, ..Default::default() };
        let out = reptile_train_pool(&pool, &arch, &cfg, 2).unwrap();
        assert!(out.all_finite());
    }

    #[test]
    fn adapt_online_identities() {
        let arch = tiny_arch();
        let model = init_params(&arch, 6);
        let mut rng = seeded_rng(1, 2);
        let window = TrainingExample {
            inputs: (0..arch.window_len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            label: vec![0.3, -0.2],
        };
        let out = adapt_online(&model, &window, 0.0).unwrap();
        assert_eq!(out.values, model.values);

        let mut fit = window.clone();
        fit.label = forward(&model, &window.inputs).unwrap();
        let out = adapt_online(&model, &fit, 0.05).unwrap();
        assert_eq!(out.values, model.values);
    }

    #[test]
    fn adapt_online_improves_fixate_user() {
        let trace = fixate_trace(13, 300);
        let arch = ArchSpec::lstm(3, 8, 3, 20);
        let mut model = init_params(&arch, 1);
        let flat = trace.flat_components();
        let s = arch.sequence_length;
        let mut block_mse = Vec::new();
        let mut acc = 0.0;
        let mut n = 0;
        for t in s..trace.len() {
            let window = TrainingExample {
                inputs: flat[(t - s) * 3..t * 3].to_vec(),
                label: flat[t * 3..(t + 1) * 3].to_vec(),
            };
            let y = forward(&model, &window.inputs).unwrap();
            acc += y
                .iter()
                .zip(&window.label)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / 3.0;
            n += 1;
            if n == 100 {
                block_mse.push(acc / 100.0);
                acc = 0.0;
                n = 0;
            }
            model = adapt_online(&model, &window, 0.05).unwrap();
        }
        assert!(block_mse.len() >= 2);
        for w in block_mse.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "trailing MSE rose: {:?}", block_mse);
        }
    }
}
