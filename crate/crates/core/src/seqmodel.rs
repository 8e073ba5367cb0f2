//! Sequence regressors with exact gradients.
//!
//! Two architectures share one flat-parameter representation: a
//! single-hidden-layer LSTM with a linear readout of the final hidden state,
//! and a linear baseline that maps the concatenated input window directly to
//! the output. Gradients are computed by hand-rolled backpropagation
//! (through time, for the LSTM) in 64-bit arithmetic so they can be checked
//! against central finite differences.

use crate::rngutil::seeded_rng;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad sidecar: {0}")]
    Meta(#[from] serde_json::Error),
    #[error(transparent)]
    Shape(#[from] ModelError),
}

/// Which regressor interprets the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lstm,
    Linear,
}

/// Architecture descriptor for a sequence regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub sequence_length: usize,
}

impl ArchSpec {
    pub fn lstm(input_dim: usize, hidden_dim: usize, output_dim: usize, sequence_length: usize) -> Self {
        ArchSpec { kind: ModelKind::Lstm, input_dim, hidden_dim, output_dim, sequence_length }
    }

    pub fn linear(input_dim: usize, output_dim: usize, sequence_length: usize) -> Self {
        ArchSpec { kind: ModelKind::Linear, input_dim, hidden_dim: 0, output_dim, sequence_length }
    }

    /// Flat parameter count.
    ///
    /// LSTM: `4 (I + D + 1) D` gate weights and biases plus `(D + 1) O` for
    /// the readout. Linear: `(S I + 1) O`.
    pub fn param_count(&self) -> usize {
        let (i, d, o, s) = (self.input_dim, self.hidden_dim, self.output_dim, self.sequence_length);
        match self.kind {
            ModelKind::Lstm => 4 * d * (i + d + 1) + o * (d + 1),
            ModelKind::Linear => o * (s * i + 1),
        }
    }

    pub fn window_len(&self) -> usize {
        self.input_dim * self.sequence_length
    }
}

/// Flat parameter vector plus its architecture descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModelParams {
    pub arch: ArchSpec,
    pub values: Vec<f64>,
}

impl SequenceModelParams {
    pub fn new(arch: ArchSpec, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != arch.param_count() {
            return Err(ModelError::ShapeMismatch { expected: arch.param_count(), got: values.len() });
        }
        Ok(SequenceModelParams { arch, values })
    }

    pub fn zeros(arch: ArchSpec) -> Self {
        SequenceModelParams { arch, values: vec![0.0; arch.param_count()] }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// One supervised example: a flattened input window and its label.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    /// `sequence_length * input_dim` values, time-major.
    pub inputs: Vec<f64>,
    pub label: Vec<f64>,
}

/// Deterministic parameter initialization.
///
/// Weights are i.i.d. uniform in `[-s, s]` with `s = 1/sqrt(hidden_dim)`
/// (fan-in for the linear baseline); biases start at zero except the LSTM
/// forget-gate block, which starts at one.
pub fn init_params(arch: &ArchSpec, seed: u64) -> SequenceModelParams {
    let mut rng = seeded_rng(seed, 0x696e_6974);
    let mut values = vec![0.0; arch.param_count()];
    match arch.kind {
        ModelKind::Lstm => {
            let (i, d, o) = (arch.input_dim, arch.hidden_dim, arch.output_dim);
            let s = 1.0 / (d as f64).sqrt();
            let w_len = 4 * d * (i + d);
            for v in values[..w_len].iter_mut() {
                *v = rng.random_range(-s..=s);
            }
            // biases: input, forget, cell, output blocks
            for v in values[w_len + d..w_len + 2 * d].iter_mut() {
                *v = 1.0;
            }
            let out_at = w_len + 4 * d;
            for v in values[out_at..out_at + o * d].iter_mut() {
                *v = rng.random_range(-s..=s);
            }
        }
        ModelKind::Linear => {
            let fan_in = arch.window_len();
            let s = 1.0 / (fan_in as f64).sqrt();
            let w_len = arch.output_dim * fan_in;
            for v in values[..w_len].iter_mut() {
                *v = rng.random_range(-s..=s);
            }
        }
    }
    SequenceModelParams { arch: *arch, values }
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    for (ca, cb) in a.chunks_exact(4).zip(b.chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let ra = a.chunks_exact(4).remainder();
    let rb = b.chunks_exact(4).remainder();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Offsets of the LSTM blocks within the flat vector.
struct LstmLayout {
    i: usize,
    d: usize,
    o: usize,
    s: usize,
    zw: usize, // width of [x | h] rows
    b_at: usize,
    w_out_at: usize,
    b_out_at: usize,
}

impl LstmLayout {
    fn of(arch: &ArchSpec) -> Self {
        let (i, d, o, s) = (arch.input_dim, arch.hidden_dim, arch.output_dim, arch.sequence_length);
        let zw = i + d;
        let w_len = 4 * d * zw;
        LstmLayout { i, d, o, s, zw, b_at: w_len, w_out_at: w_len + 4 * d, b_out_at: w_len + 4 * d + o * d }
    }
}

/// One recurrence step: fills `gates` (post-activation, blocks i|f|g|o),
/// updates `c` and `h` in place from `z = [x_t | h_prev]`.
fn lstm_step(values: &[f64], lay: &LstmLayout, z: &[f64], c: &mut [f64], h: &mut [f64], gates: &mut [f64]) {
    let d = lay.d;
    for r in 0..4 * d {
        let row = &values[r * lay.zw..(r + 1) * lay.zw];
        let pre = values[lay.b_at + r] + dot(row, z);
        gates[r] = match r / d {
            2 => pre.tanh(),
            _ => sigmoid(pre),
        };
    }
    let (gi, rest) = gates.split_at(d);
    let (gf, rest) = rest.split_at(d);
    let (gg, go) = rest.split_at(d);
    for k in 0..d {
        c[k] = gf[k] * c[k] + gi[k] * gg[k];
        h[k] = go[k] * c[k].tanh();
    }
}

fn check_window(arch: &ArchSpec, inputs: &[f64]) -> Result<(), ModelError> {
    if inputs.len() != arch.window_len() {
        return Err(ModelError::ShapeMismatch { expected: arch.window_len(), got: inputs.len() });
    }
    Ok(())
}

/// Evaluates the regressor on one input window.
///
/// LSTM: zero initial hidden and cell state, output is the linear projection
/// of the final hidden state. Linear: direct map of the whole window.
pub fn forward(params: &SequenceModelParams, inputs: &[f64]) -> Result<Vec<f64>, ModelError> {
    check_window(&params.arch, inputs)?;
    match params.arch.kind {
        ModelKind::Linear => {
            let (o, n) = (params.arch.output_dim, inputs.len());
            let w = &params.values[..o * n];
            let b = &params.values[o * n..];
            Ok((0..o).map(|j| b[j] + dot(&w[j * n..(j + 1) * n], inputs)).collect())
        }
        ModelKind::Lstm => {
            let lay = LstmLayout::of(&params.arch);
            let mut h = vec![0.0; lay.d];
            let mut c = vec![0.0; lay.d];
            let mut gates = vec![0.0; 4 * lay.d];
            let mut z = vec![0.0; lay.zw];
            for t in 0..lay.s {
                z[..lay.i].copy_from_slice(&inputs[t * lay.i..(t + 1) * lay.i]);
                z[lay.i..].copy_from_slice(&h);
                lstm_step(&params.values, &lay, &z, &mut c, &mut h, &mut gates);
            }
            let w_out = &params.values[lay.w_out_at..lay.b_out_at];
            let b_out = &params.values[lay.b_out_at..];
            Ok((0..lay.o).map(|j| b_out[j] + dot(&w_out[j * lay.d..(j + 1) * lay.d], &h)).collect())
        }
    }
}

/// Scratch space for one cached LSTM pass, reused across a batch.
struct BpttWorkspace {
    h_all: Vec<f64>,     // (S+1) x D
    c_all: Vec<f64>,     // (S+1) x D
    gates_all: Vec<f64>, // S x 4D
    tanhc_all: Vec<f64>, // S x D
    z: Vec<f64>,
    da: Vec<f64>,
    dz: Vec<f64>,
    dh: Vec<f64>,
    dc: Vec<f64>,
}

impl BpttWorkspace {
    fn new(lay: &LstmLayout) -> Self {
        BpttWorkspace {
            h_all: vec![0.0; (lay.s + 1) * lay.d],
            c_all: vec![0.0; (lay.s + 1) * lay.d],
            gates_all: vec![0.0; lay.s * 4 * lay.d],
            tanhc_all: vec![0.0; lay.s * lay.d],
            z: vec![0.0; lay.zw],
            da: vec![0.0; 4 * lay.d],
            dz: vec![0.0; lay.zw],
            dh: vec![0.0; lay.d],
            dc: vec![0.0; lay.d],
        }
    }
}

/// Forward with caches, then backward; accumulates scaled gradients.
fn lstm_example_grad(
    values: &[f64],
    lay: &LstmLayout,
    ex: &TrainingExample,
    scale: f64,
    ws: &mut BpttWorkspace,
    grad: &mut [f64],
) -> f64 {
    let d = lay.d;
    // forward
    for v in ws.h_all[..d].iter_mut() {
        *v = 0.0;
    }
    for v in ws.c_all[..d].iter_mut() {
        *v = 0.0;
    }
    for t in 0..lay.s {
        ws.z[..lay.i].copy_from_slice(&ex.inputs[t * lay.i..(t + 1) * lay.i]);
        let (h_prev, h_rest) = ws.h_all[t * d..].split_at_mut(d);
        ws.z[lay.i..].copy_from_slice(h_prev);
        let (c_prev, c_rest) = ws.c_all[t * d..].split_at_mut(d);
        let c_t = &mut c_rest[..d];
        c_t.copy_from_slice(c_prev);
        let h_t = &mut h_rest[..d];
        let gates = &mut ws.gates_all[t * 4 * d..(t + 1) * 4 * d];
        lstm_step(values, lay, &ws.z, c_t, h_t, gates);
        for k in 0..d {
            ws.tanhc_all[t * d + k] = c_t[k].tanh();
        }
    }
    let h_last = &ws.h_all[lay.s * d..];
    let w_out = &values[lay.w_out_at..lay.b_out_at];
    let b_out = &values[lay.b_out_at..];

    // loss and readout gradient
    let mut loss = 0.0;
    ws.dh.iter_mut().for_each(|v| *v = 0.0);
    ws.dc.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..lay.o {
        let y = b_out[j] + dot(&w_out[j * d..(j + 1) * d], h_last);
        let r = y - ex.label[j];
        loss += r * r;
        let dy = 2.0 * r * scale;
        grad[lay.b_out_at + j] += dy;
        axpy(&mut grad[lay.w_out_at + j * d..lay.w_out_at + (j + 1) * d], dy, h_last);
        axpy(&mut ws.dh, dy, &w_out[j * d..(j + 1) * d]);
    }
    loss /= lay.o as f64;

    // backward through time
    for t in (0..lay.s).rev() {
        let gates = &ws.gates_all[t * 4 * d..(t + 1) * 4 * d];
        let (gi, rest) = gates.split_at(d);
        let (gf, rest) = rest.split_at(d);
        let (gg, go) = rest.split_at(d);
        let tc = &ws.tanhc_all[t * d..(t + 1) * d];
        let c_prev = &ws.c_all[t * d..(t + 1) * d];
        for k in 0..d {
            let d_out = ws.dh[k] * tc[k];
            let dck = ws.dc[k] + ws.dh[k] * go[k] * (1.0 - tc[k] * tc[k]);
            let d_in = dck * gg[k];
            let d_gg = dck * gi[k];
            let d_f = dck * c_prev[k];
            ws.dc[k] = dck * gf[k];
            ws.da[k] = d_in * gi[k] * (1.0 - gi[k]);
            ws.da[d + k] = d_f * gf[k] * (1.0 - gf[k]);
            ws.da[2 * d + k] = d_gg * (1.0 - gg[k] * gg[k]);
            ws.da[3 * d + k] = d_out * go[k] * (1.0 - go[k]);
        }
        ws.z[..lay.i].copy_from_slice(&ex.inputs[t * lay.i..(t + 1) * lay.i]);
        ws.z[lay.i..].copy_from_slice(&ws.h_all[t * d..(t + 1) * d]);
        ws.dz.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..4 * d {
            let a = ws.da[r];
            axpy(&mut grad[r * lay.zw..(r + 1) * lay.zw], a, &ws.z);
            grad[lay.b_at + r] += a;
            axpy(&mut ws.dz, a, &values[r * lay.zw..(r + 1) * lay.zw]);
        }
        ws.dh.copy_from_slice(&ws.dz[lay.i..]);
    }
    loss
}

fn linear_example_grad(
    values: &[f64],
    arch: &ArchSpec,
    ex: &TrainingExample,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let (o, n) = (arch.output_dim, arch.window_len());
    let w = &values[..o * n];
    let b = &values[o * n..];
    let mut loss = 0.0;
    for j in 0..o {
        let y = b[j] + dot(&w[j * n..(j + 1) * n], &ex.inputs);
        let r = y - ex.label[j];
        loss += r * r;
        let dy = 2.0 * r * scale;
        axpy(&mut grad[j * n..(j + 1) * n], dy, &ex.inputs);
        grad[o * n + j] += dy;
    }
    loss / o as f64
}

/// Mean-squared loss over a batch and its exact gradient.
///
/// Per example, the loss is the mean over output dimensions of the squared
/// residual; the batch loss is the mean over examples.
pub fn loss_and_grad(
    params: &SequenceModelParams,
    batch: &[TrainingExample],
) -> Result<(f64, Vec<f64>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for ex in batch {
        check_window(&params.arch, &ex.inputs)?;
        if ex.label.len() != params.arch.output_dim {
            return Err(ModelError::ShapeMismatch { expected: params.arch.output_dim, got: ex.label.len() });
        }
    }
    let mut grad = vec![0.0; params.values.len()];
    let scale = 1.0 / (params.arch.output_dim as f64 * batch.len() as f64);
    let mut loss = 0.0;
    match params.arch.kind {
        ModelKind::Lstm => {
            let lay = LstmLayout::of(&params.arch);
            let mut ws = BpttWorkspace::new(&lay);
            for ex in batch {
                loss += lstm_example_grad(&params.values, &lay, ex, scale, &mut ws, &mut grad);
            }
        }
        ModelKind::Linear => {
            for ex in batch {
                loss += linear_example_grad(&params.values, &params.arch, ex, scale, &mut grad);
            }
        }
    }
    Ok((loss / batch.len() as f64, grad))
}

/// One SGD step: `values <- values - lr * grad`.
pub fn sgd_step(
    params: &SequenceModelParams,
    grad: &[f64],
    lr: f64,
) -> Result<SequenceModelParams, ModelError> {
    if grad.len() != params.values.len() {
        return Err(ModelError::ShapeMismatch { expected: params.values.len(), got: grad.len() });
    }
    let values = params.values.iter().zip(grad).map(|(v, g)| v - lr * g).collect();
    Ok(SequenceModelParams { arch: params.arch, values })
}

/// A stochastic training objective that draws its own mini-batch on each
/// evaluation.
pub trait Objective: Sync {
    fn loss_and_grad_at(
        &self,
        params: &SequenceModelParams,
        rng: &mut ChaCha12Rng,
    ) -> Result<(f64, Vec<f64>), ModelError>;
}

/// Objective over a fixed batch; every evaluation sees the same data.
pub struct FixedBatch(pub Vec<TrainingExample>);

impl Objective for FixedBatch {
    fn loss_and_grad_at(
        &self,
        params: &SequenceModelParams,
        _rng: &mut ChaCha12Rng,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        loss_and_grad(params, &self.0)
    }
}

/// `k` chained SGD steps, resampling a batch from the objective each step.
pub fn sgd_k_steps(
    params: &SequenceModelParams,
    objective: &dyn Objective,
    k: usize,
    lr: f64,
    rng: &mut ChaCha12Rng,
) -> Result<SequenceModelParams, ModelError> {
    Ok(sgd_k_steps_with_delta(params, objective, k, lr, rng)?.0)
}

/// Like [`sgd_k_steps`] but also returns the accumulated displacement
/// `sum_j lr * grad_j`, i.e. `start - end` free of cancellation error.
pub(crate) fn sgd_k_steps_with_delta(
    params: &SequenceModelParams,
    objective: &dyn Objective,
    k: usize,
    lr: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(SequenceModelParams, Vec<f64>), ModelError> {
    let mut cur = params.clone();
    let mut delta = vec![0.0; params.values.len()];
    for _ in 0..k {
        let (_, grad) = objective.loss_and_grad_at(&cur, rng)?;
        if grad.len() != cur.values.len() {
            return Err(ModelError::ShapeMismatch { expected: cur.values.len(), got: grad.len() });
        }
        for ((v, dl), g) in cur.values.iter_mut().zip(delta.iter_mut()).zip(&grad) {
            let step = lr * g;
            *v -= step;
            *dl += step;
        }
    }
    Ok((cur, delta))
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

/// Sidecar metadata stored next to the raw parameter array.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub arch: ArchSpec,
    pub seed: u64,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "tmp{}",
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

/// Writes `stem.bin` (little-endian f64 array) and `stem.json` (arch + seed).
/// The pair round-trips bit-exactly through [`load_checkpoint`].
pub fn save_checkpoint(
    params: &SequenceModelParams,
    seed: u64,
    stem: &Path,
) -> Result<(), CheckpointError> {
    let (bin, json) = checkpoint_paths(stem);
    let mut bytes = Vec::with_capacity(params.values.len() * 8);
    for v in &params.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(&bin, &bytes)?;
    let meta = CheckpointMeta { arch: params.arch, seed };
    atomic_write(&json, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(SequenceModelParams, u64), CheckpointError> {
    let (bin, json) = checkpoint_paths(stem);
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(json)?)?;
    let bytes = std::fs::read(bin)?;
    if bytes.len() % 8 != 0 {
        return Err(ModelError::ShapeMismatch { expected: meta.arch.param_count() * 8, got: bytes.len() }.into());
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = SequenceModelParams::new(meta.arch, values)?;
    Ok((params, meta.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchSpec {
        ArchSpec::lstm(2, 4, 2, 5)
    }

    fn rng_window(arch: &ArchSpec, seed: u64) -> TrainingExample {
        let mut rng = seeded_rng(seed, 1);
        TrainingExample {
            inputs: (0..arch.window_len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            label: (0..arch.output_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn param_counts_match_layout() {
        assert_eq!(ArchSpec::lstm(3, 128, 3, 100).param_count(), 67_971);
        assert_eq!(ArchSpec::lstm(1, 128, 1, 100).param_count(), 66_689);
        assert_eq!(small_arch().param_count(), 4 * 4 * 7 + 5 * 2);
    }

    #[test]
    fn init_is_deterministic_and_structured() {
        let arch = ArchSpec::lstm(3, 8, 3, 10);
        let a = init_params(&arch, 7);
        let b = init_params(&arch, 7);
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, init_params(&arch, 8).values);

        let lay = LstmLayout::of(&arch);
        let s = 1.0 / (8f64).sqrt();
        for v in &a.values[..lay.b_at] {
            assert!(v.abs() <= s);
        }
        // forget-gate biases are one, other biases zero
        for (r, v) in a.values[lay.b_at..lay.b_at + 4 * 8].iter().enumerate() {
            if (8..16).contains(&r) {
                assert_eq!(*v, 1.0);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        for v in &a.values[lay.b_out_at..] {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let arch = small_arch();
        let p = SequenceModelParams::zeros(arch);
        let ex = rng_window(&arch, 2);
        let y = forward(&p, &ex.inputs).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_readout_gives_zero_output() {
        let arch = small_arch();
        let mut p = init_params(&arch, 3);
        let lay = LstmLayout::of(&arch);
        for v in p.values[lay.w_out_at..].iter_mut() {
            *v = 0.0;
        }
        let ex = rng_window(&arch, 4);
        let y = forward(&p, &ex.inputs).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_rejects_bad_shape() {
        let p = init_params(&small_arch(), 1);
        assert!(matches!(forward(&p, &[0.0; 3]), Err(ModelError::ShapeMismatch { .. })));
    }

    /// Straight-line reference recurrence with per-gate weight matrices,
    /// structured independently of the production kernel.
    fn reference_lstm_forward(p: &SequenceModelParams, inputs: &[f64]) -> Vec<f64> {
        let (i_dim, d, o, s) = (
            p.arch.input_dim,
            p.arch.hidden_dim,
            p.arch.output_dim,
            p.arch.sequence_length,
        );
        let zw = i_dim + d;
        let gate_row = |gate: usize, r: usize| -> (Vec<f64>, Vec<f64>, f64) {
            let row = gate * d + r;
            let wx = p.values[row * zw..row * zw + i_dim].to_vec();
            let wh = p.values[row * zw + i_dim..(row + 1) * zw].to_vec();
            let b = p.values[4 * d * zw + row];
            (wx, wh, b)
        };
        let mut h = vec![0.0; d];
        let mut c = vec![0.0; d];
        for t in 0..s {
            let x = &inputs[t * i_dim..(t + 1) * i_dim];
            let mut acts = vec![vec![0.0; d]; 4];
            for (gate, act) in acts.iter_mut().enumerate() {
                for r in 0..d {
                    let (wx, wh, b) = gate_row(gate, r);
                    let mut pre = b;
                    for (w, xv) in wx.iter().zip(x) {
                        pre += w * xv;
                    }
                    for (w, hv) in wh.iter().zip(&h) {
                        pre += w * hv;
                    }
                    act[r] = if gate == 2 { pre.tanh() } else { 1.0 / (1.0 + (-pre).exp()) };
                }
            }
            for r in 0..d {
                c[r] = acts[1][r] * c[r] + acts[0][r] * acts[2][r];
                h[r] = acts[3][r] * c[r].tanh();
            }
        }
        let w_out_at = 4 * d * zw + 4 * d;
        (0..o)
            .map(|j| {
                let mut y = p.values[w_out_at + o * d + j];
                for k in 0..d {
                    y += p.values[w_out_at + j * d + k] * h[k];
                }
                y
            })
            .collect()
    }

    #[test]
    fn forward_matches_reference_recurrence() {
        let arch = ArchSpec::lstm(3, 6, 3, 8);
        let p = init_params(&arch, 99);
        let ex = rng_window(&arch, 100);
        let got = forward(&p, &ex.inputs).unwrap();
        let want = reference_lstm_forward(&p, &ex.inputs);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        // golden recorded from the reference evaluation at seed 99 / window 100
        let golden = f64::from_bits(0x3fa96aee1091ce5a); // 0.04964393570199084
        assert!((got[0] - golden).abs() < 1e-12, "got {} want {}", got[0], golden);
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_grad() {
        let arch = small_arch();
        let p = init_params(&arch, 5);
        let mut ex = rng_window(&arch, 6);
        ex.label = forward(&p, &ex.inputs).unwrap();
        let (loss, grad) = loss_and_grad(&p, &[ex]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn doubling_residuals_quadruples_loss() {
        let arch = small_arch();
        let p = init_params(&arch, 8);
        let ex = rng_window(&arch, 9);
        let y = forward(&p, &ex.inputs).unwrap();
        let r: Vec<f64> = y.iter().zip(&ex.label).map(|(a, b)| a - b).collect();
        let double = TrainingExample {
            inputs: ex.inputs.clone(),
            label: y.iter().zip(&r).map(|(yv, rv)| yv - 2.0 * rv).collect(),
        };
        let (l1, _) = loss_and_grad(&p, &[ex]).unwrap();
        let (l2, _) = loss_and_grad(&p, &[double]).unwrap();
        assert!((l2 / l1 - 4.0).abs() < 1e-9);
    }

    fn finite_diff_check(arch: ArchSpec, seed: u64) -> f64 {
        let p = init_params(&arch, seed);
        let batch = vec![rng_window(&arch, seed ^ 0xabc), rng_window(&arch, seed ^ 0xdef)];
        let (_, grad) = loss_and_grad(&p, &batch).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for j in 0..p.values.len() {
            let mut plus = p.clone();
            plus.values[j] += eps;
            let mut minus = p.clone();
            minus.values[j] -= eps;
            let (lp, _) = loss_and_grad(&plus, &batch).unwrap();
            let (lm, _) = loss_and_grad(&minus, &batch).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let denom = grad[j].abs().max(fd.abs()).max(1e-8);
            worst = worst.max((grad[j] - fd).abs() / denom);
        }
        worst
    }

    #[test]
    fn lstm_gradient_matches_finite_differences() {
        let worst = finite_diff_check(small_arch(), 42);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let worst = finite_diff_check(ArchSpec::linear(2, 2, 5), 43);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn linear_param_count_and_forward() {
        let arch = ArchSpec::linear(2, 2, 3);
        assert_eq!(arch.param_count(), 2 * 6 + 2);
        let mut p = SequenceModelParams::zeros(arch);
        // y0 = sum of window, y1 = bias only
        for v in p.values[..6].iter_mut() {
            *v = 1.0;
        }
        p.values[13] = 0.5;
        let y = forward(&p, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(y, vec![21.0, 0.5]);
    }

    #[test]
    fn batched_loss_equals_mean_of_singles() {
        let arch = small_arch();
        let p = init_params(&arch, 12);
        let batch = vec![rng_window(&arch, 1), rng_window(&arch, 2), rng_window(&arch, 3)];
        let (lb, gb) = loss_and_grad(&p, &batch).unwrap();
        let mut mean_loss = 0.0;
        let mut mean_grad = vec![0.0; p.values.len()];
        for ex in &batch {
            let (l, g) = loss_and_grad(&p, std::slice::from_ref(ex)).unwrap();
            mean_loss += l / 3.0;
            axpy(&mut mean_grad, 1.0 / 3.0, &g);
        }
        assert!((lb - mean_loss).abs() < 1e-12);
        for (a, b) in gb.iter().zip(&mean_grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let arch = ArchSpec::linear(1, 1, 1);
        let p = SequenceModelParams::new(arch, vec![1.0, 1.0]).unwrap();
        let out = sgd_step(&p, &[2.0, -2.0], 0.1).unwrap();
        assert_eq!(out.values, vec![0.8, 1.2]);
        assert_eq!(sgd_step(&p, &[2.0, -2.0], 0.0).unwrap().values, p.values);
        assert_eq!(sgd_step(&p, &[0.0, 0.0], 0.5).unwrap().values, p.values);
    }

    #[test]
    fn sgd_k_steps_composes() {
        let arch = small_arch();
        let p = init_params(&arch, 21);
        let batch = FixedBatch(vec![rng_window(&arch, 22), rng_window(&arch, 23)]);
        let mut rng = seeded_rng(0, 0);

        let one = sgd_k_steps(&p, &batch, 1, 0.05, &mut rng).unwrap();
        let (_, g) = loss_and_grad(&p, &batch.0).unwrap();
        let manual = sgd_step(&p, &g, 0.05).unwrap();
        assert_eq!(one.values, manual.values);

        let two = sgd_k_steps(&p, &batch, 2, 0.05, &mut rng).unwrap();
        let (_, g2) = loss_and_grad(&manual, &batch.0).unwrap();
        let manual2 = sgd_step(&manual, &g2, 0.05).unwrap();
        assert_eq!(two.values, manual2.values);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("vp360-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let arch = small_arch();
        let p = init_params(&arch, 77);
        let stem = dir.join("model");
        save_checkpoint(&p, 77, &stem).unwrap();
        let (q, seed) = load_checkpoint(&stem).unwrap();
        assert_eq!(seed, 77);
        assert_eq!(p.arch, q.arch);
        assert!(p.values.iter().zip(&q.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        std::fs::remove_dir_all(&dir).ok();
    }
}
