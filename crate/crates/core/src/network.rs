//! Feed-forward range classifier.
//!
//! Sigmoid hidden layers, softmax output. The training loss is the
//! element-wise binary cross-entropy summed over all softmax outputs and
//! averaged over samples:
//!
//! ```text
//! L = −(1/N) Σ_i [ y_iᵀ ln f(x_i) + (1 − y_i)ᵀ ln(1 − f(x_i)) ]
//! ```
//!
//! with both logarithm arguments floored at `clamp_epsilon`. Backpropagation
//! goes through the full softmax Jacobian since the loss is not the
//! categorical form.
//!
//! Weight matrices are stored `fan_in × fan_out` so a batch `X` (rows are
//! samples) maps to `X·W + b`.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, FeatureError, RangeBinning};
use crate::scenario::{Dataset, ScenarioError};

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"FEASTCKPT1";
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid layer dimensions {0:?}")]
    InvalidDims(Vec<usize>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite activation in forward pass")]
    NonFiniteActivation,
    #[error("empty batch")]
    EmptyBatch,
    #[error("label row {0} is not one-hot")]
    LabelNotOneHot(usize),
    #[error("non-finite training loss at epoch {epoch} (last good epoch: {last_good_epoch:?})")]
    NonFiniteLoss { epoch: usize, last_good_epoch: Option<usize> },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Same shapes as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(NetworkError::InvalidDims(layer_dims.to_vec()));
    }
    Ok(())
}

impl MlpParams {
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        let weights = layer_dims.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect();
        let biases = layer_dims[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self { layer_dims: layer_dims.to_vec(), weights, biases })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated dims")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(layer_dims: &[usize], seed: u64) -> Result<MlpParams> {
    let mut params = MlpParams::zeros(layer_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in params.weights.iter_mut() {
        let (fan_in, fan_out) = w.dim();
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        w.mapv_inplace(|_| rng.random_range(-limit..=limit));
    }
    Ok(params)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Activations of every layer for a batch: `[input, hidden..., output probs]`.
fn forward_all(params: &MlpParams, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    if x.ncols() != params.input_dim() {
        return Err(NetworkError::DimMismatch { expected: params.input_dim(), got: x.ncols() });
    }
    let last = params.num_layers() - 1;
    let mut acts = Vec::with_capacity(params.num_layers() + 1);
    acts.push(x.to_owned());
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let mut z = acts[l].dot(w);
        z += b;
        if l == last {
            softmax_rows(&mut z);
        } else {
            z.mapv_inplace(sigmoid);
        }
        acts.push(z);
    }
    let out = acts.last().expect("at least one layer");
    if out.iter().any(|v| !v.is_finite()) {
        return Err(NetworkError::NonFiniteActivation);
    }
    Ok(acts)
}

/// Output probabilities for a batch (one row per sample).
pub fn forward_batch(params: &MlpParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((x.nrows(), params.output_dim()));
    for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let acts = forward_all(params, x.slice(s![start..end, ..]))?;
        out.slice_mut(s![start..end, ..]).assign(acts.last().expect("output layer"));
    }
    Ok(out)
}

pub fn forward(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
    Ok(forward_batch(params, view)?.row(0).to_vec())
}

fn check_labels(labels: ArrayView2<f64>) -> Result<()> {
    for (i, row) in labels.rows().into_iter().enumerate() {
        let ones = row.iter().filter(|v| **v == 1.0).count();
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(NetworkError::LabelNotOneHot(i));
        }
    }
    Ok(())
}

/// Loss from given output probabilities and one-hot labels.
pub fn loss_from_probs(probs: ArrayView2<f64>, labels: ArrayView2<f64>, clamp_epsilon: f64) -> Result<f64> {
    if probs.nrows() == 0 {
        return Err(NetworkError::EmptyBatch);
    }
    if probs.dim() != labels.dim() {
        return Err(NetworkError::DimMismatch { expected: probs.ncols(), got: labels.ncols() });
    }
    check_labels(labels)?;
    Ok(loss_sum(probs, labels, clamp_epsilon) / probs.nrows() as f64)
}

fn loss_sum(probs: ArrayView2<f64>, labels: ArrayView2<f64>, eps: f64) -> f64 {
    let mut total = 0.0;
    Zip::from(probs).and(labels).for_each(|&f, &y| {
        if y != 0.0 {
            total -= y * f.max(eps).ln();
        }
        if y != 1.0 {
            total -= (1.0 - y) * (1.0 - f).max(eps).ln();
        }
    });
    total
}

pub fn loss(params: &MlpParams, x: ArrayView2<f64>, labels: ArrayView2<f64>, clamp_epsilon: f64) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(NetworkError::EmptyBatch);
    }
    if labels.ncols() != params.output_dim() || labels.nrows() != x.nrows() {
        return Err(NetworkError::DimMismatch { expected: params.output_dim(), got: labels.ncols() });
    }
    check_labels(labels)?;
    let mut total = 0.0;
    for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let probs = forward_batch(params, x.slice(s![start..end, ..]))?;
        total += loss_sum(probs.view(), labels.slice(s![start..end, ..]), clamp_epsilon);
    }
    Ok(total / x.nrows() as f64)
}

/// Gradients of [`loss`] with respect to every weight and bias.
pub fn gradients(
    params: &MlpParams,
    x: ArrayView2<f64>,
    labels: ArrayView2<f64>,
    clamp_epsilon: f64,
) -> Result<Gradients> {
    if x.nrows() == 0 {
        return Err(NetworkError::EmptyBatch);
    }
    if labels.ncols() != params.output_dim() || labels.nrows() != x.nrows() {
        return Err(NetworkError::DimMismatch { expected: params.output_dim(), got: labels.ncols() });
    }
    check_labels(labels)?;
    Ok(backprop(params, x, labels, clamp_epsilon)?.1)
}

/// Returns `(batch loss, gradients)`; labels must already be validated.
fn backprop(params: &MlpParams, x: ArrayView2<f64>, labels: ArrayView2<f64>, eps: f64) -> Result<(f64, Gradients)> {
    let n = x.nrows() as f64;
    let acts = forward_all(params, x)?;
    let probs = acts.last().expect("output layer");
    let batch_loss = loss_sum(probs.view(), labels, eps) / n;

    // dL/df, zero where a log argument sits on its floor
    let mut delta = Array2::zeros(probs.dim());
    Zip::from(&mut delta).and(probs).and(labels).for_each(|d, &f, &y| {
        let mut g = 0.0;
        if y != 0.0 && f > eps {
            g -= y / f;
        }
        if y != 1.0 && 1.0 - f > eps {
            g += (1.0 - y) / (1.0 - f);
        }
        *d = g / n;
    });
    // softmax Jacobian: dz_j = f_j (g_j − Σ_k g_k f_k)
    for (mut d_row, f_row) in delta.rows_mut().into_iter().zip(probs.rows()) {
        let dot: f64 = d_row.iter().zip(f_row.iter()).map(|(g, f)| g * f).sum();
        Zip::from(&mut d_row).and(&f_row).for_each(|g, &f| *g = f * (*g - dot));
    }

    let layers = params.num_layers();
    let mut grad_w = vec![Array2::zeros((0, 0)); layers];
    let mut grad_b = vec![Array1::zeros(0); layers];
    for l in (0..layers).rev() {
        grad_w[l] = acts[l].t().dot(&delta);
        grad_b[l] = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut next = delta.dot(&params.weights[l].t());
            Zip::from(&mut next).and(&acts[l]).for_each(|d, &a| *d *= a * (1.0 - a));
            delta = next;
        }
    }
    Ok((batch_loss, Gradients { weights: grad_w, biases: grad_b }))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_range(params: &MlpParams, x: &[f64], binning: &RangeBinning) -> Result<f64> {
    let probs = forward(params, x)?;
    if probs.len() != binning.n_bins() {
        return Err(NetworkError::DimMismatch { expected: binning.n_bins(), got: probs.len() });
    }
    Ok(features::decode_bin(argmax(&probs), binning)?)
}

/// Predicted range for every row of `x`.
pub fn predict_ranges(params: &MlpParams, x: ArrayView2<f64>, binning: &RangeBinning) -> Result<Vec<f64>> {
    if params.output_dim() != binning.n_bins() {
        return Err(NetworkError::DimMismatch { expected: binning.n_bins(), got: params.output_dim() });
    }
    let probs = forward_batch(params, x)?;
    probs
        .rows()
        .into_iter()
        .map(|row| Ok(features::decode_bin(argmax(row.as_slice().expect("contiguous row")), binning)?))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Which per-epoch weight snapshots are retained in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum CheckpointPolicy {
    #[default]
    EveryEpoch,
    /// Keep the most recent `capacity` epochs; older ones are recovered by
    /// deterministic re-training (see [`retrain_to_epoch`]).
    Ring { capacity: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub clamp_epsilon: f64,
    pub checkpoints: CheckpointPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Two 128-unit hidden layers.
    pub fn desk() -> Self {
        Self {
            hidden_layers: vec![128, 128],
            learning_rate: 0.0005,
            max_epochs: 200,
            batch_size: 128,
            seed: 1,
            optimizer: OptimizerKind::Adam,
            clamp_epsilon: 1e-12,
            checkpoints: CheckpointPolicy::EveryEpoch,
        }
    }

    /// Four 1024-unit hidden layers, 2000 epochs. Long-running.
    pub fn paper() -> Self {
        Self {
            hidden_layers: vec![1024; 4],
            max_epochs: 2000,
            checkpoints: CheckpointPolicy::Ring { capacity: 16 },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NetworkError::InvalidConfig(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.clamp_epsilon > 0.0 && self.clamp_epsilon < 1e-6) {
            return bad("clamp_epsilon must lie in (0, 1e-6)");
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        if let CheckpointPolicy::Ring { capacity: 0 } = self.checkpoints {
            return bad("checkpoint ring capacity must be >= 1");
        }
        Ok(())
    }

    pub fn layer_dims(&self, input_dim: usize, output_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(output_dim);
        dims
    }
}

#[derive(Debug, Clone)]
enum OptimizerState {
    Sgd,
    Adam { m: Gradients, v: Gradients, step: i32 },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn zeros_like(params: &MlpParams) -> Gradients {
    Gradients {
        weights: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
        biases: params.biases.iter().map(|b| Array1::zeros(b.dim())).collect(),
    }
}

impl OptimizerState {
    fn new(kind: OptimizerKind, params: &MlpParams) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam { m: zeros_like(params), v: zeros_like(params), step: 0 },
        }
    }

    fn apply(&mut self, params: &mut MlpParams, grads: &Gradients, lr: f64) {
        match self {
            Self::Sgd => {
                for (w, g) in params.weights.iter_mut().zip(&grads.weights) {
                    w.scaled_add(-lr, g);
                }
                for (b, g) in params.biases.iter_mut().zip(&grads.biases) {
                    b.scaled_add(-lr, g);
                }
            }
            Self::Adam { m, v, step } => {
                *step += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*step);
                let c2 = 1.0 - ADAM_BETA2.powi(*step);
                let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                };
                for l in 0..params.weights.len() {
                    Zip::from(&mut params.weights[l])
                        .and(&mut m.weights[l])
                        .and(&mut v.weights[l])
                        .and(&grads.weights[l])
                        .for_each(|p, m, v, &g| update(p, m, v, g));
                    Zip::from(&mut params.biases[l])
                        .and(&mut m.biases[l])
                        .and(&mut v.biases[l])
                        .and(&grads.biases[l])
                        .for_each(|p, m, v, &g| update(p, m, v, g));
                }
            }
        }
    }
}

/// Mini-batch optimizer over a labeled dataset, one epoch at a time.
pub struct Trainer<'a> {
    inputs: ArrayView2<'a, f64>,
    labels: ArrayView2<'a, f64>,
    cfg: TrainConfig,
    params: MlpParams,
    optimizer: OptimizerState,
    shuffle_rng: ChaCha8Rng,
    order: Vec<usize>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(train: &'a Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let labels = train.labels()?.view();
        if train.n_samples() == 0 {
            return Err(NetworkError::EmptyBatch);
        }
        check_labels(labels)?;
        let dims = cfg.layer_dims(train.input_dim(), labels.ncols());
        let params = init_params(&dims, cfg.seed)?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(1);
        Ok(Self {
            inputs: train.inputs.view(),
            labels,
            optimizer: OptimizerState::new(cfg.optimizer, &params),
            cfg: cfg.clone(),
            params,
            shuffle_rng,
            order: (0..train.n_samples()).collect(),
            epoch: 0,
        })
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn into_params(self) -> MlpParams {
        self.params
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        self.order.shuffle(&mut self.shuffle_rng);
        for chunk in self.order.chunks(self.cfg.batch_size) {
            let xb = self.inputs.select(Axis(0), chunk);
            let yb = self.labels.select(Axis(0), chunk);
            let (_, grads) = backprop(&self.params, xb.view(), yb.view(), self.cfg.clamp_epsilon)?;
            self.optimizer.apply(&mut self.params, &grads, self.cfg.learning_rate);
        }
        self.epoch += 1;
        Ok(())
    }

    /// L(α) over the whole training set.
    pub fn train_loss(&self) -> Result<f64> {
        loss(&self.params, self.inputs, self.labels, self.cfg.clamp_epsilon)
    }
}

/// One row of the training record. `epoch` counts from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub predicted_ranges: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochTrace {
    pub records: Vec<EpochRecord>,
}

impl EpochTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    pub fn n_test(&self) -> usize {
        self.records.first().map_or(0, |r| r.predicted_ranges.len())
    }
}

/// Retained per-epoch snapshots.
#[derive(Debug, Clone, Default)]
pub struct CheckpointStore {
    capacity: Option<usize>,
    snapshots: VecDeque<(usize, MlpParams)>,
}

impl CheckpointStore {
    pub fn new(policy: CheckpointPolicy) -> Self {
        let capacity = match policy {
            CheckpointPolicy::EveryEpoch => None,
            CheckpointPolicy::Ring { capacity } => Some(capacity),
        };
        Self { capacity, snapshots: VecDeque::new() }
    }

    fn push(&mut self, epoch: usize, params: &MlpParams) {
        if let Some(cap) = self.capacity {
            while self.snapshots.len() >= cap {
                self.snapshots.pop_front();
            }
        }
        self.snapshots.push_back((epoch, params.clone()));
    }

    pub fn get(&self, epoch: usize) -> Option<&MlpParams> {
        self.snapshots.iter().find(|(e, _)| *e == epoch).map(|(_, p)| p)
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.snapshots.iter().map(|(e, _)| *e).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &MlpParams)> {
        self.snapshots.iter().map(|(e, p)| (*e, p))
    }

    pub fn latest(&self) -> Option<(usize, &MlpParams)> {
        self.snapshots.back().map(|(e, p)| (*e, p))
    }
}

pub struct TrainOutcome {
    pub trace: EpochTrace,
    pub checkpoints: CheckpointStore,
    pub params: MlpParams,
}

pub fn train_with_trace(
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    binning: &RangeBinning,
) -> Result<TrainOutcome> {
    train_with_callback(train, test, cfg, binning, |_| {})
}

/// As [`train_with_trace`], calling `on_epoch` after each recorded epoch.
pub fn train_with_callback(
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    binning: &RangeBinning,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(train, cfg)?;
    if train.label_dim() != binning.n_bins() {
        return Err(NetworkError::DimMismatch { expected: binning.n_bins(), got: train.label_dim() });
    }
    if test.input_dim() != train.input_dim() {
        return Err(NetworkError::DimMismatch { expected: train.input_dim(), got: test.input_dim() });
    }
    let mut trace = EpochTrace::default();
    let mut checkpoints = CheckpointStore::new(cfg.checkpoints);
    for _ in 0..cfg.max_epochs {
        let last_good_epoch = checkpoints.latest().map(|(e, _)| e);
        let epoch = trainer.epoch() + 1;
        let step = trainer.run_epoch().and_then(|_| trainer.train_loss());
        let train_loss = match step {
            Ok(l) if l.is_finite() && trainer.params().is_finite() => l,
            Ok(_) | Err(NetworkError::NonFiniteActivation) => {
                return Err(NetworkError::NonFiniteLoss { epoch, last_good_epoch })
            }
            Err(e) => return Err(e),
        };
        let predicted_ranges = predict_ranges(trainer.params(), test.inputs.view(), binning)?;
        checkpoints.push(epoch, trainer.params());
        let record = EpochRecord { epoch, train_loss, predicted_ranges };
        on_epoch(&record);
        trace.records.push(record);
    }
    Ok(TrainOutcome { trace, checkpoints, params: trainer.into_params() })
}

/// Re-runs training from scratch to recover the parameters after `epoch`.
pub fn retrain_to_epoch(train: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<MlpParams> {
    let mut trainer = Trainer::new(train, cfg)?;
    while trainer.epoch() < epoch {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_params())
}

pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 8 * (params.layer_dims.len() + params.num_parameters()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.layer_dims.len() as u64).to_le_bytes());
    for d in &params.layer_dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for (w, b) in params.weights.iter().zip(&params.biases) {
        for v in w.iter().chain(b.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| NetworkError::BadCheckpoint(m.to_string());
    let rest = bytes.strip_prefix(CHECKPOINT_MAGIC.as_slice()).ok_or_else(|| bad("missing magic"))?;
    let mut words = rest.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("8 bytes"));
    if rest.len() % 8 != 0 {
        return Err(bad("length is not a whole number of words"));
    }
    let n_dims = words.next().map(u64::from_le_bytes).ok_or_else(|| bad("truncated header"))? as usize;
    if n_dims > rest.len() / 8 {
        return Err(bad("implausible layer count"));
    }
    let dims: Vec<usize> = words.by_ref().take(n_dims).map(|w| u64::from_le_bytes(w) as usize).collect();
    if dims.len() != n_dims {
        return Err(bad("truncated header"));
    }
    let mut params = MlpParams::zeros(&dims).map_err(|_| bad("invalid layer dims"))?;
    if words.len() != params.num_parameters() {
        return Err(bad("parameter count does not match layer dims"));
    }
    for (w, b) in params.weights.iter_mut().zip(params.biases.iter_mut()) {
        for v in w.iter_mut().chain(b.iter_mut()) {
            *v = f64::from_le_bytes(words.next().expect("length checked"));
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_hot(n: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        v
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let dims = [12, 9, 7, 4];
        let a = init_params(&dims, 42).unwrap();
        assert_eq!(a, init_params(&dims, 42).unwrap());
        assert_ne!(a, init_params(&dims, 43).unwrap());
        assert!(a.biases.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        for w in &a.weights {
            let (fi, fo) = w.dim();
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() <= bound));
        }
        assert!(matches!(init_params(&[5], 0), Err(NetworkError::InvalidDims(_))));
        assert!(matches!(init_params(&[5, 0, 2], 0), Err(NetworkError::InvalidDims(_))));
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let p = MlpParams::zeros(&[462, 16, 201]).unwrap();
        let out = forward(&p, &vec![0.3; 462]).unwrap();
        for v in &out {
            assert!((v - 1.0 / 201.0).abs() < 1e-15);
        }
        assert!((1.0f64 / 201.0 - 0.0049751).abs() < 1e-7);
    }

    #[test]
    fn hand_computed_two_two_two() {
        let mut p = MlpParams::zeros(&[2, 2, 2]).unwrap();
        p.weights[0] = array![[0.5, -1.0], [0.25, 2.0]];
        p.biases[0] = array![0.1, -0.2];
        p.weights[1] = array![[1.5, -0.5], [-2.0, 0.75]];
        p.biases[1] = array![0.3, 0.0];
        let x = [0.8, -0.4];
        let h0 = 1.0 / (1.0 + (-(0.8 * 0.5 + -0.4 * 0.25 + 0.1f64)).exp());
        let h1 = 1.0 / (1.0 + (-(-0.8 + -0.4 * 2.0 - 0.2f64)).exp());
        let z0 = h0 * 1.5 + h1 * -2.0 + 0.3;
        let z1 = h0 * -0.5 + h1 * 0.75;
        let e0 = z0.exp();
        let e1 = z1.exp();
        let out = forward(&p, &x).unwrap();
        assert!((out[0] - e0 / (e0 + e1)).abs() < 1e-12);
        assert!((out[1] - e1 / (e0 + e1)).abs() < 1e-12);
        assert!(matches!(forward(&p, &[1.0]), Err(NetworkError::DimMismatch { .. })));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut p = MlpParams::zeros(&[1, 1, 3]).unwrap();
        p.biases[1] = array![1000.0, 999.0, -1000.0];
        let out = forward(&p, &[0.0]).unwrap();
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loss_examples() {
        let eps = 1e-12;
        let y = Array2::from_shape_vec((1, 201), one_hot(201, 17)).unwrap();
        assert!(loss_from_probs(y.view(), y.view(), eps).unwrap() <= 10.0 * eps);

        let uniform = Array2::from_elem((1, 201), 1.0 / 201.0);
        let l = loss_from_probs(uniform.view(), y.view(), eps).unwrap();
        let expected = 201f64.ln() + 200.0 * (201f64 / 200.0).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 6.3008).abs() < 1e-4);

        let bad = Array2::from_elem((1, 201), 0.5);
        assert!(matches!(loss_from_probs(uniform.view(), bad.view(), eps), Err(NetworkError::LabelNotOneHot(0))));
        let empty = Array2::<f64>::zeros((0, 201));
        assert!(matches!(loss_from_probs(empty.view(), empty.view(), eps), Err(NetworkError::EmptyBatch)));
    }

    fn toy_batch(seed: u64, n: usize, din: usize, dout: usize) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, din), |_| rng.random_range(-1.0..1.0));
        let mut y = Array2::zeros((n, dout));
        for i in 0..n {
            y[[i, rng.random_range(0..dout)]] = 1.0;
        }
        (x, y)
    }

    #[test]
    fn duplicated_batch_leaves_loss_and_gradients_unchanged() {
        let p = init_params(&[6, 5, 4], 3).unwrap();
        let (x, y) = toy_batch(4, 3, 6, 4);
        let x2 = ndarray::concatenate![Axis(0), x, x];
        let y2 = ndarray::concatenate![Axis(0), y, y];
        let l1 = loss(&p, x.view(), y.view(), 1e-12).unwrap();
        let l2 = loss(&p, x2.view(), y2.view(), 1e-12).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        let g1 = gradients(&p, x.view(), y.view(), 1e-12).unwrap();
        let g2 = gradients(&p, x2.view(), y2.view(), 1e-12).unwrap();
        for (a, b) in g1.weights.iter().zip(&g2.weights) {
            assert!(a.iter().zip(b.iter()).all(|(u, v)| (u - v).abs() < 1e-15));
        }
    }

    #[test]
    fn saturated_exact_fit_has_vanishing_gradient() {
        let mut p = MlpParams::zeros(&[2, 2, 2]).unwrap();
        p.biases[1] = array![40.0, -40.0];
        let x = array![[0.3, -0.2]];
        let y = array![[1.0, 0.0]];
        let g = gradients(&p, x.view(), y.view(), 1e-12).unwrap();
        let norm: f64 = g
            .weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(g.biases.iter().flat_map(|b| b.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-8, "{norm}");
    }

    #[test]
    fn argmax_ties_and_shift_invariance() {
        assert_eq!(argmax(&[0.2, 0.2, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
        let binning = RangeBinning::new(1100.0, 5000.0, 201).unwrap();
        let mut p = MlpParams::zeros(&[3, 2, 201]).unwrap();
        assert!((predict_range(&p, &[1.0, 2.0, 3.0], &binning).unwrap() - 1100.0 - 0.5 * 3900.0 / 201.0).abs() < 1e-9);
        p.biases[1][0] = 50.0;
        assert!((predict_range(&p, &[1.0, 2.0, 3.0], &binning).unwrap() - 1109.7014925).abs() < 1e-6);
        p.biases[1][0] = 0.0;
        p.biases[1][57] = 3.0;
        let before = predict_range(&p, &[0.5, 0.5, 0.5], &binning).unwrap();
        p.biases[1].mapv_inplace(|v| v + 123.0);
        assert_eq!(before, predict_range(&p, &[0.5, 0.5, 0.5], &binning).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let p = init_params(&[7, 5, 3], 11).unwrap();
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"FEASTCKPT1"));
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NetworkError::BadCheckpoint(_))));
        fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NetworkError::BadCheckpoint(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::paper().validate().is_ok());
        assert_eq!(TrainConfig::paper().layer_dims(462, 201), vec![462, 1024, 1024, 1024, 1024, 201]);
        let bad = TrainConfig { clamp_epsilon: 1e-3, ..TrainConfig::desk() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::desk() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { max_epochs: 0, ..TrainConfig::desk() };
        assert!(bad.validate().is_err());
    }

    fn random_batch(n: usize, dim: usize, classes: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0));
        let mut y = Array2::zeros((n, classes));
        for i in 0..n {
            y[[i, rng.random_range(0..classes)]] = 1.0;
        }
        (x, y)
    }

    #[test]
    fn gradients_match_central_differences() {
        let h = 1e-6;
        for seed in [1, 2, 3] {
            let mut p = init_params(&[10, 8, 5], seed).unwrap();
            for b in p.biases.iter_mut() {
                b.mapv_inplace(|_| 0.1);
            }
            let (x, y) = random_batch(6, 10, 5, seed + 100);
            let g = gradients(&p, x.view(), y.view(), 1e-12).unwrap();
            let mut worst = 0.0f64;
            for l in 0..p.num_layers() {
                for idx in 0..p.weights[l].len() {
                    let (r, c) = (idx / p.weights[l].ncols(), idx % p.weights[l].ncols());
                    let orig = p.weights[l][[r, c]];
                    p.weights[l][[r, c]] = orig + h;
                    let up = loss(&p, x.view(), y.view(), 1e-12).unwrap();
                    p.weights[l][[r, c]] = orig - h;
                    let down = loss(&p, x.view(), y.view(), 1e-12).unwrap();
                    p.weights[l][[r, c]] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = g.weights[l][[r, c]];
                    worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-4));
                }
                for j in 0..p.biases[l].len() {
                    let orig = p.biases[l][j];
                    p.biases[l][j] = orig + h;
                    let up = loss(&p, x.view(), y.view(), 1e-12).unwrap();
                    p.biases[l][j] = orig - h;
                    let down = loss(&p, x.view(), y.view(), 1e-12).unwrap();
                    p.biases[l][j] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = g.biases[l][j];
                    worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-4));
                }
            }
            assert!(worst < 1e-5, "seed {seed}: {worst}");
        }
    }

    fn toy_dataset(n: usize, classes: usize, seed: u64) -> Dataset {
        // Separable: the class is encoded by which input coordinate is hot.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = classes + 4;
        let mut x = Array2::zeros((n, dim));
        let mut y = Array2::zeros((n, classes));
        for i in 0..n {
            let k = i % classes;
            for j in 0..dim {
                x[[i, j]] = 0.1 * rng.random_range(-1.0..1.0);
            }
            x[[i, k]] += 1.0;
            y[[i, k]] = 1.0;
        }
        Dataset::new(x, Some(y), None, None).unwrap()
    }

    #[test]
    fn training_descends() {
        let train = toy_dataset(200, 20, 5);
        let test = Dataset::new(train.inputs.slice(s![..10, ..]).to_owned(), None, Some(vec![0.0; 10]), None).unwrap();
        let binning = RangeBinning::new(0.0, 20.0, 20).unwrap();
        let cfg = TrainConfig {
            hidden_layers: vec![32],
            learning_rate: 0.01,
            max_epochs: 40,
            batch_size: 20,
            ..TrainConfig::desk()
        };
        let out = train_with_trace(&train, &test, &cfg, &binning).unwrap();
        let losses = out.trace.losses();
        assert_eq!(losses.len(), 40);
        assert!(losses[39] < 0.5 * losses[0], "{} -> {}", losses[0], losses[39]);
        let labels = train.label_bins().unwrap();
        let pred = predict_ranges(&out.params, train.inputs.view(), &binning).unwrap();
        let correct = pred.iter().zip(&labels).filter(|(r, k)| (**r - (**k as f64 + 0.5)).abs() < 1e-9).count();
        assert!(correct >= 190, "{correct}");
    }

    #[test]
    fn trace_is_deterministic_and_retrain_matches_checkpoint() {
        let train = toy_dataset(60, 6, 9);
        let test = Dataset::new(train.inputs.slice(s![..5, ..]).to_owned(), None, Some(vec![0.0; 5]), None).unwrap();
        let binning = RangeBinning::new(0.0, 6.0, 6).unwrap();
        let cfg = TrainConfig { hidden_layers: vec![8], max_epochs: 6, batch_size: 16, ..TrainConfig::desk() };
        let a = train_with_trace(&train, &test, &cfg, &binning).unwrap();
        let b = train_with_trace(&train, &test, &cfg, &binning).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoints.epochs(), (1..=6).collect::<Vec<_>>());
        assert_eq!(&retrain_to_epoch(&train, &cfg, 4).unwrap(), a.checkpoints.get(4).unwrap());

        let ring = TrainConfig { checkpoints: CheckpointPolicy::Ring { capacity: 2 }, ..cfg.clone() };
        let c = train_with_trace(&train, &test, &ring, &binning).unwrap();
        assert_eq!(c.checkpoints.epochs(), vec![5, 6]);
        assert_eq!(c.trace, a.trace);

        let other = TrainConfig { seed: 2, ..cfg };
        assert_ne!(train_with_trace(&train, &test, &other, &binning).unwrap().trace.losses(), a.trace.losses());
    }
}
