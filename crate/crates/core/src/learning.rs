//! Loss, truncated backpropagation through time, online SGD with L2, and the
//! training loops for the recurrent model and its two baselines.
//!
//! For one impression at time `t` with prediction `y(t)` and label `l(t)`:
//!
//! ```text
//! e_o(t)       = y(t) - l(t)
//! dV           = e_o(t) h(t)
//! e_h(t)       = e_o(t) V * (1 - h(t)*h(t))
//! e_h(t-τ-1)   = e_h(t-τ) R * (1 - h(t-τ-1)*h(t-τ-1))      τ = 0..T-1
//! dU           = Σ_z e_h(t-z)^T x(t-z)
//! dR           = Σ_z e_h(t-z)^T h(t-z-1)
//! db_h         = Σ_z e_h(t-z)
//! ```
//!
//! with `λ W` added to each weight gradient (never to biases). All gradients
//! are taken with the parameters as they were before the update.

use std::collections::VecDeque;

use thiserror::Error;

use crate::datamodel::{featurize_into, FeatureError, FeatureSpec, UserSequence};
use crate::metrics::{self, MetricError};
use crate::models::{self, LrParams, Model, ModelError, NnParams, RnnParams};
use crate::numkernel::{sigmoid, Matrix, Rng, Vector};

/// Clamp applied to predictions before taking logs in reported losses.
pub const LOSS_CLAMP: f64 = 1e-12;

const STREAM_INIT: u64 = 0x1417;
const STREAM_ORDER: u64 = 0x0D0E;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("prediction {0} outside the open interval (0, 1)")]
    PredictionRange(f64),
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} predictions, {1} labels")]
    Length(usize, usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite value in {block} at epoch {epoch}, step {step}")]
    NonFinite {
        block: &'static str,
        epoch: usize,
        step: u64,
    },
    #[error("inconsistent BPTT window: {0}")]
    InconsistentWindow(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
}

/// Hyperparameters shared by all three trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub epochs: usize,
    pub hidden_size: usize,
    pub unfold_t: usize,
    pub seed: u64,
    /// Multiplies the learning rate after each epoch.
    pub lr_decay_per_epoch: f64,
    /// Half-width of the uniform weight initialization.
    pub init_scale: f64,
    /// Element-wise gradient clip; off unless set.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            l2_lambda: 1e-6,
            epochs: 3,
            hidden_size: 13,
            unfold_t: 3,
            seed: 1,
            lr_decay_per_epoch: 0.7,
            init_scale: 0.1,
            clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            return bad("l2_lambda must be >= 0");
        }
        if self.hidden_size == 0 {
            return bad("hidden_size must be >= 1");
        }
        if self.unfold_t == 0 {
            return bad("unfold_t must be >= 1");
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return bad("lr_decay_per_epoch must be in (0, 1]");
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return bad("init_scale must be >= 0");
        }
        if let Some(c) = self.clip {
            if !(c.is_finite() && c > 0.0) {
                return bad("clip must be > 0");
            }
        }
        Ok(())
    }
}

/// Cross-entropy of one prediction.
pub fn cross_entropy(pred: f64, label: bool) -> Result<f64, LearnError> {
    if !(pred > 0.0 && pred < 1.0) {
        return Err(LearnError::PredictionRange(pred));
    }
    Ok(if label { -pred.ln() } else { -(1.0 - pred).ln() })
}

/// Anything carrying an L2 penalty over its weight blocks.
pub trait Penalized {
    fn weight_sum_squares(&self) -> f64;
}

impl Penalized for RnnParams {
    fn weight_sum_squares(&self) -> f64 {
        RnnParams::weight_sum_squares(self)
    }
}

impl Penalized for NnParams {
    fn weight_sum_squares(&self) -> f64 {
        NnParams::weight_sum_squares(self)
    }
}

impl Penalized for LrParams {
    fn weight_sum_squares(&self) -> f64 {
        LrParams::weight_sum_squares(self)
    }
}

/// Average cross-entropy plus `(λ/2) Σ w²` over weight matrices.
pub fn mean_loss(preds: &[f64], labels: &[bool], params: &impl Penalized, lambda: f64) -> Result<f64, LearnError> {
    if preds.len() != labels.len() {
        return Err(LearnError::Length(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(LearnError::Empty);
    }
    let mut total = 0.0;
    for (&p, &l) in preds.iter().zip(labels) {
        total += cross_entropy(p, l)?;
    }
    Ok(total / preds.len() as f64 + 0.5 * lambda * params.weight_sum_squares())
}

/// `e_o = y - l`, the derivative of the cross-entropy with respect to the logit.
#[inline]
pub fn output_error(pred: f64, label: bool) -> f64 {
    pred - if label { 1.0 } else { 0.0 }
}

/// Stored activations for one truncated BPTT update. Index `z` counts back
/// from the current step: `inputs[z] = x(t-z)` and `hidden[z] = h(t-z)`, with
/// `hidden[inputs.len()]` the state that fed the oldest stored input (zero at
/// a sequence head).
#[derive(Debug, Clone)]
pub struct BpttWindow<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub hidden: Vec<&'a [f64]>,
    pub label: bool,
    pub prediction: f64,
}

impl BpttWindow<'_> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Re-runs the forward pass over the stored inputs and checks it reproduces
    /// the stored states and prediction.
    pub fn verify(&self, params: &RnnParams) -> Result<(), LearnError> {
        let k = self.inputs.len();
        if k == 0 || self.hidden.len() != k + 1 {
            return Err(LearnError::InconsistentWindow(format!(
                "{} inputs and {} hidden states",
                k,
                self.hidden.len()
            )));
        }
        let hsz = params.hidden_size();
        let mut h = vec![0.0; hsz];
        let mut y = 0.0;
        for z in (0..k).rev() {
            if self.inputs[z].len() != params.input_width() || self.hidden[z].len() != hsz {
                return Err(LearnError::InconsistentWindow(format!("step t-{z} has wrong width")));
            }
            y = models::rnn_step_into(params, self.inputs[z], self.hidden[z + 1], &mut h);
            if h.iter().zip(self.hidden[z]).any(|(a, b)| (a - b).abs() > 1e-12) {
                return Err(LearnError::InconsistentWindow(format!("stored h(t-{z}) differs from forward pass")));
            }
        }
        if (y - self.prediction).abs() > 1e-12 {
            return Err(LearnError::InconsistentWindow(format!(
                "stored prediction {} differs from forward pass {y}",
                self.prediction
            )));
        }
        Ok(())
    }
}

/// Gradients with the same shapes as [`RnnParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub du: Matrix,
    pub dr: Matrix,
    pub dv: Matrix,
    pub db_h: Vector,
    pub db_o: f64,
}

impl Gradients {
    pub fn zeros_like(p: &RnnParams) -> Self {
        Self {
            du: Matrix::zeros(p.u.rows(), p.u.cols()),
            dr: Matrix::zeros(p.r.rows(), p.r.cols()),
            dv: Matrix::zeros(1, p.v.cols()),
            db_h: Vector::zeros(p.b_h.len()),
            db_o: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.du.is_finite() && self.dr.is_finite() && self.dv.is_finite() && self.db_h.is_finite() && self.db_o.is_finite()
    }

    fn clear(&mut self) {
        self.du.as_mut_slice().fill(0.0);
        self.dr.as_mut_slice().fill(0.0);
        self.dv.as_mut_slice().fill(0.0);
        self.db_h.as_mut_slice().fill(0.0);
        self.db_o = 0.0;
    }

    fn clip(&mut self, c: f64) {
        for g in self
            .du
            .as_mut_slice()
            .iter_mut()
            .chain(self.dr.as_mut_slice())
            .chain(self.dv.as_mut_slice())
            .chain(self.db_h.as_mut_slice())
        {
            *g = g.clamp(-c, c);
        }
        self.db_o = self.db_o.clamp(-c, c);
    }
}

/// Truncated BPTT gradients of the loss at the window's current step.
pub fn bptt_gradients(params: &RnnParams, window: &BpttWindow<'_>, lambda: f64) -> Result<Gradients, LearnError> {
    if window.is_empty() || window.hidden.len() != window.len() + 1 {
        return Err(LearnError::InconsistentWindow(format!(
            "{} inputs and {} hidden states",
            window.len(),
            window.hidden.len()
        )));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut scratch = BpttScratch::new(params.hidden_size());
    accumulate_bptt(params, window, output_error(window.prediction, window.label), lambda, &mut grads, &mut scratch);
    Ok(grads)
}

/// [`bptt_gradients`] after checking the window against a fresh forward pass.
pub fn bptt_gradients_checked(params: &RnnParams, window: &BpttWindow<'_>, lambda: f64) -> Result<Gradients, LearnError> {
    window.verify(params)?;
    bptt_gradients(params, window, lambda)
}

struct BpttScratch {
    e_h: Vec<f64>,
    next: Vec<f64>,
}

impl BpttScratch {
    fn new(hidden: usize) -> Self {
        Self {
            e_h: vec![0.0; hidden],
            next: vec![0.0; hidden],
        }
    }
}

/// Overwrites `grads` with the BPTT gradients for output error `e_o`.
fn accumulate_bptt(
    p: &RnnParams,
    w: &BpttWindow<'_>,
    e_o: f64,
    lambda: f64,
    grads: &mut Gradients,
    s: &mut BpttScratch,
) {
    grads.clear();
    let hsz = p.hidden_size();
    let d = p.input_width();
    let v = p.v.row(0);
    let h_t = w.hidden[0];
    for i in 0..hsz {
        grads.dv.as_mut_slice()[i] = e_o * h_t[i];
        s.e_h[i] = e_o * v[i] * (1.0 - h_t[i] * h_t[i]);
    }
    grads.db_o = e_o;

    let k = w.len();
    for z in 0..k {
        let x = w.inputs[z];
        let h_prev = w.hidden[z + 1];
        let du = grads.du.as_mut_slice();
        let dr = grads.dr.as_mut_slice();
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                for i in 0..hsz {
                    du[i * d + j] += s.e_h[i] * xj;
                }
            }
        }
        for i in 0..hsz {
            let e = s.e_h[i];
            grads.db_h[i] += e;
            let row = &mut dr[i * hsz..(i + 1) * hsz];
            for (g, hp) in row.iter_mut().zip(h_prev) {
                *g += e * hp;
            }
        }
        if z + 1 < k {
            // e_h(t-z-1) = e_h(t-z) R * (1 - h(t-z-1)^2)
            for c in 0..hsz {
                let mut acc = 0.0;
                for i in 0..hsz {
                    acc += s.e_h[i] * p.r.get(i, c);
                }
                s.next[c] = acc * (1.0 - h_prev[c] * h_prev[c]);
            }
            std::mem::swap(&mut s.e_h, &mut s.next);
        }
    }

    if lambda > 0.0 {
        add_scaled(grads.du.as_mut_slice(), p.u.as_slice(), lambda);
        add_scaled(grads.dr.as_mut_slice(), p.r.as_slice(), lambda);
        add_scaled(grads.dv.as_mut_slice(), p.v.as_slice(), lambda);
    }
}

#[inline]
fn add_scaled(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// Moves every parameter against its gradient by `alpha`.
pub fn sgd_step(params: &mut RnnParams, grads: &Gradients, alpha: f64) {
    add_scaled(params.u.as_mut_slice(), grads.du.as_slice(), -alpha);
    add_scaled(params.r.as_mut_slice(), grads.dr.as_slice(), -alpha);
    add_scaled(params.v.as_mut_slice(), grads.dv.as_slice(), -alpha);
    add_scaled(params.b_h.as_mut_slice(), grads.db_h.as_slice(), -alpha);
    params.b_o -= alpha * grads.db_o;
}

/// One line of training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub model: &'static str,
    pub epoch: usize,
    pub samples: u64,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

impl EpochStats {
    /// `key=value` form written to the diagnostics stream.
    pub fn to_line(&self) -> String {
        format!(
            "train model={} epoch={} samples={} mean_loss={:.6} learning_rate={}",
            self.model, self.epoch, self.samples, self.mean_loss, self.learning_rate
        )
    }
}

#[derive(Debug, Clone)]
pub struct Trained<P> {
    pub params: P,
    pub history: Vec<EpochStats>,
}

fn clamped_ce(pred: f64, label: bool) -> f64 {
    metrics::clamped_cross_entropy(pred, label)
}

fn check_corpus(spec: &FeatureSpec, sequences: &[UserSequence]) -> Result<(), LearnError> {
    if sequences.iter().all(UserSequence::is_empty) {
        return Err(LearnError::Empty);
    }
    debug_assert!(spec.width() > 0);
    Ok(())
}

/// User visiting order for one epoch.
fn epoch_order(config: &TrainConfig, n: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(config.seed).derive(STREAM_ORDER).derive(epoch as u64).shuffle(&mut order);
    order
}

fn init_rng(config: &TrainConfig) -> Rng {
    Rng::new(config.seed).derive(STREAM_INIT)
}

/// Fixed-capacity history of inputs and hidden states for truncated BPTT.
struct StepHistory {
    inputs: VecDeque<Vec<f64>>,
    hidden: VecDeque<Vec<f64>>,
    spare_inputs: Vec<Vec<f64>>,
    spare_hidden: Vec<Vec<f64>>,
    unfold: usize,
    width: usize,
    hsz: usize,
}

impl StepHistory {
    fn new(unfold: usize, width: usize, hsz: usize) -> Self {
        Self {
            inputs: VecDeque::with_capacity(unfold + 1),
            hidden: VecDeque::with_capacity(unfold + 2),
            spare_inputs: Vec::new(),
            spare_hidden: Vec::new(),
            unfold,
            width,
            hsz,
        }
    }

    /// Starts a new sequence from the zero state.
    fn reset(&mut self) {
        self.spare_inputs.extend(self.inputs.drain(..));
        self.spare_hidden.extend(self.hidden.drain(..));
        let mut h0 = self.spare_hidden.pop().unwrap_or_default();
        h0.clear();
        h0.resize(self.hsz, 0.0);
        self.hidden.push_front(h0);
    }

    fn input_buffer(&mut self) -> Vec<f64> {
        let mut b = self.spare_inputs.pop().unwrap_or_default();
        b.resize(self.width, 0.0);
        b
    }

    fn hidden_buffer(&mut self) -> Vec<f64> {
        let mut b = self.spare_hidden.pop().unwrap_or_default();
        b.resize(self.hsz, 0.0);
        b
    }

    fn push(&mut self, x: Vec<f64>, h: Vec<f64>) {
        self.inputs.push_front(x);
        self.hidden.push_front(h);
        if self.inputs.len() > self.unfold {
            self.spare_inputs.extend(self.inputs.pop_back());
            self.spare_hidden.extend(self.hidden.pop_back());
        }
    }

    fn previous_hidden(&self) -> &[f64] {
        &self.hidden[0]
    }

    fn window(&self, label: bool, prediction: f64) -> BpttWindow<'_> {
        BpttWindow {
            inputs: self.inputs.iter().map(Vec::as_slice).collect(),
            hidden: self.hidden.iter().map(Vec::as_slice).collect(),
            label,
            prediction,
        }
    }
}

/// Online SGD over user sequences with truncated BPTT.
pub fn train_rnn(
    config: &TrainConfig,
    spec: &FeatureSpec,
    sequences: &[UserSequence],
    mut progress: impl FnMut(&EpochStats),
) -> Result<Trained<RnnParams>, LearnError> {
    config.validate()?;
    check_corpus(spec, sequences)?;
    let width = spec.width();
    let hsz = config.hidden_size;
    let mut params = RnnParams::init(width, hsz, config.init_scale, &mut init_rng(config))?;
    let mut grads = Gradients::zeros_like(&params);
    let mut scratch = BpttScratch::new(hsz);
    let mut hist = StepHistory::new(config.unfold_t, width, hsz);
    let mut alpha = config.learning_rate;
    let mut history = Vec::with_capacity(config.epochs);
    let mut step: u64 = 0;

    for epoch in 1..=config.epochs {
        let (mut loss, mut samples) = (0.0, 0u64);
        for ui in epoch_order(config, sequences.len(), epoch) {
            let seq = &sequences[ui];
            hist.reset();
            for (rec, pred) in seq.with_predecessors() {
                let mut x = hist.input_buffer();
                featurize_into(spec, rec, pred, &mut x)?;
                let mut h = hist.hidden_buffer();
                let y = models::rnn_step_into(&params, &x, hist.previous_hidden(), &mut h);
                hist.push(x, h);
                step += 1;
                if !y.is_finite() {
                    return Err(LearnError::NonFinite {
                        block: "prediction",
                        epoch,
                        step,
                    });
                }
                loss += clamped_ce(y, rec.clicked);
                samples += 1;
                let window = hist.window(rec.clicked, y);
                accumulate_bptt(&params, &window, output_error(y, rec.clicked), config.l2_lambda, &mut grads, &mut scratch);
                if let Some(c) = config.clip {
                    grads.clip(c);
                }
                sgd_step(&mut params, &grads, alpha);
            }
            if let Err(ModelError::NonFinite(block)) = params.validate() {
                return Err(LearnError::NonFinite { block, epoch, step });
            }
        }
        let stats = EpochStats {
            model: "rnn",
            epoch,
            samples,
            mean_loss: loss / samples.max(1) as f64,
            learning_rate: alpha,
        };
        progress(&stats);
        history.push(stats);
        alpha *= config.lr_decay_per_epoch;
    }
    Ok(Trained { params, history })
}

/// Per-example gradients of the feedforward baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct NnGradients {
    pub dw1: Matrix,
    pub db1: Vector,
    pub dw2: Matrix,
    pub db2: f64,
}

impl NnGradients {
    pub fn zeros_like(p: &NnParams) -> Self {
        Self {
            dw1: Matrix::zeros(p.w1.rows(), p.w1.cols()),
            db1: Vector::zeros(p.b1.len()),
            dw2: Matrix::zeros(1, p.w2.cols()),
            db2: 0.0,
        }
    }
}

/// Backprop through the one-hidden-layer network for a single example.
pub fn nn_gradients(p: &NnParams, x: &[f64], label: bool, lambda: f64) -> NnGradients {
    let mut g = NnGradients::zeros_like(p);
    let mut hidden = vec![0.0; p.hidden_size()];
    let y = models::nn_forward_into(p, x, &mut hidden);
    nn_backward(p, x, &hidden, output_error(y, label), lambda, &mut g);
    g
}

fn nn_backward(p: &NnParams, x: &[f64], hidden: &[f64], e_o: f64, lambda: f64, g: &mut NnGradients) {
    let d = p.input_width();
    g.dw1.as_mut_slice().fill(0.0);
    let w2 = p.w2.row(0);
    for (i, &a) in hidden.iter().enumerate() {
        g.dw2.as_mut_slice()[i] = e_o * a;
        let e = e_o * w2[i] * (1.0 - a * a);
        g.db1[i] = e;
        let row = &mut g.dw1.as_mut_slice()[i * d..(i + 1) * d];
        for (gw, &xj) in row.iter_mut().zip(x) {
            if xj != 0.0 {
                *gw = e * xj;
            }
        }
    }
    g.db2 = e_o;
    if lambda > 0.0 {
        add_scaled(g.dw1.as_mut_slice(), p.w1.as_slice(), lambda);
        add_scaled(g.dw2.as_mut_slice(), p.w2.as_slice(), lambda);
    }
}

fn nn_sgd_step(p: &mut NnParams, g: &NnGradients, alpha: f64) {
    add_scaled(p.w1.as_mut_slice(), g.dw1.as_slice(), -alpha);
    add_scaled(p.b1.as_mut_slice(), g.db1.as_slice(), -alpha);
    add_scaled(p.w2.as_mut_slice(), g.dw2.as_slice(), -alpha);
    p.b2 -= alpha * g.db2;
}

/// Shared per-example SGD loop for the two non-recurrent baselines. Examples
/// are visited in the same user order and sequence order the recurrent
/// trainer uses.
fn train_independent<P>(
    config: &TrainConfig,
    spec: &FeatureSpec,
    sequences: &[UserSequence],
    name: &'static str,
    mut params: P,
    mut update: impl FnMut(&mut P, &[f64], bool, f64) -> f64,
    finite: impl Fn(&P) -> Result<(), ModelError>,
    mut progress: impl FnMut(&EpochStats),
) -> Result<Trained<P>, LearnError> {
    config.validate()?;
    check_corpus(spec, sequences)?;
    let mut x = vec![0.0; spec.width()];
    let mut alpha = config.learning_rate;
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 1..=config.epochs {
        let (mut loss, mut samples) = (0.0, 0u64);
        for ui in epoch_order(config, sequences.len(), epoch) {
            for (rec, pred) in sequences[ui].with_predecessors() {
                featurize_into(spec, rec, pred, &mut x)?;
                let y = update(&mut params, &x, rec.clicked, alpha);
                step += 1;
                if !y.is_finite() {
                    return Err(LearnError::NonFinite {
                        block: "prediction",
                        epoch,
                        step,
                    });
                }
                loss += clamped_ce(y, rec.clicked);
                samples += 1;
            }
            if let Err(ModelError::NonFinite(block)) = finite(&params) {
                return Err(LearnError::NonFinite { block, epoch, step });
            }
        }
        let stats = EpochStats {
            model: name,
            epoch,
            samples,
            mean_loss: loss / samples.max(1) as f64,
            learning_rate: alpha,
        };
        progress(&stats);
        history.push(stats);
        alpha *= config.lr_decay_per_epoch;
    }
    Ok(Trained { params, history })
}

/// Feedforward baseline with `config.hidden_size` tanh units.
pub fn train_nn(
    config: &TrainConfig,
    spec: &FeatureSpec,
    sequences: &[UserSequence],
    progress: impl FnMut(&EpochStats),
) -> Result<Trained<NnParams>, LearnError> {
    config.validate()?;
    let params = NnParams::init(spec.width(), config.hidden_size, config.init_scale, &mut init_rng(config))?;
    let mut g = NnGradients::zeros_like(&params);
    let mut hidden = vec![0.0; config.hidden_size];
    let lambda = config.l2_lambda;
    let clip = config.clip;
    train_independent(
        config,
        spec,
        sequences,
        "nn",
        params,
        |p, x, label, alpha| {
            let y = models::nn_forward_into(p, x, &mut hidden);
            nn_backward(p, x, &hidden, output_error(y, label), lambda, &mut g);
            if let Some(c) = clip {
                for v in g.dw1.as_mut_slice().iter_mut().chain(g.dw2.as_mut_slice()).chain(g.db1.as_mut_slice()) {
                    *v = v.clamp(-c, c);
                }
                g.db2 = g.db2.clamp(-c, c);
            }
            nn_sgd_step(p, &g, alpha);
            y
        },
        NnParams::validate,
        progress,
    )
}

/// Logistic regression baseline; weights start at zero.
pub fn train_lr(
    config: &TrainConfig,
    spec: &FeatureSpec,
    sequences: &[UserSequence],
    progress: impl FnMut(&EpochStats),
) -> Result<Trained<LrParams>, LearnError> {
    let lambda = config.l2_lambda;
    let clip = config.clip.unwrap_or(f64::INFINITY);
    train_independent(
        config,
        spec,
        sequences,
        "lr",
        LrParams::zeros(spec.width()),
        |p, x, label, alpha| {
            let y = sigmoid(models::lr_logit(p, x));
            let e = output_error(y, label);
            for (w, &xj) in p.w.as_mut_slice().iter_mut().zip(x) {
                let g = (e * xj + lambda * *w).clamp(-clip, clip);
                *w -= alpha * g;
            }
            p.b -= alpha * e.clamp(-clip, clip);
            y
        },
        LrParams::validate,
        progress,
    )
}

/// Trains whichever model kind is requested.
pub fn train_model(
    kind: models::ModelKind,
    config: &TrainConfig,
    spec: &FeatureSpec,
    sequences: &[UserSequence],
    progress: impl FnMut(&EpochStats),
) -> Result<(Model, Vec<EpochStats>), LearnError> {
    Ok(match kind {
        models::ModelKind::Lr => {
            let t = train_lr(config, spec, sequences, progress)?;
            (Model::Lr(t.params), t.history)
        }
        models::ModelKind::Nn => {
            let t = train_nn(config, spec, sequences, progress)?;
            (Model::Nn(t.params), t.history)
        }
        models::ModelKind::Rnn => {
            let t = train_rnn(config, spec, sequences, progress)?;
            (Model::Rnn(t.params), t.history)
        }
    })
}

/// Settings for [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub max_hidden: usize,
    pub max_input: usize,
    pub max_unfold: usize,
    /// Longest random sequence; windows shorter than `T` arise at heads.
    pub max_sequence: usize,
    pub lambdas: Vec<f64>,
    pub epsilon: f64,
    pub weight_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            max_hidden: 5,
            max_input: 7,
            max_unfold: 4,
            max_sequence: 6,
            lambdas: vec![0.0, 1e-6, 0.1],
            epsilon: 1e-6,
            weight_scale: 0.5,
        }
    }
}

/// Worst relative error seen per parameter block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub instances: usize,
    pub comparisons: usize,
    pub truncated_windows: usize,
    pub max_rel_error: Vec<(&'static str, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    fn record(&mut self, block: &'static str, err: f64) {
        self.comparisons += 1;
        match self.max_rel_error.iter_mut().find(|(b, _)| *b == block) {
            Some((_, e)) => *e = e.max(err),
            None => self.max_rel_error.push((block, err)),
        }
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// A random small recurrent instance: parameters, an input sequence and the
/// position whose loss is differentiated.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub params: RnnParams,
    pub inputs: Vec<Vec<f64>>,
    pub label: bool,
    pub unfold: usize,
    pub lambda: f64,
}

impl GradCheckInstance {
    pub fn random(cfg: &GradCheckConfig, lambda: f64, rng: &mut Rng) -> Result<Self, LearnError> {
        let hsz = rng.range_inclusive(1, cfg.max_hidden as u64) as usize;
        let d = rng.range_inclusive(1, cfg.max_input as u64) as usize;
        let unfold = rng.range_inclusive(1, cfg.max_unfold as u64) as usize;
        let len = rng.range_inclusive(1, cfg.max_sequence as u64) as usize;
        let mut params = RnnParams::init(d, hsz, cfg.weight_scale, rng)?;
        for b in params.b_h.as_mut_slice() {
            *b = rng.uniform_symmetric(0.3);
        }
        params.b_o = rng.uniform_symmetric(0.3);
        let inputs = (0..len)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let mag = 0.1 + 0.9 * rng.uniform();
                        if rng.bernoulli(0.5) {
                            mag
                        } else {
                            -mag
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            params,
            inputs,
            label: rng.bernoulli(0.5),
            unfold,
            lambda,
        })
    }

    /// Forward pass from the zero state; returns every hidden state (index 0
    /// is the initial zero state) and the final prediction.
    pub fn forward(&self, params: &RnnParams) -> (Vec<Vec<f64>>, f64) {
        let hsz = params.hidden_size();
        let mut states = vec![vec![0.0; hsz]];
        let mut y = 0.5;
        for x in &self.inputs {
            let mut h = vec![0.0; hsz];
            y = models::rnn_step_into(params, x, states.last().unwrap(), &mut h);
            states.push(h);
        }
        (states, y)
    }

    /// Loss at the last step with the state entering the window held fixed,
    /// plus the L2 penalty.
    pub fn window_loss(&self, params: &RnnParams, frozen: &[f64]) -> f64 {
        let k = self.window_len();
        let n = self.inputs.len();
        let hsz = params.hidden_size();
        let mut h = frozen.to_vec();
        let mut next = vec![0.0; hsz];
        let mut y = 0.5;
        for x in &self.inputs[n - k..] {
            y = models::rnn_step_into(params, x, &h, &mut next);
            std::mem::swap(&mut h, &mut next);
        }
        let ce = if self.label { -y.ln() } else { -(1.0 - y).ln() };
        ce + 0.5 * self.lambda * params.weight_sum_squares()
    }

    /// `window_loss(hi) - window_loss(lo)` evaluated by carrying the
    /// difference through the network instead of subtracting two nearly
    /// equal losses, so small gradients survive the subtraction.
    pub fn loss_difference(&self, lo: &RnnParams, hi: &RnnParams, frozen: &[f64]) -> f64 {
        let k = self.window_len();
        let n = self.inputs.len();
        let hsz = lo.hidden_size();
        let mut h = frozen.to_vec();
        let mut dh = vec![0.0; hsz];
        let mut next = vec![0.0; hsz];
        let mut dnext = vec![0.0; hsz];
        for x in &self.inputs[n - k..] {
            for i in 0..hsz {
                let mut a = lo.b_h[i];
                let mut da = hi.b_h[i] - lo.b_h[i];
                for (j, xj) in x.iter().enumerate() {
                    a += lo.u.get(i, j) * xj;
                    da += (hi.u.get(i, j) - lo.u.get(i, j)) * xj;
                }
                for c in 0..hsz {
                    a += lo.r.get(i, c) * h[c];
                    da += (hi.r.get(i, c) - lo.r.get(i, c)) * (h[c] + dh[c]) + lo.r.get(i, c) * dh[c];
                }
                next[i] = a.tanh();
                dnext[i] = da.sinh() / (a.cosh() * (a + da).cosh());
            }
            std::mem::swap(&mut h, &mut next);
            std::mem::swap(&mut dh, &mut dnext);
        }
        let mut z = lo.b_o;
        let mut dz = hi.b_o - lo.b_o;
        for i in 0..hsz {
            z += lo.v.get(0, i) * h[i];
            dz += (hi.v.get(0, i) - lo.v.get(0, i)) * (h[i] + dh[i]) + lo.v.get(0, i) * dh[i];
        }
        // loss is softplus(-z) for a click and softplus(z) otherwise
        let dce = if self.label {
            (sigmoid(-z) * (-dz).exp_m1()).ln_1p()
        } else {
            (sigmoid(z) * dz.exp_m1()).ln_1p()
        };
        let mut dl2 = 0.0;
        for (wl, wh) in [(&lo.u, &hi.u), (&lo.r, &hi.r), (&lo.v, &hi.v)] {
            for (a, b) in wl.as_slice().iter().zip(wh.as_slice()) {
                dl2 += (b - a) * (b + a);
            }
        }
        dce + 0.5 * self.lambda * dl2
    }

    pub fn window_len(&self) -> usize {
        self.unfold.min(self.inputs.len())
    }

    pub fn analytic(&self) -> Result<(Gradients, Vec<f64>), LearnError> {
        let (states, y) = self.forward(&self.params);
        let n = self.inputs.len();
        let k = self.window_len();
        let window = BpttWindow {
            inputs: (0..k).map(|z| self.inputs[n - 1 - z].as_slice()).collect(),
            hidden: (0..=k).map(|z| states[n - z].as_slice()).collect(),
            label: self.label,
            prediction: y,
        };
        let g = bptt_gradients_checked(&self.params, &window, self.lambda)?;
        Ok((g, states[n - k].clone()))
    }
}

/// Compares BPTT gradients against central finite differences of the window
/// loss on random small instances.
pub fn gradient_check(cfg: &GradCheckConfig, rng: &mut Rng) -> Result<GradCheckReport, LearnError> {
    let mut report = GradCheckReport::default();
    for n in 0..cfg.instances {
        let lambda = cfg.lambdas[n % cfg.lambdas.len().max(1)];
        let inst = GradCheckInstance::random(cfg, lambda, rng)?;
        if inst.window_len() < inst.unfold {
            report.truncated_windows += 1;
        }
        check_instance(&inst, cfg.epsilon, &mut report)?;
        report.instances += 1;
    }
    Ok(report)
}

fn check_instance(inst: &GradCheckInstance, eps: f64, report: &mut GradCheckReport) -> Result<(), LearnError> {
    let (g, frozen) = inst.analytic()?;
    let mut p = inst.params.clone();
    let fd = |p: &mut RnnParams, get: &dyn Fn(&mut RnnParams) -> &mut f64| {
        let orig = *get(p);
        let mut lo = p.clone();
        *get(&mut lo) = orig - eps;
        let mut hi = p.clone();
        *get(&mut hi) = orig + eps;
        let step = *get(&mut hi) - *get(&mut lo);
        inst.loss_difference(&lo, &hi, &frozen) / step
    };
    for i in 0..g.du.as_slice().len() {
        let num = fd(&mut p, &|p| &mut p.u.as_mut_slice()[i]);
        report.record("U", relative_error(g.du.as_slice()[i], num));
    }
    for i in 0..g.dr.as_slice().len() {
        let num = fd(&mut p, &|p| &mut p.r.as_mut_slice()[i]);
        report.record("R", relative_error(g.dr.as_slice()[i], num));
    }
    for i in 0..g.dv.as_slice().len() {
        let num = fd(&mut p, &|p| &mut p.v.as_mut_slice()[i]);
        report.record("V", relative_error(g.dv.as_slice()[i], num));
    }
    for i in 0..g.db_h.len() {
        let num = fd(&mut p, &|p| &mut p.b_h.as_mut_slice()[i]);
        report.record("b_h", relative_error(g.db_h[i], num));
    }
    let num = fd(&mut p, &|p| &mut p.b_o);
    report.record("b_o", relative_error(g.db_o, num));
    Ok(())
}

/// One grid point's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub config: TrainConfig,
    pub validation_rig: f64,
    pub validation_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best: usize,
    pub rows: Vec<GridRow>,
}

impl GridResult {
    pub fn best_config(&self) -> &TrainConfig {
        &self.rows[self.best].config
    }
}

/// Trains a recurrent model per grid point and keeps the one with the highest
/// validation RIG (earliest wins ties).
pub fn grid_search(
    grid: &[TrainConfig],
    spec: &FeatureSpec,
    train: &[UserSequence],
    validation: &[UserSequence],
    mut progress: impl FnMut(&EpochStats),
) -> Result<GridResult, LearnError> {
    if grid.is_empty() {
        return Err(LearnError::Empty);
    }
    let mut rows = Vec::with_capacity(grid.len());
    for config in grid {
        let trained = train_rnn(config, spec, train, &mut progress)?;
        let model = Model::Rnn(trained.params);
        let (preds, labels) = crate::inference::score_corpus(&model, spec, validation, false)?;
        rows.push(GridRow {
            config: config.clone(),
            validation_rig: metrics::rig(&preds, &labels)?,
            validation_auc: metrics::auc(&preds, &labels)?,
        });
    }
    let mut best = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.validation_rig > rows[best].validation_rig {
            best = i;
        }
    }
    Ok(GridResult { best, rows })
}
