//! Losses, Adam, the training loop, and evaluation.
//!
//! Determinism contract: given identical (config, seed, data), training
//! produces identical parameters after any number of steps, independent of
//! thread count. Batches fan out across threads but gradients reduce in
//! sample order, and every sample's dropout stream is derived from
//! `(seed, epoch, batch, position)`.

use crate::model::{Binding, Encoder, Input, ParamSet, Target};
use crate::seeding::derive_seed;
use crate::synthetic::MirroredDataset;
use crate::tensor::{Graph, Tensor, Var};
use crate::text::TextDataset;
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;

/// Optimizer and loop hyper-parameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Decoupled weight decay (not folded into the gradient).
    pub weight_decay: f64,
    /// Optional global-norm gradient clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 10,
            dropout: 0.0,
            seed: 0,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr", format!("{} must be > 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::invalid("adam betas", format!("{name} = {b} outside (0,1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout", format!("{} outside [0,1)", self.dropout)));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps", "must be > 0"));
        }
        Ok(())
    }

    /// Keys accepted in a `[train]` section.
    pub const DOC_KEYS: &'static [&'static str] = &[
        "lr", "beta1", "beta2", "adam_eps", "batch_size", "epochs", "dropout", "seed",
        "weight_decay", "clip_norm",
    ];

    pub fn to_doc(&self, doc: &mut crate::config::ConfigDoc) {
        let s = "train";
        doc.set(s, "lr", &format!("{}", self.lr));
        doc.set(s, "beta1", &format!("{}", self.beta1));
        doc.set(s, "beta2", &format!("{}", self.beta2));
        doc.set(s, "adam_eps", &format!("{}", self.adam_eps));
        doc.set(s, "batch_size", &self.batch_size.to_string());
        doc.set(s, "epochs", &self.epochs.to_string());
        doc.set(s, "dropout", &format!("{}", self.dropout));
        doc.set(s, "seed", &self.seed.to_string());
        doc.set(s, "weight_decay", &format!("{}", self.weight_decay));
        if let Some(c) = self.clip_norm {
            doc.set(s, "clip_norm", &format!("{c}"));
        }
    }

    pub fn from_doc(doc: &crate::config::ConfigDoc, defaults: &TrainConfig) -> Result<TrainConfig> {
        let s = "train";
        let clip_norm = match doc.get(s, "clip_norm") {
            None => defaults.clip_norm,
            Some(v) => Some(v.parse().map_err(|_| {
                Error::Config(format!("[train] clip_norm = {v:?}: expected a number"))
            })?),
        };
        let cfg = TrainConfig {
            lr: doc.get_f64(s, "lr", defaults.lr)?,
            beta1: doc.get_f64(s, "beta1", defaults.beta1)?,
            beta2: doc.get_f64(s, "beta2", defaults.beta2)?,
            adam_eps: doc.get_f64(s, "adam_eps", defaults.adam_eps)?,
            batch_size: doc.get_usize(s, "batch_size", defaults.batch_size)?,
            epochs: doc.get_usize(s, "epochs", defaults.epochs)?,
            dropout: doc.get_f64(s, "dropout", defaults.dropout)?,
            seed: doc.get_u64(s, "seed", defaults.seed)?,
            weight_decay: doc.get_f64(s, "weight_decay", defaults.weight_decay)?,
            clip_norm,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── Losses ────────────────────────────────────────────────────────────

/// Mean squared elementwise error.
pub fn mse_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    g.mse_loss(pred, target)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    g.cross_entropy(logits, label)
}

// ── Adam ──────────────────────────────────────────────────────────────

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction and decoupled weight decay:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p`.
///
/// Non-finite gradients abort the step before any parameter changes.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    debug_assert_eq!(grads.len(), params.len());
    for ((name, _), g) in params.iter().zip(grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {name:?}; step aborted"
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let g = &grads[i];
        let data = p.data_mut();
        for e in 0..data.len() {
            m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * g[e];
            v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * g[e] * g[e];
            let m_hat = m[e] / bc1;
            let v_hat = v[e] / bc2;
            data[e] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps)
                + cfg.lr * cfg.weight_decay * data[e];
        }
    }
    Ok(())
}

/// Scales all gradients by `clip / norm` when the global L2 norm exceeds
/// `clip`.
pub fn clip_gradients(grads: &mut [Vec<f64>], clip: f64) {
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > clip && norm > 0.0 {
        let s = clip / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}

// ── Datasets ──────────────────────────────────────────────────────────

/// What `evaluate` reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// Mean squared error; lower is better.
    Mse,
    /// Classification accuracy in [0,1]; higher is better.
    Accuracy,
}

impl MetricKind {
    pub fn improved(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            MetricKind::Mse => candidate < incumbent,
            MetricKind::Accuracy => candidate > incumbent,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mse => "mse",
            MetricKind::Accuracy => "accuracy",
        }
    }
}

/// A training or evaluation split.
pub enum TaskData {
    Mirrored(MirroredDataset),
    Text(TextDataset),
}

impl TaskData {
    pub fn len(&self) -> usize {
        match self {
            TaskData::Mirrored(d) => d.len(),
            TaskData::Text(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, i: usize) -> Input<'_> {
        match self {
            TaskData::Mirrored(d) => Input::Vectors(d.input(i)),
            TaskData::Text(d) => Input::Tokens(d.tokens(i)),
        }
    }

    pub fn target(&self, i: usize) -> Target<'_> {
        match self {
            TaskData::Mirrored(d) => Target::Vector(d.target(i)),
            TaskData::Text(d) => Target::Label(d.label(i)),
        }
    }

    pub fn metric_kind(&self) -> MetricKind {
        match self {
            TaskData::Mirrored(_) => MetricKind::Mse,
            TaskData::Text(_) => MetricKind::Accuracy,
        }
    }
}

// ── Training loop ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
}

#[derive(Debug, Clone)]
pub struct History {
    /// Evaluation of the untrained model.
    pub initial_metric: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were retained (0 = initial state).
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Epoch loop with seeded shuffling, mini-batch Adam, and best-checkpoint
/// retention by eval metric. The encoder is left holding the best
/// parameters seen (including the initial state).
pub fn train(
    enc: &mut Encoder,
    train_data: &TaskData,
    eval_data: &TaskData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if train_data.is_empty() || eval_data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    enc.config.dropout = cfg.dropout;
    let kind = eval_data.metric_kind();

    let initial_metric = evaluate(enc, eval_data)?;
    let mut best_metric = initial_metric;
    let mut best_epoch = 0usize;
    let mut best_params = enc.params.clone();

    let mut state = AdamState::new(&enc.params);
    let n = train_data.len();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = StdRng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64]));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_loss = train_batch(enc, train_data, chunk, cfg, epoch, batch_idx, &mut state)?;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged (non-finite) at epoch {epoch}, step {batch_idx}"
                )));
            }
            loss_sum += batch_loss * chunk.len() as f64;
        }

        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            eval_metric: evaluate(enc, eval_data)?,
        };
        if kind.improved(record.eval_metric, best_metric) {
            best_metric = record.eval_metric;
            best_epoch = epoch;
            best_params = enc.params.clone();
        }
        on_epoch(&record);
        history.push(record);
    }

    enc.params = best_params;
    Ok(History { initial_metric, epochs: history, best_epoch, best_metric })
}

fn train_batch(
    enc: &mut Encoder,
    data: &TaskData,
    chunk: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    batch_idx: usize,
    state: &mut AdamState,
) -> Result<f64> {
    // Forward/backward per sample on independent graphs, in parallel.
    let enc_ref: &Encoder = enc;
    let per_sample: Vec<(f64, Vec<Option<Vec<f64>>>)> = chunk
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
            let graph_seed = derive_seed(&[cfg.seed, epoch as u64, batch_idx as u64, pos as u64]);
            let mut g = Graph::with_seed(graph_seed);
            let mut b = Binding::new(&enc_ref.params, true);
            let loss = enc_ref.loss(&mut g, &mut b, data.input(i), data.target(i))?;
            let value = g.value(loss).data()[0];
            g.backward(loss)?;
            Ok((value, b.grads(&g)))
        })
        .collect::<Result<Vec<_>>>()?;

    // Deterministic reduction in sample order.
    let scale = 1.0 / chunk.len() as f64;
    let mut grads: Vec<Vec<f64>> = enc.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut loss_sum = 0.0;
    for (value, sample_grads) in per_sample {
        loss_sum += value;
        for (acc, g) in grads.iter_mut().zip(sample_grads) {
            if let Some(g) = g {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v * scale;
                }
            }
        }
    }
    if let Some(clip) = cfg.clip_norm {
        clip_gradients(&mut grads, clip);
    }
    adam_step(&mut enc.params, &grads, state, cfg)?;
    Ok(loss_sum * scale)
}

/// Dataset metric in eval mode: mean MSE for regression data, accuracy for
/// labeled data. Deterministic and thread-count independent.
pub fn evaluate(enc: &Encoder, data: &TaskData) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let scores: Vec<f64> = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut g = Graph::new();
            let mut b = Binding::new(&enc.params, false);
            let out = enc.forward(&mut g, &mut b, data.input(i), None)?;
            let pred = g.value(out);
            match data.target(i) {
                Target::Vector(t) => {
                    if pred.shape() != t.shape() {
                        return Err(Error::Shape {
                            op: "evaluate",
                            lhs: pred.shape().to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                    let mse = pred
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        / t.numel() as f64;
                    Ok(mse)
                }
                Target::Label(label) => {
                    let mut arg = 0;
                    for (j, v) in pred.data().iter().enumerate() {
                        if *v > pred.data()[arg] {
                            arg = j;
                        }
                    }
                    Ok(if arg == label { 1.0 } else { 0.0 })
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
