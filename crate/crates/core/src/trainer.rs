//! Mini-batch training: seeded split and shuffling, global-norm clipping,
//! Adam or SGD updates, per-epoch loss logging, early stopping and
//! checkpointing.

use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{encode_example, make_batches, Batch, CorpusError, EncodedExample, QaPair, Rejection, Vocabulary};
use crate::parallel::Execution;
use crate::seq2seq::{forward_backward_with, forward_loss, save_checkpoint, CheckpointError, ModelError, ModelParams};
use crate::tensor::{Real, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Divergence {
    NonFiniteLoss,
    NonFiniteGradient,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Divergence::NonFiniteLoss => "non-finite loss",
            Divergence::NonFiniteGradient => "non-finite gradient",
        })
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training examples left after the eval split")]
    NoExamples,
    #[error("{0}")]
    Diverging(Divergence),
    #[error(
        "training diverged at epoch {epoch}, batch {batch}: {cause}; last good checkpoint: {}",
        last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string())
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        cause: Divergence,
        last_good: Option<PathBuf>,
    },
    #[error("gradient shapes do not match parameters")]
    ShapeMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("unknown optimizer {other:?} (expected adam or sgd)")),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    pub max_len: usize,
    pub eval_fraction: f64,
    pub patience: usize,
    pub seed: u64,
    /// Optional cap on optimizer steps across all epochs.
    pub max_iterations: Option<u64>,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 100,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            clip_norm: 5.0,
            max_len: 10,
            eval_fraction: 0.1,
            patience: 3,
            seed: 0,
            max_iterations: None,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs < 1 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return fail("clip_norm must be positive");
        }
        if self.max_len < 1 {
            return fail("max_len must be at least 1");
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return fail("eval_fraction must be in [0, 1)");
        }
        if self.patience < 1 {
            return fail("patience must be at least 1");
        }
        if self.max_iterations == Some(0) {
            return fail("max_iterations must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    rows: Vec<LossRow>,
}

impl LossLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a log whose rows carry the given eval losses (train loss set
    /// to the same value), numbered from epoch 1.
    pub fn from_eval_losses(eval: &[f64]) -> Result<Self> {
        let mut log = Self::new();
        for (i, &e) in eval.iter().enumerate() {
            log.push(LossRow {
                epoch: i + 1,
                train_loss: e,
                eval_loss: Some(e),
            })?;
        }
        Ok(log)
    }

    pub fn push(&mut self, row: LossRow) -> Result<()> {
        let expected = self.rows.last().map_or(1, |r| r.epoch + 1);
        if row.epoch != expected {
            return Err(TrainError::Config(format!("loss log expects epoch {expected}, got {}", row.epoch)));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(row.train_loss) || !row.eval_loss.is_none_or(ok) {
            return Err(TrainError::Config(format!("epoch {} has an invalid loss", row.epoch)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[LossRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Eval losses, or `None` if any row lacks one.
    pub fn eval_losses(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.eval_loss).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "epoch,train_loss,eval_loss")?;
        for r in &self.rows {
            match r.eval_loss {
                Some(e) => writeln!(out, "{},{},{}", r.epoch, r.train_loss, e)?,
                None => writeln!(out, "{},{},", r.epoch, r.train_loss)?,
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ASCII")
    }

    /// Largest per-row difference against `other`, or `None` when the logs
    /// differ in length or in which rows have eval losses.
    pub fn max_abs_diff(&self, other: &LossLog) -> Option<f64> {
        if self.len() != other.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for (a, b) in self.rows.iter().zip(&other.rows) {
            worst = worst.max((a.train_loss - b.train_loss).abs());
            match (a.eval_loss, b.eval_loss) {
                (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                (None, None) => {}
                _ => return None,
            }
        }
        Some(worst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverfitReport {
    pub flagged_epoch: usize,
    pub best_epoch: usize,
}

/// Flags the first epoch at which eval loss has risen strictly for
/// `patience` consecutive epochs.
pub fn detect_overfit(log: &LossLog, patience: usize) -> Option<OverfitReport> {
    let eval = log.eval_losses()?;
    if patience == 0 || eval.len() < patience + 1 {
        return None;
    }
    let mut run = 0;
    for k in 1..eval.len() {
        if eval[k] > eval[k - 1] {
            run += 1;
        } else {
            run = 0;
        }
        if run >= patience {
            let best = argmin_earliest(&eval);
            return Some(OverfitReport {
                flagged_epoch: log.rows()[k].epoch,
                best_epoch: log.rows()[best].epoch,
            });
        }
    }
    None
}

fn argmin_earliest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Scales every gradient by `clip_norm / norm` when the global L2 norm over
/// all tensors exceeds `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut [&mut Tensor<T>], clip_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > clip_norm {
        let scale = T::of(clip_norm / norm);
        for t in grads.iter_mut() {
            t.scale(scale);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

fn check_step<T: Real>(params: &[&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
        return Err(TrainError::ShapeMismatch);
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(TrainError::Diverging(Divergence::NonFiniteGradient));
    }
    Ok(())
}

/// Bias-corrected Adam update. `state.t` is incremented before use.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    check_step(params, grads)?;
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
        return Err(TrainError::ShapeMismatch);
    }
    state.t += 1;
    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
    let one = T::one();
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let (lr, eps) = (T::of(lr), T::of(ADAM_EPSILON));
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn sgd_step<T: Real>(params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
    check_step(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.add_scaled(g, T::of(-lr)).map_err(ModelError::from)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Sgd,
    Adam(AdamState<T>),
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &ModelParams<T>) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam(AdamState::new(&params.tensors())),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64) -> Result<()> {
        let mut p = params.tensors_mut();
        let g = grads.tensors();
        match self {
            Self::Sgd => sgd_step(&mut p, &g, lr),
            Self::Adam(state) => adam_step(&mut p, &g, state, lr),
        }
    }
}

/// Encodes pairs, keeping each accepted example's position in `pairs`.
pub fn prepare_examples(
    pairs: &[QaPair],
    vocab: &Vocabulary,
    max_len: usize,
) -> (Vec<EncodedExample>, Vec<(usize, Rejection)>) {
    let mut accepted = Vec::with_capacity(pairs.len());
    let mut rejected = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        match encode_example(pair, vocab, max_len) {
            Ok(ex) => accepted.push(ex),
            Err(r) => rejected.push((i, r)),
        }
    }
    (accepted, rejected)
}

/// Seeded disjoint split: `(train indices, eval indices)`. The eval side
/// gets `floor(n * eval_fraction)` examples.
pub fn split_indices(n: usize, eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_eval = ((n as f64) * eval_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    if n_eval > 0 {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let train = order.split_off(n_eval);
    let mut eval = order;
    eval.sort_unstable();
    let mut train = train;
    train.sort_unstable();
    (train, eval)
}

/// Where per-epoch checkpoints go.
#[derive(Debug, Clone, Copy)]
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    pub vocab: &'a Vocabulary,
}

impl CheckpointSink<'_> {
    pub fn epoch_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch}.sqac"))
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join("best.sqac")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    Overfit(OverfitReport),
    IterationCap,
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub batches: usize,
    /// Distinct training examples presented this epoch.
    pub presented: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub log: LossLog,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub stop: StopReason,
    pub iterations: u64,
    pub train_size: usize,
    pub eval_size: usize,
    pub epochs: Vec<EpochStats>,
}

fn take(examples: &[EncodedExample], idx: &[usize]) -> Vec<EncodedExample> {
    idx.iter().map(|&i| examples[i].clone()).collect()
}

fn mean_loss<T: Real>(batches: &[Batch], params: &ModelParams<T>, exec: Execution) -> std::result::Result<f64, ModelError> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for b in batches {
        let (sum, n) = forward_loss(b, params, exec)?;
        total += sum.as_f64();
        tokens += n;
    }
    Ok(total / tokens as f64)
}

/// Runs the training loop from `params`.
pub fn train<T: Real>(
    config: &TrainConfig,
    examples: &[EncodedExample],
    params: ModelParams<T>,
    sink: Option<CheckpointSink<'_>>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    params.validate()?;
    let (train_idx, eval_idx) = split_indices(examples.len(), config.eval_fraction, config.seed);
    if train_idx.is_empty() {
        return Err(TrainError::NoExamples);
    }
    let train_set = take(examples, &train_idx);
    let eval_batches = if eval_idx.is_empty() {
        Vec::new()
    } else {
        make_batches(&take(examples, &eval_idx), config.batch_size, None)?
    };
    if let Some(sink) = sink {
        std::fs::create_dir_all(sink.dir)?;
    }

    let exec = config.execution;
    let mut params = params;
    let mut optimizer = Optimizer::new(config.optimizer, &params);
    let mut log = LossLog::new();
    let mut stats = Vec::new();
    let mut iterations = 0u64;
    let mut last_good: Option<PathBuf> = None;
    let mut best: Option<(usize, f64)> = None;
    let mut stop = StopReason::Completed;

    for epoch in 1..=config.epochs {
        let batches = make_batches(&train_set, config.batch_size, Some(config.seed.wrapping_add(epoch as u64)))?;
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        let mut seen = vec![false; train_set.len()];
        let mut batches_run = 0;
        let diverged = |batch: usize, cause: Divergence, last_good: &Option<PathBuf>| TrainError::Diverged {
            epoch,
            batch,
            cause,
            last_good: last_good.clone(),
        };
        for (b, batch) in batches.iter().enumerate() {
            let (loss, mut grads) = match forward_backward_with(batch, &params, exec) {
                Ok(v) => v,
                Err(ModelError::NonFiniteLoss) => return Err(diverged(b, Divergence::NonFiniteLoss, &last_good)),
                Err(e) => return Err(e.into()),
            };
            clip_gradients(&mut grads.tensors_mut(), config.clip_norm);
            match optimizer.step(&mut params, &grads, config.learning_rate) {
                Ok(()) => {}
                Err(TrainError::Diverging(cause)) => return Err(diverged(b, cause, &last_good)),
                Err(e) => return Err(e),
            }
            let n = batch.target_tokens();
            loss_sum += loss.as_f64() * n as f64;
            tokens += n;
            for &i in &batch.indices {
                seen[i] = true;
            }
            batches_run += 1;
            iterations += 1;
            if config.max_iterations.is_some_and(|cap| iterations >= cap) {
                stop = StopReason::IterationCap;
                break;
            }
        }
        let train_loss = loss_sum / tokens as f64;
        let eval_loss = if eval_batches.is_empty() {
            None
        } else {
            match mean_loss(&eval_batches, &params, exec) {
                Ok(v) => Some(v),
                Err(ModelError::NonFiniteLoss) => {
                    return Err(diverged(batches_run, Divergence::NonFiniteLoss, &last_good));
                }
                Err(e) => return Err(e.into()),
            }
        };
        log.push(LossRow {
            epoch,
            train_loss,
            eval_loss,
        })?;
        stats.push(EpochStats {
            epoch,
            batches: batches_run,
            presented: seen.iter().filter(|&&s| s).count(),
        });
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.6} eval_loss {}",
            eval_loss.map_or("-".to_string(), |e| format!("{e:.6}"))
        );

        let score = eval_loss.unwrap_or(train_loss);
        let improved = best.is_none_or(|(_, b)| score < b);
        if improved {
            best = Some((epoch, score));
        }
        if let Some(sink) = sink {
            let path = sink.epoch_path(epoch);
            save_checkpoint(&params, sink.vocab, &path)?;
            last_good = Some(path);
            if improved {
                save_checkpoint(&params, sink.vocab, &sink.best_path())?;
            }
        }

        if stop == StopReason::IterationCap {
            break;
        }
        if let Some(report) = detect_overfit(&log, config.patience) {
            log::info!("eval loss rose for {} epochs; stopping at epoch {epoch}", config.patience);
            stop = StopReason::Overfit(report);
            break;
        }
    }

    Ok(TrainOutcome {
        params,
        log,
        best_epoch: best.map_or(1, |(e, _)| e),
        best_checkpoint: sink.map(|s| s.best_path()),
        stop,
        iterations,
        train_size: train_idx.len(),
        eval_size: eval_idx.len(),
        epochs: stats,
    })
}
