//! Optimizer, learning-rate schedule, training loop and weight transfer.

mod optim;
mod transfer;

use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_global_norm, AdamState, OptimError, Schedule, ADAM_EPS, BETA1, BETA2};
pub use transfer::{transfer_weights, TransferError, TransferReport};

use crate::data::Batcher;
use crate::model::{Model, ModelError};
use crate::numerics::{Array, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stops early once this many steps have run.
    pub max_steps: Option<u64>,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub decay_factor: f64,
    pub decay_every: f64,
    pub clip_norm: f64,
    /// Seeds the dropout stream; batch order is seeded by the batcher.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            max_steps: None,
            base_lr: 1e-4,
            warmup_epochs: 20.0,
            decay_factor: 0.95,
            decay_every: 25.0,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            decay_factor: self.decay_factor,
            decay_every: self.decay_every,
            steps_per_epoch,
        }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of training queries whose own image scored highest in the batch.
    pub batch_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Model(ModelError),
    Optim(OptimError),
    Diverged { step: u64, epoch: usize, loss: f64 },
    NoBatches { examples: usize, batch_size: usize },
    Stopped(alloc::string::String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Optim(e) => write!(f, "{e}"),
            TrainError::Diverged { step, epoch, loss } => {
                write!(f, "loss became {loss} at step {step} (epoch {epoch}); lower the learning rate")
            }
            TrainError::NoBatches { examples, batch_size } => {
                write!(f, "{examples} training examples cannot fill one batch of {batch_size}")
            }
            TrainError::Stopped(why) => write!(f, "training stopped: {why}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<OptimError> for TrainError {
    fn from(e: OptimError) -> Self {
        TrainError::Optim(e)
    }
}

/// Hooks called by [`train`]. Returning an error from either aborts the run.
pub trait TrainObserver<T: Real> {
    fn on_step(&mut self, _log: &StepLog) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_epoch(&mut self, _summary: &EpochSummary, _model: &Model<T>) -> Result<(), TrainError> {
        Ok(())
    }
}

impl<T: Real> TrainObserver<T> for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochSummary>,
}

/// Share of rows whose diagonal entry is the strict row maximum.
pub fn in_batch_accuracy<T: Real>(scores: &Array<T>) -> f64 {
    let (b, _) = scores.dims2();
    let hits = (0..b).filter(|&i| (0..b).all(|j| j == i || scores.get(i, j) < scores.get(i, i))).count();
    hits as f64 / b as f64
}

/// Contrastive training with Adam over the batcher's shuffled epochs.
pub fn train<T: Real>(
    model: &mut Model<T>,
    batcher: &Batcher,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainReport, TrainError> {
    let steps_per_epoch = batcher.steps_per_epoch();
    if steps_per_epoch == 0 {
        return Err(TrainError::NoBatches { examples: batcher.len(), batch_size: batcher.config().batch_size });
    }
    let schedule = cfg.schedule(steps_per_epoch);
    let mut adam = AdamState::new(&model.params);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD50F_0A7E);
    let mut report = TrainReport { steps: Vec::new(), epochs: Vec::new() };
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut acc_sum, mut n) = (0.0, 0.0, 0usize);
        for batch in batcher.train_epoch(epoch as u64) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let lr = schedule.lr_at(step);
            let mut pass = model.forward(&batch.images, &batch.queries, Some(&mut dropout_rng))?;
            pass.graph.evaluate(&model.params, &[]).map_err(ModelError::from)?;
            let loss = pass.graph.value_slice(pass.loss)[0].as_f64();
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, epoch, loss });
            }
            acc_sum += in_batch_accuracy(&pass.graph.value(pass.scores));
            model.params.zero_grad();
            pass.graph
                .backpropagate(&mut model.params, pass.loss, &Array::scalar(T::one()))
                .map_err(ModelError::from)?;
            clip_global_norm(&mut model.params, cfg.clip_norm);
            adam.step(&mut model.params, lr)?;
            let log = StepLog { step, epoch, lr, loss };
            observer.on_step(&log)?;
            report.steps.push(log);
            loss_sum += loss;
            n += 1;
            step += 1;
        }
        if n == 0 {
            break;
        }
        let summary = EpochSummary { epoch, mean_loss: loss_sum / n as f64, batch_accuracy: acc_sum / n as f64 };
        observer.on_epoch(&summary, model)?;
        report.epochs.push(summary);
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    Ok(report)
}
