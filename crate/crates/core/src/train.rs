//! Mini-batch training with Adam.
//!
//! Each sample's loss and gradient come from its own tape; per-sample
//! gradients are computed in parallel and summed in batch order, so the
//! result does not depend on the thread count.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::NormalizedSample;
use crate::exec::Exec;
use crate::loss::{masked_quantile_loss, weighted_mae, EventWeightConfig, LossError, MaeWeightConfig};
use crate::model::{HeadKind, Model, ModelError};
use crate::seed::{self, tag};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training samples")]
    Empty,
    #[error("sample {index} does not fit the model: {reason}")]
    Sample { index: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub event: EventWeightConfig,
    pub mae: MaeWeightConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 1,
            event: EventWeightConfig::default(),
            mae: MaeWeightConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, levels: &[f64]) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(TrainError::Config(format!("invalid optimizer settings {a:?}")));
        }
        self.event.validate(levels)?;
        self.mae.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch, measured before each step.
    pub loss: f64,
    pub steps: usize,
}

/// One sample's loss and parameter gradients.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// The objective for `model`: weighted MAE for the deterministic head,
/// the event-weighted masked pinball sum otherwise. `dropout_seed` enables
/// train-mode dropout.
pub fn sample_grad(model: &Model, s: &NormalizedSample, cfg: &TrainConfig, dropout_seed: Option<u64>) -> Result<SampleGrad> {
    let (h, w) = model.config.fine_shape((s.input.shape()[1], s.input.shape()[2]));
    if h * w != s.target.len() {
        return Err(TrainError::Sample {
            index: s.index,
            reason: format!("target has {} pixels, model emits {h}x{w}", s.target.len()),
        });
    }
    let mut g = Graph::new();
    let mut rng = dropout_seed.map(|d| seed::stream(d, &[]));
    let f = model.record(&mut g, &s.input, rng.as_mut().map(|r| r as &mut dyn rand::RngCore))?;
    let loss = match model.head {
        HeadKind::Deterministic => weighted_mae(&mut g, f.output, &s.target, &s.target_mm, &s.mask, &cfg.mae)?,
        _ => masked_quantile_loss(&mut g, f.output, &s.target, &s.mask, model.levels.as_slice(), &cfg.event)?,
    };
    g.backward(loss)?;
    Ok(SampleGrad {
        loss: g.value(loss).data()[0],
        grads: f.params.iter().map(|&p| g.grad_or_zero(p)).collect(),
    })
}

/// Mean objective over `samples` in eval mode.
pub fn evaluate_loss(model: &Model, samples: &[NormalizedSample], cfg: &TrainConfig, exec: Exec) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::Empty);
    }
    let losses = exec.map(samples, |s| sample_grad(model, s, cfg, None).map(|g| g.loss));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

/// Seed of the dropout stream for one sample at one step.
pub fn dropout_seed(seed: u64, epoch: usize, step: usize, index: usize) -> u64 {
    seed::mix_all(seed, &[tag::DROPOUT, epoch as u64, step as u64, index as u64])
}

/// Visiting order of the training set in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed, &[tag::SHUFFLE, epoch as u64]));
    order
}

/// One optimizer step on a batch; returns the mean batch loss before the
/// update.
pub fn train_step(model: &mut Model, batch: &[&NormalizedSample], cfg: &TrainConfig, state: &mut AdamState, seeds: &[Option<u64>], exec: Exec) -> Result<f64> {
    let m: &Model = model;
    let results = exec.map_range(batch.len(), |i| sample_grad(m, batch[i], cfg, seeds[i]));
    let scale = 1.0 / batch.len() as f64;
    let mut acc: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut loss = 0.0;
    for r in results {
        let r = r?;
        loss += r.loss;
        for (a, g) in acc.iter_mut().zip(&r.grads) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    for (p, mut a) in model.params.iter_mut().zip(acc) {
        a.iter_mut().for_each(|x| *x *= scale);
        p.set_grad(a)?;
    }
    adam_step(&mut model.params, state)?;
    Ok(loss * scale)
}

/// Trains in place and returns one log entry per epoch.
pub fn train(model: &mut Model, samples: &[NormalizedSample], cfg: &TrainConfig, exec: Exec) -> Result<Vec<EpochLog>> {
    cfg.validate(model.levels.as_slice())?;
    if samples.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut state = AdamState::new(cfg.adam, &model.params);
    let dropout = model.config.dropout > 0.0;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, samples.len());
        let (mut total, mut steps) = (0.0, 0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&NormalizedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let seeds: Vec<Option<u64>> = chunk
                .iter()
                .map(|&i| dropout.then(|| dropout_seed(cfg.seed, epoch, step, samples[i].index)))
                .collect();
            total += train_step(model, &batch, cfg, &mut state, &seeds, exec)? * batch.len() as f64;
            steps += 1;
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            loss: total / samples.len() as f64,
            steps,
        });
    }
    Ok(log)
}

/// Per-epoch log as CSV with header `epoch,loss,steps`.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,steps\n");
    for e in log {
        s.push_str(&format!("{},{:e},{}\n", e.epoch, e.loss, e.steps));
    }
    s
}
