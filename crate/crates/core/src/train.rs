//! Mini-batch training with Adam.

use serde::{Deserialize, Serialize};

use crate::data_model::{Document, QuerySet};
use crate::encoder::{HeadKind, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{derive_seed, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Seeds the per-epoch shuffle; weight initialization uses `ModelConfig::seed`.
    pub seed: u64,
    pub head: HeadKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            head: HeadKind::Uner,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate = {} must be positive", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-document loss over the epoch's batches, each taken before its update.
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, n: usize) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_epsilon,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        self.apply(params, grads, 0);
    }

    /// One step over every tensor of `params`, in place.
    pub fn update_params(&mut self, params: &mut Parameters, grads: &Parameters) {
        self.step += 1;
        let mut at = 0;
        for ((_, _, w), g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            self.apply(w, g.data, at);
            at += w.len();
        }
    }

    fn apply(&mut self, params: &mut [f64], grads: &[f64], offset: usize) {
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for (((w, &g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Document order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(derive_seed(seed, epoch as u64)).shuffle(&mut order);
    order
}

pub fn train(
    corpus: &[Document],
    queries: &QuerySet,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(corpus, queries, model_cfg, train_cfg, |_, _| {})
}

/// [`train`], calling `on_epoch` with the log entry and current model after every epoch.
pub fn train_with(
    corpus: &[Document],
    queries: &QuerySet,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model),
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    let model = Model::new(model_cfg.clone(), train_cfg.head, queries.clone())?;
    if train_cfg.epochs > 0 && corpus.is_empty() {
        return Err(Error::Config("cannot train on an empty corpus".into()));
    }
    continue_training(model, corpus, train_cfg, &mut on_epoch)
}

/// Runs `train_cfg.epochs` epochs starting from `model`'s current weights.
pub fn continue_training(
    mut model: Model,
    corpus: &[Document],
    train_cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &Model),
) -> Result<TrainOutcome> {
    let mut adam = Adam::new(train_cfg, model.params.num_values());
    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut batch = Vec::with_capacity(train_cfg.batch_size);
    for epoch in 0..train_cfg.epochs {
        let order = epoch_order(corpus.len(), train_cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(train_cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| corpus[i].clone()));
            let (loss, grads) = model.batch_loss_grad(&batch).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            adam.update_params(&mut model.params, &grads);
            if !model.params.all_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / corpus.len() as f64,
        };
        if !entry.mean_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: entry.mean_loss,
            });
        }
        on_epoch(&entry, &model);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}
