//! Subject-wise cross-validation and the training loop.
//!
//! Each epoch shuffles the training windows, takes mean-reduced Adam steps
//! over mini-batches and then scores the validation windows. The validation
//! loss drives two independent counters: a plateau scheduler that cuts the
//! learning rate by 10x after 5 stagnant epochs, and early stopping after 7.
//! The returned model is the snapshot from the best validation epoch.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::{softmax_cross_entropy, CnnModel, Gradients};
use crate::error::{Error, Result};
use crate::preprocess::Segment;
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub initial_lr: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub k_folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            initial_lr: 0.01,
            lr_factor: 0.1,
            lr_patience: 5,
            min_lr: 1e-6,
            early_stop_patience: 7,
            batch_size: 32,
            k_folds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::InvalidParameter(
                "patience values must be at least 1".into(),
            ));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::InvalidParameter(
                "lr_factor must lie in (0, 1)".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "batch_size must be positive".into(),
            ));
        }
        if self.initial_lr.is_nan() || self.initial_lr <= 0.0 {
            return Err(Error::InvalidParameter(
                "initial_lr must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One cross-validation split over subjects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_subjects: BTreeSet<String>,
    pub val_subjects: BTreeSet<String>,
}

/// Seeded shuffle of the distinct subjects followed by round-robin
/// assignment to `k` folds.
pub fn make_folds(subjects: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let mut distinct: Vec<String> = Vec::new();
    for s in subjects {
        if !distinct.contains(s) {
            distinct.push(s.clone());
        }
    }
    if k == 0 || distinct.len() < k {
        return Err(Error::NotEnoughSubjects(distinct.len(), k));
    }
    distinct.shuffle(&mut seeded(seed));
    let mut buckets: Vec<BTreeSet<String>> = vec![BTreeSet::new(); k];
    for (i, s) in distinct.into_iter().enumerate() {
        buckets[i % k].insert(s);
    }
    Ok((0..k)
        .map(|i| FoldSplit {
            fold_index: i,
            val_subjects: buckets[i].clone(),
            train_subjects: buckets
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, b)| b.iter().cloned())
                .collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_model(model: &CnnModel) -> Self {
        Self::new(model.param_count())
    }
}

/// One bias-corrected Adam update of a flat parameter vector.
pub fn adam_step(params: &mut [f32], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = (*p as f64 - lr * m_hat / (v_hat.sqrt() + state.eps)) as f32;
    }
    Ok(())
}

/// Adam update applied across every layer of a model.
pub fn adam_step_model(
    model: &mut CnnModel,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let mut flat = model.flatten_params();
    adam_step(&mut flat, &grads.flatten(), state, lr)?;
    let mut offset = 0;
    for slice in model.param_slices_mut() {
        let n = slice.len();
        slice.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            lr: initial_lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.initial_lr, cfg.lr_factor, cfg.lr_patience, cfg.min_lr)
    }

    /// Records an epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn update(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stale = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    stale: usize,
    epoch: usize,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
            epoch: 0,
            best_epoch: 0,
        }
    }

    pub fn check(&mut self, val_loss: f64) -> StopDecision {
        self.epoch += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.stale = 0;
            StopDecision::Continue
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 1-based epoch of the lowest loss seen so far, 0 before any update.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub stopped_early: bool,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn stopped_early(&self) -> bool {
        self.epochs.last().is_some_and(|e| e.stopped_early)
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        let best = self.epochs.last()?.best_epoch;
        self.epochs.iter().find(|e| e.epoch == best)
    }

    /// `epoch,train_loss,val_loss,lr` rows with a header line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss", "lr"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
                e.lr.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

fn segment_loss_and_grad(model: &CnnModel, seg: &Segment) -> Result<(f64, Gradients)> {
    let mask = seg.mask.as_ref().ok_or_else(|| {
        Error::InvalidParameter(format!("segment of {} has no label", seg.record_id))
    })?;
    let (logits, cache) = model.forward_train(&seg.signal)?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, mask, seg.valid_len)?;
    let grads = model.backward(&cache, &dlogits)?;
    Ok((loss, grads))
}

/// Mean loss and mean gradient over a batch of labelled windows.
///
/// Windows are evaluated in parallel; the reduction runs in batch order so
/// results do not depend on thread scheduling.
pub fn batch_gradients(model: &CnnModel, batch: &[&Segment]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let parts: Vec<(f64, Gradients)> = batch
        .par_iter()
        .map(|seg| segment_loss_and_grad(model, seg))
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

/// Mean per-window loss.
pub fn mean_loss(model: &CnnModel, segments: &[Segment]) -> Result<f64> {
    if segments.is_empty() {
        return Err(Error::InvalidParameter("no segments to score".into()));
    }
    let losses: Vec<f64> = segments
        .par_iter()
        .map(|seg| {
            let mask = seg.mask.as_ref().ok_or_else(|| {
                Error::InvalidParameter(format!("segment of {} has no label", seg.record_id))
            })?;
            let logits = model.forward(&seg.signal)?;
            Ok(softmax_cross_entropy(&logits, mask, seg.valid_len)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / segments.len() as f64)
}

/// Runs the epoch loop and returns the best-validation snapshot.
pub fn train(
    model: CnnModel,
    train_segments: &[Segment],
    val_segments: &[Segment],
    config: &TrainConfig,
) -> Result<(CnnModel, TrainHistory)> {
    config.validate()?;
    let mut history = TrainHistory::default();
    if config.max_epochs == 0 {
        return Ok((model, history));
    }
    if train_segments.is_empty() || val_segments.is_empty() {
        return Err(Error::InvalidParameter(
            "training and validation sets must be non-empty".into(),
        ));
    }

    let mut model = model;
    let mut best = model.clone();
    let mut adam = AdamState::for_model(&model);
    let mut scheduler = PlateauScheduler::from_config(config);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut order: Vec<usize> = (0..train_segments.len()).collect();

    for epoch in 1..=config.max_epochs {
        let lr = scheduler.lr;
        order.sort_unstable();
        order.shuffle(&mut seeded(derive_seed(config.seed, epoch as u64)));

        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Segment> = chunk.iter().map(|&i| &train_segments[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("batch loss {loss} at lr {lr}"),
                });
            }
            loss_sum += loss * batch.len() as f64;
            adam_step_model(&mut model, &grads, &mut adam, lr)?;
        }
        let train_loss = loss_sum / train_segments.len() as f64;

        let val_loss = mean_loss(&model, val_segments)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation loss {val_loss}, train loss {train_loss}"),
            });
        }
        scheduler.update(val_loss);
        let decision = stopper.check(val_loss);
        if stopper.best_epoch() == epoch {
            best = model.clone();
        }
        log::debug!(
            "epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:e} best {}",
            stopper.best_epoch()
        );
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            stopped_early: decision == StopDecision::Stop,
            best_epoch: stopper.best_epoch(),
        });
        if decision == StopDecision::Stop {
            break;
        }
    }
    Ok((best, history))
}
