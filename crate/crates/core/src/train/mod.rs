//! Losses, optimizer, the epoch loop with early stopping, fold splits and
//! synthetic data.

mod kfold;
mod loss;
mod optim;
mod synthetic;

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auroc_ovr, ScoredPrediction};
use crate::model::{Objective, Trainable};
use crate::rng;

pub use kfold::{kfold, Split};
pub use loss::{mil_loss, multitask_loss, LossValue, PROB_FLOOR};
pub use optim::AdamLookahead;
pub use synthetic::{generate_synthetic, SyntheticTask, SyntheticTaskSpec};

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_accuracy,val_auroc";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Weight of the patch term in the multitask objective.
    pub lambda: f64,
    /// Bags whose gradients are averaged into one optimizer step.
    pub grad_accumulation: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patience: 10,
            max_epochs: 100,
            lambda: 5.0,
            grad_accumulation: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.patience < 1 || self.lookahead_k < 1 || self.grad_accumulation < 1 {
            return fail("patience, lookahead_k and grad_accumulation must be at least 1".into());
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.lookahead_alpha) {
            return fail(format!("lookahead_alpha must lie in [0, 1], got {}", self.lookahead_alpha));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return fail("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}

/// Stops after `patience` consecutive epochs without a strictly lower
/// validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            waited: 0,
        }
    }

    /// Records an epoch's validation loss; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.waited = 0;
            true
        } else {
            self.waited += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.waited >= self.patience
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// `NaN` when the validation split holds a single class.
    pub val_auroc: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: LossValue,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub predictions: Vec<ScoredPrediction>,
}

/// Slide-level loss, accuracy and AUROC. Predictions run in parallel and are
/// gathered in bag order.
pub fn evaluate<M: Trainable>(model: &M, bags: &[&Bag]) -> Result<Evaluation> {
    if bags.is_empty() {
        return Err(Error::EmptyInput("evaluation split is empty"));
    }
    let probs: Vec<Vec<f64>> = bags.par_iter().map(|b| model.predict(b)).collect::<Result<_>>()?;
    let labels: Vec<usize> = bags.iter().map(|b| b.slide_label).collect();
    let loss = mil_loss(&probs, &labels)?;
    let classes = probs[0].len();
    let predictions = probs
        .into_iter()
        .zip(&labels)
        .map(|(p, &l)| ScoredPrediction::new(p, l))
        .collect::<Result<Vec<_>>>()?;
    let auroc = match auroc_ovr(&predictions, classes) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        loss,
        accuracy: accuracy(&predictions)?,
        auroc,
        predictions,
    })
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

fn add_scaled(acc: &mut [Array2<f64>], grads: &[Array2<f64>], scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.scaled_add(scale, g);
    }
}

/// Trains with one bag per step (or `grad_accumulation` bags averaged) and
/// restores the parameters of the epoch with the lowest validation loss.
///
/// Validation loss is the slide-level log loss, whatever `objective` is.
pub fn fit<M: Trainable>(
    model: &mut M,
    train: &[&Bag],
    validation: &[&Bag],
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training split is empty"));
    }
    if validation.is_empty() {
        return Err(Error::EmptyInput("validation split is empty"));
    }
    let mut opt = AdamLookahead::new(model.params(), cfg)?;
    let mut shuffle = rng::substream(cfg.seed, "shuffle");
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params().to_vec();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut train_loss = 0.0;
        for group in order.chunks(cfg.grad_accumulation) {
            let results: Vec<(f64, Vec<Array2<f64>>)> = group
                .par_iter()
                .map(|&i| model.loss_and_grads(train[i], objective))
                .collect::<Result<_>>()?;
            let mut acc: Vec<Array2<f64>> = model.params().iter().map(|p| Array2::zeros(p.value.dim())).collect();
            let scale = 1.0 / group.len() as f64;
            for (loss, grads) in &results {
                train_loss += loss;
                add_scaled(&mut acc, grads, scale);
            }
            opt.step(model.params_mut(), &acc)?;
            model.project();
        }
        train_loss /= train.len() as f64;

        let eval = evaluate(model, validation)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: eval.loss.value,
            val_accuracy: eval.accuracy,
            val_auroc: eval.auroc.unwrap_or(f64::NAN),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5} acc {:.3} auroc {:.3}",
            record.train_loss,
            record.val_loss,
            record.val_accuracy,
            record.val_auroc
        );
        history.push(record);
        if stopper.observe(epoch, record.val_loss) {
            best_params = model.params().to_vec();
        }
        if stopper.should_stop() {
            break;
        }
    }

    model.params_mut().clone_from_slice(&best_params);
    let (best_epoch, best_val_loss) = stopper.best();
    Ok(FitReport {
        stopped_early: history.len() < cfg.max_epochs,
        history,
        best_epoch,
        best_val_loss,
    })
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    if history.is_empty() {
        w.write_record(HISTORY_HEADER.split(','))?;
    }
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
