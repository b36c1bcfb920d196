use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::engine::{loss_and_grads, sgd_step_in_place};
use super::{evaluate_accuracy, NetworkSpec, NnError, Parameters, Split};
use crate::pruning::{apply_mask, MaskSet};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, batch_size: 32, max_epochs: 50, patience: 5, min_delta: 0.0 }
    }
}

impl TrainConfig {
    /// All constraint violations, for a training split of `train_len` samples.
    pub fn violations(&self, train_len: Option<usize>) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        if let Some(n) = train_len {
            if self.batch_size > n {
                out.push(format!("batch_size {} exceeds training-set size {n}", self.batch_size));
            }
        }
        if self.max_epochs == 0 {
            out.push("max_epochs must be positive".into());
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            out.push(format!("min_delta must be non-negative, got {}", self.min_delta));
        }
        out
    }
}

/// Validation-accuracy early stopping with best-epoch tracking.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    best_epoch: usize,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: None, best_epoch: 0, waited: 0 }
    }

    /// Record the validation accuracy of `epoch`. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val_acc: f64) -> (bool, bool) {
        let improved = match self.best {
            None => true,
            Some(b) => val_acc > b + self.min_delta,
        };
        if improved {
            self.best = Some(val_acc);
            self.best_epoch = epoch;
            self.waited = 0;
        } else {
            self.waited += 1;
        }
        (improved, self.waited > self.patience)
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the best-validation epoch.
    pub params: Parameters,
    pub val_acc: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

/// Mini-batch SGD with validation early stopping.
///
/// The batch order of every epoch is a fresh shuffle drawn from `rng`. Masked
/// weights are zeroed before the first step and never updated.
pub fn train_until_early_stop(
    spec: &NetworkSpec,
    params: &Parameters,
    mask: &MaskSet,
    train: &Split,
    val: &Split,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<TrainOutcome, NnError> {
    if train.is_empty() {
        return Err(NnError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(NnError::EmptySplit("validation"));
    }
    let problems = cfg.violations(Some(train.len()));
    if !problems.is_empty() {
        return Err(NnError::InvalidConfig(problems.join("; ")));
    }
    let mut current = apply_mask(params, mask).map_err(|e| NnError::ShapeMismatch(e.to_string()))?;
    let mut best_params = current.clone();
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (xs, ys) = train.gather(chunk);
            let (_, grads) = loss_and_grads(spec, &current, mask, &xs, &ys)?;
            sgd_step_in_place(&mut current, &grads, mask, cfg.learning_rate);
        }
        epochs_run = epoch;
        let acc = evaluate_accuracy(spec, &current, mask, val)?;
        let (improved, stop) = stopper.observe(epoch, acc);
        if improved {
            best_params = current.clone();
        }
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best_params,
        val_acc: stopper.best().unwrap_or(0.0),
        epochs_run,
        best_epoch: stopper.best_epoch(),
    })
}
