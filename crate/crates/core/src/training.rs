//! Mini-batch training with early stopping, and MC-dropout intervals.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, DetRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub batch_size: usize,
    /// Share of the training records held out for early stopping.
    pub validation_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            patience: 10,
            batch_size: 32,
            validation_fraction: 0.2,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
}

/// Shuffled (train, validation) split of `0..n`.
pub fn holdout(n: usize, fraction: f64, rng: &mut DetRng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Generic early-stopping loop.
///
/// `step` runs one optimizer update on a batch of training indices and
/// returns the batch loss; `validate` returns the validation loss (dropout
/// off). The model with the lowest validation loss is restored at the end.
/// With no validation data the training loss is monitored instead.
pub fn fit_early_stopping<M: Clone>(
    model: &mut M,
    train: &[usize],
    cfg: &TrainConfig,
    rng: &mut DetRng,
    mut step: impl FnMut(&mut M, &[usize], &mut DetRng) -> Result<f64>,
    mut validate: impl FnMut(&M) -> Result<Option<f64>>,
) -> Result<FitReport> {
    cfg.validate()?;
    let mut order = train.to_vec();
    let mut report = FitReport {
        best_validation_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best = model.clone();
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let loss = step(model, batch, rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            total += loss * batch.len() as f64;
        }
        let train_loss = total / order.len().max(1) as f64;
        report.train_loss.push(train_loss);
        let monitored = validate(model)?.unwrap_or(train_loss);
        report.validation_loss.push(monitored);
        report.epochs_run = epoch + 1;
        if monitored < report.best_validation_loss {
            report.best_validation_loss = monitored;
            report.best_epoch = epoch + 1;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    *model = best;
    Ok(report)
}

pub const MIN_MC_SAMPLES: usize = 20;
pub const DEFAULT_CI_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionWithCi {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub samples: usize,
    pub level: f64,
}

/// Linear-interpolated empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summarize MC samples (one vector per sample) elementwise.
pub fn summarize_samples(draws: &[Vec<f64>], level: f64) -> Result<Vec<PredictionWithCi>> {
    if draws.len() < MIN_MC_SAMPLES {
        return Err(Error::Config(format!(
            "at least {MIN_MC_SAMPLES} MC-dropout samples are required, got {}",
            draws.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("CI level {level} outside (0, 1)")));
    }
    let width = draws[0].len();
    (0..width)
        .map(|j| {
            let mut col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("MC sample for output {j}")));
            }
            col.sort_by(f64::total_cmp);
            // Identical draws (no active dropout) give an exact degenerate interval.
            let point = if col[0] == col[col.len() - 1] {
                col[0]
            } else {
                col.iter().sum::<f64>() / col.len() as f64
            };
            let lower = quantile_sorted(&col, (1.0 - level) / 2.0).min(point);
            let upper = quantile_sorted(&col, (1.0 + level) / 2.0).max(point);
            Ok(PredictionWithCi {
                point,
                lower,
                upper,
                samples: draws.len(),
                level,
            })
        })
        .collect()
}

/// Run `f` with dropout active `samples` times and summarize.
pub fn predict_with_ci(
    samples: usize,
    level: f64,
    rng: &mut DetRng,
    mut f: impl FnMut(&mut DetRng) -> Result<Vec<f64>>,
) -> Result<Vec<PredictionWithCi>> {
    if samples < MIN_MC_SAMPLES {
        return Err(Error::Config(format!(
            "at least {MIN_MC_SAMPLES} MC-dropout samples are required, got {samples}"
        )));
    }
    let draws = (0..samples).map(|_| f(rng)).collect::<Result<Vec<_>>>()?;
    summarize_samples(&draws, level)
}
