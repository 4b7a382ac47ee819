//! Minibatch SGD with momentum.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{backprop_gradients, ModelParams, Sample};
use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm ceiling applied before each step.
    pub clip_norm: f64,
    /// Learning-rate multiplier for the deterministic head's own parameters.
    ///
    /// Its squared-error term is orders of magnitude smaller than the
    /// likelihood term in curvature units, so it needs a larger step.
    pub det_lr_scale: f64,
    /// Learning rate at the last epoch as a fraction of the first (linear decay).
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.003,
            momentum: 0.9,
            batch_size: 32,
            epochs: 12,
            clip_norm: 20.0,
            det_lr_scale: 100.0,
            final_lr_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut bad = Vec::new();
        if !(self.learning_rate > 0.0) {
            bad.push("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bad.push("momentum must be in [0,1)");
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            bad.push("clip_norm must be > 0");
        }
        if !(self.det_lr_scale > 0.0) {
            bad.push("det_lr_scale must be > 0");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            bad.push("final_lr_fraction must be in (0,1]");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(bad.join("; ")))
        }
    }
}

/// Mean training loss over one epoch, by term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub nll: f64,
    pub phi_penalty: f64,
    pub sigma_penalty: f64,
    pub det: f64,
}

/// Trains a copy of `params`; returns it with the per-epoch loss history.
///
/// Shuffling is the only use of `rng`, so identical inputs give bitwise
/// identical weights. Training stops with an error if the epoch loss stays
/// above ten times the initial loss (floored at one unit) for three epochs.
pub fn train<R: Rng + ?Sized>(
    params: &ModelParams,
    data: &[Sample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(ModelParams, Vec<EpochRecord>), ModelError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut p = params.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok((p, history));
    }
    let det_start = p.det_head_start();
    let mut velocity = vec![0.0; p.num_params()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut guard = DivergenceGuard::default();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let frac = if cfg.epochs > 1 {
            epoch as f64 / (cfg.epochs - 1) as f64
        } else {
            0.0
        };
        let lr = cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * frac);
        order.shuffle(rng);
        let mut sums = [0.0; 5];
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let (l, mut g) = backprop_gradients(&p, &batch)?;
            guard.set_initial(l.total);
            let w = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([l.total, l.nll, l.phi_penalty, l.sigma_penalty, l.det]) {
                *s += v * w;
            }
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(ModelError::NumericOverflow("gradient"));
            }
            if norm > cfg.clip_norm {
                let k = cfg.clip_norm / norm;
                g.iter_mut().for_each(|x| *x *= k);
            }
            for (i, (w, (v, gi))) in p
                .weights
                .iter_mut()
                .zip(velocity.iter_mut().zip(&g))
                .enumerate()
            {
                let step = if i >= det_start { lr * cfg.det_lr_scale } else { lr };
                *v = cfg.momentum * *v + gi;
                *w -= step * *v;
            }
        }
        let n = data.len() as f64;
        let rec = EpochRecord {
            epoch,
            learning_rate: lr,
            loss: sums[0] / n,
            nll: sums[1] / n,
            phi_penalty: sums[2] / n,
            sigma_penalty: sums[3] / n,
            det: sums[4] / n,
        };
        history.push(rec);
        guard.observe(epoch, rec.loss)?;
    }
    Ok((p, history))
}

/// Flags three consecutive epochs whose loss exceeds ten times the initial
/// loss. The loss can be negative, so the threshold uses |initial| floored at 1.
#[derive(Debug, Clone, Default)]
pub(crate) struct DivergenceGuard {
    initial: Option<f64>,
    strikes: usize,
}

impl DivergenceGuard {
    pub fn set_initial(&mut self, loss: f64) {
        self.initial.get_or_insert(loss);
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Result<(), ModelError> {
        let init = self.initial.unwrap_or(loss);
        if !loss.is_finite() || loss > 10.0 * init.abs().max(1.0) {
            self.strikes += 1;
            if self.strikes >= 3 {
                return Err(ModelError::TrainingDiverged {
                    epoch,
                    loss,
                    initial: init,
                });
            }
        } else {
            self.strikes = 0;
        }
        Ok(())
    }
}

/// Writes the loss history as CSV with one row per epoch.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], w: W) -> Result<(), ModelError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in history {
        wr.serialize(r).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}
