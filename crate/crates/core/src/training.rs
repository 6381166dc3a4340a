//! Mini-batch Adam loop shared by the Deep EDMD and MLP models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::dataset::{draw_offset, epoch_windows, gather_batch, NormalizedEpisode, TrainingBatch};
use crate::error::{invalid, Error, Result};
use crate::koopman::{HistoryRow, LossHistory};
use crate::neuralnet::AdamState;

/// Losses above this count as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Prediction horizon of one training window.
    pub p: usize,
    pub tau: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub max_batches: usize,
    /// Stop once the latest batch loss satisfies `|L| ≤ stop_tol`.
    pub stop_tol: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Batches during which `𝒜, ℬ` (or any model's designated block) stay fixed.
    pub freeze_ab_until: usize,
    /// Record a history row every this many batches.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 41,
            tau: 2,
            batch_size: 64,
            max_epochs: 50,
            max_batches: 30_000,
            stop_tol: 1e-9,
            learning_rate: 1e-4,
            seed: 0,
            freeze_ab_until: 0,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.tau == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(invalid("p, tau, batch_size and log_every must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive and finite"));
        }
        if self.stop_tol.is_nan() || self.stop_tol < 0.0 {
            return Err(invalid("stop_tol must be nonnegative"));
        }
        Ok(())
    }
}

/// Normalized training and validation episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainData {
    pub train: Vec<NormalizedEpisode>,
    pub validation: Vec<NormalizedEpisode>,
}

pub(crate) trait Trainable {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, flat: &[f64]) -> Result<()>;
    /// Total loss and its gradient in the layout of [`Trainable::params`].
    fn loss_and_grad(&self, batch: &TrainingBatch) -> Result<(f64, Vec<f64>)>;
    /// Training and validation metric for the history.
    fn metrics(&self, data: &TrainData, cfg: &TrainConfig) -> Result<(f64, f64)>;
    /// Hook run before each batch (random-layer redraws).
    fn before_batch(&mut self, _rng: &mut ChaCha8Rng) {}
    /// Parameters held during the first `freeze_ab_until` batches.
    fn warmup_frozen(&self) -> Range<usize> {
        0..0
    }
}

pub(crate) fn run<T: Trainable>(model: &mut T, data: &TrainData, cfg: &TrainConfig) -> Result<LossHistory> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(invalid("no training episodes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.params();
    let mut adam = AdamState::new(params.len(), cfg.learning_rate);
    let mut history = LossHistory::default();
    let log_row = |m: &T, batch: usize, h: &mut LossHistory| -> Result<()> {
        let (train_recon, val_recon) = m.metrics(data, cfg)?;
        h.rows.push(HistoryRow { batch, train_recon, val_recon });
        Ok(())
    };
    log_row(model, 0, &mut history)?;

    // Initial loss for the stopping test: the first windows at offset zero.
    let probe = epoch_windows(&data.train, cfg.p, cfg.tau, 0);
    if probe.is_empty() {
        return Err(invalid(format!("no episode is long enough for p = {}, tau = {}", cfg.p, cfg.tau)));
    }
    let probe = gather_batch(&data.train, &probe[..cfg.batch_size.min(probe.len())], cfg.p, cfg.tau);
    let mut last = model.loss_and_grad(&probe)?.0;

    let frozen = model.warmup_frozen();
    let mut batch = 0;
    'epochs: for _ in 0..cfg.max_epochs {
        if last.abs() <= cfg.stop_tol || batch >= cfg.max_batches {
            break;
        }
        let offset = draw_offset(&mut rng, cfg.p);
        let mut windows = epoch_windows(&data.train, cfg.p, cfg.tau, offset);
        windows.shuffle(&mut rng);
        for chunk in windows.chunks(cfg.batch_size) {
            if batch >= cfg.max_batches {
                history.epochs += 1;
                break 'epochs;
            }
            model.before_batch(&mut rng);
            let b = gather_batch(&data.train, chunk, cfg.p, cfg.tau);
            let (loss, mut grad) = model.loss_and_grad(&b)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFault { batch, message: format!("non-finite loss or gradient ({loss})") });
            }
            if loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged { batch, loss, history: Box::new(history) });
            }
            if batch < cfg.freeze_ab_until {
                grad[frozen.clone()].iter_mut().for_each(|g| *g = 0.0);
            }
            params = model.params();
            adam.update(&mut params, &grad)?;
            model.set_params(&params)?;
            batch += 1;
            history.batch_loss.push(loss);
            last = loss;
            if batch % cfg.log_every == 0 {
                log_row(model, batch, &mut history)?;
                log::info!("batch {batch}: loss {loss:.4e}, val {:.4e}", history.rows.last().unwrap().val_recon);
            }
        }
        history.epochs += 1;
    }
    if history.rows.last().map(|r| r.batch) != Some(batch) {
        log_row(model, batch, &mut history)?;
    }
    Ok(history)
}
