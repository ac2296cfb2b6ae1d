//! Local minibatch SGD on one client's shard.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{batch_loss, ItemFeatureTable, UserContext};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::nn::sgd_step;

/// Local training hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Embedding width `d`.
    pub dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Negatives per positive.
    pub negative_ratio: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            dim: 64,
            learning_rate: 0.001,
            batch_size: 32,
            local_epochs: 5,
            negative_ratio: 4,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.batch_size == 0 || self.local_epochs == 0 || self.negative_ratio == 0 {
            return Err(Error::Config(
                "dim, batch_size, local_epochs and negative_ratio must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ParamSet,
    /// Summed loss of each epoch, measured while training.
    pub epoch_losses: Vec<f64>,
    pub examples: usize,
}

impl LocalOutcome {
    pub fn mean_loss(&self) -> f64 {
        match self.epoch_losses.last() {
            Some(l) if self.examples > 0 => l / self.examples as f64,
            _ => 0.0,
        }
    }
}

/// Starts from `global`, runs `local_epochs` epochs of shuffled minibatch SGD
/// on `examples`, and returns the trained copy. `global` is never modified.
pub fn local_train<R: Rng + ?Sized>(
    global: &ParamSet,
    items: &ItemFeatureTable,
    ctx: &UserContext,
    examples: &[(u32, u8)],
    hyper: &Hyper,
    rng: &mut R,
) -> Result<LocalOutcome> {
    local_train_with(global, items, ctx, examples, hyper, rng, |_, _| Ok(()))
}

/// As [`local_train`], calling `after_epoch(params, epoch)` at the end of
/// every epoch.
pub fn local_train_with<R, F>(
    global: &ParamSet,
    items: &ItemFeatureTable,
    ctx: &UserContext,
    examples: &[(u32, u8)],
    hyper: &Hyper,
    rng: &mut R,
    mut after_epoch: F,
) -> Result<LocalOutcome>
where
    R: Rng + ?Sized,
    F: FnMut(&mut ParamSet, usize) -> Result<()>,
{
    if examples.is_empty() {
        return Err(Error::Data("local training needs at least one example".into()));
    }
    let mut params = global.clone();
    let mut tape = ParamSet::zeros(*global.layout());
    let mut order: Vec<(u32, u8)> = examples.to_vec();
    let mut epoch_losses = Vec::with_capacity(hyper.local_epochs);

    for epoch in 0..hyper.local_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            tape.fill(0.0);
            let loss = batch_loss(&params, items, ctx, batch, Some(&mut tape))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "local loss {loss} in epoch {epoch} (learning rate {})",
                    hyper.learning_rate
                )));
            }
            total += loss;
            sgd_step(params.as_mut_slice(), tape.as_slice(), hyper.learning_rate)?;
        }
        epoch_losses.push(total);
        after_epoch(&mut params, epoch)?;
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("local parameters diverged".into()));
    }
    Ok(LocalOutcome {
        params,
        epoch_losses,
        examples: examples.len(),
    })
}
