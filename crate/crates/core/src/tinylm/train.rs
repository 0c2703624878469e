use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{backward_scaled, forward_ids};
use super::ModelParams;
use crate::corpus::TokenSequence;
use crate::error::{GdsError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean per-sample loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch Adam on the token-mean loss. Per-sample gradients may be
/// computed in parallel; they are always summed in batch order.
pub fn train(initial: &ModelParams, corpus: &[TokenSequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        return Err(GdsError::invalid("epochs must be >= 1"));
    }
    if cfg.batch_size == 0 {
        return Err(GdsError::invalid("batch_size must be >= 1"));
    }
    if corpus.is_empty() {
        return Err(GdsError::invalid("empty training corpus"));
    }
    let mut params = initial.clone();
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, ..Default::default() },
        params.slices().iter().map(|s| s.len()),
    );
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng::epoch_stream(cfg.seed, "tinylm.train", epoch));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            let per_sample: Vec<(f64, ModelParams)> = batch
                .par_iter()
                .map(|&i| {
                    let trace = forward_ids(&params, &corpus[i].ids, None)?;
                    let g = backward_scaled(&params, &trace, inv)?;
                    Ok((trace.loss(), g.into_params()))
                })
                .collect::<Result<_>>()
                .map_err(|e| GdsError::invalid(format!("epoch {epoch}, step {step}: {e}")))?;

            let mut iter = per_sample.into_iter();
            let (first_loss, mut grad) = iter.next().expect("non-empty batch");
            loss_sum += first_loss;
            for (loss, g) in iter {
                loss_sum += loss;
                for (acc, x) in grad.slices_mut().into_iter().zip(g.slices()) {
                    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
                }
            }
            adam.step(params.slices_mut(), grad.slices());
            if let Some(path) = params.first_non_finite() {
                return Err(GdsError::NonFinite {
                    context: format!("{path} after epoch {epoch}, step {step}"),
                });
            }
            step += 1;
        }
        let mean = loss_sum / corpus.len() as f64;
        if !mean.is_finite() {
            return Err(GdsError::NonFinite {
                context: format!("training loss at epoch {epoch}"),
            });
        }
        log::debug!("pretrain epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { params, epoch_losses })
}
