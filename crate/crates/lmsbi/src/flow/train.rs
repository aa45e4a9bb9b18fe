//! Maximum-likelihood training of the flow on (theta, summary) pairs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::maf::{FlowConfig, MafStack, Standardizer};
use crate::flow::optim::Adam;
use crate::rng::master_rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 50,
            validation_fraction: 0.1,
            patience: 20,
            max_epochs: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Validation(
                "validation_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Validation(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "epoch,train_nll,val_nll")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.train_nll, e.val_nll)?;
        }
        Ok(())
    }
}

/// Deterministic train/validation split of indices.
pub fn split_indices(
    count: usize,
    validation_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    let mut rng = master_rng(seed.wrapping_add(0x5eed));
    idx.shuffle(&mut rng);
    let n_val = ((count as f64 * validation_fraction).ceil() as usize).clamp(1, count - 1);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

fn mean_nll(flow: &MafStack, data: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let mut total = 0.0;
    for (t, c) in data {
        total -= flow.log_prob(t, c)?;
    }
    Ok(total / data.len() as f64)
}

/// Trains a flow on (theta, summary) pairs by minimizing the validation NLL
/// with early stopping; returns the parameters from the best epoch.
pub fn train(
    dataset: &[(Vec<f64>, Vec<f64>)],
    arch: &FlowConfig,
    cfg: &TrainConfig,
) -> Result<(MafStack, TrainLog)> {
    cfg.validate()?;
    if dataset.len() < 50 {
        return Err(Error::Validation(format!(
            "training needs at least 50 pairs, got {}",
            dataset.len()
        )));
    }
    for (i, (t, c)) in dataset.iter().enumerate() {
        if t.len() != arch.dim || c.len() != arch.context_dim {
            return Err(Error::Dimension(format!(
                "pair {i} has shape ({}, {}), expected ({}, {})",
                t.len(),
                c.len(),
                arch.dim,
                arch.context_dim
            )));
        }
    }
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.validation_fraction, cfg.seed);
    let train_set: Vec<(Vec<f64>, Vec<f64>)> =
        train_idx.iter().map(|&i| dataset[i].clone()).collect();
    let val_set: Vec<(Vec<f64>, Vec<f64>)> =
        val_idx.iter().map(|&i| dataset[i].clone()).collect();

    let mut rng = master_rng(cfg.seed);
    let mut flow = MafStack::random(arch, &mut rng);
    // Standardizers fit on the training split only.
    flow.theta_std = Standardizer::fit(
        &train_set.iter().map(|(t, _)| t.clone()).collect::<Vec<_>>(),
    )?;
    flow.ctx_std = Standardizer::fit(
        &train_set.iter().map(|(_, c)| c.clone()).collect::<Vec<_>>(),
    )?;

    let mut opt = Adam::new(flow.param_count(), cfg.learning_rate);
    let mut log = TrainLog::default();

    let initial_val = mean_nll(&flow, &val_set)?;
    log.epochs.push(EpochRecord {
        epoch: 0,
        train_nll: mean_nll(&flow, &train_set)?,
        val_nll: initial_val,
    });
    let mut best_val = initial_val;
    let mut best_params = flow.flatten();
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_nll_acc = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(Vec<f64>, Vec<f64>)> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (nll, grads, _) = flow.nll_and_grads(&batch)?;
            if !nll.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch} on batch indices {chunk:?}"
                )));
            }
            let mut params = flow.flatten();
            opt.step(&mut params, &grads.flatten());
            flow.unflatten(&params);
            train_nll_acc += nll;
            batches += 1;
        }
        let val_nll = mean_nll(&flow, &val_set)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_nll: train_nll_acc / batches as f64,
            val_nll,
        });
        if val_nll < best_val {
            best_val = val_nll;
            best_params = flow.flatten();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    flow.unflatten(&best_params);
    log.best_epoch = best_epoch;
    Ok((flow, log))
}
