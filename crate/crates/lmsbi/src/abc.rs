//! Rejection ABC baseline. A likelihood-free oracle used to validate the
//! neural estimator on problems where both should agree.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{sample_prior, PriorBox};

/// How accepted draws are selected from the distance-ranked pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptRule {
    /// Accept draws with standardized distance below a fixed threshold.
    Epsilon(f64),
    /// Accept the given fraction of closest draws.
    Quantile(f64),
}

/// Per-coordinate summary standardization applied before the distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardization {
    /// Median absolute deviation, robust to heavy tails.
    Mad,
    MeanStd,
}

#[derive(Debug, Clone)]
pub struct AbcConfig {
    pub draws: usize,
    pub rule: AcceptRule,
    pub standardization: Standardization,
    pub seed: u64,
}

impl Default for AbcConfig {
    fn default() -> Self {
        AbcConfig {
            draws: 10_000,
            rule: AcceptRule::Quantile(0.01),
            standardization: Standardization::Mad,
            seed: 0,
        }
    }
}

impl AbcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::Validation("draws must be >= 1".into()));
        }
        match self.rule {
            AcceptRule::Epsilon(e) if !(e > 0.0) => Err(Error::Validation(format!(
                "epsilon must be positive, got {e}"
            ))),
            AcceptRule::Quantile(q) if !(q > 0.0 && q <= 1.0) => Err(Error::Validation(
                format!("acceptance quantile must lie in (0, 1], got {q}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AbcResult {
    /// Accepted parameter draws, an empirical posterior sample.
    pub accepted: Vec<Vec<f64>>,
    /// Standardized distances of the accepted draws, ascending.
    pub distances: Vec<f64>,
    /// Distance threshold actually applied.
    pub threshold: f64,
    pub total_draws: usize,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Per-coordinate scale of the simulated summaries. Zero scales fall back
/// to 1 so constant coordinates do not blow up the distance.
fn summary_scales(summaries: &[Vec<f64>], standardization: Standardization) -> Vec<f64> {
    let k = summaries[0].len();
    let n = summaries.len();
    (0..k)
        .map(|j| {
            let scale = match standardization {
                Standardization::Mad => {
                    let mut col: Vec<f64> = summaries.iter().map(|s| s[j]).collect();
                    col.sort_by(|a, b| a.total_cmp(b));
                    let med = median(&col);
                    let mut dev: Vec<f64> = col.iter().map(|x| (x - med).abs()).collect();
                    dev.sort_by(|a, b| a.total_cmp(b));
                    median(&dev)
                }
                Standardization::MeanStd => {
                    let mean: f64 = summaries.iter().map(|s| s[j]).sum::<f64>() / n as f64;
                    let var: f64 =
                        summaries.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / n as f64;
                    var.sqrt()
                }
            };
            if scale > 0.0 {
                scale
            } else {
                1.0
            }
        })
        .collect()
}

/// Rejection ABC against an observed summary vector.
///
/// `simulate_summary` maps (theta, master seed, draw index) to the summary
/// of one simulated dataset; it must use the index to decorrelate draws.
pub fn rejection_abc<F>(
    prior: &PriorBox,
    observed_summary: &[f64],
    simulate_summary: F,
    cfg: &AbcConfig,
) -> Result<AbcResult>
where
    F: Fn(&[f64], u64, u64) -> Result<Vec<f64>> + Sync,
{
    cfg.validate()?;
    let thetas = sample_prior(prior, cfg.draws, cfg.seed)?;
    let sims: Vec<Result<Vec<f64>>> = thetas
        .par_iter()
        .enumerate()
        .map(|(i, t)| simulate_summary(t, cfg.seed, i as u64))
        .collect();
    let mut summaries = Vec::with_capacity(cfg.draws);
    for s in sims {
        let s = s?;
        if s.len() != observed_summary.len() {
            return Err(Error::Dimension(format!(
                "simulated summary has {} coordinates, observed has {}",
                s.len(),
                observed_summary.len()
            )));
        }
        summaries.push(s);
    }
    let scales = summary_scales(&summaries, cfg.standardization);
    let mut ranked: Vec<(f64, usize)> = summaries
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let d2: f64 = s
                .iter()
                .zip(observed_summary.iter())
                .zip(scales.iter())
                .map(|((a, b), sc)| ((a - b) / sc).powi(2))
                .sum();
            (d2.sqrt(), i)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let (kept, threshold) = match cfg.rule {
        AcceptRule::Epsilon(eps) => {
            let kept: Vec<_> = ranked.iter().take_while(|(d, _)| *d <= eps).collect();
            if kept.is_empty() {
                return Err(Error::Validation(format!(
                    "no draws accepted under epsilon {eps}; smallest distance was {:.6}. \
                     Consider the quantile rule instead",
                    ranked[0].0
                )));
            }
            (kept, eps)
        }
        AcceptRule::Quantile(q) => {
            let count = ((cfg.draws as f64 * q).ceil() as usize).clamp(1, cfg.draws);
            let kept: Vec<_> = ranked.iter().take(count).collect();
            let threshold = kept.last().unwrap().0;
            (kept, threshold)
        }
    };
    Ok(AbcResult {
        accepted: kept.iter().map(|(_, i)| thetas[*i].clone()).collect(),
        distances: kept.iter().map(|(d, _)| *d).collect(),
        threshold,
        total_draws: cfg.draws,
    })
}
