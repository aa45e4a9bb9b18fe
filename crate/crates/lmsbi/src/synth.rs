//! Synthetic labour markets with block-structured transition matrices.
//!
//! Occupations are partitioned into contiguous blocks; each row places
//! `intra_block_mass` of its weight uniformly inside its own block and the
//! remainder uniformly outside, then a smoothing term is added everywhere
//! and rows are renormalized.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::master_rng;
use crate::sim::MarketSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub workers_per_occupation: u64,
    pub block_count: usize,
    pub intra_block_mass: f64,
    pub smoothing_epsilon: f64,
    pub p_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 10,
            workers_per_occupation: 100,
            block_count: 2,
            intra_block_mass: 0.8,
            smoothing_epsilon: 1e-3,
            p_max: 0.9,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Validation("n must be >= 1".into()));
        }
        if self.workers_per_occupation == 0 {
            return Err(Error::Validation(
                "workers_per_occupation must be >= 1".into(),
            ));
        }
        if self.block_count == 0 || self.block_count > self.n {
            return Err(Error::Validation(format!(
                "block_count must lie in [1, n], got {} with n = {}",
                self.block_count, self.n
            )));
        }
        if !(self.intra_block_mass > 0.0 && self.intra_block_mass < 1.0) {
            return Err(Error::Validation(format!(
                "intra_block_mass must lie in (0, 1), got {}",
                self.intra_block_mass
            )));
        }
        if self.smoothing_epsilon < 0.0 {
            return Err(Error::Validation(
                "smoothing_epsilon must be nonnegative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_max) {
            return Err(Error::Validation(format!(
                "p_max must lie in [0, 1], got {}",
                self.p_max
            )));
        }
        Ok(())
    }
}

/// Block index per occupation: contiguous equal-size blocks, remainder
/// occupations joining the last block.
fn block_of(i: usize, n: usize, blocks: usize) -> usize {
    let size = n / blocks; // >= 1 since blocks <= n
    (i / size).min(blocks - 1)
}

pub fn generate_market(cfg: &SynthConfig) -> Result<MarketSpec> {
    cfg.validate()?;
    let n = cfg.n;
    let mut rng = master_rng(cfg.seed);

    let z = vec![cfg.workers_per_occupation; n];
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=cfg.p_max)).collect();

    let mut transition = vec![0.0f64; n * n];
    for i in 0..n {
        let bi = block_of(i, n, cfg.block_count);
        let block_size = (0..n).filter(|&j| block_of(j, n, cfg.block_count) == bi).count();
        let off_size = n - block_size;
        let row = &mut transition[i * n..(i + 1) * n];
        for (j, slot) in row.iter_mut().enumerate() {
            let same_block = block_of(j, n, cfg.block_count) == bi;
            *slot = if same_block {
                if off_size == 0 {
                    1.0 / block_size as f64 // single block covers the row
                } else {
                    cfg.intra_block_mass / block_size as f64
                }
            } else {
                (1.0 - cfg.intra_block_mass) / off_size as f64
            };
            *slot += cfg.smoothing_epsilon;
        }
        let sum: f64 = row.iter().sum();
        for slot in row.iter_mut() {
            *slot /= sum;
        }
    }

    let spec = MarketSpec { n, z, p, transition };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_stochastic() {
        let cfg = SynthConfig {
            n: 17,
            block_count: 3,
            seed: 42,
            ..Default::default()
        };
        let spec = generate_market(&cfg).unwrap();
        for i in 0..17 {
            let sum: f64 = spec.transition[i * 17..(i + 1) * 17].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert!(spec.p.iter().all(|&p| (0.0..=0.9).contains(&p)));
        assert_eq!(spec.total_workforce(), 17 * 100);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            n: 10,
            seed: 7,
            ..Default::default()
        };
        let a = generate_market(&cfg).unwrap();
        let b = generate_market(&cfg).unwrap();
        assert_eq!(a.transition, b.transition);
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn intra_block_mass_is_respected_without_smoothing() {
        let cfg = SynthConfig {
            n: 10,
            block_count: 2,
            intra_block_mass: 0.8,
            smoothing_epsilon: 0.0,
            seed: 1,
            ..Default::default()
        };
        let spec = generate_market(&cfg).unwrap();
        let mut total_intra = 0.0;
        for i in 0..10 {
            let bi = block_of(i, 10, 2);
            for j in 0..10 {
                if block_of(j, 10, 2) == bi {
                    total_intra += spec.transition_prob(i, j);
                }
            }
        }
        let mean_intra = total_intra / 10.0;
        assert!(
            (mean_intra - 0.8).abs() < 1e-12,
            "mean intra-block row mass = {mean_intra}"
        );
    }

    #[test]
    fn smoothing_makes_every_entry_positive() {
        let cfg = SynthConfig {
            n: 12,
            block_count: 4,
            smoothing_epsilon: 1e-4,
            seed: 3,
            ..Default::default()
        };
        let spec = generate_market(&cfg).unwrap();
        assert!(spec.transition.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = SynthConfig {
            n: 0,
            ..Default::default()
        };
        assert!(generate_market(&bad).is_err());
        let bad = SynthConfig {
            block_count: 11,
            n: 10,
            ..Default::default()
        };
        assert!(generate_market(&bad).is_err());
    }
}
