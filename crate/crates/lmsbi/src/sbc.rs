//! Simulation-based calibration: rank-statistic diagnostics of whether a
//! posterior estimator quantifies uncertainty correctly. Uniform rank
//! histograms indicate calibration; central peaks with thin tails indicate
//! over-concentration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::error::{Error, Result};
use crate::pipeline::{sample_prior, PriorBox};

pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SbcParameterReport {
    /// One rank per completed trial, each in 0..=draws_per_trial.
    pub ranks: Vec<usize>,
    pub bin_counts: Vec<usize>,
    pub chi_square: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SbcReport {
    pub trials: usize,
    pub completed: usize,
    pub skipped: usize,
    pub skipped_messages: Vec<String>,
    pub draws_per_trial: usize,
    pub bins: usize,
    /// Central 99% interval per bin under exact uniformity.
    pub band: Vec<(u64, u64)>,
    pub parameters: Vec<SbcParameterReport>,
}

impl SbcReport {
    /// Bins whose count escapes the uniformity band, per parameter.
    pub fn band_violations(&self) -> Vec<Vec<usize>> {
        self.parameters
            .iter()
            .map(|p| {
                p.bin_counts
                    .iter()
                    .zip(self.band.iter())
                    .enumerate()
                    .filter(|(_, (&c, &(lo, hi)))| (c as u64) < lo || (c as u64) > hi)
                    .map(|(b, _)| b)
                    .collect()
            })
            .collect()
    }

    pub fn write_json<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        serde_json::to_writer_pretty(&mut *w, self).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }

    /// One CSV per parameter: rank bin, count, band_low, band_high.
    pub fn write_histogram_csv<W: std::io::Write>(&self, w: &mut W, param: usize) -> Result<()> {
        let p = self.parameters.get(param).ok_or_else(|| {
            Error::Validation(format!("no parameter {param} in the report"))
        })?;
        writeln!(w, "rank_bin,count,band_low,band_high")?;
        for (b, &count) in p.bin_counts.iter().enumerate() {
            let (lo, hi) = self.band[b];
            writeln!(w, "{b},{count},{lo},{hi}")?;
        }
        Ok(())
    }
}

fn binomial_band(trials: usize, p: f64, coverage: f64) -> Result<(u64, u64)> {
    let n = trials as u64;
    if coverage == 1.0 {
        return Ok((0, n));
    }
    let dist =
        Binomial::new(p, n).map_err(|e| Error::Numeric(format!("binomial band: {e}")))?;
    let tail = (1.0 - coverage) / 2.0;
    // Smallest k with CDF(k) >= tail, and smallest k with CDF(k) >= 1 - tail.
    let quantile = |q: f64| -> u64 {
        let mut k = 0u64;
        while k < n && dist.cdf(k) < q {
            k += 1;
        }
        k
    };
    Ok((quantile(tail), quantile(1.0 - tail)))
}

fn check_band_args(bins: usize, coverage: f64) -> Result<()> {
    if bins < 2 {
        return Err(Error::Validation(format!("bins must be >= 2, got {bins}")));
    }
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Validation(format!(
            "coverage must lie in (0, 1], got {coverage}"
        )));
    }
    Ok(())
}

/// Central `coverage` interval of Binomial(trials, 1/bins), one per bin.
pub fn uniformity_band(trials: usize, bins: usize, coverage: f64) -> Result<Vec<(u64, u64)>> {
    check_band_args(bins, coverage)?;
    let band = binomial_band(trials, 1.0 / bins as f64, coverage)?;
    Ok(vec![band; bins])
}

fn rank_to_bin(rank: usize, draws: usize, bins: usize) -> usize {
    // Ranks live in 0..=draws: draws + 1 equally likely values.
    (rank * bins / (draws + 1)).min(bins - 1)
}

/// Exact per-bin probabilities under uniform ranks. When draws + 1 is not a
/// multiple of bins some bins hold one extra rank value; pretending the
/// bins are equiprobable would bias the chi-square and the band.
fn bin_probabilities(draws: usize, bins: usize) -> Vec<f64> {
    let values = draws + 1;
    let mut counts = vec![0usize; bins];
    for rank in 0..values {
        counts[rank_to_bin(rank, draws, bins)] += 1;
    }
    counts.iter().map(|&c| c as f64 / values as f64).collect()
}

fn chi_square_uniform(
    bin_counts: &[usize],
    completed: usize,
    probs: &[f64],
) -> Result<(f64, f64)> {
    let stat: f64 = bin_counts
        .iter()
        .zip(probs.iter())
        .map(|(&c, &p)| {
            let expected = completed as f64 * p;
            (c as f64 - expected).powi(2) / expected
        })
        .sum();
    let dist = ChiSquared::new((bin_counts.len() - 1) as f64)
        .map_err(|e| Error::Numeric(format!("chi-square: {e}")))?;
    Ok((stat, 1.0 - dist.cdf(stat)))
}

/// Runs simulation-based calibration.
///
/// Per trial: draw theta from the prior, simulate data on the trial's RNG
/// stream, ask the posterior factory for `draws_per_trial` samples given
/// that data, and record the rank of theta among the samples per component.
/// Factory failures skip the trial and are counted in the report.
pub fn run_sbc<Y, S, P>(
    prior: &PriorBox,
    simulate: S,
    posterior_draws: P,
    trials: usize,
    draws_per_trial: usize,
    bins: usize,
    seed: u64,
) -> Result<SbcReport>
where
    Y: Send,
    S: Fn(&[f64], u64, u64) -> Result<Y> + Sync,
    P: Fn(&Y, usize, u64) -> Result<Vec<Vec<f64>>> + Sync,
{
    if trials == 0 {
        return Err(Error::Validation("trials must be >= 1".into()));
    }
    if draws_per_trial < 2 {
        return Err(Error::Validation(
            "draws_per_trial must be >= 2".into(),
        ));
    }
    if bins < 2 || bins > draws_per_trial + 1 {
        return Err(Error::Validation(format!(
            "bins must lie in [2, draws_per_trial + 1], got {bins}"
        )));
    }
    let dim = prior.dim();
    let thetas = sample_prior(prior, trials, seed)?;
    let outcomes: Vec<(usize, std::result::Result<Vec<usize>, String>)> = thetas
        .par_iter()
        .enumerate()
        .map(|(trial, theta)| {
            let run = || -> Result<Vec<usize>> {
                let y = simulate(theta, seed, trial as u64)?;
                let draws = posterior_draws(&y, draws_per_trial, trial as u64)?;
                if draws.len() != draws_per_trial {
                    return Err(Error::Validation(format!(
                        "posterior factory returned {} draws, wanted {draws_per_trial}",
                        draws.len()
                    )));
                }
                Ok((0..dim)
                    .map(|k| draws.iter().filter(|d| d[k] < theta[k]).count())
                    .collect())
            };
            (trial, run().map_err(|e| e.to_string()))
        })
        .collect();

    let mut ranks: Vec<Vec<usize>> = vec![Vec::new(); dim];
    let mut skipped_messages = Vec::new();
    for (trial, out) in outcomes {
        match out {
            Ok(r) => {
                for (k, rk) in r.into_iter().enumerate() {
                    ranks[k].push(rk);
                }
            }
            Err(msg) => skipped_messages.push(format!("trial {trial}: {msg}")),
        }
    }
    let completed = ranks[0].len();
    let skipped = trials - completed;
    if completed == 0 {
        return Err(Error::Training(
            "every calibration trial failed; nothing to aggregate".into(),
        ));
    }
    let probs = bin_probabilities(draws_per_trial, bins);
    let band = probs
        .iter()
        .map(|&p| binomial_band(completed, p, 0.99))
        .collect::<Result<Vec<_>>>()?;
    let parameters = ranks
        .into_iter()
        .map(|r| {
            let mut bin_counts = vec![0usize; bins];
            for &rank in &r {
                bin_counts[rank_to_bin(rank, draws_per_trial, bins)] += 1;
            }
            let (chi_square, p_value) = chi_square_uniform(&bin_counts, completed, &probs)?;
            Ok(SbcParameterReport {
                ranks: r,
                bin_counts,
                chi_square,
                p_value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SbcReport {
        trials,
        completed,
        skipped,
        skipped_messages,
        draws_per_trial,
        bins,
        band,
        parameters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    /// Prior-as-posterior: the factory ignores the data and redraws from
    /// the prior, which is calibrated by construction.
    fn prior_factory_report(seed: u64) -> SbcReport {
        let prior = PriorBox::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let p2 = prior.clone();
        run_sbc(
            &prior,
            |theta, master, trial| {
                let mut rng = stream_rng(master, trial);
                Ok(theta[0] + rng.random_range(-0.1..0.1))
            },
            move |_y: &f64, l, trial| {
                sample_prior(&p2, l, seed.wrapping_mul(1_000_003) ^ (0xFAC7 + trial))
            },
            300,
            100,
            DEFAULT_BINS,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn prior_as_posterior_is_uniform_in_most_seeds() {
        let mut passes = 0;
        let runs = 40;
        for seed in 0..runs {
            let report = prior_factory_report(seed);
            assert_eq!(report.completed, 300);
            for p in &report.parameters {
                assert_eq!(p.bin_counts.iter().sum::<usize>(), report.completed);
                assert!(p.ranks.iter().all(|&r| r <= 100));
            }
            if report.parameters.iter().all(|p| p.p_value > 0.01) {
                passes += 1;
            }
        }
        assert!(
            passes * 100 >= runs * 95,
            "uniformity held in only {passes}/{runs} runs"
        );
    }

    #[test]
    fn analytic_gaussian_posterior_stays_in_the_band() {
        // theta ~ U[-8, 8]; y | theta ~ N(theta, 0.5^2). Under the flat
        // prior the exact posterior is N(y, 0.5^2) truncated to the box.
        let prior = PriorBox::new(vec![-8.0], vec![8.0]).unwrap();
        let sigma = 0.5;
        let report = run_sbc(
            &prior,
            |theta, master, trial| {
                let mut rng = stream_rng(master, trial);
                let noise = Normal::new(0.0, sigma).unwrap();
                Ok(theta[0] + noise.sample(&mut rng))
            },
            move |y: &f64, l, trial| {
                let mut rng = stream_rng(0xABCD, trial);
                let post = Normal::new(*y, sigma).unwrap();
                let mut out = Vec::with_capacity(l);
                while out.len() < l {
                    let d = post.sample(&mut rng);
                    if (-8.0..=8.0).contains(&d) {
                        out.push(vec![d]);
                    }
                }
                Ok(out)
            },
            400,
            100,
            DEFAULT_BINS,
            3,
        )
        .unwrap();
        let violations = report.band_violations();
        assert!(
            violations[0].len() <= 1,
            "bins out of band: {violations:?}"
        );
        assert!(report.parameters[0].p_value > 0.01);
    }

    #[test]
    fn degenerate_posterior_is_rejected() {
        let prior = PriorBox::new(vec![0.0], vec![1.0]).unwrap();
        let report = run_sbc(
            &prior,
            |theta, _, _| Ok(theta[0]),
            |y: &f64, l, _| Ok(vec![vec![*y]; l]),
            300,
            100,
            DEFAULT_BINS,
            8,
        )
        .unwrap();
        // Every posterior draw equals theta, so every rank is 0.
        assert!(report.parameters[0].ranks.iter().all(|&r| r == 0));
        assert!(report.parameters[0].p_value < 1e-6);
        assert!(!report.band_violations()[0].is_empty());
    }

    #[test]
    fn failed_trials_are_skipped_and_counted() {
        let prior = PriorBox::new(vec![0.0], vec![1.0]).unwrap();
        let p2 = prior.clone();
        let report = run_sbc(
            &prior,
            |theta, _, trial| {
                if trial % 5 == 0 {
                    Err(Error::Numeric("synthetic failure".into()))
                } else {
                    Ok(theta[0])
                }
            },
            move |_y: &f64, l, trial| sample_prior(&p2, l, trial),
            100,
            50,
            10,
            1,
        )
        .unwrap();
        assert_eq!(report.skipped, 20);
        assert_eq!(report.completed, 80);
        assert_eq!(report.skipped_messages.len(), 20);
        assert_eq!(
            report.parameters[0].bin_counts.iter().sum::<usize>(),
            80
        );
    }

    #[test]
    fn band_edge_cases() {
        let band = uniformity_band(20, 20, 0.99).unwrap();
        assert!(band.iter().all(|&(lo, hi)| lo <= 1 && hi >= 1));
        let full = uniformity_band(500, 20, 1.0).unwrap();
        assert!(full.iter().all(|&(lo, hi)| lo == 0 && hi == 500));
        assert!(uniformity_band(100, 1, 0.99).is_err());
        assert!(uniformity_band(100, 20, 0.0).is_err());
    }

    #[test]
    fn band_matches_direct_binomial_quantiles() {
        let band = uniformity_band(1000, 20, 0.99).unwrap();
        let dist = Binomial::new(0.05, 1000).unwrap();
        let (lo, hi) = band[0];
        // Central interval: CDF below lo leaves < 0.5% on the left and
        // CDF(hi) covers at least 99.5%.
        if lo > 0 {
            assert!(dist.cdf(lo - 1) < 0.005);
        }
        assert!(dist.cdf(lo) >= 0.005);
        assert!(dist.cdf(hi) >= 0.995);
        assert!(dist.cdf(hi - 1) < 0.995);
    }

    #[test]
    fn histogram_csv_has_the_expected_shape() {
        let report = prior_factory_report(0);
        let mut buf = Vec::new();
        report.write_histogram_csv(&mut buf, 0).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "rank_bin,count,band_low,band_high");
        assert_eq!(lines.len(), 1 + DEFAULT_BINS);
        assert!(report.write_histogram_csv(&mut Vec::new(), 9).is_err());
        let mut json = Vec::new();
        report.write_json(&mut json).unwrap();
        assert!(serde_json::from_slice::<serde_json::Value>(&json).is_ok());
    }
}
