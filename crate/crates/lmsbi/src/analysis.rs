//! Post-inference analytics: posterior correlation structure, highest
//! density region subsampling, shock-response pattern clustering, and the
//! scalability benchmark harness.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{pearson, Mat};
use crate::pipeline::{
    fit_posterior, run_simulation_batch, sample_prior, FitOptions, LmSimulator, MafPosterior,
    PriorBox,
};
use crate::rng::{master_rng, stream_rng};
use crate::sim::{simulate_with_rng, BehaviouralParams, MarketSpec, SimulationConfig};
use crate::synth::{generate_market, SynthConfig};

/// Pearson correlation matrix of posterior samples. Zero-variance columns
/// get correlation 0 off the diagonal; their names are returned as warnings.
pub fn posterior_correlation(samples: &[Vec<f64>]) -> Result<(Mat, Vec<String>)> {
    if samples.len() < 2 {
        return Err(Error::Validation(format!(
            "correlation needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Dimension("ragged sample matrix".into()));
    }
    let mut corr = Mat::zeros(d, d);
    let mut warnings = Vec::new();
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|j| samples.iter().map(|s| s[j]).collect())
        .collect();
    for i in 0..d {
        corr.set(i, i, 1.0);
        for j in (i + 1)..d {
            let r = match pearson(&cols[i], &cols[j]) {
                Some(r) => r,
                None => {
                    warnings.push(format!(
                        "columns {i} and {j}: zero variance, correlation reported as 0"
                    ));
                    0.0
                }
            };
            corr.set(i, j, r);
            corr.set(j, i, r);
        }
    }
    Ok((corr, warnings))
}

/// Highest density region subsample: draw 20x the requested count from the
/// posterior and keep the `count` points with the largest log-density.
/// Ties break on draw order, so the selection is a deterministic function
/// of the oversample set.
pub fn hdr_sample(posterior: &MafPosterior, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::Validation("count must be >= 1".into()));
    }
    let pool = posterior.sample(20 * count, seed)?;
    let mut scored: Vec<(f64, usize)> = pool
        .iter()
        .enumerate()
        .map(|(i, theta)| Ok((posterior.log_prob(theta)?, i)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored[..count].iter().map(|&(_, i)| pool[i].clone()).collect())
}

/// Per-run shock-response features, all rates per worker per step over the
/// post-shock window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternFeatures {
    /// Mean over steps of total employment gains.
    pub gain_rate: f64,
    /// Mean over steps of total employment losses.
    pub loss_rate: f64,
    /// Mean over steps of min(gain, loss): how strongly gains and losses
    /// co-occur within the same step.
    pub co_occurrence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    /// One label in 0..k per completed run, in input order.
    pub labels: Vec<usize>,
    /// Feature-space centroids, one row per cluster.
    pub centroids: Vec<PatternFeatures>,
    pub features: Vec<PatternFeatures>,
    /// Indices of parameter sets whose simulation failed, with messages.
    pub failures: Vec<(usize, String)>,
}

impl ClusterReport {
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "run,label,gain_rate,loss_rate,co_occurrence")?;
        for (i, (label, f)) in self.labels.iter().zip(self.features.iter()).enumerate() {
            writeln!(
                w,
                "{i},{label},{},{},{}",
                f.gain_rate, f.loss_rate, f.co_occurrence
            )?;
        }
        Ok(())
    }
}

fn shock_features(
    spec: &MarketSpec,
    theta: &[f64],
    cfg: &SimulationConfig,
    stream: u64,
) -> Result<PatternFeatures> {
    let params = BehaviouralParams::from_slice(theta)?;
    let mut rng = stream_rng(cfg.seed, stream);
    let traj = simulate_with_rng(spec, &params, cfg, &mut rng)?;
    let n = spec.n;
    let total: f64 = spec.z.iter().map(|&z| z as f64).sum();
    let start = cfg.t_shock.unwrap_or(0).min(traj.steps.saturating_sub(1));
    let mut gain_acc = 0.0;
    let mut loss_acc = 0.0;
    let mut co_acc = 0.0;
    let mut steps = 0usize;
    for t in (start + 1)..traj.steps {
        let prev = traj.row(t - 1);
        let cur = traj.row(t);
        let mut gain = 0.0;
        let mut loss = 0.0;
        for i in 0..n {
            let de = cur[i] - prev[i];
            if de > 0.0 {
                gain += de;
            } else {
                loss -= de;
            }
        }
        gain_acc += gain / total;
        loss_acc += loss / total;
        co_acc += (gain / total).min(loss / total);
        steps += 1;
    }
    if steps == 0 {
        return Err(Error::Validation(
            "no post-shock steps to extract features from".into(),
        ));
    }
    let s = steps as f64;
    Ok(PatternFeatures {
        gain_rate: gain_acc / s,
        loss_rate: loss_acc / s,
        co_occurrence: co_acc / s,
    })
}

/// Seeded k-means on standardized rows: best of `restarts` random
/// initializations by within-cluster sum of squares.
fn kmeans(rows: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>) {
    let n = rows.len();
    let d = rows[0].len();
    // Standardize per column so no feature dominates the distance.
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for j in 0..d {
        mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
        std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let pts: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect())
        .collect();
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
    };

    let mut rng = master_rng(seed);
    let mut best: Option<(f64, Vec<usize>, Vec<Vec<f64>>)> = None;
    use rand::seq::index::sample as index_sample;
    for _ in 0..restarts {
        let mut centers: Vec<Vec<f64>> = if n >= k {
            index_sample(&mut rng, n, k).iter().map(|i| pts[i].clone()).collect()
        } else {
            (0..k).map(|i| pts[i % n].clone()).collect()
        };
        let mut labels = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, p) in pts.iter().enumerate() {
                let l = (0..k)
                    .min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b])))
                    .unwrap();
                if l != labels[i] {
                    labels[i] = l;
                    changed = true;
                }
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = pts
                    .iter()
                    .zip(labels.iter())
                    .filter(|(_, &l)| l == c)
                    .map(|(p, _)| p)
                    .collect();
                if members.is_empty() {
                    continue; // empty clusters keep their centroid
                }
                for j in 0..d {
                    center[j] = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = pts
            .iter()
            .zip(labels.iter())
            .map(|(p, &l)| dist2(p, &centers[l]))
            .sum();
        if best.as_ref().map_or(true, |(b, _, _)| inertia < *b) {
            best = Some((inertia, labels, centers));
        }
    }
    let (_, labels, centers) = best.unwrap();
    // Report centroids back on the original feature scale.
    let centers = centers
        .into_iter()
        .map(|c| (0..d).map(|j| c[j] * std[j] + mean[j]).collect())
        .collect();
    (labels, centers)
}

/// Simulates each parameter set with r overridden to `fixed_r`, extracts
/// shock-response features, and clusters them with seeded k-means (k = 3,
/// 50 restarts). Simulation failures are excluded and reported.
pub fn pattern_cluster(
    spec: &MarketSpec,
    cfg: &SimulationConfig,
    parameter_sets: &[Vec<f64>],
    fixed_r: f64,
) -> Result<ClusterReport> {
    if parameter_sets.is_empty() {
        return Err(Error::Validation("no parameter sets to cluster".into()));
    }
    let mut features = Vec::new();
    let mut failures = Vec::new();
    for (i, theta) in parameter_sets.iter().enumerate() {
        let mut t = theta.clone();
        if t.len() >= 3 {
            t[2] = fixed_r;
        }
        match shock_features(spec, &t, cfg, i as u64) {
            Ok(f) => features.push(f),
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    if features.is_empty() {
        return Err(Error::Training(
            "every pattern simulation failed; nothing to cluster".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = features
        .iter()
        .map(|f| vec![f.gain_rate, f.loss_rate, f.co_occurrence])
        .collect();
    let (labels, centers) = kmeans(&rows, 3, 50, cfg.seed ^ 0xC1u64);
    let centroids = centers
        .into_iter()
        .map(|c| PatternFeatures {
            gain_rate: c[0],
            loss_rate: c[1],
            co_occurrence: c[2],
        })
        .collect();
    Ok(ClusterReport {
        labels,
        centroids,
        features,
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPhase {
    Simulation,
    Training,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRecord {
    pub n: usize,
    pub phase: BenchPhase,
    pub rep: usize,
    pub seconds: f64,
    /// Epochs until early stopping; simulation records carry None.
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// True when fewer than two distinct x values were available.
    pub degenerate: bool,
}

/// Ordinary least squares y = a + b x with R^2.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Validation("fit needs matching nonempty data".into()));
    }
    let distinct = {
        let mut v = xs.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        v.dedup();
        v.len()
    };
    if distinct < 2 {
        return Ok(LinearFit {
            slope: f64::NAN,
            intercept: f64::NAN,
            r_squared: f64::NAN,
            degenerate: true,
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
        degenerate: false,
    })
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Occupation counts, ascending.
    pub n_values: Vec<usize>,
    pub sim_repetitions: usize,
    pub train_repetitions: usize,
    /// Simulations per training dataset.
    pub train_sims: usize,
    pub horizon: usize,
    pub workers_per_occupation: u64,
    pub fit: FitOptions,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_values: vec![10, 35, 60, 110, 160],
            sim_repetitions: 25,
            train_repetitions: 1,
            train_sims: 100,
            horizon: 100,
            workers_per_occupation: 100,
            fit: FitOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    /// Mean simulation time against n.
    pub simulation_fit: LinearFit,
    /// Pearson correlation between training wall time and epochs, when at
    /// least two training records exist and both vary.
    pub training_time_epochs_pearson: Option<f64>,
    pub failures: Vec<String>,
}

impl BenchReport {
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "n,phase,rep,seconds,epochs")?;
        for r in &self.records {
            let phase = match r.phase {
                BenchPhase::Simulation => "simulation",
                BenchPhase::Training => "training",
            };
            let epochs = r.epochs.map_or(String::new(), |e| e.to_string());
            writeln!(w, "{},{phase},{},{},{epochs}", r.n, r.rep, r.seconds)?;
        }
        Ok(())
    }

    pub fn write_json<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        serde_json::to_writer_pretty(&mut *w, self).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }
}

/// Times the simulation and training phases over a range of market sizes.
/// Cells run sequentially for timing isolation. Per-cell failures are
/// recorded; the fit uses whatever completed.
pub fn bench_scaling(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.n_values.is_empty() || cfg.n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(
            "n_values must be nonempty and strictly ascending".into(),
        ));
    }
    if cfg.sim_repetitions == 0 {
        return Err(Error::Validation("sim_repetitions must be >= 1".into()));
    }
    let prior = PriorBox::behavioural();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (cell, &n) in cfg.n_values.iter().enumerate() {
        let spec = match generate_market(&SynthConfig {
            n,
            workers_per_occupation: cfg.workers_per_occupation,
            block_count: (n / 5).max(1),
            seed: cfg.seed.wrapping_add(cell as u64),
            ..Default::default()
        }) {
            Ok(s) => s,
            Err(e) => {
                failures.push(format!("n={n}: market generation failed: {e}"));
                continue;
            }
        };
        let sim_cfg = SimulationConfig {
            horizon: cfg.horizon,
            t_shock: Some(cfg.horizon / 2),
            seed: cfg.seed,
            ..Default::default()
        };
        let theta = [0.016, 0.012, 0.55];
        let params = BehaviouralParams::from_slice(&theta)?;
        for rep in 0..cfg.sim_repetitions {
            let mut rng = stream_rng(cfg.seed, (cell * cfg.sim_repetitions + rep) as u64);
            let start = Instant::now();
            match simulate_with_rng(&spec, &params, &sim_cfg, &mut rng) {
                Ok(_) => records.push(BenchRecord {
                    n,
                    phase: BenchPhase::Simulation,
                    rep,
                    seconds: start.elapsed().as_secs_f64(),
                    epochs: None,
                }),
                Err(e) => failures.push(format!("n={n} sim rep {rep}: {e}")),
            }
        }
        for rep in 0..cfg.train_repetitions {
            let run = || -> Result<(f64, usize)> {
                let thetas = sample_prior(&prior, cfg.train_sims, cfg.seed.wrapping_add(rep as u64))?;
                let simulator = LmSimulator {
                    spec: spec.clone(),
                    cfg: sim_cfg.clone(),
                };
                let batch = run_simulation_batch(&simulator, &thetas, cfg.seed);
                let mut opts = cfg.fit.clone();
                opts.train.seed = cfg.seed.wrapping_add(rep as u64);
                let start = Instant::now();
                let builder = fit_posterior(&batch, &opts)?;
                Ok((start.elapsed().as_secs_f64(), builder.log.epochs.len() - 1))
            };
            match run() {
                Ok((seconds, epochs)) => records.push(BenchRecord {
                    n,
                    phase: BenchPhase::Training,
                    rep,
                    seconds,
                    epochs: Some(epochs),
                }),
                Err(e) => failures.push(format!("n={n} train rep {rep}: {e}")),
            }
        }
    }
    let sim_means: Vec<(f64, f64)> = cfg
        .n_values
        .iter()
        .filter_map(|&n| {
            let times: Vec<f64> = records
                .iter()
                .filter(|r| r.n == n && r.phase == BenchPhase::Simulation)
                .map(|r| r.seconds)
                .collect();
            if times.is_empty() {
                None
            } else {
                Some((n as f64, times.iter().sum::<f64>() / times.len() as f64))
            }
        })
        .collect();
    let xs: Vec<f64> = sim_means.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = sim_means.iter().map(|p| p.1).collect();
    let simulation_fit = linear_fit(&xs, &ys)?;
    let train: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.phase == BenchPhase::Training)
        .map(|r| (r.seconds, r.epochs.unwrap_or(0) as f64))
        .collect();
    let training_time_epochs_pearson = if train.len() >= 2 {
        pearson(
            &train.iter().map(|p| p.0).collect::<Vec<_>>(),
            &train.iter().map(|p| p.1).collect::<Vec<_>>(),
        )
    } else {
        None
    };
    Ok(BenchReport {
        records,
        simulation_fit,
        training_time_epochs_pearson,
        failures,
    })
}

/// Minimal self-contained SVG scatter with an optional fitted line.
pub fn scatter_svg(
    points: &[(f64, f64)],
    fit: Option<&LinearFit>,
    x_label: &str,
    y_label: &str,
) -> Result<String> {
    if points.is_empty() {
        return Err(Error::Validation("no points to plot".into()));
    }
    let (w, h, m) = (640.0, 420.0, 56.0);
    let min_x = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).min(0.0);
    let max_y = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let span_x = (max_x - min_x).max(f64::MIN_POSITIVE);
    let span_y = (max_y - min_y).max(f64::MIN_POSITIVE);
    let sx = |x: f64| m + (x - min_x) / span_x * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - min_y) / span_y * (h - 2.0 * m);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - m,
        w - m,
        h - m,
        h - m
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">{x_label}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\" \
         transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        w / 2.0,
        h - 12.0,
        h / 2.0,
        h / 2.0
    ));
    if let Some(fit) = fit {
        if !fit.degenerate {
            let y0 = fit.intercept + fit.slope * min_x;
            let y1 = fit.intercept + fit.slope * max_x;
            s.push_str(&format!(
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"steelblue\" \
                 stroke-width=\"1.5\"/>\n",
                sx(min_x),
                sy(y0),
                sx(max_x),
                sy(y1)
            ));
        }
    }
    for &(x, y) in points {
        s.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"3.5\" fill=\"crimson\"/>\n",
            sx(x),
            sy(y)
        ));
    }
    s.push_str("</svg>\n");
    Ok(s)
}
