//! End-to-end neural posterior estimation: prior sampling, parallel
//! simulation batches, summary computation, estimator training, and
//! amortized posterior access.

use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::checkpoint::{Checkpoint, ConditioningSection, EmbeddingSection};
use crate::flow::maf::{FlowConfig, MafStack, Standardizer};
use crate::flow::optim::Adam;
use crate::flow::train::{split_indices, train, EpochRecord, TrainConfig, TrainLog};
use crate::mat::Mat;
use crate::rng::{master_rng, stream_rng, Rng};
use crate::sim::{simulate_with_rng, BehaviouralParams, MacroTrajectory, MarketSpec, SimulationConfig};
use crate::summaries::gru::{embed, RecurrentEmbedding};
use crate::summaries::{handcrafted, reshape_macro, SummaryMode};

/// Uniform box prior over the parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl PriorBox {
    /// The prior over (delta_u, delta_v, r) used throughout.
    pub fn behavioural() -> Self {
        PriorBox {
            lower: vec![0.0, 0.0, 0.0],
            upper: vec![0.02, 0.02, 1.0],
        }
    }

    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = PriorBox { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::Validation(
                "prior bounds must be nonempty and of equal length".into(),
            ));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(self.upper.iter()).enumerate() {
            if !(lo < hi) {
                return Err(Error::Validation(format!(
                    "prior dimension {i} has lower {lo} >= upper {hi}"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(x, (lo, hi))| x >= lo && x <= hi)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(self.upper.iter())
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }
}

/// Independent uniform draws inside the prior box.
pub fn sample_prior(prior: &PriorBox, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    prior.validate()?;
    if count == 0 {
        return Err(Error::Validation("count must be >= 1".into()));
    }
    let mut rng = master_rng(seed);
    Ok((0..count)
        .map(|_| {
            prior
                .lower
                .iter()
                .zip(prior.upper.iter())
                .map(|(&lo, &hi)| rng.random_range(lo..hi))
                .collect()
        })
        .collect())
}

/// Anything that can turn a parameter vector into a macro trajectory.
/// Implementations must be deterministic in (theta, stream seed).
pub trait Simulator: Sync {
    fn simulate(&self, theta: &[f64], master_seed: u64, index: u64) -> Result<MacroTrajectory>;
    fn occupations(&self) -> usize;
}

/// The labour-market model as a [`Simulator`].
pub struct LmSimulator {
    pub spec: MarketSpec,
    pub cfg: SimulationConfig,
}

impl Simulator for LmSimulator {
    fn simulate(&self, theta: &[f64], master_seed: u64, index: u64) -> Result<MacroTrajectory> {
        let params = BehaviouralParams::from_slice(theta)?;
        let mut rng = stream_rng(master_seed, index);
        simulate_with_rng(&self.spec, &params, &self.cfg, &mut rng)
    }

    fn occupations(&self) -> usize {
        self.spec.n
    }
}

/// One completed simulation with its bookkeeping.
#[derive(Debug, Clone)]
pub struct SimRecord {
    pub index: usize,
    pub theta: Vec<f64>,
    pub trajectory: MacroTrajectory,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone)]
pub struct SimFailure {
    pub index: usize,
    pub theta: Vec<f64>,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct SimBatch {
    pub records: Vec<SimRecord>,
    pub failures: Vec<SimFailure>,
}

/// Runs one simulation per theta on stream (master_seed, index).
/// Work-stealing parallel; results are ordered by index and therefore
/// independent of execution order. Failures are recorded, not fatal.
pub fn run_simulation_batch(
    simulator: &dyn Simulator,
    thetas: &[Vec<f64>],
    master_seed: u64,
) -> SimBatch {
    let results: Vec<_> = thetas
        .par_iter()
        .enumerate()
        .map(|(i, theta)| {
            let start = Instant::now();
            let out = simulator.simulate(theta, master_seed, i as u64);
            (i, theta.clone(), out, start.elapsed().as_secs_f64())
        })
        .collect();
    let mut batch = SimBatch::default();
    for (index, theta, out, wall_time_secs) in results {
        match out {
            Ok(trajectory) => batch.records.push(SimRecord {
                index,
                theta,
                trajectory,
                wall_time_secs,
            }),
            Err(e) => batch.failures.push(SimFailure {
                index,
                theta,
                message: e.to_string(),
            }),
        }
    }
    batch
}

/// Which summary pipeline conditions the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryChoice {
    Handcrafted,
    Learned,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub summary: SummaryChoice,
    /// Handcrafted reduction mode (ignored in learned mode).
    pub mode: SummaryMode,
    /// Hidden size of the learned embedding.
    pub embedding_hidden: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub train: TrainConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            summary: SummaryChoice::Handcrafted,
            mode: SummaryMode::PerSeries,
            embedding_hidden: 32,
            flow_layers: 5,
            flow_hidden: 50,
            train: TrainConfig::default(),
        }
    }
}

/// A trained estimator that still needs an observation to condition on.
#[derive(Debug, Clone)]
pub struct PosteriorBuilder {
    pub flow: MafStack,
    pub summary: SummaryChoice,
    pub mode: SummaryMode,
    /// Learned mode: the embedding and the per-column input standardizer.
    pub embedding: Option<(RecurrentEmbedding, Standardizer)>,
    pub log: TrainLog,
}

/// Amortized posterior conditioned on one observation.
#[derive(Debug, Clone)]
pub struct MafPosterior {
    pub flow: MafStack,
    pub summary: SummaryChoice,
    pub mode: SummaryMode,
    pub embedding: Option<(RecurrentEmbedding, Standardizer)>,
    pub prior: PriorBox,
    /// The observation's summary, fixed as flow context.
    pub context: Vec<f64>,
    /// Fraction of flow mass outside the prior box, estimated at
    /// conditioning time from probe draws.
    pub leakage: f64,
}

fn trajectory_summary_handcrafted(traj: &MacroTrajectory, mode: SummaryMode) -> Result<Vec<f64>> {
    Ok(handcrafted(&reshape_macro(traj)?, mode)?.values)
}

fn standardize_input(x: &Mat, std: &Standardizer) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - std.mean[c]) / std.std[c];
        }
    }
    out
}

fn learned_summary(
    traj: &MacroTrajectory,
    embedding: &RecurrentEmbedding,
    input_std: &Standardizer,
) -> Result<Vec<f64>> {
    let x = standardize_input(&reshape_macro(traj)?, input_std);
    Ok(embed(embedding, &x)?.values)
}

/// Trains the estimator on a simulated dataset.
///
/// Handcrafted mode reduces each trajectory to its summary vector and trains
/// the flow on (theta, summary) pairs. Learned mode trains the recurrent
/// embedding and the flow jointly on the same negative log-likelihood.
pub fn fit_posterior(batch: &SimBatch, opts: &FitOptions) -> Result<PosteriorBuilder> {
    if batch.records.is_empty() {
        return Err(Error::Validation(
            "cannot fit a posterior on an empty simulation batch".into(),
        ));
    }
    let dim = batch.records[0].theta.len();
    match opts.summary {
        SummaryChoice::Handcrafted => {
            let mut dataset = Vec::with_capacity(batch.records.len());
            for rec in &batch.records {
                dataset.push((
                    rec.theta.clone(),
                    trajectory_summary_handcrafted(&rec.trajectory, opts.mode)?,
                ));
            }
            let arch = FlowConfig {
                dim,
                context_dim: dataset[0].1.len(),
                layers: opts.flow_layers,
                hidden: opts.flow_hidden,
            };
            let (flow, log) = train(&dataset, &arch, &opts.train)?;
            Ok(PosteriorBuilder {
                flow,
                summary: SummaryChoice::Handcrafted,
                mode: opts.mode,
                embedding: None,
                log,
            })
        }
        SummaryChoice::Learned => fit_learned(batch, opts),
    }
}

/// Joint end-to-end training of embedding + flow on the NLL objective.
fn fit_learned(batch: &SimBatch, opts: &FitOptions) -> Result<PosteriorBuilder> {
    let cfg = &opts.train;
    cfg.validate()?;
    if batch.records.len() < 50 {
        return Err(Error::Validation(format!(
            "training needs at least 50 pairs, got {}",
            batch.records.len()
        )));
    }
    let dim = batch.records[0].theta.len();
    let inputs: Vec<Mat> = batch
        .records
        .iter()
        .map(|r| reshape_macro(&r.trajectory))
        .collect::<Result<_>>()?;
    let input_width = inputs[0].cols;

    let (train_idx, val_idx) = split_indices(batch.records.len(), cfg.validation_fraction, cfg.seed);

    // Per-column standardizer of the trajectory matrices, fit on the
    // training split so the recurrence sees O(1) inputs.
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for &i in &train_idx {
        for r in 0..inputs[i].rows {
            rows.push(inputs[i].row(r).to_vec());
        }
    }
    let input_std = Standardizer::fit(&rows)?;
    drop(rows);
    let std_inputs: Vec<Mat> = inputs
        .iter()
        .map(|x| standardize_input(x, &input_std))
        .collect();

    let mut rng = master_rng(cfg.seed);
    let mut embedding = RecurrentEmbedding::random(input_width, opts.embedding_hidden, &mut rng);
    let arch = FlowConfig {
        dim,
        context_dim: opts.embedding_hidden,
        layers: opts.flow_layers,
        hidden: opts.flow_hidden,
    };
    let mut flow = MafStack::random(&arch, &mut rng);
    flow.theta_std = Standardizer::fit(
        &train_idx
            .iter()
            .map(|&i| batch.records[i].theta.clone())
            .collect::<Vec<_>>(),
    )?;
    // The embedding output is bounded by the tanh recurrence, so the
    // context standardizer stays at identity in learned mode.

    let n_flow = flow.param_count();
    let n_emb = embedding.param_count();
    let mut opt = Adam::new(n_flow + n_emb, cfg.learning_rate);

    let eval_nll = |flow: &MafStack, embedding: &RecurrentEmbedding, idx: &[usize]| -> Result<f64> {
        let mut total = 0.0;
        for &i in idx {
            let ctx = embed(embedding, &std_inputs[i])?.values;
            total -= flow.log_prob(&batch.records[i].theta, &ctx)?;
        }
        Ok(total / idx.len() as f64)
    };

    let mut log = TrainLog::default();
    let initial_val = eval_nll(&flow, &embedding, &val_idx)?;
    log.epochs.push(EpochRecord {
        epoch: 0,
        train_nll: eval_nll(&flow, &embedding, &train_idx)?,
        val_nll: initial_val,
    });
    let mut best_val = initial_val;
    let mut best = (flow.flatten(), embedding.flatten());
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;

    use rand::seq::SliceRandom;
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_nll_acc = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // Forward: embed each trajectory, then flow NLL with context grads.
            let mut pairs = Vec::with_capacity(chunk.len());
            let mut caches = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let cache = embedding.forward_cached(&std_inputs[i])?;
                pairs.push((
                    batch.records[i].theta.clone(),
                    cache.final_hidden().to_vec(),
                ));
                caches.push(cache);
            }
            let (nll, flow_grads, ctx_grads) = flow.nll_and_grads(&pairs)?;
            if !nll.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch} on batch indices {chunk:?}"
                )));
            }
            // nll_and_grads averages parameter grads over the batch but
            // returns unscaled per-sample context grads; fold in 1/batch.
            let scale = 1.0 / chunk.len() as f64;
            let mut emb_grads = vec![0.0; n_emb];
            for (k, &i) in chunk.iter().enumerate() {
                let (g, _) = embedding.backward(&std_inputs[i], &caches[k], &ctx_grads[k])?;
                let flat = g.flatten();
                for (a, b) in emb_grads.iter_mut().zip(flat.iter()) {
                    *a += scale * b;
                }
            }
            let mut params = flow.flatten();
            params.extend_from_slice(&embedding.flatten());
            let mut grads = flow_grads.flatten();
            grads.extend_from_slice(&emb_grads);
            opt.step(&mut params, &grads);
            flow.unflatten(&params[..n_flow]);
            embedding.unflatten(&params[n_flow..]);
            train_nll_acc += nll;
            batches += 1;
        }
        let val_nll = eval_nll(&flow, &embedding, &val_idx)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_nll: train_nll_acc / batches as f64,
            val_nll,
        });
        if val_nll < best_val {
            best_val = val_nll;
            best = (flow.flatten(), embedding.flatten());
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
    flow.unflatten(&best.0);
    embedding.unflatten(&best.1);
    log.best_epoch = best_epoch;
    Ok(PosteriorBuilder {
        flow,
        summary: SummaryChoice::Learned,
        mode: opts.mode,
        embedding: Some((embedding, input_std)),
        log,
    })
}

impl PosteriorBuilder {
    /// Summary of a trajectory through the identical pipeline used in training.
    pub fn summarize(&self, traj: &MacroTrajectory) -> Result<Vec<f64>> {
        match (&self.summary, &self.embedding) {
            (SummaryChoice::Handcrafted, _) => trajectory_summary_handcrafted(traj, self.mode),
            (SummaryChoice::Learned, Some((emb, std))) => learned_summary(traj, emb, std),
            (SummaryChoice::Learned, None) => Err(Error::Training(
                "learned-summary builder is missing its embedding".into(),
            )),
        }
    }

    /// Fixes the observation's summary as the flow context.
    pub fn condition(&self, observation: &MacroTrajectory, prior: &PriorBox) -> Result<MafPosterior> {
        prior.validate()?;
        let context = self.summarize(observation)?;
        let mut posterior = MafPosterior {
            flow: self.flow.clone(),
            summary: self.summary,
            mode: self.mode,
            embedding: self.embedding.clone(),
            prior: prior.clone(),
            context,
            leakage: 0.0,
        };
        posterior.leakage = posterior.estimate_leakage(4096)?;
        Ok(posterior)
    }
}

impl MafPosterior {
    /// Probe the flow for mass outside the prior box. Deterministic:
    /// the probe stream is derived from the context.
    fn estimate_leakage(&self, probes: usize) -> Result<f64> {
        let mut h = 0u64;
        for x in &self.context {
            h = h.wrapping_mul(0x100000001b3).wrapping_add(x.to_bits());
        }
        let mut rng = stream_rng(h, u64::MAX);
        let draws = self.flow.sample(&self.context, &mut rng, probes)?;
        let outside = draws.iter().filter(|d| !self.prior.contains(d)).count();
        Ok(outside as f64 / probes as f64)
    }

    /// Posterior samples, rejected to the prior support.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng: Rng = master_rng(seed);
        self.sample_with_rng(count, &mut rng)
    }

    pub fn sample_with_rng(&self, count: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(count);
        let mut drawn = 0usize;
        let mut rejected = 0usize;
        while out.len() < count {
            let chunk = (count - out.len()).max(64);
            let draws = self.flow.sample(&self.context, rng, chunk)?;
            for d in draws {
                drawn += 1;
                if self.prior.contains(&d) {
                    out.push(d);
                    if out.len() == count {
                        break;
                    }
                } else {
                    rejected += 1;
                }
            }
            if drawn >= 100 * count.max(64) && (rejected as f64 / drawn as f64) > 0.99 {
                return Err(Error::Numeric(format!(
                    "pathological leakage: {rejected}/{drawn} draws fell outside the prior box"
                )));
            }
        }
        Ok(out)
    }

    /// Log-density at theta given the fixed context, corrected for leakage.
    pub fn log_prob(&self, theta: &[f64]) -> Result<f64> {
        if !self.prior.contains(theta) {
            return Err(Error::Validation(format!(
                "theta {theta:?} lies outside the prior box"
            )));
        }
        let lp = self.flow.log_prob(theta, &self.context)?;
        Ok(lp - (1.0 - self.leakage).ln())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            flow: self.flow.clone(),
            embedding: self.embedding.clone().map(|(embedding, input_std)| {
                EmbeddingSection {
                    embedding,
                    input_std,
                }
            }),
            conditioning: Some(ConditioningSection {
                context: self.context.clone(),
                leakage: self.leakage,
            }),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, prior: PriorBox, mode: SummaryMode) -> Result<Self> {
        let cond = ckpt.conditioning.ok_or_else(|| {
            Error::Format("checkpoint has no conditioning section".into())
        })?;
        let summary = if ckpt.embedding.is_some() {
            SummaryChoice::Learned
        } else {
            SummaryChoice::Handcrafted
        };
        Ok(MafPosterior {
            flow: ckpt.flow,
            summary,
            mode,
            embedding: ckpt.embedding.map(|s| (s.embedding, s.input_std)),
            prior,
            context: cond.context,
            leakage: cond.leakage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_market, SynthConfig};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn tiny_market() -> MarketSpec {
        generate_market(&SynthConfig {
            n: 4,
            workers_per_occupation: 40,
            block_count: 2,
            seed: 77,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_cfg(horizon: usize) -> SimulationConfig {
        SimulationConfig {
            horizon,
            t_shock: Some(horizon / 2),
            ..Default::default()
        }
    }

    struct CountingSimulator<'a> {
        inner: LmSimulator,
        calls: &'a AtomicUsize,
    }

    impl Simulator for CountingSimulator<'_> {
        fn simulate(&self, theta: &[f64], master_seed: u64, index: u64) -> Result<MacroTrajectory> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.simulate(theta, master_seed, index)
        }
        fn occupations(&self) -> usize {
            self.inner.occupations()
        }
    }

    #[test]
    fn prior_draws_stay_in_the_box_and_hit_the_center() {
        let prior = PriorBox::behavioural();
        let draws = sample_prior(&prior, 100_000, 5).unwrap();
        assert!(draws.iter().all(|d| prior.contains(d)));
        let mean_du: f64 = draws.iter().map(|d| d[0]).sum::<f64>() / draws.len() as f64;
        // Uniform on [0, 0.02]: sd = 0.02/sqrt(12) ~ 0.0058; 1e5 draws give
        // a standard error ~ 1.8e-5, so 1e-3 is a loose LLN band.
        assert!((mean_du - 0.01).abs() < 1e-3, "mean {mean_du}");
        let again = sample_prior(&prior, 100_000, 5).unwrap();
        assert_eq!(draws, again);
    }

    #[test]
    fn batch_is_order_independent_and_bookkept() {
        let sim = LmSimulator {
            spec: tiny_market(),
            cfg: tiny_cfg(12),
        };
        let thetas = sample_prior(&PriorBox::behavioural(), 6, 3).unwrap();
        let a = run_simulation_batch(&sim, &thetas, 42);
        let b = run_simulation_batch(&sim, &thetas, 42);
        assert_eq!(a.records.len(), 6);
        assert_eq!(a.failures.len(), 0);
        for (x, y) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(x.index, y.index);
            assert_eq!(x.trajectory, y.trajectory);
            assert!(x.wall_time_secs > 0.0);
        }
    }

    #[test]
    fn failures_are_recorded_and_the_batch_continues() {
        let sim = LmSimulator {
            spec: tiny_market(),
            cfg: tiny_cfg(12),
        };
        let thetas = vec![vec![0.01, 0.01, 0.5], vec![0.5, 0.01, 0.5]]; // 2nd out of range
        let batch = run_simulation_batch(&sim, &thetas, 1);
        assert_eq!(batch.records.len(), 1);
        assert_eq!(batch.failures.len(), 1);
        assert_eq!(batch.failures[0].index, 1);
    }

    fn quick_fit(summary: SummaryChoice) -> (PosteriorBuilder, MacroTrajectory, PriorBox) {
        let spec = tiny_market();
        let cfg = tiny_cfg(16);
        let sim = LmSimulator {
            spec: spec.clone(),
            cfg: cfg.clone(),
        };
        let prior = PriorBox::behavioural();
        let thetas = sample_prior(&prior, 80, 7).unwrap();
        let batch = run_simulation_batch(&sim, &thetas, 7);
        let opts = FitOptions {
            summary,
            embedding_hidden: 6,
            flow_layers: 2,
            flow_hidden: 10,
            train: TrainConfig {
                max_epochs: 3,
                seed: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        let builder = fit_posterior(&batch, &opts).unwrap();
        let obs = sim
            .simulate(&[0.016, 0.012, 0.55], 999, 0)
            .unwrap();
        (builder, obs, prior)
    }

    #[test]
    fn handcrafted_context_width_is_40n() {
        let (builder, obs, _) = quick_fit(SummaryChoice::Handcrafted);
        assert_eq!(builder.flow.context_dim(), 40 * 4);
        assert_eq!(builder.summarize(&obs).unwrap().len(), 160);
    }

    #[test]
    fn learned_context_width_is_the_hidden_size() {
        let (builder, obs, _) = quick_fit(SummaryChoice::Learned);
        assert_eq!(builder.flow.context_dim(), 6);
        assert_eq!(builder.summarize(&obs).unwrap().len(), 6);
    }

    #[test]
    fn conditioning_is_deterministic_and_amortized() {
        let calls = AtomicUsize::new(0);
        let sim = CountingSimulator {
            inner: LmSimulator {
                spec: tiny_market(),
                cfg: tiny_cfg(16),
            },
            calls: &calls,
        };
        let prior = PriorBox::behavioural();
        let thetas = sample_prior(&prior, 60, 7).unwrap();
        let batch = run_simulation_batch(&sim, &thetas, 7);
        let opts = FitOptions {
            flow_layers: 2,
            flow_hidden: 8,
            train: TrainConfig {
                max_epochs: 2,
                seed: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let builder = fit_posterior(&batch, &opts).unwrap();
        let obs = sim.simulate(&[0.016, 0.012, 0.55], 999, 0).unwrap();

        let before = calls.load(Ordering::SeqCst);
        let p1 = builder.condition(&obs, &prior).unwrap();
        let p2 = builder.condition(&obs, &prior).unwrap();
        let s1 = p1.sample(50, 4).unwrap();
        let s2 = p2.sample(50, 4).unwrap();
        let _ = p1.log_prob(&prior.center()).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), before, "amortization violated");
        assert_eq!(p1.context, p2.context);
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|s| prior.contains(s)));
    }

    #[test]
    fn conditioning_on_different_observations_differs() {
        let (builder, obs, prior) = quick_fit(SummaryChoice::Handcrafted);
        let sim = LmSimulator {
            spec: tiny_market(),
            cfg: tiny_cfg(16),
        };
        let obs2 = sim.simulate(&[0.002, 0.019, 0.1], 1234, 0).unwrap();
        let p1 = builder.condition(&obs, &prior).unwrap();
        let p2 = builder.condition(&obs2, &prior).unwrap();
        assert_ne!(p1.context, p2.context);
    }

    #[test]
    fn log_prob_outside_box_is_an_error() {
        let (builder, obs, prior) = quick_fit(SummaryChoice::Handcrafted);
        let p = builder.condition(&obs, &prior).unwrap();
        assert!(p.log_prob(&[0.5, 0.01, 0.5]).is_err());
    }

    #[test]
    fn log_prob_differences_ignore_the_leakage_constant() {
        let (builder, obs, prior) = quick_fit(SummaryChoice::Handcrafted);
        let mut p = builder.condition(&obs, &prior).unwrap();
        let a = prior.center();
        let mut b = prior.center();
        b[2] += 0.1;
        let diff1 = p.log_prob(&a).unwrap() - p.log_prob(&b).unwrap();
        p.leakage = 0.5;
        let diff2 = p.log_prob(&a).unwrap() - p.log_prob(&b).unwrap();
        assert!((diff1 - diff2).abs() < 1e-12);
    }

    #[test]
    fn posterior_checkpoint_round_trip() {
        let (builder, obs, prior) = quick_fit(SummaryChoice::Learned);
        let p = builder.condition(&obs, &prior).unwrap();
        let mut buf = Vec::new();
        p.to_checkpoint().write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut std::io::Cursor::new(&buf)).unwrap();
        let p2 = MafPosterior::from_checkpoint(back, prior, p.mode).unwrap();
        assert_eq!(p2.context, p.context);
        assert_eq!(p2.sample(10, 3).unwrap(), p.sample(10, 3).unwrap());
    }
}
