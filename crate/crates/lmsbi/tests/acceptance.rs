//! Acceptance suite. Each criterion runs at its stated tolerance and prints
//! one pass/fail line; criteria run sequentially so wall-time measurements
//! are not distorted by sibling tests.

use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand_distr::{Distribution, Normal, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal as GaussianDist};

use lmsbi::abc::{rejection_abc, AbcConfig, AcceptRule};
use lmsbi::analysis::{bench_scaling, BenchConfig};
use lmsbi::flow::{train, FlowConfig, MafStack, TrainConfig, LN_2PI};
use lmsbi::mat::{dot, mean, variance, Mat};
use lmsbi::pipeline::{
    fit_posterior, run_simulation_batch, sample_prior, FitOptions, LmSimulator, PriorBox,
    SimBatch, Simulator, SummaryChoice,
};
use lmsbi::rng::master_rng;
use lmsbi::sbc::run_sbc;
use lmsbi::sim::{
    init_state, micro_memory_estimate, step_traced, target_demand, BehaviouralParams,
    MacroTrajectory, SimulationConfig,
};
use lmsbi::summaries::gru::embed_backward;
use lmsbi::summaries::RecurrentEmbedding;
use lmsbi::synth::{generate_market, SynthConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn pass(detail: String) -> Outcome {
    Outcome { pass: true, detail }
}

fn fail(detail: String) -> Outcome {
    Outcome { pass: false, detail }
}

fn quantile_of(sorted: &[f64], p: f64) -> f64 {
    lmsbi::summaries::quantile(sorted, p)
}

fn sorted_column(samples: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut col: Vec<f64> = samples.iter().map(|s| s[k]).collect();
    col.sort_by(|a, b| a.total_cmp(b));
    col
}

// 1. Conservation and feasibility over 10^4 randomized steps across 50 specs.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let prior = PriorBox::behavioural();
    let steps_per_spec = 200;
    let mut checked = 0usize;
    for s in 0..50u64 {
        let synth = SynthConfig {
            n: 2 + (s as usize % 11),
            workers_per_occupation: 20 + 10 * (s % 5),
            block_count: 1 + s as usize % 2,
            seed: s,
            ..Default::default()
        };
        let spec = match generate_market(&synth) {
            Ok(spec) => spec,
            Err(e) => return fail(format!("market generation failed: {e}")),
        };
        let mut rng = master_rng(1000 + s);
        let theta = &sample_prior(&prior, 1, 2000 + s).unwrap()[0];
        let params = BehaviouralParams::from_slice(theta).unwrap();
        let cfg = SimulationConfig {
            horizon: steps_per_spec,
            t_shock: Some(steps_per_spec / 2),
            gamma_u: 0.05 + 0.01 * (s % 10) as f64,
            gamma_v: 0.05 + 0.013 * (s % 7) as f64,
            ..Default::default()
        };
        let mut state = init_state(&spec).unwrap();
        let workers = state.workers();
        for t in 0..steps_per_spec {
            let demand = target_demand(&spec, t, &cfg).unwrap();
            let (next, transitions, trace) =
                match step_traced(&state, &spec, &params, &demand, &cfg, &mut rng) {
                    Ok(out) => out,
                    Err(e) => return fail(format!("step failed at spec {s} t={t}: {e}")),
                };
            if next.workers() != workers {
                return fail(format!(
                    "conservation broke at spec {s} t={t}: {} workers, expected {workers}",
                    next.workers()
                ));
            }
            let n = spec.n;
            for i in 0..n {
                let moved: u64 = transitions[i * n..(i + 1) * n].iter().sum();
                if moved > trace.pre_match_u[i] {
                    return fail(format!(
                        "spec {s} t={t}: {moved} hires from pool {i} of size {}",
                        trace.pre_match_u[i]
                    ));
                }
            }
            for j in 0..n {
                let filled: u64 = (0..n).map(|i| transitions[i * n + j]).sum();
                if filled > trace.pre_match_v[j] {
                    return fail(format!(
                        "spec {s} t={t}: {filled} fills at {j} with {} vacancies",
                        trace.pre_match_v[j]
                    ));
                }
            }
            state = next;
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if checked != 10_000 {
        return fail(format!("ran {checked} steps, wanted 10000"));
    }
    if secs >= 60.0 {
        return fail(format!("10^4 steps took {secs:.1}s, limit 60s"));
    }
    pass(format!("10^4 steps over 50 specs held in {secs:.1}s"))
}

// 2. delta_u = delta_v = 0 with gamma = 0 is a fixed point for T = 600.
fn criterion_2() -> Outcome {
    let spec = generate_market(&SynthConfig::default()).unwrap();
    let params = BehaviouralParams::new(0.0, 0.0, 0.55);
    let cfg = SimulationConfig {
        horizon: 600,
        gamma_u: 0.0,
        gamma_v: 0.0,
        ..Default::default()
    };
    let mut rng = master_rng(2);
    let initial = init_state(&spec).unwrap();
    let mut state = initial.clone();
    for t in 0..600 {
        let demand = target_demand(&spec, t, &cfg).unwrap();
        let (next, transitions, _) =
            step_traced(&state, &spec, &params, &demand, &cfg, &mut rng).unwrap();
        if next != initial {
            return fail(format!("state diverged at t={t}"));
        }
        if transitions.iter().any(|&x| x != 0) {
            return fail(format!("spurious transitions at t={t}"));
        }
        state = next;
    }
    pass("state bit-identical over 600 steps".into())
}

// 3. Identity-flow density, sample/forward round trip, 1-D quadrature.
fn criterion_3() -> Outcome {
    let identity = MafStack::identity(&FlowConfig::new(3, 0));
    let at_origin = identity.log_prob(&[0.0; 3], &[]).unwrap();
    let expected = -1.5 * LN_2PI;
    if (at_origin - expected).abs() > 1e-12 {
        return fail(format!(
            "identity log-density {at_origin} vs {expected}, error {:+e}",
            at_origin - expected
        ));
    }

    // sample() inverts base noise drawn from the rng; replaying the same rng
    // stream recovers that noise, so the forward pass must return to it.
    let cfg = FlowConfig {
        dim: 3,
        context_dim: 2,
        layers: 3,
        hidden: 12,
    };
    let flow = MafStack::random(&cfg, &mut master_rng(11));
    let ctx = [0.3, -0.7];
    let samples = flow.sample(&ctx, &mut master_rng(42), 50).unwrap();
    let mut replay = master_rng(42);
    let mut worst = 0.0f64;
    for theta in &samples {
        let z: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut replay)).collect();
        let u = flow.forward_noise(theta, &ctx).unwrap();
        for d in 0..3 {
            worst = worst.max((u[d] - z[d]).abs());
        }
    }
    if worst > 1e-8 {
        return fail(format!("round-trip noise error {worst:e} > 1e-8"));
    }

    let cfg1 = FlowConfig {
        dim: 1,
        context_dim: 0,
        layers: 3,
        hidden: 8,
    };
    let flow1 = MafStack::random(&cfg1, &mut master_rng(13));
    let (lo, hi, n_grid) = (-60.0f64, 60.0f64, 48_000usize);
    let h = (hi - lo) / n_grid as f64;
    let mut integral = 0.0;
    for i in 0..=n_grid {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == n_grid { 0.5 } else { 1.0 };
        integral += w * flow1.log_prob(&[x], &[]).unwrap().exp();
    }
    integral *= h;
    if (integral - 1.0).abs() > 1e-3 {
        return fail(format!("1-D density integrates to {integral}, wanted 1 +- 1e-3"));
    }
    pass(format!(
        "round-trip error {worst:.2e}, quadrature {integral:.6}"
    ))
}

fn fd_agrees(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        return (analytic - numeric).abs() < 1e-8;
    }
    (analytic - numeric).abs() / scale <= 1e-5
}

// 4. Reverse-mode gradients vs central finite differences.
fn criterion_4() -> Outcome {
    let cfg = FlowConfig {
        dim: 2,
        context_dim: 2,
        layers: 2,
        hidden: 6,
    };
    let mut rng = master_rng(17);
    let flow = MafStack::random(&cfg, &mut rng);
    let draw = |rng: &mut lmsbi::rng::Rng, k: usize| -> Vec<f64> {
        (0..k).map(|_| StandardNormal.sample(rng)).collect()
    };
    let batch: Vec<(Vec<f64>, Vec<f64>)> =
        (0..4).map(|_| (draw(&mut rng, 2), draw(&mut rng, 2))).collect();
    let (_, grads, ctx_grads) = flow.nll_and_grads(&batch).unwrap();
    let analytic = grads.flatten();
    let base = flow.flatten();
    let h = 1e-5;
    let nll_at = |params: &[f64]| -> f64 {
        let mut f = flow.clone();
        f.unflatten(params);
        let mut total = 0.0;
        for (t, c) in &batch {
            total -= f.log_prob(t, c).unwrap();
        }
        total / batch.len() as f64
    };
    let mut worst_pair = (0.0f64, 0.0f64);
    for (i, &g) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        let up = nll_at(&p);
        p[i] = base[i] - h;
        let down = nll_at(&p);
        let fd = (up - down) / (2.0 * h);
        if !fd_agrees(g, fd) {
            return fail(format!("flow param {i}: analytic {g:e}, fd {fd:e}"));
        }
        if (g - fd).abs() > (worst_pair.0 - worst_pair.1).abs() {
            worst_pair = (g, fd);
        }
    }
    // Per-sample context gradients.
    for (s, (theta, context)) in batch.iter().enumerate() {
        for d in 0..2 {
            let mut c = context.clone();
            c[d] = context[d] + h;
            let up = -flow.log_prob(theta, &c).unwrap();
            c[d] = context[d] - h;
            let down = -flow.log_prob(theta, &c).unwrap();
            let fd = (up - down) / (2.0 * h);
            if !fd_agrees(ctx_grads[s][d], fd) {
                return fail(format!(
                    "context grad ({s},{d}): analytic {:e}, fd {fd:e}",
                    ctx_grads[s][d]
                ));
            }
        }
    }

    let emb = RecurrentEmbedding::random(3, 4, &mut master_rng(19));
    let mut x = Mat::zeros(6, 3);
    for r in 0..6 {
        for c in 0..3 {
            x.set(r, c, StandardNormal.sample(&mut rng));
        }
    }
    let probe = draw(&mut rng, 4);
    let g = embed_backward(&emb, &x, &probe).unwrap();
    let analytic = g.flatten();
    let base = emb.flatten();
    let loss_at = |params: &[f64]| -> f64 {
        let mut e = emb.clone();
        e.unflatten(params);
        dot(e.forward_cached(&x).unwrap().final_hidden(), &probe)
    };
    for (i, &a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        let up = loss_at(&p);
        p[i] = base[i] - h;
        let down = loss_at(&p);
        let fd = (up - down) / (2.0 * h);
        if !fd_agrees(a, fd) {
            return fail(format!("embedding param {i}: analytic {a:e}, fd {fd:e}"));
        }
    }
    pass(format!(
        "flow, context and embedding gradients match (worst flow pair {:.3e} vs {:.3e})",
        worst_pair.0, worst_pair.1
    ))
}

// 5. Conjugate 1-D Gaussian oracle for NPE and rejection ABC.
fn criterion_5() -> Outcome {
    let start = Instant::now();
    let sigma = 0.3;
    let x0 = 0.5;
    let prior = PriorBox::new(vec![-1.0], vec![2.0]).unwrap();

    let mut rng = master_rng(23);
    let noise = Normal::new(0.0, sigma).unwrap();
    let thetas = sample_prior(&prior, 5000, 29).unwrap();
    let dataset: Vec<(Vec<f64>, Vec<f64>)> = thetas
        .iter()
        .map(|t| (t.clone(), vec![t[0] + noise.sample(&mut rng)]))
        .collect();
    let arch = FlowConfig {
        dim: 1,
        context_dim: 1,
        layers: 3,
        hidden: 16,
    };
    let cfg = TrainConfig {
        max_epochs: 80,
        patience: 15,
        learning_rate: 2e-3,
        seed: 3,
        ..Default::default()
    };
    let (flow, _) = train(&dataset, &arch, &cfg).unwrap();

    // Truncation at the box edges is below 1e-6 of the mass for this x0.
    let mut draws = Vec::with_capacity(1000);
    let mut sampler = master_rng(31);
    while draws.len() < 1000 {
        for s in flow.sample(&[x0], &mut sampler, 256).unwrap() {
            if prior.contains(&s) {
                draws.push(s[0]);
                if draws.len() == 1000 {
                    break;
                }
            }
        }
    }
    let npe_mean = mean(&draws);
    let npe_se = (variance(&draws) / draws.len() as f64).sqrt();
    let npe_ok = (npe_mean - x0).abs() <= 3.0 * npe_se;

    let analytic = GaussianDist::new(x0, sigma).unwrap();
    draws.sort_by(|a, b| a.total_cmp(b));
    let w1: f64 = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - analytic.inverse_cdf((i as f64 + 0.5) / draws.len() as f64)).abs())
        .sum::<f64>()
        / draws.len() as f64;
    let w1_ok = w1 < 0.05;

    let abc = rejection_abc(
        &prior,
        &[x0],
        |theta, master, index| {
            let mut r = lmsbi::rng::stream_rng(master, index);
            Ok(vec![theta[0] + Normal::new(0.0, sigma).unwrap().sample(&mut r)])
        },
        &AbcConfig {
            draws: 10_000,
            rule: AcceptRule::Quantile(0.01),
            seed: 37,
            ..Default::default()
        },
    )
    .unwrap();
    let kept: Vec<f64> = abc.accepted.iter().map(|t| t[0]).collect();
    let abc_mean = mean(&kept);
    let abc_se = (variance(&kept) / kept.len() as f64).sqrt();
    let abc_ok = (abc_mean - x0).abs() <= 3.0 * abc_se;

    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "NPE mean {npe_mean:.4} (3se {:.4}), ABC mean {abc_mean:.4} (3se {:.4}), W1 {w1:.4}, {secs:.0}s",
        3.0 * npe_se,
        3.0 * abc_se
    );
    if npe_ok && abc_ok && w1_ok && secs < 300.0 {
        pass(detail)
    } else {
        fail(detail)
    }
}

// 6. Recovery at theta* over 20 replicate pipelines with learned summaries,
// plus the width comparison against handcrafted summaries.
fn criterion_6() -> Outcome {
    let start = Instant::now();
    let theta_star = [0.016, 0.012, 0.55];
    let spec = generate_market(&SynthConfig {
        block_count: 2,
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    let cfg = SimulationConfig {
        horizon: 60,
        t_shock: Some(30),
        ..Default::default()
    };
    let simulator = LmSimulator {
        spec,
        cfg,
    };
    let prior = PriorBox::behavioural();
    let replicates = 20usize;
    let mut covered = [0usize; 3];
    let mut learned_sd = [0.0f64; 3];
    let mut handcrafted_sd = [0.0f64; 3];

    for rep in 0..replicates as u64 {
        let obs = simulator.simulate(&theta_star, 1000 + rep, 0).unwrap();
        let thetas = sample_prior(&prior, 1000, 10_000 + rep).unwrap();
        let batch = run_simulation_batch(&simulator, &thetas, 20_000 + rep);
        if !batch.failures.is_empty() {
            return fail(format!(
                "replicate {rep}: {} training simulations failed",
                batch.failures.len()
            ));
        }
        let learned = fit_posterior(
            &batch,
            &FitOptions {
                summary: SummaryChoice::Learned,
                train: TrainConfig {
                    learning_rate: 1e-3,
                    max_epochs: 300,
                    patience: 30,
                    seed: rep,
                    ..Default::default()
                },
                ..Default::default()
            },
        )
        .unwrap();
        let handcrafted = fit_posterior(
            &batch,
            &FitOptions {
                summary: SummaryChoice::Handcrafted,
                train: TrainConfig {
                    max_epochs: 300,
                    patience: 30,
                    seed: rep,
                    ..Default::default()
                },
                ..Default::default()
            },
        )
        .unwrap();

        let l_draws = learned
            .condition(&obs, &prior)
            .unwrap()
            .sample(1000, 123 + rep)
            .unwrap();
        let h_draws = handcrafted
            .condition(&obs, &prior)
            .unwrap()
            .sample(1000, 123 + rep)
            .unwrap();
        for k in 0..3 {
            let col = sorted_column(&l_draws, k);
            let (lo, hi) = (quantile_of(&col, 0.05), quantile_of(&col, 0.95));
            if lo <= theta_star[k] && theta_star[k] <= hi {
                covered[k] += 1;
            }
            learned_sd[k] += variance(&col).sqrt() / replicates as f64;
            handcrafted_sd[k] += variance(&sorted_column(&h_draws, k)).sqrt() / replicates as f64;
        }
    }

    let need = (replicates as f64 * 0.8).ceil() as usize;
    let coverage_ok = covered.iter().all(|&c| c >= need);
    let tighter = (0..3).filter(|&k| learned_sd[k] <= handcrafted_sd[k]).count();
    let width_ok = tighter >= 2;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "coverage {covered:?}/{replicates} (need {need}), learned sd {:?} vs handcrafted {:?}, \
         tighter on {tighter}/3, {secs:.0}s",
        learned_sd.map(|x| (x * 1e4).round() / 1e4),
        handcrafted_sd.map(|x| (x * 1e4).round() / 1e4)
    );
    if coverage_ok && width_ok && secs < 7200.0 {
        pass(detail)
    } else {
        fail(detail)
    }
}

// 7. SBC self-consistency: prior-as-posterior uniform, degenerate fails,
// handcrafted NPE rank histograms inside the 99% band.
fn criterion_7() -> Outcome {
    let prior = PriorBox::behavioural();
    let seeds = 40u64;
    let mut uniform_ok = 0usize;
    for seed in 0..seeds {
        let report = run_sbc(
            &prior,
            |theta: &[f64], _, _| Ok(theta.to_vec()),
            |_, draws, trial| {
                sample_prior(&prior, draws, seed.wrapping_mul(1_000_003) ^ (0xFAC7 + trial))
            },
            250,
            100,
            20,
            seed,
        )
        .unwrap();
        if report.parameters.iter().all(|p| p.p_value >= 0.01) {
            uniform_ok += 1;
        }
    }
    let prior_ok = uniform_ok * 100 >= seeds as usize * 95;

    let degenerate = run_sbc(
        &prior,
        |theta: &[f64], _, _| Ok(theta.to_vec()),
        |_, draws, _| Ok(vec![prior.center(); draws]),
        250,
        100,
        20,
        99,
    )
    .unwrap();
    let degenerate_fails = degenerate.parameters.iter().any(|p| p.p_value < 0.01);

    let spec = generate_market(&SynthConfig {
        block_count: 2,
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    let cfg = SimulationConfig {
        horizon: 60,
        t_shock: Some(30),
        ..Default::default()
    };
    let simulator = LmSimulator {
        spec,
        cfg,
    };
    let thetas = sample_prior(&prior, 1000, 41).unwrap();
    let batch = run_simulation_batch(&simulator, &thetas, 43);
    let builder = fit_posterior(&batch, &FitOptions::default()).unwrap();
    let report = run_sbc(
        &prior,
        |theta, master, trial| simulator.simulate(theta, master ^ 0x5BC, trial),
        |obs: &MacroTrajectory, draws, trial| {
            builder.condition(obs, &prior)?.sample(draws, 47 + trial)
        },
        100,
        100,
        20,
        47,
    )
    .unwrap();
    let violations: usize = report.band_violations().iter().map(|v| v.len()).sum();
    let total_bins = 3 * 20;
    let npe_ok = (total_bins - violations) * 100 >= total_bins * 90;

    let detail = format!(
        "prior-as-posterior uniform in {uniform_ok}/{seeds} seeds, degenerate rejected: \
         {degenerate_fails}, NPE bins in band: {}/{total_bins}",
        total_bins - violations
    );
    if prior_ok && degenerate_fails && npe_ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

// 8. Simulation wall-time scales linearly in n; training time vs epochs
// reported without gating.
fn criterion_8() -> Outcome {
    let cfg = BenchConfig {
        n_values: vec![10, 35, 60, 110, 160],
        sim_repetitions: 25,
        train_repetitions: 2,
        train_sims: 100,
        horizon: 100,
        workers_per_occupation: 100,
        fit: FitOptions {
            flow_layers: 2,
            flow_hidden: 10,
            train: TrainConfig {
                max_epochs: 150,
                patience: 8,
                ..Default::default()
            },
            ..Default::default()
        },
        seed: 53,
    };
    let report = match bench_scaling(&cfg) {
        Ok(r) => r,
        Err(e) => return fail(format!("bench failed: {e}")),
    };
    let fit = &report.simulation_fit;
    let pearson = report
        .training_time_epochs_pearson
        .map(|p| format!("{p:.3}"))
        .unwrap_or_else(|| "n/a".into());
    let detail = format!(
        "R^2 {:.4} (slope {:.2e} s/occupation); Pearson(train time, epochs) {pearson}, \
         reference 0.93, not gated",
        fit.r_squared, fit.slope
    );
    if fit.r_squared >= 0.95 && !fit.degenerate {
        pass(detail)
    } else {
        fail(detail)
    }
}

// 9. Micro memory estimate formula and the CLI refusal at the 8 GiB default.
fn criterion_9() -> Outcome {
    let bytes = match micro_memory_estimate(1000, 600, 464, 2) {
        Ok(b) => b,
        Err(e) => return fail(format!("estimate failed: {e}")),
    };
    if bytes != 260_582_400_000 {
        return fail(format!("estimate {bytes} bytes, expected 260582400000"));
    }
    let gib = bytes as f64 / (1u64 << 30) as f64;
    if (gib - 242.69).abs() > 0.005 {
        return fail(format!("estimate {gib:.2} GiB, expected 242.69"));
    }

    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return fail(format!("tempdir: {e}")),
    };
    let market = dir.path().join("market.json");
    let gen = Command::new(env!("CARGO_BIN_EXE_lmsbi"))
        .args(["gen-market", "--n", "464", "--seed", "1", "--out"])
        .arg(&market)
        .output()
        .unwrap();
    if !gen.status.success() {
        return fail("gen-market for the refusal check failed".into());
    }
    let refused = Command::new(env!("CARGO_BIN_EXE_lmsbi"))
        .args(["simulate", "--steps", "600", "--micro", "--sims", "1000", "--spec"])
        .arg(&market)
        .args(["--out"])
        .arg(dir.path().join("micro.lmtr"))
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&refused.stderr).to_string();
    if refused.status.code() != Some(5) {
        return fail(format!(
            "CLI exited with {:?}, expected 5; stderr: {stderr}",
            refused.status.code()
        ));
    }
    if !stderr.contains("242.69 GiB") {
        return fail(format!("refusal message missing the estimate: {stderr}"));
    }
    pass(format!("{bytes} bytes = {gib:.2} GiB, CLI refused with exit 5"))
}

struct CountingSimulator {
    inner: LmSimulator,
    calls: AtomicUsize,
}

impl Simulator for CountingSimulator {
    fn simulate(&self, theta: &[f64], master_seed: u64, index: u64) -> lmsbi::Result<MacroTrajectory> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.simulate(theta, master_seed, index)
    }

    fn occupations(&self) -> usize {
        self.inner.occupations()
    }
}

// 10. Amortization: no simulator calls after training.
fn criterion_10() -> Outcome {
    let spec = generate_market(&SynthConfig {
        n: 4,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let cfg = SimulationConfig {
        horizon: 20,
        t_shock: Some(10),
        ..Default::default()
    };
    let simulator = CountingSimulator {
        inner: LmSimulator { spec, cfg },
        calls: AtomicUsize::new(0),
    };
    let prior = PriorBox::behavioural();
    let thetas = sample_prior(&prior, 60, 59).unwrap();
    let batch: SimBatch = run_simulation_batch(&simulator, &thetas, 61);
    let builder = fit_posterior(
        &batch,
        &FitOptions {
            flow_layers: 2,
            flow_hidden: 8,
            train: TrainConfig {
                max_epochs: 5,
                ..Default::default()
            },
            ..Default::default()
        },
    )
    .unwrap();
    let obs = simulator.simulate(&[0.016, 0.012, 0.55], 63, 0).unwrap();
    let before = simulator.calls.load(Ordering::SeqCst);
    let posterior = builder.condition(&obs, &prior).unwrap();
    let draws = posterior.sample(50, 67).unwrap();
    for d in &draws {
        posterior.log_prob(d).unwrap();
    }
    let after = simulator.calls.load(Ordering::SeqCst);
    if after != before {
        return fail(format!(
            "{} simulator calls during condition/sample/log_prob",
            after - before
        ));
    }
    pass(format!(
        "{before} calls to train and observe, 0 during condition/sample/log_prob"
    ))
}

#[test]
fn acceptance_criteria() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("conservation and feasibility", criterion_1),
        ("zero-rate fixed point", criterion_2),
        ("flow correctness", criterion_3),
        ("gradient checks", criterion_4),
        ("conjugate Gaussian oracle", criterion_5),
        ("recovery at theta*", criterion_6),
        ("SBC self-consistency", criterion_7),
        ("linear scaling in n", criterion_8),
        ("micro memory guard", criterion_9),
        ("amortization", criterion_10),
    ];
    // ACCEPTANCE_ONLY=1,3 narrows the run while debugging a criterion.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let mut failures = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        if let Some(only) = &only {
            if !only.contains(&(i + 1)) {
                continue;
            }
        }
        let outcome = run();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {}: {verdict} ({name}) {}", i + 1, outcome.detail);
        if !outcome.pass {
            failures.push(format!("criterion {} ({name}): {}", i + 1, outcome.detail));
        }
    }
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}
