//! Command-line entry point wiring the library into reproducible runs.
//!
//! Exit codes: 0 success, 2 usage, 3 validation, 4 runtime or numeric
//! failure, 5 resource-budget refusal.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use lmsbi::analysis::{
    bench_scaling, hdr_sample, pattern_cluster, posterior_correlation, scatter_svg, BenchConfig,
    BenchPhase,
};
use lmsbi::error::Error;
use lmsbi::flow::checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
use lmsbi::flow::train::TrainConfig;
use lmsbi::pipeline::{
    fit_posterior, run_simulation_batch, sample_prior, FitOptions, LmSimulator, MafPosterior,
    PriorBox, Simulator, SummaryChoice,
};
use lmsbi::sim::{
    micro_memory_estimate, simulate, simulate_micro, BehaviouralParams, MarketSpec, ShockMode,
    SimulationConfig, TRAJECTORY_FORMAT_VERSION,
};
use lmsbi::summaries::SummaryMode;
use lmsbi::synth::{generate_market, SynthConfig};

const PARAM_NAMES: [&str; 3] = ["delta_u", "delta_v", "r"];

/// Bytes per stored micro-trajectory element assumed when estimating the
/// footprint of a simulation batch before running it.
const MICRO_ESTIMATE_BYTES_PER_ELEMENT: u64 = 2;

fn long_version() -> String {
    format!(
        "{} (trajectory format v{TRAJECTORY_FORMAT_VERSION}, checkpoint format v{CHECKPOINT_FORMAT_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
}

#[derive(Parser)]
#[command(
    name = "lmsbi",
    version,
    long_version = long_version(),
    about = "Networked labour-market simulation and neural posterior estimation"
)]
struct Cli {
    /// Worker threads for parallel sections; results are identical for any
    /// worker count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labour market and write it as JSON.
    GenMarket(GenMarketArgs),
    /// Run the simulator and write trajectory files.
    Simulate(SimulateArgs),
    /// Estimate the posterior over (delta_u, delta_v, r) from an observation.
    Infer(InferArgs),
    /// Simulation-based calibration of the estimator.
    Sbc(SbcArgs),
    /// Scalability benchmark over market sizes.
    Bench(BenchArgs),
    /// Post-inference analytics.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Args)]
struct GenMarketArgs {
    /// Occupation count.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Block-community count of the transition matrix.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    blocks: u64,
    /// Probability mass kept inside a block row.
    #[arg(long, default_value_t = 0.8)]
    intra_mass: f64,
    /// Smoothing mass spread over all entries before renormalization.
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Workforce per occupation.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
    /// Upper bound of the automation probabilities.
    #[arg(long, default_value_t = 0.9)]
    p_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Market spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Optional simulation config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Behavioural parameters delta_u,delta_v,r.
    #[arg(long, default_value = "0.016,0.012,0.55")]
    theta: String,
    /// Horizon T.
    #[arg(long)]
    steps: Option<usize>,
    /// Shock step; defaults to T/2 unless --no-shock.
    #[arg(long)]
    shock_at: Option<usize>,
    #[arg(long, default_value_t = false)]
    no_shock: bool,
    /// Use a sigmoid demand ramp with this half-width instead of a step.
    #[arg(long)]
    sigmoid_half_width: Option<f64>,
    /// Record the micro trajectory (per-step transition matrices).
    #[arg(long, default_value_t = false)]
    micro: bool,
    /// Number of independent simulations.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    sims: u64,
    /// Micro-mode memory budget in bytes.
    #[arg(long)]
    memory_budget: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also export CSV next to each binary trajectory.
    #[arg(long, default_value_t = false)]
    csv: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SummariesFlag {
    Handcrafted,
    Learned,
}

impl From<SummariesFlag> for SummaryChoice {
    fn from(f: SummariesFlag) -> Self {
        match f {
            SummariesFlag::Handcrafted => SummaryChoice::Handcrafted,
            SummariesFlag::Learned => SummaryChoice::Learned,
        }
    }
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, value_enum, default_value_t = SummariesFlag::Handcrafted)]
    summaries: SummariesFlag,
    /// Prior draws / training simulations.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    sims: u64,
    #[arg(long, default_value_t = 5)]
    flow_layers: usize,
    #[arg(long, default_value_t = 50)]
    flow_hidden: usize,
    #[arg(long, default_value_t = 32)]
    embedding_hidden: usize,
    #[arg(long, default_value_t = 500)]
    max_epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 5e-4)]
    learning_rate: f64,
    /// Handcrafted reduction: statistics per indicator series or per step.
    #[arg(long, value_enum, default_value_t = ModeFlag::PerSeries)]
    summary_mode: ModeFlag,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeFlag {
    PerSeries,
    PerStep,
}

impl From<ModeFlag> for SummaryMode {
    fn from(f: ModeFlag) -> Self {
        match f {
            ModeFlag::PerSeries => SummaryMode::PerSeries,
            ModeFlag::PerStep => SummaryMode::PerStep,
        }
    }
}

impl TrainFlags {
    fn fit_options(&self, seed: u64) -> FitOptions {
        FitOptions {
            summary: self.summaries.into(),
            mode: self.summary_mode.into(),
            embedding_hidden: self.embedding_hidden,
            flow_layers: self.flow_layers,
            flow_hidden: self.flow_hidden,
            train: TrainConfig {
                max_epochs: self.max_epochs,
                patience: self.patience,
                learning_rate: self.learning_rate,
                seed,
                ..Default::default()
            },
        }
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Observed trajectory (binary trajectory file).
    #[arg(long)]
    obs: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Horizon used for the training simulations; defaults to the
    /// observation's length.
    #[arg(long)]
    steps: Option<usize>,
    /// Posterior samples to draw.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SbcArgs {
    #[arg(long)]
    spec: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    /// Posterior draws per trial.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(2..))]
    draws: u64,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated occupation counts, ascending.
    #[arg(long, default_value = "10,35,60,110,160")]
    n: String,
    /// Simulation repetitions per n.
    #[arg(long, default_value_t = 25)]
    reps: usize,
    /// Training repetitions per n.
    #[arg(long, default_value_t = 1)]
    train_reps: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    workers: u64,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Pearson correlation matrix of a posterior samples CSV.
    Correlation {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Highest-density-region subsample from a conditioned checkpoint.
    Hdr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster shock-response patterns of parameter sets (fixed r).
    Cluster {
        #[arg(long)]
        spec: PathBuf,
        /// Parameter sets CSV with header delta_u,delta_v,r.
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long)]
        shock_at: Option<usize>,
        #[arg(long, default_value_t = 0.55)]
        fixed_r: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct ArtifactRef {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: Option<String>,
    parameters: serde_json::Value,
    master_seed: u64,
    inputs: Vec<ArtifactRef>,
    outputs: Vec<ArtifactRef>,
    version: String,
}

impl RunManifest {
    fn new(command: &str, parameters: serde_json::Value, master_seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config: None,
            parameters,
            master_seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: long_version(),
        }
    }

    fn record_input(&mut self, path: &Path) -> lmsbi::Result<()> {
        let bytes = fs::read(path)?;
        self.inputs.push(ArtifactRef {
            path: path.display().to_string(),
            sha256: hex_sha256(&bytes),
        });
        Ok(())
    }

    fn write_output(&mut self, path: &Path, bytes: &[u8]) -> lmsbi::Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, bytes)?;
        self.outputs.push(ArtifactRef {
            path: path.display().to_string(),
            sha256: hex_sha256(bytes),
        });
        Ok(())
    }

    fn finish(&self, path: &Path) -> lmsbi::Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest_path(primary_out: &Path) -> PathBuf {
    let mut s = primary_out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn parse_theta(s: &str) -> lmsbi::Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::Validation(format!("bad theta component '{p}': {e}")))
        })
        .collect::<lmsbi::Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Validation(format!(
            "theta needs 3 comma-separated values, got {}",
            parts.len()
        )));
    }
    Ok(parts)
}

fn load_spec(path: &Path) -> lmsbi::Result<MarketSpec> {
    MarketSpec::from_json(&fs::read_to_string(path)?)
}

fn read_samples_csv(path: &Path) -> lmsbi::Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty samples CSV".into()))?;
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("samples CSV line {}: {e}", i + 2)))
            })
            .collect::<lmsbi::Result<_>>()?;
        if row.len() != width {
            return Err(Error::Format(format!(
                "samples CSV line {} has {} fields, header has {width}",
                i + 2,
                row.len()
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("samples CSV has no data rows".into()));
    }
    Ok(rows)
}

fn samples_to_csv(samples: &[Vec<f64>]) -> String {
    let mut out = String::from("delta_u,delta_v,r\n");
    for s in samples {
        out.push_str(&format!("{},{},{}\n", s[0], s[1], s[2]));
    }
    out
}

fn gib(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0 * 1024.0)
}

fn cmd_gen_market(args: &GenMarketArgs) -> lmsbi::Result<()> {
    let cfg = SynthConfig {
        n: args.n as usize,
        workers_per_occupation: args.workers,
        block_count: args.blocks as usize,
        intra_block_mass: args.intra_mass,
        smoothing_epsilon: args.epsilon,
        p_max: args.p_max,
        seed: args.seed,
    };
    let spec = generate_market(&cfg)?;
    let mut manifest = RunManifest::new(
        "gen-market",
        serde_json::to_value(&cfg).map_err(|e| Error::Format(e.to_string()))?,
        args.seed,
    );
    manifest.write_output(&args.out, spec.to_json()?.as_bytes())?;
    manifest.finish(&manifest_path(&args.out))?;
    println!("wrote market with {} occupations to {}", spec.n, args.out.display());
    Ok(())
}

fn resolve_sim_config(args: &SimulateArgs) -> lmsbi::Result<SimulationConfig> {
    let mut cfg: SimulationConfig = match &args.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Format(format!("config JSON: {e}")))?,
        None => SimulationConfig::default(),
    };
    if let Some(steps) = args.steps {
        cfg.horizon = steps;
    } else if args.config.is_none() {
        cfg.horizon = 600;
    }
    if args.no_shock {
        cfg.t_shock = None;
    } else if let Some(at) = args.shock_at {
        cfg.t_shock = Some(at);
    } else if cfg.t_shock.is_none() {
        cfg.t_shock = Some(cfg.horizon / 2);
    }
    if let Some(hw) = args.sigmoid_half_width {
        cfg.shock_mode = ShockMode::Sigmoid { half_width: hw };
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(budget) = args.memory_budget {
        cfg.micro_memory_budget = budget;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_simulate(args: &SimulateArgs) -> lmsbi::Result<()> {
    let spec = load_spec(&args.spec)?;
    let theta = parse_theta(&args.theta)?;
    let params = BehaviouralParams::from_slice(&theta)?;
    let cfg = resolve_sim_config(args)?;

    if args.micro {
        let estimate = micro_memory_estimate(
            args.sims,
            cfg.horizon as u64,
            spec.n as u64,
            MICRO_ESTIMATE_BYTES_PER_ELEMENT,
        )?;
        if estimate > cfg.micro_memory_budget {
            return Err(Error::ResourceLimit {
                estimate_bytes: estimate,
                budget_bytes: cfg.micro_memory_budget,
            });
        }
    }

    let mut manifest = RunManifest::new(
        "simulate",
        serde_json::json!({
            "theta": theta,
            "config": cfg,
            "micro": args.micro,
            "sims": args.sims,
        }),
        cfg.seed,
    );
    manifest.config = args.config.as_ref().map(|p| p.display().to_string());
    manifest.record_input(&args.spec)?;

    for k in 0..args.sims {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed.wrapping_add(k);
        let out = if args.sims == 1 {
            args.out.clone()
        } else {
            let mut s = args.out.as_os_str().to_owned();
            s.push(format!(".{k}"));
            PathBuf::from(s)
        };
        let mut bin = Vec::new();
        let mut csv = Vec::new();
        if args.micro {
            let traj = simulate_micro(&spec, &params, &run_cfg)?;
            traj.write_to(&mut bin)?;
            if args.csv {
                traj.write_csv(&mut csv)?;
            }
        } else {
            let traj = simulate(&spec, &params, &run_cfg)?;
            traj.write_to(&mut bin)?;
            if args.csv {
                traj.write_csv(&mut csv)?;
            }
        }
        manifest.write_output(&out, &bin)?;
        if args.csv {
            let mut s = out.as_os_str().to_owned();
            s.push(".csv");
            manifest.write_output(&PathBuf::from(s), &csv)?;
        }
    }
    manifest.finish(&manifest_path(&args.out))?;
    println!(
        "simulated {} run(s) of T = {} on {} occupations",
        args.sims, cfg.horizon, spec.n
    );
    Ok(())
}

fn train_builder(
    spec: &MarketSpec,
    sim_cfg: &SimulationConfig,
    flags: &TrainFlags,
    seed: u64,
) -> lmsbi::Result<(lmsbi::pipeline::PosteriorBuilder, PriorBox)> {
    let prior = PriorBox::behavioural();
    let thetas = sample_prior(&prior, flags.sims as usize, seed)?;
    let simulator = LmSimulator {
        spec: spec.clone(),
        cfg: sim_cfg.clone(),
    };
    let batch = run_simulation_batch(&simulator, &thetas, seed);
    if !batch.failures.is_empty() {
        eprintln!("{} training simulations failed", batch.failures.len());
    }
    let builder = fit_posterior(&batch, &flags.fit_options(seed))?;
    Ok((builder, prior))
}

fn cmd_infer(args: &InferArgs) -> lmsbi::Result<()> {
    let spec = load_spec(&args.spec)?;
    let obs_bytes = fs::read(&args.obs)?;
    let obs = lmsbi::sim::read_macro_view(&obs_bytes)?;
    if obs.n != spec.n {
        return Err(Error::Dimension(format!(
            "observation has {} occupations, spec has {}",
            obs.n, spec.n
        )));
    }
    let sim_cfg = SimulationConfig {
        horizon: args.steps.unwrap_or(obs.steps),
        t_shock: Some(args.steps.unwrap_or(obs.steps) / 2),
        seed: args.seed,
        ..Default::default()
    };
    let (builder, prior) = train_builder(&spec, &sim_cfg, &args.train, args.seed)?;
    let posterior = builder.condition(&obs, &prior)?;
    let samples = posterior.sample(args.samples, args.seed.wrapping_add(1))?;

    let mode = match args.train.summaries {
        SummariesFlag::Handcrafted => "handcrafted",
        SummariesFlag::Learned => "learned",
    };
    let mut manifest = RunManifest::new(
        "infer",
        serde_json::json!({
            "summaries": mode,
            "sims": args.train.sims,
            "samples": args.samples,
            "steps": sim_cfg.horizon,
            "leakage": posterior.leakage,
        }),
        args.seed,
    );
    manifest.record_input(&args.spec)?;
    manifest.record_input(&args.obs)?;

    let mut ckpt_bytes = Vec::new();
    posterior.to_checkpoint().write_to(&mut ckpt_bytes)?;
    manifest.write_output(&args.out_dir.join("posterior.lmnf"), &ckpt_bytes)?;
    manifest.write_output(
        &args.out_dir.join("samples.csv"),
        samples_to_csv(&samples).as_bytes(),
    )?;
    let mut log_csv = Vec::new();
    builder.log.write_csv(&mut log_csv)?;
    manifest.write_output(&args.out_dir.join("train_log.csv"), &log_csv)?;
    manifest.finish(&args.out_dir.join("manifest.json"))?;
    println!(
        "posterior trained ({mode} summaries, best epoch {}); {} samples written",
        builder.log.best_epoch,
        samples.len()
    );
    Ok(())
}

fn cmd_sbc(args: &SbcArgs) -> lmsbi::Result<()> {
    let spec = load_spec(&args.spec)?;
    let sim_cfg = SimulationConfig {
        horizon: args.steps,
        t_shock: Some(args.steps / 2),
        seed: args.seed,
        ..Default::default()
    };
    let (builder, prior) = train_builder(&spec, &sim_cfg, &args.train, args.seed)?;
    let simulator = LmSimulator {
        spec: spec.clone(),
        cfg: sim_cfg.clone(),
    };
    let report = lmsbi::sbc::run_sbc(
        &prior,
        |theta, master, trial| simulator.simulate(theta, master ^ 0x5BC, trial),
        |obs, draws, trial| {
            let posterior = builder.condition(obs, &prior)?;
            posterior.sample(draws, args.seed.wrapping_add(trial))
        },
        args.trials as usize,
        args.draws as usize,
        args.bins,
        args.seed,
    )?;

    let mut manifest = RunManifest::new(
        "sbc",
        serde_json::json!({
            "trials": args.trials,
            "draws": args.draws,
            "bins": args.bins,
            "steps": args.steps,
            "completed": report.completed,
            "skipped": report.skipped,
        }),
        args.seed,
    );
    manifest.record_input(&args.spec)?;
    let mut json = Vec::new();
    report.write_json(&mut json)?;
    manifest.write_output(&args.out_dir.join("sbc_report.json"), &json)?;
    for (k, name) in PARAM_NAMES.iter().enumerate() {
        let mut csv = Vec::new();
        report.write_histogram_csv(&mut csv, k)?;
        manifest.write_output(&args.out_dir.join(format!("rank_hist_{name}.csv")), &csv)?;
    }
    manifest.finish(&args.out_dir.join("manifest.json"))?;
    for (k, name) in PARAM_NAMES.iter().enumerate() {
        println!(
            "{name}: chi-square p = {:.4}, bins outside 99% band: {}",
            report.parameters[k].p_value,
            report.band_violations()[k].len()
        );
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> lmsbi::Result<()> {
    let n_values: Vec<usize> = args
        .n
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::Validation(format!("bad n '{p}': {e}")))
        })
        .collect::<lmsbi::Result<_>>()?;
    let cfg = BenchConfig {
        n_values,
        sim_repetitions: args.reps,
        train_repetitions: args.train_reps,
        train_sims: args.train.sims as usize,
        horizon: args.steps,
        workers_per_occupation: args.workers,
        fit: args.train.fit_options(args.seed),
        seed: args.seed,
    };
    let report = bench_scaling(&cfg)?;

    let mut manifest = RunManifest::new(
        "bench",
        serde_json::json!({
            "n": cfg.n_values,
            "reps": cfg.sim_repetitions,
            "train_reps": cfg.train_repetitions,
            "steps": cfg.horizon,
        }),
        args.seed,
    );
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    manifest.write_output(&args.out_dir.join("bench.csv"), &csv)?;
    let mut json = Vec::new();
    report.write_json(&mut json)?;
    manifest.write_output(&args.out_dir.join("fit.json"), &json)?;
    let points: Vec<(f64, f64)> = cfg
        .n_values
        .iter()
        .map(|&n| {
            let times: Vec<f64> = report
                .records
                .iter()
                .filter(|r| r.n == n && r.phase == BenchPhase::Simulation)
                .map(|r| r.seconds)
                .collect();
            (n as f64, times.iter().sum::<f64>() / times.len().max(1) as f64)
        })
        .collect();
    let svg = scatter_svg(
        &points,
        Some(&report.simulation_fit),
        "occupations",
        "mean simulation seconds",
    )?;
    manifest.write_output(&args.out_dir.join("scaling.svg"), svg.as_bytes())?;
    manifest.finish(&args.out_dir.join("manifest.json"))?;
    println!(
        "simulation scaling: slope {:.6} s/occupation, R^2 = {:.4}",
        report.simulation_fit.slope, report.simulation_fit.r_squared
    );
    if let Some(p) = report.training_time_epochs_pearson {
        println!("training time vs epochs Pearson: {p:.4}");
    }
    Ok(())
}

fn cmd_analyze(cmd: &AnalyzeCommand) -> lmsbi::Result<()> {
    match cmd {
        AnalyzeCommand::Correlation { samples, out } => {
            let rows = read_samples_csv(samples)?;
            let (corr, warnings) = posterior_correlation(&rows)?;
            let d = corr.rows;
            let matrix: Vec<Vec<f64>> = (0..d).map(|i| corr.row(i).to_vec()).collect();
            let mut manifest = RunManifest::new(
                "analyze correlation",
                serde_json::json!({ "samples": rows.len() }),
                0,
            );
            manifest.record_input(samples)?;
            let json = serde_json::to_string_pretty(&serde_json::json!({
                "correlation": matrix,
                "warnings": warnings,
            }))
            .map_err(|e| Error::Format(e.to_string()))?;
            manifest.write_output(out, json.as_bytes())?;
            manifest.finish(&manifest_path(out))?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {d}x{d} correlation matrix to {}", out.display());
        }
        AnalyzeCommand::Hdr {
            checkpoint,
            count,
            seed,
            out,
        } => {
            let bytes = fs::read(checkpoint)?;
            let ckpt = Checkpoint::read_from(&mut std::io::Cursor::new(&bytes))?;
            let posterior =
                MafPosterior::from_checkpoint(ckpt, PriorBox::behavioural(), SummaryMode::PerSeries)?;
            let selected = hdr_sample(&posterior, *count, *seed)?;
            let mut manifest = RunManifest::new(
                "analyze hdr",
                serde_json::json!({ "count": count }),
                *seed,
            );
            manifest.record_input(checkpoint)?;
            manifest.write_output(out, samples_to_csv(&selected).as_bytes())?;
            manifest.finish(&manifest_path(out))?;
            println!("wrote {} highest-density samples to {}", selected.len(), out.display());
        }
        AnalyzeCommand::Cluster {
            spec,
            params,
            steps,
            shock_at,
            fixed_r,
            seed,
            out,
        } => {
            let market = load_spec(spec)?;
            let sets = read_samples_csv(params)?;
            let cfg = SimulationConfig {
                horizon: *steps,
                t_shock: Some(shock_at.unwrap_or(steps / 2)),
                seed: *seed,
                ..Default::default()
            };
            let report = pattern_cluster(&market, &cfg, &sets, *fixed_r)?;
            let mut manifest = RunManifest::new(
                "analyze cluster",
                serde_json::json!({
                    "fixed_r": fixed_r,
                    "steps": steps,
                    "parameter_sets": sets.len(),
                    "failures": report.failures.len(),
                }),
                *seed,
            );
            manifest.record_input(spec)?;
            manifest.record_input(params)?;
            let mut csv = Vec::new();
            report.write_csv(&mut csv)?;
            manifest.write_output(out, &csv)?;
            let centroids = serde_json::to_string_pretty(&report.centroids)
                .map_err(|e| Error::Format(e.to_string()))?;
            let mut s = out.as_os_str().to_owned();
            s.push(".centroids.json");
            manifest.write_output(&PathBuf::from(s), centroids.as_bytes())?;
            manifest.finish(&manifest_path(out))?;
            println!(
                "clustered {} runs into 3 patterns ({} failures)",
                report.labels.len(),
                report.failures.len()
            );
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> lmsbi::Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::GenMarket(args) => cmd_gen_market(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Sbc(args) => cmd_sbc(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Analyze(cmd) => cmd_analyze(cmd),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::ResourceLimit {
                    estimate_bytes,
                    budget_bytes,
                } => {
                    eprintln!(
                        "refusing to run: estimated footprint {estimate_bytes} bytes \
                         ({:.2} GiB) exceeds the budget of {budget_bytes} bytes ({:.2} GiB)",
                        gib(*estimate_bytes),
                        gib(*budget_bytes)
                    );
                }
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(match e {
                Error::Validation(_) | Error::Dimension(_) => 3,
                Error::ResourceLimit { .. } => 5,
                _ => 4,
            })
        }
    }
}
