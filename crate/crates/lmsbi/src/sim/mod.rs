//! Discrete-time stochastic simulator of the networked labour market.
//!
//! Each step applies three processes per occupation: worker separation,
//! vacancy creation, and network-mediated matching of unemployed workers
//! to open vacancies. An exogenous automation shock reallocates labour
//! demand away from occupations with high automation probability.

pub mod trajectory;

use rand::Rng as _;
use rand_distr::{Binomial, Distribution, Hypergeometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
pub use trajectory::{read_macro_view, MacroTrajectory, MicroTrajectory, TRAJECTORY_FORMAT_VERSION};

/// Default in-memory budget for micro trajectories: 8 GiB.
pub const DEFAULT_MICRO_BUDGET_BYTES: u64 = 8 * 1024 * 1024 * 1024;

/// The labour-market network: occupation count, workforce, automation
/// probabilities and the occupation transition matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketSpec {
    /// Number of occupations.
    pub n: usize,
    /// Workforce per occupation.
    pub z: Vec<u64>,
    /// Automation probability per occupation, in [0, 1].
    pub p: Vec<f64>,
    /// Row-stochastic transition probability matrix, row-major n*n.
    #[serde(rename = "P")]
    pub transition: Vec<f64>,
}

impl MarketSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Validation("occupation count n must be >= 1".into()));
        }
        if self.z.len() != self.n || self.p.len() != self.n {
            return Err(Error::Validation(format!(
                "z and p must have length n = {}, got {} and {}",
                self.n,
                self.z.len(),
                self.p.len()
            )));
        }
        if self.transition.len() != self.n * self.n {
            return Err(Error::Validation(format!(
                "P must have n*n = {} entries, got {}",
                self.n * self.n,
                self.transition.len()
            )));
        }
        for (i, &zi) in self.z.iter().enumerate() {
            if zi < 1 {
                return Err(Error::Validation(format!(
                    "workforce z[{i}] must be >= 1, got {zi}"
                )));
            }
        }
        for (i, &pi) in self.p.iter().enumerate() {
            if !(0.0..=1.0).contains(&pi) {
                return Err(Error::Validation(format!(
                    "automation probability p[{i}] must lie in [0, 1], got {pi}"
                )));
            }
        }
        for i in 0..self.n {
            let row = &self.transition[i * self.n..(i + 1) * self.n];
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if x < 0.0 {
                    return Err(Error::Validation(format!(
                        "P[{i}][{j}] must be nonnegative, got {x}"
                    )));
                }
                sum += x;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "row {i} of P sums to {sum}, expected 1 within 1e-9"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn transition_prob(&self, i: usize, j: usize) -> f64 {
        self.transition[i * self.n + j]
    }

    pub fn total_workforce(&self) -> u64 {
        self.z.iter().sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: MarketSpec =
            serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// The behavioural parameter vector under inference: separation rate,
/// vacancy-opening rate and same-occupation stay probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviouralParams {
    pub delta_u: f64,
    pub delta_v: f64,
    pub r: f64,
}

impl BehaviouralParams {
    pub fn new(delta_u: f64, delta_v: f64, r: f64) -> Self {
        BehaviouralParams { delta_u, delta_v, r }
    }

    /// Checks membership in the prior support used throughout.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.02).contains(&self.delta_u) {
            return Err(Error::Validation(format!(
                "delta_u must lie in [0, 0.02], got {}",
                self.delta_u
            )));
        }
        if !(0.0..=0.02).contains(&self.delta_v) {
            return Err(Error::Validation(format!(
                "delta_v must lie in [0, 0.02], got {}",
                self.delta_v
            )));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::Validation(format!(
                "r must lie in [0, 1], got {}",
                self.r
            )));
        }
        Ok(())
    }

    pub fn as_vec(&self) -> Vec<f64> {
        vec![self.delta_u, self.delta_v, self.r]
    }

    pub fn from_slice(theta: &[f64]) -> Result<Self> {
        if theta.len() != 3 {
            return Err(Error::Dimension(format!(
                "theta must have 3 components, got {}",
                theta.len()
            )));
        }
        Ok(BehaviouralParams::new(theta[0], theta[1], theta[2]))
    }
}

/// How the automation shock unfolds over time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ShockMode {
    /// Demand jumps to the post-shock target at `t_shock`.
    Step,
    /// Demand follows a logistic ramp centred at `t_shock`.
    Sigmoid { half_width: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Horizon in steps (T).
    pub horizon: usize,
    /// Step at which the automation shock hits; `None` disables the shock.
    pub t_shock: Option<usize>,
    pub shock_mode: ShockMode,
    /// Demand-deficit sensitivity of the separation probability.
    pub gamma_u: f64,
    /// Demand-deficit sensitivity of the vacancy-opening probability.
    pub gamma_v: f64,
    pub seed: u64,
    /// Unrecorded warm-up steps before the horizon.
    pub burn_in: usize,
    /// Cap on vacancy lifetime in steps; unfilled vacancies persist when `None`.
    pub vacancy_lifetime: Option<usize>,
    /// Memory budget for micro trajectories, in bytes.
    pub micro_memory_budget: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            horizon: 600,
            t_shock: None,
            shock_mode: ShockMode::Step,
            gamma_u: 0.1,
            gamma_v: 0.1,
            seed: 0,
            burn_in: 0,
            vacancy_lifetime: None,
            micro_memory_budget: DEFAULT_MICRO_BUDGET_BYTES,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Validation("horizon T must be >= 1".into()));
        }
        if let Some(ts) = self.t_shock {
            if ts >= self.horizon {
                return Err(Error::Validation(format!(
                    "t_shock = {ts} must satisfy 0 <= t_shock < T = {}",
                    self.horizon
                )));
            }
        }
        for (name, g) in [("gamma_u", self.gamma_u), ("gamma_v", self.gamma_v)] {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Validation(format!(
                    "{name} must lie in [0, 1], got {g}"
                )));
            }
        }
        if let ShockMode::Sigmoid { half_width } = self.shock_mode {
            if half_width <= 0.0 {
                return Err(Error::Validation(
                    "sigmoid half_width must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-occupation counts of employed, unemployed, open vacancies,
/// and the real-valued labour demand.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub e: Vec<u64>,
    pub u: Vec<u64>,
    pub v: Vec<u64>,
    pub d: Vec<f64>,
    /// Vacancy counts by age; maintained only under a lifetime cap.
    /// `v_by_age[i][a]` counts vacancies in occupation i opened a steps ago,
    /// summing to `v[i]`.
    pub v_by_age: Option<Vec<Vec<u64>>>,
}

impl MarketState {
    pub fn workers(&self) -> u64 {
        self.e.iter().sum::<u64>() + self.u.iter().sum::<u64>()
    }
}

/// Initial state: full employment matched to demand.
pub fn init_state(spec: &MarketSpec) -> Result<MarketState> {
    spec.validate()?;
    Ok(MarketState {
        e: spec.z.clone(),
        u: vec![0; spec.n],
        v: vec![0; spec.n],
        d: spec.z.iter().map(|&z| z as f64).collect(),
        v_by_age: None,
    })
}

/// Labour demand per occupation at step `t`.
///
/// Pre-shock demand equals the workforce. The post-shock target scales
/// each occupation's demand by (1 - p_i) and rescales so total demand
/// is conserved.
pub fn target_demand(spec: &MarketSpec, t: usize, cfg: &SimulationConfig) -> Result<Vec<f64>> {
    if t >= cfg.horizon {
        return Err(Error::Validation(format!(
            "step index t = {t} out of range for horizon T = {}",
            cfg.horizon
        )));
    }
    let d0: Vec<f64> = spec.z.iter().map(|&z| z as f64).collect();
    let Some(t_shock) = cfg.t_shock else {
        return Ok(d0);
    };
    let total: f64 = d0.iter().sum();
    let surviving: f64 = d0
        .iter()
        .zip(spec.p.iter())
        .map(|(&d, &p)| (1.0 - p) * d)
        .sum();
    let d_hat: Vec<f64> = if surviving > 0.0 {
        d0.iter()
            .zip(spec.p.iter())
            .map(|(&d, &p)| (1.0 - p) * d * total / surviving)
            .collect()
    } else {
        // Fully automated market: no surviving demand to rescale, spread evenly.
        vec![total / spec.n as f64; spec.n]
    };
    match cfg.shock_mode {
        ShockMode::Step => {
            if t < t_shock {
                Ok(d0)
            } else {
                Ok(d_hat)
            }
        }
        ShockMode::Sigmoid { half_width } => {
            let s = 1.0 / (1.0 + (-((t as f64 - t_shock as f64) / half_width)).exp());
            Ok(d0
                .iter()
                .zip(d_hat.iter())
                .map(|(&a, &b)| a + s * (b - a))
                .collect())
        }
    }
}

fn draw_binomial(rng: &mut Rng, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("checked p").sample(rng)
}

/// Intermediate bookkeeping from a single step, for feasibility checks:
/// the unemployed pools and open vacancies as they stood when matching began.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub pre_match_u: Vec<u64>,
    pub pre_match_v: Vec<u64>,
}

/// One simulation step: separations, vacancy creation, matching.
///
/// Returns the new state and the job-transition count matrix J (row-major
/// n*n, J[i*n+j] = workers who moved from occupation i to j this step).
pub fn step(
    state: &MarketState,
    spec: &MarketSpec,
    params: &BehaviouralParams,
    demand: &[f64],
    cfg: &SimulationConfig,
    rng: &mut Rng,
) -> Result<(MarketState, Vec<u64>)> {
    let (next, transitions, _) = step_traced(state, spec, params, demand, cfg, rng)?;
    Ok((next, transitions))
}

/// As [`step`], additionally returning the pre-matching pools.
pub fn step_traced(
    state: &MarketState,
    spec: &MarketSpec,
    params: &BehaviouralParams,
    demand: &[f64],
    cfg: &SimulationConfig,
    rng: &mut Rng,
) -> Result<(MarketState, Vec<u64>, StepTrace)> {
    let n = spec.n;
    if demand.len() != n {
        return Err(Error::Dimension(format!(
            "demand length {} != n = {n}",
            demand.len()
        )));
    }
    let mut next = state.clone();
    next.d = demand.to_vec();

    // Vacancy ageing under a lifetime cap: expire first, then age.
    if let Some(life) = cfg.vacancy_lifetime {
        let ages = next
            .v_by_age
            .get_or_insert_with(|| vec![Vec::new(); n]);
        for i in 0..n {
            let buckets = &mut ages[i];
            while buckets.len() > life {
                let expired = buckets.pop().unwrap_or(0);
                next.v[i] = next.v[i].saturating_sub(expired);
            }
            buckets.insert(0, 0); // age slot for vacancies opened this step
        }
    }

    // (1) Separations.
    for i in 0..n {
        let e_i = next.e[i];
        let denom = (e_i.max(1)) as f64;
        let deficit = (e_i as f64 - demand[i]).max(0.0) / denom;
        let pi_u = params.delta_u + (1.0 - params.delta_u) * cfg.gamma_u * deficit;
        let separated = draw_binomial(rng, e_i, pi_u.clamp(0.0, 1.0));
        next.e[i] -= separated;
        next.u[i] += separated;
    }

    // (2) Vacancy creation.
    for i in 0..n {
        let e_i = next.e[i];
        let denom = (e_i.max(1)) as f64;
        let shortage = (demand[i] - e_i as f64 - next.v[i] as f64).max(0.0) / denom;
        let pi_v = params.delta_v + (1.0 - params.delta_v) * cfg.gamma_v * shortage;
        let opened = draw_binomial(rng, e_i, pi_v.clamp(0.0, 1.0));
        next.v[i] += opened;
        if let Some(ages) = next.v_by_age.as_mut() {
            ages[i][0] += opened;
        }
    }

    let trace = StepTrace {
        pre_match_u: next.u.clone(),
        pre_match_v: next.v.clone(),
    };

    // (3) Matching. Every unemployed worker in pool i sends one application
    // to occupation j with probability proportional to w_ij * v_j where
    // w_ij = r*1{i=j} + (1-r)*P_ij.
    let mut applications = vec![0u64; n * n];
    let mut weights = vec![0.0f64; n];
    for i in 0..n {
        let pool = next.u[i];
        if pool == 0 {
            continue;
        }
        let mut total = 0.0;
        for j in 0..n {
            let w = if i == j {
                params.r + (1.0 - params.r) * spec.transition_prob(i, j)
            } else {
                (1.0 - params.r) * spec.transition_prob(i, j)
            };
            let wv = w * next.v[j] as f64;
            weights[j] = wv;
            total += wv;
        }
        if total <= 0.0 {
            continue; // all weights zero: the whole pool stays unemployed
        }
        // Multinomial split of the pool. Small pools draw each application
        // as an independent categorical (one uniform plus a cumulative
        // scan); large pools use conditional binomials. Both sample the
        // same multinomial law.
        if pool <= 16 {
            for _ in 0..pool {
                let mut target = rng.random_range(0.0..total);
                let mut chosen = None;
                for (j, &wj) in weights.iter().enumerate() {
                    if wj <= 0.0 {
                        continue;
                    }
                    chosen = Some(j); // rounding fallback: last positive weight
                    if target < wj {
                        break;
                    }
                    target -= wj;
                }
                applications[i * n + chosen.expect("total > 0")] += 1;
            }
        } else {
            let mut remaining = pool;
            let mut mass_left = total;
            for j in 0..n {
                if remaining == 0 {
                    break;
                }
                let wj = weights[j];
                if wj <= 0.0 {
                    continue;
                }
                if wj >= mass_left {
                    applications[i * n + j] = remaining;
                    break;
                }
                let k = draw_binomial(rng, remaining, (wj / mass_left).clamp(0.0, 1.0));
                applications[i * n + j] = k;
                remaining -= k;
                mass_left -= wj;
            }
        }
    }

    // Each vacancy with at least one applicant hires one uniformly at random,
    // i.e. hires_j = min(v_j, applicants_j) drawn without replacement from
    // the applicant pool (multivariate hypergeometric over origins).
    let mut transitions = vec![0u64; n * n];
    for j in 0..n {
        let mut applicants: u64 = (0..n).map(|i| applications[i * n + j]).sum();
        if applicants == 0 || next.v[j] == 0 {
            continue;
        }
        let mut hires_left = next.v[j].min(applicants);
        let total_hires = hires_left;
        for i in 0..n {
            if hires_left == 0 {
                break;
            }
            let a_ij = applications[i * n + j];
            if a_ij == 0 {
                continue;
            }
            let hired = if applicants == a_ij {
                hires_left
            } else {
                Hypergeometric::new(applicants, a_ij, hires_left)
                    .expect("valid hypergeometric")
                    .sample(rng)
            };
            if hired > 0 {
                transitions[i * n + j] += hired;
                next.u[i] -= hired;
                next.e[j] += hired;
                hires_left -= hired;
            }
            applicants -= a_ij;
        }
        next.v[j] -= total_hires;
        if let Some(ages) = next.v_by_age.as_mut() {
            // Filled vacancies consume the oldest open slots first.
            let mut to_fill = total_hires;
            let buckets = &mut ages[j];
            for a in (0..buckets.len()).rev() {
                if to_fill == 0 {
                    break;
                }
                let take = buckets[a].min(to_fill);
                buckets[a] -= take;
                to_fill -= take;
            }
        }
    }

    Ok((next, transitions, trace))
}

fn run<F>(
    spec: &MarketSpec,
    params: &BehaviouralParams,
    cfg: &SimulationConfig,
    rng: &mut Rng,
    mut record: F,
) -> Result<()>
where
    F: FnMut(usize, &MarketState, &[u64]),
{
    spec.validate()?;
    cfg.validate()?;
    params.validate()?;
    let mut state = init_state(spec)?;
    for _ in 0..cfg.burn_in {
        let demand = target_demand(spec, 0, cfg)?;
        let (next, _) = step(&state, spec, params, &demand, cfg, rng)?;
        state = next;
    }
    for t in 0..cfg.horizon {
        let demand = target_demand(spec, t, cfg)?;
        let (next, transitions) = step(&state, spec, params, &demand, cfg, rng)?;
        state = next;
        record(t, &state, &transitions);
    }
    Ok(())
}

/// Runs the model for T steps and records the macro trajectory X_A.
pub fn simulate(
    spec: &MarketSpec,
    params: &BehaviouralParams,
    cfg: &SimulationConfig,
) -> Result<MacroTrajectory> {
    let mut rng = crate::rng::master_rng(cfg.seed);
    simulate_with_rng(spec, params, cfg, &mut rng)
}

/// As [`simulate`] but with an externally supplied generator stream
/// (used by batch runners for per-simulation streams).
pub fn simulate_with_rng(
    spec: &MarketSpec,
    params: &BehaviouralParams,
    cfg: &SimulationConfig,
    rng: &mut Rng,
) -> Result<MacroTrajectory> {
    let mut traj = MacroTrajectory::empty(spec.n, cfg.horizon);
    run(spec, params, cfg, rng, |t, state, _| {
        traj.record(t, state);
    })?;
    Ok(traj)
}

/// Runs the model and records the micro trajectory X_B (per-step
/// job-transition matrices plus the macro indicators).
///
/// Refuses configurations whose estimated memory footprint exceeds
/// `cfg.micro_memory_budget`.
pub fn simulate_micro(
    spec: &MarketSpec,
    params: &BehaviouralParams,
    cfg: &SimulationConfig,
) -> Result<MicroTrajectory> {
    let estimate = micro_memory_estimate(1, cfg.horizon as u64, spec.n as u64, 8)?;
    if estimate > cfg.micro_memory_budget {
        return Err(Error::ResourceLimit {
            estimate_bytes: estimate,
            budget_bytes: cfg.micro_memory_budget,
        });
    }
    let mut rng = crate::rng::master_rng(cfg.seed);
    let mut indicators = MacroTrajectory::empty(spec.n, cfg.horizon);
    let mut all_transitions = Vec::with_capacity(cfg.horizon);
    run(spec, params, cfg, &mut rng, |t, state, transitions| {
        indicators.record(t, state);
        all_transitions.push(transitions.to_vec());
    })?;
    Ok(MicroTrajectory {
        indicators,
        transitions: all_transitions,
    })
}

/// Storage estimate for a batch of micro trajectories:
/// sims * T * n * (n + 4) * bytes_per_element, with overflow detection.
pub fn micro_memory_estimate(
    sims: u64,
    steps: u64,
    n: u64,
    bytes_per_element: u64,
) -> Result<u64> {
    if sims == 0 || steps == 0 || n == 0 || bytes_per_element == 0 {
        return Err(Error::Validation(
            "memory estimate arguments must all be positive".into(),
        ));
    }
    n.checked_add(4)
        .and_then(|w| sims.checked_mul(steps)?.checked_mul(n)?.checked_mul(w))
        .and_then(|e| e.checked_mul(bytes_per_element))
        .ok_or_else(|| Error::Overflow("micro memory estimate exceeds u64".into()))
}
