//! Revenue–cost balancing: a learned utilization model, a receding-horizon
//! λ optimizer, a PI feedback baseline and a closed-loop simulator that
//! drives per-request decisions under time-varying traffic.

mod model;
mod mpc;

pub use model::{StateFeatures, SystemModel, SystemModelConfig, Transition, MIN_TRANSITIONS};
pub use mpc::{
    mpc_objective, rollout, shift_warm_start, solve_lambda_sequence, trajectory_cost, Dynamics,
    MpcConfig, MpcSolution, OscillationGate,
};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::allocator::{binary_search_lambda, decide};
use crate::envsim::{generate_traffic, Burst, TrafficPoint, TrafficProfile};
use crate::error::{Error, Result};
use crate::metrics::utilization_rates;
use crate::nncore::{derive_seed, seeded_rng, SeededRng};

/// Per-request Q and cost tables the controllers act on.
///
/// Costs are rescaled so that the unconstrained (λ = 0) choice costs 1 on
/// average, and values so that the best action is worth 1 on average; λ is
/// therefore dimensionless. Scaling both by constants leaves decisions
/// unchanged up to the matching rescaling of λ.
#[derive(Debug, Clone)]
pub struct DecisionPool {
    q: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

impl DecisionPool {
    pub fn new(q_tables: Vec<Vec<f64>>, c_tables: Vec<Vec<f64>>) -> Result<Self> {
        if q_tables.is_empty() || q_tables.len() != c_tables.len() {
            return Err(Error::shape(
                "decision pool",
                format!("{} cost tables", q_tables.len()),
                c_tables.len(),
            ));
        }
        for (q, c) in q_tables.iter().zip(&c_tables) {
            if q.is_empty() || q.len() != c.len() {
                return Err(Error::shape("decision pool row", q.len(), c.len()));
            }
            if q.iter().chain(c).any(|v| !v.is_finite()) || c.iter().any(|v| *v < 0.0) {
                return Err(Error::NonFinite(
                    "decision pool needs finite values and non-negative costs".into(),
                ));
            }
        }
        let n = q_tables.len() as f64;
        let cost0: f64 = q_tables
            .iter()
            .zip(&c_tables)
            .map(|(q, c)| c[decide(q, c, 0.0)])
            .sum::<f64>()
            / n;
        let value: f64 = q_tables
            .iter()
            .map(|q| q.iter().copied().fold(f64::NEG_INFINITY, f64::max).abs())
            .sum::<f64>()
            / n;
        if !(cost0 > 0.0) || !(value > 0.0) {
            return Err(Error::InvalidArgument(
                "decision pool has zero unconstrained cost or zero value".into(),
            ));
        }
        let scale = |t: Vec<Vec<f64>>, k: f64| -> Vec<Vec<f64>> {
            t.into_iter()
                .map(|r| r.into_iter().map(|v| v / k).collect())
                .collect()
        };
        Ok(Self {
            q: scale(q_tables, value),
            c: scale(c_tables, cost0),
        })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Mean chosen cost over the given requests.
    pub fn mean_cost(&self, idx: &[usize], lambda: f64) -> f64 {
        let total: f64 = idx
            .iter()
            .map(|&i| self.c[i][decide(&self.q[i], &self.c[i], lambda)])
            .sum();
        total / idx.len().max(1) as f64
    }

    /// Mean cost when every request takes its cheapest action.
    pub fn floor_cost(&self) -> f64 {
        self.c
            .iter()
            .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / self.len() as f64
    }

    /// Smallest λ whose mean chosen cost over the first `k` requests is at
    /// most `per_request`; `lambda_cap` when even the cheapest plan exceeds it.
    fn calibrate(&self, k: usize, per_request: f64, lambda_cap: f64) -> f64 {
        let k = k.min(self.len());
        let budget = per_request * k as f64;
        match binary_search_lambda(&self.q[..k], &self.c[..k], budget) {
            Ok(s) => s.lambda.min(lambda_cap),
            Err(_) => lambda_cap,
        }
    }
}

/// Utilization dynamics of the serving cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    /// Share of the previous utilization carried into the next interval.
    pub inertia: f64,
    /// Relative noise on realized demand.
    pub noise_sd: f64,
    /// Requests sampled from the pool per interval.
    pub sample_size: usize,
    /// Utilization at nominal traffic with λ = 0.
    pub unconstrained_load: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            inertia: 0.5,
            noise_sd: 0.02,
            sample_size: 256,
            unconstrained_load: 1.0,
        }
    }
}

struct Plant<'a> {
    pool: &'a DecisionPool,
    cfg: &'a PlantConfig,
    base_qps: f64,
    rng: SeededRng,
}

impl Plant<'_> {
    fn step(&mut self, utilization: f64, lambda: f64, count: f64) -> f64 {
        let idx: Vec<usize> = (0..self.cfg.sample_size)
            .map(|_| self.rng.random_range(0..self.pool.len()))
            .collect();
        let z: f64 = StandardNormal.sample(&mut self.rng);
        let demand = self.cfg.unconstrained_load
            * (count / self.base_qps)
            * self.pool.mean_cost(&idx, lambda)
            * (1.0 + self.cfg.noise_sd * z);
        let rho = self.cfg.inertia;
        (rho * utilization + (1.0 - rho) * demand).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackConfig {
    pub kp: f64,
    pub ki: f64,
    /// Freeze the integral while λ sits at zero with utilization under budget.
    pub anti_windup: bool,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            kp: 0.5,
            ki: 0.02,
            anti_windup: true,
        }
    }
}

/// Mutable controller memory carried between intervals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub lambda: f64,
    pub utilization_history: Vec<f64>,
    pub warm_start: Vec<f64>,
    pub integral: f64,
}

/// λ_{t+1} = max(0, λ_t + k_p·e_t + k_i·Σe), e = (Ĉ_t − C_m)/C_m.
pub fn feedback_step(
    state: &mut ControllerState,
    utilization: f64,
    budget: f64,
    cfg: &FeedbackConfig,
) -> f64 {
    let err = (utilization - budget) / budget;
    let frozen = cfg.anti_windup && state.lambda <= 0.0 && err < 0.0;
    if !frozen {
        state.integral += err;
    }
    state.lambda = (state.lambda + cfg.kp * err + cfg.ki * state.integral).max(0.0);
    state.utilization_history.push(utilization);
    state.lambda
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Mpc,
    Feedback,
    BinarySearch,
    Static,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [
        ControllerKind::Mpc,
        ControllerKind::Feedback,
        ControllerKind::BinarySearch,
        ControllerKind::Static,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ControllerKind::Mpc => "mpc",
            ControllerKind::Feedback => "feedback",
            ControllerKind::BinarySearch => "binary_search",
            ControllerKind::Static => "static",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown controller {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    /// Noise-free rate from the known traffic profile.
    Oracle,
    /// Last observed count held constant.
    Persistence,
}

pub fn default_balancer_traffic() -> TrafficProfile {
    TrafficProfile {
        base_qps: 1000.0,
        amplitude: 0.3,
        bursts: vec![
            Burst {
                start: 480,
                duration: 60,
                multiplier: 1.4,
            },
            Burst {
                start: 1080,
                duration: 45,
                multiplier: 1.3,
            },
        ],
        noise_scale: 0.02,
        seed: 0,
        day_steps: 1440,
        step_seconds: 60.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalancerConfig {
    pub mpc: MpcConfig,
    pub feedback: FeedbackConfig,
    pub plant: PlantConfig,
    pub model: SystemModelConfig,
    /// Traffic seed is replaced per run seed.
    pub traffic: TrafficProfile,
    /// Control intervals per run.
    pub duration: usize,
    /// Random-λ intervals used to fit the system model.
    pub explore_steps: usize,
    pub forecast: ForecastMode,
    /// Pool requests the binary-search and static controllers calibrate on.
    pub calibration_size: usize,
    /// Smoothing of the running one-step prediction error added to the
    /// model's output inside the optimizer; 0 disables the correction.
    pub offset_smoothing: f64,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            mpc: MpcConfig::default(),
            feedback: FeedbackConfig::default(),
            plant: PlantConfig::default(),
            model: SystemModelConfig::default(),
            traffic: default_balancer_traffic(),
            duration: 1440,
            explore_steps: 2880,
            forecast: ForecastMode::Oracle,
            calibration_size: 256,
            offset_smoothing: 0.2,
        }
    }
}

impl BalancerConfig {
    pub fn validate(&self) -> Result<()> {
        self.mpc.validate()?;
        self.traffic.validate()?;
        let p = &self.plant;
        if !(0.0..1.0).contains(&p.inertia)
            || p.noise_sd < 0.0
            || p.sample_size == 0
            || !(p.unconstrained_load > 0.0)
            || self.duration == 0
            || self.calibration_size == 0
            || !(0.0..=1.0).contains(&self.offset_smoothing)
        {
            return Err(Error::InvalidArgument(format!(
                "balancer needs inertia in [0,1), non-negative noise, positive sample/calibration sizes, load and duration: {p:?}"
            )));
        }
        Ok(())
    }

    fn traffic_for(&self, seed: u64, stream: u64) -> TrafficProfile {
        TrafficProfile {
            seed: derive_seed(seed, stream),
            ..self.traffic.clone()
        }
    }
}

/// Model output shifted by an estimated persistent disturbance.
struct OffsetModel<'a> {
    model: &'a SystemModel,
    offset: f64,
}

impl Dynamics for OffsetModel<'_> {
    fn step_batch(&self, u: &[f64], state: &StateFeatures, lambda: &[f64]) -> Vec<f64> {
        let mut out = self.model.predict_batch(u, state, lambda);
        for v in &mut out {
            *v = (*v + self.offset).max(0.0);
        }
        out
    }
}

fn state_at(profile: &TrafficProfile, point: &TrafficPoint, traffic: f64) -> StateFeatures {
    StateFeatures {
        traffic,
        time_of_day: (point.step % profile.day_steps) as f64 / profile.day_steps as f64,
    }
}

/// Random-λ operation of the plant on independently seeded traffic with
/// bursts moved half a day, for fitting the system model.
pub fn collect_exploration(
    pool: &DecisionPool,
    cfg: &BalancerConfig,
    seed: u64,
) -> Result<Vec<Transition>> {
    cfg.validate()?;
    let mut profile = cfg.traffic_for(seed, 3);
    for b in &mut profile.bursts {
        b.start = (b.start + profile.day_steps / 2) % profile.day_steps;
    }
    let traffic = generate_traffic(&profile, cfg.explore_steps + 1)?;
    let mut plant = Plant {
        pool,
        cfg: &cfg.plant,
        base_qps: profile.base_qps,
        rng: seeded_rng(derive_seed(seed, 4)),
    };
    let mut rng = seeded_rng(derive_seed(seed, 6));
    let (lo, hi) = (cfg.mpc.lambda_min.ln(), cfg.mpc.lambda_max.ln());
    let mut u = cfg.mpc.budget;
    let mut lambda = 0.0;
    let mut hold = 0usize;
    let mut out = Vec::with_capacity(cfg.explore_steps);
    for t in 0..cfg.explore_steps {
        if hold == 0 {
            lambda = if rng.random::<f64>() < 0.15 {
                0.0
            } else {
                rng.random_range(lo..hi).exp()
            };
            hold = rng.random_range(1..=8);
        }
        hold -= 1;
        let next_pt = &traffic[t + 1];
        let next = plant.step(u, lambda, next_pt.count);
        out.push(Transition {
            utilization: u,
            state: state_at(&profile, next_pt, next_pt.count / profile.base_qps),
            lambda,
            next_utilization: next,
        });
        u = next;
    }
    Ok(out)
}

/// Fits the system model on exploration data for `seed`.
pub fn fit_for_seed(pool: &DecisionPool, cfg: &BalancerConfig, seed: u64) -> Result<SystemModel> {
    let history = collect_exploration(pool, cfg, seed)?;
    let mut mcfg = cfg.model.clone();
    mcfg.fit.seed = derive_seed(seed, 5);
    SystemModel::fit(&history, &mcfg)
}

/// One control interval of a closed-loop trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub traffic: f64,
    pub lambda: f64,
    pub predicted: Option<f64>,
    pub realized: f64,
    pub over_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopResult {
    pub controller: ControllerKind,
    pub seed: u64,
    pub mu: f64,
    pub nu: f64,
    pub trace: Vec<TraceRow>,
}

/// Simulates `cfg.duration` intervals. At interval t the controller sees
/// the realized utilization Ĉ_t and sets λ_t, which governs the requests of
/// interval t + 1. The system model is required for [`ControllerKind::Mpc`].
pub fn closed_loop_run(
    pool: &DecisionPool,
    controller: ControllerKind,
    model: Option<&SystemModel>,
    cfg: &BalancerConfig,
    seed: u64,
) -> Result<ClosedLoopResult> {
    cfg.validate()?;
    let model = match (controller, model) {
        (ControllerKind::Mpc, None) => {
            return Err(Error::NotFitted("mpc controller needs a system model".into()))
        }
        (_, m) => m,
    };
    let profile = cfg.traffic_for(seed, 1);
    let n = cfg.mpc.horizon;
    let traffic = generate_traffic(&profile, cfg.duration + n + 1)?;
    let base = profile.base_qps;
    let budget = cfg.mpc.budget;
    let mut plant = Plant {
        pool,
        cfg: &cfg.plant,
        base_qps: base,
        rng: seeded_rng(derive_seed(seed, 2)),
    };
    let per_request = |level: f64| budget / (cfg.plant.unconstrained_load * level);
    let static_lambda = pool.calibrate(cfg.calibration_size, per_request(1.0), cfg.mpc.lambda_max);

    let mut state = ControllerState::default();
    let mut u = budget;
    let mut previous: Option<f64> = None;
    let mut offset = 0.0;
    let mut trace = Vec::with_capacity(cfg.duration);
    for t in 0..cfg.duration {
        let mut predicted = None;
        let lambda = match controller {
            ControllerKind::Static => static_lambda,
            ControllerKind::Feedback => feedback_step(&mut state, u, budget, &cfg.feedback),
            ControllerKind::BinarySearch => {
                let level = match cfg.forecast {
                    ForecastMode::Oracle => traffic[t + 1].expected,
                    ForecastMode::Persistence => traffic[t].count,
                } / base;
                pool.calibrate(cfg.calibration_size, per_request(level), cfg.mpc.lambda_max)
            }
            ControllerKind::Mpc => {
                let forecast: Vec<StateFeatures> = (1..=n)
                    .map(|i| {
                        let pt = &traffic[t + i];
                        let level = match cfg.forecast {
                            ForecastMode::Oracle => pt.expected,
                            ForecastMode::Persistence => traffic[t].count,
                        } / base;
                        state_at(&profile, pt, level)
                    })
                    .collect();
                let warm = if state.warm_start.is_empty() {
                    vec![state.lambda; n]
                } else {
                    shift_warm_start(&state.warm_start)
                };
                let corrected = OffsetModel {
                    model: model.expect("checked above"),
                    offset,
                };
                let sol = solve_lambda_sequence(
                    &corrected,
                    u,
                    previous,
                    &forecast,
                    &cfg.mpc,
                    Some(&warm),
                )?;
                predicted = sol.trajectory.get(1).copied();
                state.warm_start = sol.lambdas;
                state.lambda = state.warm_start[0];
                state.utilization_history.push(u);
                state.lambda
            }
        };
        let next_pt = &traffic[t + 1];
        let next = plant.step(u, lambda, next_pt.count);
        if let Some(p) = predicted {
            let raw = p - offset;
            offset += cfg.offset_smoothing * ((next - raw) - offset);
        }
        trace.push(TraceRow {
            t,
            traffic: next_pt.count,
            lambda,
            predicted,
            realized: next,
            over_budget: next > budget,
        });
        previous = Some(u);
        u = next;
    }
    let realized: Vec<f64> = trace.iter().map(|r| r.realized).collect();
    let (mu, nu) = utilization_rates(&realized, budget)?;
    Ok(ClosedLoopResult {
        controller,
        seed,
        mu,
        nu,
        trace,
    })
}

/// μ and ν of every requested controller for one seed; the system model is
/// fitted once per seed.
pub fn compare_controllers(
    pool: &DecisionPool,
    controllers: &[ControllerKind],
    cfg: &BalancerConfig,
    seed: u64,
) -> Result<Vec<ClosedLoopResult>> {
    let model = if controllers.contains(&ControllerKind::Mpc) {
        Some(fit_for_seed(pool, cfg, seed)?)
    } else {
        None
    };
    controllers
        .iter()
        .map(|&k| closed_loop_run(pool, k, model.as_ref(), cfg, seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub seed: u64,
    pub mu: f64,
    pub nu: f64,
}

pub const ALPHA_SWEEP: [f64; 6] = [0.1, 0.2, 0.4, 0.6, 0.8, 1.0];
pub const BETA_SWEEP: [f64; 6] = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0];
pub const HORIZON_SWEEP: [usize; 6] = [1, 2, 5, 10, 15, 20];

/// One-at-a-time sweeps of α, β and N around `cfg.mpc`.
pub fn hyperparameter_sweep(
    pool: &DecisionPool,
    model: &SystemModel,
    cfg: &BalancerConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let mut run = |name: &str, value: f64, mpc: MpcConfig| -> Result<()> {
        let c = BalancerConfig {
            mpc,
            ..cfg.clone()
        };
        let r = closed_loop_run(pool, ControllerKind::Mpc, Some(model), &c, seed)?;
        rows.push(SweepRow {
            parameter: name.into(),
            value,
            seed,
            mu: r.mu,
            nu: r.nu,
        });
        Ok(())
    };
    for a in ALPHA_SWEEP {
        run("alpha", a, MpcConfig { alpha: a, ..cfg.mpc.clone() })?;
    }
    for b in BETA_SWEEP {
        run("beta", b, MpcConfig { beta: b, ..cfg.mpc.clone() })?;
    }
    for h in HORIZON_SWEEP {
        run("horizon", h as f64, MpcConfig { horizon: h, ..cfg.mpc.clone() })?;
    }
    Ok(rows)
}
