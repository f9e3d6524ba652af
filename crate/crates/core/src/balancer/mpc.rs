use serde::{Deserialize, Serialize};

use super::model::{StateFeatures, SystemModel};
use crate::error::{Error, Result};

/// Scope of the condition that switches on the oscillation penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OscillationGate {
    /// Penalize step i only when the utilization at step i is at or over budget.
    PerStep,
    /// Penalize every step when any step of the trajectory is at or over budget.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub alpha: f64,
    pub beta: f64,
    pub budget: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Log-spaced points between the bounds; λ = 0 is always a candidate too.
    pub grid_points: usize,
    pub refinements: usize,
    pub gate: OscillationGate,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            alpha: 0.4,
            beta: 8.0,
            budget: 0.8,
            lambda_min: 1e-3,
            lambda_max: 1e2,
            grid_points: 26,
            refinements: 2,
            gate: OscillationGate::PerStep,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.horizon >= 1
            && self.alpha > 0.0
            && self.alpha <= 1.0
            && self.beta >= 0.0
            && self.budget > 0.0
            && self.lambda_min > 0.0
            && self.lambda_max > self.lambda_min
            && self.grid_points >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "mpc config needs N ≥ 1, α in (0,1], β ≥ 0, budget > 0, 0 < λ_min < λ_max and ≥ 2 grid points: {self:?}"
            )))
        }
    }

    /// The coarse candidate set: 0 followed by the log grid.
    pub fn lambda_grid(&self) -> Vec<f64> {
        let (lo, hi) = (self.lambda_min.log10(), self.lambda_max.log10());
        let step = (hi - lo) / (self.grid_points - 1) as f64;
        std::iter::once(0.0)
            .chain((0..self.grid_points).map(|k| 10f64.powf(lo + step * k as f64)))
            .collect()
    }

    fn log_step(&self) -> f64 {
        (self.lambda_max.log10() - self.lambda_min.log10()) / (self.grid_points - 1) as f64
    }
}

/// One-step dynamics for a batch of (utilization, λ) pairs.
pub trait Dynamics {
    fn step_batch(&self, utilization: &[f64], state: &StateFeatures, lambda: &[f64]) -> Vec<f64>;
}

impl Dynamics for SystemModel {
    fn step_batch(&self, utilization: &[f64], state: &StateFeatures, lambda: &[f64]) -> Vec<f64> {
        self.predict_batch(utilization, state, lambda)
    }
}

/// Cost of a predicted trajectory. `trajectory[i]` is Ĉ_{t+i} for i = 0..=N
/// and `previous` is Ĉ_{t−1}, needed for the step-0 difference.
pub fn trajectory_cost(previous: Option<f64>, trajectory: &[f64], cfg: &MpcConfig) -> f64 {
    let c_m = cfg.budget;
    let any_over = trajectory.iter().any(|&c| c >= c_m);
    let mut weight = 1.0;
    let mut j = 0.0;
    for (i, &c) in trajectory.iter().enumerate() {
        j += weight * (c - c_m).powi(2);
        let gated = match cfg.gate {
            OscillationGate::PerStep => c >= c_m,
            OscillationGate::Global => any_over,
        };
        let before = if i == 0 { previous } else { Some(trajectory[i - 1]) };
        if let (true, Some(p)) = (gated, before) {
            j += cfg.beta * weight * (c - p).powi(2);
        }
        weight *= cfg.alpha;
    }
    j
}

/// Rolls Ĉ_{t+i+1} = g(Ĉ_{t+i}, s_{t+i}, λ_i) for i = 0..N−1 from Ĉ_t.
pub fn rollout<D: Dynamics + ?Sized>(
    model: &D,
    current: f64,
    lambdas: &[f64],
    forecast: &[StateFeatures],
) -> Vec<f64> {
    let mut traj = Vec::with_capacity(lambdas.len() + 1);
    traj.push(current);
    for (l, s) in lambdas.iter().zip(forecast) {
        let next = model.step_batch(&[*traj.last().unwrap()], s, &[*l])[0];
        traj.push(next);
    }
    traj
}

/// J for a λ sequence under the model's predicted trajectory.
pub fn mpc_objective<D: Dynamics + ?Sized>(
    model: &D,
    lambdas: &[f64],
    current: f64,
    previous: Option<f64>,
    forecast: &[StateFeatures],
    cfg: &MpcConfig,
) -> Result<f64> {
    check_lengths(lambdas.len(), forecast.len(), cfg)?;
    Ok(trajectory_cost(
        previous,
        &rollout(model, current, lambdas, forecast),
        cfg,
    ))
}

fn check_lengths(n_lambda: usize, n_forecast: usize, cfg: &MpcConfig) -> Result<()> {
    if n_lambda != cfg.horizon || n_forecast < cfg.horizon {
        return Err(Error::shape(
            "mpc horizon",
            cfg.horizon,
            format!("{n_lambda} λ values, {n_forecast} forecast steps"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    pub lambdas: Vec<f64>,
    pub trajectory: Vec<f64>,
    pub objective: f64,
}

/// Drops the applied element and repeats the last one.
pub fn shift_warm_start(previous: &[f64]) -> Vec<f64> {
    match previous.split_first() {
        Some((_, rest)) if !rest.is_empty() => {
            let mut v = rest.to_vec();
            v.push(*rest.last().unwrap());
            v
        }
        _ => previous.to_vec(),
    }
}

fn local_candidates(center: f64, pass: usize, cfg: &MpcConfig) -> Vec<f64> {
    let delta = cfg.log_step() / 4f64.powi(pass as i32);
    let mut out = Vec::with_capacity(10);
    if center <= 0.0 {
        out.push(0.0);
        out.extend((0..=4).map(|k| cfg.lambda_min * 10f64.powf(k as f64 * delta)));
    } else {
        let c = center.log10();
        let (lo, hi) = (cfg.lambda_min.log10(), cfg.lambda_max.log10());
        for k in -4i32..=4 {
            let v = c + k as f64 * delta;
            if v >= lo - 1e-12 && v <= hi + 1e-12 {
                out.push(10f64.powf(v.clamp(lo, hi)));
            }
        }
        if c - 4.0 * delta < lo {
            out.push(0.0);
        }
    }
    out
}

/// Coordinate descent over λ_0..λ_{N−1}: one sweep on the coarse grid, then
/// `refinements` sweeps on successively finer local grids. Only strict
/// improvements are accepted, so the warm start is returned when nothing
/// beats it.
pub fn solve_lambda_sequence<D: Dynamics + ?Sized>(
    model: &D,
    current: f64,
    previous: Option<f64>,
    forecast: &[StateFeatures],
    cfg: &MpcConfig,
    warm_start: Option<&[f64]>,
) -> Result<MpcSolution> {
    cfg.validate()?;
    let n = cfg.horizon;
    let mut seq = match warm_start {
        Some(w) => {
            check_lengths(w.len(), forecast.len(), cfg)?;
            w.iter().map(|l| l.clamp(0.0, cfg.lambda_max)).collect()
        }
        None => {
            check_lengths(n, forecast.len(), cfg)?;
            vec![0.0; n]
        }
    };
    let mut traj = rollout(model, current, &seq, forecast);
    let mut best_j = trajectory_cost(previous, &traj, cfg);
    let coarse = cfg.lambda_grid();

    for pass in 0..=cfg.refinements {
        for i in 0..n {
            let cands = if pass == 0 {
                coarse.clone()
            } else {
                local_candidates(seq[i], pass, cfg)
            };
            let k = cands.len();
            // Suffix rollouts for every candidate at once.
            let mut rows: Vec<Vec<f64>> = vec![traj[..=i].to_vec(); k];
            let mut u = vec![traj[i]; k];
            for j in i..n {
                let lam: Vec<f64> = if j == i { cands.clone() } else { vec![seq[j]; k] };
                u = model.step_batch(&u, &forecast[j], &lam);
                for (row, v) in rows.iter_mut().zip(&u) {
                    row.push(*v);
                }
            }
            let mut choice = None;
            for (c, row) in rows.iter().enumerate() {
                let jc = trajectory_cost(previous, row, cfg);
                if jc < best_j {
                    best_j = jc;
                    choice = Some(c);
                }
            }
            if let Some(c) = choice {
                seq[i] = cands[c];
                traj = rows.swap_remove(c);
            }
        }
    }
    if !best_j.is_finite() {
        return Err(Error::NonFinite("mpc objective".into()));
    }
    Ok(MpcSolution {
        lambdas: seq,
        trajectory: traj,
        objective: best_j,
    })
}
