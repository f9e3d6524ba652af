use serde::{Deserialize, Serialize};

use super::curve::CostCurve;
use super::loadtest::Rig;
use super::predictor::ActionResultPredictor;
use crate::envsim::{JointAction, Layout, RequestContext, N_STAGES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationMode {
    /// C = factor(D)·Ĉ.
    Multiplicative,
    /// C = max(0, Ĉ + offset(D)).
    Additive,
}

/// Maps a degradation level to its effect on estimated cost. Level 0 is the
/// identity in both modes; higher levels never increase cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationMap {
    pub mode: DegradationMode,
    pub factors: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl DegradationMap {
    pub fn identity() -> Self {
        Self {
            mode: DegradationMode::Multiplicative,
            factors: vec![1.0],
            offsets: vec![0.0],
        }
    }

    pub fn levels(&self) -> usize {
        self.factors.len()
    }

    pub fn apply(&self, c_hat: f64, level: usize) -> Result<f64> {
        if level >= self.levels() {
            return Err(Error::InvalidArgument(format!(
                "degradation level {level} outside 0..{}",
                self.levels()
            )));
        }
        Ok(match self.mode {
            DegradationMode::Multiplicative => self.factors[level] * c_hat,
            DegradationMode::Additive => (c_hat + self.offsets[level]).max(0.0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub seed: u64,
    pub queue_lengths: Vec<usize>,
    pub rig: Rig,
    pub n_loadtests: usize,
}

/// Fitted stage queue costs and elastic cost tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub layout: Layout,
    /// `[stage][value_tier]`.
    pub queue_curves: Vec<Vec<CostCurve>>,
    pub model_costs: Vec<f64>,
    pub channel_costs: Vec<f64>,
    pub degradation: DegradationMap,
    pub meta: FitMeta,
}

impl CostModel {
    fn curve(&self, stage: usize, tier: usize) -> Result<&CostCurve> {
        self.queue_curves
            .get(stage)
            .and_then(|c| c.get(tier))
            .ok_or_else(|| {
                Error::NotFitted(format!("no cost curve for stage {stage}, tier {tier}"))
            })
    }

    /// Ĉ from per-stage queue lengths plus model and channel tables, before
    /// degradation.
    pub fn base_cost(&self, tier: usize, queues: &[f64; N_STAGES], a: &JointAction) -> Result<f64> {
        self.layout.action_space().validate(a)?;
        let mut c = 0.0;
        for (g, &q) in queues.iter().enumerate() {
            c += self.curve(g, tier)?.eval(q);
        }
        let (level, _) = self.layout.decode_ranking(a.0[2]);
        c += self.model_costs[level];
        c += self.layout.channel_subsets[a.0[0]]
            .iter()
            .map(|&ch| self.channel_costs[ch])
            .sum::<f64>();
        Ok(c)
    }

    pub fn cost_from_sizes(
        &self,
        tier: usize,
        queues: &[f64; N_STAGES],
        a: &JointAction,
        degradation: usize,
    ) -> Result<f64> {
        self.degradation
            .apply(self.base_cost(tier, queues, a)?, degradation)
    }
}

/// C(s, a) = f(Ĉ(s, a), D) with queue lengths from the result predictor.
#[derive(Debug, Clone)]
pub struct CostEstimator {
    pub model: CostModel,
    pub predictor: ActionResultPredictor,
}

impl CostEstimator {
    pub fn estimate_cost(
        &self,
        s: &RequestContext,
        a: &JointAction,
        degradation: usize,
    ) -> Result<f64> {
        let q = self.predictor.predict_action_results(s, a)?;
        self.model.cost_from_sizes(s.value_tier, &q, a, degradation)
    }

    /// Cost of every joint action (flat order) for every request.
    pub fn cost_tables(
        &self,
        requests: &[&RequestContext],
        degradation: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let space = self.model.layout.action_space();
        let sizes = self.predictor.predict_all(requests)?;
        requests
            .iter()
            .zip(sizes)
            .map(|(s, per_action)| {
                space
                    .iter()
                    .zip(per_action)
                    .map(|(a, q)| {
                        self.model
                            .cost_from_sizes(s.value_tier, &q, &a, degradation)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Free-function form of [`CostEstimator::estimate_cost`].
pub fn estimate_cost(
    s: &RequestContext,
    a: &JointAction,
    estimator: &CostEstimator,
    degradation: usize,
) -> Result<f64> {
    estimator.estimate_cost(s, a, degradation)
}
