//! Seeded three-stage recommender pipeline: retrieval → pre-ranking → ranking.
//!
//! Each request flows through the stages in order. Retrieval activates a
//! channel subset and produces a candidate pool, pre-ranking truncates the
//! surviving pool, and ranking picks a model level and a final truncation.
//! Revenue is a latent product over per-stage efforts and is observed only
//! once, after the last stage; upstream sizes feed downstream observations.

mod dataset;
mod machine;
mod pipeline;
mod traffic;

pub use dataset::{
    build_logged_dataset, DatasetHeader, DatasetSummary, EpisodeRecord, LoggedDataset,
    LoggingPolicy, Split, StepRecord, DATASET_SCHEMA_VERSION,
};
pub use machine::MachineModel;
pub use pipeline::{PassRates, PipelineEnv, RealizedSizes};
pub use traffic::{generate_traffic, Burst, TrafficPoint, TrafficProfile};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stages in pipeline order.
pub const N_STAGES: usize = 3;
pub const STAGE_NAMES: [&str; N_STAGES] = ["retrieval", "pre_ranking", "ranking"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub tier_probs: Vec<f64>,
    pub tier_multipliers: Vec<f64>,
    pub platform_multipliers: Vec<f64>,
    /// Mean-scale of the latent request value.
    pub revenue_scale: f64,
    pub value_hidden: usize,
    /// Nominal candidates per channel at availability 1.
    pub channel_yields: Vec<f64>,
    /// Retrieval actions; index 0 must be the cheapest.
    pub channel_subsets: Vec<Vec<usize>>,
    pub prerank_truncations: Vec<usize>,
    /// Ranking model levels, cheapest first; multiplies ranking effort.
    pub rank_model_quality: Vec<f64>,
    pub rank_truncations: Vec<usize>,
    /// Per-stage size that counts as one unit of effort.
    pub effort_refs: [f64; N_STAGES],
    pub kappa: [f64; N_STAGES],
    /// Reward noise standard deviation as a fraction of mean revenue.
    pub reward_noise_frac: f64,
    pub day_seconds: f64,
    pub machine: MachineModel,
}

impl Default for EnvConfig {
    /// 4 channel subsets × 3 pre-ranking truncations × (2 models × 2
    /// truncations) = 48 joint actions.
    fn default() -> Self {
        Self {
            seed: 2024,
            feature_dim: 16,
            tier_probs: vec![0.5, 0.35, 0.15],
            tier_multipliers: vec![0.7, 1.0, 1.6],
            platform_multipliers: vec![1.0, 1.15],
            revenue_scale: 30.0,
            value_hidden: 8,
            channel_yields: vec![60.0, 40.0, 80.0],
            channel_subsets: vec![vec![0], vec![0, 1], vec![0, 2], vec![0, 1, 2]],
            prerank_truncations: vec![20, 40, 80],
            rank_model_quality: vec![0.75, 1.0],
            rank_truncations: vec![6, 12],
            effort_refs: [100.0, 40.0, 10.0],
            kappa: [1.0, 1.0, 1.0],
            reward_noise_frac: 0.1,
            day_seconds: 86_400.0,
            machine: MachineModel::default(),
        }
    }
}

impl EnvConfig {
    /// 2 × 2 × 2 joint actions, small enough for brute-force checks.
    pub fn mini() -> Self {
        Self {
            channel_subsets: vec![vec![0], vec![0, 1, 2]],
            prerank_truncations: vec![20, 80],
            rank_model_quality: vec![1.0],
            rank_truncations: vec![6, 12],
            machine: MachineModel {
                model_costs: vec![0.0],
                ..MachineModel::default()
            },
            ..Self::default()
        }
    }

    pub fn n_tiers(&self) -> usize {
        self.tier_probs.len()
    }

    pub fn n_platforms(&self) -> usize {
        self.platform_multipliers.len()
    }

    /// Public geometry of features and actions, without hidden parameters.
    pub fn layout(&self) -> Layout {
        Layout {
            feature_dim: self.feature_dim,
            n_tiers: self.n_tiers(),
            n_platforms: self.n_platforms(),
            day_seconds: self.day_seconds,
            channel_subsets: self.channel_subsets.clone(),
            channel_yields: self.channel_yields.clone(),
            prerank_truncations: self.prerank_truncations.clone(),
            rank_truncations: self.rank_truncations.clone(),
            n_model_levels: self.rank_model_quality.len(),
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        ActionSpace::new([
            self.channel_subsets.len(),
            self.prerank_truncations.len(),
            self.rank_model_quality.len() * self.rank_truncations.len(),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("env config: {m}")));
        if self.feature_dim < 3 {
            return bad("feature_dim must be at least 3");
        }
        if self.tier_probs.is_empty() || self.tier_probs.len() != self.tier_multipliers.len() {
            return bad("tier_probs and tier_multipliers must be non-empty and equal length");
        }
        if (self.tier_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
            || self.tier_probs.iter().any(|&p| p < 0.0)
        {
            return bad("tier_probs must be a probability vector");
        }
        if self.platform_multipliers.is_empty() {
            return bad("at least one platform");
        }
        if self.channel_subsets.is_empty()
            || self.prerank_truncations.is_empty()
            || self.rank_model_quality.is_empty()
            || self.rank_truncations.is_empty()
        {
            return bad("every stage needs at least one action");
        }
        for s in &self.channel_subsets {
            if s.is_empty() || s.iter().any(|&c| c >= self.channel_yields.len()) {
                return bad("channel subsets must be non-empty and reference known channels");
            }
        }
        if self.machine.channel_costs.len() != self.channel_yields.len() {
            return bad("machine.channel_costs must have one entry per channel");
        }
        if self.machine.model_costs.len() != self.rank_model_quality.len() {
            return bad("machine.model_costs must have one entry per ranking model level");
        }
        if !is_sorted(&self.prerank_truncations) || !is_sorted(&self.rank_truncations) {
            return bad("truncation lengths must be increasing");
        }
        if self
            .effort_refs
            .iter()
            .chain(&self.kappa)
            .any(|&v| v <= 0.0)
        {
            return bad("effort_refs and kappa must be positive");
        }
        if self.reward_noise_frac < 0.0 || self.revenue_scale <= 0.0 {
            return bad("revenue_scale must be positive and noise non-negative");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Hash of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        crate::io::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// What a model may know about the pipeline: feature encoding and the
/// meaning of each action index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub feature_dim: usize,
    pub n_tiers: usize,
    pub n_platforms: usize,
    pub day_seconds: f64,
    pub channel_subsets: Vec<Vec<usize>>,
    pub channel_yields: Vec<f64>,
    pub prerank_truncations: Vec<usize>,
    pub rank_truncations: Vec<usize>,
    pub n_model_levels: usize,
}

impl Layout {
    pub fn action_space(&self) -> ActionSpace {
        ActionSpace::new([
            self.channel_subsets.len(),
            self.prerank_truncations.len(),
            self.n_model_levels * self.rank_truncations.len(),
        ])
    }

    /// Ranking action index → (model level, truncation position).
    pub fn decode_ranking(&self, idx: usize) -> (usize, usize) {
        let n = self.rank_truncations.len();
        (idx / n, idx % n)
    }

    /// Truncation length selected by stage `stage` (0 for retrieval, which
    /// does not truncate).
    pub fn truncation(&self, stage: usize, idx: usize) -> Option<usize> {
        match stage {
            1 => self.prerank_truncations.get(idx).copied(),
            2 => self
                .rank_truncations
                .get(self.decode_ranking(idx).1)
                .copied(),
            _ => None,
        }
    }

    /// Features, tier and platform one-hots, and time of day.
    pub fn request_features(&self, s: &RequestContext) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.request_dim());
        v.extend_from_slice(&s.user_features);
        v.extend(one_hot(s.value_tier, self.n_tiers));
        v.extend(one_hot(s.platform_id, self.n_platforms));
        let phase = std::f64::consts::TAU * s.timestamp / self.day_seconds;
        v.push(phase.sin());
        v.push(phase.cos());
        v
    }

    pub fn request_dim(&self) -> usize {
        self.feature_dim + self.n_tiers + self.n_platforms + 2
    }
}

pub(crate) fn one_hot(i: usize, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |j| if j == i { 1.0 } else { 0.0 })
}

/// Indicator vector of length `n` with a one at `i`.
pub fn one_hot_vec(i: usize, n: usize) -> Vec<f64> {
    one_hot(i, n).collect()
}

fn is_sorted(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Per-stage action counts; joint actions are their Cartesian product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub sizes: [usize; N_STAGES],
}

impl ActionSpace {
    pub fn new(sizes: [usize; N_STAGES]) -> Self {
        Self { sizes }
    }

    pub fn joint_count(&self) -> usize {
        self.sizes.iter().product()
    }

    pub fn validate(&self, a: &JointAction) -> Result<()> {
        for (stage, (&idx, &size)) in a.0.iter().zip(&self.sizes).enumerate() {
            if idx >= size {
                return Err(Error::ActionOutOfRange {
                    stage,
                    index: idx,
                    size,
                });
            }
        }
        Ok(())
    }

    /// Row-major index with the last stage varying fastest.
    pub fn flat_index(&self, a: &JointAction) -> usize {
        a.0.iter()
            .zip(&self.sizes)
            .fold(0, |acc, (&i, &s)| acc * s + i)
    }

    pub fn from_flat(&self, mut index: usize) -> JointAction {
        let mut out = [0; N_STAGES];
        for g in (0..N_STAGES).rev() {
            out[g] = index % self.sizes[g];
            index /= self.sizes[g];
        }
        JointAction(out)
    }

    pub fn iter(&self) -> impl Iterator<Item = JointAction> + '_ {
        (0..self.joint_count()).map(|i| self.from_flat(i))
    }

    /// Sum of per-stage action counts (width of a per-stage one-hot code).
    pub fn one_hot_width(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn one_hot(&self, a: &JointAction) -> Vec<f64> {
        let mut v = vec![0.0; self.one_hot_width()];
        let mut off = 0;
        for (g, &s) in self.sizes.iter().enumerate() {
            v[off + a.0[g]] = 1.0;
            off += s;
        }
        v
    }
}

/// One action index per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JointAction(pub [usize; N_STAGES]);

/// One simulated ad request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestContext {
    pub user_features: Vec<f64>,
    pub value_tier: usize,
    /// Seconds within the simulated day.
    pub timestamp: f64,
    pub platform_id: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_space_has_48_joint_actions() {
        let cfg = EnvConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.action_space().joint_count(), 48);
        let mini = EnvConfig::mini();
        mini.validate().unwrap();
        assert_eq!(mini.action_space().joint_count(), 8);
    }

    #[test]
    fn flat_index_roundtrip() {
        let space = ActionSpace::new([4, 3, 4]);
        for i in 0..space.joint_count() {
            assert_eq!(space.flat_index(&space.from_flat(i)), i);
        }
        assert_eq!(space.flat_index(&JointAction([1, 2, 3])), 12 + 8 + 3);
        assert!(space.validate(&JointAction([0, 3, 0])).is_err());
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = EnvConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(EnvConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(EnvConfig::from_toml_str("seed = 1").is_err());
    }
}
