use std::f64::consts::TAU;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{EpisodeRecord, Split, StepRecord};
use super::{one_hot, ActionSpace, EnvConfig, JointAction, Layout, RequestContext, N_STAGES};
use crate::error::{Error, Result};
use crate::nncore::{seeded_rng, sigmoid, softplus, SeededRng};

/// Fraction of each upstream pool that survives the next stage's filtering,
/// before truncation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassRates {
    /// Scales the nominal channel yields; zero means an empty pool.
    pub availability: f64,
    pub prerank: f64,
    pub rank: f64,
}

/// Candidate counts leaving each stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealizedSizes {
    pub pool: f64,
    pub prerank: f64,
    pub rank: f64,
}

impl RealizedSizes {
    pub fn as_array(&self) -> [f64; N_STAGES] {
        [self.pool, self.prerank, self.rank]
    }
}

/// Frozen latent value network, a two-layer tanh net of the user features.
#[derive(Debug, Clone)]
struct ValueNet {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<f64>,
}

impl ValueNet {
    fn new(dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let mut n = || -> f64 { StandardNormal.sample(rng) };
        let s1 = 1.0 / (dim as f64).sqrt();
        let s2 = 1.5 / (hidden as f64).sqrt();
        let w1 = (0..hidden)
            .map(|_| (0..dim).map(|_| n() * s1).collect())
            .collect();
        let b1 = (0..hidden).map(|_| 0.1 * n()).collect();
        let w2 = (0..hidden).map(|_| n() * s2).collect();
        Self { w1, b1, w2 }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let u: f64 = self
            .w1
            .iter()
            .zip(&self.b1)
            .zip(&self.w2)
            .map(|((row, b), w)| {
                let pre: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b;
                w * pre.tanh()
            })
            .sum();
        0.25 + softplus(u)
    }
}

/// The simulated pipeline. Everything here is a deterministic function of
/// the config seed except the explicit RNG arguments.
#[derive(Debug, Clone)]
pub struct PipelineEnv {
    cfg: EnvConfig,
    layout: Layout,
    space: ActionSpace,
    value_net: ValueNet,
    noise_sigma: f64,
}

const CALIBRATION_SAMPLES: usize = 4096;

impl PipelineEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(cfg.seed);
        let value_net = ValueNet::new(cfg.feature_dim, cfg.value_hidden, &mut rng);
        let space = cfg.action_space();
        let mut env = Self {
            layout: cfg.layout(),
            cfg,
            space,
            value_net,
            noise_sigma: 0.0,
        };
        let mut cal = seeded_rng(env.cfg.seed ^ 0x5eed_ca11);
        let mut total = 0.0;
        for _ in 0..CALIBRATION_SAMPLES {
            let s = env.sample_request(&mut cal);
            let a = env
                .space
                .from_flat(cal.random_range(0..env.space.joint_count()));
            total += env.latent(&s, &a);
        }
        env.noise_sigma = env.cfg.reward_noise_frac * total / CALIBRATION_SAMPLES as f64;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn action_space(&self) -> ActionSpace {
        self.space
    }

    /// Standard deviation of the additive reward noise.
    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn sample_request<R: Rng + ?Sized>(&self, rng: &mut R) -> RequestContext {
        let user_features = (0..self.cfg.feature_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let tiers = WeightedIndex::new(&self.cfg.tier_probs).expect("validated tier probs");
        RequestContext {
            user_features,
            value_tier: tiers.sample(rng),
            timestamp: rng.random_range(0.0..self.cfg.day_seconds),
            platform_id: rng.random_range(0..self.cfg.n_platforms()),
        }
    }

    pub fn validate_request(&self, s: &RequestContext) -> Result<()> {
        if s.user_features.len() != self.cfg.feature_dim {
            return Err(Error::shape(
                "request features",
                self.cfg.feature_dim,
                s.user_features.len(),
            ));
        }
        if s.user_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("request features".into()));
        }
        if s.value_tier >= self.cfg.n_tiers() || s.platform_id >= self.cfg.n_platforms() {
            return Err(Error::InvalidArgument(format!(
                "tier {} / platform {} outside configured cardinalities",
                s.value_tier, s.platform_id
            )));
        }
        Ok(())
    }

    /// Latent request value v(s) before stage efforts are applied.
    pub fn request_value(&self, s: &RequestContext) -> f64 {
        let diurnal = 1.0 + 0.1 * (TAU * s.timestamp / self.cfg.day_seconds).sin();
        self.cfg.revenue_scale
            * self.cfg.tier_multipliers[s.value_tier]
            * self.cfg.platform_multipliers[s.platform_id]
            * diurnal
            * self.value_net.eval(&s.user_features)
    }

    pub fn pass_rates(&self, s: &RequestContext) -> PassRates {
        let x = &s.user_features;
        PassRates {
            availability: (0.8 + 0.5 * x[0]).max(0.0),
            prerank: 0.5 + 0.45 * sigmoid(x[1]),
            rank: 0.6 + 0.4 * sigmoid(x[2]),
        }
    }

    /// Ranking action index → (model level, truncation position).
    pub fn decode_ranking(&self, idx: usize) -> (usize, usize) {
        self.layout.decode_ranking(idx)
    }

    pub fn realized_sizes(&self, s: &RequestContext, a: &JointAction) -> RealizedSizes {
        let rates = self.pass_rates(s);
        let yield_sum: f64 = self.cfg.channel_subsets[a.0[0]]
            .iter()
            .map(|&c| self.cfg.channel_yields[c])
            .sum();
        let pool = (rates.availability * yield_sum).round();
        let prerank =
            (self.cfg.prerank_truncations[a.0[1]] as f64).min((rates.prerank * pool).floor());
        let (_, t) = self.decode_ranking(a.0[2]);
        let rank = (self.cfg.rank_truncations[t] as f64).min((rates.rank * prerank).floor());
        RealizedSizes {
            pool,
            prerank,
            rank,
        }
    }

    /// Per-stage effort scores; each is non-decreasing in its own action
    /// index and in every upstream action index.
    pub fn efforts(&self, s: &RequestContext, a: &JointAction) -> [f64; N_STAGES] {
        let z = self.realized_sizes(s, a);
        let (level, _) = self.decode_ranking(a.0[2]);
        let r = &self.cfg.effort_refs;
        [
            z.pool / r[0],
            z.prerank / r[1],
            self.cfg.rank_model_quality[level] * z.rank / r[2],
        ]
    }

    /// Revenue for a request with value `value` at the given efforts.
    pub fn revenue_from_efforts(&self, value: f64, efforts: &[f64; N_STAGES]) -> f64 {
        efforts
            .iter()
            .zip(&self.cfg.kappa)
            .fold(value, |acc, (e, k)| acc * (1.0 - (-k * e).exp()))
    }

    fn latent(&self, s: &RequestContext, a: &JointAction) -> f64 {
        self.revenue_from_efforts(self.request_value(s), &self.efforts(s, a))
    }

    /// Expected revenue of action `a` on request `s`.
    pub fn true_revenue(&self, s: &RequestContext, a: &JointAction) -> Result<f64> {
        self.space.validate(a)?;
        self.validate_request(s)?;
        Ok(self.latent(s, a))
    }

    /// Latent revenue plus zero-mean Gaussian noise.
    pub fn observe_reward<R: Rng + ?Sized>(
        &self,
        s: &RequestContext,
        a: &JointAction,
        rng: &mut R,
    ) -> Result<f64> {
        let noise: f64 = StandardNormal.sample(rng);
        Ok(self.true_revenue(s, a)? + self.noise_sigma * noise)
    }

    /// Hidden per-stage compute consumed by `a` on `s`, in core-seconds.
    pub fn stage_costs(&self, s: &RequestContext, a: &JointAction) -> [f64; N_STAGES] {
        let m = &self.cfg.machine;
        let z = self.realized_sizes(s, a);
        let (level, _) = self.decode_ranking(a.0[2]);
        let channels: f64 = self.cfg.channel_subsets[a.0[0]]
            .iter()
            .map(|&c| m.channel_costs[c])
            .sum();
        [
            m.queue_cost(0, s.value_tier, z.pool) + channels,
            m.queue_cost(1, s.value_tier, z.prerank),
            m.queue_cost(2, s.value_tier, z.rank) + m.model_costs[level],
        ]
    }

    /// Normalizers for the upstream size summaries exposed to later stages.
    fn size_norms(&self) -> [f64; 2] {
        let max_yield: f64 = self.cfg.channel_yields.iter().sum();
        let max_pre = *self.cfg.prerank_truncations.last().expect("validated") as f64;
        [max_yield, max_pre]
    }

    /// Upstream summaries visible to stage `stage` (0-based): realized pool
    /// sizes of earlier stages, zero for stages not yet run.
    pub fn upstream_summary(&self, sizes: &RealizedSizes, stage: usize) -> [f64; 2] {
        let n = self.size_norms();
        let mut out = [0.0; 2];
        if stage >= 1 {
            out[0] = sizes.pool / n[0];
        }
        if stage >= 2 {
            out[1] = sizes.prerank / n[1];
        }
        out
    }

    /// Request-level descriptor; see [`Layout::request_features`].
    pub fn request_features(&self, s: &RequestContext) -> Vec<f64> {
        self.layout.request_features(s)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn request_dim(&self) -> usize {
        self.layout.request_dim()
    }

    /// Per-agent observation: features, tier one-hot, upstream summaries.
    pub fn observation(&self, s: &RequestContext, upstream: &[f64; 2]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.obs_dim());
        v.extend_from_slice(&s.user_features);
        v.extend(one_hot(s.value_tier, self.cfg.n_tiers()));
        v.extend_from_slice(upstream);
        v
    }

    pub fn obs_dim(&self) -> usize {
        self.cfg.feature_dim + self.cfg.n_tiers() + 2
    }

    /// Global state at step `step` (0-based; `N_STAGES` is the terminal state).
    pub fn state(&self, s: &RequestContext, upstream: &[f64; 2], step: usize) -> Vec<f64> {
        let mut v = self.request_features(s);
        v.extend_from_slice(upstream);
        v.extend(one_hot(step, N_STAGES + 1));
        v
    }

    pub fn state_dim(&self) -> usize {
        self.request_dim() + 2 + N_STAGES + 1
    }

    /// Unrolls the stages in order. The reward is drawn once, after the last
    /// stage has acted.
    pub fn run_episode<R: Rng + ?Sized>(
        &self,
        s: &RequestContext,
        a: &JointAction,
        rng: &mut R,
    ) -> Result<EpisodeRecord> {
        let reward = self.observe_reward(s, a, rng)?;
        let sizes = self.realized_sizes(s, a);
        let steps = (0..N_STAGES)
            .map(|g| StepRecord {
                action: a.0[g],
                upstream: self.upstream_summary(&sizes, g),
            })
            .collect();
        Ok(EpisodeRecord {
            request_id: 0,
            split: Split::Train,
            request: s.clone(),
            steps,
            reward,
            sizes: sizes.as_array(),
            stage_costs: self.stage_costs(s, a),
        })
    }
}

/// Deterministic RNG for one (master seed, stream) pair.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(stream);
    rng
}
