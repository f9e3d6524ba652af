use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pipeline::stream_rng;
use super::{ActionSpace, JointAction, PipelineEnv, RequestContext, N_STAGES};
use crate::error::{Error, Result};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One stage's decision. Observations and states are rebuilt on demand from
/// the request and these upstream summaries, which keeps files compact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: usize,
    /// Normalized realized pool sizes of the stages before this one.
    pub upstream: [f64; 2],
}

/// One request's full pass through the pipeline. There is no per-step
/// reward; `reward` is the revenue observed after the last stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub request_id: u64,
    pub split: Split,
    pub request: RequestContext,
    pub steps: Vec<StepRecord>,
    pub reward: f64,
    /// Candidates leaving each stage.
    pub sizes: [f64; N_STAGES],
    pub stage_costs: [f64; N_STAGES],
}

impl EpisodeRecord {
    pub fn action(&self) -> JointAction {
        let mut a = [0; N_STAGES];
        for (slot, step) in a.iter_mut().zip(&self.steps) {
            *slot = step.action;
        }
        JointAction(a)
    }

    pub fn observation(&self, env: &PipelineEnv, t: usize) -> Vec<f64> {
        env.observation(&self.request, &self.steps[t].upstream)
    }

    /// State before step `t`; `t == N_STAGES` is the terminal state.
    pub fn state(&self, env: &PipelineEnv, t: usize) -> Vec<f64> {
        let upstream = if t < N_STAGES {
            self.steps[t].upstream
        } else {
            let n = env.config().channel_yields.iter().sum::<f64>();
            let m = *env.config().prerank_truncations.last().unwrap_or(&1) as f64;
            [self.sizes[0] / n, self.sizes[1] / m]
        };
        env.state(&self.request, &upstream, t)
    }

    pub fn next_state(&self, env: &PipelineEnv, t: usize) -> Vec<f64> {
        self.state(env, t + 1)
    }

    pub fn total_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }
}

/// How logged actions were chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoggingPolicy {
    UniformRandom,
    /// Takes `base` with probability 1 − ε, otherwise a uniform joint action.
    EpsilonMixture {
        epsilon: f64,
        base: JointAction,
    },
}

impl LoggingPolicy {
    pub fn probability(&self, space: &ActionSpace, a: &JointAction) -> f64 {
        let uniform = 1.0 / space.joint_count() as f64;
        match self {
            Self::UniformRandom => uniform,
            Self::EpsilonMixture { epsilon, base } => {
                let hit = if a == base { 1.0 - epsilon } else { 0.0 };
                hit + epsilon * uniform
            }
        }
    }

    pub fn check_support(&self, space: &ActionSpace) -> Result<()> {
        if let Self::EpsilonMixture { epsilon, base } = self {
            if !(0.0..=1.0).contains(epsilon) {
                return Err(Error::InvalidArgument(format!(
                    "epsilon {epsilon} outside [0, 1]"
                )));
            }
            space.validate(base)?;
        }
        if let Some(a) = space.iter().find(|a| self.probability(space, a) <= 0.0) {
            return Err(Error::Support(format!(
                "logging policy never takes joint action {:?}",
                a.0
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, space: &ActionSpace, rng: &mut R) -> JointAction {
        let uniform = |rng: &mut R| space.from_flat(rng.random_range(0..space.joint_count()));
        match self {
            Self::UniformRandom => uniform(rng),
            Self::EpsilonMixture { epsilon, base } => {
                if rng.random::<f64>() < *epsilon {
                    uniform(rng)
                } else {
                    *base
                }
            }
        }
    }
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub env_config_hash: String,
    pub policy: LoggingPolicy,
    pub seed: u64,
    pub n_requests: usize,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedDataset {
    pub header: DatasetHeader,
    pub episodes: Vec<EpisodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_train: usize,
    pub n_test: usize,
    /// Counts per flat joint-action index.
    pub joint_action_counts: Vec<usize>,
    /// Per-stage action frequencies.
    pub stage_marginals: Vec<Vec<f64>>,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub reward_min: f64,
    pub reward_max: f64,
    pub mean_total_cost: f64,
}

/// Simulates `n_requests` logged episodes and splits them by request,
/// stratified on value tier.
pub fn build_logged_dataset(
    env: &PipelineEnv,
    policy: &LoggingPolicy,
    n_requests: usize,
    seed: u64,
    train_fraction: f64,
) -> Result<LoggedDataset> {
    if n_requests == 0 {
        return Err(Error::InvalidArgument(
            "n_requests must be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {train_fraction} outside [0, 1]"
        )));
    }
    let space = env.action_space();
    policy.check_support(&space)?;

    let mut episodes = Vec::with_capacity(n_requests);
    for i in 0..n_requests {
        let mut rng = stream_rng(seed, i as u64);
        let request = env.sample_request(&mut rng);
        let action = policy.sample(&space, &mut rng);
        let mut ep = env.run_episode(&request, &action, &mut rng)?;
        ep.request_id = i as u64;
        episodes.push(ep);
    }
    assign_splits(&mut episodes, train_fraction, seed);

    Ok(LoggedDataset {
        header: DatasetHeader {
            schema_version: DATASET_SCHEMA_VERSION,
            env_config_hash: env.config().content_hash(),
            policy: policy.clone(),
            seed,
            n_requests,
            train_fraction,
        },
        episodes,
    })
}

/// Per-tier shuffled split whose train total is exactly round(f·n):
/// floors per tier, then leftover slots go to the largest remainders.
fn assign_splits(episodes: &mut [EpisodeRecord], train_fraction: f64, seed: u64) {
    let mut by_tier: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, ep) in episodes.iter().enumerate() {
        by_tier.entry(ep.request.value_tier).or_default().push(i);
    }
    let target = (train_fraction * episodes.len() as f64).round() as usize;
    let mut quotas: Vec<(usize, usize, f64)> = by_tier
        .iter()
        .map(|(&tier, idx)| {
            let exact = train_fraction * idx.len() as f64;
            (tier, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut missing = target.saturating_sub(quotas.iter().map(|q| q.1).sum());
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for k in order {
        if missing == 0 {
            break;
        }
        if quotas[k].1 < by_tier[&quotas[k].0].len() {
            quotas[k].1 += 1;
            missing -= 1;
        }
    }
    let mut rng = stream_rng(seed, u64::MAX);
    for (tier, quota, _) in quotas {
        let mut idx = by_tier[&tier].clone();
        idx.shuffle(&mut rng);
        for (rank, i) in idx.into_iter().enumerate() {
            episodes[i].split = if rank < quota {
                Split::Train
            } else {
                Split::Test
            };
        }
    }
}

impl LoggedDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter().filter(move |e| e.split == split)
    }

    pub fn train(&self) -> Vec<&EpisodeRecord> {
        self.split(Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&EpisodeRecord> {
        self.split(Split::Test).collect()
    }

    /// Header line followed by one episode per line.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for ep in &self.episodes {
            serde_json::to_writer(&mut out, ep)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: DatasetHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Serde("empty dataset file".into()))?,
        )?;
        if header.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Serde(format!(
                "dataset schema version {} unsupported (expected {DATASET_SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        let episodes = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<EpisodeRecord>, _>>()?;
        if episodes.len() != header.n_requests {
            return Err(Error::Serde(format!(
                "header declares {} episodes, file has {}",
                header.n_requests,
                episodes.len()
            )));
        }
        if let Some(ep) = episodes.iter().find(|e| e.steps.len() != N_STAGES) {
            return Err(Error::Serde(format!(
                "episode {} has {} steps",
                ep.request_id,
                ep.steps.len()
            )));
        }
        Ok(Self { header, episodes })
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(crate::io::sha256_hex(&self.to_jsonl()?))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_jsonl()?;
        crate::io::write_atomic(path, &bytes)?;
        Ok(crate::io::sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&bytes)
    }

    pub fn summary(&self, space: &ActionSpace) -> DatasetSummary {
        let n = self.episodes.len().max(1) as f64;
        let mut joint = vec![0usize; space.joint_count()];
        let mut marg: Vec<Vec<f64>> = space.sizes.iter().map(|&s| vec![0.0; s]).collect();
        for ep in &self.episodes {
            let a = ep.action();
            joint[space.flat_index(&a)] += 1;
            for g in 0..N_STAGES {
                marg[g][a.0[g]] += 1.0 / n;
            }
        }
        let rewards: Vec<f64> = self.episodes.iter().map(|e| e.reward).collect();
        let mean = rewards.iter().sum::<f64>() / n;
        let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        DatasetSummary {
            n_train: self.split(Split::Train).count(),
            n_test: self.split(Split::Test).count(),
            joint_action_counts: joint,
            stage_marginals: marg,
            reward_mean: mean,
            reward_std: var.sqrt(),
            reward_min: rewards.iter().copied().fold(f64::INFINITY, f64::min),
            reward_max: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_total_cost: self.episodes.iter().map(|e| e.total_cost()).sum::<f64>() / n,
        }
    }
}
