//! Reference learners trained on the same logged data as the mixer.
//!
//! Single-agent methods score the flattened joint action space from the
//! request descriptor. Multi-agent methods use feed-forward per-stage agents
//! combined by an additive or monotone mixer and trained end to end.

mod multi;
mod single;

pub use multi::{MultiAgentModel, MultiAgentTrainer, MultiMixer};
pub use single::{ddqn_target, dqn_target, rem_coefficients, QNet, SingleAgentModel, SingleAgentTrainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dqn,
    Ddqn,
    Drqn,
    AvgEnsemble,
    Rem,
    Vdn,
    Qmix,
    WeightedQmix,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Dqn,
        Method::Ddqn,
        Method::Drqn,
        Method::AvgEnsemble,
        Method::Rem,
        Method::Vdn,
        Method::Qmix,
        Method::WeightedQmix,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Dqn => "dqn",
            Method::Ddqn => "ddqn",
            Method::Drqn => "drqn",
            Method::AvgEnsemble => "avg_ensemble",
            Method::Rem => "rem",
            Method::Vdn => "vdn",
            Method::Qmix => "qmix",
            Method::WeightedQmix => "weighted_qmix",
        }
    }

    pub fn is_multi_agent(self) -> bool {
        matches!(self, Method::Vdn | Method::Qmix | Method::WeightedQmix)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub method: Method,
    pub mlp_hidden: Vec<usize>,
    pub gru_hidden: usize,
    /// Heads for the ensemble methods; the plain single-network methods use 1.
    pub ensemble_size: usize,
    pub gamma: f64,
    pub tau: usize,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub mix_hidden: usize,
    pub hyper_hidden: usize,
    /// Down-weight for samples the weighted mixer deems unimportant.
    pub wqmix_alpha: f64,
    /// Largest joint action space the single-agent methods accept.
    pub max_joint_actions: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            method: Method::Dqn,
            mlp_hidden: vec![64, 32],
            gru_hidden: 32,
            ensemble_size: 5,
            gamma: 0.9,
            tau: 100,
            lr: 0.005,
            iterations: 2000,
            batch_size: 128,
            mix_hidden: 32,
            hyper_hidden: 64,
            wqmix_alpha: 0.5,
            max_joint_actions: 4096,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 || self.gru_hidden == 0 || self.tau == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "ensemble_size, gru_hidden, tau and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.wqmix_alpha) {
            return Err(Error::InvalidArgument("lr > 0, gamma and wqmix_alpha in [0,1]".into()));
        }
        Ok(())
    }

    /// Number of Q heads the method trains.
    pub fn heads(&self) -> usize {
        match self.method {
            Method::AvgEnsemble | Method::Rem => self.ensemble_size,
            _ => 1,
        }
    }
}

/// One line of a baseline training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineLogRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}
