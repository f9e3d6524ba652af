//! Column-major views of logged episodes for mini-batch training.

use ndarray::Axis;
use rand::Rng;

use crate::envsim::{EpisodeRecord, PipelineEnv, N_STAGES};
use crate::error::{Error, Result};
use crate::nncore::{matrix_from_rows, Matrix};

/// Logged episodes laid out per step: `obs[t]` is `B x obs_dim`,
/// `states` holds the request-level descriptor rows.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    pub obs: Vec<Matrix>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub states: Matrix,
}

impl EpisodeBatch {
    pub fn from_episodes(env: &PipelineEnv, episodes: &[&EpisodeRecord]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::InsufficientData("no training episodes".into()));
        }
        let space = env.action_space();
        let mut obs = Vec::with_capacity(N_STAGES);
        let mut actions = Vec::with_capacity(N_STAGES);
        for t in 0..N_STAGES {
            let rows: Vec<Vec<f64>> = episodes.iter().map(|e| e.observation(env, t)).collect();
            obs.push(matrix_from_rows(&rows)?);
            actions.push(episodes.iter().map(|e| e.steps[t].action).collect());
        }
        for e in episodes {
            space.validate(&e.action())?;
        }
        let rows: Vec<Vec<f64>> = episodes.iter().map(|e| env.request_features(&e.request)).collect();
        Ok(Self {
            obs,
            actions,
            rewards: episodes.iter().map(|e| e.reward).collect(),
            states: matrix_from_rows(&rows)?,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn gather(&self, idx: &[usize]) -> Self {
        Self {
            obs: self.obs.iter().map(|m| m.select(Axis(0), idx)).collect(),
            actions: self.actions.iter().map(|a| idx.iter().map(|&i| a[i]).collect()).collect(),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            states: self.states.select(Axis(0), idx),
        }
    }

    /// Uniform draw with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Self {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        self.gather(&idx)
    }

    /// Flat joint-action index per row.
    pub fn joint_actions(&self, env: &PipelineEnv) -> Vec<usize> {
        let space = env.action_space();
        (0..self.len())
            .map(|i| {
                let a = crate::envsim::JointAction([self.actions[0][i], self.actions[1][i], self.actions[2][i]]);
                space.flat_index(&a)
            })
            .collect()
    }
}
