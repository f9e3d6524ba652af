//! Adaptive-weighting recurrent Q ensembles, one per pipeline agent.
//!
//! Each agent owns `K` recurrent heads and lagged target copies. During
//! training the heads are combined with weights proportional to their
//! mini-batch TD losses; serving uses the plain mean over heads.

mod head;

pub use head::{HeadCache, QHead};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{seeded_rng, AdamConfig, AdamState, Checkpoint, Matrix, ParamSet, SeededRng};

/// How the TD target picks the next action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bootstrap {
    /// The logged next action (SARSA on offline data).
    LoggedNext,
    /// Greedy over the next agent's actions.
    MaxNext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AwrqConfig {
    pub k: usize,
    pub gru_hidden: usize,
    pub mlp_hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: usize,
    pub epsilon: f64,
    pub lr: f64,
    pub dropout: f64,
    /// `false` fixes the head weights at 1/K.
    pub adaptive: bool,
    pub bootstrap: Bootstrap,
}

impl Default for AwrqConfig {
    fn default() -> Self {
        Self {
            k: 5,
            gru_hidden: 32,
            mlp_hidden: vec![64, 32],
            gamma: 0.9,
            tau: 100,
            epsilon: 0.05,
            lr: 0.01,
            dropout: 0.0,
            adaptive: true,
            bootstrap: Bootstrap::LoggedNext,
        }
    }
}

impl AwrqConfig {
    /// Production-sized settings.
    pub fn full_scale() -> Self {
        Self {
            k: 20,
            gru_hidden: 256,
            mlp_hidden: vec![512, 256],
            dropout: 0.2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.gru_hidden == 0 || self.tau == 0 {
            return Err(Error::InvalidArgument(
                "k, gru_hidden and tau must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma)
            || !(0.0..=1.0).contains(&self.epsilon)
            || !(0.0..1.0).contains(&self.dropout)
        {
            return Err(Error::InvalidArgument(
                "gamma, epsilon in [0,1]; dropout in [0,1)".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        Ok(())
    }
}

/// (r + γ·q_next − q)², with the bootstrap dropped at terminal steps.
pub fn head_td_loss(r: f64, gamma: f64, q_next_target: f64, q_current: f64, terminal: bool) -> f64 {
    let target = if terminal {
        r
    } else {
        r + gamma * q_next_target
    };
    (target - q_current).powi(2)
}

/// Non-negative head weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights(pub Vec<f64>);

impl HeadWeights {
    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }
}

/// Losses normalized to sum to one; all-zero losses give 1/K each.
pub fn adaptive_weights(losses: &[f64]) -> Result<HeadWeights> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("no head losses".into()));
    }
    if let Some(l) = losses.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "head loss {l} is negative or non-finite"
        )));
    }
    let total: f64 = losses.iter().sum();
    if total == 0.0 {
        return Ok(HeadWeights::uniform(losses.len()));
    }
    Ok(HeadWeights(losses.iter().map(|l| l / total).collect()))
}

/// Σ_k η_k·Q^k.
pub fn agent_q(head_values: &[f64], eta: &HeadWeights) -> f64 {
    head_values.iter().zip(&eta.0).map(|(q, w)| q * w).sum()
}

/// Greedy with probability 1 − ε (lowest index on ties), uniform otherwise.
pub fn epsilon_greedy<R: Rng + ?Sized>(
    q_values: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    if q_values.is_empty() {
        return Err(Error::InvalidArgument("empty action set".into()));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [0, 1]"
        )));
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..q_values.len()));
    }
    Ok(argmax(q_values))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// What one agent update produced.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStepStats {
    pub head_losses: Vec<f64>,
    pub eta: HeadWeights,
    /// η-weighted Q at the logged action, per sample, before the update.
    pub weighted_q: Vec<f64>,
    pub grad_norm: f64,
}

/// Mini-batch input for one agent: its observation sequence (one `B x I`
/// matrix per step up to and including its own), the logged actions, the
/// step rewards and, for non-terminal steps, each target head's value of
/// the next step.
pub struct AgentBatch<'a> {
    pub obs_seq: &'a [Matrix],
    pub actions: &'a [usize],
    pub rewards: &'a [f64],
    pub next_targets: Option<&'a [Vec<f64>]>,
}

/// K recurrent heads of one agent plus their target copies.
#[derive(Debug, Clone)]
pub struct QEnsemble {
    pub agent: usize,
    pub heads: Vec<QHead>,
    pub targets: Vec<QHead>,
    pub config: AwrqConfig,
    adam: AdamState,
    rng: SeededRng,
}

impl QEnsemble {
    pub fn new(
        agent: usize,
        obs_dim: usize,
        n_actions: usize,
        config: AwrqConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let heads: Vec<QHead> = (0..config.k)
            .map(|_| {
                QHead::new(
                    obs_dim,
                    config.gru_hidden,
                    &config.mlp_hidden,
                    n_actions,
                    &mut rng,
                )
            })
            .collect();
        let adam = AdamState::new(&heads, AdamConfig::with_lr(config.lr));
        Ok(Self {
            agent,
            targets: heads.clone(),
            heads,
            config,
            adam,
            rng,
        })
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn n_actions(&self) -> usize {
        self.heads[0].n_actions()
    }

    pub fn obs_dim(&self) -> usize {
        self.heads[0].obs_dim()
    }

    /// One recurrence step for every head: `K` score matrices and hidden states.
    pub fn agent_forward(
        &self,
        obs: &Matrix,
        hidden: &[Matrix],
    ) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
        if hidden.len() != self.k() {
            return Err(Error::shape(
                "ensemble hidden states",
                self.k(),
                hidden.len(),
            ));
        }
        let mut qs = Vec::with_capacity(self.k());
        let mut hs = Vec::with_capacity(self.k());
        for (head, h) in self.heads.iter().zip(hidden) {
            let (q, h2) = head.step(obs, h)?;
            qs.push(q);
            hs.push(h2);
        }
        Ok((qs, hs))
    }

    pub fn zero_hidden(&self, batch: usize) -> Vec<Matrix> {
        vec![Matrix::zeros((batch, self.config.gru_hidden)); self.k()]
    }

    /// Per-head scores after unrolling the whole sequence from zero state.
    pub fn head_values(&self, obs_seq: &[Matrix]) -> Result<Vec<Matrix>> {
        self.heads.iter().map(|h| h.unroll(obs_seq)).collect()
    }

    /// Mean over heads of the unrolled scores: `B x |A|`.
    pub fn serve_q(&self, obs_seq: &[Matrix]) -> Result<Matrix> {
        let per_head = self.head_values(obs_seq)?;
        let mut sum = per_head[0].clone();
        for q in &per_head[1..] {
            sum += q;
        }
        Ok(sum / self.k() as f64)
    }

    /// Incremental serving: advances `hidden` by one step and returns the
    /// head-mean scores for a single observation row.
    pub fn serve_step(&self, obs: &[f64], hidden: &mut Vec<Matrix>) -> Result<Vec<f64>> {
        let o = Array2::from_shape_vec((1, obs.len()), obs.to_vec())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let (qs, hs) = self.agent_forward(&o, hidden)?;
        *hidden = hs;
        let k = self.k() as f64;
        Ok((0..self.n_actions())
            .map(|a| qs.iter().map(|q| q[[0, a]]).sum::<f64>() / k)
            .collect())
    }

    /// Weighted Q at the given actions.
    pub fn agent_q(
        &self,
        obs_seq: &[Matrix],
        actions: &[usize],
        eta: &HeadWeights,
    ) -> Result<Vec<f64>> {
        let per_head = self.head_values(obs_seq)?;
        (0..actions.len())
            .map(|b| {
                let a = actions[b];
                if a >= self.n_actions() {
                    return Err(Error::ActionOutOfRange {
                        stage: self.agent,
                        index: a,
                        size: self.n_actions(),
                    });
                }
                let vals: Vec<f64> = per_head.iter().map(|q| q[[b, a]]).collect();
                Ok(agent_q(&vals, eta))
            })
            .collect()
    }

    /// Target-head values used to bootstrap the previous agent: `K x B`.
    pub fn target_values(
        &self,
        obs_seq: &[Matrix],
        actions: &[usize],
        mode: Bootstrap,
    ) -> Result<Vec<Vec<f64>>> {
        self.targets
            .iter()
            .map(|t| {
                let q = t.unroll(obs_seq)?;
                Ok(match mode {
                    Bootstrap::LoggedNext => actions
                        .iter()
                        .enumerate()
                        .map(|(b, &a)| q[[b, a]])
                        .collect(),
                    Bootstrap::MaxNext => q
                        .rows()
                        .into_iter()
                        .map(|r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
                        .collect(),
                })
            })
            .collect()
    }

    /// Hard copy on multiples of τ. Returns whether a copy happened.
    pub fn sync_targets(&mut self, iter: usize) -> bool {
        if iter.is_multiple_of(self.config.tau) {
            self.targets.clone_from(&self.heads);
            true
        } else {
            false
        }
    }

    /// One adaptive-weighted TD update of every head.
    ///
    /// The loss minimized is Σ_k K·η_k·L_k with η held fixed, so uniform
    /// weights reduce to the plain sum of head losses.
    pub fn train_step(&mut self, batch: &AgentBatch) -> Result<AgentStepStats> {
        let b = batch.actions.len();
        if batch.rewards.len() != b || batch.obs_seq.iter().any(|o| o.nrows() != b) {
            return Err(Error::shape("agent batch", b, batch.rewards.len()));
        }
        if let Some(n) = batch.next_targets {
            if n.len() != self.k() || n.iter().any(|v| v.len() != b) {
                return Err(Error::shape(
                    "next targets",
                    format!("{}x{b}", self.k()),
                    format!("{}x?", n.len()),
                ));
            }
        }
        if let Some(&a) = batch.actions.iter().find(|&&a| a >= self.n_actions()) {
            return Err(Error::ActionOutOfRange {
                stage: self.agent,
                index: a,
                size: self.n_actions(),
            });
        }
        let gamma = self.config.gamma;
        let k = self.k();
        let mut outs = Vec::with_capacity(k);
        let mut losses = Vec::with_capacity(k);
        for (i, head) in self.heads.iter().enumerate() {
            let (q, cache) =
                head.unroll_train(batch.obs_seq, self.config.dropout, Some(&mut self.rng))?;
            let mut residual = vec![0.0; b];
            let mut loss = 0.0;
            for s in 0..b {
                let (next, terminal) = match batch.next_targets {
                    Some(n) => (n[i][s], false),
                    None => (0.0, true),
                };
                let q_sa = q[[s, batch.actions[s]]];
                loss += head_td_loss(batch.rewards[s], gamma, next, q_sa, terminal);
                let target = if terminal {
                    batch.rewards[s]
                } else {
                    batch.rewards[s] + gamma * next
                };
                residual[s] = q_sa - target;
            }
            losses.push(loss / b as f64);
            outs.push((q, cache, residual));
        }
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("agent {} head loss", self.agent)));
        }
        let eta = if self.config.adaptive {
            adaptive_weights(&losses)?
        } else {
            HeadWeights::uniform(k)
        };

        let mut grads = self.heads.zeros_like();
        let mut weighted_q = vec![0.0; b];
        for (i, (q, cache, residual)) in outs.iter().enumerate() {
            let coef = k as f64 * eta.0[i] * 2.0 / b as f64;
            let mut gq = Matrix::zeros(q.raw_dim());
            for s in 0..b {
                gq[[s, batch.actions[s]]] = coef * residual[s];
                weighted_q[s] += eta.0[i] * q[[s, batch.actions[s]]];
            }
            self.heads[i].backward(cache, &gq, &mut grads[i]);
        }
        let grad_norm = grads.l2_norm_sq().sqrt();
        self.adam.update(&mut self.heads, &grads)?;
        Ok(AgentStepStats {
            head_losses: losses,
            eta,
            weighted_q,
            grad_norm,
        })
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        ckpt.push_params(&format!("{prefix}.heads"), &self.heads);
        ckpt.push_params(&format!("{prefix}.targets"), &self.targets);
        self.adam.save_into(ckpt, &format!("{prefix}.adam"));
        ckpt.put_rng(&format!("{prefix}.rng"), &self.rng);
        ckpt.meta.insert(
            format!("{prefix}.config"),
            serde_json::to_string(&self.config)?,
        );
        Ok(())
    }

    /// Restores into an ensemble built with matching shapes.
    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        ckpt.load_params(&format!("{prefix}.heads"), &mut self.heads)?;
        ckpt.load_params(&format!("{prefix}.targets"), &mut self.targets)?;
        self.adam.load_from(ckpt, &format!("{prefix}.adam"))?;
        self.rng = ckpt.get_rng(&format!("{prefix}.rng"))?;
        Ok(())
    }

    pub fn params_equal(&self, other: &Self) -> bool {
        self.heads == other.heads && self.targets == other.targets
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn obs(rng: &mut SeededRng, b: usize, d: usize) -> Matrix {
        Matrix::from_shape_fn((b, d), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn td_loss_cases() {
        assert_eq!(head_td_loss(1.0, 0.9, 0.0, 1.0, false), 0.0);
        assert!((head_td_loss(0.0, 0.9, 1.0, 0.0, false) - 0.81).abs() < 1e-15);
        assert_eq!(head_td_loss(2.0, 0.9, 100.0, 0.0, true), 4.0);
    }

    #[test]
    fn weights_cases() {
        assert_eq!(adaptive_weights(&[1.0, 3.0]).unwrap().0, vec![0.25, 0.75]);
        assert_eq!(adaptive_weights(&[2.0; 4]).unwrap().0, vec![0.25; 4]);
        assert_eq!(
            adaptive_weights(&[0.0; 3]).unwrap(),
            HeadWeights::uniform(3)
        );
        assert!(adaptive_weights(&[1.0, -1.0]).is_err());
        let w = adaptive_weights(&[0.3, 1e-300, 7.0]).unwrap();
        assert!((w.0.iter().sum::<f64>() - 1.0).abs() < 1e-9 && w.0.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn agent_q_matches_dot_product() {
        assert_eq!(
            agent_q(&[1.0, 2.0, 3.0], &HeadWeights(vec![0.0, 1.0, 0.0])),
            2.0
        );
        let (v, w) = ([0.3, -1.2, 4.0], [0.2, 0.5, 0.3]);
        let dot = 0.3 * 0.2 + -1.2 * 0.5 + 4.0 * 0.3;
        assert!((agent_q(&v, &HeadWeights(w.to_vec())) - dot).abs() < 1e-15);
    }

    #[test]
    fn epsilon_greedy_cases() {
        let mut rng = seeded_rng(0);
        assert_eq!(
            epsilon_greedy(&[0.0, 2.0, 2.0, 1.0], 0.0, &mut rng).unwrap(),
            1
        );
        assert!(epsilon_greedy(&[], 0.5, &mut rng).is_err());
        let mut counts = [0f64; 5];
        let n = 10_000;
        for _ in 0..n {
            counts[epsilon_greedy(&[5.0, 1.0, 0.0, 0.0, 0.0], 1.0, &mut rng).unwrap()] += 1.0;
        }
        let e = n as f64 / 5.0;
        let chi: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi);
        assert!(p > 0.01, "chi2 p = {p}");
    }

    #[test]
    fn ensemble_forward_and_serving() {
        let cfg = AwrqConfig {
            k: 4,
            gru_hidden: 6,
            mlp_hidden: vec![8],
            ..Default::default()
        };
        let e = QEnsemble::new(1, 5, 3, cfg, 9).unwrap();
        let mut rng = seeded_rng(1);
        let seq = vec![obs(&mut rng, 2, 5), obs(&mut rng, 2, 5)];
        let per_head = e.head_values(&seq).unwrap();
        let mean = e.serve_q(&seq).unwrap();
        for b in 0..2 {
            for a in 0..3 {
                let m = per_head.iter().map(|q| q[[b, a]]).sum::<f64>() / 4.0;
                assert_eq!(mean[[b, a]], m);
            }
        }
        // Incremental serving equals unrolled serving and resets cleanly.
        for _ in 0..2 {
            let mut h = e.zero_hidden(1);
            let mut last = vec![];
            for o in &seq {
                last = e.serve_step(&o.row(0).to_vec(), &mut h).unwrap();
            }
            for a in 0..3 {
                assert!((last[a] - mean[[0, a]]).abs() < 1e-12);
            }
        }
        // Identical heads give identical outputs; K=1 is the single head.
        let mut same = e.clone();
        let h0 = same.heads[0].clone();
        same.heads.iter_mut().for_each(|h| *h = h0.clone());
        let outs = same.head_values(&seq).unwrap();
        assert!(outs.iter().all(|q| q == outs[0]));
        assert_eq!(same.serve_q(&seq).unwrap(), outs[0]);
        assert!(e
            .agent_forward(&obs(&mut rng, 2, 4), &e.zero_hidden(2))
            .is_err());
    }

    #[test]
    fn target_sync_schedule() {
        let cfg = AwrqConfig {
            k: 2,
            gru_hidden: 4,
            mlp_hidden: vec![4],
            tau: 100,
            ..Default::default()
        };
        let mut e = QEnsemble::new(0, 3, 2, cfg, 2).unwrap();
        let mut rng = seeded_rng(5);
        let seq = vec![obs(&mut rng, 8, 3)];
        let batch = AgentBatch {
            obs_seq: &seq,
            actions: &[0, 1, 0, 1, 0, 1, 0, 1],
            rewards: &[1.0; 8],
            next_targets: None,
        };
        e.train_step(&batch).unwrap();
        let before = e.targets.clone();
        assert!(!e.sync_targets(101));
        assert_eq!(e.targets, before);
        assert_ne!(e.targets, e.heads);
        assert!(e.sync_targets(100));
        assert_eq!(e.targets, e.heads);
        let t = e
            .target_values(&seq, &[0; 8], Bootstrap::LoggedNext)
            .unwrap();
        let o = e.head_values(&seq).unwrap();
        for k in 0..2 {
            for b in 0..8 {
                assert_eq!(t[k][b], o[k][[b, 0]]);
            }
        }
    }

    #[test]
    fn training_reduces_td_loss() {
        let cfg = AwrqConfig {
            k: 3,
            gru_hidden: 8,
            mlp_hidden: vec![16],
            ..Default::default()
        };
        let mut e = QEnsemble::new(0, 4, 2, cfg, 3).unwrap();
        let mut rng = seeded_rng(6);
        let seq = vec![obs(&mut rng, 32, 4)];
        let actions: Vec<usize> = (0..32).map(|i| i % 2).collect();
        let rewards: Vec<f64> = (0..32)
            .map(|i| seq[0][[i, 0]] + actions[i] as f64)
            .collect();
        let batch = AgentBatch {
            obs_seq: &seq,
            actions: &actions,
            rewards: &rewards,
            next_targets: None,
        };
        let first = e.train_step(&batch).unwrap();
        let mut last = first.clone();
        for _ in 0..200 {
            last = e.train_step(&batch).unwrap();
        }
        let mean = |s: &AgentStepStats| s.head_losses.iter().sum::<f64>();
        assert!(mean(&last) < 0.1 * mean(&first));
        assert!((last.eta.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let cfg = AwrqConfig {
            k: 2,
            gru_hidden: 4,
            mlp_hidden: vec![4],
            ..Default::default()
        };
        let mut e = QEnsemble::new(2, 3, 4, cfg.clone(), 2).unwrap();
        let mut rng = seeded_rng(5);
        let seq = vec![obs(&mut rng, 4, 3)];
        let batch = AgentBatch {
            obs_seq: &seq,
            actions: &[0, 1, 2, 3],
            rewards: &[1.0; 4],
            next_targets: None,
        };
        e.train_step(&batch).unwrap();
        let mut ck = Checkpoint::new("agent");
        e.save_into(&mut ck, "a").unwrap();
        let ck = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let mut back = QEnsemble::new(2, 3, 4, cfg, 99).unwrap();
        back.load_from(&ck, "a").unwrap();
        assert!(back.params_equal(&e));
        let s1 = e.train_step(&batch).unwrap();
        let s2 = back.train_step(&batch).unwrap();
        assert_eq!(s1, s2);
        assert!(back.params_equal(&e));
    }
}
