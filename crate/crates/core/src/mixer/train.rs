use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::hypernet::{Hypernet, WeightTransform};
use super::vgca::{vgca_weights, VgcaWeights};
use crate::awrq::{AgentBatch, AwrqConfig, QEnsemble};
use crate::envsim::{EpisodeRecord, PipelineEnv, RequestContext, N_STAGES};
use crate::error::{Error, Result};
use crate::nncore::{derive_seed, seeded_rng, AdamConfig, AdamState, Checkpoint, Matrix, ParamSet, SeededRng};
use crate::qtable::{request_matrix, CounterfactualObs, QTableSource};
use crate::replay::EpisodeBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub awrq: AwrqConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub mix_hidden: usize,
    pub hyper_hidden: usize,
    pub mixer_lr: f64,
    pub transform: WeightTransform,
    /// `false` sets every step weight to 1.
    pub vgca: bool,
    pub seed: u64,
    /// Window for the mixer gradient-norm variance.
    pub grad_window: usize,
    /// Snapshot cadence in iterations; 0 disables in-memory snapshots.
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            awrq: AwrqConfig::default(),
            iterations: 2000,
            batch_size: 128,
            mix_hidden: 32,
            hyper_hidden: 64,
            mixer_lr: 0.005,
            transform: WeightTransform::Softplus,
            vgca: true,
            seed: 0,
            grad_window: 200,
            checkpoint_every: 500,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.awrq.validate()?;
        if self.batch_size == 0 || self.mix_hidden == 0 || self.hyper_hidden == 0 || self.grad_window < 2 {
            return Err(Error::InvalidArgument(
                "batch_size, mix_hidden, hyper_hidden must be positive and grad_window >= 2".into(),
            ));
        }
        if !(self.mixer_lr > 0.0) {
            return Err(Error::InvalidArgument("mixer_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Trained per-stage agents plus the state-conditioned mixer.
#[derive(Debug, Clone)]
pub struct AwrqMixer {
    pub agents: Vec<QEnsemble>,
    pub hypernet: Hypernet,
}

impl AwrqMixer {
    pub fn new(env: &PipelineEnv, cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let sizes = env.action_space().sizes;
        let agents = (0..N_STAGES)
            .map(|g| QEnsemble::new(g, env.obs_dim(), sizes[g], cfg.awrq.clone(), derive_seed(cfg.seed, g as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = seeded_rng(derive_seed(cfg.seed, N_STAGES as u64));
        let hypernet = Hypernet::new(env.request_dim(), cfg.hyper_hidden, N_STAGES, cfg.mix_hidden, cfg.transform, &mut rng);
        Ok(Self { agents, hypernet })
    }

    /// Head-mean agent scores over every upstream prefix.
    pub fn agent_scores(&self, cf: &CounterfactualObs) -> Result<Vec<Matrix>> {
        self.agents.iter().zip(&cf.seqs).map(|(a, seq)| a.serve_q(seq)).collect()
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for (g, a) in self.agents.iter().enumerate() {
            a.save_into(ckpt, &format!("agent{g}"))?;
        }
        ckpt.push_params("hypernet", &self.hypernet);
        Ok(())
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (g, a) in self.agents.iter_mut().enumerate() {
            a.load_from(ckpt, &format!("agent{g}"))?;
        }
        ckpt.load_params("hypernet", &mut self.hypernet)
    }

    pub fn params_equal(&self, other: &Self) -> bool {
        self.hypernet == other.hypernet && self.agents.iter().zip(&other.agents).all(|(a, b)| a.params_equal(b))
    }
}

impl QTableSource for AwrqMixer {
    fn q_tables(&self, env: &PipelineEnv, requests: &[&RequestContext]) -> Result<Vec<Vec<f64>>> {
        let cf = CounterfactualObs::build(env, requests)?;
        let scores = self.agent_scores(&cf)?;
        let weights = self.hypernet.hypernet_forward(&request_matrix(env, requests))?;
        Ok(cf.assemble(&scores, |i, q| weights[i].mix(q)))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub head_loss_0: f64,
    pub head_loss_1: f64,
    pub head_loss_2: f64,
    pub eta_max_0: f64,
    pub eta_max_1: f64,
    pub eta_max_2: f64,
    pub l_tot: f64,
    pub mixer_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub iteration: usize,
    pub wall_seconds: f64,
}

/// Offline centralized training of the agents and mixer.
pub struct Trainer {
    pub config: TrainerConfig,
    pub model: AwrqMixer,
    pub vgca: VgcaWeights,
    target_hypernet: Hypernet,
    hyper_adam: AdamState,
    data: EpisodeBatch,
    rng: SeededRng,
    iteration: usize,
    log: Vec<TrainLogRow>,
    timing: Vec<TimingRow>,
    last_good: Option<Checkpoint>,
}

impl Trainer {
    pub fn new(env: &PipelineEnv, episodes: &[&EpisodeRecord], config: TrainerConfig) -> Result<Self> {
        let model = AwrqMixer::new(env, &config)?;
        let data = EpisodeBatch::from_episodes(env, episodes)?;
        let vgca = if config.vgca {
            let samples: Vec<_> = episodes.iter().map(|e| (e.action(), e.reward)).collect();
            vgca_weights(&samples, &env.action_space())?
        } else {
            VgcaWeights::uniform()
        };
        let hyper_adam = AdamState::new(&model.hypernet, AdamConfig::with_lr(config.mixer_lr));
        Ok(Self {
            target_hypernet: model.hypernet.clone(),
            hyper_adam,
            rng: seeded_rng(derive_seed(config.seed, 100)),
            config,
            model,
            vgca,
            data,
            iteration: 0,
            log: Vec::new(),
            timing: Vec::new(),
            last_good: None,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[TrainLogRow] {
        &self.log
    }

    pub fn timing(&self) -> &[TimingRow] {
        &self.timing
    }

    pub fn target_hypernet(&self) -> &Hypernet {
        &self.target_hypernet
    }

    /// Most recent snapshot taken before a failure, if any.
    pub fn last_good(&self) -> Option<&Checkpoint> {
        self.last_good.as_ref()
    }

    pub fn mixer_grad_norms(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.mixer_grad_norm).collect()
    }

    /// One iteration: agent updates on VGCA-scaled rewards, then the mixer
    /// update on the raw terminal reward.
    pub fn step(&mut self) -> Result<&TrainLogRow> {
        let start = Instant::now();
        let batch = self.data.sample(self.config.batch_size, &mut self.rng);
        let b = batch.len();
        let mode = self.config.awrq.bootstrap;
        let mut stats = Vec::with_capacity(N_STAGES);
        for g in 0..N_STAGES {
            let next = if g + 1 < N_STAGES {
                Some(self.model.agents[g + 1].target_values(&batch.obs[..=g + 1], &batch.actions[g + 1], mode)?)
            } else {
                None
            };
            let w = self.vgca.weights[g];
            let rewards: Vec<f64> = batch.rewards.iter().map(|r| w * r).collect();
            let s = self.model.agents[g].train_step(&AgentBatch {
                obs_seq: &batch.obs[..=g],
                actions: &batch.actions[g],
                rewards: &rewards,
                next_targets: next.as_deref(),
            })?;
            stats.push(s);
        }

        let q = Matrix::from_shape_fn((b, N_STAGES), |(i, g)| stats[g].weighted_q[i]);
        let (q_tot, cache) = self.model.hypernet.forward_train(&q, &batch.states)?;
        let mut l_tot = 0.0;
        let grad_out: Vec<f64> = q_tot
            .iter()
            .zip(&batch.rewards)
            .map(|(qt, r)| {
                l_tot += (r - qt).powi(2);
                2.0 * (qt - r) / b as f64
            })
            .collect();
        l_tot /= b as f64;
        if !l_tot.is_finite() {
            return Err(Error::NonFinite(format!("mixer loss at iteration {}", self.iteration + 1)));
        }
        let mut grads = self.model.hypernet.zeros_like();
        self.model.hypernet.backward(&q, &cache, &grad_out, &mut grads);
        let mixer_grad_norm = grads.l2_norm_sq().sqrt();
        self.hyper_adam.update(&mut self.model.hypernet, &grads)?;

        self.iteration += 1;
        for a in &mut self.model.agents {
            a.sync_targets(self.iteration);
        }
        if self.iteration.is_multiple_of(self.config.awrq.tau) {
            self.target_hypernet.clone_from(&self.model.hypernet);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let eta_max = |g: usize| stats[g].eta.0.iter().cloned().fold(0.0, f64::max);
        self.log.push(TrainLogRow {
            iteration: self.iteration,
            head_loss_0: mean(&stats[0].head_losses),
            head_loss_1: mean(&stats[1].head_losses),
            head_loss_2: mean(&stats[2].head_losses),
            eta_max_0: eta_max(0),
            eta_max_1: eta_max(1),
            eta_max_2: eta_max(2),
            l_tot,
            mixer_grad_norm,
        });
        self.timing.push(TimingRow {
            iteration: self.iteration,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        Ok(self.log.last().expect("just pushed"))
    }

    /// Runs to `config.iterations`, calling `hook` every `hook_every`
    /// iterations (and once at the start) when `hook_every > 0`.
    pub fn run(&mut self, hook_every: usize, mut hook: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        if hook_every > 0 && self.iteration == 0 {
            hook(self)?;
        }
        while self.iteration < self.config.iterations {
            self.step()?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.iteration.is_multiple_of(every) {
                self.last_good = Some(self.checkpoint()?);
            }
            if hook_every > 0 && self.iteration.is_multiple_of(hook_every) {
                hook(self)?;
            }
        }
        Ok(())
    }

    /// Mean (R − Q_tot)² on fixed rows, using serving (head-mean) agent values.
    pub fn probe_loss(&self, rows: &[usize]) -> Result<f64> {
        let batch = self.data.gather(rows);
        let mut q = Matrix::zeros((batch.len(), N_STAGES));
        for (g, agent) in self.model.agents.iter().enumerate() {
            let scores = agent.serve_q(&batch.obs[..=g])?;
            for i in 0..batch.len() {
                q[[i, g]] = scores[[i, batch.actions[g][i]]];
            }
        }
        let q_tot = self.model.hypernet.mix_batch(&q, &batch.states)?;
        Ok(q_tot.iter().zip(&batch.rewards).map(|(a, r)| (r - a).powi(2)).sum::<f64>() / batch.len() as f64)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new("awrq_mixer");
        ckpt.meta.insert("iteration".into(), self.iteration.to_string());
        ckpt.meta.insert("trainer_config".into(), serde_json::to_string(&self.config)?);
        ckpt.meta.insert("vgca".into(), serde_json::to_string(&self.vgca)?);
        self.model.save_into(&mut ckpt)?;
        ckpt.push_params("target_hypernet", &self.target_hypernet);
        self.hyper_adam.save_into(&mut ckpt, "hyper_adam");
        ckpt.put_rng("trainer", &self.rng);
        Ok(ckpt)
    }

    /// Restores a trainer built with the same config and data.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let cfg: TrainerConfig = serde_json::from_str(ckpt.meta.get("trainer_config").map(String::as_str).unwrap_or(""))?;
        if cfg != self.config {
            return Err(Error::InvalidArgument("checkpoint was written with a different trainer config".into()));
        }
        self.model.load_from(ckpt)?;
        ckpt.load_params("target_hypernet", &mut self.target_hypernet)?;
        self.hyper_adam.load_from(ckpt, "hyper_adam")?;
        self.rng = ckpt.get_rng("trainer")?;
        self.iteration = ckpt.meta_parse("iteration")?;
        self.log.clear();
        self.timing.clear();
        Ok(())
    }
}

/// Rebuilds a serving model from a trainer checkpoint.
pub fn load_model(env: &PipelineEnv, ckpt: &Checkpoint) -> Result<AwrqMixer> {
    let cfg: TrainerConfig = serde_json::from_str(ckpt.meta.get("trainer_config").map(String::as_str).unwrap_or(""))?;
    let mut model = AwrqMixer::new(env, &cfg)?;
    model.load_from(ckpt)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{build_logged_dataset, EnvConfig, LoggingPolicy};

    fn small_cfg(iterations: usize) -> TrainerConfig {
        TrainerConfig {
            awrq: AwrqConfig { k: 2, gru_hidden: 8, mlp_hidden: vec![16], tau: 10, ..AwrqConfig::default() },
            iterations,
            batch_size: 32,
            mix_hidden: 8,
            hyper_hidden: 16,
            checkpoint_every: 0,
            ..TrainerConfig::default()
        }
    }

    fn setup() -> (PipelineEnv, crate::envsim::LoggedDataset) {
        let env = PipelineEnv::new(EnvConfig::default()).unwrap();
        let ds = build_logged_dataset(&env, &LoggingPolicy::UniformRandom, 600, 3, 0.8).unwrap();
        (env, ds)
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let (env, ds) = setup();
        let cfg = small_cfg(0);
        let mut t = Trainer::new(&env, &ds.train(), cfg.clone()).unwrap();
        t.run(0, |_| Ok(())).unwrap();
        assert!(t.model.params_equal(&AwrqMixer::new(&env, &cfg).unwrap()));
    }

    #[test]
    fn identical_seeds_are_bitwise_identical() {
        let (env, ds) = setup();
        let run = || {
            let mut t = Trainer::new(&env, &ds.train(), small_cfg(15)).unwrap();
            t.run(0, |_| Ok(())).unwrap();
            (t.checkpoint().unwrap().to_json().unwrap(), t.log().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (env, ds) = setup();
        let mut full = Trainer::new(&env, &ds.train(), small_cfg(20)).unwrap();
        full.run(0, |_| Ok(())).unwrap();

        let mut first = Trainer::new(&env, &ds.train(), small_cfg(20)).unwrap();
        for _ in 0..7 {
            first.step().unwrap();
        }
        let bytes = first.checkpoint().unwrap().to_json().unwrap();
        let mut resumed = Trainer::new(&env, &ds.train(), small_cfg(20)).unwrap();
        resumed.restore(&Checkpoint::from_json(&bytes).unwrap()).unwrap();
        resumed.run(0, |_| Ok(())).unwrap();
        assert!(resumed.model.params_equal(&full.model));
        assert_eq!(resumed.log(), &full.log()[7..]);
    }

    #[test]
    fn probe_loss_decreases() {
        let (env, ds) = setup();
        let mut t = Trainer::new(&env, &ds.train(), small_cfg(300)).unwrap();
        let rows: Vec<usize> = (0..64).collect();
        let before = t.probe_loss(&rows).unwrap();
        t.run(0, |_| Ok(())).unwrap();
        let after = t.probe_loss(&rows).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn q_tables_cover_joint_space() {
        let (env, ds) = setup();
        let t = Trainer::new(&env, &ds.train(), small_cfg(0)).unwrap();
        let reqs: Vec<&RequestContext> = ds.test().iter().take(3).map(|e| &e.request).collect();
        let tables = t.model.q_tables(&env, &reqs).unwrap();
        assert_eq!(tables.len(), 3);
        assert!(tables.iter().all(|tb| tb.len() == env.action_space().joint_count() && tb.iter().all(|v| v.is_finite())));
    }
}
