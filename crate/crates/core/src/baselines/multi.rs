use rand::Rng;

use super::{BaselineConfig, BaselineLogRow, Method};
use crate::envsim::{EpisodeRecord, PipelineEnv, RequestContext, N_STAGES};
use crate::error::{Error, Result};
use crate::mixer::{Hypernet, WeightTransform};
use crate::nncore::{derive_seed, seeded_rng, AdamConfig, AdamState, Checkpoint, Matrix, Mlp, ParamSet, SeededRng};
use crate::qtable::{request_matrix, CounterfactualObs, QTableSource};
use crate::replay::EpisodeBatch;

#[derive(Debug, Clone, PartialEq)]
pub enum MultiMixer {
    /// Q_tot = Σ_g Q_g.
    Additive,
    /// State-conditioned mixer with absolute-value weights.
    Monotone(Hypernet),
}

impl MultiMixer {
    pub fn mix_batch(&self, q: &Matrix, states: &Matrix) -> Result<Vec<f64>> {
        match self {
            MultiMixer::Additive => Ok(q.rows().into_iter().map(|r| r.sum()).collect()),
            MultiMixer::Monotone(h) => h.mix_batch(q, states),
        }
    }
}

/// Feed-forward per-stage agents and their mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiAgentModel {
    pub method: Method,
    pub agents: Vec<Mlp>,
    pub mixer: MultiMixer,
}

impl MultiAgentModel {
    pub fn new(env: &PipelineEnv, cfg: &BaselineConfig) -> Result<Self> {
        cfg.validate()?;
        if !cfg.method.is_multi_agent() {
            return Err(Error::InvalidArgument(format!("{} is not a multi-agent method", cfg.method)));
        }
        let sizes = env.action_space().sizes;
        let mut rng = seeded_rng(derive_seed(cfg.seed, 0));
        let agents = sizes
            .iter()
            .map(|&n| {
                let mut s = vec![env.obs_dim(), cfg.gru_hidden];
                s.extend(&cfg.mlp_hidden);
                s.push(n);
                Mlp::new(&s, &mut rng)
            })
            .collect();
        let mixer = match cfg.method {
            Method::Vdn => MultiMixer::Additive,
            _ => MultiMixer::Monotone(Hypernet::new(
                env.request_dim(),
                cfg.hyper_hidden,
                N_STAGES,
                cfg.mix_hidden,
                WeightTransform::Abs,
                &mut rng,
            )),
        };
        Ok(Self { method: cfg.method, agents, mixer })
    }
}

impl QTableSource for MultiAgentModel {
    fn q_tables(&self, env: &PipelineEnv, requests: &[&RequestContext]) -> Result<Vec<Vec<f64>>> {
        let cf = CounterfactualObs::build(env, requests)?;
        let scores: Vec<Matrix> = self
            .agents
            .iter()
            .zip(&cf.seqs)
            .map(|(a, seq)| a.forward(seq.last().expect("non-empty sequence")))
            .collect();
        match &self.mixer {
            MultiMixer::Additive => Ok(cf.assemble(&scores, |_, q| q.iter().sum())),
            MultiMixer::Monotone(h) => {
                let w = h.hypernet_forward(&request_matrix(env, requests))?;
                Ok(cf.assemble(&scores, |i, q| w[i].mix(q)))
            }
        }
    }
}

pub struct MultiAgentTrainer {
    pub config: BaselineConfig,
    pub model: MultiAgentModel,
    agent_adam: AdamState,
    mixer_adam: Option<AdamState>,
    rng: SeededRng,
    data: EpisodeBatch,
    iteration: usize,
    log: Vec<BaselineLogRow>,
}

impl MultiAgentTrainer {
    pub fn new(env: &PipelineEnv, episodes: &[&EpisodeRecord], config: BaselineConfig) -> Result<Self> {
        let model = MultiAgentModel::new(env, &config)?;
        let mixer_adam = match &model.mixer {
            MultiMixer::Monotone(h) => Some(AdamState::new(h, AdamConfig::with_lr(config.lr))),
            MultiMixer::Additive => None,
        };
        Ok(Self {
            agent_adam: AdamState::new(&model.agents, AdamConfig::with_lr(config.lr)),
            mixer_adam,
            rng: seeded_rng(derive_seed(config.seed, 100)),
            data: EpisodeBatch::from_episodes(env, episodes)?,
            config,
            model,
            iteration: 0,
            log: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[BaselineLogRow] {
        &self.log
    }

    /// End-to-end regression of Q_tot at the logged joint action onto the
    /// terminal reward.
    pub fn step(&mut self) -> Result<&BaselineLogRow> {
        let n = self.data.len();
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| self.rng.random_range(0..n)).collect();
        let batch = self.data.gather(&idx);
        let b = batch.len();

        let mut caches = Vec::with_capacity(N_STAGES);
        let mut qa = Matrix::zeros((b, N_STAGES));
        let mut greedy = vec![true; b];
        for (g, agent) in self.model.agents.iter().enumerate() {
            let (q, cache) = agent.forward_train::<SeededRng>(&batch.obs[g], 0.0, None)?;
            for s in 0..b {
                let a = batch.actions[g][s];
                qa[[s, g]] = q[[s, a]];
                let row = q.row(s).to_vec();
                greedy[s] &= crate::awrq::argmax(&row) == a;
            }
            caches.push((q, cache));
        }
        let (q_tot, hyper_cache) = match &self.model.mixer {
            MultiMixer::Additive => (qa.rows().into_iter().map(|r| r.sum()).collect::<Vec<_>>(), None),
            MultiMixer::Monotone(h) => {
                let (out, c) = h.forward_train(&qa, &batch.states)?;
                (out, Some(c))
            }
        };
        let alpha = self.config.wqmix_alpha;
        let mut loss = 0.0;
        let grad_out: Vec<f64> = (0..b)
            .map(|s| {
                let res = q_tot[s] - batch.rewards[s];
                let w = if self.config.method == Method::WeightedQmix && res >= 0.0 && !greedy[s] {
                    alpha
                } else {
                    1.0
                };
                loss += w * res * res / b as f64;
                2.0 * w * res / b as f64
            })
            .collect();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("{} loss at iteration {}", self.config.method, self.iteration + 1)));
        }

        let mut grad_norm_sq = 0.0;
        let dq = match (&self.model.mixer, hyper_cache) {
            (MultiMixer::Monotone(h), Some(c)) => {
                let mut hg = h.zeros_like();
                let dq = h.backward(&qa, &c, &grad_out, &mut hg);
                grad_norm_sq += hg.l2_norm_sq();
                if let (MultiMixer::Monotone(hm), Some(adam)) = (&mut self.model.mixer, &mut self.mixer_adam) {
                    adam.update(hm, &hg)?;
                }
                dq
            }
            _ => Matrix::from_shape_fn((b, N_STAGES), |(s, _)| grad_out[s]),
        };
        let mut grads = self.model.agents.zeros_like();
        for (g, (agent, (q, cache))) in self.model.agents.iter().zip(&caches).enumerate() {
            let mut gq = Matrix::zeros(q.raw_dim());
            for s in 0..b {
                gq[[s, batch.actions[g][s]]] = dq[[s, g]];
            }
            agent.backward(cache, &gq, &mut grads[g]);
        }
        grad_norm_sq += grads.l2_norm_sq();
        self.agent_adam.update(&mut self.model.agents, &grads)?;
        self.iteration += 1;
        self.log.push(BaselineLogRow {
            iteration: self.iteration,
            loss,
            grad_norm: grad_norm_sq.sqrt(),
        });
        Ok(self.log.last().expect("just pushed"))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(format!("baseline_{}", self.config.method));
        ckpt.meta.insert("iteration".into(), self.iteration.to_string());
        ckpt.meta.insert("baseline_config".into(), serde_json::to_string(&self.config)?);
        ckpt.push_params("agents", &self.model.agents);
        self.agent_adam.save_into(&mut ckpt, "agent_adam");
        if let (MultiMixer::Monotone(h), Some(adam)) = (&self.model.mixer, &self.mixer_adam) {
            ckpt.push_params("hypernet", h);
            adam.save_into(&mut ckpt, "mixer_adam");
        }
        ckpt.put_rng("trainer", &self.rng);
        Ok(ckpt)
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_params("agents", &mut self.model.agents)?;
        self.agent_adam.load_from(ckpt, "agent_adam")?;
        if let (MultiMixer::Monotone(h), Some(adam)) = (&mut self.model.mixer, &mut self.mixer_adam) {
            ckpt.load_params("hypernet", h)?;
            adam.load_from(ckpt, "mixer_adam")?;
        }
        self.rng = ckpt.get_rng("trainer")?;
        self.iteration = ckpt.meta_parse("iteration")?;
        self.log.clear();
        Ok(())
    }
}
