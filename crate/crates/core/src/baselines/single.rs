use rand::Rng;
use rand_distr::{Distribution, Exp1};

use super::{BaselineConfig, BaselineLogRow, Method};
use crate::awrq::{HeadCache, QHead};
use crate::envsim::{EpisodeRecord, PipelineEnv, RequestContext};
use crate::error::{Error, Result};
use crate::nncore::{derive_seed, seeded_rng, AdamConfig, AdamState, Checkpoint, Matrix, Mlp, MlpCache, ParamSet, SeededRng};
use crate::qtable::{request_matrix, QTableSource};
use crate::replay::EpisodeBatch;

/// A Q network over the flattened joint action space.
#[derive(Debug, Clone, PartialEq)]
pub enum QNet {
    /// Dense trunk of the recurrent layer's width, then the shared MLP.
    Dense(Mlp),
    /// GRU + MLP head run over a length-one sequence of the request descriptor.
    Recurrent(QHead),
}

pub enum NetCache {
    Dense(MlpCache),
    Recurrent(HeadCache),
}

impl QNet {
    fn new<R: Rng + ?Sized>(method: Method, input: usize, n_actions: usize, cfg: &BaselineConfig, rng: &mut R) -> Self {
        if method == Method::Drqn {
            QNet::Recurrent(QHead::new(input, cfg.gru_hidden, &cfg.mlp_hidden, n_actions, rng))
        } else {
            let mut sizes = vec![input, cfg.gru_hidden];
            sizes.extend(&cfg.mlp_hidden);
            sizes.push(n_actions);
            QNet::Dense(Mlp::new(&sizes, rng))
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            QNet::Dense(m) => m.input_dim(),
            QNet::Recurrent(h) => h.obs_dim(),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("q-net input", self.input_dim(), x.ncols()));
        }
        match self {
            QNet::Dense(m) => Ok(m.forward(x)),
            QNet::Recurrent(h) => h.unroll(std::slice::from_ref(x)),
        }
    }

    pub fn forward_train(&self, x: &Matrix) -> Result<(Matrix, NetCache)> {
        match self {
            QNet::Dense(m) => {
                let (q, c) = m.forward_train::<SeededRng>(x, 0.0, None)?;
                Ok((q, NetCache::Dense(c)))
            }
            QNet::Recurrent(h) => {
                let (q, c) = h.unroll_train::<SeededRng>(std::slice::from_ref(x), 0.0, None)?;
                Ok((q, NetCache::Recurrent(c)))
            }
        }
    }

    pub fn backward(&self, cache: &NetCache, grad_q: &Matrix, grads: &mut QNet) {
        match (self, cache, grads) {
            (QNet::Dense(m), NetCache::Dense(c), QNet::Dense(g)) => {
                m.backward(c, grad_q, g);
            }
            (QNet::Recurrent(h), NetCache::Recurrent(c), QNet::Recurrent(g)) => {
                h.backward(c, grad_q, g);
            }
            _ => unreachable!("cache and gradient variants follow the network"),
        }
    }
}

impl ParamSet for QNet {
    fn tensors(&self) -> Vec<&Matrix> {
        match self {
            QNet::Dense(m) => m.tensors(),
            QNet::Recurrent(h) => h.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            QNet::Dense(m) => m.tensors_mut(),
            QNet::Recurrent(h) => h.tensors_mut(),
        }
    }

    fn tensor_names(&self) -> Vec<String> {
        match self {
            QNet::Dense(m) => m.tensor_names(),
            QNet::Recurrent(h) => h.tensor_names(),
        }
    }
}

/// Greedy bootstrap: max over the target network's next-state values.
pub fn dqn_target(target_next: &[f64]) -> f64 {
    target_next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Double bootstrap: the online network picks, the target network scores.
pub fn ddqn_target(online_next: &[f64], target_next: &[f64]) -> f64 {
    target_next[crate::awrq::argmax(online_next)]
}

/// A uniform draw from the probability simplex (Dirichlet with unit
/// concentrations).
pub fn rem_coefficients<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Head-mean scores over the flattened joint action space.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleAgentModel {
    pub method: Method,
    pub heads: Vec<QNet>,
}

impl SingleAgentModel {
    pub fn new(env: &PipelineEnv, cfg: &BaselineConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.method.is_multi_agent() {
            return Err(Error::InvalidArgument(format!("{} is not a single-agent method", cfg.method)));
        }
        let n = env.action_space().joint_count();
        if n > cfg.max_joint_actions {
            return Err(Error::InvalidArgument(format!(
                "joint action space {n} exceeds the flattened-mode cap {}",
                cfg.max_joint_actions
            )));
        }
        let mut rng = seeded_rng(derive_seed(cfg.seed, 0));
        let heads = (0..cfg.heads())
            .map(|_| QNet::new(cfg.method, env.request_dim(), n, cfg, &mut rng))
            .collect();
        Ok(Self { method: cfg.method, heads })
    }

    pub fn scores(&self, x: &Matrix) -> Result<Matrix> {
        let mut sum = self.heads[0].forward(x)?;
        for h in &self.heads[1..] {
            sum += &h.forward(x)?;
        }
        Ok(sum / self.heads.len() as f64)
    }
}

impl QTableSource for SingleAgentModel {
    fn q_tables(&self, env: &PipelineEnv, requests: &[&RequestContext]) -> Result<Vec<Vec<f64>>> {
        let q = self.scores(&request_matrix(env, requests))?;
        Ok(q.rows().into_iter().map(|r| r.to_vec()).collect())
    }
}

pub struct SingleAgentTrainer {
    pub config: BaselineConfig,
    pub model: SingleAgentModel,
    targets: Vec<QNet>,
    adam: AdamState,
    rng: SeededRng,
    data: EpisodeBatch,
    joint: Vec<usize>,
    iteration: usize,
    log: Vec<BaselineLogRow>,
}

impl SingleAgentTrainer {
    pub fn new(env: &PipelineEnv, episodes: &[&EpisodeRecord], config: BaselineConfig) -> Result<Self> {
        let model = SingleAgentModel::new(env, &config)?;
        let data = EpisodeBatch::from_episodes(env, episodes)?;
        let joint = data.joint_actions(env);
        Ok(Self {
            adam: AdamState::new(&model.heads, AdamConfig::with_lr(config.lr)),
            targets: model.heads.clone(),
            rng: seeded_rng(derive_seed(config.seed, 100)),
            config,
            model,
            data,
            joint,
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

    /// Bootstrap values at `next_states` under the method's target rule.
    pub fn bootstrap_values(&self, next_states: &Matrix) -> Result<Vec<f64>> {
        let mean = |nets: &[QNet]| -> Result<Matrix> {
            let mut s = nets[0].forward(next_states)?;
            for n in &nets[1..] {
                s += &n.forward(next_states)?;
            }
            Ok(s / nets.len() as f64)
        };
        let target = mean(&self.targets)?;
        let online = mean(&self.model.heads)?;
        Ok(target
            .rows()
            .into_iter()
            .zip(online.rows())
            .map(|(t, o)| {
                let t = t.to_vec();
                match self.config.method {
                    Method::Ddqn => ddqn_target(&o.to_vec(), &t),
                    _ => dqn_target(&t),
                }
            })
            .collect())
    }

    /// One regression step. Every logged request is a single terminal
    /// transition, so the target is the observed reward.
    pub fn step(&mut self) -> Result<&BaselineLogRow> {
        let n = self.data.len();
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| self.rng.random_range(0..n)).collect();
        let x = self.data.states.select(ndarray::Axis(0), &idx);
        let actions: Vec<usize> = idx.iter().map(|&i| self.joint[i]).collect();
        let rewards: Vec<f64> = idx.iter().map(|&i| self.data.rewards[i]).collect();
        let b = idx.len() as f64;

        let outs = self
            .model
            .heads
            .iter()
            .map(|h| h.forward_train(&x))
            .collect::<Result<Vec<_>>>()?;
        let k = outs.len();
        let mut grad_q: Vec<Matrix> = outs.iter().map(|(q, _)| Matrix::zeros(q.raw_dim())).collect();
        let mut loss = 0.0;
        if self.config.method == Method::Rem {
            let alpha = rem_coefficients(k, &mut self.rng);
            for (s, (&a, &r)) in actions.iter().zip(&rewards).enumerate() {
                let mixed: f64 = outs.iter().zip(&alpha).map(|((q, _), w)| w * q[[s, a]]).sum();
                let res = mixed - r;
                loss += res * res / b;
                for (g, w) in grad_q.iter_mut().zip(&alpha) {
                    g[[s, a]] = 2.0 * w * res / b;
                }
            }
        } else {
            for ((q, _), g) in outs.iter().zip(grad_q.iter_mut()) {
                for (s, (&a, &r)) in actions.iter().zip(&rewards).enumerate() {
                    let res = q[[s, a]] - r;
                    loss += res * res / (b * k as f64);
                    g[[s, a]] = 2.0 * res / b;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("{} loss at iteration {}", self.config.method, self.iteration + 1)));
        }
        let mut grads = self.model.heads.zeros_like();
        for (i, (h, (_, cache))) in self.model.heads.iter().zip(&outs).enumerate() {
            h.backward(cache, &grad_q[i], &mut grads[i]);
        }
        let grad_norm = grads.l2_norm_sq().sqrt();
        self.adam.update(&mut self.model.heads, &grads)?;
        self.iteration += 1;
        if self.iteration.is_multiple_of(self.config.tau) {
            self.targets.clone_from(&self.model.heads);
        }
        self.log.push(BaselineLogRow { iteration: self.iteration, loss, grad_norm });
        Ok(self.log.last().expect("just pushed"))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(format!("baseline_{}", self.config.method));
        ckpt.meta.insert("iteration".into(), self.iteration.to_string());
        ckpt.meta.insert("baseline_config".into(), serde_json::to_string(&self.config)?);
        ckpt.push_params("heads", &self.model.heads);
        ckpt.push_params("targets", &self.targets);
        self.adam.save_into(&mut ckpt, "adam");
        ckpt.put_rng("trainer", &self.rng);
        Ok(ckpt)
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_params("heads", &mut self.model.heads)?;
        ckpt.load_params("targets", &mut self.targets)?;
        self.adam.load_from(ckpt, "adam")?;
        self.rng = ckpt.get_rng("trainer")?;
        self.iteration = ckpt.meta_parse("iteration")?;
        self.log.clear();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{build_logged_dataset, EnvConfig, LoggingPolicy};

    fn setup() -> (PipelineEnv, crate::envsim::LoggedDataset) {
        let env = PipelineEnv::new(EnvConfig::default()).unwrap();
        let ds = build_logged_dataset(&env, &LoggingPolicy::UniformRandom, 400, 5, 0.8).unwrap();
        (env, ds)
    }

    fn cfg(method: Method) -> BaselineConfig {
        BaselineConfig {
            method,
            mlp_hidden: vec![16],
            gru_hidden: 8,
            ensemble_size: 3,
            iterations: 20,
            batch_size: 16,
            tau: 5,
            ..BaselineConfig::default()
        }
    }

    #[test]
    fn dqn_equals_single_head_average_ensemble() {
        let (env, ds) = setup();
        let run = |m: Method| {
            let c = BaselineConfig { ensemble_size: 1, ..cfg(m) };
            let mut t = SingleAgentTrainer::new(&env, &ds.train(), c).unwrap();
            for _ in 0..20 {
                t.step().unwrap();
            }
            let ck = t.checkpoint().unwrap();
            (ck.tensors, t.log().to_vec())
        };
        assert_eq!(run(Method::Dqn), run(Method::AvgEnsemble));
    }

    #[test]
    fn rem_mixtures_are_convex() {
        let mut rng = seeded_rng(4);
        for k in 1..8 {
            let a = rem_coefficients(k, &mut rng);
            assert!(a.iter().all(|&v| v >= 0.0));
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn double_target_never_exceeds_max_target() {
        let (env, ds) = setup();
        let mut t = SingleAgentTrainer::new(&env, &ds.train(), cfg(Method::Ddqn)).unwrap();
        for _ in 0..12 {
            t.step().unwrap();
        }
        let x = request_matrix(&env, &ds.test().iter().map(|e| &e.request).collect::<Vec<_>>());
        let double = t.bootstrap_values(&x).unwrap();
        t.config.method = Method::Dqn;
        let max = t.bootstrap_values(&x).unwrap();
        assert!(double.iter().zip(&max).all(|(d, m)| d <= m));
    }

    #[test]
    fn every_single_agent_method_trains_and_scores() {
        let (env, ds) = setup();
        let reqs: Vec<&RequestContext> = ds.test().iter().map(|e| &e.request).collect();
        for m in [Method::Dqn, Method::Ddqn, Method::Drqn, Method::AvgEnsemble, Method::Rem] {
            let mut t = SingleAgentTrainer::new(&env, &ds.train(), cfg(m)).unwrap();
            let first = t.step().unwrap().loss;
            for _ in 0..150 {
                t.step().unwrap();
            }
            let tail: f64 = t.log()[140..].iter().map(|r| r.loss).sum::<f64>() / 11.0;
            assert!(tail < first, "{m}: {tail} vs {first}");
            let tables = t.model.q_tables(&env, &reqs).unwrap();
            assert_eq!(tables[0].len(), 48);
        }
    }

    #[test]
    fn oversized_joint_space_is_rejected() {
        let (env, _) = setup();
        let c = BaselineConfig { max_joint_actions: 10, ..cfg(Method::Dqn) };
        assert!(SingleAgentModel::new(&env, &c).is_err());
    }
}
