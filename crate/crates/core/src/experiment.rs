//! Method dispatch and single training-plus-evaluation runs.

use serde::{Deserialize, Serialize};

use crate::awrq::{AwrqConfig, Bootstrap};
use crate::baselines::{BaselineConfig, BaselineLogRow, Method, MultiAgentTrainer, SingleAgentTrainer};
use crate::envsim::{EpisodeRecord, PipelineEnv, N_STAGES};
use crate::error::{Error, Result};
use crate::evaluation::Protocol;
use crate::metrics::{convergence_steps, gradient_variance, Convergence};
use crate::mixer::{Trainer, TrainerConfig, WeightTransform};
use crate::nncore::Checkpoint;
use crate::qtable::QTableSource;

/// Every trainable method, including the mixer ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum MethodTag {
    AwrqMixer,
    NoAdaptiveWeights,
    NoSoftplus,
    NoCreditWeights,
    Baseline(Method),
}

impl MethodTag {
    pub const ABLATIONS: [MethodTag; 3] = [
        MethodTag::NoAdaptiveWeights,
        MethodTag::NoSoftplus,
        MethodTag::NoCreditWeights,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            MethodTag::AwrqMixer => "awrq_mixer",
            MethodTag::NoAdaptiveWeights => "awrq_mixer_no_aw",
            MethodTag::NoSoftplus => "awrq_mixer_no_smc",
            MethodTag::NoCreditWeights => "awrq_mixer_no_vgca",
            MethodTag::Baseline(m) => m.tag(),
        }
    }

    pub fn all() -> Vec<MethodTag> {
        let mut v: Vec<MethodTag> = Method::ALL.iter().map(|&m| MethodTag::Baseline(m)).collect();
        v.push(MethodTag::AwrqMixer);
        v.extend(Self::ABLATIONS);
        v
    }
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for MethodTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodTag::all()
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

impl From<MethodTag> for String {
    fn from(m: MethodTag) -> String {
        m.tag().to_string()
    }
}

impl TryFrom<String> for MethodTag {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Shared network and optimization sizes so methods compare like for like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingProfile {
    pub iterations: usize,
    pub batch_size: usize,
    pub k: usize,
    pub gru_hidden: usize,
    pub mlp_hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: usize,
    pub lr: f64,
    pub mixer_lr: f64,
    pub dropout: f64,
    pub mix_hidden: usize,
    pub hyper_hidden: usize,
    pub bootstrap: Bootstrap,
    /// Validation cadence for the convergence curve, in iterations.
    pub eval_every: usize,
    pub grad_window: usize,
}

impl Default for TrainingProfile {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 64,
            k: 5,
            gru_hidden: 16,
            mlp_hidden: vec![32],
            gamma: 0.9,
            tau: 100,
            lr: 0.005,
            mixer_lr: 0.005,
            dropout: 0.0,
            mix_hidden: 32,
            hyper_hidden: 64,
            bootstrap: Bootstrap::LoggedNext,
            eval_every: 100,
            grad_window: 200,
        }
    }
}

impl TrainingProfile {
    /// Production-sized settings.
    pub fn full_scale() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 2048,
            k: 20,
            gru_hidden: 256,
            mlp_hidden: vec![512, 256],
            lr: 0.01,
            mixer_lr: 0.01,
            dropout: 0.2,
            eval_every: 1000,
            grad_window: 1000,
            ..Self::default()
        }
    }

    pub fn mixer_config(&self, method: MethodTag, seed: u64) -> Result<TrainerConfig> {
        let mut cfg = TrainerConfig {
            awrq: AwrqConfig {
                k: self.k,
                gru_hidden: self.gru_hidden,
                mlp_hidden: self.mlp_hidden.clone(),
                gamma: self.gamma,
                tau: self.tau,
                lr: self.lr,
                dropout: self.dropout,
                bootstrap: self.bootstrap,
                ..AwrqConfig::default()
            },
            iterations: self.iterations,
            batch_size: self.batch_size,
            mix_hidden: self.mix_hidden,
            hyper_hidden: self.hyper_hidden,
            mixer_lr: self.mixer_lr,
            seed,
            grad_window: self.grad_window,
            ..TrainerConfig::default()
        };
        match method {
            MethodTag::AwrqMixer => {}
            MethodTag::NoAdaptiveWeights => cfg.awrq.adaptive = false,
            MethodTag::NoSoftplus => cfg.transform = WeightTransform::Abs,
            MethodTag::NoCreditWeights => cfg.vgca = false,
            MethodTag::Baseline(m) => {
                return Err(Error::InvalidArgument(format!("{m} is not a mixer variant")))
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn baseline_config(&self, method: Method, seed: u64) -> BaselineConfig {
        BaselineConfig {
            method,
            mlp_hidden: self.mlp_hidden.clone(),
            gru_hidden: self.gru_hidden,
            ensemble_size: self.k,
            gamma: self.gamma,
            tau: self.tau,
            lr: self.lr,
            iterations: self.iterations,
            batch_size: self.batch_size,
            mix_hidden: self.mix_hidden,
            hyper_hidden: self.hyper_hidden,
            seed,
            ..BaselineConfig::default()
        }
    }
}

/// Any of the trainers behind one interface.
pub enum MethodTrainer {
    Mixer(Box<Trainer>),
    Single(Box<SingleAgentTrainer>),
    Multi(Box<MultiAgentTrainer>),
}

impl MethodTrainer {
    pub fn new(env: &PipelineEnv, train: &[&EpisodeRecord], method: MethodTag, profile: &TrainingProfile, seed: u64) -> Result<Self> {
        Ok(match method {
            MethodTag::Baseline(m) if m.is_multi_agent() => {
                MethodTrainer::Multi(Box::new(MultiAgentTrainer::new(env, train, profile.baseline_config(m, seed))?))
            }
            MethodTag::Baseline(m) => {
                MethodTrainer::Single(Box::new(SingleAgentTrainer::new(env, train, profile.baseline_config(m, seed))?))
            }
            _ => MethodTrainer::Mixer(Box::new(Trainer::new(env, train, profile.mixer_config(method, seed)?)?)),
        })
    }

    pub fn step(&mut self) -> Result<()> {
        match self {
            MethodTrainer::Mixer(t) => t.step().map(|_| ()),
            MethodTrainer::Single(t) => t.step().map(|_| ()),
            MethodTrainer::Multi(t) => t.step().map(|_| ()),
        }
    }

    pub fn iteration(&self) -> usize {
        match self {
            MethodTrainer::Mixer(t) => t.iteration(),
            MethodTrainer::Single(t) => t.iteration(),
            MethodTrainer::Multi(t) => t.iteration(),
        }
    }

    pub fn source(&self) -> &dyn QTableSource {
        match self {
            MethodTrainer::Mixer(t) => &t.model,
            MethodTrainer::Single(t) => &t.model,
            MethodTrainer::Multi(t) => &t.model,
        }
    }

    /// Per-update gradient norms: the mixer's for the mixer variants, the
    /// full model's for baselines.
    pub fn grad_norms(&self) -> Vec<f64> {
        let of = |log: &[BaselineLogRow]| log.iter().map(|r| r.grad_norm).collect();
        match self {
            MethodTrainer::Mixer(t) => t.mixer_grad_norms(),
            MethodTrainer::Single(t) => of(t.log()),
            MethodTrainer::Multi(t) => of(t.log()),
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        let of = |log: &[BaselineLogRow]| log.iter().map(|r| r.loss).collect();
        match self {
            MethodTrainer::Mixer(t) => t.log().iter().map(|r| r.l_tot).collect(),
            MethodTrainer::Single(t) => of(t.log()),
            MethodTrainer::Multi(t) => of(t.log()),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        match self {
            MethodTrainer::Mixer(t) => t.checkpoint(),
            MethodTrainer::Single(t) => t.checkpoint(),
            MethodTrainer::Multi(t) => t.checkpoint(),
        }
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        match self {
            MethodTrainer::Mixer(t) => t.restore(ckpt),
            MethodTrainer::Single(t) => t.restore(ckpt),
            MethodTrainer::Multi(t) => t.restore(ckpt),
        }
    }
}

/// Transitions consumed after `iteration` updates of `batch_size` requests.
pub fn env_steps(iteration: usize, batch_size: usize) -> f64 {
    (iteration * batch_size * N_STAGES) as f64
}

/// Outcome of one (method, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: MethodTag,
    pub seed: u64,
    pub return_percent: f64,
    pub r_s: f64,
    pub convergence: Convergence,
    pub gradient_variance: f64,
    /// `(env_steps, validation Return%)`.
    pub curve: Vec<(f64, f64)>,
    pub final_loss: f64,
}

/// Per-update training trace that survives checkpoint restores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunProgress {
    pub curve: Vec<(f64, f64)>,
    pub grad_norms: Vec<f64>,
    pub losses: Vec<f64>,
}

/// A resumable (method, seed) training run that traces validation Return%.
pub struct MethodRun {
    pub method: MethodTag,
    pub seed: u64,
    pub trainer: MethodTrainer,
    profile: TrainingProfile,
    curve: Vec<(f64, f64)>,
    norm_prefix: Vec<f64>,
    loss_prefix: Vec<f64>,
}

impl MethodRun {
    pub fn new(
        env: &PipelineEnv,
        train: &[&EpisodeRecord],
        method: MethodTag,
        profile: &TrainingProfile,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            method,
            seed,
            trainer: MethodTrainer::new(env, train, method, profile, seed)?,
            profile: profile.clone(),
            curve: Vec::new(),
            norm_prefix: Vec::new(),
            loss_prefix: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.trainer.iteration()
    }

    pub fn is_done(&self) -> bool {
        self.iteration() >= self.profile.iterations
    }

    pub fn progress(&self) -> RunProgress {
        let mut grad_norms = self.norm_prefix.clone();
        grad_norms.extend(self.trainer.grad_norms());
        let mut losses = self.loss_prefix.clone();
        losses.extend(self.trainer.losses());
        RunProgress {
            curve: self.curve.clone(),
            grad_norms,
            losses,
        }
    }

    fn trace(&mut self, env: &PipelineEnv, validation: &Protocol) -> Result<()> {
        let r = validation.evaluate(env, self.trainer.source())?;
        self.curve.push((
            env_steps(self.iteration(), self.profile.batch_size),
            r.return_percent,
        ));
        Ok(())
    }

    /// Trains until `until` iterations (capped at the profile's total),
    /// adding a curve point at iteration 0 and every `eval_every` updates.
    pub fn advance(&mut self, env: &PipelineEnv, validation: &Protocol, until: usize) -> Result<()> {
        let until = until.min(self.profile.iterations);
        let every = self.profile.eval_every.max(1);
        if self.curve.is_empty() && self.iteration() == 0 {
            self.trace(env, validation)?;
        }
        while self.iteration() < until {
            self.trainer.step()?;
            let it = self.iteration();
            if it.is_multiple_of(every) || it == self.profile.iterations {
                self.trace(env, validation)?;
            }
        }
        Ok(())
    }

    /// Trainer state plus the trace so far.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = self.trainer.checkpoint()?;
        ckpt.meta.insert("method".into(), self.method.tag().into());
        ckpt.meta.insert("seed".into(), self.seed.to_string());
        ckpt.meta.insert("profile".into(), serde_json::to_string(&self.profile)?);
        ckpt.meta.insert("progress".into(), serde_json::to_string(&self.progress())?);
        Ok(ckpt)
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let meta = |k: &str| {
            ckpt.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Serde(format!("run checkpoint lacks {k:?}")))
        };
        let profile: TrainingProfile = serde_json::from_str(&meta("profile")?)?;
        if meta("method")? != self.method.tag() || profile != self.profile {
            return Err(Error::InvalidArgument(
                "checkpoint belongs to a different method or profile".into(),
            ));
        }
        let progress: RunProgress = serde_json::from_str(&meta("progress")?)?;
        self.trainer.restore(ckpt)?;
        self.curve = progress.curve;
        self.norm_prefix = progress.grad_norms;
        self.loss_prefix = progress.losses;
        Ok(())
    }

    /// Scores the current model on the evaluation protocol.
    pub fn finish(&self, env: &PipelineEnv, evaluation: &Protocol) -> Result<RunResult> {
        let result = evaluation.evaluate(env, self.trainer.source())?;
        let progress = self.progress();
        let norms = &progress.grad_norms;
        let window = self.profile.grad_window.min(norms.len()).max(1);
        Ok(RunResult {
            method: self.method,
            seed: self.seed,
            return_percent: result.return_percent,
            r_s: result.r_s,
            convergence: convergence_steps(&progress.curve)?,
            gradient_variance: gradient_variance(norms, window)?,
            curve: progress.curve,
            final_loss: progress.losses.last().copied().unwrap_or(f64::NAN),
        })
    }
}

/// Trains `method` to `profile.iterations`, tracing validation Return%, then
/// scores the final model on the evaluation protocol.
pub fn run_method(
    env: &PipelineEnv,
    train: &[&EpisodeRecord],
    validation: &Protocol,
    evaluation: &Protocol,
    method: MethodTag,
    profile: &TrainingProfile,
    seed: u64,
) -> Result<(RunResult, MethodRun)> {
    let mut run = MethodRun::new(env, train, method, profile, seed)?;
    run.advance(env, validation, profile.iterations)?;
    let result = run.finish(env, evaluation)?;
    Ok((result, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{build_logged_dataset, EnvConfig, LoggingPolicy};
    use crate::evaluation::{fit_ground_truth, GroundTruthConfig};

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let env = PipelineEnv::new(EnvConfig::mini()).unwrap();
        let ds = build_logged_dataset(&env, &LoggingPolicy::UniformRandom, 600, 2, 0.8).unwrap();
        let mut gcfg = GroundTruthConfig::default();
        gcfg.members = 1;
        gcfg.hidden = vec![16];
        gcfg.fit.epochs = 3;
        let gt = fit_ground_truth(&env, &ds, &gcfg).unwrap();
        let test = ds.test();
        let eval = Protocol::new(&env, &test, &gt).unwrap();
        let profile = TrainingProfile {
            iterations: 40,
            batch_size: 16,
            eval_every: 10,
            grad_window: 10,
            ..TrainingProfile::default()
        };
        let train = ds.train();
        for method in [MethodTag::AwrqMixer, MethodTag::Baseline(Method::Dqn), MethodTag::Baseline(Method::Qmix)] {
            let (full, _) = run_method(&env, &train, &eval, &eval, method, &profile, 3).unwrap();
            let mut first = MethodRun::new(&env, &train, method, &profile, 3).unwrap();
            first.advance(&env, &eval, 25).unwrap();
            let ckpt = Checkpoint::from_json(&first.checkpoint().unwrap().to_json().unwrap()).unwrap();
            let mut resumed = MethodRun::new(&env, &train, method, &profile, 3).unwrap();
            resumed.restore(&ckpt).unwrap();
            resumed.advance(&env, &eval, usize::MAX).unwrap();
            assert!(resumed.is_done());
            assert_eq!(resumed.finish(&env, &eval).unwrap(), full, "{method}");
        }
    }
}
