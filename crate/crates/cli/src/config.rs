//! Experiment configuration: a TOML file whose sections overlay the chosen
//! profile's defaults.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stagealloc::balancer::{BalancerConfig, ControllerKind};
use stagealloc::costbench::{BenchConfig, PredictorConfig};
use stagealloc::envsim::{EnvConfig, LoggingPolicy};
use stagealloc::evaluation::GroundTruthConfig;
use stagealloc::experiment::{MethodTag, TrainingProfile};
use stagealloc::io::sha256_hex;

use crate::error::{CliError, CliResult};

/// Overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "STAGEALLOC_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Laptop-scale networks, 20 000 iterations.
    Desk,
    /// Published network sizes, learning rate, batch and ensemble size.
    PaperFaithful,
}

impl Profile {
    pub fn training(self) -> TrainingProfile {
        match self {
            Profile::Desk => TrainingProfile {
                iterations: 20_000,
                eval_every: 500,
                ..TrainingProfile::default()
            },
            Profile::PaperFaithful => TrainingProfile::full_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_requests: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub policy: LoggingPolicy,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_requests: 20_000,
            seed: 0,
            train_fraction: 0.8,
            policy: LoggingPolicy::UniformRandom,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Leading test-split requests used for the convergence curve.
    pub validation_size: usize,
    pub ground_truth: GroundTruthConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            validation_size: 800,
            ground_truth: GroundTruthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct CostConfig {
    pub bench: BenchConfig,
    pub predictor: PredictorConfig,
    pub degradation_level: usize,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocateConfig {
    /// Budget for the Lagrangian plan as a fraction of the logged plan's cost.
    pub budget_fraction: f64,
}

impl Default for AllocateConfig {
    fn default() -> Self {
        Self {
            budget_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub balancer: BalancerConfig,
    pub controllers: Vec<ControllerKind>,
    /// Trained run whose Q tables drive the per-request decisions.
    pub source_method: MethodTag,
    /// Defaults to the first configured seed.
    pub source_seed: Option<u64>,
    /// Test-split requests in the decision pool.
    pub pool_size: usize,
    pub sweep: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            balancer: BalancerConfig::default(),
            controllers: ControllerKind::ALL.to_vec(),
            source_method: MethodTag::AwrqMixer,
            source_seed: None,
            pool_size: 4000,
            sweep: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityConfig {
    pub enabled: bool,
    pub gammas: Vec<f64>,
    pub heads: Vec<usize>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            gammas: vec![0.7, 0.8, 0.9, 0.99],
            heads: vec![1, 5, 20],
        }
    }
}

/// One named training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub method: MethodTag,
    pub profile: TrainingProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub env: EnvConfig,
    pub dataset: DatasetConfig,
    pub methods: Vec<MethodTag>,
    pub training: TrainingProfile,
    pub seeds: Vec<u64>,
    /// Iterations between resumable checkpoints.
    pub checkpoint_every: usize,
    pub evaluation: EvaluationConfig,
    pub cost: CostConfig,
    pub allocate: AllocateConfig,
    pub control: ControlConfig,
    pub sensitivity: SensitivityConfig,
    pub output_dir: PathBuf,
    /// Parallel (run, seed) jobs.
    pub workers: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    profile: Option<Profile>,
    env_path: Option<PathBuf>,
    env: Option<toml::Value>,
    dataset: Option<toml::Value>,
    methods: Option<Vec<MethodTag>>,
    training: Option<toml::Value>,
    seeds: Option<Vec<u64>>,
    checkpoint_every: Option<usize>,
    evaluation: Option<toml::Value>,
    cost: Option<toml::Value>,
    allocate: Option<toml::Value>,
    control: Option<toml::Value>,
    sensitivity: Option<toml::Value>,
    output_dir: Option<PathBuf>,
    workers: Option<usize>,
}

fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with the fields present in `patch` replaced, recursively.
fn overlay<T: Serialize + DeserializeOwned>(base: T, patch: Option<toml::Value>) -> Result<T, String> {
    let Some(patch) = patch else { return Ok(base) };
    let mut value = toml::Value::try_from(&base).map_err(|e| e.to_string())?;
    merge(&mut value, patch);
    value.try_into().map_err(|e: toml::de::Error| e.to_string())
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self::from_profile(Profile::Desk)
    }

    pub fn from_profile(profile: Profile) -> Self {
        Self {
            profile,
            env: EnvConfig::default(),
            dataset: DatasetConfig::default(),
            methods: MethodTag::all(),
            training: profile.training(),
            seeds: vec![0, 1, 2, 3, 4],
            checkpoint_every: 1000,
            evaluation: EvaluationConfig::default(),
            cost: CostConfig::default(),
            allocate: AllocateConfig::default(),
            control: ControlConfig::default(),
            sensitivity: SensitivityConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            workers: 1,
        }
    }

    /// Parses a config file; relative paths inside it resolve against its
    /// directory. The output directory env var wins over the file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: format!("cannot read: {e}"),
        })?;
        let base_dir = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_toml_str(&text, base_dir).map_err(|e| match e {
            CliError::Usage(message) => CliError::Config {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> CliResult<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        let profile = raw.profile.unwrap_or(Profile::Desk);
        let d = Self::from_profile(profile);
        fn section(name: &'static str) -> impl Fn(String) -> CliError {
            move |e| CliError::Usage(format!("[{name}] {e}"))
        }
        let env = match (raw.env_path, raw.env) {
            (Some(_), Some(_)) => {
                return Err(CliError::Usage("set either env_path or [env], not both".into()))
            }
            (Some(p), None) => {
                let full = base_dir.join(&p);
                if !full.exists() {
                    return Err(CliError::Config {
                        path: full,
                        message: "env config file does not exist".into(),
                    });
                }
                EnvConfig::load(&full)?
            }
            (None, patch) => overlay(d.env, patch).map_err(section("env"))?,
        };
        let cfg = Self {
            profile,
            env,
            dataset: overlay(d.dataset, raw.dataset).map_err(section("dataset"))?,
            methods: raw.methods.unwrap_or(d.methods),
            training: overlay(d.training, raw.training).map_err(section("training"))?,
            seeds: raw.seeds.unwrap_or(d.seeds),
            checkpoint_every: raw.checkpoint_every.unwrap_or(d.checkpoint_every),
            evaluation: overlay(d.evaluation, raw.evaluation).map_err(section("evaluation"))?,
            cost: overlay(d.cost, raw.cost).map_err(section("cost"))?,
            allocate: overlay(d.allocate, raw.allocate).map_err(section("allocate"))?,
            control: overlay(d.control, raw.control).map_err(section("control"))?,
            sensitivity: overlay(d.sensitivity, raw.sensitivity).map_err(section("sensitivity"))?,
            output_dir: raw
                .output_dir
                .map(|p| base_dir.join(p))
                .unwrap_or(d.output_dir),
            workers: raw.workers.unwrap_or(d.workers),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let fail = |m: &str| Err(CliError::Usage(m.into()));
        if self.seeds.is_empty() {
            return fail("seeds must be non-empty");
        }
        if self.methods.is_empty() {
            return fail("methods must be non-empty");
        }
        if self.checkpoint_every == 0 || self.workers == 0 {
            return fail("checkpoint_every and workers must be positive");
        }
        if self.evaluation.validation_size < 2 {
            return fail("validation_size must be at least 2");
        }
        self.env.validate()?;
        self.control.balancer.validate()?;
        Ok(())
    }

    /// Hash of everything that can change an artifact; the output directory
    /// and worker count are excluded.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        canon.workers = 1;
        let bytes = serde_json::to_vec(&canon).expect("config serializes");
        sha256_hex(&bytes)[..16].to_string()
    }

    pub fn control_seed(&self) -> u64 {
        self.control.source_seed.unwrap_or(self.seeds[0])
    }

    /// The configured methods, plus the γ and K variants when requested.
    /// Variants identical to the main run reuse its name.
    pub fn runs(&self, with_sensitivity: bool) -> Vec<RunSpec> {
        let mut runs: Vec<RunSpec> = self
            .methods
            .iter()
            .map(|&m| RunSpec {
                name: m.tag().to_string(),
                method: m,
                profile: self.training.clone(),
            })
            .collect();
        if with_sensitivity {
            for spec in self.sensitivity_runs() {
                if !runs.iter().any(|r| r.name == spec.name) {
                    runs.push(spec);
                }
            }
        }
        runs
    }

    /// `(parameter, value, run)` for every sensitivity cell.
    pub fn sensitivity_grid(&self) -> Vec<(&'static str, f64, RunSpec)> {
        let base = &self.training;
        let main = MethodTag::AwrqMixer.tag();
        let mut out = Vec::new();
        for &g in &self.sensitivity.gammas {
            let profile = TrainingProfile {
                gamma: g,
                ..base.clone()
            };
            let name = if profile == *base {
                main.to_string()
            } else {
                format!("{main}_gamma{g}")
            };
            out.push(("gamma", g, RunSpec { name, method: MethodTag::AwrqMixer, profile }));
        }
        for &k in &self.sensitivity.heads {
            let profile = TrainingProfile {
                k,
                ..base.clone()
            };
            let name = if profile == *base {
                main.to_string()
            } else {
                format!("{main}_k{k}")
            };
            out.push(("k", k as f64, RunSpec { name, method: MethodTag::AwrqMixer, profile }));
        }
        out
    }

    fn sensitivity_runs(&self) -> Vec<RunSpec> {
        let mut v: Vec<RunSpec> = Vec::new();
        for (_, _, spec) in self.sensitivity_grid() {
            if !v.iter().any(|r| r.name == spec.name) {
                v.push(spec);
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let cfg = ExperimentConfig::from_toml_str("", Path::new(".")).unwrap();
        assert_eq!(cfg, ExperimentConfig::desk());
        assert_eq!(cfg.training.iterations, 20_000);
        assert_eq!(cfg.seeds.len(), 5);
    }

    #[test]
    fn sections_overlay_profile_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
profile = "paper_faithful"
seeds = [3]
methods = ["awrq_mixer", "qmix"]
[training]
iterations = 10
[control.balancer.mpc]
horizon = 4
"#,
            Path::new("."),
        )
        .unwrap();
        assert_eq!(cfg.training.iterations, 10);
        assert_eq!(cfg.training.k, 20);
        assert_eq!(cfg.training.gru_hidden, 256);
        assert_eq!(cfg.control.balancer.mpc.horizon, 4);
        assert_eq!(cfg.control.balancer.mpc.beta, 8.0);
        assert_eq!(cfg.methods.len(), 2);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let here = Path::new(".");
        assert!(ExperimentConfig::from_toml_str("seeds = []", here).is_err());
        assert!(ExperimentConfig::from_toml_str("methods = [\"nope\"]", here).is_err());
        assert!(ExperimentConfig::from_toml_str("[training]\nnope = 1", here).is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1", here).is_err());
        match ExperimentConfig::from_toml_str("env_path = \"missing_env.toml\"", here) {
            Err(CliError::Config { path, .. }) => assert!(path.ends_with("missing_env.toml")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.workers = 4;
        assert_eq!(a.hash(), b.hash());
        b.training.gamma = 0.5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn sensitivity_reuses_main_run() {
        let mut cfg = ExperimentConfig::desk();
        cfg.methods = vec![MethodTag::AwrqMixer];
        let names: Vec<String> = cfg.runs(true).into_iter().map(|r| r.name).collect();
        assert_eq!(
            names,
            [
                "awrq_mixer",
                "awrq_mixer_gamma0.7",
                "awrq_mixer_gamma0.8",
                "awrq_mixer_gamma0.99",
                "awrq_mixer_k1",
                "awrq_mixer_k20"
            ]
        );
    }
}
