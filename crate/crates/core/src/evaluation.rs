//! Offline revenue simulation: a ground-truth revenue ensemble, test-split
//! action quotas, quota-constrained allocation and the resulting scores.

use serde::{Deserialize, Serialize};

use crate::allocator::{greedy_allocate, return_percent, ActionQuota, AllocationPlan};
use crate::envsim::{ActionSpace, EpisodeRecord, LoggedDataset, PipelineEnv, RequestContext};
use crate::error::{Error, Result};
use crate::metrics::spearman_rs;
use crate::nncore::{derive_seed, fit_mse, seeded_rng, Checkpoint, FitConfig, Matrix, Mlp, Standardizer};
use crate::qtable::{request_matrix, QTableSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundTruthConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub fit: FitConfig,
    pub seed: u64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            members: 5,
            hidden: vec![64, 64],
            fit: FitConfig {
                epochs: 15,
                batch_size: 128,
                lr: 0.003,
                ..FitConfig::default()
            },
            seed: 0,
        }
    }
}

/// Mean of independently seeded revenue regressors on
/// (request descriptor, per-stage action one-hots).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthModel {
    pub members: Vec<Mlp>,
    pub input: Standardizer,
    pub target_mean: f64,
    pub target_scale: f64,
    pub space: ActionSpace,
}

fn design_row(env: &PipelineEnv, features: &[f64], a: &crate::envsim::JointAction) -> Vec<f64> {
    let mut row = features.to_vec();
    row.extend(env.action_space().one_hot(a));
    row
}

impl GroundTruthModel {
    pub fn fit(env: &PipelineEnv, episodes: &[&EpisodeRecord], cfg: &GroundTruthConfig) -> Result<Self> {
        if cfg.members == 0 || episodes.len() < 2 {
            return Err(Error::InsufficientData("ground-truth fit needs members and at least 2 episodes".into()));
        }
        let rows: Vec<Vec<f64>> = episodes
            .iter()
            .map(|e| design_row(env, &env.request_features(&e.request), &e.action()))
            .collect();
        let x_raw = crate::nncore::matrix_from_rows(&rows)?;
        let input = Standardizer::fit(&x_raw);
        let x = input.apply(&x_raw);
        let r: Vec<f64> = episodes.iter().map(|e| e.reward).collect();
        let target_mean = r.iter().sum::<f64>() / r.len() as f64;
        let var = r.iter().map(|v| (v - target_mean).powi(2)).sum::<f64>() / r.len() as f64;
        let target_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let y = Matrix::from_shape_fn((r.len(), 1), |(i, _)| (r[i] - target_mean) / target_scale);
        let mut sizes = vec![x.ncols()];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        let members = (0..cfg.members)
            .map(|k| {
                let seed = derive_seed(cfg.seed, k as u64);
                let mut mlp = Mlp::new(&sizes, &mut seeded_rng(seed));
                fit_mse(&mut mlp, &x, &y, None, &FitConfig { seed, ..cfg.fit.clone() })?;
                Ok(mlp)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            members,
            input,
            target_mean,
            target_scale,
            space: env.action_space(),
        })
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.push_params("members", &self.members);
        ckpt.meta.insert("ground_truth.input".into(), serde_json::to_string(&self.input)?);
        ckpt.meta.insert("ground_truth.target_mean".into(), self.target_mean.to_string());
        ckpt.meta.insert("ground_truth.target_scale".into(), self.target_scale.to_string());
        Ok(())
    }

    pub fn load(env: &PipelineEnv, cfg: &GroundTruthConfig, ckpt: &Checkpoint) -> Result<Self> {
        let input: Standardizer = serde_json::from_str(
            ckpt.meta.get("ground_truth.input").map(String::as_str).unwrap_or(""),
        )?;
        let mut sizes = vec![input.mean.len()];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        let mut rng = seeded_rng(0);
        let mut members: Vec<Mlp> = (0..cfg.members).map(|_| Mlp::new(&sizes, &mut rng)).collect();
        ckpt.load_params("members", &mut members)?;
        Ok(Self {
            members,
            input,
            target_mean: ckpt.meta_parse("ground_truth.target_mean")?,
            target_scale: ckpt.meta_parse("ground_truth.target_scale")?,
            space: env.action_space(),
        })
    }
}

impl QTableSource for GroundTruthModel {
    fn q_tables(&self, env: &PipelineEnv, requests: &[&RequestContext]) -> Result<Vec<Vec<f64>>> {
        let n = self.space.joint_count();
        let feats = request_matrix(env, requests);
        let mut rows = Vec::with_capacity(requests.len() * n);
        for f in feats.rows() {
            let f = f.to_vec();
            for a in self.space.iter() {
                rows.push(design_row(env, &f, &a));
            }
        }
        let x = self.input.apply(&crate::nncore::matrix_from_rows(&rows)?);
        let mut sum = Matrix::zeros((x.nrows(), 1));
        for m in &self.members {
            sum += &m.forward(&x);
        }
        let k = self.members.len() as f64;
        Ok((0..requests.len())
            .map(|i| {
                (0..n)
                    .map(|a| self.target_mean + self.target_scale * sum[[i * n + a, 0]] / k)
                    .collect()
            })
            .collect())
    }
}

/// Latent expected revenue of every joint action for each request.
pub fn latent_tables(env: &PipelineEnv, requests: &[&RequestContext]) -> Result<Vec<Vec<f64>>> {
    let space = env.action_space();
    requests
        .iter()
        .map(|s| space.iter().map(|a| env.true_revenue(s, &a)).collect())
        .collect()
}

/// Scores of one method under the protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub return_percent: f64,
    pub r_s: f64,
    pub plan: AllocationPlan,
}

/// Everything fixed across compared methods: the evaluation requests, their
/// quota, and the ground-truth tables and plan.
#[derive(Debug, Clone)]
pub struct Protocol {
    pub requests: Vec<RequestContext>,
    pub logged_actions: Vec<usize>,
    pub quota: ActionQuota,
    pub gt_tables: Vec<Vec<f64>>,
    pub gt_plan: AllocationPlan,
}

impl Protocol {
    /// Uses `episodes` (normally the test split) as the evaluation set.
    pub fn new(env: &PipelineEnv, episodes: &[&EpisodeRecord], gt: &dyn QTableSource) -> Result<Self> {
        let space = env.action_space();
        let requests: Vec<RequestContext> = episodes.iter().map(|e| e.request.clone()).collect();
        let logged_actions: Vec<usize> = episodes.iter().map(|e| space.flat_index(&e.action())).collect();
        let quota = ActionQuota::from_actions(&logged_actions, space.joint_count())?;
        let refs: Vec<&RequestContext> = requests.iter().collect();
        let gt_tables = gt.q_tables(env, &refs)?;
        let gt_plan = greedy_allocate(&gt_tables, &quota)?;
        Ok(Self {
            requests,
            logged_actions,
            quota,
            gt_tables,
            gt_plan,
        })
    }

    pub fn request_refs(&self) -> Vec<&RequestContext> {
        self.requests.iter().collect()
    }

    pub fn evaluate_tables(&self, tables: &[Vec<f64>]) -> Result<EvalResult> {
        let plan = greedy_allocate(tables, &self.quota)?;
        let flat: Vec<f64> = tables.iter().flatten().copied().collect();
        let gt: Vec<f64> = self.gt_tables.iter().flatten().copied().collect();
        Ok(EvalResult {
            return_percent: return_percent(&plan, &self.gt_plan, &self.gt_tables)?,
            r_s: spearman_rs(&flat, &gt)?,
            plan,
        })
    }

    pub fn evaluate(&self, env: &PipelineEnv, source: &dyn QTableSource) -> Result<EvalResult> {
        self.evaluate_tables(&source.q_tables(env, &self.request_refs())?)
    }

    /// r_s of the ground-truth tables against latent revenue.
    pub fn ground_truth_fidelity(&self, env: &PipelineEnv) -> Result<f64> {
        let latent: Vec<f64> = latent_tables(env, &self.request_refs())?.into_iter().flatten().collect();
        let gt: Vec<f64> = self.gt_tables.iter().flatten().copied().collect();
        spearman_rs(&gt, &latent)
    }
}

/// The ground-truth model is fit on both splits.
pub fn fit_ground_truth(env: &PipelineEnv, ds: &LoggedDataset, cfg: &GroundTruthConfig) -> Result<GroundTruthModel> {
    let all: Vec<&EpisodeRecord> = ds.episodes.iter().collect();
    GroundTruthModel::fit(env, &all, cfg)
}
