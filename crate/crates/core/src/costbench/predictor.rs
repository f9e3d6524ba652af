use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::envsim::{one_hot_vec, EpisodeRecord, JointAction, Layout, RequestContext, N_STAGES};
use crate::error::{Error, Result};
use crate::nncore::{fit_mse, seeded_rng, Checkpoint, FitConfig, Matrix, Mlp, Standardizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub hidden: Vec<usize>,
    pub fit: FitConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            fit: FitConfig {
                epochs: 40,
                batch_size: 128,
                lr: 0.005,
                dropout: 0.0,
                seed: 0,
            },
        }
    }
}

/// Multi-task regressor for per-stage result sizes.
///
/// A shared trunk feeds three linear heads: the retrieval pool size and the
/// pass rates of the two filtering stages. Sizes are then chained through
/// the chosen truncation lengths, so predictions never exceed a truncation
/// and grow with it. Pass-rate targets are only taken from episodes where
/// the truncation did not bind.
#[derive(Debug, Clone)]
pub struct ActionResultPredictor {
    layout: Layout,
    mlp: Mlp,
    norm: Option<Standardizer>,
    pool_scale: f64,
}

impl ActionResultPredictor {
    pub fn new(layout: Layout, cfg: &PredictorConfig) -> Self {
        let mut sizes = vec![layout.request_dim() + layout.channel_subsets.len()];
        sizes.extend(&cfg.hidden);
        sizes.push(N_STAGES);
        let mlp = Mlp::new(&sizes, &mut seeded_rng(cfg.fit.seed));
        let pool_scale = layout.channel_yields.iter().sum();
        Self {
            layout,
            mlp,
            norm: None,
            pool_scale,
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.norm.is_some()
    }

    fn input_row(&self, s: &RequestContext, channel_action: usize) -> Vec<f64> {
        let mut row = self.layout.request_features(s);
        row.extend(one_hot_vec(
            channel_action,
            self.layout.channel_subsets.len(),
        ));
        row
    }

    /// Returns the per-epoch training loss.
    pub fn fit(&mut self, episodes: &[&EpisodeRecord], cfg: &PredictorConfig) -> Result<Vec<f64>> {
        if episodes.is_empty() {
            return Err(Error::InsufficientData(
                "no episodes to fit the result predictor".into(),
            ));
        }
        let n = episodes.len();
        let dim = self.mlp.input_dim();
        let mut x = Array2::zeros((n, dim));
        let mut y = Array2::zeros((n, N_STAGES));
        let mut mask = Array2::zeros((n, N_STAGES));
        for (i, ep) in episodes.iter().enumerate() {
            let a = ep.action();
            for (j, v) in self.input_row(&ep.request, a.0[0]).into_iter().enumerate() {
                x[[i, j]] = v;
            }
            let [pool, pre, rank] = ep.sizes;
            y[[i, 0]] = pool / self.pool_scale;
            mask[[i, 0]] = 1.0;
            let t2 = self.layout.truncation(1, a.0[1]).unwrap_or(usize::MAX) as f64;
            if pool > 0.0 && pre < t2 {
                y[[i, 1]] = pre / pool;
                mask[[i, 1]] = 1.0;
            }
            let t3 = self.layout.truncation(2, a.0[2]).unwrap_or(usize::MAX) as f64;
            if pre > 0.0 && rank < t3 {
                y[[i, 2]] = rank / pre;
                mask[[i, 2]] = 1.0;
            }
        }
        let norm = Standardizer::fit(&x);
        let xs = norm.apply(&x);
        let hist = fit_mse(&mut self.mlp, &xs, &y, Some(&mask), &cfg.fit)?;
        self.norm = Some(norm);
        Ok(hist)
    }

    fn heads(&self, rows: Matrix) -> Result<Matrix> {
        let norm = self
            .norm
            .as_ref()
            .ok_or_else(|| Error::NotFitted("action-result predictor".into()))?;
        Ok(self.mlp.forward(&norm.apply(&rows)))
    }

    fn chain(&self, head: ndarray::ArrayView1<f64>, a: &JointAction) -> [f64; N_STAGES] {
        let pool = (head[0] * self.pool_scale).max(0.0);
        let t2 = self.layout.prerank_truncations[a.0[1]] as f64;
        let pre = t2.min(head[1].clamp(0.0, 1.0) * pool);
        let t3 = self.layout.truncation(2, a.0[2]).expect("validated action") as f64;
        let rank = t3.min(head[2].clamp(0.0, 1.0) * pre);
        [pool, pre, rank]
    }

    /// Predicted candidates leaving each stage.
    pub fn predict_action_results(
        &self,
        s: &RequestContext,
        a: &JointAction,
    ) -> Result<[f64; N_STAGES]> {
        self.layout.action_space().validate(a)?;
        let row = self.input_row(s, a.0[0]);
        let m = Array2::from_shape_vec((1, row.len()), row)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let h = self.heads(m)?;
        Ok(self.chain(h.row(0), a))
    }

    /// Predictions for every joint action of every request, in flat action
    /// order. One trunk pass per (request, channel subset).
    pub fn predict_all(&self, requests: &[&RequestContext]) -> Result<Vec<Vec<[f64; N_STAGES]>>> {
        let space = self.layout.action_space();
        let n_ch = space.sizes[0];
        let dim = self.mlp.input_dim();
        let mut x = Array2::zeros((requests.len() * n_ch, dim));
        for (i, s) in requests.iter().enumerate() {
            for c in 0..n_ch {
                for (j, v) in self.input_row(s, c).into_iter().enumerate() {
                    x[[i * n_ch + c, j]] = v;
                }
            }
        }
        let h = self.heads(x)?;
        Ok((0..requests.len())
            .map(|i| {
                space
                    .iter()
                    .map(|a| self.chain(h.row(i * n_ch + a.0[0]), &a))
                    .collect()
            })
            .collect())
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        let norm = self
            .norm
            .as_ref()
            .ok_or_else(|| Error::NotFitted("action-result predictor".into()))?;
        ckpt.push_params(prefix, &self.mlp);
        ckpt.meta
            .insert(format!("{prefix}.norm"), serde_json::to_string(norm)?);
        ckpt.meta.insert(
            format!("{prefix}.layout"),
            serde_json::to_string(&self.layout)?,
        );
        Ok(())
    }

    pub fn load_from(ckpt: &Checkpoint, prefix: &str, cfg: &PredictorConfig) -> Result<Self> {
        let get = |k: &str| {
            ckpt.meta
                .get(&format!("{prefix}.{k}"))
                .ok_or_else(|| Error::Serde(format!("checkpoint missing {prefix}.{k}")))
        };
        let layout: Layout = serde_json::from_str(get("layout")?)?;
        let mut p = Self::new(layout, cfg);
        ckpt.load_params(prefix, &mut p.mlp)?;
        p.norm = Some(serde_json::from_str(get("norm")?)?);
        Ok(p)
    }
}
