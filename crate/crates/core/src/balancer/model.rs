use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{
    fit_mse, matrix_from_rows, seeded_rng, Checkpoint, FitConfig, Matrix, Mlp, Standardizer,
};

pub const MIN_TRANSITIONS: usize = 100;
const N_FEATURES: usize = 5;

/// Exogenous conditions of the interval being predicted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateFeatures {
    /// Request volume relative to the nominal rate.
    pub traffic: f64,
    /// Fraction of the day in [0, 1).
    pub time_of_day: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub utilization: f64,
    pub state: StateFeatures,
    pub lambda: f64,
    pub next_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemModelConfig {
    pub hidden: Vec<usize>,
    pub fit: FitConfig,
    pub holdout_frac: f64,
    /// λ enters the regressor as ln(1 + λ / lambda_scale).
    pub lambda_scale: f64,
}

impl Default for SystemModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            fit: FitConfig {
                epochs: 150,
                batch_size: 64,
                lr: 0.003,
                dropout: 0.0,
                seed: 0,
            },
            holdout_frac: 0.2,
            lambda_scale: 1e-2,
        }
    }
}

/// Learned one-step utilization model g(Ĉ, s, λ) → Ĉ'.
#[derive(Debug, Clone)]
pub struct SystemModel {
    mlp: Mlp,
    input: Standardizer,
    target_mean: f64,
    target_scale: f64,
    lambda_scale: f64,
    pub holdout_rmse: f64,
    /// max − min of the observed next utilization.
    pub utilization_range: f64,
}

fn feature_row(u: f64, s: &StateFeatures, lambda: f64, lambda_scale: f64) -> [f64; N_FEATURES] {
    let phase = TAU * s.time_of_day;
    [
        u,
        s.traffic,
        phase.sin(),
        phase.cos(),
        (lambda.max(0.0) / lambda_scale).ln_1p(),
    ]
}

impl SystemModel {
    pub fn fit(history: &[Transition], cfg: &SystemModelConfig) -> Result<Self> {
        if history.len() < MIN_TRANSITIONS {
            return Err(Error::InsufficientData(format!(
                "system model needs at least {MIN_TRANSITIONS} transitions, got {}",
                history.len()
            )));
        }
        if !(0.0..1.0).contains(&cfg.holdout_frac) || !(cfg.lambda_scale > 0.0) {
            return Err(Error::InvalidArgument(
                "holdout_frac must be in [0, 1) and lambda_scale positive".into(),
            ));
        }
        if history.iter().any(|t| {
            ![t.utilization, t.next_utilization, t.lambda, t.state.traffic]
                .iter()
                .all(|v| v.is_finite())
        }) {
            return Err(Error::NonFinite("system model history".into()));
        }
        let mut order: Vec<usize> = (0..history.len()).collect();
        order.shuffle(&mut seeded_rng(cfg.fit.seed ^ 0x5eed));
        let n_hold = ((history.len() as f64 * cfg.holdout_frac).round() as usize)
            .min(history.len() - 1);
        let (hold, train) = order.split_at(n_hold);

        let rows = |idx: &[usize]| -> Result<(Matrix, Matrix)> {
            let x: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| {
                    let t = &history[i];
                    feature_row(t.utilization, &t.state, t.lambda, cfg.lambda_scale).to_vec()
                })
                .collect();
            let y: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| vec![history[i].next_utilization])
                .collect();
            Ok((matrix_from_rows(&x)?, matrix_from_rows(&y)?))
        };
        let (x_train, y_train) = rows(train)?;
        let input = Standardizer::fit(&x_train);
        let target = Standardizer::fit(&y_train);
        let mut sizes = vec![N_FEATURES];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        let mut mlp = Mlp::new(&sizes, &mut seeded_rng(cfg.fit.seed));
        fit_mse(
            &mut mlp,
            &input.apply(&x_train),
            &target.apply(&y_train),
            None,
            &cfg.fit,
        )?;

        let (lo, hi) = history
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                (lo.min(t.next_utilization), hi.max(t.next_utilization))
            });
        let mut model = Self {
            mlp,
            input,
            target_mean: target.mean[0],
            target_scale: target.scale[0],
            lambda_scale: cfg.lambda_scale,
            holdout_rmse: f64::NAN,
            utilization_range: hi - lo,
        };
        let eval_idx = if hold.is_empty() { train } else { hold };
        let (x_eval, y_eval) = rows(eval_idx)?;
        let pred = model.predict_features(&x_eval);
        let sse: f64 = pred.iter().zip(y_eval.iter()).map(|(p, y)| (p - y).powi(2)).sum();
        model.holdout_rmse = (sse / eval_idx.len() as f64).sqrt();
        Ok(model)
    }

    fn predict_features(&self, x: &Matrix) -> Vec<f64> {
        self.mlp
            .forward(&self.input.apply(x))
            .iter()
            .map(|z| (z * self.target_scale + self.target_mean).max(0.0))
            .collect()
    }

    pub fn predict(&self, utilization: f64, state: &StateFeatures, lambda: f64) -> f64 {
        self.predict_batch(&[utilization], state, &[lambda])[0]
    }

    /// One step for many (utilization, λ) pairs under shared conditions.
    pub fn predict_batch(&self, utilization: &[f64], state: &StateFeatures, lambda: &[f64]) -> Vec<f64> {
        debug_assert_eq!(utilization.len(), lambda.len());
        let mut x = Matrix::zeros((utilization.len(), N_FEATURES));
        for (i, (u, l)) in utilization.iter().zip(lambda).enumerate() {
            for (j, v) in feature_row(*u, state, *l, self.lambda_scale).into_iter().enumerate() {
                x[[i, j]] = v;
            }
        }
        self.predict_features(&x)
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.push_params(&format!("{prefix}.mlp"), &self.mlp);
        let stats = |v: &[f64]| ndarray::Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
        ckpt.push_tensor(format!("{prefix}.input_mean"), &stats(&self.input.mean));
        ckpt.push_tensor(format!("{prefix}.input_scale"), &stats(&self.input.scale));
        ckpt.push_tensor(
            format!("{prefix}.target"),
            &stats(&[
                self.target_mean,
                self.target_scale,
                self.lambda_scale,
                self.holdout_rmse,
                self.utilization_range,
            ]),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Ĉ' = 0.8 Ĉ − 2λ + traffic, floored at zero.
    fn linear_history(n: usize, seed: u64) -> Vec<Transition> {
        let mut rng = seeded_rng(seed);
        let mut u: f64 = 1.0;
        (0..n)
            .map(|i| {
                let state = StateFeatures {
                    traffic: rng.random_range(0.5..1.5),
                    time_of_day: (i % 1440) as f64 / 1440.0,
                };
                let lambda = rng.random_range(0.0..0.5);
                let next = (0.8 * u - 2.0 * lambda + state.traffic).max(0.0);
                let t = Transition {
                    utilization: u,
                    state,
                    lambda,
                    next_utilization: next,
                };
                u = next;
                t
            })
            .collect()
    }

    #[test]
    fn learns_a_linear_plant() {
        let hist = linear_history(3000, 3);
        let model = SystemModel::fit(&hist, &SystemModelConfig::default()).unwrap();
        assert!(
            model.holdout_rmse < 0.05 * model.utilization_range,
            "rmse {} range {}",
            model.holdout_rmse,
            model.utilization_range
        );
        let state = StateFeatures {
            traffic: 1.0,
            time_of_day: 0.3,
        };
        let lambdas: Vec<f64> = (0..=20).map(|i| i as f64 * 0.025).collect();
        let preds = model.predict_batch(&vec![2.5; lambdas.len()], &state, &lambdas);
        for w in preds.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "{preds:?}");
        }
        assert!(preds.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn fit_is_deterministic_and_needs_data() {
        let hist = linear_history(200, 9);
        let cfg = SystemModelConfig {
            fit: FitConfig {
                epochs: 5,
                ..SystemModelConfig::default().fit
            },
            ..Default::default()
        };
        let a = SystemModel::fit(&hist, &cfg).unwrap();
        let b = SystemModel::fit(&hist, &cfg).unwrap();
        assert_eq!(a.holdout_rmse.to_bits(), b.holdout_rmse.to_bits());
        let s = StateFeatures {
            traffic: 0.9,
            time_of_day: 0.1,
        };
        assert_eq!(a.predict(1.0, &s, 0.2).to_bits(), b.predict(1.0, &s, 0.2).to_bits());
        assert!(matches!(
            SystemModel::fit(&hist[..99], &cfg),
            Err(Error::InsufficientData(_))
        ));
    }
}
