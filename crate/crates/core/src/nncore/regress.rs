use ndarray::{Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{seeded_rng, AdamConfig, AdamState, Matrix, Mlp, ParamSet};
use crate::error::{Error, Result};

/// Minibatch settings for supervised MLP fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr: 0.01,
            dropout: 0.0,
            seed: 0,
        }
    }
}

/// Per-column affine normalization fitted on training inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.columns().into_iter().map(|c| c.sum() / n).collect();
        let scale = x
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.scale[j]);
        }
        out
    }
}

/// Masked mean squared error and its gradient with respect to `pred`.
pub fn masked_mse(pred: &Matrix, target: &Matrix, mask: Option<&Matrix>) -> (f64, Matrix) {
    let mut diff = pred - target;
    let denom = match mask {
        Some(m) => {
            diff *= m;
            m.sum().max(1.0)
        }
        None => diff.len().max(1) as f64,
    };
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / denom;
    diff.mapv_inplace(|d| 2.0 * d / denom);
    (loss, diff)
}

/// Trains `mlp` on (x, y) with Adam; returns mean training loss per epoch.
pub fn fit_mse(
    mlp: &mut Mlp,
    x: &Matrix,
    y: &Matrix,
    mask: Option<&Matrix>,
    cfg: &FitConfig,
) -> Result<Vec<f64>> {
    if x.nrows() != y.nrows() || y.ncols() != mlp.output_dim() {
        return Err(Error::shape(
            "regression targets",
            format!("{}x{}", x.nrows(), mlp.output_dim()),
            format!("{}x{}", y.nrows(), y.ncols()),
        ));
    }
    if let Some(m) = mask {
        if m.dim() != y.dim() {
            return Err(Error::shape(
                "regression mask",
                format!("{:?}", y.dim()),
                format!("{:?}", m.dim()),
            ));
        }
    }
    if x.nrows() == 0 || cfg.batch_size == 0 {
        return Err(Error::InsufficientData("empty regression set".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut adam = AdamState::new(mlp, AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let mb = mask.map(|m| m.select(Axis(0), chunk));
            let (pred, cache) = mlp.forward_train(&xb, cfg.dropout, Some(&mut rng))?;
            let (loss, grad) = masked_mse(&pred, &yb, mb.as_ref());
            let mut grads = mlp.zeros_like();
            mlp.backward(&cache, &grad, &mut grads);
            adam.update(mlp, &grads)?;
            total += loss;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    Ok(history)
}

/// Plain mean squared error.
pub fn mse(pred: &Matrix, target: &Matrix) -> f64 {
    let mut s = 0.0;
    Zip::from(pred)
        .and(target)
        .for_each(|p, t| s += (p - t).powi(2));
    s / pred.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::matrix_from_rows;

    #[test]
    fn fits_a_linear_map() {
        let mut rng = seeded_rng(1);
        let rows: Vec<Vec<f64>> = (0..256)
            .map(|i| {
                vec![
                    (i as f64 / 128.0) - 1.0,
                    ((i * 7 % 256) as f64 / 128.0) - 1.0,
                ]
            })
            .collect();
        let x = matrix_from_rows(&rows).unwrap();
        let y = x
            .map_axis(Axis(1), |r| 2.0 * r[0] - r[1] + 0.5)
            .insert_axis(Axis(1));
        let mut mlp = Mlp::new(&[2, 16, 1], &mut rng);
        let hist = fit_mse(
            &mut mlp,
            &x,
            &y,
            None,
            &FitConfig {
                epochs: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(hist.last().unwrap() < &1e-3, "{:?}", hist.last());
    }

    #[test]
    fn mask_excludes_entries() {
        let p = matrix_from_rows(&[vec![1.0, 5.0]]).unwrap();
        let t = matrix_from_rows(&[vec![0.0, 0.0]]).unwrap();
        let m = matrix_from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (loss, g) = masked_mse(&p, &t, Some(&m));
        assert_eq!(loss, 1.0);
        assert_eq!(g[[0, 1]], 0.0);
    }

    #[test]
    fn standardizer_centers_columns() {
        let x = matrix_from_rows(&[vec![1.0, 7.0], vec![3.0, 7.0]]).unwrap();
        let s = Standardizer::fit(&x);
        let z = s.apply(&x);
        assert_eq!(z[[0, 0]], -1.0);
        assert_eq!(z[[0, 1]], 0.0);
    }
}
