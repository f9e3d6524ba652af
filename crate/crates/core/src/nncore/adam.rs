use super::{Checkpoint, Matrix, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment accumulators for one [`ParamSet`], aligned with its traversal order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new<P: ParamSet>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.raw_dim()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One Adam step. A non-finite gradient aborts before anything is touched.
    pub fn update<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.tensors();
        if g.len() != self.first.len() {
            return Err(Error::shape("adam tensors", self.first.len(), g.len()));
        }
        for (i, (gt, mt)) in g.iter().zip(&self.first).enumerate() {
            if gt.dim() != mt.dim() {
                return Err(Error::shape(
                    "adam tensor",
                    format!("{:?}", mt.dim()),
                    format!("{i}: {:?}", gt.dim()),
                ));
            }
            if !gt.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient tensor {i}; training step aborted"
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(g)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for (i, (m, v)) in self.first.iter().zip(&self.second).enumerate() {
            ckpt.push_tensor(format!("{prefix}.m.{i}"), m);
            ckpt.push_tensor(format!("{prefix}.v.{i}"), v);
        }
        ckpt.meta
            .insert(format!("{prefix}.step"), self.step.to_string());
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for i in 0..self.first.len() {
            ckpt.read_tensor(&format!("{prefix}.m.{i}"), &mut self.first[i])?;
            ckpt.read_tensor(&format!("{prefix}.v.{i}"), &mut self.second[i])?;
        }
        self.step = ckpt
            .meta
            .get(&format!("{prefix}.step"))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Serde(format!("missing {prefix}.step")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::DenseParams;
    use ndarray::array;

    fn scalar(w: f64) -> DenseParams {
        DenseParams {
            weights: array![[w]],
            bias: array![[0.0]],
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = scalar(0.37);
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        let zero = p.zeros_like();
        for _ in 0..5 {
            st.update(&mut p, &zero).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let mut g = p.zeros_like();
        g.weights[[0, 0]] = 1.0;
        let mut last = p.weights[[0, 0]];
        for step in 1..=50 {
            st.update(&mut p, &g).unwrap();
            assert_eq!(st.step, step);
            let w = p.weights[[0, 0]];
            assert!(w < last);
            last = w;
        }
    }

    #[test]
    fn quadratic_descent_ten_steps() {
        // f(w) = w^2, simulated directly.
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.01));
        for _ in 0..10 {
            let mut g = p.zeros_like();
            g.weights[[0, 0]] = 2.0 * p.weights[[0, 0]];
            st.update(&mut p, &g).unwrap();
        }
        let w = p.weights[[0, 0]];
        assert!(w.abs() < 1.0);
        // Adam moves ~lr per step while the gradient sign is fixed.
        assert!((w - 0.9).abs() < 1e-3, "{w}");
    }

    #[test]
    fn nan_gradient_is_rejected_without_mutation() {
        let mut p = scalar(0.5);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let mut g = p.zeros_like();
        g.weights[[0, 0]] = f64::NAN;
        assert!(matches!(st.update(&mut p, &g), Err(Error::NonFinite(_))));
        assert_eq!(p, scalar(0.5));
        assert_eq!(st.step, 0);
    }
}
