//! Small differentiable-computation core.
//!
//! Networks here are fixed small topologies, so every layer carries its own
//! manual backward function and callers compose them in reverse order. All
//! arithmetic is `f64`; parameters live in row-major `ndarray` matrices
//! (biases are `1 x out` rows so they broadcast over a batch).

mod adam;
mod checkpoint;
mod dense;
mod gru;
mod init;
mod mlp;
mod regress;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, NamedTensor, RngState};
pub use dense::{dense_backward, dense_forward, Activation, DenseCache, DenseParams};
pub use gru::{gru_backward, gru_step, GruCache, GruParams};
pub use init::{derive_seed, dropout_mask, glorot_uniform, glorot_uniform_init, seeded_rng, SeededRng};
pub use mlp::{Mlp, MlpCache};
pub use regress::{fit_mse, masked_mse, mse, FitConfig, Standardizer};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Batched activations and parameters: `rows x cols`, row-major.
pub type Matrix = Array2<f64>;

/// A named collection of parameter matrices with a fixed traversal order.
///
/// The same type doubles as its own gradient container.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;
    fn tensor_names(&self) -> Vec<String>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.scaled_add(scale, src);
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    fn l2_norm_sq(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Flattened copy of every parameter in traversal order.
    fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect()
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn tensors(&self) -> Vec<&Matrix> {
        self.iter().flat_map(|p| p.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.iter()
            .enumerate()
            .flat_map(|(i, p)| {
                p.tensor_names()
                    .into_iter()
                    .map(move |n| format!("{i}.{n}"))
            })
            .collect()
    }
}

/// Numerically safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Builds a `rows x cols` matrix from row vectors of equal length.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    let mut m = Matrix::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::shape("matrix_from_rows", cols, r.len()));
        }
        m.row_mut(i)
            .assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    Ok(m)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite-difference gradient of a scalar loss w.r.t. every
    /// parameter of `params`, in traversal order.
    pub fn numeric_grad<P: ParamSet>(params: &P, step: f64, loss: impl Fn(&P) -> f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut probe = params.clone();
        let n_tensors = params.tensors().len();
        for ti in 0..n_tensors {
            let len = params.tensors()[ti].len();
            for j in 0..len {
                let orig = params.tensors()[ti].as_slice().unwrap()[j];
                probe.tensors_mut()[ti].as_slice_mut().unwrap()[j] = orig + step;
                let up = loss(&probe);
                probe.tensors_mut()[ti].as_slice_mut().unwrap()[j] = orig - step;
                let down = loss(&probe);
                probe.tensors_mut()[ti].as_slice_mut().unwrap()[j] = orig;
                out.push((up - down) / (2.0 * step));
            }
        }
        out
    }

    /// Smallest |pre-activation| over the hidden layers of `mlp` on `x`.
    /// Central differences are only valid away from ReLU kinks.
    pub fn kink_margin(mlp: &Mlp, x: &Matrix) -> f64 {
        let mut h = x.clone();
        let mut margin = f64::INFINITY;
        for l in &mlp.layers[..mlp.layers.len() - 1] {
            let pre = l.apply(&h, Activation::None);
            margin = pre.iter().fold(margin, |m, v| m.min(v.abs()));
            h = pre.mapv(|v| v.max(0.0));
        }
        margin
    }

    /// Max over entries of |a-n| / max(|a|, |n|, floor).
    pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softplus_reference_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
        // ln(1 + e^-20) to 17 digits via the series x - x^2/2 with x = e^-20.
        let x = (-20.0f64).exp();
        let expected = x - x * x / 2.0;
        assert!((softplus(-20.0) - expected).abs() < 1e-22);
        assert!((softplus(-20.0) - 2.0612e-9).abs() < 1e-13);
    }

    #[test]
    fn softplus_branches_are_continuous() {
        for &b in &[30.0, -30.0] {
            let lo = softplus(b - 1e-9);
            let hi = softplus(b + 1e-9);
            assert!((lo - hi).abs() < 1e-8, "jump at {b}: {lo} vs {hi}");
        }
        assert!(softplus(1000.0).is_finite());
        assert_eq!(softplus(-1000.0), 0.0);
    }

    proptest! {
        #[test]
        fn softplus_bounds(x in -200.0f64..200.0) {
            let y = softplus(x);
            prop_assert!(y >= 0.0);
            prop_assert!(y >= x);
        }

        #[test]
        fn softplus_increasing(x in -60.0f64..60.0, d in 1e-3f64..5.0) {
            prop_assert!(softplus(x + d) > softplus(x));
        }
    }

    #[test]
    fn sigmoid_is_softplus_derivative() {
        for i in -40..=40 {
            let x = i as f64 * 0.5;
            let h = 1e-5;
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((fd - sigmoid(x)).abs() < 1e-8);
        }
    }
}
