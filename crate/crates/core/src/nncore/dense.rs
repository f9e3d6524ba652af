use ndarray::linalg::general_mat_mul;
use ndarray::Axis;
use rand::Rng;

use super::{glorot_uniform, Matrix, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Affine layer `y = act(x W + b)` with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weights: Matrix,
    pub bias: Matrix,
}

impl DenseParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Matrix::zeros((in_dim, out_dim)),
            bias: Matrix::zeros((1, out_dim)),
        }
    }

    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weights: glorot_uniform(in_dim, out_dim, rng),
            bias: Matrix::zeros((1, out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Forward pass without shape checks or cache; for inference paths.
    pub fn apply(&self, x: &Matrix, activation: Activation) -> Matrix {
        let mut y = x.dot(&self.weights);
        y += &self.bias;
        if activation == Activation::Relu {
            y.mapv_inplace(|v| v.max(0.0));
        }
        y
    }
}

impl ParamSet for DenseParams {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.weights, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weights, &mut self.bias]
    }

    fn tensor_names(&self) -> Vec<String> {
        vec!["weights".into(), "bias".into()]
    }
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Matrix,
    output: Matrix,
    activation: Activation,
}

impl DenseCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

pub fn dense_forward(
    x: &Matrix,
    p: &DenseParams,
    activation: Activation,
) -> Result<(Matrix, DenseCache)> {
    if x.ncols() != p.in_dim() {
        return Err(Error::shape(
            "dense_forward input columns",
            p.in_dim(),
            x.ncols(),
        ));
    }
    if p.bias.dim() != (1, p.out_dim()) {
        return Err(Error::shape(
            "dense_forward bias",
            format!("(1, {})", p.out_dim()),
            format!("{:?}", p.bias.dim()),
        ));
    }
    let y = p.apply(x, activation);
    let cache = DenseCache {
        input: x.clone(),
        output: y.clone(),
        activation,
    };
    Ok((y, cache))
}

/// Accumulates parameter gradients into `grads` and returns `dL/dx`.
pub fn dense_backward(
    p: &DenseParams,
    cache: &DenseCache,
    grad_out: &Matrix,
    grads: &mut DenseParams,
) -> Matrix {
    let mut g = grad_out.clone();
    if cache.activation == Activation::Relu {
        ndarray::Zip::from(&mut g)
            .and(&cache.output)
            .for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            });
    }
    general_mat_mul(1.0, &cache.input.t(), &g, 1.0, &mut grads.weights);
    grads.bias += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
    g.dot(&p.weights.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::seeded_rng;
    use crate::nncore::testutil::{max_rel_error, numeric_grad};
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn identity_layer() {
        let p = DenseParams {
            weights: Matrix::eye(2),
            bias: Matrix::zeros((1, 2)),
        };
        let (y, _) = dense_forward(&array![[1.0, 0.0]], &p, Activation::Relu).unwrap();
        assert_eq!(y, array![[1.0, 0.0]]);
    }

    #[test]
    fn relu_clamps_negative() {
        let p = DenseParams {
            weights: array![[1.0]],
            bias: array![[0.0]],
        };
        let (y, _) = dense_forward(&array![[-1.0]], &p, Activation::Relu).unwrap();
        assert_eq!(y, array![[0.0]]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = DenseParams::zeros(3, 2);
        let err = dense_forward(&Matrix::zeros((1, 4)), &p, Activation::None).unwrap_err();
        assert!(err.to_string().contains("expected 3, got 4"), "{err}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded_rng(7);
        for draw in 0..20 {
            let p = DenseParams {
                weights: Matrix::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)),
                bias: Matrix::from_shape_fn((1, 4), |_| rng.random_range(-0.5..0.5)),
            };
            let x = Matrix::from_shape_fn((5, 3), |_| rng.random_range(-2.0..2.0));
            let target = Matrix::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
            let act = if draw % 2 == 0 {
                Activation::Relu
            } else {
                Activation::None
            };
            let loss = |p: &DenseParams| {
                let y = p.apply(&x, act);
                (&y - &target).mapv(|v| v * v).sum() * 0.5
            };
            let (y, cache) = dense_forward(&x, &p, act).unwrap();
            let mut grads = p.zeros_like();
            let dx = dense_backward(&p, &cache, &(&y - &target), &mut grads);
            let num = numeric_grad(&p, 1e-5, loss);
            assert!(max_rel_error(&grads.to_flat(), &num, 1e-6) < 1e-4);

            // input gradient
            let mut xp = x.clone();
            for i in 0..x.len() {
                let orig = xp.as_slice().unwrap()[i];
                xp.as_slice_mut().unwrap()[i] = orig + 1e-5;
                let up = (&p.apply(&xp, act) - &target).mapv(|v| v * v).sum() * 0.5;
                xp.as_slice_mut().unwrap()[i] = orig - 1e-5;
                let down = (&p.apply(&xp, act) - &target).mapv(|v| v * v).sum() * 0.5;
                xp.as_slice_mut().unwrap()[i] = orig;
                let fd = (up - down) / 2e-5;
                let a = dx.as_slice().unwrap()[i];
                assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4);
            }
        }
    }
}
