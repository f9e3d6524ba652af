use rand::Rng;

use super::{
    dense_backward, dense_forward, dropout_mask, Activation, DenseCache, DenseParams, Matrix,
    ParamSet,
};
use crate::error::Result;

/// ReLU hidden layers followed by a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseParams>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    layers: Vec<DenseCache>,
    masks: Vec<Option<Matrix>>,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`, Glorot-initialized.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| DenseParams::glorot(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseParams::out_dim)
    }

    fn activation(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            Activation::None
        } else {
            Activation::Relu
        }
    }

    /// Inference forward pass (no dropout).
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut h = self.layers[0].apply(x, self.activation(0));
        for (i, l) in self.layers.iter().enumerate().skip(1) {
            h = l.apply(&h, self.activation(i));
        }
        h
    }

    /// Training forward pass. Dropout is applied after every hidden layer
    /// when `rate > 0` and an RNG is supplied.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        x: &Matrix,
        dropout: f64,
        mut rng: Option<&mut R>,
    ) -> Result<(Matrix, MlpCache)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let act = self.activation(i);
            let (mut y, c) = dense_forward(&h, l, act)?;
            let mask = match (&mut rng, act) {
                (Some(r), Activation::Relu) if dropout > 0.0 => {
                    let m = dropout_mask(y.nrows(), y.ncols(), dropout, &mut **r);
                    y *= &m;
                    Some(m)
                }
                _ => None,
            };
            caches.push(c);
            masks.push(mask);
            h = y;
        }
        Ok((
            h,
            MlpCache {
                layers: caches,
                masks,
            },
        ))
    }

    /// Accumulates gradients into `grads`; returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Matrix, grads: &mut Mlp) -> Matrix {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if let Some(m) = &cache.masks[i] {
                g *= m;
            }
            g = dense_backward(&self.layers[i], &cache.layers[i], &g, &mut grads.layers[i]);
        }
        g
    }
}

impl ParamSet for Mlp {
    fn tensors(&self) -> Vec<&Matrix> {
        self.layers.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.tensors_mut()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.layers.tensor_names()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::seeded_rng;
    use crate::nncore::testutil::{kink_margin, max_rel_error, numeric_grad};

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded_rng(21);
        let mut draws = 0;
        while draws < 20 {
            let mlp = Mlp::new(&[4, 6, 5, 3], &mut rng);
            let x = Matrix::from_shape_fn((4, 4), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
            if kink_margin(&mlp, &x) < 1e-3 {
                continue;
            }
            draws += 1;
            let loss = |m: &Mlp| m.forward(&x).mapv(|v| v * v).sum() * 0.5;
            let (y, cache) = mlp
                .forward_train::<crate::nncore::SeededRng>(&x, 0.0, None)
                .unwrap();
            let mut grads = mlp.zeros_like();
            mlp.backward(&cache, &y, &mut grads);
            let num = numeric_grad(&mlp, 1e-5, loss);
            assert!(max_rel_error(&grads.to_flat(), &num, 1e-6) < 1e-4);
        }
    }

    #[test]
    fn dropout_is_seeded_and_inactive_at_inference() {
        let mlp = Mlp::new(&[3, 8, 2], &mut seeded_rng(1));
        let x = Matrix::from_elem((5, 3), 0.3);
        let (a, _) = mlp
            .forward_train(&x, 0.2, Some(&mut seeded_rng(9)))
            .unwrap();
        let (b, _) = mlp
            .forward_train(&x, 0.2, Some(&mut seeded_rng(9)))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(mlp.forward(&x), mlp.forward(&x));
        let (c, _) = mlp
            .forward_train::<crate::nncore::SeededRng>(&x, 0.2, None)
            .unwrap();
        assert_eq!(c, mlp.forward(&x));
    }

    #[test]
    fn dropout_gradient_uses_the_same_mask() {
        let mut rng = seeded_rng(4);
        let mlp = Mlp::new(&[3, 6, 2], &mut rng);
        let x = Matrix::from_shape_fn((4, 3), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let (y, cache) = mlp
            .forward_train(&x, 0.3, Some(&mut seeded_rng(77)))
            .unwrap();
        let mut grads = mlp.zeros_like();
        mlp.backward(&cache, &y, &mut grads);
        let loss = |m: &Mlp| {
            let (y, _) = m.forward_train(&x, 0.3, Some(&mut seeded_rng(77))).unwrap();
            y.mapv(|v| v * v).sum() * 0.5
        };
        let num = numeric_grad(&mlp, 1e-5, loss);
        assert!(max_rel_error(&grads.to_flat(), &num, 1e-6) < 1e-4);
    }
}
