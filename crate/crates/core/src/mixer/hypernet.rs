use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{sigmoid, softplus, Matrix, Mlp, MlpCache, ParamSet};

/// Non-negativity transform applied to generated mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightTransform {
    Softplus,
    Abs,
}

impl WeightTransform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Softplus => softplus(x),
            Self::Abs => x.abs(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Softplus => sigmoid(x),
            Self::Abs => {
                if x >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    /// A raw value mapping to `y > 0`.
    pub fn inverse(self, y: f64) -> f64 {
        match self {
            Self::Softplus => y.exp_m1().ln(),
            Self::Abs => y,
        }
    }
}

/// Mixing weights generated for one state. `w1` is `n x H` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerWeights {
    pub n_agents: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MixerWeights {
    /// relu(q·W1 + b1)·W2 + b2.
    pub fn mix(&self, q: &[f64]) -> f64 {
        let mut out = self.b2;
        for j in 0..self.hidden {
            let mut z = self.b1[j];
            for (i, qi) in q.iter().enumerate() {
                z += qi * self.w1[i * self.hidden + j];
            }
            out += z.max(0.0) * self.w2[j];
        }
        out
    }
}

/// State-conditioned generator of mixing weights.
///
/// One MLP emits every raw mixing parameter, laid out as
/// `[W1 (n·H) | b1 (H) | W2 (H) | b2]`. The transform is applied to the W
/// blocks only.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypernet {
    pub mlp: Mlp,
    pub n_agents: usize,
    pub hidden: usize,
    pub transform: WeightTransform,
}

pub struct HypernetCache {
    raw: Matrix,
    mlp: MlpCache,
}

impl Hypernet {
    /// Output biases start where the mix averages its inputs: W1 entries at
    /// 1/n and W2 entries at 1/H after the transform.
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hyper_hidden: usize, n_agents: usize, hidden: usize, transform: WeightTransform, rng: &mut R) -> Self {
        let out = n_agents * hidden + 2 * hidden + 1;
        let mut mlp = Mlp::new(&[state_dim, hyper_hidden, out], rng);
        let last = mlp.layers.last_mut().expect("two layers");
        last.weights.mapv_inplace(|w| 0.1 * w);
        let w1 = transform.inverse(1.0 / n_agents as f64);
        let w2 = transform.inverse(1.0 / hidden as f64);
        for c in 0..n_agents * hidden {
            last.bias[[0, c]] = w1;
        }
        for c in 0..hidden {
            last.bias[[0, n_agents * hidden + hidden + c]] = w2;
        }
        Self { mlp, n_agents, hidden, transform }
    }

    pub fn state_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    fn check(&self, states: &Matrix) -> Result<()> {
        if states.ncols() != self.state_dim() {
            return Err(Error::shape("hypernet state", self.state_dim(), states.ncols()));
        }
        Ok(())
    }

    fn weights_from_raw(&self, raw: ndarray::ArrayView1<f64>) -> MixerWeights {
        let (n, h) = (self.n_agents, self.hidden);
        let t = self.transform;
        MixerWeights {
            n_agents: n,
            hidden: h,
            w1: (0..n * h).map(|c| t.apply(raw[c])).collect(),
            b1: (0..h).map(|c| raw[n * h + c]).collect(),
            w2: (0..h).map(|c| t.apply(raw[n * h + h + c])).collect(),
            b2: raw[n * h + 2 * h],
        }
    }

    pub fn hypernet_forward(&self, states: &Matrix) -> Result<Vec<MixerWeights>> {
        self.check(states)?;
        let raw = self.mlp.forward(states);
        Ok(raw.rows().into_iter().map(|r| self.weights_from_raw(r)).collect())
    }

    /// Q_tot for each row of `q` (`B x n`) under its own state.
    pub fn mix_batch(&self, q: &Matrix, states: &Matrix) -> Result<Vec<f64>> {
        if q.ncols() != self.n_agents || q.nrows() != states.nrows() {
            return Err(Error::shape("mixer q batch", format!("{}x{}", states.nrows(), self.n_agents), format!("{}x{}", q.nrows(), q.ncols())));
        }
        let w = self.hypernet_forward(states)?;
        Ok(w.iter().zip(q.rows()).map(|(w, r)| w.mix(r.as_slice().expect("row-major"))).collect())
    }

    pub fn mix(&self, q: &[f64], state: &[f64]) -> Result<f64> {
        let s = Array2::from_shape_vec((1, state.len()), state.to_vec()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let qm = Array2::from_shape_vec((1, q.len()), q.to_vec()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.mix_batch(&qm, &s)?[0])
    }

    pub fn forward_train(&self, q: &Matrix, states: &Matrix) -> Result<(Vec<f64>, HypernetCache)> {
        self.check(states)?;
        let (raw, mlp) = self.mlp.forward_train::<crate::nncore::SeededRng>(states, 0.0, None)?;
        let out = raw.rows().into_iter().zip(q.rows()).map(|(r, qr)| self.weights_from_raw(r).mix(qr.as_slice().expect("row-major"))).collect();
        Ok((out, HypernetCache { raw, mlp }))
    }

    /// Given dL/dQ_tot per row, accumulates hypernet gradients and returns
    /// dL/dq (`B x n`).
    pub fn backward(&self, q: &Matrix, cache: &HypernetCache, grad_out: &[f64], grads: &mut Hypernet) -> Matrix {
        let (n, h) = (self.n_agents, self.hidden);
        let t = self.transform;
        let mut draw = Matrix::zeros(cache.raw.raw_dim());
        let mut dq = Matrix::zeros(q.raw_dim());
        for (b, &g) in grad_out.iter().enumerate() {
            let raw = cache.raw.row(b);
            let w = self.weights_from_raw(raw);
            let qb = q.row(b);
            draw[[b, n * h + 2 * h]] = g;
            for j in 0..h {
                let mut z = w.b1[j];
                for i in 0..n {
                    z += qb[i] * w.w1[i * h + j];
                }
                let a = z.max(0.0);
                let c2 = n * h + h + j;
                draw[[b, c2]] = g * a * t.derivative(raw[c2]);
                if z <= 0.0 {
                    continue;
                }
                let dz = g * w.w2[j];
                draw[[b, n * h + j]] = dz;
                for i in 0..n {
                    let c1 = i * h + j;
                    draw[[b, c1]] = qb[i] * dz * t.derivative(raw[c1]);
                    dq[[b, i]] += w.w1[c1] * dz;
                }
            }
        }
        self.mlp.backward(&cache.mlp, &draw, &mut grads.mlp);
        dq
    }
}

impl ParamSet for Hypernet {
    fn tensors(&self) -> Vec<&Matrix> {
        self.mlp.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.mlp.tensors_mut()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.mlp.tensor_names()
    }
}
