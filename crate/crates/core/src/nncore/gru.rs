//! Gated recurrent unit, original (reset-before-matmul) formulation:
//!
//! ```text
//! z  = σ(x W_z + h U_z + b_z)          update gate ("keep" weight)
//! r  = σ(x W_r + h U_r + b_r)          reset gate
//! n  = tanh(x W_n + (r ⊙ h) U_n + b_n) candidate
//! h' = (1 - z) ⊙ n + z ⊙ h
//! ```
//!
//! Gate parameters are stored column-concatenated in `[z | r | n]` order.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Axis};
use rand::Rng;

use super::{glorot_uniform, sigmoid, Matrix, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    /// `I x 3H`: input weights for the update, reset and candidate gates.
    pub w_input: Matrix,
    /// `H x 3H`: recurrent weights in the same gate order.
    pub w_hidden: Matrix,
    /// `1 x 3H`.
    pub bias: Matrix,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Matrix::zeros((input, 3 * hidden)),
            w_hidden: Matrix::zeros((hidden, 3 * hidden)),
            bias: Matrix::zeros((1, 3 * hidden)),
        }
    }

    /// Glorot-uniform per gate block, zero biases.
    pub fn glorot<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        for g in 0..3 {
            let cols = s![.., g * hidden..(g + 1) * hidden];
            p.w_input
                .slice_mut(cols)
                .assign(&glorot_uniform(input, hidden, rng));
            p.w_hidden
                .slice_mut(cols)
                .assign(&glorot_uniform(hidden, hidden, rng));
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hidden.nrows()
    }

    fn check(&self, x: &Matrix, h: &Matrix) -> Result<()> {
        let hd = self.hidden_dim();
        if self.w_hidden.ncols() != 3 * hd || self.w_input.ncols() != 3 * hd {
            return Err(Error::shape(
                "gru parameters",
                format!("{} gate columns", 3 * hd),
                self.w_input.ncols(),
            ));
        }
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("gru_step input", self.input_dim(), x.ncols()));
        }
        if h.ncols() != hd {
            return Err(Error::shape("gru_step hidden", hd, h.ncols()));
        }
        if h.nrows() != x.nrows() {
            return Err(Error::shape("gru_step batch", x.nrows(), h.nrows()));
        }
        Ok(())
    }
}

impl ParamSet for GruParams {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w_input, &self.w_hidden, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_input, &mut self.w_hidden, &mut self.bias]
    }

    fn tensor_names(&self) -> Vec<String> {
        vec!["w_input".into(), "w_hidden".into(), "bias".into()]
    }
}

#[derive(Debug, Clone)]
pub struct GruCache {
    x: Matrix,
    h_prev: Matrix,
    z: Matrix,
    r: Matrix,
    n: Matrix,
    rh: Matrix,
}

fn step_inner(x: &Matrix, h_prev: &Matrix, p: &GruParams) -> (Matrix, GruCache) {
    let hd = p.hidden_dim();
    let mut pre = x.dot(&p.w_input);
    pre += &p.bias;
    let rec_zr = h_prev.dot(&p.w_hidden.slice(s![.., 0..2 * hd]));
    let z = (&pre.slice(s![.., 0..hd]) + &rec_zr.slice(s![.., 0..hd])).mapv(sigmoid);
    let r = (&pre.slice(s![.., hd..2 * hd]) + &rec_zr.slice(s![.., hd..2 * hd])).mapv(sigmoid);
    let rh = &r * h_prev;
    let n = (&pre.slice(s![.., 2 * hd..]) + &rh.dot(&p.w_hidden.slice(s![.., 2 * hd..])))
        .mapv(f64::tanh);
    let mut h = n.clone();
    ndarray::Zip::from(&mut h)
        .and(&z)
        .and(h_prev)
        .for_each(|h, &z, &hp| *h = (1.0 - z) * *h + z * hp);
    let cache = GruCache {
        x: x.clone(),
        h_prev: h_prev.clone(),
        z,
        r,
        n,
        rh,
    };
    (h, cache)
}

/// One recurrence step for a batch: `x: B x I`, `h_prev: B x H` → `B x H`.
pub fn gru_step(x: &Matrix, h_prev: &Matrix, p: &GruParams) -> Result<(Matrix, GruCache)> {
    p.check(x, h_prev)?;
    Ok(step_inner(x, h_prev, p))
}

impl GruParams {
    /// Unchecked step for inference loops whose shapes were validated once.
    pub fn apply(&self, x: &Matrix, h_prev: &Matrix) -> Matrix {
        step_inner(x, h_prev, self).0
    }
}

/// Accumulates parameter gradients and returns `(dL/dx, dL/dh_prev)`.
pub fn gru_backward(
    p: &GruParams,
    cache: &GruCache,
    grad_h: &Matrix,
    grads: &mut GruParams,
) -> (Matrix, Matrix) {
    let hd = p.hidden_dim();
    let GruCache {
        x,
        h_prev,
        z,
        r,
        n,
        rh,
    } = cache;

    let mut da_n = grad_h.clone();
    ndarray::Zip::from(&mut da_n)
        .and(z)
        .and(n)
        .for_each(|g, &z, &n| *g *= (1.0 - z) * (1.0 - n * n));
    let mut da_z = grad_h.clone();
    ndarray::Zip::from(&mut da_z)
        .and(z)
        .and(n)
        .and(h_prev)
        .for_each(|g, &z, &n, &hp| *g *= (hp - n) * z * (1.0 - z));

    let u_n = p.w_hidden.slice(s![.., 2 * hd..]);
    let d_rh = da_n.dot(&u_n.t());
    let mut da_r = d_rh.clone();
    ndarray::Zip::from(&mut da_r)
        .and(r)
        .and(h_prev)
        .for_each(|g, &r, &hp| *g *= hp * r * (1.0 - r));

    let da_zr = concatenate(Axis(1), &[da_z.view(), da_r.view()]).expect("gate blocks");
    let da = concatenate(Axis(1), &[da_zr.view(), da_n.view()]).expect("gate blocks");

    general_mat_mul(1.0, &x.t(), &da, 1.0, &mut grads.w_input);
    {
        let mut g_zr = grads.w_hidden.slice_mut(s![.., 0..2 * hd]);
        general_mat_mul(1.0, &h_prev.t(), &da_zr, 1.0, &mut g_zr);
    }
    {
        let mut g_n = grads.w_hidden.slice_mut(s![.., 2 * hd..]);
        general_mat_mul(1.0, &rh.t(), &da_n, 1.0, &mut g_n);
    }
    grads.bias += &da.sum_axis(Axis(0)).insert_axis(Axis(0));

    let dx = da.dot(&p.w_input.t());
    let mut dh_prev = grad_h * z + &d_rh * r;
    general_mat_mul(
        1.0,
        &da_zr,
        &p.w_hidden.slice(s![.., 0..2 * hd]).t(),
        1.0,
        &mut dh_prev,
    );
    (dx, dh_prev)
}
