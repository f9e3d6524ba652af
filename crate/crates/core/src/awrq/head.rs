use rand::Rng;

use crate::error::{Error, Result};
use crate::nncore::{gru_backward, gru_step, GruCache, GruParams, Matrix, Mlp, MlpCache, ParamSet};

/// One recurrent Q estimator: a GRU over the observation sequence followed
/// by an MLP that scores every action of the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct QHead {
    pub gru: GruParams,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    steps: Vec<GruCache>,
    mlp: MlpCache,
}

impl QHead {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: usize,
        mlp_hidden: &[usize],
        n_actions: usize,
        rng: &mut R,
    ) -> Self {
        let gru = GruParams::glorot(obs_dim, hidden, rng);
        let mut sizes = vec![hidden];
        sizes.extend_from_slice(mlp_hidden);
        sizes.push(n_actions);
        Self {
            gru,
            mlp: Mlp::new(&sizes, rng),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.gru.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.mlp.output_dim()
    }

    fn check_obs(&self, obs: &Matrix) -> Result<()> {
        if obs.ncols() != self.obs_dim() {
            return Err(Error::shape(
                "q-head observation",
                self.obs_dim(),
                obs.ncols(),
            ));
        }
        Ok(())
    }

    /// One GRU step and the action scores read off the new hidden state.
    pub fn step(&self, obs: &Matrix, h_prev: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_obs(obs)?;
        let (h, _) = gru_step(obs, h_prev, &self.gru)?;
        let q = self.mlp.forward(&h);
        Ok((q, h))
    }

    /// Runs the sequence from a zero hidden state; returns `B x |A|` scores.
    pub fn unroll(&self, seq: &[Matrix]) -> Result<Matrix> {
        let (first, _) = seq
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("empty observation sequence".into()))?;
        self.check_obs(first)?;
        let mut h = Matrix::zeros((first.nrows(), self.hidden_dim()));
        for o in seq {
            self.check_obs(o)?;
            h = self.gru.apply(o, &h);
        }
        Ok(self.mlp.forward(&h))
    }

    pub fn unroll_train<R: Rng + ?Sized>(
        &self,
        seq: &[Matrix],
        dropout: f64,
        rng: Option<&mut R>,
    ) -> Result<(Matrix, HeadCache)> {
        let (first, _) = seq
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("empty observation sequence".into()))?;
        let mut h = Matrix::zeros((first.nrows(), self.hidden_dim()));
        let mut steps = Vec::with_capacity(seq.len());
        for o in seq {
            self.check_obs(o)?;
            let (next, c) = gru_step(o, &h, &self.gru)?;
            steps.push(c);
            h = next;
        }
        let (q, mlp) = self.mlp.forward_train(&h, dropout, rng)?;
        Ok((q, HeadCache { steps, mlp }))
    }

    /// Accumulates gradients; returns `dL/do_t` for every step.
    pub fn backward(&self, cache: &HeadCache, grad_q: &Matrix, grads: &mut QHead) -> Vec<Matrix> {
        let mut dh = self.mlp.backward(&cache.mlp, grad_q, &mut grads.mlp);
        let mut dobs = Vec::with_capacity(cache.steps.len());
        for c in cache.steps.iter().rev() {
            let (dx, dprev) = gru_backward(&self.gru, c, &dh, &mut grads.gru);
            dobs.push(dx);
            dh = dprev;
        }
        dobs.reverse();
        dobs
    }
}

impl ParamSet for QHead {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.gru.tensors();
        v.extend(self.mlp.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.gru.tensors_mut();
        v.extend(self.mlp.tensors_mut());
        v
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .gru
            .tensor_names()
            .into_iter()
            .map(|n| format!("gru.{n}"))
            .collect();
        v.extend(
            self.mlp
                .tensor_names()
                .into_iter()
                .map(|n| format!("mlp.{n}")),
        );
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::seeded_rng;
    use crate::nncore::testutil::{max_rel_error, numeric_grad};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded_rng(3);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        while checked < 20 {
            let head = QHead::new(4, 5, &[6], 3, &mut rng);
            let seq: Vec<Matrix> = (0..3)
                .map(|_| Matrix::from_shape_fn((2, 4), |_| StandardNormal.sample(&mut rng)))
                .collect();
            let w = Matrix::from_shape_fn((2, 3), |_| StandardNormal.sample(&mut rng));
            let mut h = Matrix::zeros((2, 5));
            for o in &seq {
                h = head.gru.apply(o, &h);
            }
            if crate::nncore::testutil::kink_margin(&head.mlp, &h) < 1e-3 {
                continue;
            }
            let loss = |p: &QHead| (p.unroll(&seq).unwrap() * &w).sum();
            let (_, cache) = head
                .unroll_train::<crate::nncore::SeededRng>(&seq, 0.0, None)
                .unwrap();
            let mut grads = head.zeros_like();
            head.backward(&cache, &w, &mut grads);
            let num = numeric_grad(&head, 1e-5, loss);
            worst = worst.max(max_rel_error(&grads.to_flat(), &num, 1e-6));
            checked += 1;
        }
        assert!(worst < 1e-4, "max rel error {worst}");
    }

    #[test]
    fn step_matches_unroll() {
        let mut rng = seeded_rng(4);
        let head = QHead::new(3, 4, &[5], 2, &mut rng);
        let seq: Vec<Matrix> = (0..2)
            .map(|i| Matrix::from_elem((1, 3), i as f64 * 0.3))
            .collect();
        let mut h = Matrix::zeros((1, 4));
        let mut q = Matrix::zeros((1, 2));
        for o in &seq {
            let (qq, hh) = head.step(o, &h).unwrap();
            q = qq;
            h = hh;
        }
        assert_eq!(q, head.unroll(&seq).unwrap());
        assert!(head.unroll(&[Matrix::zeros((1, 2))]).is_err());
    }
}
