//! Joint-action value tables and the counterfactual observation sequences
//! used to fill them.

use ndarray::Array2;

use crate::envsim::{JointAction, PipelineEnv, RealizedSizes, RequestContext, N_STAGES};
use crate::error::{Error, Result};
use crate::nncore::Matrix;

/// Anything that scores every joint action of a request.
pub trait QTableSource {
    /// `result[m][flat_action]` for each request `m`, flat order from
    /// [`crate::envsim::ActionSpace::flat_index`].
    fn q_tables(&self, env: &PipelineEnv, requests: &[&RequestContext]) -> Result<Vec<Vec<f64>>>;
}

/// Per-agent observation sequences covering every upstream action prefix.
///
/// Agent `g` sees one row per (request, a_0, …, a_{g-1}) prefix, in
/// row-major prefix order; `seqs[g]` holds its `g + 1` step matrices.
#[derive(Debug, Clone)]
pub struct CounterfactualObs {
    pub n_requests: usize,
    pub sizes: [usize; N_STAGES],
    pub seqs: Vec<Vec<Matrix>>,
}

impl CounterfactualObs {
    pub fn build(env: &PipelineEnv, requests: &[&RequestContext]) -> Result<Self> {
        let sizes = env.action_space().sizes;
        let dim = env.obs_dim();
        let m = requests.len();
        if m == 0 {
            return Err(Error::InvalidArgument("no requests".into()));
        }
        let prefixes = [1, sizes[0], sizes[0] * sizes[1]];
        let mut seqs: Vec<Vec<Matrix>> = (0..N_STAGES)
            .map(|g| {
                (0..=g)
                    .map(|_| Array2::zeros((m * prefixes[g], dim)))
                    .collect()
            })
            .collect();
        for (i, s) in requests.iter().enumerate() {
            env.validate_request(s)?;
            for a0 in 0..sizes[0] {
                for a1 in 0..sizes[1] {
                    let z = env.realized_sizes(s, &JointAction([a0, a1, 0]));
                    let obs: Vec<Vec<f64>> =
                        (0..N_STAGES).map(|t| observe(env, s, &z, t)).collect();
                    // Each agent g gets the prefix row (i, a0..a_{g-1}).
                    for g in 0..N_STAGES {
                        let row = match g {
                            0 if a0 == 0 && a1 == 0 => i,
                            1 if a1 == 0 => i * sizes[0] + a0,
                            2 => (i * sizes[0] + a0) * sizes[1] + a1,
                            _ => continue,
                        };
                        for t in 0..=g {
                            for (j, v) in obs[t].iter().enumerate() {
                                seqs[g][t][[row, j]] = *v;
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            n_requests: m,
            sizes,
            seqs,
        })
    }

    /// Assembles joint tables from per-agent scores (`scores[g]` has one row
    /// per prefix of agent `g` and `sizes[g]` columns) with `combine`.
    pub fn assemble(
        &self,
        scores: &[Matrix],
        mut combine: impl FnMut(usize, &[f64; N_STAGES]) -> f64,
    ) -> Vec<Vec<f64>> {
        let [n0, n1, n2] = self.sizes;
        (0..self.n_requests)
            .map(|i| {
                let mut table = Vec::with_capacity(n0 * n1 * n2);
                for a0 in 0..n0 {
                    for a1 in 0..n1 {
                        let r1 = i * n0 + a0;
                        let r2 = r1 * n1 + a1;
                        for a2 in 0..n2 {
                            let q = [scores[0][[i, a0]], scores[1][[r1, a1]], scores[2][[r2, a2]]];
                            table.push(combine(i, &q));
                        }
                    }
                }
                table
            })
            .collect()
    }
}

fn observe(env: &PipelineEnv, s: &RequestContext, z: &RealizedSizes, stage: usize) -> Vec<f64> {
    env.observation(s, &env.upstream_summary(z, stage))
}

/// Feature rows of the request-level descriptor.
pub fn request_matrix(env: &PipelineEnv, requests: &[&RequestContext]) -> Matrix {
    let d = env.request_dim();
    let mut x = Array2::zeros((requests.len(), d));
    for (i, s) in requests.iter().enumerate() {
        for (j, v) in env.request_features(s).into_iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{EnvConfig, LoggingPolicy};
    use crate::nncore::seeded_rng;

    #[test]
    fn counterfactual_rows_match_logged_observations() {
        let env = PipelineEnv::new(EnvConfig::default()).unwrap();
        let ds =
            crate::envsim::build_logged_dataset(&env, &LoggingPolicy::UniformRandom, 20, 1, 0.8)
                .unwrap();
        let reqs: Vec<&RequestContext> = ds.episodes.iter().map(|e| &e.request).collect();
        let cf = CounterfactualObs::build(&env, &reqs).unwrap();
        let [n0, n1, _] = cf.sizes;
        for (i, ep) in ds.episodes.iter().enumerate() {
            let a = ep.action();
            let rows = [i, i * n0 + a.0[0], (i * n0 + a.0[0]) * n1 + a.0[1]];
            for g in 0..N_STAGES {
                for t in 0..=g {
                    assert_eq!(cf.seqs[g][t].row(rows[g]).to_vec(), ep.observation(&env, t));
                }
            }
        }
        let _ = seeded_rng(0);
    }

    #[test]
    fn assemble_orders_like_flat_index() {
        let env = PipelineEnv::new(EnvConfig::mini()).unwrap();
        let s = env.sample_request(&mut seeded_rng(2));
        let cf = CounterfactualObs::build(&env, &[&s]).unwrap();
        let space = env.action_space();
        let scores: Vec<Matrix> = (0..N_STAGES)
            .map(|g| {
                Matrix::from_shape_fn((cf.seqs[g][0].nrows(), space.sizes[g]), |(r, c)| {
                    (r * 10 + c) as f64 * 10f64.powi(2 * g as i32)
                })
            })
            .collect();
        let t = cf.assemble(&scores, |_, q| q.iter().sum());
        for a in space.iter() {
            let r1 = a.0[0];
            let r2 = r1 * space.sizes[1] + a.0[1];
            let want = a.0[0] as f64
                + (r1 * 10 + a.0[1]) as f64 * 100.0
                + (r2 * 10 + a.0[2]) as f64 * 10_000.0;
            assert_eq!(t[0][space.flat_index(&a)], want);
        }
    }
}
