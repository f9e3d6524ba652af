use serde::{Deserialize, Serialize};

use crate::envsim::{ActionSpace, JointAction, N_STAGES};
use crate::error::{Error, Result};

/// Per-step reward scale: the spread of conditional mean reward across a
/// step's actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VgcaWeights {
    pub weights: [f64; N_STAGES],
    /// `cond_means[t][j]` = mean reward among samples with `a_t = j`.
    pub cond_means: Vec<Vec<f64>>,
}

impl VgcaWeights {
    pub fn uniform() -> Self {
        Self {
            weights: [1.0; N_STAGES],
            cond_means: Vec::new(),
        }
    }

    pub fn scaled_rewards(&self, reward: f64) -> [f64; N_STAGES] {
        self.weights.map(|w| w * reward)
    }
}

/// Population variance over actions of the empirical E[R | a_t = j].
pub fn vgca_weights(samples: &[(JointAction, f64)], space: &ActionSpace) -> Result<VgcaWeights> {
    let mut sums: Vec<Vec<f64>> = space.sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut counts: Vec<Vec<usize>> = space.sizes.iter().map(|&n| vec![0; n]).collect();
    for (a, r) in samples {
        space.validate(a)?;
        if !r.is_finite() {
            return Err(Error::NonFinite("reward in credit-assignment data".into()));
        }
        for t in 0..N_STAGES {
            sums[t][a.0[t]] += r;
            counts[t][a.0[t]] += 1;
        }
    }
    let mut weights = [0.0; N_STAGES];
    let mut cond_means = Vec::with_capacity(N_STAGES);
    for t in 0..N_STAGES {
        if let Some(j) = counts[t].iter().position(|&c| c == 0) {
            return Err(Error::Support(format!(
                "step {t} action {j} never occurs; every action needs at least one sample"
            )));
        }
        let means: Vec<f64> = sums[t].iter().zip(&counts[t]).map(|(s, &c)| s / c as f64).collect();
        let mu = means.iter().sum::<f64>() / means.len() as f64;
        weights[t] = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / means.len() as f64;
        cond_means.push(means);
    }
    Ok(VgcaWeights { weights, cond_means })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> ActionSpace {
        ActionSpace { sizes: [2, 2, 2] }
    }

    #[test]
    fn two_means_one_and_three() {
        let samples = vec![
            (JointAction([0, 0, 0]), 1.0),
            (JointAction([1, 1, 1]), 3.0),
        ];
        let w = vgca_weights(&samples, &space()).unwrap();
        assert_eq!(w.weights, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn equal_means_give_zero() {
        let samples: Vec<_> = space().iter().map(|a| (a, 4.0)).collect();
        let w = vgca_weights(&samples, &space()).unwrap();
        assert_eq!(w.weights, [0.0; 3]);
    }

    #[test]
    fn reward_determined_by_last_step() {
        // Balanced design: R = 10 iff a_2 = 1.
        let samples: Vec<_> = space()
            .iter()
            .map(|a| (a, if a.0[2] == 1 { 10.0 } else { 0.0 }))
            .collect();
        let w = vgca_weights(&samples, &space()).unwrap();
        assert!((w.weights[2] - 25.0).abs() < 1e-12);
        assert!(w.weights[0].abs() < 1e-12 && w.weights[1].abs() < 1e-12);
    }

    #[test]
    fn missing_action_is_rejected() {
        let samples = vec![(JointAction([0, 0, 0]), 1.0), (JointAction([0, 1, 1]), 2.0)];
        assert!(matches!(vgca_weights(&samples, &space()), Err(Error::Support(_))));
    }
}
