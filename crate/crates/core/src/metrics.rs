//! Evaluation metrics and seed-aggregated reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranks starting at 1; tied values share the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman_rs(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman_rs", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman_rs needs at least two observations".into(),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman_rs input".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::InvalidArgument("spearman_rs undefined for constant input".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub steps: f64,
    /// False when the curve never reached the threshold; `steps` is then
    /// the last sample.
    pub reached: bool,
}

/// First point where the curve reaches 95% of its final value, linearly
/// interpolated between samples. `curve` holds `(env_steps, return_pct)`.
pub fn convergence_steps(curve: &[(f64, f64)]) -> Result<Convergence> {
    let (last_steps, final_value) = *curve
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty convergence curve".into()))?;
    let threshold = 0.95 * final_value;
    for (i, &(s, v)) in curve.iter().enumerate() {
        if v >= threshold {
            if i == 0 {
                return Ok(Convergence {
                    steps: s,
                    reached: true,
                });
            }
            let (s0, v0) = curve[i - 1];
            let frac = (threshold - v0) / (v - v0);
            return Ok(Convergence {
                steps: s0 + frac * (s - s0),
                reached: true,
            });
        }
    }
    Ok(Convergence {
        steps: last_steps,
        reached: false,
    })
}

/// Population variance inside every stride-1 window, averaged over windows.
pub fn gradient_variance(norms: &[f64], window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be positive".into()));
    }
    if norms.len() < window {
        return Err(Error::InsufficientData(format!(
            "{} gradient norms for a window of {window}",
            norms.len()
        )));
    }
    let n_windows = norms.len() - window + 1;
    let mut total = 0.0;
    for w in norms.windows(window) {
        let mean = w.iter().sum::<f64>() / window as f64;
        total += w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / window as f64;
    }
    Ok(total / n_windows as f64)
}

/// Load utilization μ = mean min(Ĉ, C_m)/C_m and overutilization
/// ν = mean (max(Ĉ, C_m) − C_m)/C_m over a utilization trace.
pub fn utilization_rates(trace: &[f64], budget: f64) -> Result<(f64, f64)> {
    if trace.is_empty() {
        return Err(Error::InsufficientData("empty utilization trace".into()));
    }
    if !(budget > 0.0) {
        return Err(Error::InvalidArgument("budget must be positive".into()));
    }
    if trace.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("utilization trace".into()));
    }
    let n = trace.len() as f64;
    let mu = trace.iter().map(|c| c.min(budget) / budget).sum::<f64>() / n;
    let nu = trace.iter().map(|c| (c.max(budget) - budget) / budget).sum::<f64>() / n;
    Ok((mu, nu))
}

/// One metric across seeds, with sample standard deviation as dispersion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, per_seed: &[(u64, f64)]) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::InsufficientData(
                "metric report with no seeds".into(),
            ));
        }
        let values: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            name: name.into(),
            seeds: per_seed.iter().map(|p| p.0).collect(),
            values,
            mean,
            std,
        })
    }

    /// `mean(±std)` with the given number of decimals.
    pub fn cell(&self, decimals: usize) -> String {
        format!("{:.*}(±{:.*})", decimals, self.mean, decimals, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_identity_and_reverse() {
        let x = [0.5f64, 2.0, -1.0, 7.0, 3.3];
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) + 1.0).collect();
        assert_eq!(spearman_rs(&x, &y).unwrap(), 1.0);
        let rev: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(spearman_rs(&x, &rev).unwrap(), -1.0);
    }

    #[test]
    fn spearman_with_ties_matches_reference() {
        // Reference values from scipy.stats.spearmanr.
        let r = spearman_rs(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 0.9486832980505139).abs() < 1e-12);
        let r = spearman_rs(
            &[0.3, 1.2, 1.2, 5.0, -2.0, 0.3, 7.5],
            &[2.0, 1.0, 4.0, 4.0, 0.0, 3.0, 9.0],
        )
        .unwrap();
        assert!((r - 0.8165481258020508).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert!(spearman_rs(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(spearman_rs(&[1.0], &[1.0]).is_err());
        assert!(spearman_rs(&[1.0, 2.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_increasing_transform(
            xs in proptest::collection::vec(-100.0f64..100.0, 3..40),
            seed in 0u64..1000,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate()
                .map(|(i, v)| (v * 0.3 + ((i as u64 * 7919 + seed) % 13) as f64).sin())
                .collect();
            if let Ok(r) = spearman_rs(&xs, &ys) {
                let tx: Vec<f64> = xs.iter().map(|v| 2.0 * v + v.powi(3) / 1000.0 + 5.0).collect();
                let r2 = spearman_rs(&tx, &ys).unwrap();
                prop_assert!((r - r2).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }

    #[test]
    fn convergence_cases() {
        let mono: Vec<(f64, f64)> = (0..=10)
            .map(|i| (i as f64 * 10.0, i as f64 * 10.0))
            .collect();
        let c = convergence_steps(&mono).unwrap();
        assert!(c.reached);
        assert!((c.steps - 95.0).abs() < 1e-12);

        let flat = [(5.0, 80.0), (10.0, 80.0), (20.0, 80.0)];
        assert_eq!(convergence_steps(&flat).unwrap().steps, 5.0);

        let saw = [
            (0.0, 0.0),
            (10.0, 100.0),
            (20.0, 50.0),
            (30.0, 100.0),
            (40.0, 100.0),
        ];
        let c = convergence_steps(&saw).unwrap();
        assert!((c.steps - 9.5).abs() < 1e-12);

        assert!(convergence_steps(&[]).is_err());
    }

    #[test]
    fn gradient_variance_cases() {
        assert_eq!(gradient_variance(&[3.0; 10], 4).unwrap(), 0.0);
        let alt: Vec<f64> = (0..9).map(|i| if i % 2 == 0 { 0.0 } else { 2.0 }).collect();
        assert_eq!(gradient_variance(&alt, 2).unwrap(), 1.0);
        assert!(gradient_variance(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn utilization_rate_cases() {
        assert_eq!(utilization_rates(&[0.8; 5], 0.8).unwrap(), (1.0, 0.0));
        let (mu, nu) = utilization_rates(&[0.88; 5], 0.8).unwrap();
        assert_eq!(mu, 1.0);
        assert!((nu - 0.1).abs() < 1e-12);
        let (mu, nu) = utilization_rates(&[0.4, 1.2], 0.8).unwrap();
        assert!((mu - 0.75).abs() < 1e-12 && (nu - 0.25).abs() < 1e-12);
        assert!(utilization_rates(&[], 0.8).is_err());
    }

    #[test]
    fn report_uses_sample_std() {
        let r = MetricReport::new("x", &[(0, 1.0), (1, 2.0), (2, 3.0)]).unwrap();
        assert_eq!(r.mean, 2.0);
        assert_eq!(r.std, 1.0);
        assert_eq!(r.cell(2), "2.00(±1.00)");
    }
}
