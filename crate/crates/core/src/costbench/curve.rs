use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Monotone non-decreasing piecewise-linear map from queue length to cost.
///
/// Outside the knot range the end segments are extended linearly; below the
/// first knot the result is floored at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    pub knots_x: Vec<f64>,
    pub knots_y: Vec<f64>,
}

impl CostCurve {
    pub fn eval(&self, q: f64) -> f64 {
        let (xs, ys) = (&self.knots_x, &self.knots_y);
        let n = xs.len();
        let seg = |i: usize| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
        let v = if q <= xs[0] {
            ys[0] + seg(0) * (q - xs[0])
        } else if q >= xs[n - 1] {
            ys[n - 1] + seg(n - 2) * (q - xs[n - 1])
        } else {
            let i = xs.partition_point(|&x| x <= q) - 1;
            ys[i] + seg(i) * (q - xs[i])
        };
        v.max(0.0)
    }
}

/// Pool-adjacent-violators fit of cost against queue length.
///
/// Repeated queue lengths are averaged first (weighted by multiplicity), so
/// the fit is the least-squares monotone fit over all points.
pub fn fit_monotone_curve(points: &[(f64, f64)]) -> Result<CostCurve> {
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("cost curve points".into()));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // (x, weighted sum, weight) per distinct x
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for (x, y) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == x => {
                g.1 += y;
                g.2 += 1.0;
            }
            _ => groups.push((x, y, 1.0)),
        }
    }
    if groups.len() < 2 {
        return Err(Error::InsufficientData(
            "monotone fit needs at least 2 distinct queue lengths".into(),
        ));
    }
    // Blocks of (sum, weight, count of groups).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(groups.len());
    for &(_, s, w) in &groups {
        blocks.push((s, w, 1));
        while blocks.len() >= 2 {
            let k = blocks.len();
            let (s1, w1, c1) = blocks[k - 2];
            let (s2, w2, c2) = blocks[k - 1];
            if s1 / w1 <= s2 / w2 {
                break;
            }
            blocks.truncate(k - 2);
            blocks.push((s1 + s2, w1 + w2, c1 + c2));
        }
    }
    let knots_y = blocks
        .iter()
        .flat_map(|&(s, w, c)| std::iter::repeat_n(s / w, c))
        .collect();
    Ok(CostCurve {
        knots_x: groups.iter().map(|g| g.0).collect(),
        knots_y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_executed_pav() {
        let c = fit_monotone_curve(&[(1.0, 2.0), (2.0, 1.0), (3.0, 3.0)]).unwrap();
        assert_eq!(c.knots_y, vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn monotone_input_is_interpolated_exactly() {
        let pts = [(8.0, 1.0), (16.0, 2.5), (32.0, 7.0)];
        let c = fit_monotone_curve(&pts).unwrap();
        for (x, y) in pts {
            assert_eq!(c.eval(x), y);
        }
        assert!((c.eval(12.0) - 1.75).abs() < 1e-12);
        // linear extension
        assert!((c.eval(48.0) - 11.5).abs() < 1e-12);
        assert_eq!(c.eval(0.0), 0.0);
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(fit_monotone_curve(&[(1.0, 1.0), (1.0, 2.0)]).is_err());
        assert!(fit_monotone_curve(&[]).is_err());
    }

    proptest! {
        #[test]
        fn fit_is_monotone_everywhere(
            ys in proptest::collection::vec(0.0f64..10.0, 2..20),
            probe in proptest::collection::vec(-50.0f64..100.0, 20),
        ) {
            let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, &y)| (i as f64 * 3.0, y)).collect();
            let c = fit_monotone_curve(&pts).unwrap();
            prop_assert!(c.knots_y.windows(2).all(|w| w[0] <= w[1]));
            let mut p = probe.clone();
            p.sort_by(f64::total_cmp);
            for w in p.windows(2) {
                prop_assert!(c.eval(w[0]) <= c.eval(w[1]) + 1e-12);
            }
            // Pooled means preserve the total.
            let total: f64 = ys.iter().sum();
            prop_assert!((c.knots_y.iter().sum::<f64>() - total).abs() < 1e-9);
        }
    }
}
