//! Per-request Lagrangian decisions, quota-constrained greedy allocation and
//! the relative-return score.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// argmax_a Q(a) − λ·C(a); ties go to the cheaper action, then the lower index.
pub fn decide(q: &[f64], c: &[f64], lambda: f64) -> usize {
    debug_assert_eq!(q.len(), c.len());
    let mut best = 0;
    let mut best_score = q[0] - lambda * c[0];
    for a in 1..q.len() {
        let score = q[a] - lambda * c[a];
        if score > best_score || (score == best_score && c[a] < c[best]) {
            best = a;
            best_score = score;
        }
    }
    best
}

/// Sum over requests of the cost of the chosen action.
pub fn aggregate_cost(q_tables: &[Vec<f64>], c_tables: &[Vec<f64>], lambda: f64) -> f64 {
    q_tables
        .iter()
        .zip(c_tables)
        .map(|(q, c)| c[decide(q, c, lambda)])
        .sum()
}

/// Per-action assignment caps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionQuota {
    pub counts: Vec<usize>,
}

impl ActionQuota {
    /// Counts of each action among the given (logged) assignments.
    pub fn from_actions(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut counts = vec![0; n_actions];
        for &a in actions {
            *counts.get_mut(a).ok_or_else(|| {
                Error::InvalidArgument(format!("action {a} outside a space of {n_actions}"))
            })? += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// One action per request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub actions: Vec<usize>,
    /// Score of the assigned action under the tables that produced the plan.
    pub predicted: Vec<f64>,
}

impl AllocationPlan {
    pub fn predicted_total(&self) -> f64 {
        self.predicted.iter().sum()
    }

    /// Total of `tables[i][actions[i]]`.
    pub fn evaluate(&self, tables: &[Vec<f64>]) -> Result<f64> {
        if tables.len() != self.actions.len() {
            return Err(Error::shape("plan evaluation", self.actions.len(), tables.len()));
        }
        Ok(tables.iter().zip(&self.actions).map(|(t, &a)| t[a]).sum())
    }
}

/// Walks all (request, action) pairs by descending score and takes each one
/// whose request is still open and whose action has quota left.
pub fn greedy_allocate(q_tables: &[Vec<f64>], quota: &ActionQuota) -> Result<AllocationPlan> {
    let m = q_tables.len();
    let n = quota.counts.len();
    if quota.total() < m {
        return Err(Error::Infeasible(format!(
            "quota covers {} assignments for {m} requests",
            quota.total()
        )));
    }
    if let Some(i) = q_tables.iter().position(|t| t.len() != n) {
        return Err(Error::shape("q table", n, q_tables[i].len()));
    }
    if q_tables.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("allocation scores".into()));
    }
    let mut pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |a| (i, a))).collect();
    pairs.sort_by(|&(i, a), &(j, b)| {
        q_tables[j][b]
            .partial_cmp(&q_tables[i][a])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
            .then(a.cmp(&b))
    });
    let mut left = quota.counts.clone();
    let mut actions = vec![usize::MAX; m];
    let mut open = m;
    for (i, a) in pairs {
        if open == 0 {
            break;
        }
        if actions[i] == usize::MAX && left[a] > 0 {
            actions[i] = a;
            left[a] -= 1;
            open -= 1;
        }
    }
    if open > 0 {
        return Err(Error::Infeasible("quota exhausted before every request was assigned".into()));
    }
    let predicted = actions.iter().enumerate().map(|(i, &a)| q_tables[i][a]).collect();
    Ok(AllocationPlan { actions, predicted })
}

/// Ground-truth value of `plan` relative to the ground-truth model's own
/// plan under the same quota, in percent.
pub fn return_percent(plan: &AllocationPlan, gt_plan: &AllocationPlan, gt_tables: &[Vec<f64>]) -> Result<f64> {
    let denom = gt_plan.evaluate(gt_tables)?;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::InvalidArgument("ground-truth plan value is zero".into()));
    }
    Ok(plan.evaluate(gt_tables)? / denom * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub lambda: f64,
    pub cost: f64,
}

const LAMBDA_GRID_MIN: f64 = 1e-6;
const LAMBDA_GRID_MAX: f64 = 1e12;
const LAMBDA_GRID_PER_DECADE: usize = 4;

/// Smallest λ (to relative width 1e-3) whose induced aggregate cost fits
/// the budget.
pub fn binary_search_lambda(q_tables: &[Vec<f64>], c_tables: &[Vec<f64>], budget: f64) -> Result<LambdaSearch> {
    let cost = |l: f64| aggregate_cost(q_tables, c_tables, l);
    let at_zero = cost(0.0);
    if at_zero <= budget {
        return Ok(LambdaSearch { lambda: 0.0, cost: at_zero });
    }
    let decades = (LAMBDA_GRID_MAX / LAMBDA_GRID_MIN).log10().round() as usize;
    let grid: Vec<f64> = (0..=decades * LAMBDA_GRID_PER_DECADE)
        .map(|k| LAMBDA_GRID_MIN * 10f64.powf(k as f64 / LAMBDA_GRID_PER_DECADE as f64))
        .collect();
    let Some(pos) = grid.iter().position(|&l| cost(l) <= budget) else {
        let floor: f64 = c_tables
            .iter()
            .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
            .sum();
        return Err(Error::Infeasible(format!(
            "budget {budget} is below the cheapest-plan cost {floor}"
        )));
    };
    let mut hi = grid[pos];
    let mut lo = if pos == 0 { 0.0 } else { grid[pos - 1] };
    while hi - lo > 1e-3 * hi {
        let mid = 0.5 * (lo + hi);
        if cost(mid) <= budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(LambdaSearch { lambda: hi, cost: cost(hi) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::seeded_rng;
    use rand::Rng;

    #[test]
    fn decide_examples() {
        let q = [1.0, 2.0, 2.5];
        let c = [1.0, 2.0, 4.0];
        assert_eq!(decide(&q, &c, 0.5), 1);
        assert_eq!(decide(&q, &c, 0.0), 2);
        assert_eq!(decide(&q, &c, 1e12), 0);
        // equal scores: cheaper wins, then lower index
        assert_eq!(decide(&[2.0, 3.0], &[0.0, 1.0], 1.0), 0);
        assert_eq!(decide(&[1.0, 1.0], &[1.0, 1.0], 0.0), 0);
    }

    #[test]
    fn decide_is_scale_consistent() {
        let mut rng = seeded_rng(3);
        for _ in 0..500 {
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..10.0)).collect();
            let c: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..3.0)).collect();
            let l = rng.random_range(0.0..5.0);
            let s = rng.random_range(0.1..20.0);
            let qs: Vec<f64> = q.iter().map(|v| v * s).collect();
            let cs: Vec<f64> = c.iter().map(|v| v * s).collect();
            assert_eq!(decide(&q, &c, l), decide(&qs, &cs, l));
        }
    }

    #[test]
    fn greedy_hand_trace() {
        let q = vec![vec![5.0, 1.0], vec![4.0, 3.0]];
        let plan = greedy_allocate(&q, &ActionQuota { counts: vec![1, 1] }).unwrap();
        assert_eq!(plan.actions, vec![0, 1]);
        assert_eq!(plan.predicted_total(), 8.0);
    }

    #[test]
    fn greedy_assigns_argmax_when_quota_matches() {
        let mut rng = seeded_rng(5);
        let q: Vec<Vec<f64>> = (0..30).map(|_| (0..5).map(|_| rng.random()).collect()).collect();
        let best: Vec<usize> = q.iter().map(|r| crate::awrq::argmax(r)).collect();
        let quota = ActionQuota::from_actions(&best, 5).unwrap();
        assert_eq!(greedy_allocate(&q, &quota).unwrap().actions, best);
    }

    #[test]
    fn greedy_rejects_short_quota() {
        let q = vec![vec![1.0, 2.0]; 3];
        assert!(matches!(
            greedy_allocate(&q, &ActionQuota { counts: vec![1, 1] }),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn return_percent_bounds() {
        let gt = vec![vec![3.0, 1.0], vec![1.0, 2.0]];
        let quota = ActionQuota { counts: vec![1, 1] };
        let gt_plan = greedy_allocate(&gt, &quota).unwrap();
        assert_eq!(return_percent(&gt_plan, &gt_plan, &gt).unwrap(), 100.0);
        let worst = AllocationPlan { actions: vec![1, 0], predicted: vec![0.0; 2] };
        assert!(return_percent(&worst, &gt_plan, &gt).unwrap() < 100.0);
        let zero = vec![vec![0.0, 0.0]; 2];
        assert!(return_percent(&gt_plan, &gt_plan, &zero).is_err());
    }

    fn random_tables(rng: &mut crate::nncore::SeededRng, m: usize, n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let q = (0..m).map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let c = (0..m).map(|_| (0..n).map(|_| rng.random_range(0.1..2.0)).collect()).collect();
        (q, c)
    }

    #[test]
    fn lambda_search_postconditions() {
        let mut rng = seeded_rng(8);
        for _ in 0..30 {
            let (q, c) = random_tables(&mut rng, 40, 6);
            let hi = aggregate_cost(&q, &c, 0.0);
            let lo: f64 = c.iter().map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).sum();
            let budget = rng.random_range(lo..hi);
            let found = binary_search_lambda(&q, &c, budget).unwrap();
            assert!(found.cost <= budget);
            assert!(aggregate_cost(&q, &c, found.lambda / 2.0) > budget);
        }
    }

    #[test]
    fn lambda_search_boundaries() {
        let mut rng = seeded_rng(9);
        let (q, c) = random_tables(&mut rng, 20, 4);
        let at_zero = aggregate_cost(&q, &c, 0.0);
        assert_eq!(binary_search_lambda(&q, &c, at_zero).unwrap().lambda, 0.0);
        let floor: f64 = c.iter().map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).sum();
        let at_floor = binary_search_lambda(&q, &c, floor).unwrap();
        assert!(at_floor.lambda > 0.0 && at_floor.cost <= floor);
        assert!(matches!(binary_search_lambda(&q, &c, floor * 0.99), Err(Error::Infeasible(_))));
    }
}
