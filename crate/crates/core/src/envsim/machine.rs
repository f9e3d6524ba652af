use serde::{Deserialize, Serialize};

use super::N_STAGES;

/// Hidden per-request compute consumption of the simulated serving cluster.
///
/// The cost bench never reads these numbers directly; it only sees CPU
/// utilization from simulated load tests driven by them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineModel {
    /// Core-seconds per request at the reference queue length.
    pub stage_unit_costs: [f64; N_STAGES],
    pub stage_ref_queue: [f64; N_STAGES],
    /// Superlinear growth of per-request cost with queue length.
    pub stage_exponents: [f64; N_STAGES],
    /// Relative extra cost per value tier (richer requests carry heavier features).
    pub tier_overhead: f64,
    pub channel_costs: Vec<f64>,
    pub model_costs: Vec<f64>,
    /// True cost multiplier at each degradation level.
    pub degradation_factors: Vec<f64>,
}

impl Default for MachineModel {
    fn default() -> Self {
        Self {
            stage_unit_costs: [0.004, 0.006, 0.010],
            stage_ref_queue: [100.0, 40.0, 10.0],
            stage_exponents: [1.1, 1.2, 1.3],
            tier_overhead: 0.1,
            channel_costs: vec![0.001, 0.0015, 0.003],
            model_costs: vec![0.0, 0.010],
            degradation_factors: vec![1.0, 0.9, 0.75],
        }
    }
}

impl MachineModel {
    /// Per-request queue cost of `stage` when it handles `queue_len` candidates.
    pub fn queue_cost(&self, stage: usize, tier: usize, queue_len: f64) -> f64 {
        if queue_len <= 0.0 {
            return 0.0;
        }
        let rel = queue_len / self.stage_ref_queue[stage];
        self.stage_unit_costs[stage]
            * (1.0 + self.tier_overhead * tier as f64)
            * rel.powf(self.stage_exponents[stage])
    }

    pub fn degradation_factor(&self, level: usize) -> f64 {
        let last = self.degradation_factors.len().saturating_sub(1);
        self.degradation_factors
            .get(level.min(last))
            .copied()
            .unwrap_or(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queue_cost_is_superlinear_and_tiered() {
        let m = MachineModel::default();
        for g in 0..N_STAGES {
            assert_eq!(m.queue_cost(g, 0, 0.0), 0.0);
            let r = m.stage_ref_queue[g];
            assert!((m.queue_cost(g, 0, r) - m.stage_unit_costs[g]).abs() < 1e-15);
            assert!(m.queue_cost(g, 0, 2.0 * r) > 2.0 * m.queue_cost(g, 0, r));
            assert!(m.queue_cost(g, 2, r) > m.queue_cost(g, 0, r));
        }
        assert_eq!(m.degradation_factor(9), 0.75);
    }
}
