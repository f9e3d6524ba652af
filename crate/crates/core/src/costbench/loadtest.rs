use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envsim::MachineModel;
use crate::error::{Error, Result};
use crate::nncore::seeded_rng;

/// Load-test bucket: one stage, one value tier, one queue length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bucket {
    pub stage: usize,
    pub value_tier: usize,
    pub queue_length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadTestResult {
    pub bucket: Bucket,
    pub p_percent: f64,
    pub n_machines: usize,
    pub cores_per_machine: usize,
    pub qps: f64,
}

/// Fixed load-test rig.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub n_machines: usize,
    pub cores_per_machine: usize,
    /// Utilization noise standard deviation, in percentage points.
    pub noise_sd: f64,
}

/// Utilization of a rig serving `qps` requests whose true per-request cost
/// is `true_cost` core-seconds. Saturation (p ≥ 100) is an error.
pub fn loadtest_with_true_cost(
    bucket: Bucket,
    true_cost: f64,
    qps: f64,
    rig: &Rig,
    seed: u64,
) -> Result<LoadTestResult> {
    if !(qps > 0.0) || rig.n_machines == 0 || rig.cores_per_machine == 0 || bucket.queue_length == 0
    {
        return Err(Error::InvalidArgument(
            "load test needs positive qps, machines, cores and queue length".into(),
        ));
    }
    let capacity = (rig.n_machines * rig.cores_per_machine) as f64;
    let noise: f64 = if rig.noise_sd > 0.0 {
        let z: f64 = StandardNormal.sample(&mut seeded_rng(seed));
        rig.noise_sd * z
    } else {
        0.0
    };
    let p = qps * true_cost / capacity * 100.0 + noise;
    if p >= 100.0 {
        return Err(Error::Saturated { p_percent: p, qps });
    }
    Ok(LoadTestResult {
        bucket,
        p_percent: p.clamp(0.0, 100.0),
        n_machines: rig.n_machines,
        cores_per_machine: rig.cores_per_machine,
        qps,
    })
}

/// Load test against the simulated cluster's hidden cost model.
pub fn simulate_loadtest(
    machine: &MachineModel,
    bucket: Bucket,
    qps: f64,
    rig: &Rig,
    seed: u64,
) -> Result<LoadTestResult> {
    let c = machine.queue_cost(bucket.stage, bucket.value_tier, bucket.queue_length as f64);
    loadtest_with_true_cost(bucket, c, qps, rig, seed)
}

/// Core-seconds per request: (p/100)·n·cores / qps.
pub fn cost_per_bucket(r: &LoadTestResult) -> f64 {
    r.p_percent / 100.0 * (r.n_machines * r.cores_per_machine) as f64 / r.qps
}

/// Adjusts qps until utilization lands in a well-conditioned band, halving
/// on saturation and scaling up when the rig is nearly idle.
pub fn calibrated_loadtest(
    run: impl Fn(f64, u64) -> Result<LoadTestResult>,
    initial_qps: f64,
    seed: u64,
) -> Result<LoadTestResult> {
    const TARGET: f64 = 50.0;
    const LOW: f64 = 25.0;
    let mut qps = initial_qps;
    let mut last = None;
    for attempt in 0..40u64 {
        match run(qps, seed.wrapping_add(attempt)) {
            Err(Error::Saturated { .. }) => qps /= 2.0,
            Err(e) => return Err(e),
            Ok(r) if r.p_percent < LOW => {
                qps *= TARGET / r.p_percent.max(0.5);
                last = Some(r);
            }
            Ok(r) => return Ok(r),
        }
    }
    last.ok_or_else(|| Error::Infeasible("load test never left saturation".into()))
}
