//! Simulated load-testing bench and the per-request cost estimator built
//! from it.
//!
//! Requests are bucketed by stage, value tier and queue length. Each bucket
//! is load-tested at a fixed qps against the simulated cluster and converted
//! to core-seconds per request; a monotone fit per (stage, tier) turns those
//! points into queue-cost curves. Channel and model costs come from isolated
//! tests, and degradation levels from repeated tests at each level.

mod curve;
mod loadtest;
mod model;
mod predictor;

pub use curve::{fit_monotone_curve, CostCurve};
pub use loadtest::{
    calibrated_loadtest, cost_per_bucket, loadtest_with_true_cost, simulate_loadtest, Bucket,
    LoadTestResult, Rig,
};
pub use model::{
    estimate_cost, CostEstimator, CostModel, DegradationMap, DegradationMode, FitMeta,
};
pub use predictor::{ActionResultPredictor, PredictorConfig};

use serde::{Deserialize, Serialize};

use crate::envsim::{EnvConfig, N_STAGES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub queue_lengths: Vec<usize>,
    pub rig: Rig,
    pub initial_qps: f64,
    /// Independent load tests per bucket.
    pub repeats: usize,
    pub seed: u64,
    pub degradation_mode: DegradationMode,
    /// Queue length of the bucket used for isolated degradation tests.
    pub reference_queue: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            queue_lengths: vec![8, 16, 32, 64, 128, 256],
            rig: Rig {
                n_machines: 2,
                cores_per_machine: 8,
                noise_sd: 0.5,
            },
            initial_qps: 1000.0,
            repeats: 3,
            seed: 7,
            degradation_mode: DegradationMode::Multiplicative,
            reference_queue: 32,
        }
    }
}

/// One CSV row of raw load-test output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadTestRow {
    pub kind: String,
    pub stage: usize,
    pub value_tier: usize,
    pub queue_length: usize,
    pub p_percent: f64,
    pub n_machines: usize,
    pub cores_per_machine: usize,
    pub qps: f64,
    pub cost: f64,
}

impl LoadTestRow {
    fn new(kind: &str, r: &LoadTestResult) -> Self {
        Self {
            kind: kind.to_string(),
            stage: r.bucket.stage,
            value_tier: r.bucket.value_tier,
            queue_length: r.bucket.queue_length,
            p_percent: r.p_percent,
            n_machines: r.n_machines,
            cores_per_machine: r.cores_per_machine,
            qps: r.qps,
            cost: cost_per_bucket(r),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub rows: Vec<LoadTestRow>,
    pub model: CostModel,
}

fn bucket_seed(seed: u64, parts: [u64; 4]) -> u64 {
    parts.iter().fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, &p| {
        (h ^ p).wrapping_mul(0x1000_0000_01b3).rotate_left(17)
    })
}

/// Runs every load test and fits the cost model. The hidden machine model is
/// only reached through simulated utilization readings.
pub fn run_bench(env: &EnvConfig, cfg: &BenchConfig) -> Result<BenchOutput> {
    if cfg.repeats == 0 || cfg.queue_lengths.len() < 2 {
        return Err(Error::InvalidArgument(
            "bench needs at least one repeat and two queue lengths".into(),
        ));
    }
    let machine = &env.machine;
    let rig = &cfg.rig;
    let mut rows = Vec::new();
    let mut measure = |kind: &str, bucket: Bucket, true_cost: f64, seed: u64| -> Result<f64> {
        let r = calibrated_loadtest(
            |qps, s| loadtest_with_true_cost(bucket, true_cost, qps, rig, s),
            cfg.initial_qps,
            seed,
        )?;
        rows.push(LoadTestRow::new(kind, &r));
        Ok(cost_per_bucket(&r))
    };

    let mut queue_curves = Vec::with_capacity(N_STAGES);
    for stage in 0..N_STAGES {
        let mut per_tier = Vec::with_capacity(env.n_tiers());
        for tier in 0..env.n_tiers() {
            let mut pts = Vec::new();
            for &q in &cfg.queue_lengths {
                let bucket = Bucket {
                    stage,
                    value_tier: tier,
                    queue_length: q,
                };
                let truth = machine.queue_cost(stage, tier, q as f64);
                for rep in 0..cfg.repeats {
                    let seed =
                        bucket_seed(cfg.seed, [stage as u64, tier as u64, q as u64, rep as u64]);
                    pts.push((q as f64, measure("queue", bucket, truth, seed)?));
                }
            }
            per_tier.push(fit_monotone_curve(&pts)?);
        }
        queue_curves.push(per_tier);
    }

    // Isolated tests: one bucket per table entry, averaged over repeats.
    let mut isolated = |kind: &str, id: usize, truth: f64| -> Result<f64> {
        let bucket = Bucket {
            stage: 0,
            value_tier: 0,
            queue_length: 1,
        };
        let mut total = 0.0;
        for rep in 0..cfg.repeats {
            let seed = bucket_seed(
                cfg.seed,
                [100 + kind.len() as u64, id as u64, 0, rep as u64],
            );
            total += measure(kind, bucket, truth, seed)?;
        }
        Ok((total / cfg.repeats as f64).max(0.0))
    };
    let channel_costs = machine
        .channel_costs
        .iter()
        .enumerate()
        .map(|(c, &t)| isolated("channel", c, t))
        .collect::<Result<Vec<_>>>()?;
    let raw_model: Vec<f64> = machine
        .model_costs
        .iter()
        .enumerate()
        .map(|(l, &t)| isolated("model", l, t))
        .collect::<Result<_>>()?;
    let model_costs = raw_model
        .iter()
        .map(|c| (c - raw_model[0]).max(0.0))
        .collect();

    let reference = machine.queue_cost(N_STAGES - 1, 0, cfg.reference_queue as f64);
    let deg_cost = machine
        .degradation_factors
        .iter()
        .enumerate()
        .map(|(d, &f)| isolated("degradation", d, reference * f))
        .collect::<Result<Vec<_>>>()?;
    let mut factors = Vec::with_capacity(deg_cost.len());
    for (d, c) in deg_cost.iter().enumerate() {
        let f: f64 = if d == 0 {
            1.0
        } else {
            (c / deg_cost[0]).clamp(0.0, 1.0)
        };
        let prev = factors.last().copied().unwrap_or(1.0);
        factors.push(f.min(prev));
    }
    let reference_cost = deg_cost[0];
    let offsets = factors.iter().map(|f| (f - 1.0) * reference_cost).collect();

    let n_loadtests = rows.len();
    Ok(BenchOutput {
        rows,
        model: CostModel {
            layout: env.layout(),
            queue_curves,
            model_costs,
            channel_costs,
            degradation: DegradationMap {
                mode: cfg.degradation_mode,
                factors,
                offsets,
            },
            meta: FitMeta {
                seed: cfg.seed,
                queue_lengths: cfg.queue_lengths.clone(),
                rig: cfg.rig,
                n_loadtests,
            },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{JointAction, MachineModel, PipelineEnv};
    use crate::metrics::spearman_rs;
    use crate::nncore::seeded_rng;

    fn bench() -> BenchOutput {
        run_bench(&EnvConfig::default(), &BenchConfig::default()).unwrap()
    }

    #[test]
    fn curves_track_hidden_costs() {
        let out = bench();
        let m = MachineModel::default();
        for g in 0..N_STAGES {
            for t in 0..3 {
                for q in [8.0, 20.0, 64.0, 200.0] {
                    let est = out.model.queue_curves[g][t].eval(q);
                    let truth = m.queue_cost(g, t, q);
                    assert!(
                        (est - truth).abs() < 0.1 * truth,
                        "stage {g} tier {t} q {q}: {est} vs {truth}"
                    );
                }
            }
        }
        assert_eq!(out.model.degradation.factors[0], 1.0);
        assert!(out
            .model
            .degradation
            .factors
            .windows(2)
            .all(|w| w[1] <= w[0]));
        assert!(out.model.channel_costs.iter().all(|&c| c > 0.0));
    }

    #[test]
    fn additivity_and_degradation() {
        let mut model = bench().model;
        model.channel_costs.iter_mut().for_each(|c| *c = 0.0);
        let a0 = JointAction([0, 0, 0]);
        let q = [8.0, 8.0, 8.0];
        let want: f64 = (0..N_STAGES)
            .map(|g| model.queue_curves[g][0].eval(8.0))
            .sum();
        assert!((model.cost_from_sizes(0, &q, &a0, 0).unwrap() - want).abs() < 1e-15);

        let mut with_ch = model.clone();
        with_ch.channel_costs = vec![0.001, 0.002, 0.004];
        // subset 0 = {0}, subset 1 = {0, 1}
        let c0 = with_ch
            .cost_from_sizes(1, &q, &JointAction([0, 0, 0]), 0)
            .unwrap();
        let c1 = with_ch
            .cost_from_sizes(1, &q, &JointAction([1, 0, 0]), 0)
            .unwrap();
        assert!((c1 - c0 - 0.002).abs() < 1e-15);

        for d in 0..model.degradation.levels() {
            assert!(
                model.cost_from_sizes(0, &q, &a0, d).unwrap()
                    <= model.cost_from_sizes(0, &q, &a0, 0).unwrap()
            );
        }
        model.degradation.mode = DegradationMode::Additive;
        assert_eq!(model.degradation.apply(0.01, 0).unwrap(), 0.01);
        assert!(model.degradation.apply(0.01, 2).unwrap() <= 0.01);
        assert!(model.degradation.apply(0.0, 2).unwrap() >= 0.0);
        assert!(model.degradation.apply(1.0, 9).is_err());
    }

    #[test]
    fn estimate_orders_actions_like_hidden_cost() {
        let cfg = EnvConfig::default();
        let env = PipelineEnv::new(cfg.clone()).unwrap();
        let out = bench();
        let ds = crate::envsim::build_logged_dataset(
            &env,
            &crate::envsim::LoggingPolicy::UniformRandom,
            3000,
            4,
            0.8,
        )
        .unwrap();
        let pcfg = PredictorConfig::default();
        let mut predictor = ActionResultPredictor::new(env.layout().clone(), &pcfg);
        predictor.fit(&ds.train(), &pcfg).unwrap();
        let est = CostEstimator {
            model: out.model,
            predictor,
        };
        let mut rng = seeded_rng(12);
        for _ in 0..10 {
            let s = loop {
                let s = env.sample_request(&mut rng);
                if env.pass_rates(&s).availability > 0.3 {
                    break s;
                }
            };
            let space = env.action_space();
            let hidden: Vec<f64> = space
                .iter()
                .map(|a| env.stage_costs(&s, &a).iter().sum())
                .collect();
            let estimated: Vec<f64> = space
                .iter()
                .map(|a| estimate_cost(&s, &a, &est, 0).unwrap())
                .collect();
            let rs = spearman_rs(&hidden, &estimated).unwrap();
            assert!(rs >= 0.95, "rs = {rs}");
            let tables = est.cost_tables(&[&s], 0).unwrap();
            assert_eq!(tables[0], estimated);
            // Monotone in pre-ranking truncation.
            for a in space.iter().filter(|a| a.0[1] + 1 < space.sizes[1]) {
                let mut b = a;
                b.0[1] += 1;
                assert!(estimated[space.flat_index(&b)] >= estimated[space.flat_index(&a)]);
            }
        }
    }
}
