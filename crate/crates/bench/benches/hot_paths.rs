use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use stagealloc::allocator::{binary_search_lambda, decide, greedy_allocate, ActionQuota};
use stagealloc::balancer::{solve_lambda_sequence, Dynamics, MpcConfig, StateFeatures};
use stagealloc::mixer::{Hypernet, WeightTransform};
use stagealloc::nncore::{gru_step, seeded_rng, GruParams, Matrix};

const REQUESTS: usize = 1000;
const ACTIONS: usize = 48;

fn tables() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = seeded_rng(1);
    let q = (0..REQUESTS)
        .map(|_| (0..ACTIONS).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let c = (0..REQUESTS)
        .map(|_| (0..ACTIONS).map(|a| (a + 1) as f64 * rng.random_range(0.5..1.5)).collect())
        .collect();
    (q, c)
}

fn allocation(c: &mut Criterion) {
    let (q, cost) = tables();
    c.bench_function("decide_1000x48", |b| {
        b.iter(|| q.iter().zip(&cost).map(|(q, c)| decide(q, c, black_box(0.01))).sum::<usize>())
    });
    let quota = ActionQuota {
        counts: (0..ACTIONS).map(|a| REQUESTS / ACTIONS + usize::from(a < REQUESTS % ACTIONS)).collect(),
    };
    c.bench_function("greedy_allocate_1000x48", |b| b.iter(|| greedy_allocate(black_box(&q), &quota).unwrap()));
    let budget: f64 = cost.iter().map(|c| c[ACTIONS / 2]).sum();
    c.bench_function("binary_search_lambda_1000x48", |b| {
        b.iter(|| binary_search_lambda(black_box(&q), &cost, budget).unwrap())
    });
}

fn networks(c: &mut Criterion) {
    let mut rng = seeded_rng(2);
    let hyper = Hypernet::new(24, 64, 3, 32, WeightTransform::Softplus, &mut rng);
    let states = Matrix::from_shape_fn((256, 24), |_| rng.random_range(-1.0..1.0));
    let q = Matrix::from_shape_fn((256, 3), |_| rng.random_range(-1.0..1.0));
    c.bench_function("hypernet_mix_batch_256", |b| b.iter(|| hyper.mix_batch(black_box(&q), &states).unwrap()));

    let gru = GruParams::glorot(24, 16, &mut rng);
    let x = Matrix::from_shape_fn((64, 24), |_| rng.random_range(-1.0..1.0));
    let h = Matrix::zeros((64, 16));
    c.bench_function("gru_step_64", |b| b.iter(|| gru_step(black_box(&x), &h, &gru).unwrap()));
}

/// Load falls smoothly with λ and scales with traffic.
struct Plant;

impl Dynamics for Plant {
    fn step_batch(&self, u: &[f64], s: &StateFeatures, lambda: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(lambda)
            .map(|(u, l)| 0.5 * u + 0.5 * s.traffic * (0.3 + 0.9 / (1.0 + 2.0 * l)))
            .collect()
    }
}

fn controller(c: &mut Criterion) {
    let cfg = MpcConfig::default();
    let forecast: Vec<StateFeatures> = (0..cfg.horizon)
        .map(|i| StateFeatures { traffic: 1.0 + 0.05 * i as f64, time_of_day: i as f64 / 1440.0 })
        .collect();
    c.bench_function("mpc_solve_cold", |b| {
        b.iter(|| solve_lambda_sequence(&Plant, black_box(0.9), Some(0.85), &forecast, &cfg, None).unwrap())
    });
    let warm = solve_lambda_sequence(&Plant, 0.9, Some(0.85), &forecast, &cfg, None).unwrap().lambdas;
    c.bench_function("mpc_solve_warm", |b| {
        b.iter(|| solve_lambda_sequence(&Plant, black_box(0.9), Some(0.85), &forecast, &cfg, Some(&warm)).unwrap())
    });
}

criterion_group!(benches, allocation, networks, controller);
criterion_main!(benches);
