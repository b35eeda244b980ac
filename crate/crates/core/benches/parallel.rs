//! Sequential vs. data-parallel execution of the two hot loops: greedy
//! evaluation and PPO rollout collection. Both paths produce identical
//! results; only wall-clock time differs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stare_core::env::{OBS_DIM, TaskKind, TaskSpec};
use stare_core::eval::evaluate;
use stare_core::imitation::init_policy;
use stare_core::interact::{collect_rollout, make_workers, PpoConfig};
use stare_core::nn::ValueNet;
use stare_core::par::Exec;
use stare_core::seeding::rng_from;

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench_evaluate(c: &mut Criterion) {
    let spec = TaskSpec::new(TaskKind::PickPlace);
    let policy = init_policy(0, &[64, 64], -0.5);
    let mut group = c.benchmark_group("evaluate_100_episodes");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(evaluate(&policy, &spec, 100, vec![0], exec).unwrap()))
        });
    }
    group.finish();
}

fn bench_rollout(c: &mut Criterion) {
    let spec = TaskSpec::new(TaskKind::LiftPegUpright);
    let policy = init_policy(0, &[64, 64], -0.5);
    let value = ValueNet::new(OBS_DIM, &[64, 64], &mut rng_from(0, 1));
    let mut group = c.benchmark_group("collect_rollout_16_envs");
    group.sample_size(10);
    for (name, exec) in modes() {
        let cfg = PpoConfig { exec, ..PpoConfig::default() };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(
                || make_workers(&spec, &cfg),
                |mut workers| black_box(collect_rollout(&policy, &value, &mut workers, &spec, &cfg).unwrap()),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluate, bench_rollout);
criterion_main!(benches);
