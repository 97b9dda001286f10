//! `par` helpers against a plain iterator on the same closures.
//!
//! With default features the `par` side runs on rayon; build with
//! `--no-default-features` to see both sides sequential.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tacticraft_core::par;
use tacticraft_core::policy::{init_base, Observation, TrunkCache};
use tacticraft_core::synth::{eval_observations, generate_dataset, ScriptSet};

fn forward_all(c: &mut Criterion) {
    let base = init_base(0);
    let obs: Vec<Observation> = eval_observations(&base.dims, 32, 8, 1).into_iter().flatten().collect();
    let mut g = c.benchmark_group("base_forward_256_obs");
    g.bench_function("sequential", |b| {
        b.iter(|| {
            obs.iter()
                .map(|o| base.forward(o, &base.initial_state()).unwrap())
                .collect::<Vec<_>>()
        })
    });
    g.bench_function(if par::is_parallel() { "rayon" } else { "par_fallback" }, |b| {
        b.iter(|| par::map_slice(&obs, |o| base.forward(o, &base.initial_state()).unwrap()))
    });
    g.finish();
}

fn dataset_and_cache(c: &mut Criterion) {
    let base = init_base(0);
    let scripts = ScriptSet::default_for(&base.dims).unwrap();
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    for n in [90usize, 360] {
        g.bench_with_input(BenchmarkId::new("generate_dataset", n), &n, |b, &n| {
            b.iter(|| generate_dataset(&scripts, &base.dims, black_box(n), 8, 0).unwrap())
        });
        let trajs = eval_observations(&base.dims, n, 8, 2);
        g.bench_with_input(BenchmarkId::new("trunk_cache", n), &trajs, |b, t| {
            b.iter(|| TrunkCache::build(&base, t).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forward_all, dataset_and_cache);
criterion_main!(benches);
