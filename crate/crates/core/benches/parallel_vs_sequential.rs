//! Compares the rayon fan-out against the sequential fallback on the two
//! batch-level hot loops: per-example gradient accumulation and the reverse
//! sampling chain. Run with `--no-default-features` to benchmark the build
//! without the parallel path compiled in; both paths produce identical
//! numbers, so this suite is purely about throughput.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tsdiff_core::data::{gen_sines, SineOptions};
use tsdiff_core::denoiser::{DenoiserConfig, DenoiserModel};
use tsdiff_core::rng::{self, stream};
use tsdiff_core::sampling::sample_unconditional;
use tsdiff_core::schedule::cosine_schedule;
use tsdiff_core::training::{batch_loss_and_grads, LossWeights, TrainExample};
use tsdiff_core::exec;

use rand::Rng;

fn bench_config() -> DenoiserConfig {
    DenoiserConfig {
        tau: 24,
        dim: 2,
        hidden: 32,
        n_heads: 4,
        head_dim: 8,
        enc_layers: 1,
        dec_layers: 2,
        trend_degree: 3,
        top_k: 3,
        timesteps: 50,
    }
}

fn batch(n: usize, config: &DenoiserConfig) -> Vec<TrainExample> {
    let windows = gen_sines(n, config.tau, config.dim, 7, &SineOptions::default()).unwrap();
    let mut r = rng::substream(7, stream::TRAIN, 0);
    windows
        .into_iter()
        .map(|x0| {
            let t = r.gen_range(1..=config.timesteps);
            let eps = rng::normal_tensor(&mut r, &[config.tau, config.dim]);
            TrainExample { x0, t, eps }
        })
        .collect()
}

fn bench_batch_gradients(c: &mut Criterion) {
    let config = bench_config();
    let model = DenoiserModel::new(config.clone(), 5).unwrap();
    let schedule = cosine_schedule(config.timesteps, 0.008).unwrap();
    let weights = LossWeights::default();
    let examples = batch(16, &config);

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (label, workers) in [("sequential", 1usize), ("parallel", 0usize)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &workers, |b, &w| {
            b.iter(|| batch_loss_and_grads(&model, &schedule, &examples, &weights, w).unwrap());
        });
    }
    group.finish();
}

fn bench_sampling(c: &mut Criterion) {
    let config = bench_config();
    let model = DenoiserModel::new(config.clone(), 5).unwrap();
    let schedule = cosine_schedule(config.timesteps, 0.008).unwrap();

    let mut group = c.benchmark_group("sample_batch");
    group.sample_size(10);
    for (label, workers) in [("sequential", 1usize), ("parallel", 0usize)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &workers, |b, &w| {
            b.iter(|| {
                sample_unconditional(&model, &schedule, 8, config.tau, config.dim, 11, w).unwrap()
            });
        });
    }
    group.finish();
}

fn report_mode(c: &mut Criterion) {
    // A zero-cost marker so the report states which paths were compiled.
    let name = if exec::parallel_available() { "parallel_enabled" } else { "sequential_only" };
    c.bench_function(name, |b| b.iter(|| std::hint::black_box(exec::parallel_available())));
}

criterion_group!(benches, bench_batch_gradients, bench_sampling, report_mode);
criterion_main!(benches);
