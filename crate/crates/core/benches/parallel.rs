//! Parallel-vs-sequential throughput on the two fan-out hot paths: batch
//! loss evaluation and independent sampling chains.
//!
//! With `--no-default-features` the parallel path degrades to the same
//! sequential loop, which is the baseline being compared.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dialdiff_core::backbone::model::{InitMode, JointNoisePredictor, ModelConfig};
use dialdiff_core::diffusion::loss::{loss_joint, TrainSample};
use dialdiff_core::diffusion::sample::{sample_ancestral, GaussianOracle, SigmaMode};
use dialdiff_core::diffusion::schedule::make_schedule;
use dialdiff_core::par;
use dialdiff_core::rng::rng_from;
use dialdiff_core::tensor::Tensor;

fn small_model() -> JointNoisePredictor {
    JointNoisePredictor::new(
        ModelConfig {
            dim: 32,
            depth: 2,
            heads: 4,
            ff_dim: 128,
            image_size: 16,
            patch: 4,
            text_len: 16,
            long_skip: true,
        },
        7,
        InitMode::FullRandom,
    )
    .unwrap()
}

fn bench_batch_loss(c: &mut Criterion) {
    let model = small_model();
    let sched = make_schedule(50, 1e-3, 0.1).unwrap();
    let mut rng = rng_from(3);
    let samples: Vec<TrainSample> = (0..16)
        .map(|_| TrainSample {
            x0: Tensor::randn(&[16, 16, 3], 0.5, &mut rng),
            y0: Tensor::randn(&[16, 32], 1.0, &mut rng),
        })
        .collect();
    let refs: Vec<&TrainSample> = samples.iter().collect();

    let mut group = c.benchmark_group("batch_loss");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("fanout", "default"), |b| {
        b.iter(|| {
            let mut r = rng_from(9);
            loss_joint(&model, &sched, &refs, &mut r).unwrap()
        })
    });
    // the same batch evaluated one sample at a time
    group.bench_function(BenchmarkId::new("sequential", "reference"), |b| {
        b.iter(|| {
            par::map_indexed_seq(refs.len(), |i| {
                let one = [refs[i]];
                let mut ri = rng_from(17 + i as u64);
                loss_joint(&model, &sched, &one, &mut ri).unwrap().0
            })
            .into_iter()
            .sum::<f64>()
        })
    });
    group.finish();
}

fn bench_sampling_chains(c: &mut Criterion) {
    let sched = make_schedule(200, 5e-4, 0.1).unwrap();
    let y0 = Tensor::zeros(&[1]);
    let mu = Tensor::filled(&[8], 1.0);

    let mut group = c.benchmark_group("sampling_chains");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("fanout", "default"), |b| {
        b.iter(|| {
            let oracle = GaussianOracle {
                sched: &sched,
                mu: mu.clone(),
                sigma2: 0.8,
            };
            par::map_indexed(64, |i| {
                let mut r = rng_from(1000 + i as u64);
                sample_ancestral(&oracle, &sched, &y0, &[8], SigmaMode::SqrtBeta, &mut r).unwrap()
            })
        })
    });
    group.bench_function(BenchmarkId::new("sequential", "reference"), |b| {
        b.iter(|| {
            let oracle = GaussianOracle {
                sched: &sched,
                mu: mu.clone(),
                sigma2: 0.8,
            };
            par::map_indexed_seq(64, |i| {
                let mut r = rng_from(1000 + i as u64);
                sample_ancestral(&oracle, &sched, &y0, &[8], SigmaMode::SqrtBeta, &mut r).unwrap()
            })
        })
    });
    group.finish();
}

criterion_group!(benches, bench_batch_loss, bench_sampling_chains);
criterion_main!(benches);
