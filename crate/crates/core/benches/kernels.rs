//! Parallel kernels against their sequential counterparts. The training step
//! and contrastive benches use whichever path the crate was built with; run
//! once more with `--no-default-features` for the sequential numbers.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use faircon::losses::{group_contrastive_with_grad, LossConfig};
use faircon::network::{backward, Activation, Batch, ClassifierHead, EncoderParams, LossMode};
use faircon::numkit::{self, seq, Matrix};
use faircon::rng::{stream_rng, Stream};
use rand::Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = stream_rng(seed, Stream::Data, rows as u64, cols as u64);
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_nt");
    for &n in &[64usize, 256, 512] {
        let a = random_matrix(n, 300, 1);
        let b = random_matrix(n, 300, 2);
        group.throughput(Throughput::Elements((n * n * 300) as u64));
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, _| {
            bench.iter(|| seq::matmul_nt(black_box(&a), black_box(&b)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bench, _| {
            bench.iter(|| numkit::matmul_nt(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("matmul_tn");
    for &n in &[128usize, 1024] {
        let a = random_matrix(n, 300, 3);
        let b = random_matrix(n, 300, 4);
        group.throughput(Throughput::Elements((n * 300 * 300) as u64));
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, _| {
            bench.iter(|| seq::matmul_tn(black_box(&a), black_box(&b)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bench, _| {
            bench.iter(|| numkit::matmul_tn(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn contrastive(c: &mut Criterion) {
    let mut group = c.benchmark_group("group_contrastive_with_grad");
    for &n in &[128usize, 512] {
        let h = random_matrix(n, 300, 5);
        let groups: Vec<usize> = (0..n).map(|i| i % 2).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| group_contrastive_with_grad(black_box(&h), &groups, 0.07).unwrap())
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut rng = stream_rng(9, Stream::Init, 0, 0);
    let encoder = EncoderParams::init(16, 300, Activation::Relu, &mut rng);
    let head = ClassifierHead::init(300, 2, &mut rng);
    let batch = Batch {
        x: random_matrix(128, 16, 6),
        labels: (0..128).map(|i| i % 2).collect(),
        protected: (0..128).map(|i| (i / 2) % 2).collect(),
    };
    let cfg = LossConfig::default();
    let mut group = c.benchmark_group("backward");
    for mode in [LossMode::Ce, LossMode::Full] {
        group.bench_function(format!("{mode:?}"), |bench| {
            bench.iter(|| backward(&encoder, &head, black_box(&batch), &cfg, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = matmul, contrastive, training_step
}
criterion_main!(benches);
