use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cqa_bench::{random_index, random_query, random_scores, random_tokens};
use cqa_core::encoder::init_params;
use cqa_core::reader::best_span;

fn search(c: &mut Criterion) {
    let mut group = c.benchmark_group("search");
    for n in [1_000, 10_000, 100_000] {
        let index = random_index(n, 64, 1);
        let q = random_query(64, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| index.search(black_box(&q), 10).unwrap())
        });
    }
    group.finish();
}

fn span(c: &mut Criterion) {
    let mut group = c.benchmark_group("best_span");
    for n in [64, 512] {
        let (start, end) = random_scores(n, 3);
        for l in [5, 30] {
            group.bench_with_input(BenchmarkId::new(format!("n{n}"), l), &l, |b, &l| {
                b.iter(|| best_span(black_box(&start), black_box(&end), l))
            });
        }
    }
    group.finish();
}

fn encode(c: &mut Criterion) {
    let params = init_params(4096, 64, 4, 1.0).unwrap();
    let mut group = c.benchmark_group("encode");
    for n in [16, 128] {
        let tokens = random_tokens(n, 5);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| params.encode(black_box(&tokens)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, search, span, encode);
criterion_main!(benches);
