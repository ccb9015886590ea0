use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use factlink_core::encoder::featurize;
use factlink_core::preranker::{infonce_grad, EmbeddingIndex};
use factlink_core::{Embedding, EntryKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
    Embedding::normalized((0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn topk(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 200;
    let mut group = c.benchmark_group("topk");
    for rows in [1_000usize, 10_000] {
        let index = EmbeddingIndex::build(
            EntryKind::Entity,
            d,
            (0..rows).map(|i| (format!("Q{i}"), unit(&mut rng, d))).collect(),
        )
        .unwrap();
        let query = unit(&mut rng, d);
        for k in [1usize, 10, 50] {
            group.bench_with_input(BenchmarkId::new(format!("rows{rows}"), k), &k, |b, &k| {
                b.iter(|| index.topk(black_box(&query), k))
            });
        }
    }
    group.finish();
}

fn features(c: &mut Criterion) {
    let text = "<SUBJ> Michael Jordan <REL> played for <OBJ> Chicago Bulls <SENT> Michael Jordan played for the Chicago Bulls in the nineties.";
    c.bench_function("featurize", |b| b.iter(|| featurize(black_box(text), 1 << 18)));
}

fn infonce(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let negs: Vec<f64> = (0..190).map(|_| rng.gen_range(-1.0..1.0)).collect();
    c.bench_function("infonce_grad_190", |b| b.iter(|| infonce_grad(black_box(0.7), black_box(&negs), 0.07)));
}

criterion_group!(benches, topk, features, infonce);
criterion_main!(benches);
