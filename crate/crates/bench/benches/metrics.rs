use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use kgi_bench::random_words;
use kgi_core::metrics::{rouge_l, token_f1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn text_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<(String, String)> = (0..256)
        .map(|_| (random_words(&mut rng, 200, 40), random_words(&mut rng, 200, 40)))
        .collect();
    c.bench_function("token_f1_40w", |b| {
        b.iter(|| pairs.iter().map(|(p, g)| token_f1(black_box(p), black_box(std::slice::from_ref(g)))).sum::<f64>())
    });
    c.bench_function("rouge_l_40w", |b| {
        b.iter(|| pairs.iter().map(|(p, g)| rouge_l(black_box(p), black_box(std::slice::from_ref(g)))).sum::<f64>())
    });
}

criterion_group!(benches, text_metrics);
criterion_main!(benches);
