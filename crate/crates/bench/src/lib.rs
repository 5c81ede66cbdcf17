//! Seeded workload generators shared by the benchmarks.

use kgi_core::{ChunkParams, CorpusStore, SourceDocument};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Documents of `len` words drawn uniformly from `w0..w{vocab}`.
pub fn random_corpus(seed: u64, n_docs: usize, vocab: usize, len: usize) -> CorpusStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs: Vec<SourceDocument> = (0..n_docs)
        .map(|i| {
            let body: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..vocab))).collect();
            SourceDocument::new(format!("d{i}"), String::new(), body.join(" "))
        })
        .collect();
    CorpusStore::from_documents(&docs, ChunkParams::default()).expect("generated documents are chunkable")
}

pub fn random_query(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> String {
    (0..len)
        .map(|_| format!("w{}", rng.random_range(0..vocab)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Vectors uniform in `[-1, 1]^dim`.
pub fn random_vectors(seed: u64, n: usize, dim: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

pub fn random_words(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> String {
    random_query(rng, vocab, len)
}
