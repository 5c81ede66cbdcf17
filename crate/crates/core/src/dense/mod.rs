//! Dense retrieval: embedders and the HNSW passage index.

mod embed;
mod hnsw;

use std::fs;
use std::path::Path;

pub use embed::{Embedder, EmbedderSpec, HashEmbedder, RemoteEmbedder};
pub use hnsw::{DenseIndex, HnswParams, Metric};

use crate::corpus::CorpusStore;
use crate::error::{KgiError, Result};

const INDEX_FILE: &str = "dense.hnsw";
const EMBEDDER_FILE: &str = "embedder.json";

/// Embeds every passage (title plus text) and inserts it in pid order.
pub fn build_dense_index(corpus: &CorpusStore, embedder: &dyn Embedder, params: HnswParams) -> Result<DenseIndex> {
    params.validate()?;
    let texts: Vec<String> = corpus.passages().iter().map(|p| p.retrieval_text()).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vectors = embedder.embed_batch(&refs)?;
    let dim = embedder.dim();
    let mut items = Vec::with_capacity(vectors.len());
    for (p, v) in corpus.passages().iter().zip(vectors) {
        if v.len() != dim {
            return Err(KgiError::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        items.push((p.pid.clone(), v));
    }
    DenseIndex::build(dim, params, items)
}

/// Writes the index plus the embedder description needed to encode queries.
pub fn save_dense_dir(dir: &Path, index: &DenseIndex, embedder: &EmbedderSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    index.save(&dir.join(INDEX_FILE))?;
    fs::write(dir.join(EMBEDDER_FILE), serde_json::to_vec_pretty(embedder)?)?;
    Ok(())
}

pub fn open_dense_dir(dir: &Path) -> Result<(DenseIndex, EmbedderSpec)> {
    let index = DenseIndex::open(&dir.join(INDEX_FILE))?;
    let spec: EmbedderSpec = serde_json::from_slice(&fs::read(dir.join(EMBEDDER_FILE))?)?;
    Ok((index, spec))
}
