//! Retrieve, rerank and generate engine for knowledge-intensive language tasks.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`corpus`]: document ingestion, chunking into passages, passage storage.
//! * [`sparse`]: tokenizer and BM25 inverted index.
//! * [`dense`]: pluggable embedders and an HNSW approximate nearest neighbour index.
//! * [`rerank`]: source-agnostic merging of candidate lists and reranking.
//! * [`generator`]: conditioned generation with an extractive offline fallback.
//! * [`tasks`]: task input conventions, the end-to-end pipeline and cross-examination.
//! * [`dialog`]: conventional and QA-assisted (hybrid) dialog routing.
//! * [`metrics`]: KILT retrieval and downstream metrics.
//! * [`service`]: HTTP API over all of the above.

pub mod corpus;
pub mod dense;
pub mod dialog;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod remote;
pub mod rerank;
pub mod service;
pub mod sparse;
pub mod tasks;

pub use corpus::{ChunkParams, CorpusStats, CorpusStore, Passage, SourceDocument};
pub use dense::{DenseIndex, Embedder, HashEmbedder, HnswParams, Metric};
pub use error::{KgiError, Result};
pub use generator::{ConditionedInput, ExtractiveGenerator, GeneratedOutput, Generator};
pub use rerank::{LexicalReranker, RankedEvidence, Reranker, ScoredCandidate, Source};
pub use sparse::{tokenize, Bm25Params, SparseIndex};
pub use tasks::{Pipeline, PipelineConfig, TaskInput, TaskKind, TaskResult};
