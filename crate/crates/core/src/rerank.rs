//! Candidate fusion and reranking.
//!
//! Sparse and dense retrievers produce scores on unrelated scales. They are
//! merged by rank only and then re-scored by a [`Reranker`] that sees nothing
//! but the query and the passage text.

use std::collections::{HashMap, HashSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusStore;
use crate::error::{KgiError, Result};
use crate::remote::RemoteClient;
use crate::sparse::{bm25_idf, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Sparse,
    Dense,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub pid: String,
    pub retriever_score: f64,
    pub source: Source,
    /// 1-based rank within the retriever that first produced this pid.
    pub retriever_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEvidence {
    pub pid: String,
    pub rerank_score: f64,
    pub final_rank: usize,
}

pub trait Reranker: Send + Sync {
    /// One score per passage, aligned with `passages`.
    fn score(&self, query: &str, passages: &[(&str, &str)]) -> Result<Vec<f64>>;
}

/// Interleaves the two lists by rank (sparse 1, dense 1, sparse 2, ...),
/// collapsing repeated pids into a single `Both` entry at the first
/// position, then truncates to `n_total`.
pub fn merge_candidates(
    sparse: &[ScoredCandidate],
    dense: &[ScoredCandidate],
    n_total: usize,
) -> Vec<ScoredCandidate> {
    let mut merged: Vec<ScoredCandidate> = Vec::with_capacity(sparse.len() + dense.len());
    let mut position: HashMap<&str, usize> = HashMap::new();
    for i in 0..sparse.len().max(dense.len()) {
        for (list, source) in [(sparse, Source::Sparse), (dense, Source::Dense)] {
            let Some(c) = list.get(i) else { continue };
            match position.get(c.pid.as_str()) {
                Some(&at) => {
                    if merged[at].source != source {
                        merged[at].source = Source::Both;
                    }
                }
                None => {
                    position.insert(&c.pid, merged.len());
                    merged.push(ScoredCandidate {
                        source,
                        ..c.clone()
                    });
                }
            }
        }
    }
    merged.truncate(n_total);
    merged
}

/// Scores every candidate with `reranker` and keeps the best `k`, ties
/// broken by ascending pid. Retriever scores are never consulted.
pub fn rerank(
    query: &str,
    candidates: &[ScoredCandidate],
    corpus: &CorpusStore,
    reranker: &dyn Reranker,
    k: usize,
) -> Result<Vec<RankedEvidence>> {
    if k == 0 {
        return Err(KgiError::InvalidArgument("k must be >= 1".into()));
    }
    let mut seen = HashSet::new();
    let mut texts: Vec<(&str, String)> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if seen.insert(c.pid.as_str()) {
            texts.push((c.pid.as_str(), corpus.get_passage(&c.pid)?.retrieval_text()));
        }
    }
    // Presenting passages in pid order makes the reranker input independent
    // of how the candidates were ordered upstream.
    texts.sort_by(|a, b| a.0.cmp(b.0));
    let refs: Vec<(&str, &str)> = texts.iter().map(|(p, t)| (*p, t.as_str())).collect();
    let scores = if refs.is_empty() {
        Vec::new()
    } else {
        reranker.score(query, &refs)?
    };
    if scores.len() != refs.len() {
        return Err(KgiError::Internal(format!(
            "reranker returned {} scores for {} passages",
            scores.len(),
            refs.len()
        )));
    }
    let mut scored: Vec<(&str, f64)> = refs.iter().map(|(p, _)| *p).zip(scores).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (pid, rerank_score))| RankedEvidence {
            pid: pid.to_string(),
            rerank_score,
            final_rank: i + 1,
        })
        .collect())
}

/// Offline reranker: sum over distinct query terms of the term's frequency
/// in the passage times its idf over the candidate set.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalReranker;

impl Reranker for LexicalReranker {
    fn score(&self, query: &str, passages: &[(&str, &str)]) -> Result<Vec<f64>> {
        let mut terms = tokenize(query);
        terms.sort();
        terms.dedup();
        let bags: Vec<HashMap<String, usize>> = passages
            .iter()
            .map(|(_, text)| {
                let mut bag = HashMap::new();
                for t in tokenize(text) {
                    *bag.entry(t).or_insert(0) += 1;
                }
                bag
            })
            .collect();
        let idf: Vec<f64> = terms
            .iter()
            .map(|t| bm25_idf(bags.len(), bags.iter().filter(|b| b.contains_key(t)).count()))
            .collect();
        Ok(bags
            .iter()
            .map(|bag| {
                terms
                    .iter()
                    .zip(&idf)
                    .map(|(t, w)| *bag.get(t).unwrap_or(&0) as f64 * w)
                    .sum()
            })
            .collect())
    }
}

#[derive(Serialize)]
struct RerankPassage<'a> {
    pid: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct RerankRequest<'a> {
    query: &'a str,
    passages: Vec<RerankPassage<'a>>,
}

#[derive(Deserialize)]
struct RerankResponse {
    scores: Vec<f64>,
}

/// Client for a cross-scoring model server speaking
/// `{query, passages:[{pid, text}]} -> {scores:[..]}`.
#[derive(Debug, Clone)]
pub struct RemoteReranker {
    client: RemoteClient,
}

impl RemoteReranker {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: u32) -> Result<Self> {
        Ok(RemoteReranker {
            client: RemoteClient::new(endpoint, timeout, retries)?,
        })
    }
}

impl Reranker for RemoteReranker {
    fn score(&self, query: &str, passages: &[(&str, &str)]) -> Result<Vec<f64>> {
        let request = RerankRequest {
            query,
            passages: passages.iter().map(|(pid, text)| RerankPassage { pid, text }).collect(),
        };
        let response: RerankResponse = self.client.post_json(&request)?;
        if response.scores.len() != passages.len() {
            return Err(KgiError::Transport {
                endpoint: self.client.endpoint().to_string(),
                attempts: 1,
                retryable: false,
                message: format!(
                    "expected {} scores, got {}",
                    passages.len(),
                    response.scores.len()
                ),
            });
        }
        Ok(response.scores)
    }
}

/// Uses `fallback` when `primary` fails with a transport error. Only built
/// when explicitly configured; a bare remote reranker surfaces its errors.
pub struct FallbackReranker<P, F> {
    pub primary: P,
    pub fallback: F,
}

impl<P: Reranker, F: Reranker> Reranker for FallbackReranker<P, F> {
    fn score(&self, query: &str, passages: &[(&str, &str)]) -> Result<Vec<f64>> {
        match self.primary.score(query, passages) {
            Err(e) if e.is_transport() => {
                tracing::warn!(error = %e, "primary reranker failed, using fallback");
                self.fallback.score(query, passages)
            }
            other => other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ChunkParams, SourceDocument};

    fn cand(pid: &str, source: Source, rank: usize) -> ScoredCandidate {
        ScoredCandidate {
            pid: pid.into(),
            retriever_score: 1.0 / rank as f64,
            source,
            retriever_rank: rank,
        }
    }

    fn list(pids: &[&str], source: Source) -> Vec<ScoredCandidate> {
        pids.iter().enumerate().map(|(i, p)| cand(p, source, i + 1)).collect()
    }

    fn pids(c: &[ScoredCandidate]) -> Vec<&str> {
        c.iter().map(|c| c.pid.as_str()).collect()
    }

    #[test]
    fn merge_dedups_into_both() {
        let merged = merge_candidates(
            &list(&["p1", "p2"], Source::Sparse),
            &list(&["p2", "p3"], Source::Dense),
            4,
        );
        assert_eq!(pids(&merged), ["p1", "p2", "p3"]);
        let sources: Vec<Source> = merged.iter().map(|c| c.source).collect();
        assert_eq!(sources, [Source::Sparse, Source::Both, Source::Dense]);
    }

    #[test]
    fn merge_one_sided() {
        let merged = merge_candidates(&[], &list(&["p5"], Source::Dense), 4);
        assert_eq!(pids(&merged), ["p5"]);
        assert_eq!(merged[0].source, Source::Dense);
    }

    #[test]
    fn merge_interleaves_and_truncates() {
        let merged = merge_candidates(
            &list(&["a1", "a2", "a3"], Source::Sparse),
            &list(&["b1", "b2", "b3"], Source::Dense),
            4,
        );
        assert_eq!(pids(&merged), ["a1", "b1", "a2", "b2"]);
    }

    fn store(docs: &[(&str, &str)]) -> CorpusStore {
        let docs: Vec<SourceDocument> = docs.iter().map(|(id, body)| SourceDocument::new(*id, "", *body)).collect();
        CorpusStore::from_documents(&docs, ChunkParams::default()).unwrap()
    }

    #[test]
    fn single_candidate_ranks_first() {
        let corpus = store(&[("A", "nothing relevant")]);
        let out = rerank("query", &[cand("A::0", Source::Dense, 7)], &corpus, &LexicalReranker, 5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].pid.as_str(), out[0].final_rank), ("A::0", 1));
    }

    #[test]
    fn lexical_prefers_more_query_terms() {
        let corpus = store(&[
            ("A", "Slovenia adopted the euro in 2007"),
            ("B", "Slovenia is a country in central Europe"),
        ]);
        let cands = [cand("B::0", Source::Sparse, 1), cand("A::0", Source::Dense, 1)];
        let out = rerank("Slovenia euro", &cands, &corpus, &LexicalReranker, 5).unwrap();
        assert_eq!(out[0].pid, "A::0");
        assert!(out[0].rerank_score > out[1].rerank_score);
    }

    #[test]
    fn retriever_scores_are_ignored() {
        let corpus = store(&[("A", "x y"), ("B", "x x"), ("C", "y")]);
        let cands = vec![
            cand("A::0", Source::Sparse, 1),
            cand("B::0", Source::Both, 2),
            cand("C::0", Source::Dense, 1),
        ];
        let scaled: Vec<ScoredCandidate> = cands
            .iter()
            .map(|c| ScoredCandidate {
                retriever_score: c.retriever_score * 1000.0,
                ..c.clone()
            })
            .collect();
        let a = rerank("x y", &cands, &corpus, &LexicalReranker, 5).unwrap();
        let b = rerank("x y", &scaled, &corpus, &LexicalReranker, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rerank_rejects_zero_k() {
        let corpus = store(&[("A", "x")]);
        assert!(rerank("x", &[], &corpus, &LexicalReranker, 0).is_err());
        assert!(rerank("x", &[], &corpus, &LexicalReranker, 1).unwrap().is_empty());
    }

    struct Broken;
    impl Reranker for Broken {
        fn score(&self, _: &str, _: &[(&str, &str)]) -> Result<Vec<f64>> {
            Err(KgiError::Transport {
                endpoint: "http://nowhere".into(),
                attempts: 3,
                retryable: true,
                message: "refused".into(),
            })
        }
    }

    #[test]
    fn transport_errors_surface_unless_fallback_configured() {
        let corpus = store(&[("A", "x")]);
        let cands = [cand("A::0", Source::Sparse, 1)];
        let err = rerank("x", &cands, &corpus, &Broken, 1).unwrap_err();
        assert!(err.is_transport());
        let wrapped = FallbackReranker {
            primary: Broken,
            fallback: LexicalReranker,
        };
        assert_eq!(rerank("x", &cands, &corpus, &wrapped, 1).unwrap().len(), 1);
    }
}
