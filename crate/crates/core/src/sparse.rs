//! Tokenization and the BM25 inverted index.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusStore;
use crate::error::{KgiError, Result};
use crate::rerank::{ScoredCandidate, Source};

const INDEX_FILE: &str = "sparse.json";

/// Lowercased tokens split on every non-alphanumeric character. Digits are
/// ordinary alphanumerics, so numbers survive as tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_lowercase())
        .collect()
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "did", "do", "does", "for", "from", "had", "has",
    "have", "he", "her", "his", "how", "i", "in", "is", "it", "its", "of", "on", "or", "she", "that", "the",
    "their", "there", "they", "this", "to", "was", "were", "what", "when", "where", "which", "who", "why",
    "will", "with", "you",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

fn light_stem(token: &str) -> String {
    let n = token.chars().count();
    if n > 4 && token.ends_with("ies") {
        return format!("{}y", &token[..token.len() - 3]);
    }
    for suffix in ["ing", "ed"] {
        if n > suffix.len() + 3 && token.ends_with(suffix) {
            return token[..token.len() - suffix.len()].to_string();
        }
    }
    if n > 3 && token.ends_with('s') && !token.ends_with("ss") {
        return token[..token.len() - 1].to_string();
    }
    token.to_string()
}

/// Optional term normalisation on top of [`tokenize`]. Both switches are off
/// by default so that index terms equal the plain tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Analyzer {
    #[serde(default)]
    pub remove_stopwords: bool,
    #[serde(default)]
    pub stem: bool,
}

impl Analyzer {
    pub fn terms(&self, text: &str) -> Vec<String> {
        tokenize(text)
            .into_iter()
            .filter(|t| !(self.remove_stopwords && is_stopword(t)))
            .map(|t| if self.stem { light_stem(&t) } else { t })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    fn validate(&self) -> Result<()> {
        if self.k1.is_nan() || self.k1 <= 0.0 || !(0.0..=1.0).contains(&self.b) {
            return Err(KgiError::InvalidArgument(format!(
                "BM25 requires k1 > 0 and 0 <= b <= 1, got k1={} b={}",
                self.k1, self.b
            )));
        }
        Ok(())
    }
}

/// Non-negative BM25 idf: `ln(1 + (N - df + 0.5) / (df + 0.5))`.
pub fn bm25_idf(n_docs: usize, df: usize) -> f64 {
    let (n, df) = (n_docs as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// Saturated, length-normalised term-frequency component.
pub fn bm25_tf(tf: f64, doc_len: f64, avg_doc_len: f64, params: Bm25Params) -> f64 {
    let norm = if avg_doc_len > 0.0 {
        1.0 - params.b + params.b * doc_len / avg_doc_len
    } else {
        1.0
    };
    tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    /// Position of the passage in [`SparseIndex::pids`].
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseIndex {
    /// Passage ids in ascending order; postings refer to them by position.
    pids: Vec<String>,
    doc_lengths: Vec<u32>,
    postings: HashMap<String, Vec<Posting>>,
    avg_doc_length: f64,
    params: Bm25Params,
    analyzer: Analyzer,
}

impl SparseIndex {
    pub fn build(corpus: &CorpusStore, params: Bm25Params, analyzer: Analyzer) -> Result<Self> {
        let docs = corpus.passages().iter().map(|p| (p.pid.clone(), p.retrieval_text()));
        Self::from_texts(docs, params, analyzer)
    }

    /// Builds an index over arbitrary `(pid, text)` pairs.
    pub fn from_texts(
        docs: impl IntoIterator<Item = (String, String)>,
        params: Bm25Params,
        analyzer: Analyzer,
    ) -> Result<Self> {
        params.validate()?;
        let mut docs: Vec<(String, String)> = docs.into_iter().collect();
        docs.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = docs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(KgiError::InvalidArgument(format!("duplicate pid `{}`", w[0].0)));
        }

        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (doc, (_, text)) in docs.iter().enumerate() {
            let terms = analyzer.terms(text);
            doc_lengths.push(terms.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf: count,
                });
            }
        }
        // Documents were visited in pid order, so every postings list is already sorted.
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            total as f64 / doc_lengths.len() as f64
        };
        Ok(SparseIndex {
            pids: docs.into_iter().map(|(pid, _)| pid).collect(),
            doc_lengths,
            postings,
            avg_doc_length,
            params,
            analyzer,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.pids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn pids(&self) -> &[String] {
        &self.pids
    }

    pub fn doc_length(&self, pid: &str) -> Option<u32> {
        self.pids
            .binary_search_by(|p| p.as_str().cmp(pid))
            .ok()
            .map(|i| self.doc_lengths[i])
    }

    /// `(pid, tf)` pairs for `term`, sorted by pid.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|list| list.iter().map(|p| (self.pids[p.doc as usize].as_str(), p.tf)).collect())
            .unwrap_or_default()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Top-`k` passages by BM25, ties broken by ascending pid. Repeated query
    /// terms count once.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<ScoredCandidate>> {
        if k == 0 {
            return Err(KgiError::InvalidArgument("k must be >= 1".into()));
        }
        let mut seen = HashSet::new();
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in self.analyzer.terms(query) {
            if !seen.insert(term.clone()) {
                continue;
            }
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = bm25_idf(self.n_docs(), list.len());
            for p in list {
                let len = self.doc_lengths[p.doc as usize] as f64;
                *scores.entry(p.doc).or_default() +=
                    idf * bm25_tf(p.tf as f64, len, self.avg_doc_length, self.params);
            }
        }
        let mut hits: Vec<(u32, f64)> = scores.into_iter().collect();
        // pids are sorted, so the doc position doubles as the pid tie-break.
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(k);
        Ok(hits
            .into_iter()
            .enumerate()
            .map(|(rank, (doc, score))| ScoredCandidate {
                pid: self.pids[doc as usize].clone(),
                retriever_score: score,
                source: Source::Sparse,
                retriever_rank: rank + 1,
            })
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".{INDEX_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(tmp, dir.join(INDEX_FILE))?;
        Ok(())
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let index: SparseIndex = serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)?;
        if index.pids.len() != index.doc_lengths.len() {
            return Err(KgiError::CorruptIndex("pid and length tables differ in size".into()));
        }
        Ok(index)
    }
}
