use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use kgi_core::corpus::{chunk_document, ChunkParams, CorpusStore, SourceDocument};
use kgi_core::dialog::{
    build_qa_query, extract_query_noun_phrases, DialogMode, DialogModel, DialogRouter, DialogSession, LexiconChunker,
    ModelReply, QaPipeline, ResponseSource, Turn,
};
use kgi_core::metrics::{exact_match, kilt_combine, r_precision, recall_at_5, rouge_l, token_f1, RecallMode};
use kgi_core::rerank::{merge_candidates, rerank, LexicalReranker, ScoredCandidate, Source};
use kgi_core::{DenseIndex, HnswParams, Metric, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn candidates(ids: Vec<u8>) -> Vec<ScoredCandidate> {
    let mut seen = HashSet::new();
    ids.into_iter()
        .filter(|i| seen.insert(*i))
        .enumerate()
        .map(|(r, i)| ScoredCandidate {
            pid: format!("d{i}::0"),
            retriever_score: 100.0 - r as f64,
            source: Source::Sparse,
            retriever_rank: r + 1,
        })
        .collect()
}

const VOCAB: &[&str] = &[
    "river", "mountain", "city", "king", "queen", "film", "war", "music", "north", "island", "bridge", "empire",
];

fn toy_corpus(n: usize, seed: u64) -> CorpusStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs: Vec<SourceDocument> = (0..n)
        .map(|i| {
            let words: Vec<&str> = (0..12).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
            SourceDocument::new(format!("d{i}"), format!("Doc {i}"), words.join(" "))
        })
        .collect();
    CorpusStore::from_documents(&docs, ChunkParams::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_is_a_bounded_duplicate_free_union(
        s in prop::collection::vec(0u8..40, 0..20),
        d in prop::collection::vec(0u8..40, 0..20),
        n_total in 1usize..40,
    ) {
        let sparse = candidates(s);
        let mut dense = candidates(d);
        for c in &mut dense {
            c.source = Source::Dense;
        }
        let merged = merge_candidates(&sparse, &dense, n_total);
        let sparse_ids: HashSet<&str> = sparse.iter().map(|c| c.pid.as_str()).collect();
        let dense_ids: HashSet<&str> = dense.iter().map(|c| c.pid.as_str()).collect();
        let union = sparse_ids.union(&dense_ids).count();

        prop_assert_eq!(merged.len(), union.min(n_total));
        let ids: HashSet<&str> = merged.iter().map(|c| c.pid.as_str()).collect();
        prop_assert_eq!(ids.len(), merged.len());
        for c in &merged {
            let expected = match (sparse_ids.contains(c.pid.as_str()), dense_ids.contains(c.pid.as_str())) {
                (true, true) => Source::Both,
                (true, false) => Source::Sparse,
                (false, true) => Source::Dense,
                (false, false) => unreachable!(),
            };
            prop_assert_eq!(c.source, expected);
        }
    }

    #[test]
    fn rerank_returns_sorted_subset(
        seed in any::<u64>(),
        picks in prop::collection::vec(0u8..30, 1..30),
        query in prop::sample::subsequence(VOCAB.to_vec(), 1..4),
        k in 1usize..8,
    ) {
        let corpus = toy_corpus(30, seed);
        let cands = candidates(picks);
        let query = query.join(" ");
        let out = rerank(&query, &cands, &corpus, &LexicalReranker, k).unwrap();
        let pool: HashSet<&str> = cands.iter().map(|c| c.pid.as_str()).collect();

        prop_assert_eq!(out.len(), k.min(pool.len()));
        for (i, e) in out.iter().enumerate() {
            prop_assert!(pool.contains(e.pid.as_str()));
            prop_assert_eq!(e.final_rank, i + 1);
        }
        for w in out.windows(2) {
            prop_assert!(
                w[0].rerank_score > w[1].rerank_score
                    || (w[0].rerank_score == w[1].rerank_score && w[0].pid < w[1].pid)
            );
        }

        let mut reversed = cands.clone();
        reversed.reverse();
        prop_assert_eq!(rerank(&query, &reversed, &corpus, &LexicalReranker, k).unwrap(), out);
    }

    #[test]
    fn chunks_cover_the_document(
        n_words in 0usize..400,
        max_tokens in 1usize..120,
        stride_frac in 0.1f64..=1.0,
    ) {
        let stride = ((max_tokens as f64 * stride_frac).ceil() as usize).max(1);
        let body: Vec<String> = (0..n_words).map(|i| format!("w{i}")).collect();
        let doc = SourceDocument::new("doc", "Doc", body.join(" "));
        let passages = chunk_document(&doc, ChunkParams { max_tokens, stride }).unwrap();
        let mut covered = HashSet::new();
        for (i, p) in passages.iter().enumerate() {
            prop_assert_eq!(&p.pid, &format!("doc::{i}"));
            prop_assert!(p.token_count <= max_tokens);
            covered.extend(p.text.split_whitespace().map(str::to_string));
        }
        if n_words == 0 {
            prop_assert_eq!(passages.len(), 1);
            prop_assert_eq!(passages[0].text.as_str(), "Doc");
        } else {
            prop_assert_eq!(covered.len(), n_words);
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval(
        pred in "[a-z ]{0,30}",
        golds in prop::collection::vec("[a-z ]{0,30}", 1..4),
        provenance in prop::collection::vec(prop::collection::vec(0u8..8, 1..4), 1..3),
        retrieved in prop::collection::vec(0u8..8, 0..8),
    ) {
        let sets: Vec<Vec<String>> = provenance
            .iter()
            .map(|s| s.iter().map(|i| format!("p{i}")).collect())
            .collect();
        let retrieved: Vec<String> = retrieved.iter().map(|i| format!("p{i}")).collect();
        let rp = r_precision(&sets, &retrieved);
        for v in [
            rp,
            recall_at_5(&sets, &retrieved, RecallMode::Fraction),
            recall_at_5(&sets, &retrieved, RecallMode::AnyHit),
            exact_match(&pred, &golds),
            token_f1(&pred, &golds),
            rouge_l(&pred, &golds),
        ] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
        for downstream in [exact_match(&pred, &golds), token_f1(&pred, &golds), rouge_l(&pred, &golds)] {
            prop_assert!(kilt_combine(downstream, rp) <= downstream);
        }
        prop_assert!(recall_at_5(&sets, &retrieved, RecallMode::Fraction) <= recall_at_5(&sets, &retrieved, RecallMode::AnyHit));
    }

    #[test]
    fn qa_query_ends_with_question_and_repeats_no_phrase(
        utterances in prop::collection::vec(
            prop::sample::subsequence(vec!["the", "young", "river", "city", "she", "really", "music", "my", "big", "dog"], 0..6),
            0..4,
        ),
        question in "[A-Za-z ]{1,20}\\?",
    ) {
        let tagger = LexiconChunker::default();
        let utts: Vec<String> = utterances.iter().map(|u| u.join(" ")).collect();
        let query = build_qa_query(&tagger, utts.iter().map(String::as_str), &question);
        prop_assert!(query.ends_with(&question));

        let mut expected = Vec::new();
        let mut seen = HashSet::new();
        for u in &utts {
            for np in extract_query_noun_phrases(&tagger, u) {
                prop_assert!(np.is_eligible());
                if seen.insert(np.text.to_lowercase()) {
                    expected.push(np.text);
                }
            }
        }
        expected.push(question.clone());
        prop_assert_eq!(query, expected.join(". "));
    }
}

#[derive(Default)]
struct Echo {
    qa_calls: Mutex<usize>,
}

impl DialogModel for Echo {
    fn reply(&self, _history: &[Turn], utterance: &str) -> Result<ModelReply> {
        Ok(ModelReply {
            text: format!("you said {}", utterance.len()),
            evidence_pids: vec![],
        })
    }
}

impl QaPipeline for Echo {
    fn answer(&self, _query: &str) -> Result<ModelReply> {
        *self.qa_calls.lock().unwrap() += 1;
        Ok(ModelReply {
            text: "zanzibar".into(),
            evidence_pids: vec!["z::0".into()],
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conventional_mode_never_consults_qa(utterances in prop::collection::vec("[A-Za-z][A-Za-z ]{0,29}\\??", 1..6)) {
        let model = Arc::new(Echo::default());
        let router = DialogRouter::new(model.clone(), model.clone());
        let mut session = DialogSession::new("s", DialogMode::Conventional);
        for u in &utterances {
            let (resp, trace) = router.respond_traced(&mut session, u).unwrap();
            prop_assert_eq!(resp.source, ResponseSource::DialogModel);
            prop_assert!(!trace.qa_called());
        }
        prop_assert_eq!(*model.qa_calls.lock().unwrap(), 0);
        prop_assert_eq!(session.turns().len(), 2 * utterances.len());
    }

    #[test]
    fn hybrid_qa_answers_are_novel(utterances in prop::collection::vec("[A-Za-z][A-Za-z ]{0,29}\\??", 1..6)) {
        let model = Arc::new(Echo::default());
        let router = DialogRouter::new(model.clone(), model.clone());
        let mut session = DialogSession::new("s", DialogMode::Hybrid);
        for u in &utterances {
            let before: Vec<String> = session.turns().iter().map(|t| t.text.to_lowercase()).collect();
            let (resp, trace) = router.respond_traced(&mut session, u).unwrap();
            if resp.source == ResponseSource::QaModel {
                prop_assert!(trace.qa_called());
                prop_assert!(!before.iter().any(|t| t.contains("zanzibar")));
                prop_assert!(!u.to_lowercase().contains("zanzibar"));
            }
        }
    }
}

fn random_index(n: usize, dim: usize, m: usize, seed: u64) -> DenseIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| (format!("v{i}::0"), (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
        .collect();
    let params = HnswParams {
        m,
        ef_construction: 4 * m,
        metric: Metric::InnerProduct,
        seed,
    };
    DenseIndex::build(dim, params, items).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn hnsw_graph_invariants(n in 1usize..300, m in 2usize..10, seed in any::<u64>()) {
        let index = random_index(n, 8, m, seed);
        prop_assert_eq!(index.len(), n);
        let entry = index.entry_point().unwrap().to_string();
        let top = (0..n).map(|i| index.node_level(i)).max().unwrap();
        let entry_node = (0..n).find(|&i| index.pid(i) == entry).unwrap();
        prop_assert_eq!(index.node_level(entry_node), top);

        for node in 0..n {
            for level in 0..=index.node_level(node) {
                let nbrs = index.neighbors(node, level);
                let cap = if level == 0 { 2 * m } else { m };
                prop_assert!(nbrs.len() <= cap, "node {node} level {level}: {} > {cap}", nbrs.len());
                let distinct: HashSet<u32> = nbrs.iter().copied().collect();
                prop_assert_eq!(distinct.len(), nbrs.len());
                for &nb in nbrs {
                    prop_assert!(nb as usize != node);
                    prop_assert!(index.node_level(nb as usize) >= level);
                }
            }
        }
        prop_assert!(index.reachable_from_entry().iter().all(|&r| r));
    }

    #[test]
    fn hnsw_search_is_deterministic_and_exact_when_exhaustive(n in 1usize..120, seed in any::<u64>(), k in 1usize..10) {
        let index = random_index(n, 6, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let q: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let a = index.search(&q, k, n.max(k)).unwrap();
        prop_assert_eq!(&a, &index.search(&q, k, n.max(k)).unwrap());
        prop_assert_eq!(a.len(), k.min(n));
        let exact: HashMap<String, f64> = index
            .exact_search(&q, k)
            .into_iter()
            .map(|c| (c.pid, c.retriever_score))
            .collect();
        let got: f64 = a.iter().map(|c| c.retriever_score).sum();
        let want: f64 = exact.values().sum();
        prop_assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }
}
