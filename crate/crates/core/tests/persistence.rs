use std::fs;
use std::sync::Arc;

use kgi_core::corpus::{ingest_corpus, ChunkParams, CorpusStore};
use kgi_core::dense::{build_dense_index, open_dense_dir, save_dense_dir, Embedder, HashEmbedder, HnswParams};
use kgi_core::generator::ExtractiveGenerator;
use kgi_core::metrics::{evaluate_records, KiltRecord, OutputEntry, ProvenanceRef, RecallMode};
use kgi_core::rerank::LexicalReranker;
use kgi_core::service::ServiceConfig;
use kgi_core::sparse::{Analyzer, Bm25Params, SparseIndex};
use kgi_core::{KgiError, Pipeline, TaskInput, TaskKind};
use std::time::Duration;

const DOCS: &str = r#"{"id": "Oliver_Cromwell", "title": "Oliver Cromwell", "text": "Oliver Cromwell was the spouse of Elizabeth Cromwell. He led the Parliament armies."}
{"wikipedia_id": "Slovenia", "wikipedia_title": "Slovenia", "text": ["Slovenia is a country in Central Europe.", "Slovenia uses the euro."]}
{"id": "Iceland", "title": "Iceland", "text": "Iceland is sparsely populated and has the smallest population in Europe."}
{"id": "Dracula_1992", "title": "Bram Stoker's Dracula", "text": "Bram Stoker's Dracula is a 1992 film directed by Francis Ford Coppola."}
"#;

fn build_all(root: &std::path::Path) -> Pipeline {
    let input = root.join("docs.jsonl");
    fs::write(&input, DOCS).unwrap();
    let stats = ingest_corpus(&input, ChunkParams::default(), &root.join("corpus")).unwrap();
    assert_eq!(stats.n_documents, 4);
    let corpus = CorpusStore::open(&root.join("corpus")).unwrap();
    SparseIndex::build(&corpus, Bm25Params::default(), Analyzer::default())
        .unwrap()
        .save(&root.join("sparse"))
        .unwrap();
    let embedder = HashEmbedder::default();
    let dense = build_dense_index(&corpus, &embedder, HnswParams::default()).unwrap();
    save_dense_dir(&root.join("dense"), &dense, &embedder.spec()).unwrap();

    let config: ServiceConfig = serde_json::from_value(serde_json::json!({
        "corpus": "corpus", "sparse_index": "sparse", "dense_index": "dense"
    }))
    .unwrap();
    let mut config = config;
    config.resolve_paths(root);
    config.build_pipeline().unwrap()
}

#[test]
fn ingestion_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("docs.jsonl");
    fs::write(&input, DOCS).unwrap();
    let a = ingest_corpus(&input, ChunkParams::default(), &dir.path().join("a")).unwrap();
    let b = ingest_corpus(&input, ChunkParams::default(), &dir.path().join("a")).unwrap();
    assert_eq!(a, b);
    let first = CorpusStore::open(&dir.path().join("a")).unwrap();
    let c = ingest_corpus(&input, ChunkParams::default(), &dir.path().join("b")).unwrap();
    assert_eq!(a, c);
    assert_eq!(first.passages(), CorpusStore::open(&dir.path().join("b")).unwrap().passages());
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("docs.jsonl");
    fs::write(&input, "{\"id\": \"a\", \"title\": \"A\", \"text\": \"x\"}\n{oops\n").unwrap();
    match ingest_corpus(&input, ChunkParams::default(), &dir.path().join("out")) {
        Err(KgiError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn reopened_indexes_answer_like_fresh_ones() {
    let dir = tempfile::tempdir().unwrap();
    let from_disk = build_all(dir.path());

    let corpus = Arc::new(CorpusStore::open(&dir.path().join("corpus")).unwrap());
    let sparse = SparseIndex::build(&corpus, Bm25Params::default(), Analyzer::default()).unwrap();
    let embedder = Arc::new(HashEmbedder::default());
    let dense = build_dense_index(&corpus, embedder.as_ref(), HnswParams::default()).unwrap();
    let fresh = Pipeline::new(corpus, Arc::new(LexicalReranker), Arc::new(ExtractiveGenerator::default()))
        .with_sparse(Arc::new(sparse))
        .with_dense(Arc::new(dense), embedder)
        .unwrap();

    let inputs = [
        TaskInput::SlotFilling {
            head: "Elizabeth Cromwell".into(),
            relation: "spouse".into(),
        },
        TaskInput::FactChecking {
            claim: "Slovenia uses the euro.".into(),
        },
        TaskInput::QuestionAnswering {
            question: "Who directed Bram Stoker's Dracula?".into(),
        },
        TaskInput::Dialog {
            turns: vec![
                "Those sound wonderful.".into(),
                "Iceland is sparsely populated.".into(),
                "What other countries are around it?".into(),
            ],
        },
    ];
    for input in &inputs {
        assert_eq!(from_disk.run_input(input).unwrap(), fresh.run_input(input).unwrap());
    }
    assert_eq!(from_disk.run_input(&inputs[0]).unwrap().best_answer(), "Oliver Cromwell");
    assert_eq!(from_disk.run_input(&inputs[1]).unwrap().best_answer(), "SUPPORTS");
}

#[test]
fn dense_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    build_all(dir.path());
    let (index, spec) = open_dense_dir(&dir.path().join("dense")).unwrap();
    let embedder = spec.build(Duration::from_secs(1), 0).unwrap();
    assert_eq!(embedder.dim(), index.dim());
    let q = embedder.embed("Slovenia euro").unwrap();
    let hits = index.search(&q, 3, 16).unwrap();
    assert!(hits.iter().any(|h| h.pid.starts_with("Slovenia::")));
}

#[test]
fn predictions_score_against_gold() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = build_all(dir.path());
    let result = pipeline
        .run(TaskKind::SlotFilling, "Elizabeth Cromwell [SEP] spouse")
        .unwrap();
    let pred = result.to_prediction("q1", pipeline.corpus());
    let gold = KiltRecord {
        id: "q1".into(),
        input: None,
        output: vec![OutputEntry {
            answer: Some("Oliver Cromwell".into()),
            provenance: vec![ProvenanceRef {
                wikipedia_id: "Oliver_Cromwell".into(),
                title: None,
                pid: None,
            }],
        }],
    };
    let report = evaluate_records(&[gold], &[pred], RecallMode::Fraction).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.r_precision, 1.0);
    assert_eq!(report.kilt_ac, 1.0);
}

#[test]
fn corrupt_dense_index_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    build_all(dir.path());
    let path = dir.path().join("dense").join("dense.hnsw");
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&path, bytes).unwrap();
    assert!(open_dense_dir(&dir.path().join("dense")).is_err());
}
