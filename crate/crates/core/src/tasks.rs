//! Task adapters and the retrieve, rerank, generate pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{doc_id_of, CorpusStore};
use crate::dense::{DenseIndex, Embedder};
use crate::error::{KgiError, Result};
use crate::generator::{format_context, GeneratedOutput, Generator, SUPPORTS};
use crate::metrics::{KiltRecord, OutputEntry, ProvenanceRef};
use crate::rerank::{merge_candidates, rerank, RankedEvidence, Reranker, ScoredCandidate};
use crate::sparse::SparseIndex;

/// Separator between head entity and relation in slot-filling queries.
pub const SLOT_SEPARATOR: &str = " [SEP] ";
/// Separator between dialog turns.
pub const TURN_SEPARATOR: &str = " * ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SlotFilling,
    FactChecking,
    Dialog,
    QuestionAnswering,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::SlotFilling,
        TaskKind::FactChecking,
        TaskKind::Dialog,
        TaskKind::QuestionAnswering,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::SlotFilling => "slot_filling",
            TaskKind::FactChecking => "fact_checking",
            TaskKind::Dialog => "dialog",
            TaskKind::QuestionAnswering => "question_answering",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Raw fields of one task instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskInput {
    SlotFilling { head: String, relation: String },
    FactChecking { claim: String },
    QuestionAnswering { question: String },
    #[serde(alias = "dialog_oneshot")]
    Dialog { turns: Vec<String> },
}

impl TaskInput {
    pub fn task(&self) -> TaskKind {
        match self {
            TaskInput::SlotFilling { .. } => TaskKind::SlotFilling,
            TaskInput::FactChecking { .. } => TaskKind::FactChecking,
            TaskInput::QuestionAnswering { .. } => TaskKind::QuestionAnswering,
            TaskInput::Dialog { .. } => TaskKind::Dialog,
        }
    }
}

fn require(field: &str, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        return Err(KgiError::validation(field, "missing or empty"));
    }
    Ok(())
}

/// Serializes task fields into the query text each task model expects:
/// `head [SEP] relation`, the claim or question verbatim, or the dialog
/// turns joined by ` * ` oldest first.
pub fn format_task_input(input: &TaskInput) -> Result<String> {
    match input {
        TaskInput::SlotFilling { head, relation } => {
            require("head", head)?;
            require("relation", relation)?;
            for (field, v) in [("head", head), ("relation", relation)] {
                if v.contains(SLOT_SEPARATOR.trim()) {
                    return Err(KgiError::validation(field, "must not contain the [SEP] marker"));
                }
            }
            Ok(format!("{head}{SLOT_SEPARATOR}{relation}"))
        }
        TaskInput::FactChecking { claim } => {
            require("claim", claim)?;
            Ok(claim.clone())
        }
        TaskInput::QuestionAnswering { question } => {
            require("question", question)?;
            Ok(question.clone())
        }
        TaskInput::Dialog { turns } => {
            if turns.is_empty() {
                return Err(KgiError::validation("turns", "at least one turn is required"));
            }
            for (i, t) in turns.iter().enumerate() {
                require(&format!("turns[{i}]"), t)?;
                if t.contains(TURN_SEPARATOR) {
                    return Err(KgiError::validation(format!("turns[{i}]"), "must not contain ` * `"));
                }
            }
            Ok(turns.join(TURN_SEPARATOR))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Candidates taken from BM25.
    pub n_sparse: usize,
    /// Candidates taken from the dense index.
    pub n_dense: usize,
    /// Merged candidates passed to the reranker.
    pub n_total: usize,
    /// Evidence passages kept after reranking.
    pub k: usize,
    pub ef_search: usize,
    pub n_best: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_sparse: 12,
            n_dense: 12,
            n_total: 24,
            k: 5,
            ef_search: 128,
            n_best: 1,
        }
    }
}

impl PipelineConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_sparse", self.n_sparse),
            ("n_dense", self.n_dense),
            ("n_total", self.n_total),
            ("k", self.k),
            ("n_best", self.n_best),
        ] {
            if v == 0 {
                return Err(KgiError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: TaskKind,
    pub query_text: String,
    pub outputs: Vec<GeneratedOutput>,
    pub evidence: Vec<RankedEvidence>,
    /// Merged retriever candidates, in merge order, as handed to the reranker.
    pub candidates: Vec<ScoredCandidate>,
    pub closed_book: bool,
}

impl TaskResult {
    pub fn best_answer(&self) -> &str {
        self.outputs.first().map_or("", |o| o.text.as_str())
    }

    /// Distinct document ids of the evidence, in rank order.
    pub fn evidence_doc_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.evidence
            .iter()
            .map(|e| doc_id_of(&e.pid).to_string())
            .filter(|d| seen.insert(d.clone()))
            .collect()
    }

    /// KILT prediction record: best answer plus ranked document provenance.
    pub fn to_prediction(&self, id: impl Into<String>, corpus: &CorpusStore) -> KiltRecord {
        let provenance = self
            .evidence
            .iter()
            .map(|e| ProvenanceRef {
                wikipedia_id: doc_id_of(&e.pid).to_string(),
                title: corpus.get_passage(&e.pid).ok().map(|p| p.title.clone()),
                pid: Some(e.pid.clone()),
            })
            .collect();
        KiltRecord {
            id: id.into(),
            input: Some(self.query_text.clone()),
            output: vec![OutputEntry {
                answer: Some(self.best_answer().to_string()),
                provenance,
            }],
        }
    }
}

/// Shared, read-only retrieval and generation stack.
#[derive(Clone)]
pub struct Pipeline {
    corpus: Arc<CorpusStore>,
    sparse: Option<Arc<SparseIndex>>,
    dense: Option<(Arc<DenseIndex>, Arc<dyn Embedder>)>,
    reranker: Arc<dyn Reranker>,
    generator: Arc<dyn Generator>,
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(corpus: Arc<CorpusStore>, reranker: Arc<dyn Reranker>, generator: Arc<dyn Generator>) -> Self {
        Pipeline {
            corpus,
            sparse: None,
            dense: None,
            reranker,
            generator,
            config: PipelineConfig::default(),
        }
    }

    pub fn with_sparse(mut self, index: Arc<SparseIndex>) -> Self {
        self.sparse = Some(index);
        self
    }

    pub fn with_dense(mut self, index: Arc<DenseIndex>, embedder: Arc<dyn Embedder>) -> Result<Self> {
        if index.dim() != embedder.dim() {
            return Err(KgiError::Config(format!(
                "dense index has dimension {} but the embedder produces {}",
                index.dim(),
                embedder.dim()
            )));
        }
        self.dense = Some((index, embedder));
        Ok(self)
    }

    pub fn with_config(mut self, config: PipelineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_generator(mut self, generator: Arc<dyn Generator>) -> Self {
        self.generator = generator;
        self
    }

    pub fn has_sparse(&self) -> bool {
        self.sparse.is_some()
    }

    pub fn has_dense(&self) -> bool {
        self.dense.is_some()
    }

    pub fn config(&self) -> PipelineConfig {
        self.config
    }

    pub fn corpus(&self) -> &CorpusStore {
        &self.corpus
    }

    fn retrieve(&self, query: &str) -> Result<Vec<ScoredCandidate>> {
        let sparse = match &self.sparse {
            Some(index) => index.search(query, self.config.n_sparse)?,
            None => Vec::new(),
        };
        let dense = match &self.dense {
            Some((index, embedder)) => match embedder.embed(query) {
                Ok(v) => index.search(&v, self.config.n_dense, self.config.ef_search.max(self.config.n_dense))?,
                // A query with no embeddable tokens simply has no dense neighbours.
                Err(KgiError::InvalidArgument(_)) => Vec::new(),
                Err(e) => return Err(e),
            },
            None => Vec::new(),
        };
        Ok(merge_candidates(&sparse, &dense, self.config.n_total))
    }

    /// Runs retrieval, fusion, reranking and generation for one query.
    /// When generation fails the retrieved evidence travels in the error.
    pub fn run(&self, task: TaskKind, query_text: &str) -> Result<TaskResult> {
        self.config.validate()?;
        if self.sparse.is_none() && self.dense.is_none() {
            return Err(KgiError::Config("no sparse or dense index configured".into()));
        }
        if query_text.trim().is_empty() {
            return Err(KgiError::validation("query", "must be non-empty"));
        }
        let candidates = self.retrieve(query_text)?;
        let evidence = rerank(query_text, &candidates, &self.corpus, self.reranker.as_ref(), self.config.k)?;
        let conditioned = format_context(query_text, &evidence, &self.corpus, task)?;
        let outputs = match self.generator.generate(&conditioned, self.config.n_best) {
            Ok(o) if !o.is_empty() => o,
            Ok(_) => {
                return Err(KgiError::GenerationFailed {
                    message: "generator returned no outputs".into(),
                    evidence,
                    source: None,
                })
            }
            Err(e) => {
                return Err(KgiError::GenerationFailed {
                    message: e.to_string(),
                    evidence,
                    source: Some(Box::new(e)),
                })
            }
        };
        Ok(TaskResult {
            task,
            query_text: query_text.to_string(),
            outputs,
            closed_book: conditioned.closed_book,
            evidence,
            candidates,
        })
    }

    pub fn run_input(&self, input: &TaskInput) -> Result<TaskResult> {
        self.run(input.task(), &format_task_input(input)?)
    }
}

/// Lowercase, strip punctuation, collapse whitespace.
pub fn normalize_for_agreement(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossExamReport {
    pub results: BTreeMap<TaskKind, TaskResult>,
    pub answer_agreement: bool,
    pub evidence_overlap: f64,
}

/// Answers agree when every slot-filling and QA answer normalizes to the
/// same string and every fact-check verdict is SUPPORTS. Dialog output is
/// free text and does not take part.
pub fn answers_agree(results: &BTreeMap<TaskKind, TaskResult>) -> bool {
    let mut answers = results
        .iter()
        .filter(|(t, _)| matches!(t, TaskKind::SlotFilling | TaskKind::QuestionAnswering))
        .map(|(_, r)| normalize_for_agreement(r.best_answer()));
    let first = answers.next();
    let extractive_agree = match &first {
        Some(a) => !a.is_empty() && answers.all(|b| &b == a),
        None => true,
    };
    let facts_agree = results
        .get(&TaskKind::FactChecking)
        .is_none_or(|r| r.best_answer() == SUPPORTS);
    extractive_agree && facts_agree
}

/// |intersection| / |union| of the evidence document sets; 0 when no task returned evidence.
pub fn evidence_overlap(results: &BTreeMap<TaskKind, TaskResult>) -> f64 {
    let sets: Vec<BTreeSet<String>> = results
        .values()
        .map(|r| r.evidence_doc_ids().into_iter().collect())
        .collect();
    let union: BTreeSet<&String> = sets.iter().flatten().collect();
    if union.is_empty() {
        return 0.0;
    }
    let inter = union.iter().filter(|d| sets.iter().all(|s| s.contains(**d))).count();
    inter as f64 / union.len() as f64
}

/// Runs one formulation of the same information need per task, concurrently,
/// and compares answers and evidence. The fact-check claim, if any, is
/// expected to state the common answer.
pub fn cross_examine(pipeline: &Pipeline, formulations: &[TaskInput]) -> Result<CrossExamReport> {
    if formulations.len() < 2 {
        return Err(KgiError::validation("formulations", "at least two task formulations are required"));
    }
    let mut seen = BTreeSet::new();
    for f in formulations {
        if !seen.insert(f.task()) {
            return Err(KgiError::validation("formulations", format!("task `{}` given more than once", f.task())));
        }
        format_task_input(f)?;
    }
    let runs: Vec<Result<TaskResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = formulations
            .iter()
            .map(|f| scope.spawn(move || pipeline.run_input(f)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(KgiError::Internal("task worker panicked".into()))))
            .collect()
    });
    let mut results = BTreeMap::new();
    for r in runs {
        let r = r?;
        results.insert(r.task, r);
    }
    Ok(CrossExamReport {
        answer_agreement: answers_agree(&results),
        evidence_overlap: evidence_overlap(&results),
        results,
    })
}
