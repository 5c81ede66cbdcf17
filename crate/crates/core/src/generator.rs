//! Conditioned generation from a query plus ranked evidence.

use std::collections::HashSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusStore;
use crate::error::{KgiError, Result};
use crate::remote::RemoteClient;
use crate::rerank::RankedEvidence;
use crate::sparse::{is_stopword, tokenize};
use crate::tasks::TaskKind;

pub const SUPPORTS: &str = "SUPPORTS";
pub const REFUTES: &str = "REFUTES";
pub const FACT_LABELS: [&str; 2] = [SUPPORTS, REFUTES];

/// Blank line between the query and the evidence blocks.
pub const CONTEXT_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBlock {
    pub pid: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedInput {
    pub query_text: String,
    /// In rerank order.
    pub evidence: Vec<EvidenceBlock>,
    pub task: TaskKind,
    pub closed_book: bool,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl ConditionedInput {
    /// `query`, a blank line, then one `title : text` line per passage in rank order.
    pub fn serialize(&self) -> String {
        let mut out = self.query_text.clone();
        if self.evidence.is_empty() {
            return out;
        }
        out.push_str(CONTEXT_SEPARATOR);
        let blocks: Vec<String> = self
            .evidence
            .iter()
            .map(|e| format!("{} : {}", one_line(&e.title), one_line(&e.text)))
            .collect();
        out.push_str(&blocks.join("\n"));
        out
    }

    pub fn evidence_pids(&self) -> Vec<String> {
        self.evidence.iter().map(|e| e.pid.clone()).collect()
    }
}

pub fn format_context(
    query: &str,
    evidence: &[RankedEvidence],
    corpus: &CorpusStore,
    task: TaskKind,
) -> Result<ConditionedInput> {
    if query.trim().is_empty() {
        return Err(KgiError::validation("query", "must be non-empty"));
    }
    let mut ordered: Vec<&RankedEvidence> = evidence.iter().collect();
    ordered.sort_by_key(|e| e.final_rank);
    let blocks = ordered
        .into_iter()
        .map(|e| {
            let p = corpus.get_passage(&e.pid)?;
            Ok(EvidenceBlock {
                pid: p.pid.clone(),
                title: p.title.clone(),
                text: p.text.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if blocks.is_empty() {
        tracing::warn!(%query, "no evidence; generating closed-book");
    }
    Ok(ConditionedInput {
        query_text: query.to_string(),
        closed_book: blocks.is_empty(),
        evidence: blocks,
        task,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedOutput {
    pub text: String,
    pub model_score: f64,
    pub evidence_pids: Vec<String>,
}

pub trait Generator: Send + Sync {
    /// Up to `n_best` outputs sorted by descending score.
    fn generate(&self, input: &ConditionedInput, n_best: usize) -> Result<Vec<GeneratedOutput>>;
}

fn sort_outputs(outputs: &mut [GeneratedOutput]) {
    outputs.sort_by(|a, b| b.model_score.total_cmp(&a.model_score));
}

/// Tuning for [`ExtractiveGenerator`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractiveParams {
    /// Longest answer span, in words.
    pub max_span_words: usize,
    /// Fraction of claim content tokens the top passage must contain for SUPPORTS.
    pub support_threshold: f64,
    /// Score multiplier for spans made only of capitalised or numeric words.
    pub entity_bonus: f64,
}

impl Default for ExtractiveParams {
    fn default() -> Self {
        ExtractiveParams {
            max_span_words: 5,
            support_threshold: 0.5,
            entity_bonus: 1.5,
        }
    }
}

/// Deterministic stand-in for a trained generator so that the pipeline
/// runs offline.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractiveGenerator {
    pub params: ExtractiveParams,
}

impl Generator for ExtractiveGenerator {
    fn generate(&self, input: &ConditionedInput, n_best: usize) -> Result<Vec<GeneratedOutput>> {
        if n_best == 0 {
            return Err(KgiError::InvalidArgument("n_best must be >= 1".into()));
        }
        if input.evidence.is_empty() {
            return Ok(closed_book_output(input.task));
        }
        Ok(extractive_generate(&input.query_text, &input.evidence, input.task, n_best, self.params))
    }
}

fn closed_book_output(task: TaskKind) -> Vec<GeneratedOutput> {
    let text = if task == TaskKind::FactChecking { REFUTES } else { "" };
    vec![GeneratedOutput {
        text: text.to_string(),
        model_score: 0.0,
        evidence_pids: Vec::new(),
    }]
}

/// Query terms used for matching: slot-filling markers dropped, stopwords
/// dropped unless nothing else remains.
pub fn content_terms(query: &str) -> HashSet<String> {
    let tokens = tokenize(&query.replace("[SEP]", " "));
    let content: HashSet<String> = tokens.iter().filter(|t| !is_stopword(t)).cloned().collect();
    if content.is_empty() {
        tokens.into_iter().collect()
    } else {
        content
    }
}

/// A whitespace word of a passage.
#[derive(Debug, Clone)]
pub struct Word<'a> {
    pub surface: &'a str,
    pub keys: Vec<String>,
    /// Starts with an uppercase letter or a digit.
    pub entity_like: bool,
    /// Followed by a phrase boundary (sentence punctuation, or a comma not followed by a number).
    pub ends_phrase: bool,
    /// Index of the sentence the word belongs to.
    pub sentence: usize,
}

impl Word<'_> {
    fn is_filler(&self) -> bool {
        self.keys.is_empty() || self.keys.iter().all(|k| is_stopword(k))
    }
}

pub fn words(text: &str) -> Vec<Word<'_>> {
    let raw: Vec<&str> = text.split_whitespace().collect();
    let mut sentence = 0;
    raw.iter()
        .enumerate()
        .map(|(i, w)| {
            let current = sentence;
            if w.ends_with(['.', '!', '?']) {
                sentence += 1;
            }
            let first = w.chars().find(|c| c.is_alphanumeric());
            let last = w.chars().last().unwrap_or(' ');
            let next_numeric = raw
                .get(i + 1)
                .and_then(|n| n.chars().next())
                .is_some_and(|c| c.is_ascii_digit());
            let ends_phrase = matches!(last, '.' | '!' | '?' | ';' | ':' | ')' | '"')
                || (last == ',' && !next_numeric);
            Word {
                surface: w,
                keys: tokenize(w),
                entity_like: first.is_some_and(|c| c.is_uppercase() || c.is_ascii_digit()),
                ends_phrase,
                sentence: current,
            }
        })
        .collect()
}

fn span_text(words: &[Word<'_>]) -> String {
    let joined = words.iter().map(|w| w.surface).collect::<Vec<_>>().join(" ");
    joined
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_string()
}

/// Candidate span `[start, end]` (inclusive) of a passage with its score.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanCandidate {
    pub passage: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub score: f64,
}

/// Whether `[start, end]` may be returned as an answer: it must not start or
/// end on filler, must stay within one sentence, must add at least one
/// content word absent from the query, and must not cut through a run of
/// capitalised words.
pub fn span_is_eligible(ws: &[Word<'_>], start: usize, end: usize, query: &HashSet<String>) -> bool {
    if ws[start].is_filler() || ws[end].is_filler() || ws[start].sentence != ws[end].sentence {
        return false;
    }
    let novel = ws[start..=end]
        .iter()
        .flat_map(|w| &w.keys)
        .any(|k| !query.contains(k) && !is_stopword(k));
    if !novel {
        return false;
    }
    let joined = |a: &Word<'_>, b: &Word<'_>| a.entity_like && b.entity_like && !a.ends_phrase;
    if start > 0 && joined(&ws[start - 1], &ws[start]) {
        return false;
    }
    if end + 1 < ws.len() && joined(&ws[end], &ws[end + 1]) {
        return false;
    }
    true
}

/// Sum of `1 / distance` over query-term occurrences outside the span in
/// the same sentence, boosted when the span looks like a named entity or number.
pub fn span_score(ws: &[Word<'_>], start: usize, end: usize, query: &HashSet<String>, params: ExtractiveParams) -> f64 {
    let mut score = 0.0;
    for (i, w) in ws.iter().enumerate() {
        if (start..=end).contains(&i) || w.sentence != ws[start].sentence || !w.keys.iter().any(|k| query.contains(k)) {
            continue;
        }
        let d = if i < start { start - i } else { i - end };
        score += 1.0 / d as f64;
    }
    if ws[start..=end].iter().all(|w| w.entity_like) {
        score *= params.entity_bonus;
    }
    score
}

fn best_spans(query: &str, evidence: &[EvidenceBlock], params: ExtractiveParams) -> Vec<SpanCandidate> {
    let q = content_terms(query);
    let mut cands = Vec::new();
    for (pi, block) in evidence.iter().enumerate() {
        let ws = words(&block.text);
        for start in 0..ws.len() {
            for end in start..ws.len().min(start + params.max_span_words) {
                if !span_is_eligible(&ws, start, end, &q) {
                    continue;
                }
                let score = span_score(&ws, start, end, &q, params);
                if score > 0.0 {
                    cands.push(SpanCandidate {
                        passage: pi,
                        start,
                        end,
                        text: span_text(&ws[start..=end]),
                        score,
                    });
                }
            }
        }
    }
    cands.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.passage.cmp(&b.passage))
            .then(a.start.cmp(&b.start))
            .then(b.end.cmp(&a.end))
    });
    cands
}

fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    for (j, &(i, c)) in bytes.iter().enumerate() {
        let at_break = matches!(c, '.' | '!' | '?') && bytes.get(j + 1).is_none_or(|&(_, n)| n.is_whitespace());
        if at_break {
            let s = text[start..i + c.len_utf8()].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + c.len_utf8();
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Fraction of the claim's content tokens found in `passage`.
pub fn claim_overlap(claim: &str, passage: &str) -> f64 {
    let claim_terms = content_terms(claim);
    if claim_terms.is_empty() {
        return 0.0;
    }
    let passage_terms: HashSet<String> = tokenize(passage).into_iter().collect();
    claim_terms.iter().filter(|t| passage_terms.contains(*t)).count() as f64 / claim_terms.len() as f64
}

/// Offline generation.
///
/// * Question answering and slot filling: the best-scoring spans of at most
///   `max_span_words` words near query-term matches, across all evidence.
/// * Fact checking: SUPPORTS when the top passage covers at least
///   `support_threshold` of the claim's content tokens, else REFUTES.
/// * Dialog: the top passage's sentences ranked by query-term overlap.
pub fn extractive_generate(
    query: &str,
    evidence: &[EvidenceBlock],
    task: TaskKind,
    n_best: usize,
    params: ExtractiveParams,
) -> Vec<GeneratedOutput> {
    let Some(top) = evidence.first() else {
        return closed_book_output(task);
    };
    let mut outputs = match task {
        TaskKind::FactChecking => {
            let overlap = claim_overlap(query, &top.text);
            let (first, second) = if overlap >= params.support_threshold {
                ((SUPPORTS, overlap), (REFUTES, 1.0 - overlap))
            } else {
                ((REFUTES, 1.0 - overlap), (SUPPORTS, overlap))
            };
            [first, second]
                .into_iter()
                .map(|(label, score)| GeneratedOutput {
                    text: label.to_string(),
                    model_score: score,
                    evidence_pids: vec![top.pid.clone()],
                })
                .collect()
        }
        TaskKind::Dialog => {
            let q = content_terms(query);
            let mut scored: Vec<(usize, &str, usize)> = sentences(&top.text)
                .into_iter()
                .enumerate()
                .map(|(i, s)| {
                    let terms: HashSet<String> = tokenize(s).into_iter().collect();
                    (i, s, terms.intersection(&q).count())
                })
                .collect();
            scored.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)));
            if scored.is_empty() {
                scored.push((0, top.text.trim(), 0));
            }
            scored
                .into_iter()
                .map(|(_, s, overlap)| GeneratedOutput {
                    text: s.to_string(),
                    model_score: overlap as f64,
                    evidence_pids: vec![top.pid.clone()],
                })
                .collect()
        }
        TaskKind::QuestionAnswering | TaskKind::SlotFilling => {
            let mut seen = HashSet::new();
            let mut outs: Vec<GeneratedOutput> = best_spans(query, evidence, params)
                .into_iter()
                .filter(|c| seen.insert(c.text.to_lowercase()))
                .map(|c| GeneratedOutput {
                    text: c.text,
                    model_score: c.score,
                    evidence_pids: vec![evidence[c.passage].pid.clone()],
                })
                .collect();
            if outs.is_empty() {
                let ws = words(&top.text);
                let n = ws.len().min(params.max_span_words);
                outs.push(GeneratedOutput {
                    text: span_text(&ws[..n]),
                    model_score: 0.0,
                    evidence_pids: vec![top.pid.clone()],
                });
            }
            outs
        }
    };
    sort_outputs(&mut outputs);
    outputs.truncate(n_best);
    outputs
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    task: TaskKind,
    context: String,
    n_best: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    constrained_vocab: Option<&'a [&'a str]>,
}

#[derive(Deserialize)]
struct RemoteOutput {
    text: String,
    score: f64,
}

#[derive(Deserialize)]
struct GenerateResponse {
    outputs: Vec<RemoteOutput>,
}

/// Client for a generation server speaking
/// `{task, context, n_best, constrained_vocab?} -> {outputs:[{text, score}]}`.
/// The server receives the already-serialized context.
#[derive(Debug, Clone)]
pub struct RemoteGenerator {
    client: RemoteClient,
}

impl RemoteGenerator {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: u32) -> Result<Self> {
        Ok(RemoteGenerator {
            client: RemoteClient::new(endpoint, timeout, retries)?,
        })
    }
}

impl Generator for RemoteGenerator {
    fn generate(&self, input: &ConditionedInput, n_best: usize) -> Result<Vec<GeneratedOutput>> {
        if n_best == 0 {
            return Err(KgiError::InvalidArgument("n_best must be >= 1".into()));
        }
        let constrained = input.task == TaskKind::FactChecking;
        let request = GenerateRequest {
            task: input.task,
            context: input.serialize(),
            n_best,
            constrained_vocab: constrained.then_some(&FACT_LABELS[..]),
        };
        let response: GenerateResponse = self.client.post_json(&request)?;
        let pids = input.evidence_pids();
        let mut outputs = Vec::with_capacity(response.outputs.len());
        for o in response.outputs {
            if constrained && !FACT_LABELS.contains(&o.text.as_str()) {
                return Err(KgiError::Internal(format!(
                    "constrained decoding produced `{}` outside {FACT_LABELS:?}",
                    o.text
                )));
            }
            outputs.push(GeneratedOutput {
                text: o.text,
                model_score: o.score,
                evidence_pids: pids.clone(),
            });
        }
        if outputs.is_empty() {
            return Err(KgiError::Internal("generator returned no outputs".into()));
        }
        sort_outputs(&mut outputs);
        outputs.truncate(n_best);
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ChunkParams, SourceDocument};
    use proptest::prelude::*;

    fn block(pid: &str, text: &str) -> EvidenceBlock {
        EvidenceBlock {
            pid: pid.into(),
            title: String::new(),
            text: text.into(),
        }
    }

    fn generate(query: &str, evidence: &[EvidenceBlock], task: TaskKind, n: usize) -> Vec<GeneratedOutput> {
        extractive_generate(query, evidence, task, n, ExtractiveParams::default())
    }

    /// Brute-force reference: enumerate every span of up to five words in
    /// every passage, score it directly from the distance definition, and
    /// keep the best (earliest on ties).
    fn oracle_best(query: &str, evidence: &[EvidenceBlock]) -> String {
        let q = content_terms(query);
        let mut best: Option<(f64, String)> = None;
        for b in evidence {
            let raw: Vec<&str> = b.text.split_whitespace().collect();
            let ws = words(&b.text);
            let sent: Vec<usize> = raw
                .iter()
                .scan(0, |n, w| {
                    let id = *n;
                    *n += usize::from(w.ends_with('.') || w.ends_with('!') || w.ends_with('?'));
                    Some(id)
                })
                .collect();
            for s in 0..raw.len() {
                for e in s..raw.len().min(s + 5) {
                    if !span_is_eligible(&ws, s, e, &q) {
                        continue;
                    }
                    let mut score = 0.0;
                    for (i, w) in raw.iter().enumerate() {
                        let hit = tokenize(w).iter().any(|k| q.contains(k));
                        if hit && (i < s || i > e) && sent[i] == sent[s] {
                            score += 1.0 / (if i < s { s - i } else { i - e }) as f64;
                        }
                    }
                    let entity = raw[s..=e].iter().all(|w| {
                        w.chars()
                            .find(|c| c.is_alphanumeric())
                            .is_some_and(|c| c.is_uppercase() || c.is_ascii_digit())
                    });
                    if entity {
                        score *= 1.5;
                    }
                    let text = raw[s..=e].join(" ").trim_matches(|c: char| !c.is_alphanumeric()).to_string();
                    if score > 0.0 && best.as_ref().is_none_or(|(bs, _)| score > *bs) {
                        best = Some((score, text));
                    }
                }
            }
        }
        best.map(|b| b.1).unwrap_or_default()
    }

    #[test]
    fn capital_of_france() {
        let ev = [block("p", "In Europe, Paris is the capital of France and its largest city.")];
        let out = generate("capital of France", &ev, TaskKind::QuestionAnswering, 3);
        assert!(out[0].text.contains("Paris"), "{out:?}");
        assert_eq!(out[0].text, oracle_best("capital of France", &ev));
    }

    #[test]
    fn slot_filling_tail_entity() {
        let ev = [block("p", "Oliver Cromwell was the spouse of Elizabeth Cromwell.")];
        let out = generate("Elizabeth Cromwell [SEP] spouse", &ev, TaskKind::SlotFilling, 1);
        assert_eq!(out[0].text, "Oliver Cromwell");
        assert_eq!(out[0].evidence_pids, ["p"]);
    }

    #[test]
    fn dates_stay_whole() {
        let ev = [block("p", "Facebook was launched on February 4, 2004. It grew quickly.")];
        let out = generate("when was facebook launched", &ev, TaskKind::QuestionAnswering, 1);
        assert_eq!(out[0].text, "February 4, 2004");
    }

    #[test]
    fn extraction_follows_matching_passage() {
        let ev = [
            block("p1", "Bananas are yellow fruit grown in the tropics."),
            block("p2", "The Eiffel Tower stands in Paris, designed by Gustave Eiffel."),
        ];
        let out = generate("who designed the tower", &ev, TaskKind::QuestionAnswering, 1);
        assert_eq!(out[0].evidence_pids, ["p2"]);
        assert_eq!(out[0].text, oracle_best("who designed the tower", &ev));
    }

    #[test]
    fn fact_check_labels() {
        let claim = "Slovenia uses the euro.";
        let out = generate(claim, &[block("p", claim)], TaskKind::FactChecking, 1);
        assert_eq!(out[0].text, SUPPORTS);
        let out = generate(claim, &[block("p", "Cats are mammals.")], TaskKind::FactChecking, 2);
        assert_eq!(out[0].text, REFUTES);
        assert_eq!(out[1].text, SUPPORTS);
    }

    #[test]
    fn n_best_contract() {
        let ev = [block(
            "p",
            "Ada Lovelace wrote notes on the Analytical Engine with Charles Babbage in London during 1843.",
        )];
        let out = generate("who wrote notes on the engine", &ev, TaskKind::QuestionAnswering, 3);
        assert_eq!(out.len(), 3);
        assert!(out.windows(2).all(|w| w[0].model_score >= w[1].model_score));
    }

    #[test]
    fn dialog_picks_best_sentence() {
        let ev = [block(
            "p",
            "Iceland is an island. Denmark, Finland, Norway and Sweden are Nordic countries near Iceland! It is cold.",
        )];
        let out = generate("What other Nordic countries are near Iceland?", &ev, TaskKind::Dialog, 1);
        assert!(out[0].text.starts_with("Denmark"), "{out:?}");
    }

    #[test]
    fn closed_book() {
        let input = ConditionedInput {
            query_text: "q".into(),
            evidence: vec![],
            task: TaskKind::FactChecking,
            closed_book: true,
        };
        let out = ExtractiveGenerator::default().generate(&input, 1).unwrap();
        assert_eq!(out[0].text, REFUTES);
        assert!(out[0].evidence_pids.is_empty());
    }

    #[test]
    fn context_serialization() {
        let docs = [
            SourceDocument::new("Elizabeth_Cromwell", "Elizabeth Cromwell", "Elizabeth Cromwell was the wife of Oliver Cromwell."),
            SourceDocument::new("Other", "Other", "Unrelated text."),
        ];
        let corpus = CorpusStore::from_documents(&docs, ChunkParams::default()).unwrap();
        let ev = vec![
            RankedEvidence {
                pid: "Other::0".into(),
                rerank_score: 0.1,
                final_rank: 2,
            },
            RankedEvidence {
                pid: "Elizabeth_Cromwell::0".into(),
                rerank_score: 0.9,
                final_rank: 1,
            },
        ];
        let input = format_context("Elizabeth Cromwell [SEP] spouse", &ev, &corpus, TaskKind::SlotFilling).unwrap();
        assert_eq!(input.evidence_pids(), ["Elizabeth_Cromwell::0", "Other::0"]);
        assert_eq!(
            input.serialize(),
            "Elizabeth Cromwell [SEP] spouse\n\n\
             Elizabeth Cromwell : Elizabeth Cromwell was the wife of Oliver Cromwell.\n\
             Other : Unrelated text."
        );

        let empty = format_context("q", &[], &corpus, TaskKind::QuestionAnswering).unwrap();
        assert!(empty.closed_book && empty.evidence.is_empty());
        assert!(format_context("  ", &[], &corpus, TaskKind::QuestionAnswering).is_err());
    }

    proptest! {
        #[test]
        fn fact_check_is_closed(claim in "\\PC{0,60}", passage in "\\PC{0,120}", n in 1usize..4) {
            let out = generate(&claim, &[block("p", &passage)], TaskKind::FactChecking, n);
            prop_assert!(!out.is_empty());
            prop_assert!(out.iter().all(|o| FACT_LABELS.contains(&o.text.as_str())));
        }

        #[test]
        fn extractive_is_deterministic_and_attributed(query in "[a-zA-Z ]{1,30}", text in "[a-zA-Z ,.]{1,200}") {
            let ev = [block("p1", &text), block("p2", "Some Other Passage about things.")];
            for task in [TaskKind::QuestionAnswering, TaskKind::SlotFilling, TaskKind::Dialog, TaskKind::FactChecking] {
                let a = generate(&query, &ev, task, 3);
                prop_assert_eq!(&a, &generate(&query, &ev, task, 3));
                for o in &a {
                    prop_assert!(o.evidence_pids.iter().all(|p| p == "p1" || p == "p2"));
                }
            }
        }
    }
}
