//! KILT evaluation: page-level retrieval metrics, downstream answer
//! metrics, and the combined scores that only credit an answer when its
//! provenance was retrieved perfectly.

pub mod kilt;
pub mod report;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KgiError, Result};
pub use kilt::{GoldInstance, KiltRecord, OutputEntry, Prediction, ProvenanceRef};
pub use report::{parse_table, render_table, ReportRow};

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    strip_punctuation(&s.to_lowercase())
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lighter normalisation used for Rouge-L: lowercase and drop punctuation only.
pub fn normalize_for_rouge(s: &str) -> String {
    strip_punctuation(&s.to_lowercase())
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn strip_punctuation(s: &str) -> String {
    s.chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect()
}

/// Precision of the top-R documents against a gold set of size R, maximised
/// over the alternative gold sets.
pub fn r_precision(gold_sets: &[Vec<String>], retrieved: &[String]) -> f64 {
    gold_sets
        .iter()
        .filter(|g| !g.is_empty())
        .map(|gold| {
            let gold: HashSet<&str> = gold.iter().map(String::as_str).collect();
            let r = gold.len();
            let hits = retrieved.iter().take(r).filter(|d| gold.contains(d.as_str())).count();
            hits as f64 / r as f64
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// Fraction of the gold set found in the top five.
    #[default]
    Fraction,
    /// 1 if any gold document is in the top five.
    AnyHit,
}

pub fn recall_at_k(gold_sets: &[Vec<String>], retrieved: &[String], k: usize, mode: RecallMode) -> f64 {
    let top: HashSet<&str> = retrieved.iter().take(k).map(String::as_str).collect();
    gold_sets
        .iter()
        .filter(|g| !g.is_empty())
        .map(|gold| {
            let gold: HashSet<&str> = gold.iter().map(String::as_str).collect();
            let hits = gold.iter().filter(|d| top.contains(*d)).count();
            match mode {
                RecallMode::Fraction => hits as f64 / gold.len() as f64,
                RecallMode::AnyHit => (hits > 0) as u8 as f64,
            }
        })
        .fold(0.0, f64::max)
}

pub fn recall_at_5(gold_sets: &[Vec<String>], retrieved: &[String], mode: RecallMode) -> f64 {
    recall_at_k(gold_sets, retrieved, 5, mode)
}

pub fn exact_match(prediction: &str, answers: &[String]) -> f64 {
    let p = normalize_answer(prediction);
    answers.iter().any(|a| normalize_answer(a) == p) as u8 as f64
}

fn f1_single(prediction: &str, answer: &str) -> f64 {
    let p: Vec<String> = normalize_answer(prediction).split_whitespace().map(String::from).collect();
    let g: Vec<String> = normalize_answer(answer).split_whitespace().map(String::from).collect();
    if p.is_empty() || g.is_empty() {
        return (p == g) as u8 as f64;
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-bag F1 against the best-matching answer.
pub fn token_f1(prediction: &str, answers: &[String]) -> f64 {
    answers.iter().map(|a| f1_single(prediction, a)).fold(0.0, f64::max)
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_single(prediction: &str, answer: &str) -> f64 {
    let p_norm = normalize_for_rouge(prediction);
    let g_norm = normalize_for_rouge(answer);
    let p: Vec<&str> = p_norm.split_whitespace().collect();
    let g: Vec<&str> = g_norm.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &g);
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / p.len() as f64;
    let recall = lcs as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// LCS-based F-measure (beta = 1) against the best-matching answer.
pub fn rouge_l(prediction: &str, answers: &[String]) -> f64 {
    answers.iter().map(|a| rouge_single(prediction, a)).fold(0.0, f64::max)
}

/// Downstream credit survives only when R-Precision is exactly 1.
pub fn kilt_combine(downstream: f64, r_precision: f64) -> f64 {
    if r_precision == 1.0 {
        downstream
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub r_precision: f64,
    pub recall_at_5: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub rouge_l: f64,
    pub kilt_ac: f64,
    pub kilt_f1: f64,
    pub kilt_rl: f64,
}

pub fn score_instance(gold: &GoldInstance, prediction: &Prediction, mode: RecallMode) -> InstanceScores {
    let rp = r_precision(&gold.provenance_sets, &prediction.retrieved);
    let accuracy = exact_match(&prediction.answer, &gold.answers);
    let f1 = token_f1(&prediction.answer, &gold.answers);
    let rl = rouge_l(&prediction.answer, &gold.answers);
    InstanceScores {
        r_precision: rp,
        recall_at_5: recall_at_5(&gold.provenance_sets, &prediction.retrieved, mode),
        accuracy,
        f1,
        rouge_l: rl,
        kilt_ac: kilt_combine(accuracy, rp),
        kilt_f1: kilt_combine(f1, rp),
        kilt_rl: kilt_combine(rl, rp),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_precision: f64,
    pub recall_at_5: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub rouge_l: f64,
    pub kilt_ac: f64,
    pub kilt_f1: f64,
    pub kilt_rl: f64,
    pub n_instances: usize,
}

impl MetricsReport {
    pub fn aggregate(scores: &[InstanceScores]) -> Self {
        let n = scores.len();
        if n == 0 {
            return MetricsReport::default();
        }
        let mean = |f: fn(&InstanceScores) -> f64| scores.iter().map(f).sum::<f64>() / n as f64;
        MetricsReport {
            r_precision: mean(|s| s.r_precision),
            recall_at_5: mean(|s| s.recall_at_5),
            accuracy: mean(|s| s.accuracy),
            f1: mean(|s| s.f1),
            rouge_l: mean(|s| s.rouge_l),
            kilt_ac: mean(|s| s.kilt_ac),
            kilt_f1: mean(|s| s.kilt_f1),
            kilt_rl: mean(|s| s.kilt_rl),
            n_instances: n,
        }
    }
}

fn index_by_id<'a>(records: &'a [KiltRecord], what: &str) -> Result<HashMap<&'a str, &'a KiltRecord>> {
    let mut map = HashMap::with_capacity(records.len());
    for r in records {
        if map.insert(r.id.as_str(), r).is_some() {
            return Err(KgiError::InvalidArgument(format!("duplicate {what} id `{}`", r.id)));
        }
    }
    Ok(map)
}

/// Scores predictions against gold records, instance by instance in gold order.
pub fn evaluate_records(gold: &[KiltRecord], predictions: &[KiltRecord], mode: RecallMode) -> Result<MetricsReport> {
    let gold_ids = index_by_id(gold, "gold")?;
    let pred_ids = index_by_id(predictions, "prediction")?;
    let mut missing: Vec<String> = gold.iter().filter(|g| !pred_ids.contains_key(g.id.as_str())).map(|g| g.id.clone()).collect();
    let mut extra: Vec<String> = predictions
        .iter()
        .filter(|p| !gold_ids.contains_key(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        missing.sort();
        extra.sort();
        return Err(KgiError::IdMismatch { missing, extra });
    }
    let scores: Vec<InstanceScores> = gold
        .iter()
        .map(|g| {
            let p = Prediction::from_record(pred_ids[g.id.as_str()]);
            score_instance(&GoldInstance::from_record(g), &p, mode)
        })
        .collect();
    Ok(MetricsReport::aggregate(&scores))
}

pub fn evaluate_run(prediction_file: &Path, gold_file: &Path, mode: RecallMode) -> Result<MetricsReport> {
    let gold = kilt::read_records(gold_file)?;
    let predictions = kilt::read_records(prediction_file)?;
    evaluate_records(&gold, &predictions, mode)
}
