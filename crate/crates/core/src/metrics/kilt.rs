//! KILT line-delimited gold and prediction records.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KgiError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRef {
    #[serde(alias = "doc_id")]
    pub wikipedia_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pid: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutputEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<ProvenanceRef>,
}

/// One KILT record. Gold files list every acceptable answer and every
/// alternative provenance set as separate `output` entries; prediction
/// files carry a single entry whose provenance is ranked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KiltRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub output: Vec<OutputEntry>,
}

/// Gold answers and provenance sets of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldInstance {
    pub id: String,
    pub answers: Vec<String>,
    pub provenance_sets: Vec<Vec<String>>,
}

impl GoldInstance {
    pub fn from_record(record: &KiltRecord) -> Self {
        let answers = record.output.iter().filter_map(|o| o.answer.clone()).collect();
        let provenance_sets = record
            .output
            .iter()
            .filter(|o| !o.provenance.is_empty())
            .map(|o| {
                let mut seen = HashSet::new();
                o.provenance
                    .iter()
                    .filter(|p| seen.insert(p.wikipedia_id.clone()))
                    .map(|p| p.wikipedia_id.clone())
                    .collect()
            })
            .collect();
        GoldInstance {
            id: record.id.clone(),
            answers,
            provenance_sets,
        }
    }
}

/// Predicted answer and ranked document ids of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub answer: String,
    /// Distinct document ids in rank order.
    pub retrieved: Vec<String>,
}

impl Prediction {
    pub fn from_record(record: &KiltRecord) -> Self {
        let first = record.output.first();
        let mut seen = HashSet::new();
        Prediction {
            id: record.id.clone(),
            answer: first.and_then(|o| o.answer.clone()).unwrap_or_default(),
            retrieved: first
                .map(|o| {
                    o.provenance
                        .iter()
                        .filter(|p| seen.insert(p.wikipedia_id.clone()))
                        .map(|p| p.wikipedia_id.clone())
                        .collect()
                })
                .unwrap_or_default(),
        }
    }
}

pub fn read_records(path: &Path) -> Result<Vec<KiltRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: KiltRecord = serde_json::from_str(&line).map_err(|e| KgiError::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gold_record_parsing() {
        let line = r#"{"id":"q1","input":"Elizabeth Cromwell [SEP] spouse","output":[
            {"answer":"Oliver Cromwell","provenance":[{"wikipedia_id":"100","title":"Oliver Cromwell"},{"wikipedia_id":"100"}]},
            {"answer":"Cromwell"},
            {"provenance":[{"doc_id":"200"}]}]}"#;
        let record: KiltRecord = serde_json::from_str(line).unwrap();
        let gold = GoldInstance::from_record(&record);
        assert_eq!(gold.answers, ["Oliver Cromwell", "Cromwell"]);
        assert_eq!(gold.provenance_sets, vec![vec!["100".to_string()], vec!["200".to_string()]]);
    }

    #[test]
    fn prediction_dedups_documents() {
        let line = r#"{"id":"q1","output":[{"answer":"x","provenance":[{"wikipedia_id":"a"},{"wikipedia_id":"b"},{"wikipedia_id":"a"}]}]}"#;
        let p = Prediction::from_record(&serde_json::from_str(line).unwrap());
        assert_eq!(p.retrieved, ["a", "b"]);
        assert_eq!(p.answer, "x");
    }
}
