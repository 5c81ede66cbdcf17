//! Knowledge-source ingestion: documents are split into whitespace-token
//! windows ("passages") that become the unit of indexing and evidence.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KgiError, Result};

const PASSAGES_FILE: &str = "passages.jsonl";
const OFFSETS_FILE: &str = "offsets.json";
const STATS_FILE: &str = "stats.json";

/// Separates the document id from the chunk ordinal inside a pid.
pub const PID_SEPARATOR: &str = "::";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub title: String,
    pub body: String,
}

impl SourceDocument {
    pub fn new(doc_id: impl Into<String>, title: impl Into<String>, body: impl Into<String>) -> Self {
        SourceDocument {
            doc_id: doc_id.into(),
            title: title.into(),
            body: body.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub pid: String,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub token_count: usize,
}

impl Passage {
    /// Text handed to retrievers and rerankers: the title followed by the passage body.
    pub fn retrieval_text(&self) -> String {
        if self.title.is_empty() || self.text == self.title {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

/// Builds the pid of the `ordinal`-th chunk of `doc_id`.
pub fn make_pid(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}{PID_SEPARATOR}{ordinal}")
}

/// Recovers the document id from a pid produced by [`make_pid`].
pub fn doc_id_of(pid: &str) -> &str {
    match pid.rsplit_once(PID_SEPARATOR) {
        Some((doc, ord)) if !ord.is_empty() && ord.bytes().all(|b| b.is_ascii_digit()) => doc,
        _ => pid,
    }
}

/// Number of chunking tokens (whitespace-delimited words) in `text`.
pub fn chunk_token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkParams {
    pub max_tokens: usize,
    pub stride: usize,
}

impl Default for ChunkParams {
    fn default() -> Self {
        ChunkParams {
            max_tokens: 100,
            stride: 100,
        }
    }
}

impl ChunkParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(KgiError::InvalidArgument("max_tokens must be >= 1".into()));
        }
        if self.stride == 0 || self.stride > self.max_tokens {
            return Err(KgiError::InvalidArgument(format!(
                "stride must be in 1..={}, got {}",
                self.max_tokens, self.stride
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_documents: usize,
    pub n_passages: usize,
    pub mean_passage_tokens: f64,
}

/// Byte spans of the whitespace-delimited words of `text`.
fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Splits a document into windows of at most `max_tokens` words, starting a
/// new window every `stride` words. Each passage keeps the original
/// whitespace between its words.
pub fn chunk_document(doc: &SourceDocument, params: ChunkParams) -> Result<Vec<Passage>> {
    params.validate()?;
    if doc.doc_id.is_empty() {
        return Err(KgiError::validation("id", "document id must be non-empty"));
    }
    let spans = word_spans(&doc.body);
    if spans.is_empty() {
        let title = doc.title.trim();
        if title.is_empty() {
            return Err(KgiError::Unchunkable {
                doc_id: doc.doc_id.clone(),
            });
        }
        return Ok(vec![Passage {
            pid: make_pid(&doc.doc_id, 0),
            doc_id: doc.doc_id.clone(),
            title: doc.title.clone(),
            text: title.to_string(),
            token_count: chunk_token_count(title),
        }]);
    }

    let n = spans.len();
    let mut passages = Vec::with_capacity(n.div_ceil(params.stride));
    let mut start = 0;
    while start < n {
        let end = (start + params.max_tokens).min(n);
        let text = &doc.body[spans[start].0..spans[end - 1].1];
        passages.push(Passage {
            pid: make_pid(&doc.doc_id, passages.len()),
            doc_id: doc.doc_id.clone(),
            title: doc.title.clone(),
            text: text.to_string(),
            token_count: end - start,
        });
        start += params.stride;
    }
    Ok(passages)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RecordText {
    One(String),
    Paragraphs(Vec<String>),
}

#[derive(Deserialize)]
struct DocumentRecord {
    #[serde(alias = "wikipedia_id", alias = "doc_id")]
    id: serde_json::Value,
    #[serde(default, alias = "wikipedia_title")]
    title: String,
    #[serde(default)]
    text: Option<RecordText>,
}

fn parse_document_line(path: &Path, line_no: usize, line: &str) -> Result<SourceDocument> {
    let malformed = |reason: String| KgiError::MalformedRecord {
        path: path.to_path_buf(),
        line: line_no,
        reason,
    };
    let record: DocumentRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let doc_id = match record.id {
        serde_json::Value::String(s) => s,
        serde_json::Value::Number(n) => n.to_string(),
        other => return Err(malformed(format!("id must be a string or number, got {other}"))),
    };
    if doc_id.is_empty() {
        return Err(malformed("empty id".into()));
    }
    let body = match record.text {
        None => String::new(),
        Some(RecordText::One(s)) => s,
        Some(RecordText::Paragraphs(p)) => p.join("\n"),
    };
    Ok(SourceDocument {
        doc_id,
        title: record.title,
        body,
    })
}

/// Reads a line-delimited document file. Blank lines are skipped; the first
/// malformed line aborts with its 1-based line number.
pub fn read_documents(path: &Path) -> Result<Vec<SourceDocument>> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = parse_document_line(path, i + 1, &line)?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(KgiError::DuplicateDocument(doc.doc_id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Immutable passage store. Built once by ingestion, then shared read-only.
#[derive(Debug, Clone, Default)]
pub struct CorpusStore {
    passages: Vec<Passage>,
    by_pid: HashMap<String, usize>,
    n_documents: usize,
}

impl CorpusStore {
    /// Chunks `docs` into a store. Rejects duplicate document ids.
    pub fn from_documents(docs: &[SourceDocument], params: ChunkParams) -> Result<Self> {
        params.validate()?;
        let mut seen = HashSet::new();
        let mut passages = Vec::new();
        for doc in docs {
            if !seen.insert(doc.doc_id.as_str()) {
                return Err(KgiError::DuplicateDocument(doc.doc_id.clone()));
            }
            passages.extend(chunk_document(doc, params)?);
        }
        Self::from_passages(passages, docs.len())
    }

    pub fn from_passages(passages: Vec<Passage>, n_documents: usize) -> Result<Self> {
        let mut by_pid = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if by_pid.insert(p.pid.clone(), i).is_some() {
                return Err(KgiError::InvalidArgument(format!("duplicate pid `{}`", p.pid)));
            }
        }
        Ok(CorpusStore {
            passages,
            by_pid,
            n_documents,
        })
    }

    pub fn get_passage(&self, pid: &str) -> Result<&Passage> {
        self.by_pid
            .get(pid)
            .map(|&i| &self.passages[i])
            .ok_or_else(|| KgiError::PassageNotFound(pid.to_string()))
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn stats(&self) -> CorpusStats {
        let n_passages = self.passages.len();
        let total: usize = self.passages.iter().map(|p| p.token_count).sum();
        CorpusStats {
            n_documents: self.n_documents,
            n_passages,
            mean_passage_tokens: if n_passages == 0 {
                0.0
            } else {
                total as f64 / n_passages as f64
            },
        }
    }

    /// Writes `passages.jsonl`, the pid to byte-offset map and the stats.
    /// Files are written under temporary names and renamed into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let tmp = |name: &str| dir.join(format!(".{name}.tmp"));

        let mut offsets: Vec<(String, u64)> = Vec::with_capacity(self.passages.len());
        {
            let mut w = BufWriter::new(File::create(tmp(PASSAGES_FILE))?);
            let mut offset = 0u64;
            for p in &self.passages {
                let mut line = serde_json::to_vec(p)?;
                line.push(b'\n');
                w.write_all(&line)?;
                offsets.push((p.pid.clone(), offset));
                offset += line.len() as u64;
            }
            w.flush()?;
        }
        fs::write(tmp(OFFSETS_FILE), serde_json::to_vec(&offsets)?)?;
        fs::write(tmp(STATS_FILE), serde_json::to_vec_pretty(&self.stats())?)?;

        for name in [PASSAGES_FILE, OFFSETS_FILE, STATS_FILE] {
            fs::rename(tmp(name), dir.join(name))?;
        }
        Ok(())
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let stats: CorpusStats = serde_json::from_slice(&fs::read(dir.join(STATS_FILE))?)?;
        let offsets: Vec<(String, u64)> = serde_json::from_slice(&fs::read(dir.join(OFFSETS_FILE))?)?;
        let data = fs::read(dir.join(PASSAGES_FILE))?;
        let path = dir.join(PASSAGES_FILE);
        let mut passages = Vec::with_capacity(offsets.len());
        for (line_no, (pid, offset)) in offsets.iter().enumerate() {
            let start = *offset as usize;
            let end = data[start.min(data.len())..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|e| start + e)
                .ok_or_else(|| KgiError::CorruptIndex(format!("offset {offset} for `{pid}` out of range")))?;
            let passage: Passage = serde_json::from_slice(&data[start..end]).map_err(|e| KgiError::MalformedRecord {
                path: path.clone(),
                line: line_no + 1,
                reason: e.to_string(),
            })?;
            if &passage.pid != pid {
                return Err(KgiError::CorruptIndex(format!(
                    "offset map names `{pid}` but record holds `{}`",
                    passage.pid
                )));
            }
            passages.push(passage);
        }
        Self::from_passages(passages, stats.n_documents)
    }
}

/// Reads, chunks and persists a document file into `out_dir`.
///
/// Nothing is written unless every line parses and chunks cleanly, and
/// re-running on the same input reproduces byte-identical output.
pub fn ingest_corpus(input: &Path, params: ChunkParams, out_dir: &Path) -> Result<CorpusStats> {
    params.validate()?;
    let docs = read_documents(input)?;
    let store = CorpusStore::from_documents(&docs, params)?;
    store.save(out_dir)?;
    tracing::info!(
        documents = store.n_documents,
        passages = store.len(),
        out = %out_dir.display(),
        "ingested corpus"
    );
    Ok(store.stats())
}

pub fn corpus_files(dir: &Path) -> [PathBuf; 3] {
    [dir.join(PASSAGES_FILE), dir.join(OFFSETS_FILE), dir.join(STATS_FILE)]
}
