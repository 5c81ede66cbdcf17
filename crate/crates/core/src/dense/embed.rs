use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{KgiError, Result};
use crate::remote::RemoteClient;
use crate::sparse::tokenize;

/// Maps text to a fixed-length vector.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f32>>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }

    /// Identifies the embedder so an index can be reopened with a matching query encoder.
    fn spec(&self) -> EmbedderSpec;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Hash { dim: usize },
    Remote { endpoint: String },
}

impl EmbedderSpec {
    /// Parses `hash`, `hash:<dim>` or an `http(s)://` endpoint.
    pub fn parse(s: &str) -> Result<Self> {
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(EmbedderSpec::Remote { endpoint: s.to_string() });
        }
        match s.split_once(':') {
            None if s == "hash" => Ok(EmbedderSpec::Hash { dim: HashEmbedder::DEFAULT_DIM }),
            Some(("hash", dim)) => {
                let dim = dim
                    .parse()
                    .map_err(|_| KgiError::Config(format!("bad embedder dimension in `{s}`")))?;
                Ok(EmbedderSpec::Hash { dim })
            }
            _ => Err(KgiError::Config(format!(
                "unknown embedder `{s}` (expected `hash`, `hash:<dim>` or an http endpoint)"
            ))),
        }
    }

    pub fn build(&self, timeout: Duration, retries: u32) -> Result<Box<dyn Embedder>> {
        Ok(match self {
            EmbedderSpec::Hash { dim } => Box::new(HashEmbedder::new(*dim)?),
            EmbedderSpec::Remote { endpoint } => Box::new(RemoteEmbedder::connect(endpoint, timeout, retries)?),
        })
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic signed feature-hashing of token counts, L2-normalised.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(KgiError::InvalidArgument("embedding dimension must be >= 1".into()));
        }
        Ok(HashEmbedder { dim })
    }

    /// Bucket and sign for a token.
    pub fn feature(&self, token: &str) -> (usize, f32) {
        let h = fnv1a64(token.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        ((h % self.dim as u64) as usize, sign)
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: Self::DEFAULT_DIM }
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(KgiError::InvalidArgument(format!("no tokens to embed in {text:?}")));
        }
        let mut v = vec![0f32; self.dim];
        for t in &tokens {
            let (i, s) = self.feature(t);
            v[i] += s;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            // Every bucket cancelled out; fall back to the unsigned counts.
            for t in &tokens {
                v[self.feature(t).0] += 1.0;
            }
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }

    fn spec(&self) -> EmbedderSpec {
        EmbedderSpec::Hash { dim: self.dim }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f32>>,
}

/// Client for an encoder server speaking `{texts:[..]} -> {embeddings:[[..]]}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    client: RemoteClient,
    dim: usize,
}

impl RemoteEmbedder {
    const BATCH: usize = 64;

    /// Connects and learns the output dimension from a probe request.
    pub fn connect(endpoint: &str, timeout: Duration, retries: u32) -> Result<Self> {
        let client = RemoteClient::new(endpoint, timeout, retries)?;
        let probe: EmbedResponse = client.post_json(&EmbedRequest { texts: &["probe"] })?;
        let dim = probe.embeddings.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(KgiError::Config(format!("{endpoint} returned an empty embedding")));
        }
        Ok(RemoteEmbedder { client, dim })
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(Self::BATCH) {
            let resp: EmbedResponse = self.client.post_json(&EmbedRequest { texts: chunk })?;
            if resp.embeddings.len() != chunk.len() {
                return Err(KgiError::Transport {
                    endpoint: self.client.endpoint().to_string(),
                    attempts: 1,
                    retryable: false,
                    message: format!("expected {} embeddings, got {}", chunk.len(), resp.embeddings.len()),
                });
            }
            for e in resp.embeddings {
                if e.len() != self.dim {
                    return Err(KgiError::DimensionMismatch {
                        expected: self.dim,
                        actual: e.len(),
                    });
                }
                out.push(e);
            }
        }
        Ok(out)
    }

    fn spec(&self) -> EmbedderSpec {
        EmbedderSpec::Remote {
            endpoint: self.client.endpoint().to_string(),
        }
    }
}
