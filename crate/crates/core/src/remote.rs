//! Blocking JSON-over-HTTP client shared by the remote embedder, reranker and
//! generator backends.

use std::sync::OnceLock;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{KgiError, Result};

#[derive(Debug, Clone)]
pub struct RemoteClient {
    endpoint: String,
    timeout: Duration,
    retries: u32,
    // Built on first use: the blocking client must not be created on an async runtime thread.
    client: OnceLock<reqwest::blocking::Client>,
}

impl RemoteClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: u32) -> Result<Self> {
        let endpoint = endpoint.into();
        if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
            return Err(KgiError::Config(format!("endpoint `{endpoint}` is not an http(s) URL")));
        }
        if timeout.is_zero() {
            return Err(KgiError::Config("remote timeout must be non-zero".into()));
        }
        Ok(RemoteClient {
            endpoint,
            timeout,
            retries,
            client: OnceLock::new(),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn client(&self) -> Result<&reqwest::blocking::Client> {
        if let Some(c) = self.client.get() {
            return Ok(c);
        }
        let built = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| KgiError::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(self.client.get_or_init(|| built))
    }

    /// POSTs `body` and decodes the JSON reply. Connection failures, timeouts
    /// and 5xx responses are retried up to `retries` extra times.
    pub fn post_json<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R> {
        let client = self.client()?;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let (message, retryable) = match client.post(&self.endpoint).json(body).send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp.json::<R>().map_err(|e| KgiError::Transport {
                        endpoint: self.endpoint.clone(),
                        attempts,
                        retryable: false,
                        message: format!("undecodable response: {e}"),
                    });
                }
                Ok(resp) => {
                    let status = resp.status();
                    (format!("HTTP {status}"), status.is_server_error())
                }
                Err(e) => (e.to_string(), e.is_connect() || e.is_timeout() || e.is_request()),
            };
            if !retryable || attempts > self.retries {
                return Err(KgiError::Transport {
                    endpoint: self.endpoint.clone(),
                    attempts,
                    retryable,
                    message,
                });
            }
            std::thread::sleep(Duration::from_millis(50 * attempts as u64));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_http_endpoints() {
        assert!(RemoteClient::new("ftp://x", Duration::from_secs(1), 0).is_err());
        assert!(RemoteClient::new("http://x", Duration::ZERO, 0).is_err());
    }

    #[test]
    fn unreachable_endpoint_reports_attempts() {
        // Port 9 on localhost is the discard service and is essentially never listening.
        let client = RemoteClient::new("http://127.0.0.1:9/score", Duration::from_millis(500), 2).unwrap();
        let err = client.post_json::<_, serde_json::Value>(&serde_json::json!({})).unwrap_err();
        match err {
            KgiError::Transport { attempts, retryable, .. } => {
                assert!(retryable);
                assert_eq!(attempts, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
