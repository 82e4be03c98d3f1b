use std::collections::HashMap;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;

use super::{EmbedItem, EmbeddingError, EmbeddingProvider, EmbeddingVector};

/// JSON bodies of the embedding service protocol.
pub mod wire {
    use serde::{Deserialize, Serialize};

    use crate::embeddings::ContentKind;

    /// Request items per `POST /v1/embed`.
    pub const MAX_BATCH: usize = 256;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EmbedRequestItem {
        pub id: String,
        pub kind: ContentKind,
        pub content: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EmbedRequest {
        pub items: Vec<EmbedRequestItem>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EmbedResponseVector {
        pub id: String,
        pub vector: Vec<f32>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct EmbedResponse {
        pub dim: usize,
        pub vectors: Vec<EmbedResponseVector>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Health {
        pub status: String,
        pub dim: usize,
        pub deterministic: bool,
    }
}

/// Client for a remote embedding service. The blocking client is shared and
/// may be used from several threads at once.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    base_url: String,
    client: Client,
    dim: usize,
    deterministic: bool,
}

fn transport(err: reqwest::Error) -> EmbeddingError {
    EmbeddingError::Transport {
        retryable: err.is_timeout() || err.is_connect() || err.is_request(),
        message: err.to_string(),
    }
}

fn status_error(status: StatusCode, body: String) -> EmbeddingError {
    EmbeddingError::Transport {
        retryable: status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS,
        message: format!("HTTP {status}: {body}"),
    }
}

impl HttpProvider {
    /// Connects and reads the service dimension from `GET /healthz`.
    pub fn connect(base_url: &str, timeout_ms: u64) -> Result<Self, EmbeddingError> {
        let client = Client::builder().timeout(Duration::from_millis(timeout_ms)).build().map_err(transport)?;
        let base_url = base_url.trim_end_matches('/').to_string();
        let resp = client.get(format!("{base_url}/healthz")).send().map_err(transport)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(status_error(status, resp.text().unwrap_or_default()));
        }
        let health: wire::Health = resp.json().map_err(transport)?;
        if health.status != "ok" {
            return Err(EmbeddingError::Transport {
                message: format!("service status {:?}", health.status),
                retryable: true,
            });
        }
        Ok(HttpProvider { base_url, client, dim: health.dim, deterministic: health.deterministic })
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    fn request_chunk(&self, items: &[EmbedItem]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        // The service requires unique IDs per request.
        let mut unique: Vec<&EmbedItem> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for item in items {
            slot.entry(item.key.as_str()).or_insert_with(|| {
                unique.push(item);
                unique.len() - 1
            });
        }
        let body = wire::EmbedRequest {
            items: unique
                .iter()
                .map(|item| wire::EmbedRequestItem {
                    id: item.key.to_string(),
                    kind: item.kind,
                    content: item.content.clone(),
                })
                .collect(),
        };
        let resp = self.client.post(format!("{}/v1/embed", self.base_url)).json(&body).send().map_err(transport)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(status_error(status, resp.text().unwrap_or_default()));
        }
        let parsed: wire::EmbedResponse = resp.json().map_err(transport)?;
        let malformed = |message: String| EmbeddingError::Transport { message, retryable: false };
        if parsed.dim != self.dim {
            return Err(EmbeddingError::DimensionMismatch { expected: self.dim, actual: parsed.dim });
        }
        if parsed.vectors.len() != unique.len() {
            return Err(malformed(format!("asked for {} vectors, got {}", unique.len(), parsed.vectors.len())));
        }
        let mut vectors = Vec::with_capacity(unique.len());
        for (item, v) in unique.iter().zip(parsed.vectors) {
            if v.id != item.key.as_str() {
                return Err(malformed(format!("expected id {}, got {}", item.key, v.id)));
            }
            if v.vector.len() != self.dim {
                return Err(EmbeddingError::DimensionMismatch { expected: self.dim, actual: v.vector.len() });
            }
            vectors.push(EmbeddingVector::new(v.vector)?);
        }
        Ok(items.iter().map(|item| vectors[slot[item.key.as_str()]].clone()).collect())
    }
}

impl EmbeddingProvider for HttpProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn get(&self, item: &EmbedItem) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(self.request_chunk(std::slice::from_ref(item))?.remove(0))
    }

    fn get_batch(&self, items: &[EmbedItem]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(wire::MAX_BATCH) {
            out.extend(self.request_chunk(chunk)?);
        }
        Ok(out)
    }
}
