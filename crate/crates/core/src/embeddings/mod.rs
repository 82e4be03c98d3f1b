//! Embedding access behind a common provider trait.
//!
//! Three backends implement [`EmbeddingProvider`]:
//! - [`BinaryStore`]: vectors read from an `EMB1` file, looked up by key.
//! - [`HttpProvider`]: a remote `/v1/embed` service.
//! - [`SyntheticProvider`]: deterministic pseudo-embeddings derived from the key.

mod http;
mod store;
mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{ElementId, Message, Modality};

pub use http::{wire, HttpProvider};
pub use store::BinaryStore;
pub use synthetic::{synthetic_vector, SyntheticProvider};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("embedding key not found: {0}")]
    KeyNotFound(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("vector contains NaN or infinite values")]
    NonFinite,
    #[error("transport error (retryable: {retryable}): {message}")]
    Transport { message: String, retryable: bool },
    #[error("invalid embedding store: {0}")]
    InvalidStore(String),
}

impl EmbeddingError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbeddingError::Transport { retryable: true, .. })
    }
}

/// A finite, fixed-length `f32` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(EmbeddingVector(values))
        } else {
            Err(EmbeddingError::NonFinite)
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f32) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// Element-wise mean; `None` for an empty input.
    pub fn mean<'a>(
        vectors: impl IntoIterator<Item = &'a EmbeddingVector>,
    ) -> Result<Option<EmbeddingVector>, EmbeddingError> {
        let mut acc: Option<Vec<f64>> = None;
        let mut n = 0usize;
        for v in vectors {
            let sum = acc.get_or_insert_with(|| vec![0.0; v.dim()]);
            if sum.len() != v.dim() {
                return Err(EmbeddingError::DimensionMismatch { expected: sum.len(), actual: v.dim() });
            }
            for (s, x) in sum.iter_mut().zip(&v.0) {
                *s += f64::from(*x);
            }
            n += 1;
        }
        Ok(acc.map(|sum| EmbeddingVector(sum.into_iter().map(|s| (s / n as f64) as f32).collect())))
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f32>) -> Result<Self, Self::Error> {
        EmbeddingVector::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Cosine similarity, accumulated in `f64` and clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch { expected: a.dim(), actual: b.dim() });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.0.iter().zip(&b.0) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyScope {
    Element,
    DialogueText,
    DialogueImage,
    Query,
    Tag,
}

/// Store key. Element keys look like `dlg42/utt/3` (utterance text),
/// `dlg42/cap/3` (image caption text) or `dlg42/img/3` (image content);
/// other scopes are prefixed, e.g. `query/<task_id>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EmbeddingKey {
    scope: KeyScope,
    id: String,
}

impl EmbeddingKey {
    pub fn utterance(dialogue_id: &str, id: ElementId) -> Self {
        Self::element(format!("{dialogue_id}/utt/{id}"))
    }

    pub fn caption(dialogue_id: &str, id: ElementId) -> Self {
        Self::element(format!("{dialogue_id}/cap/{id}"))
    }

    pub fn image(dialogue_id: &str, id: ElementId) -> Self {
        Self::element(format!("{dialogue_id}/img/{id}"))
    }

    pub fn query(task_id: &str) -> Self {
        EmbeddingKey { scope: KeyScope::Query, id: format!("query/{task_id}") }
    }

    pub fn tag(tag: &str) -> Self {
        EmbeddingKey { scope: KeyScope::Tag, id: format!("tag/{tag}") }
    }

    pub fn dialogue_text(dialogue_id: &str) -> Self {
        EmbeddingKey { scope: KeyScope::DialogueText, id: format!("dialogue_text/{dialogue_id}") }
    }

    pub fn dialogue_image(dialogue_id: &str) -> Self {
        EmbeddingKey { scope: KeyScope::DialogueImage, id: format!("dialogue_image/{dialogue_id}") }
    }

    /// A key taken verbatim, e.g. read back from a store file.
    pub fn raw(scope: KeyScope, id: impl Into<String>) -> Self {
        EmbeddingKey { scope, id: id.into() }
    }

    fn element(id: String) -> Self {
        EmbeddingKey { scope: KeyScope::Element, id }
    }

    pub fn scope(&self) -> KeyScope {
        self.scope
    }

    pub fn as_str(&self) -> &str {
        &self.id
    }
}

impl fmt::Display for EmbeddingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentKind {
    Text,
    Image,
}

/// One lookup: the key addresses stored/synthetic vectors, the content feeds
/// encoders behind the HTTP backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedItem {
    pub key: EmbeddingKey,
    pub kind: ContentKind,
    pub content: String,
}

impl EmbedItem {
    pub fn text(key: EmbeddingKey, content: impl Into<String>) -> Self {
        EmbedItem { key, kind: ContentKind::Text, content: content.into() }
    }

    pub fn image(key: EmbeddingKey, content: impl Into<String>) -> Self {
        EmbedItem { key, kind: ContentKind::Image, content: content.into() }
    }

    /// How a dialogue element is embedded for similarity scoring: utterances by
    /// their text, images by their caption when it is non-empty, otherwise by
    /// the image itself.
    pub fn for_element(dialogue_id: &str, message: &Message) -> Self {
        match message.kind {
            Modality::Utterance => Self::text(EmbeddingKey::utterance(dialogue_id, message.element_id), &message.text),
            Modality::Image if !message.text.is_empty() => Self::caption_of(dialogue_id, message),
            Modality::Image => Self::image_of(dialogue_id, message),
        }
    }

    pub fn caption_of(dialogue_id: &str, message: &Message) -> Self {
        Self::text(EmbeddingKey::caption(dialogue_id, message.element_id), &message.text)
    }

    pub fn image_of(dialogue_id: &str, message: &Message) -> Self {
        Self::image(EmbeddingKey::image(dialogue_id, message.element_id), message.uri.clone().unwrap_or_default())
    }

    pub fn query(task_id: &str, query: &str) -> Self {
        Self::text(EmbeddingKey::query(task_id), query)
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn get(&self, item: &EmbedItem) -> Result<EmbeddingVector, EmbeddingError>;

    /// Vectors in the order of `items`.
    fn get_batch(&self, items: &[EmbedItem]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        items.iter().map(|item| self.get(item)).collect()
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn get(&self, item: &EmbedItem) -> Result<EmbeddingVector, EmbeddingError> {
        (**self).get(item)
    }

    fn get_batch(&self, items: &[EmbedItem]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        (**self).get_batch(items)
    }
}

pub const DEFAULT_SYNTHETIC_DIM: usize = 64;
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum ProviderConfig {
    File { path: PathBuf },
    Http { base_url: String, timeout_ms: u64 },
    Synthetic { seed: u64, dim: usize },
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            ProviderConfig::Http { timeout_ms: 0, .. } => Err("provider.timeout_ms must be positive".into()),
            ProviderConfig::Http { base_url, .. } if base_url.is_empty() => Err("provider.base_url is empty".into()),
            ProviderConfig::Synthetic { dim: 0, .. } => Err("provider.dim must be positive".into()),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>, EmbeddingError> {
        Ok(match self {
            ProviderConfig::File { path } => Arc::new(BinaryStore::open(path)?),
            ProviderConfig::Http { base_url, timeout_ms } => Arc::new(HttpProvider::connect(base_url, *timeout_ms)?),
            ProviderConfig::Synthetic { seed, dim } => Arc::new(SyntheticProvider::new(*seed, *dim)),
        })
    }
}
