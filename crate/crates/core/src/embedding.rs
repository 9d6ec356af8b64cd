//! Embedding providers and the content-addressed embedding cache.

use std::collections::HashMap;
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::provider::{post_json, ProviderError, RemoteConfig};

pub const EMBED_URL_VAR: &str = "CDR_AGENT_EMBED_URL";
pub const EMBED_MODEL_VAR: &str = "CDR_AGENT_EMBED_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ProviderError> {
        if values.is_empty() {
            return Err(ProviderError::Decode("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::Decode("embedding contains NaN or Inf".into()));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        EmbeddingVector(self.0.iter().map(|v| v * factor).collect())
    }
}

/// Maps texts to equal-dimension vectors, one per input, in input order.
#[async_trait]
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier, part of the cache key.
    fn id(&self) -> &str;

    async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError>;
}

/// Embed a single text.
pub async fn embed(
    text: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<EmbeddingVector, ProviderError> {
    if text.trim().is_empty() {
        return Err(ProviderError::InvalidInput("text is empty".into()));
    }
    let mut out = provider.embed_batch(&[text.to_string()]).await?;
    match out.len() {
        1 => Ok(out.remove(0)),
        n => Err(ProviderError::Decode(format!("expected 1 embedding, got {n}"))),
    }
}

/// Offline provider: hashed bag of words.
///
/// Text is lowercased and stripped of ASCII punctuation, split on
/// whitespace, and each token adds one to bucket `fnv1a(token) % dim`. The
/// count vector is L2-normalised, so cosine similarity grows with lexical
/// overlap.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    id: String,
}

pub const MOCK_EMBEDDING_DIM: usize = 256;

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::with_dim(MOCK_EMBEDDING_DIM)
    }
}

impl MockEmbedder {
    pub fn with_dim(dim: usize) -> Self {
        assert!(dim > 0);
        MockEmbedder {
            dim,
            id: format!("mock-bow-{dim}"),
        }
    }

    pub fn tokens(text: &str) -> Vec<String> {
        let cleaned: String = text
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .flat_map(char::to_lowercase)
            .collect();
        cleaned.split_whitespace().map(str::to_string).collect()
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        let tokens = Self::tokens(text);
        if tokens.is_empty() {
            return Err(ProviderError::InvalidInput("text has no tokens".into()));
        }
        let mut counts = vec![0.0; self.dim];
        for t in &tokens {
            counts[(fnv1a(t.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        counts.iter_mut().for_each(|c| *c /= norm);
        EmbeddingVector::new(counts)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[async_trait]
impl EmbeddingProvider for MockEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}

/// Client for an OpenAI-style `/embeddings` endpoint.
pub struct RemoteEmbedder {
    client: reqwest::Client,
    config: RemoteConfig,
    id: String,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a [String],
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedItem>,
}

#[derive(Deserialize)]
struct EmbedItem {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteConfig) -> Self {
        RemoteEmbedder {
            client: reqwest::Client::new(),
            id: format!("remote:{}@{}", config.model, config.url),
            config,
        }
    }

    pub fn from_env() -> Result<Self, ProviderError> {
        Ok(Self::new(RemoteConfig::from_env(EMBED_URL_VAR, EMBED_MODEL_VAR)?))
    }
}

#[async_trait]
impl EmbeddingProvider for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = EmbedRequest {
            input: texts,
            model: &self.config.model,
        };
        let resp: EmbedResponse = post_json(&self.client, &self.config, &body).await?;
        if resp.data.len() != texts.len() {
            return Err(ProviderError::Decode(format!(
                "sent {} texts, received {} embeddings",
                texts.len(),
                resp.data.len()
            )));
        }
        let mut slots: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        for (pos, item) in resp.data.into_iter().enumerate() {
            let i = item.index.unwrap_or(pos);
            let slot = slots
                .get_mut(i)
                .ok_or_else(|| ProviderError::Decode(format!("embedding index {i} out of range")))?;
            *slot = Some(EmbeddingVector::new(item.embedding)?);
        }
        let out: Vec<EmbeddingVector> = slots
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| ProviderError::Decode("duplicate embedding index".into()))?;
        if out.windows(2).any(|w| w[0].dim() != w[1].dim()) {
            return Err(ProviderError::Decode("embeddings differ in dimension".into()));
        }
        Ok(out)
    }
}

/// Embeddings keyed by (provider id, SHA-256 of the text).
#[derive(Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<(String, [u8; 32]), EmbeddingVector>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embed `texts`, calling the provider once for the texts not cached yet.
    pub async fn embed_all(
        &self,
        provider: &dyn EmbeddingProvider,
        texts: &[String],
    ) -> Result<Vec<EmbeddingVector>, ProviderError> {
        let pid = provider.id().to_string();
        let keys: Vec<[u8; 32]> = texts
            .iter()
            .map(|t| Sha256::digest(t.as_bytes()).into())
            .collect();
        let mut missing: Vec<usize> = Vec::new();
        {
            let entries = self.entries.read();
            for (i, k) in keys.iter().enumerate() {
                if !entries.contains_key(&(pid.clone(), *k)) && !missing.iter().any(|&j| keys[j] == *k) {
                    missing.push(i);
                }
            }
        }
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = provider.embed_batch(&batch).await?;
            if fresh.len() != batch.len() {
                return Err(ProviderError::Decode(format!(
                    "sent {} texts, received {} embeddings",
                    batch.len(),
                    fresh.len()
                )));
            }
            let mut entries = self.entries.write();
            for (&i, v) in missing.iter().zip(fresh) {
                entries.insert((pid.clone(), keys[i]), v);
            }
        }
        let entries = self.entries.read();
        Ok(keys
            .iter()
            .map(|k| entries[&(pid.clone(), *k)].clone())
            .collect())
    }
}

/// Shared handle type used across the pipeline.
pub type SharedEmbedder = Arc<dyn EmbeddingProvider>;
