//! Embedding clients for similarity-based step merging.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding request failed: {0}")]
    Transport(String),
    #[error("malformed embedding response: {0}")]
    Malformed(String),
    #[error("missing configuration: {0}")]
    Config(String),
}

/// Maps a batch of texts to fixed-dimension vectors.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Cosine similarity; zero vectors compare as 0.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Offline embedder: bag of lowercase words hashed into `dim` buckets.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0f32; self.dim];
                for word in t
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|w| !w.is_empty())
                {
                    let h = fnv1a(word.to_lowercase().as_bytes());
                    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                    v[(h % self.dim as u64) as usize] += sign;
                }
                v
            })
            .collect())
    }
}

/// Looks texts up in a fixed table; unknown texts map to the zero vector.
#[derive(Debug, Clone, Default)]
pub struct FixedEmbedder {
    table: HashMap<String, Vec<f32>>,
    dim: usize,
}

impl FixedEmbedder {
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        let table: HashMap<String, Vec<f32>> =
            entries.into_iter().map(|(k, v)| (k.into(), v)).collect();
        let dim = table.values().map(Vec::len).max().unwrap_or(0);
        Self { table, dim }
    }
}

impl Embedder for FixedEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; self.dim])
            })
            .collect())
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbedDatum {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

/// OpenAI-compatible `/embeddings` client.
///
/// Reads `STEP_PRUNER_EMBED_URL`, `STEP_PRUNER_EMBED_MODEL` and, optionally,
/// `STEP_PRUNER_EMBED_KEY` from the environment.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpEmbedder {
    pub fn from_env() -> Result<Self, EmbedError> {
        let endpoint = std::env::var("STEP_PRUNER_EMBED_URL")
            .map_err(|_| EmbedError::Config("STEP_PRUNER_EMBED_URL is not set".into()))?;
        Ok(Self {
            endpoint,
            model: std::env::var("STEP_PRUNER_EMBED_MODEL")
                .unwrap_or_else(|_| "all-MiniLM-L6-v2".into()),
            api_key: std::env::var("STEP_PRUNER_EMBED_KEY").ok(),
            timeout: Duration::from_secs(60),
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let mut req = client.post(&self.endpoint).json(&EmbedRequest {
            model: &self.model,
            input: texts,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let mut body: EmbedResponse = resp
            .json()
            .map_err(|e| EmbedError::Malformed(e.to_string()))?;
        if body.data.len() != texts.len() {
            return Err(EmbedError::Malformed(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                body.data.len()
            )));
        }
        if body.data.iter().all(|d| d.index.is_some()) {
            body.data.sort_by_key(|d| d.index);
        }
        let dim = body.data[0].embedding.len();
        if body.data.iter().any(|d| d.embedding.len() != dim) {
            return Err(EmbedError::Malformed(
                "embeddings differ in dimension".into(),
            ));
        }
        Ok(body.data.into_iter().map(|d| d.embedding).collect())
    }
}
