//! Text-similarity providers for relation retrieval and the document
//! retrieval baseline.
//!
//! Rankings are sorted by non-increasing score with ties broken by the
//! lexicographic order of the candidate text, so every backend is
//! deterministic for a fixed state.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::http::{HttpError, JsonClient, RetryPolicy};
use crate::kg::Document;

pub const EMBED_API_KEY_VAR: &str = "KGETOOL_EMBED_API_KEY";

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("no embedding vector for {0:?}")]
    MissingVector(String),
    #[error("embedding backend: {0}")]
    Backend(String),
    #[error(transparent)]
    Http(#[from] HttpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub candidate: String,
    pub score: f64,
}

/// How identifiers are turned into text before scoring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextTemplate {
    /// The identifier as-is (`prefer_food`).
    #[default]
    Raw,
    /// Underscores replaced by spaces (`prefer food`).
    Humanized,
}

impl TextTemplate {
    pub fn apply(self, text: &str) -> String {
        match self {
            TextTemplate::Raw => text.to_string(),
            TextTemplate::Humanized => text.replace('_', " "),
        }
    }
}

pub trait SimilarityProvider: Send + Sync {
    /// The `min(k, |candidates|)` best candidates for `query`.
    fn top_k(
        &self,
        query: &str,
        candidates: &[String],
        k: usize,
    ) -> Result<Vec<Scored>, SimilarityError>;
}

fn check_args(candidates: &[String], k: usize) -> Result<(), SimilarityError> {
    if k == 0 {
        return Err(SimilarityError::InvalidArgument("k must be at least 1"));
    }
    if candidates.is_empty() {
        return Err(SimilarityError::InvalidArgument("candidate list is empty"));
    }
    Ok(())
}

/// Sorts by score (descending), then candidate text, and keeps `k`.
pub fn rank(mut scored: Vec<Scored>, k: usize) -> Vec<Scored> {
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.candidate.cmp(&b.candidate))
    });
    scored.truncate(k);
    scored
}

/// Character-trigram Jaccard similarity. Texts are lowercased and padded
/// with two leading and one trailing space, so even one-letter strings
/// produce trigrams.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalSimilarity {
    pub template: TextTemplate,
}

impl LexicalSimilarity {
    pub fn new(template: TextTemplate) -> Self {
        Self { template }
    }

    pub fn score(&self, a: &str, b: &str) -> f64 {
        jaccard(
            &trigrams(&self.template.apply(a)),
            &trigrams(&self.template.apply(b)),
        )
    }
}

pub fn trigrams(text: &str) -> BTreeSet<[char; 3]> {
    let padded: Vec<char> = format!("  {} ", text.to_lowercase()).chars().collect();
    padded.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
}

fn jaccard(a: &BTreeSet<[char; 3]>, b: &BTreeSet<[char; 3]>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

impl SimilarityProvider for LexicalSimilarity {
    fn top_k(
        &self,
        query: &str,
        candidates: &[String],
        k: usize,
    ) -> Result<Vec<Scored>, SimilarityError> {
        check_args(candidates, k)?;
        let q = trigrams(&self.template.apply(query));
        let scored = candidates
            .iter()
            .map(|c| Scored {
                candidate: c.clone(),
                score: jaccard(&q, &trigrams(&self.template.apply(c))),
            })
            .collect();
        Ok(rank(scored, k))
    }
}

/// Source of raw (not necessarily normalized) embedding vectors.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, SimilarityError>;
}

/// Precomputed vectors from a JSON object mapping text to a float array.
#[derive(Debug, Clone)]
pub struct VectorFile {
    vectors: HashMap<String, Vec<f32>>,
}

impl VectorFile {
    /// Parses the vector file and fails unless every text in `required`
    /// has a vector.
    pub fn load(source: &str, required: &[String]) -> Result<Self, SimilarityError> {
        let vectors: HashMap<String, Vec<f32>> = serde_json::from_str(source)
            .map_err(|e| SimilarityError::Backend(format!("vector file: {e}")))?;
        if let Some(missing) = required.iter().find(|t| !vectors.contains_key(*t)) {
            return Err(SimilarityError::MissingVector(missing.clone()));
        }
        Ok(Self { vectors })
    }

    pub fn from_map(vectors: HashMap<String, Vec<f32>>) -> Self {
        Self { vectors }
    }
}

impl Embedder for VectorFile {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, SimilarityError> {
        texts
            .iter()
            .map(|t| {
                self.vectors
                    .get(t)
                    .cloned()
                    .ok_or_else(|| SimilarityError::MissingVector(t.clone()))
            })
            .collect()
    }
}

/// OpenAI-style `/embeddings` endpoint: POST `{"input": [...], "model": m}`,
/// reply `{"data": [{"embedding": [...]}, ...]}` in input order.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    url: String,
    model: String,
    client: JsonClient,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, model: impl Into<String>, client: JsonClient) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            client,
        }
    }

    pub fn from_env(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self::new(
            url,
            model,
            JsonClient::from_env(EMBED_API_KEY_VAR, RetryPolicy::default()),
        )
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, SimilarityError> {
        let reply = self
            .client
            .post_json(&self.url, &json!({"input": texts, "model": self.model}))?;
        let data = reply
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| SimilarityError::Backend(format!("reply lacks data array: {reply}")))?;
        if data.len() != texts.len() {
            return Err(SimilarityError::Backend(format!(
                "requested {} embeddings, received {}",
                texts.len(),
                data.len()
            )));
        }
        data.iter()
            .map(|item| {
                item.get("embedding")
                    .and_then(Value::as_array)
                    .map(|v| v.iter().filter_map(Value::as_f64).map(|x| x as f32).collect())
                    .ok_or_else(|| SimilarityError::Backend("item lacks embedding".into()))
            })
            .collect()
    }
}

/// Cosine similarity over cached, unit-normalized embeddings.
pub struct EmbeddingSimilarity {
    embedder: Box<dyn Embedder>,
    template: TextTemplate,
    cache: Mutex<HashMap<String, Arc<Vec<f64>>>>,
}

impl EmbeddingSimilarity {
    pub fn new(embedder: Box<dyn Embedder>, template: TextTemplate) -> Self {
        Self {
            embedder,
            template,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Embeds and caches any of `texts` not yet seen.
    pub fn warm(&self, texts: &[String]) -> Result<(), SimilarityError> {
        self.vectors(texts).map(|_| ())
    }

    pub fn cached_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn vectors(&self, texts: &[String]) -> Result<Vec<Arc<Vec<f64>>>, SimilarityError> {
        let prepared: Vec<String> = texts.iter().map(|t| self.template.apply(t)).collect();
        let missing: Vec<String> = {
            let cache = self.cache.lock().expect("cache lock");
            let unique: BTreeSet<&String> =
                prepared.iter().filter(|t| !cache.contains_key(*t)).collect();
            unique.into_iter().cloned().collect()
        };
        if !missing.is_empty() {
            let fresh = self.embedder.embed(&missing)?;
            let mut cache = self.cache.lock().expect("cache lock");
            for (text, v) in missing.into_iter().zip(fresh) {
                cache.insert(text, Arc::new(normalize(&v)));
            }
        }
        let cache = self.cache.lock().expect("cache lock");
        prepared
            .iter()
            .map(|t| {
                cache
                    .get(t)
                    .cloned()
                    .ok_or_else(|| SimilarityError::MissingVector(t.clone()))
            })
            .collect()
    }
}

fn normalize(v: &[f32]) -> Vec<f64> {
    let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v
    } else {
        v.into_iter().map(|x| x / norm).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SimilarityProvider for EmbeddingSimilarity {
    fn top_k(
        &self,
        query: &str,
        candidates: &[String],
        k: usize,
    ) -> Result<Vec<Scored>, SimilarityError> {
        check_args(candidates, k)?;
        let mut texts = Vec::with_capacity(candidates.len() + 1);
        texts.push(query.to_string());
        texts.extend_from_slice(candidates);
        let vecs = self.vectors(&texts)?;
        let q = &vecs[0];
        let scored = candidates
            .iter()
            .zip(&vecs[1..])
            .map(|(c, v)| Scored {
                candidate: c.clone(),
                score: dot(q, v),
            })
            .collect();
        Ok(rank(scored, k))
    }
}

/// The `n` documents whose text ranks best against `query`.
pub fn retrieve_documents(
    provider: &dyn SimilarityProvider,
    query: &str,
    docs: &[Document],
    n: usize,
) -> Result<Vec<Document>, SimilarityError> {
    if n == 0 {
        return Err(SimilarityError::InvalidArgument("n must be at least 1"));
    }
    if docs.is_empty() {
        return Ok(Vec::new());
    }
    let by_text: BTreeMap<&str, &Document> = docs.iter().map(|d| (d.text.as_str(), d)).collect();
    let texts: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    let ranked = provider.top_k(query, &texts, n)?;
    Ok(ranked
        .into_iter()
        .filter_map(|s| by_text.get(s.candidate.as_str()).map(|d| (*d).clone()))
        .collect())
}
