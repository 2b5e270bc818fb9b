//! Embedding providers and cosine similarity.
//!
//! Two providers ship here: [`HashEmbedder`], a deterministic bag-of-tokens
//! hashing embedder that needs no model weights, and [`RemoteEmbedder`],
//! which talks to an OpenAI-style `/embeddings` endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{env_nonempty, HttpError, JsonClient, ENV_API_KEY};
use crate::text::tokenize;

pub const ENV_EMBED_URL: &str = "BIMEM_EMBED_URL";
pub const ENV_EMBED_MODEL: &str = "BIMEM_EMBED_MODEL";
pub const DEFAULT_EMBED_MODEL: &str = "all-MiniLM-L6-v2";
pub const DEFAULT_HASH_DIM: usize = 384;
const HASH_SEED: u64 = 0x005e_edb1_3e3d;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyInput,
    #[error("embedding request failed (status {status:?}): {message}")]
    Transport { status: Option<u16>, message: String },
    #[error("embedding response malformed: {0}")]
    Response(String),
    #[error("embedding has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{0} is not set")]
    MissingEnv(&'static str),
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Transport { .. })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("vector lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero-norm vector")]
    ZeroNorm,
}

/// Maps text to a fixed-dimension vector.
///
/// Implementations receive text that is already trimmed and non-empty; callers
/// go through [`embed_text`].
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

/// Trims, rejects empty input and embeds a single text.
pub fn embed_text(provider: &dyn EmbeddingProvider, text: &str) -> Result<Vec<f64>, EmbedError> {
    let mut out = embed_texts(provider, &[text])?;
    Ok(out.pop().expect("one vector per input"))
}

pub fn embed_texts(provider: &dyn EmbeddingProvider, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
    let trimmed: Vec<&str> = texts.iter().map(|t| t.trim()).collect();
    if trimmed.iter().any(|t| t.is_empty()) {
        return Err(EmbedError::EmptyInput);
    }
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    let vectors = provider.embed_batch(&trimmed)?;
    if vectors.len() != trimmed.len() {
        return Err(EmbedError::Response(format!(
            "{} vectors for {} inputs",
            vectors.len(),
            trimmed.len()
        )));
    }
    let dim = provider.dimension();
    for v in &vectors {
        if v.len() != dim {
            return Err(EmbedError::Dimension {
                expected: dim,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::Response("non-finite component".into()));
        }
    }
    Ok(vectors)
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::LengthMismatch(a.len(), b.len()));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine similarity for ranking: zero-norm inputs score 0.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64, SimilarityError> {
    match cosine_sim(a, b) {
        Err(SimilarityError::ZeroNorm) => Ok(0.0),
        other => other,
    }
}

/// Component-wise mean; `None` for an empty input.
pub fn mean_vector<'a>(vectors: impl IntoIterator<Item = &'a [f64]>) -> Option<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    let mut n = 0usize;
    for v in vectors {
        match acc.as_mut() {
            None => acc = Some(v.to_vec()),
            Some(a) => a.iter_mut().zip(v).for_each(|(x, y)| *x += y),
        }
        n += 1;
    }
    acc.map(|mut a| {
        a.iter_mut().for_each(|x| *x /= n as f64);
        a
    })
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn hash_bucket(token: &str, dim: usize) -> usize {
    (fnv1a(HASH_SEED, token.as_bytes()) % dim as u64) as usize
}

/// Bag-of-tokens hashing embedding, L2-normalized. Token-free text maps to the zero vector.
pub fn deterministic_embed(text: &str, dim: usize) -> Vec<f64> {
    assert!(dim >= 8, "hash embedding dimension must be at least 8");
    let mut v = vec![0.0; dim];
    for tok in tokenize(text) {
        v[hash_bucket(&tok, dim)] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 8, "hash embedding dimension must be at least 8");
        Self { dim }
    }

    /// Parses names produced by [`EmbeddingProvider::name`], e.g. `hash-384`.
    pub fn from_name(name: &str) -> Option<Self> {
        let dim = name.strip_prefix("hash-")?.parse().ok()?;
        (dim >= 8).then(|| Self::new(dim))
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_HASH_DIM)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn name(&self) -> String {
        format!("hash-{}", self.dim)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| deterministic_embed(t, self.dim)).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    #[serde(default)]
    data: Option<Vec<EmbedDatum>>,
    #[serde(default)]
    embeddings: Option<Vec<Vec<f64>>>,
}

/// Client for a remote embedding endpoint accepting `{model, input: [text]}`.
#[derive(Debug)]
pub struct RemoteEmbedder {
    url: String,
    model: String,
    dim: usize,
    client: JsonClient,
}

impl RemoteEmbedder {
    /// Connects and learns the dimension with a probe request.
    pub fn connect(url: String, model: String, api_key: Option<String>, max_in_flight: usize) -> Result<Self, EmbedError> {
        let client = JsonClient::new(api_key, max_in_flight, Duration::from_secs(60));
        let mut this = Self {
            url,
            model,
            dim: 0,
            client,
        };
        let probe = this.request(&["dimension probe"])?;
        this.dim = probe.first().map(Vec::len).unwrap_or(0);
        if this.dim == 0 {
            return Err(EmbedError::Response("probe returned no vector".into()));
        }
        Ok(this)
    }

    pub fn from_env(max_in_flight: usize) -> Result<Self, EmbedError> {
        let url = env_nonempty(ENV_EMBED_URL).ok_or(EmbedError::MissingEnv(ENV_EMBED_URL))?;
        let model = env_nonempty(ENV_EMBED_MODEL).unwrap_or_else(|| DEFAULT_EMBED_MODEL.to_string());
        Self::connect(url, model, env_nonempty(ENV_API_KEY), max_in_flight)
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let body = EmbedRequest {
            model: &self.model,
            input: texts,
        };
        let resp: EmbedResponse = self.client.post(&self.url, &body).map_err(|e| match e {
            HttpError::Body { message, .. } => EmbedError::Response(message),
            other => EmbedError::Transport {
                status: other.status(),
                message: other.to_string(),
            },
        })?;
        match (resp.data, resp.embeddings) {
            (Some(data), _) => Ok(data.into_iter().map(|d| d.embedding).collect()),
            (None, Some(e)) => Ok(e),
            (None, None) => Err(EmbedError::Response("no `data` or `embeddings` field".into())),
        }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn name(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        self.request(texts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::testserver;
    use proptest::prelude::*;

    #[test]
    fn embedding_is_deterministic_and_trimmed() {
        let p = HashEmbedder::default();
        let a = embed_text(&p, "hello").unwrap();
        assert_eq!(a, embed_text(&p, "hello").unwrap());
        assert_eq!(a, embed_text(&p, "hello ").unwrap());
        assert_eq!(a.len(), 384);
    }

    #[test]
    fn empty_text_is_an_input_error() {
        let p = HashEmbedder::default();
        assert!(matches!(embed_text(&p, "   "), Err(EmbedError::EmptyInput)));
    }

    #[test]
    fn cat_and_dog_differ() {
        let p = HashEmbedder::default();
        assert_ne!(embed_text(&p, "cat").unwrap(), embed_text(&p, "dog").unwrap());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // (1,1)·(1,0) / (√2 · 1)
        let expected = 1.0 / 2f64.sqrt();
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(SimilarityError::ZeroNorm));
        assert_eq!(cosine_sim(&[1.0], &[1.0, 0.0]), Err(SimilarityError::LengthMismatch(1, 2)));
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 0.0]), Ok(0.0));
    }

    #[test]
    fn test_tokens_do_not_collide_at_256() {
        let buckets: Vec<usize> = ["alpha", "beta", "gamma"].iter().map(|t| hash_bucket(t, 256)).collect();
        assert_ne!(buckets[0], buckets[1]);
        assert_ne!(buckets[0], buckets[2]);
        assert_ne!(buckets[1], buckets[2]);
    }

    #[test]
    fn hash_embedding_examples() {
        let e = |t| deterministic_embed(t, 256);
        assert!((cosine_sim(&e("alpha beta"), &e("alpha beta")).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&e("alpha"), &e("beta")).unwrap(), 0.0);
        // (1,1,0)·(1,0,1) / (√2·√2) = 1/2
        assert!((cosine_sim(&e("alpha beta"), &e("alpha gamma")).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn hash_embedding_is_stable() {
        // frozen bucket indices guard against accidental hash changes
        assert_eq!(hash_bucket("alpha", 384), hash_bucket("alpha", 384));
        let v = deterministic_embed("Alpha ALPHA alpha", 64);
        assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 1);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn token_free_text_embeds_to_zero() {
        assert!(deterministic_embed("!!!", 16).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn mean_vector_averages() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert_eq!(mean_vector([&a[..], &b[..]]), Some(vec![0.5, 0.5]));
        assert_eq!(mean_vector(std::iter::empty::<&[f64]>()), None);
    }

    #[test]
    fn hash_name_round_trips() {
        let p = HashEmbedder::new(128);
        assert_eq!(HashEmbedder::from_name(&p.name()).unwrap().dimension(), 128);
        assert!(HashEmbedder::from_name("remote:x").is_none());
    }

    #[test]
    fn remote_embedder_wire_format() {
        let (url, rx) = testserver::serve(vec![
            (200, r#"{"data":[{"embedding":[0.1,0.2,0.3]}]}"#.into()),
            (200, r#"{"embeddings":[[1.0,0.0,0.0],[0.0,1.0,0.0]]}"#.into()),
        ]);
        let e = RemoteEmbedder::connect(url, "mini".into(), None, 2).unwrap();
        assert_eq!(e.dimension(), 3);
        let probe = rx.recv().unwrap();
        let body: serde_json::Value = serde_json::from_str(&probe.body).unwrap();
        assert_eq!(body, serde_json::json!({"model": "mini", "input": ["dimension probe"]}));
        let v = embed_texts(&e, &["a ", "b"]).unwrap();
        assert_eq!(v, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let body: serde_json::Value = serde_json::from_str(&rx.recv().unwrap().body).unwrap();
        assert_eq!(body["input"], serde_json::json!(["a", "b"]));
    }

    #[test]
    fn remote_embedder_reports_status() {
        let (url, _rx) = testserver::serve(vec![(500, "{}".into())]);
        match RemoteEmbedder::connect(url, "m".into(), None, 1) {
            Err(EmbedError::Transport { status, .. }) => assert_eq!(status, Some(500)),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in prop::collection::vec(-10.0f64..10.0, 8), b in prop::collection::vec(-10.0f64..10.0, 8)) {
            prop_assume!(a.iter().any(|x| *x != 0.0) && b.iter().any(|x| *x != 0.0));
            let ab = cosine_sim(&a, &b).unwrap();
            let ba = cosine_sim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn cosine_is_scale_invariant(a in prop::collection::vec(-10.0f64..10.0, 8), c in 0.01f64..100.0) {
            prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-6);
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            prop_assert!((cosine_sim(&a, &scaled).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
