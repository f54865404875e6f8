//! 512-dimensional caption embeddings: a deterministic signed-hashing
//! reference encoder for tests and offline runs, and a remote-encoder client
//! for CLIP-style services, both behind a disk cache keyed by
//! hash(text + encoder id).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::provider::{http_client, post_json_with_retry, FixtureStore, ProviderConfig};
use crate::text::{fnv1a, tokenize};

pub const EMBED_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Reference,
    Remote,
}

/// A 512-dim real vector with its L2 norm cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub norm: f64,
    pub source: EmbeddingSource,
    pub normalized: bool,
}

impl Embedding {
    pub fn new(vector: Vec<f64>, source: EmbeddingSource) -> Result<Embedding> {
        if vector.len() != EMBED_DIM {
            return Err(Error::Dimensionality {
                expected: EMBED_DIM,
                got: vector.len(),
            });
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("embedding has non-finite entries".into()));
        }
        let norm = norm2(&vector);
        let normalized = (norm - 1.0).abs() < 1e-6;
        Ok(Embedding {
            vector,
            norm,
            source,
            normalized,
        })
    }

    /// Rescale to unit norm (no-op on the zero vector).
    pub fn into_normalized(mut self) -> Embedding {
        if self.norm > 0.0 {
            for v in &mut self.vector {
                *v /= self.norm;
            }
        }
        self.norm = norm2(&self.vector);
        self.normalized = (self.norm - 1.0).abs() < 1e-6;
        self
    }
}

/// Signed feature hashing of token unigrams and bigrams into 512 buckets,
/// then L2 normalization. Pure and platform-stable. Empty text maps to the
/// convention vector with bucket 0 set.
pub fn encode_reference(text: &str) -> Embedding {
    let tokens = tokenize(text);
    let mut vector = vec![0.0f64; EMBED_DIM];
    if tokens.is_empty() {
        vector[0] = 1.0;
        return Embedding::new(vector, EmbeddingSource::Reference).unwrap();
    }
    let mut add = |feature: String| {
        let h = fnv1a(feature.as_bytes());
        let bucket = (h % EMBED_DIM as u64) as usize;
        let sign = if (h >> 32) & 1 == 1 { 1.0 } else { -1.0 };
        vector[bucket] += sign;
    };
    for t in &tokens {
        add(format!("1:{t}"));
    }
    for pair in tokens.windows(2) {
        add(format!("2:{} {}", pair[0], pair[1]));
    }
    Embedding::new(vector, EmbeddingSource::Reference)
        .unwrap()
        .into_normalized()
}

/// Identifier mixed into cache keys; bump when the hashing scheme changes.
pub const REFERENCE_ENCODER_ID: &str = "reference-v1";

pub trait Encoder {
    fn id(&self) -> String;
    fn encode(&self, texts: &[String]) -> Result<Vec<Embedding>>;
}

#[derive(Debug, Clone, Default)]
pub struct ReferenceEncoder;

impl Encoder for ReferenceEncoder {
    fn id(&self) -> String {
        REFERENCE_ENCODER_ID.to_string()
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        Ok(texts.iter().map(|t| encode_reference(t)).collect())
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Client for the batch protocol `POST {texts} -> {embeddings}`. Wrong
/// dimensionality from the provider is a hard error, never padded or
/// truncated.
#[derive(Debug, Clone)]
pub struct RemoteEncoder {
    pub cfg: ProviderConfig,
}

impl Encoder for RemoteEncoder {
    fn id(&self) -> String {
        format!("remote:{}", self.cfg.model)
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.cfg.validate()?;
        let client = http_client();
        let resp: EmbedResponse = post_json_with_retry(
            &client,
            &self.cfg.endpoint,
            self.cfg.auth_token().as_deref(),
            &EmbedRequest { texts },
            &self.cfg.retry,
        )
        .map_err(Error::Provider)?;
        if resp.embeddings.len() != texts.len() {
            return Err(Error::Provider(format!(
                "provider returned {} embeddings for {} texts",
                resp.embeddings.len(),
                texts.len()
            )));
        }
        resp.embeddings
            .into_iter()
            .map(|v| Embedding::new(v, EmbeddingSource::Remote))
            .collect()
    }
}

/// Cache wrapper: embeddings stored one file per hash(text + encoder id).
/// With a fully populated store the inner encoder is never called.
pub struct CachedEncoder<E: Encoder> {
    inner: E,
    store: FixtureStore,
}

impl<E: Encoder> CachedEncoder<E> {
    pub fn new(inner: E, dir: &std::path::Path) -> Result<Self> {
        Ok(CachedEncoder {
            inner,
            store: FixtureStore::open(dir)?,
        })
    }
}

impl<E: Encoder> Encoder for CachedEncoder<E> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let id = self.inner.id();
        let keys: Vec<String> = texts
            .iter()
            .map(|t| FixtureStore::key(&[t, &id]))
            .collect();
        let mut out: Vec<Option<Embedding>> = Vec::with_capacity(texts.len());
        let mut misses: Vec<usize> = Vec::new();
        for (i, key) in keys.iter().enumerate() {
            match self.store.get::<Embedding>(key)? {
                Some(e) => out.push(Some(e)),
                None => {
                    out.push(None);
                    misses.push(i);
                }
            }
        }
        if !misses.is_empty() {
            let miss_texts: Vec<String> = misses.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.encode(&miss_texts)?;
            for (&i, emb) in misses.iter().zip(fresh) {
                self.store.put(&keys[i], &emb)?;
                out[i] = Some(emb);
            }
        }
        Ok(out.into_iter().map(|e| e.unwrap()).collect())
    }
}

/// Remote encoding with the fixture semantics of the captioning client:
/// when `cfg.fixture_dir` is set, responses replay from the store and new
/// ones are recorded.
pub fn encode_remote(texts: &[String], cfg: &ProviderConfig) -> Result<Vec<Embedding>> {
    let remote = RemoteEncoder { cfg: cfg.clone() };
    match &cfg.fixture_dir {
        Some(dir) => CachedEncoder::new(remote, dir)?.encode(texts),
        None => remote.encode(texts),
    }
}
