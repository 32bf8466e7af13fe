//! Text embeddings: a deterministic hashed-trigram default and an optional
//! remote adapter.

use std::time::Duration;

use super::EvidenceError;

pub const TRIGRAM_DIM: usize = 256;

/// A unit-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Normalizes `components`; `None` for zero or non-finite input.
    pub fn normalized(components: Vec<f64>) -> Option<Vector> {
        let norm = components.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(Vector(components.into_iter().map(|c| c / norm).collect()))
    }

    pub fn basis(dim: usize, axis: usize) -> Vector {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        Vector(v)
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Vector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vector, EvidenceError>;
}

/// Character-trigram term frequencies hashed into 256 buckets.
///
/// Text is lowercased and padded with `#` on both sides. Bucket 0 is
/// reserved for the empty string so every output has unit norm.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrigramEmbedder;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl TrigramEmbedder {
    pub fn vector(&self, text: &str) -> Vector {
        if text.is_empty() {
            return Vector::basis(TRIGRAM_DIM, 0);
        }
        let padded: Vec<char> = format!("#{}#", text.to_lowercase()).chars().collect();
        let mut counts = vec![0.0; TRIGRAM_DIM];
        for w in padded.windows(3) {
            let gram: String = w.iter().collect();
            let bucket = 1 + (fnv1a(gram.as_bytes()) % (TRIGRAM_DIM as u64 - 1)) as usize;
            counts[bucket] += 1.0;
        }
        Vector::normalized(counts).expect("at least one trigram")
    }
}

impl Embedder for TrigramEmbedder {
    fn dim(&self) -> usize {
        TRIGRAM_DIM
    }

    fn embed(&self, text: &str) -> Result<Vector, EvidenceError> {
        Ok(self.vector(text))
    }
}

/// Calls an OpenAI-style `/embeddings` endpoint.
pub struct RemoteEmbedder {
    url: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(
        url: &str,
        model: &str,
        api_key: Option<String>,
        dim: usize,
        timeout: Duration,
    ) -> Result<Self, EvidenceError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EvidenceError::Remote(e.to_string()))?;
        Ok(RemoteEmbedder {
            url: url.to_string(),
            model: model.to_string(),
            api_key,
            dim,
            client,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vector, EvidenceError> {
        let remote = |m: String| EvidenceError::Remote(m);
        let mut req = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({"model": self.model, "input": text}));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| remote(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(remote(format!("status {}", resp.status())));
        }
        let body: serde_json::Value = resp.json().map_err(|e| remote(e.to_string()))?;
        let comps: Vec<f64> = body["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| remote("response lacks data[0].embedding".into()))?
            .iter()
            .map(|c| c.as_f64().ok_or_else(|| remote("non-numeric component".into())))
            .collect::<Result<_, _>>()?;
        if comps.len() != self.dim {
            return Err(EvidenceError::DimensionMismatch {
                expected: self.dim,
                found: comps.len(),
            });
        }
        Vector::normalized(comps).ok_or_else(|| remote("zero embedding".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigram_vectors_are_unit_norm() {
        let e = TrigramEmbedder;
        for text in ["", "a", "user.name", "Übergröße"] {
            let v = e.vector(text);
            let norm: f64 = v.components().iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "{text}");
            assert_eq!(v.dim(), TRIGRAM_DIM);
        }
        assert_eq!(e.vector(""), Vector::basis(TRIGRAM_DIM, 0));
        assert_eq!(e.vector("x").components()[0], 0.0);
    }

    #[test]
    fn similarity_ordering() {
        let e = TrigramEmbedder;
        let q = e.vector("user.name");
        assert!((q.cosine(&q) - 1.0).abs() < 1e-12);
        assert!(q.cosine(&e.vector("user.fullName")) > q.cosine(&e.vector("order.total")));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
