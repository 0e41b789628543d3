//! Vector storage and deterministic similarity search.
//!
//! Exhaustive scan only — the graphs here are on the order of 10³ entities,
//! so approximate indexing is unjustified. Vectors are L2-normalized on
//! insert; the zero vector is legal (absent embeddings) and always ranks last.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{EndpointRole, GatewayError, MediaPart, ModelGateway, ModelRequest};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {actual}{}", key_suffix(.key))]
    DimMismatch {
        expected: usize,
        actual: usize,
        key: Option<String>,
    },
    #[error("duplicate key {key:?}")]
    DuplicateKey { key: String },
    #[error("non-finite component in vector{}", key_suffix(.key))]
    NonFinite { key: Option<String> },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn key_suffix(key: &Option<String>) -> String {
    match key {
        Some(k) => format!(" for key {k:?}"),
        None => String::new(),
    }
}

/// An L2-normalized embedding (or the zero vector for absent embeddings).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalizes the input to unit length; an all-zero input stays zero.
    pub fn new(values: Vec<f64>) -> Result<Self, IndexError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite { key: None });
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let values = if norm > 0.0 {
            values.iter().map(|v| v / norm).collect()
        } else {
            values
        };
        Ok(EmbeddingVector { values })
    }

    pub fn zero(dim: usize) -> Self {
        EmbeddingVector {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Cosine similarity of two stored vectors. Since stored vectors are unit
/// length (or zero), this is their inner product; zero-vector pairs score 0.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
            key: None,
        });
    }
    Ok(a.values
        .iter()
        .zip(b.values.iter())
        .map(|(x, y)| x * y)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// A fixed-dimension map from keys to embedding vectors.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    dim: usize,
    modality: Modality,
    vectors: BTreeMap<String, EmbeddingVector>,
}

impl VectorIndex {
    pub fn new(dim: usize, modality: Modality) -> Self {
        VectorIndex {
            dim,
            modality,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, key: String, vector: EmbeddingVector) -> Result<(), IndexError> {
        if vector.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                actual: vector.dim(),
                key: Some(key),
            });
        }
        if self.vectors.contains_key(&key) {
            return Err(IndexError::DuplicateKey { key });
        }
        self.vectors.insert(key, vector);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&EmbeddingVector> {
        self.vectors.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &EmbeddingVector)> {
        self.vectors.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.vectors.keys()
    }
}

/// Exhaustive top-k scan: descending score, ties broken by ascending key,
/// `min(k, len)` results.
pub fn top_k(
    index: &VectorIndex,
    query: &EmbeddingVector,
    k: usize,
) -> Result<Vec<(String, f64)>, IndexError> {
    if query.dim() != index.dim() {
        return Err(IndexError::DimMismatch {
            expected: index.dim(),
            actual: query.dim(),
            key: None,
        });
    }
    let mut scored: Vec<(String, f64)> = Vec::with_capacity(index.len());
    for (key, vector) in index.iter() {
        scored.push((key.clone(), cosine(query, vector)?));
    }
    scored.sort_by(|(ka, sa), (kb, sb)| {
        sb.partial_cmp(sa)
            .expect("scores are finite")
            .then_with(|| ka.cmp(kb))
    });
    scored.truncate(k);
    Ok(scored)
}

#[derive(Debug, Serialize, Deserialize)]
struct VectorRecord {
    key: String,
    dim: usize,
    values: Vec<f64>,
}

/// Loads a JSONL vector file of `{key, dim, values}` records, normalizing
/// every vector on insert.
pub fn load_vectors(
    path: &Path,
    expected_dim: usize,
    modality: Modality,
) -> Result<VectorIndex, IndexError> {
    let file = std::fs::File::open(path).map_err(|e| IndexError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut index = VectorIndex::new(expected_dim, modality);
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| IndexError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: VectorRecord =
            serde_json::from_str(&line).map_err(|e| IndexError::Parse {
                path: path.display().to_string(),
                line: line_no + 1,
                message: e.to_string(),
            })?;
        if record.dim != expected_dim || record.values.len() != record.dim {
            return Err(IndexError::DimMismatch {
                expected: expected_dim,
                actual: record.values.len(),
                key: Some(record.key),
            });
        }
        let vector = EmbeddingVector::new(record.values).map_err(|_| IndexError::NonFinite {
            key: Some(record.key.clone()),
        })?;
        index.insert(record.key, vector)?;
    }
    Ok(index)
}

pub fn save_vectors(index: &VectorIndex, path: &Path) -> Result<(), IndexError> {
    let mut out = String::new();
    for (key, vector) in index.iter() {
        let record = VectorRecord {
            key: key.clone(),
            dim: vector.dim(),
            values: vector.values().to_vec(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| IndexError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Payload sent to an embedding endpoint.
#[derive(Debug, Clone)]
pub enum EmbedPayload {
    Text(String),
    /// Raw media bytes with a stable name (used for digests and routing).
    Media { name: String, bytes: Vec<u8> },
}

impl EmbedPayload {
    fn content_hash(&self, modality: Modality) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(match modality {
            Modality::Text => b"text\0".as_slice(),
            Modality::Image => b"image\0".as_slice(),
        });
        match self {
            EmbedPayload::Text(text) => hasher.update(text.as_bytes()),
            EmbedPayload::Media { name, bytes } => {
                hasher.update(name.as_bytes());
                hasher.update(b"\0");
                hasher.update(bytes);
            }
        }
        hasher.finalize().into()
    }
}

#[derive(Debug, Deserialize)]
struct EmbeddingBody {
    dim: usize,
    values: Vec<f64>,
}

/// Gateway-backed embedder with a per-run content-hash cache.
///
/// The cache is internally synchronized; repeated embeddings of identical
/// payloads cost one gateway call.
pub struct Embedder<'g> {
    gateway: &'g ModelGateway,
    modality: Modality,
    expected_dim: Option<usize>,
    cache: Mutex<HashMap<[u8; 32], EmbeddingVector>>,
}

impl<'g> Embedder<'g> {
    pub fn new(gateway: &'g ModelGateway, modality: Modality, expected_dim: Option<usize>) -> Self {
        Embedder {
            gateway,
            modality,
            expected_dim,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn embed(&self, payload: &EmbedPayload) -> Result<EmbeddingVector, IndexError> {
        let key = payload.content_hash(self.modality);
        if let Some(hit) = self.cache.lock().expect("embed cache lock").get(&key) {
            return Ok(hit.clone());
        }

        let role = match self.modality {
            Modality::Text => EndpointRole::TextEmbed,
            Modality::Image => EndpointRole::ImageEmbed,
        };
        let request = match payload {
            EmbedPayload::Text(text) => ModelRequest::payload(role, text.clone()),
            EmbedPayload::Media { name, bytes } => ModelRequest::payload(role, String::new())
                .with_media(MediaPart::bytes(name.clone(), bytes.clone())),
        };
        let body = self.gateway.call(&request)?;
        let parsed: EmbeddingBody =
            serde_json::from_str(crate::gateway::extract_json_slice(&body)).map_err(|e| {
                GatewayError::MalformedJson {
                    message: format!("embedding body: {e}"),
                }
            })?;
        if parsed.values.len() != parsed.dim {
            return Err(IndexError::DimMismatch {
                expected: parsed.dim,
                actual: parsed.values.len(),
                key: None,
            });
        }
        if let Some(expected) = self.expected_dim {
            if parsed.dim != expected {
                return Err(IndexError::DimMismatch {
                    expected,
                    actual: parsed.dim,
                    key: None,
                });
            }
        }
        let vector = EmbeddingVector::new(parsed.values)?;
        self.cache
            .lock()
            .expect("embed cache lock")
            .insert(key, vector.clone());
        Ok(vector)
    }
}
