//! Task queries and their embeddings.
//!
//! Embeddings come from an external file (task_id -> vector) when one is
//! supplied; otherwise a deterministic fallback expands a hash of the query
//! text into the configured dimension, with entries in [-1, 1].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default embedding dimension, matching the external sentence encoder.
pub const DEFAULT_EMBEDDING_DIM: usize = 384;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("embedding file {path}: {message}")]
    EmbeddingFile { path: String, message: String },
    #[error("embedding for task {task_id:?} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        task_id: String,
        got: usize,
        expected: usize,
    },
}

/// A task query with its dense embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryContext {
    pub text: String,
    pub embedding: Vec<f64>,
    pub task_id: String,
}

/// 64-bit FNV-1a. Used for the fallback embedder and artifact hashing.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Deterministic text embedding: hash of `(text, index)` mapped to [-1, 1]
/// per dimension. Distinct texts almost surely get distinct vectors.
pub fn fallback_embedding(text: &str, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let mut buf = text.as_bytes().to_vec();
            buf.extend_from_slice(&(i as u64).to_le_bytes());
            let h = fnv1a64(&buf);
            (h as f64 / u64::MAX as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Resolves query embeddings from an optional table with fallback hashing.
#[derive(Debug, Clone, Default)]
pub struct QueryEmbedder {
    dim: usize,
    table: Option<BTreeMap<String, Vec<f64>>>,
}

impl QueryEmbedder {
    pub fn fallback(dim: usize) -> Self {
        Self { dim, table: None }
    }

    pub fn from_file(path: &Path, dim: usize) -> Result<Self, QueryError> {
        let text = std::fs::read_to_string(path).map_err(|e| QueryError::EmbeddingFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let table: BTreeMap<String, Vec<f64>> =
            serde_json::from_str(&text).map_err(|e| QueryError::EmbeddingFile {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        for (task_id, v) in &table {
            if v.len() != dim {
                return Err(QueryError::DimensionMismatch {
                    task_id: task_id.clone(),
                    got: v.len(),
                    expected: dim,
                });
            }
        }
        Ok(Self {
            dim,
            table: Some(table),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, task_id: &str, text: &str) -> QueryContext {
        let embedding = self
            .table
            .as_ref()
            .and_then(|t| t.get(task_id).cloned())
            .unwrap_or_else(|| fallback_embedding(text, self.dim));
        QueryContext {
            text: text.to_string(),
            embedding,
            task_id: task_id.to_string(),
        }
    }
}
