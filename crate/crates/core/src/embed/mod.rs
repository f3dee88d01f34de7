//! Patch embeddings and the per-pair cosine-similarity timeline.
//!
//! Three backends map a tube slice to a unit feature vector:
//!
//! * [`BuiltinBackend`]: a fixed colour-layout plus gradient-orientation
//!   descriptor, no external dependencies.
//! * [`ImportBackend`]: vectors computed offline (e.g. penultimate-layer CNN
//!   features) and stored in the binary embedding table format.
//! * [`ExternalBackend`]: a child process speaking the stdin/stdout record
//!   protocol in [`external`].

mod descriptor;
pub mod external;
mod table;

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze::{AlignedPair, Nanos, Participant};
use crate::tube::TubeSlice;

pub use descriptor::{embed_builtin, BUILTIN_DIM, GRID};
pub use external::ExternalBackend;
pub use table::{embed_import, EmbeddingTable, TABLE_MAGIC, TABLE_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("feature vector has zero norm")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no embedding for timestamp {0}")]
    MissingEmbedding(Nanos),
    #[error("participant {participant} has no tube slice at {timestamp}")]
    MissingSlice { participant: Participant, timestamp: Nanos },
    #[error("duplicate embedding for timestamp {0}")]
    DuplicateTimestamp(Nanos),
    #[error("embedding table: {0}")]
    Table(String),
    #[error("external model: {0}")]
    External(String),
}

/// L2-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    backend_id: String,
}

impl FeatureVector {
    /// Normalizes `values`; an all-zero or non-finite vector is rejected.
    pub fn normalized(mut values: Vec<f64>, backend_id: impl Into<String>) -> Result<Self, EmbedError> {
        let norm = l2(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::ZeroVector);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { values, backend_id: backend_id.into() })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine of the angle between two raw vectors, clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    let denom = l2(a) * l2(b);
    if denom == 0.0 || !denom.is_finite() {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64, EmbedError> {
    cosine(&a.values, &b.values)
}

/// Maps tube slices to feature vectors.
pub trait EmbeddingBackend: Sync {
    fn id(&self) -> String;

    /// One result per input slice, in input order.
    fn embed_batch(&self, participant: Participant, slices: &[&TubeSlice]) -> Vec<Result<FeatureVector, EmbedError>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinBackend;

impl EmbeddingBackend for BuiltinBackend {
    fn id(&self) -> String {
        descriptor::BUILTIN_ID.to_string()
    }

    fn embed_batch(&self, _: Participant, slices: &[&TubeSlice]) -> Vec<Result<FeatureVector, EmbedError>> {
        use rayon::prelude::*;
        slices.par_iter().map(|s| embed_builtin(s)).collect()
    }
}

/// Precomputed vectors, one table per participant, keyed by slice timestamp.
#[derive(Debug, Clone)]
pub struct ImportBackend {
    pub table_a: EmbeddingTable,
    pub table_b: EmbeddingTable,
}

impl EmbeddingBackend for ImportBackend {
    fn id(&self) -> String {
        format!("import-d{}", self.table_a.dim())
    }

    fn embed_batch(&self, participant: Participant, slices: &[&TubeSlice]) -> Vec<Result<FeatureVector, EmbedError>> {
        let table = match participant {
            Participant::A => &self.table_a,
            Participant::B => &self.table_b,
        };
        slices.iter().map(|s| embed_import(s.timestamp, table)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorPolicy {
    #[default]
    Abort,
    /// Drop the offending pair and log it.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityEntry {
    pub ts_a: Nanos,
    pub ts_b: Nanos,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedPair {
    pub ts_a: Nanos,
    pub ts_b: Nanos,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTimeline {
    /// Ordered by `ts_a`.
    pub entries: Vec<SimilarityEntry>,
    pub backend_id: String,
    pub skipped: Vec<SkippedPair>,
}

impl SimilarityTimeline {
    pub fn pair_count(&self) -> usize {
        self.entries.len()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }
}

fn find_slice(tube: &[TubeSlice], ts: Nanos) -> Option<&TubeSlice> {
    tube.binary_search_by_key(&ts, |s| s.timestamp).ok().map(|i| &tube[i])
}

/// Embeds each slice referenced by `pairs` once and scores every pair.
/// Both tubes must be ordered by timestamp.
pub fn similarity_timeline(
    tube_a: &[TubeSlice],
    tube_b: &[TubeSlice],
    pairs: &[AlignedPair],
    backend: &dyn EmbeddingBackend,
    policy: ErrorPolicy,
) -> Result<SimilarityTimeline, EmbedError> {
    let embed_side = |participant: Participant, tube: &[TubeSlice], pick: fn(&AlignedPair) -> Nanos| {
        let mut wanted: Vec<Nanos> = pairs.iter().map(pick).collect();
        wanted.sort_unstable();
        wanted.dedup();
        let slices: Vec<&TubeSlice> = wanted.iter().filter_map(|&t| find_slice(tube, t)).collect();
        let vectors = backend.embed_batch(participant, &slices);
        slices.iter().map(|s| s.timestamp).zip(vectors).collect::<HashMap<Nanos, Result<FeatureVector, EmbedError>>>()
    };
    let emb_a = embed_side(Participant::A, tube_a, |p| p.ts_a);
    let emb_b = embed_side(Participant::B, tube_b, |p| p.ts_b);

    let lookup = |map: &HashMap<Nanos, Result<FeatureVector, EmbedError>>,
                  participant,
                  timestamp|
     -> Result<FeatureVector, EmbedError> {
        map.get(&timestamp).cloned().unwrap_or(Err(EmbedError::MissingSlice { participant, timestamp }))
    };

    let mut entries = Vec::with_capacity(pairs.len());
    let mut skipped = Vec::new();
    for pair in pairs {
        let score = lookup(&emb_a, Participant::A, pair.ts_a)
            .and_then(|a| lookup(&emb_b, Participant::B, pair.ts_b).and_then(|b| cosine_similarity(&a, &b)));
        match (score, policy) {
            (Ok(score), _) => entries.push(SimilarityEntry { ts_a: pair.ts_a, ts_b: pair.ts_b, score }),
            (Err(e), ErrorPolicy::Abort) => return Err(e),
            (Err(e), ErrorPolicy::Skip) => {
                warn!("similarity: skipping pair ({}, {}): {e}", pair.ts_a, pair.ts_b);
                skipped.push(SkippedPair { ts_a: pair.ts_a, ts_b: pair.ts_b, reason: e.to_string() });
            }
        }
    }
    entries.sort_by_key(|e| (e.ts_a, e.ts_b));
    Ok(SimilarityTimeline { entries, backend_id: backend.id(), skipped })
}
