//! Exact dot-product ranking, Recall@K and mAP.

mod evaluate;

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};

pub use evaluate::{encode_records, evaluate, evaluate_folds, mean_std, EvalOptions, EvalReport, FoldReport};

use crate::data::FeatureRecord;
use crate::model::{Model, ModelError};

/// Where an index's embeddings came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub features: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RetrievalError {
    EmptyIndex,
    EmptyResults,
    DuplicateId(String),
    RowCount { ids: usize, rows: usize },
    Dimension { expected: usize, got: usize },
    MissingTarget(String),
    UnknownTarget(String),
    Model(ModelError),
}

impl fmt::Display for RetrievalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RetrievalError::EmptyIndex => f.write_str("index is empty"),
            RetrievalError::EmptyResults => f.write_str("no ranking results to score"),
            RetrievalError::DuplicateId(id) => write!(f, "image id {id} appears twice"),
            RetrievalError::RowCount { ids, rows } => write!(f, "{ids} ids but {rows} embedding rows"),
            RetrievalError::Dimension { expected, got } => {
                write!(f, "query embedding has {got} dimensions, index has {expected}")
            }
            RetrievalError::MissingTarget(q) => write!(f, "result for query {q} has no target"),
            RetrievalError::UnknownTarget(t) => write!(f, "target image {t} is not in the index"),
            RetrievalError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for RetrievalError {}

impl From<ModelError> for RetrievalError {
    fn from(e: ModelError) -> Self {
        RetrievalError::Model(e)
    }
}

/// Immutable image-embedding matrix, row `i` belonging to `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    dim: usize,
    embeddings: Vec<f32>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query_id: String,
    /// Top-k `(image id, score)`, scores non-increasing, ties by ascending id.
    pub ranked: Vec<(String, f32)>,
    /// 1-based position of the target over the full ranking.
    pub rank_of_target: Option<usize>,
}

fn order(a: (f32, &str), b: (f32, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl RetrievalIndex {
    pub fn new(
        ids: Vec<String>,
        dim: usize,
        embeddings: Vec<f32>,
        provenance: Provenance,
    ) -> Result<Self, RetrievalError> {
        if ids.len() * dim != embeddings.len() {
            return Err(RetrievalError::RowCount { ids: ids.len(), rows: embeddings.len() / dim.max(1) });
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::DuplicateId(id.clone()));
            }
        }
        Ok(Self { ids, dim, embeddings, provenance })
    }

    /// Encodes every image with dropout off, `batch_size` at a time, keeping feature order.
    pub fn build(
        model: &Model<f32>,
        features: &[FeatureRecord],
        batch_size: usize,
        provenance: Provenance,
    ) -> Result<Self, RetrievalError> {
        if features.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let dim = model.config.embed_dim;
        let mut embeddings = Vec::with_capacity(features.len() * dim);
        for chunk in features.chunks(batch_size.max(1)) {
            embeddings.extend_from_slice(model.encode_image(chunk)?.values());
        }
        let ids = features.iter().map(|f| f.image_id.clone()).collect();
        Self::new(ids, dim, embeddings, provenance)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Dot product of `query` with every row.
    pub fn scores(&self, query: &[f32]) -> Result<Vec<f32>, RetrievalError> {
        if query.len() != self.dim {
            return Err(RetrievalError::Dimension { expected: self.dim, got: query.len() });
        }
        Ok((0..self.len())
            .map(|i| self.embedding(i).iter().zip(query).fold(0.0f32, |acc, (a, b)| acc + a * b))
            .collect())
    }

    /// Top-`k` images for `query` (k clamped to the index size) plus the target's full-list rank.
    pub fn rank(
        &self,
        query_id: &str,
        query: &[f32],
        k: usize,
        target: Option<&str>,
    ) -> Result<RankingResult, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let scores = self.scores(query)?;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| order((scores[a], &self.ids[a]), (scores[b], &self.ids[b])));
        let k = k.clamp(1, self.len());
        let ranked = idx[..k].iter().map(|&i| (self.ids[i].clone(), scores[i])).collect();
        let rank_of_target = match target {
            None => None,
            Some(t) => {
                let ti = self.position(t).ok_or_else(|| RetrievalError::UnknownTarget(t.into()))?;
                let ahead = (0..self.len())
                    .filter(|&i| order((scores[i], &self.ids[i]), (scores[ti], t)) == Ordering::Less)
                    .count();
                Some(ahead + 1)
            }
        };
        Ok(RankingResult { query_id: query_id.into(), ranked, rank_of_target })
    }
}

fn target_ranks(results: &[RankingResult]) -> Result<Vec<usize>, RetrievalError> {
    if results.is_empty() {
        return Err(RetrievalError::EmptyResults);
    }
    results.iter().map(|r| r.rank_of_target.ok_or_else(|| RetrievalError::MissingTarget(r.query_id.clone()))).collect()
}

/// Percentage of results whose target ranks within the top `k`.
pub fn recall_at_k(results: &[RankingResult], k: usize) -> Result<f64, RetrievalError> {
    let ranks = target_ranks(results)?;
    Ok(100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank of the single relevant image per query.
pub fn mean_average_precision(results: &[RankingResult]) -> Result<f64, RetrievalError> {
    let ranks = target_ranks(results)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
}

impl Metrics {
    pub fn from_results(results: &[RankingResult]) -> Result<Self, RetrievalError> {
        Ok(Self {
            r1: recall_at_k(results, 1)?,
            r5: recall_at_k(results, 5)?,
            r10: recall_at_k(results, 10)?,
            map: mean_average_precision(results)?,
        })
    }

    /// `(name, value)` pairs in report order.
    pub fn entries(&self) -> [(&'static str, f64); 4] {
        [("R@1", self.r1), ("R@5", self.r5), ("R@10", self.r10), ("mAP", self.map)]
    }
}
