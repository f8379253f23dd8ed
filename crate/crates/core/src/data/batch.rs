use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::records::{FeatureRecord, NarrativeRecord};
use super::vocab::{tokenize_aligned, Vocabulary, PAD_ID};
use crate::geometry::{boxes_for_query, MouseTrace, TimedToken, TraceBox};

/// Query side of one example, padded or truncated to `K` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryInput {
    pub token_ids: Vec<u32>,
    pub token_mask: Vec<bool>,
    pub boxes: Vec<TraceBox>,
    pub box_valid: Vec<bool>,
}

impl QueryInput {
    /// Keeps the first `k` tokens; boxes come from `trace`, or the whole canvas when absent.
    pub fn build(tokens: &[TimedToken], trace: Option<&MouseTrace>, k: usize, t_p: f64, s_p: f64) -> Self {
        let kept = &tokens[..tokens.len().min(k)];
        let mut boxes = match trace {
            Some(trace) => boxes_for_query(kept, trace, t_p, s_p),
            None => vec![TraceBox::WHOLE; kept.len()],
        };
        let mut token_ids: Vec<u32> = kept.iter().map(|t| t.token_id).collect();
        let mut token_mask = vec![true; kept.len()];
        let mut box_valid = vec![true; kept.len()];
        token_ids.resize(k, PAD_ID);
        token_mask.resize(k, false);
        boxes.resize(k, TraceBox::WHOLE);
        box_valid.resize(k, false);
        Self { token_ids, token_mask, boxes, box_valid }
    }

    /// All-padding query used to fill a final evaluation batch.
    pub fn dummy(k: usize) -> Self {
        Self::build(&[], None, k, 0.0, 0.0)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn real_tokens(&self) -> usize {
        self.token_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub queries: Vec<QueryInput>,
    pub images: Vec<FeatureRecord>,
    pub targets: Vec<String>,
    /// False for padding examples that must not count in metrics.
    pub real: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchConfig {
    pub max_tokens: usize,
    pub batch_size: usize,
    pub t_p: f64,
    pub s_p: f64,
    pub permute_regions: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchError {
    MissingFeatures(String),
    Empty,
    ZeroBatch,
}

impl fmt::Display for BatchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchError::MissingFeatures(id) => write!(f, "no feature record for image {id}"),
            BatchError::Empty => f.write_str("no records to batch"),
            BatchError::ZeroBatch => f.write_str("batch size must be positive"),
        }
    }
}

impl core::error::Error for BatchError {}

/// Pre-tokenized examples plus the features they point at.
#[derive(Debug, Clone)]
pub struct Batcher {
    queries: Vec<QueryInput>,
    feature_of: Vec<usize>,
    targets: Vec<String>,
    features: Vec<FeatureRecord>,
    cfg: BatchConfig,
}

impl Batcher {
    pub fn new(
        records: &[NarrativeRecord],
        features: &[FeatureRecord],
        vocab: &Vocabulary,
        cfg: BatchConfig,
    ) -> Result<Self, BatchError> {
        if cfg.batch_size == 0 {
            return Err(BatchError::ZeroBatch);
        }
        if records.is_empty() {
            return Err(BatchError::Empty);
        }
        let by_id: BTreeMap<&str, usize> = features.iter().enumerate().map(|(i, f)| (f.image_id.as_str(), i)).collect();
        let mut queries = Vec::with_capacity(records.len());
        let mut feature_of = Vec::with_capacity(records.len());
        let mut targets = Vec::with_capacity(records.len());
        for r in records {
            let fi = *by_id.get(r.image_id.as_str()).ok_or_else(|| BatchError::MissingFeatures(r.image_id.clone()))?;
            let toks = tokenize_aligned(r, vocab);
            queries.push(QueryInput::build(&toks, Some(&r.trace), cfg.max_tokens, cfg.t_p, cfg.s_p));
            feature_of.push(fi);
            targets.push(r.image_id.clone());
        }
        Ok(Self { queries, feature_of, targets, features: features.to_vec(), cfg })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn config(&self) -> &BatchConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.queries.len() / self.cfg.batch_size
    }

    /// Shuffled training batches for `epoch`; the final partial batch is dropped.
    pub fn train_epoch(&self, epoch: u64) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.queries.len()).collect();
        order.shuffle(&mut rng);
        order
            .chunks_exact(self.cfg.batch_size)
            .map(|chunk| {
                let mut images = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let mut f = self.features[self.feature_of[i]].clone();
                    if self.cfg.permute_regions {
                        // feature, geometry and validity move together; the global entry is separate
                        f.regions.shuffle(&mut rng);
                    }
                    images.push(f);
                }
                Batch {
                    queries: chunk.iter().map(|&i| self.queries[i].clone()).collect(),
                    images,
                    targets: chunk.iter().map(|&i| self.targets[i].clone()).collect(),
                    real: vec![true; chunk.len()],
                }
            })
            .collect()
    }

    /// In-order batches; the last one is padded with dummy examples flagged not real.
    pub fn eval_batches(&self) -> Vec<Batch> {
        let b = self.cfg.batch_size;
        let mut out = Vec::new();
        for start in (0..self.queries.len()).step_by(b) {
            let end = (start + b).min(self.queries.len());
            let mut batch = Batch {
                queries: self.queries[start..end].to_vec(),
                images: (start..end).map(|i| self.features[self.feature_of[i]].clone()).collect(),
                targets: self.targets[start..end].to_vec(),
                real: vec![true; end - start],
            };
            while batch.queries.len() < b {
                batch.queries.push(QueryInput::dummy(self.cfg.max_tokens));
                batch.images.push(self.features[self.feature_of[0]].clone());
                batch.targets.push(String::new());
                batch.real.push(false);
            }
            out.push(batch);
        }
        out
    }

    pub fn query(&self, i: usize) -> &QueryInput {
        &self.queries[i]
    }

    pub fn target(&self, i: usize) -> &str {
        &self.targets[i]
    }
}
