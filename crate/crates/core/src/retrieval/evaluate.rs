use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{Metrics, Provenance, RankingResult, RetrievalError, RetrievalIndex};
use crate::data::{tokenize_aligned, FeatureRecord, NarrativeRecord, QueryInput, Vocabulary};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// When false, every query gets whole-canvas boxes instead of its trace.
    pub use_traces: bool,
    pub t_p: f64,
    pub s_p: f64,
    pub batch_size: usize,
    /// Length of the ranked list kept per query.
    pub keep: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { use_traces: true, t_p: 0.1, s_p: 0.05, batch_size: 32, keep: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub results: Vec<RankingResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub folds: Vec<Metrics>,
    pub mean: Metrics,
    pub std: Metrics,
}

/// Encodes queries for `records` in batches, dropout off.
pub fn encode_records(
    model: &Model<f32>,
    records: &[NarrativeRecord],
    vocab: &Vocabulary,
    opts: &EvalOptions,
) -> Result<Vec<Vec<f32>>, RetrievalError> {
    let k = model.config.max_tokens;
    let queries: Vec<QueryInput> = records
        .iter()
        .map(|r| {
            let trace = if opts.use_traces { Some(&r.trace) } else { None };
            QueryInput::build(&tokenize_aligned(r, vocab), trace, k, opts.t_p, opts.s_p)
        })
        .collect();
    let mut out = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(opts.batch_size.max(1)) {
        out.extend(crate::model::rows(&model.encode_query(chunk)?));
    }
    Ok(out)
}

/// Ranks every record's query against an index over `features` and aggregates the metrics.
pub fn evaluate(
    model: &Model<f32>,
    records: &[NarrativeRecord],
    features: &[FeatureRecord],
    vocab: &Vocabulary,
    opts: &EvalOptions,
) -> Result<EvalReport, RetrievalError> {
    if records.is_empty() {
        return Err(RetrievalError::EmptyResults);
    }
    let index = RetrievalIndex::build(model, features, opts.batch_size, Provenance::default())?;
    let embeddings = encode_records(model, records, vocab, opts)?;
    let results = records
        .iter()
        .zip(&embeddings)
        .map(|(r, q)| index.rank(&r.image_id, q, opts.keep, Some(&r.image_id)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport { metrics: Metrics::from_results(&results)?, results })
}

/// Splits the images into `folds` contiguous blocks, evaluates each against its own queries and averages.
pub fn evaluate_folds(
    model: &Model<f32>,
    records: &[NarrativeRecord],
    features: &[FeatureRecord],
    vocab: &Vocabulary,
    opts: &EvalOptions,
    folds: usize,
) -> Result<FoldReport, RetrievalError> {
    let folds = folds.clamp(1, features.len().max(1));
    let size = features.len().div_ceil(folds);
    let mut per_fold = Vec::with_capacity(folds);
    for block in features.chunks(size.max(1)) {
        let ids: BTreeSet<&str> = block.iter().map(|f| f.image_id.as_str()).collect();
        let fold_records: Vec<NarrativeRecord> =
            records.iter().filter(|r| ids.contains(r.image_id.as_str())).cloned().collect();
        per_fold.push(evaluate(model, &fold_records, block, vocab, opts)?.metrics);
    }
    let column = |f: fn(&Metrics) -> f64| mean_std(&per_fold.iter().map(f).collect::<Vec<_>>());
    let (r1, r5, r10, map) = (column(|m| m.r1), column(|m| m.r5), column(|m| m.r10), column(|m| m.map));
    Ok(FoldReport {
        mean: Metrics { r1: r1.0, r5: r5.0, r10: r10.0, map: map.0 },
        std: Metrics { r1: r1.1, r5: r5.1, r10: r10.1, map: map.1 },
        folds: per_fold,
    })
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Float::sqrt(var))
}
