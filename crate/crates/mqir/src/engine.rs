//! Caption + trace queries against a loaded checkpoint and index.
//!
//! Both the `query` subcommand and the HTTP service go through [`QueryEngine::query`].

use mqir_core::data::{normalize_text, tokenize_aligned, NarrativeRecord, QueryInput, TimedWord, Vocabulary};
use mqir_core::geometry::{boxes_for_query, MouseTrace, TracePoint};
use mqir_core::model::Model;
use mqir_core::retrieval::{RetrievalError, RetrievalIndex};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Seconds assigned to each word when a request carries no timings.
pub const SECONDS_PER_WORD: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryRequest {
    pub caption: String,
    /// One `[t_start, t_end]` per whitespace-separated caption word.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Vec<[f64; 2]>>,
    /// `[x, y, t]` samples; absent or empty means whole-canvas boxes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_p: Option<f64>,
    /// When set, the response reports this image's 1-based rank.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultItem {
    pub image_id: String,
    pub score: f32,
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<ResultItem>,
    pub trace_used: bool,
    pub model_id: String,
    pub elapsed_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_of_target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBox {
    pub token: String,
    pub t_start: f64,
    pub t_end: f64,
    /// `(xmin, ymin, xmax, ymax, area)`.
    #[serde(rename = "box")]
    pub bbox: [f64; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxesResponse {
    pub tokens: Vec<TokenBox>,
    pub trace_used: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QueryError {
    #[error("field \"{field}\": {msg}")]
    BadField { field: String, msg: String },
    #[error("body is not valid JSON: {0}")]
    BadJson(String),
    #[error("caption has no words")]
    EmptyCaption,
    #[error("{0}")]
    Internal(String),
}

fn bad(field: &str, msg: impl Into<String>) -> QueryError {
    QueryError::BadField { field: field.to_string(), msg: msg.into() }
}

fn number_rows<const N: usize>(v: &Value, field: &str) -> Result<Vec<[f64; N]>, QueryError> {
    let arr = v.as_array().ok_or_else(|| bad(field, "expected an array"))?;
    arr.iter()
        .enumerate()
        .map(|(i, row)| {
            let row = row
                .as_array()
                .filter(|r| r.len() == N)
                .ok_or_else(|| bad(field, format!("entry {i} is not a {N}-element array")))?;
            let mut out = [0.0; N];
            for (j, x) in row.iter().enumerate() {
                out[j] = x
                    .as_f64()
                    .filter(|f| f.is_finite())
                    .ok_or_else(|| bad(field, format!("entry {i} element {j} is not a finite number")))?;
            }
            Ok(out)
        })
        .collect()
}

fn opt_f64(obj: &Map<String, Value>, field: &str) -> Result<Option<f64>, QueryError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_f64()
            .filter(|f| *f >= 0.0 && f.is_finite())
            .map(Some)
            .ok_or_else(|| bad(field, "expected a non-negative number")),
    }
}

impl QueryRequest {
    pub const FIELDS: [&'static str; 7] = ["caption", "timings", "trace", "k", "t_p", "s_p", "target_id"];

    /// Strict parse: every problem names the offending field, unknown fields included.
    pub fn from_json(bytes: &[u8]) -> Result<Self, QueryError> {
        let value: Value = serde_json::from_slice(bytes).map_err(|e| QueryError::BadJson(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| QueryError::BadJson("expected a JSON object".into()))?;
        if let Some(extra) = obj.keys().find(|k| !Self::FIELDS.contains(&k.as_str())) {
            return Err(bad(extra, "unknown field"));
        }
        let caption = obj
            .get("caption")
            .ok_or_else(|| bad("caption", "missing"))?
            .as_str()
            .ok_or_else(|| bad("caption", "expected a string"))?
            .to_string();
        let timings = match obj.get("timings") {
            None | Some(Value::Null) => None,
            Some(v) => Some(number_rows::<2>(v, "timings")?),
        };
        let trace = match obj.get("trace") {
            None | Some(Value::Null) => None,
            Some(v) => Some(number_rows::<3>(v, "trace")?),
        };
        let k = match obj.get("k") {
            None | Some(Value::Null) => None,
            Some(v) => {
                Some(v.as_u64().filter(|&k| k >= 1).ok_or_else(|| bad("k", "expected a positive integer"))? as usize)
            }
        };
        let target_id = match obj.get("target_id") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_str().ok_or_else(|| bad("target_id", "expected a string"))?.to_string()),
        };
        Ok(Self { caption, timings, trace, k, t_p: opt_f64(obj, "t_p")?, s_p: opt_f64(obj, "s_p")?, target_id })
    }

    /// Turns the request into a narrative record, filling in timings and clipping the trace.
    pub fn to_record(&self) -> Result<NarrativeRecord, QueryError> {
        if normalize_text(&self.caption).is_empty() {
            return Err(QueryError::EmptyCaption);
        }
        let words: Vec<&str> = self.caption.split_whitespace().collect();
        let timed_words = match &self.timings {
            Some(t) if t.len() != words.len() => {
                return Err(bad("timings", format!("{} intervals for {} words", t.len(), words.len())))
            }
            Some(t) => words
                .iter()
                .zip(t)
                .map(|(w, [a, b])| TimedWord { word: w.to_string(), t_start: *a, t_end: *b })
                .collect(),
            None => words
                .iter()
                .enumerate()
                .map(|(i, w)| TimedWord {
                    word: w.to_string(),
                    t_start: SECONDS_PER_WORD * i as f64,
                    t_end: SECONDS_PER_WORD * (i + 1) as f64,
                })
                .collect(),
        };
        let points = self.trace.iter().flatten().map(|&[x, y, t]| TracePoint { x, y, t }).collect();
        let trace = MouseTrace::new(points).map_err(|e| bad("trace", e.to_string()))?;
        let record = NarrativeRecord { image_id: "query".into(), caption: self.caption.clone(), timed_words, trace };
        record.validate().map_err(|e| bad("timings", e.to_string()))?;
        Ok(record)
    }
}

/// Immutable query state: model, vocabulary, index and box defaults.
pub struct QueryEngine {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
    pub index: RetrievalIndex,
    pub model_id: String,
    pub t_p: f64,
    pub s_p: f64,
    /// Result count when the request does not name one.
    pub default_k: usize,
}

/// A ranking without timing, so two runs can be compared exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub results: Vec<ResultItem>,
    pub trace_used: bool,
    pub rank_of_target: Option<usize>,
}

impl QueryOutcome {
    pub fn into_response(self, model_id: &str, elapsed_ms: f64) -> QueryResponse {
        QueryResponse {
            results: self.results,
            trace_used: self.trace_used,
            model_id: model_id.to_string(),
            elapsed_ms,
            rank_of_target: self.rank_of_target,
        }
    }
}

pub fn thumbnail_path(image_id: &str) -> String {
    format!("/v1/images/{image_id}")
}

impl QueryEngine {
    fn trace_used(&self, record: &NarrativeRecord) -> bool {
        !record.trace.is_empty() && self.model.config.query_mode.uses_traces()
    }

    fn paddings(&self, req: &QueryRequest) -> (f64, f64) {
        (req.t_p.unwrap_or(self.t_p), req.s_p.unwrap_or(self.s_p))
    }

    pub fn query(&self, req: &QueryRequest) -> Result<QueryOutcome, QueryError> {
        let record = req.to_record()?;
        if let Some(t) = &req.target_id {
            if self.index.position(t).is_none() {
                return Err(bad("target_id", format!("image {t} is not in the index")));
            }
        }
        let (t_p, s_p) = self.paddings(req);
        let trace_used = self.trace_used(&record);
        let tokens = tokenize_aligned(&record, &self.vocab);
        let trace = trace_used.then_some(&record.trace);
        let input = QueryInput::build(&tokens, trace, self.model.config.max_tokens, t_p, s_p);
        let embedding = self.model.encode_query(&[input]).map_err(|e| QueryError::Internal(e.to_string()))?;
        let k = req.k.unwrap_or(self.default_k);
        let ranking = self
            .index
            .rank("query", embedding.values(), k, req.target_id.as_deref())
            .map_err(|e: RetrievalError| QueryError::Internal(e.to_string()))?;
        let results = ranking
            .ranked
            .into_iter()
            .map(|(image_id, score)| ResultItem { thumbnail: thumbnail_path(&image_id), image_id, score })
            .collect();
        Ok(QueryOutcome { results, trace_used, rank_of_target: ranking.rank_of_target })
    }

    /// Per-token boxes the query tower would see, before truncation to K.
    pub fn boxes(&self, req: &QueryRequest) -> Result<BoxesResponse, QueryError> {
        let record = req.to_record()?;
        let (t_p, s_p) = self.paddings(req);
        let tokens = tokenize_aligned(&record, &self.vocab);
        let trace_used = !record.trace.is_empty();
        let boxes = if trace_used {
            boxes_for_query(&tokens, &record.trace, t_p, s_p)
        } else {
            vec![mqir_core::geometry::TraceBox::WHOLE; tokens.len()]
        };
        let tokens = tokens
            .iter()
            .zip(boxes)
            .map(|(t, b)| TokenBox {
                token: self.vocab.token(t.token_id).unwrap_or("<unk>").to_string(),
                t_start: t.t_start,
                t_end: t.t_end,
                bbox: b.to_array(),
            })
            .collect();
        Ok(BoxesResponse { tokens, trace_used })
    }
}
