//! Narrative files: UTF-8, one JSON object per line.
//!
//! ```text
//! {"image_id":"scene-00000","caption":"a red circle","timed_words":[["a",0.0,0.4],["red",0.4,0.8],["circle",0.8,1.2]],"trace":[[0.1,0.2,0.0],[0.12,0.22,0.05]]}
//! ```
//!
//! Coordinates outside `[0, 1]` are clipped on load. Blank lines are skipped.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use mqir_core::data::{NarrativeRecord, TimedWord};
use mqir_core::geometry::{MouseTrace, TracePoint};
use serde_json::{Map, Value};

use super::FormatError;

const FIELDS: [&str; 4] = ["image_id", "caption", "timed_words", "trace"];

fn field_err(line: usize, field: &str, msg: impl Into<String>) -> FormatError {
    FormatError::Field { line, field: field.to_string(), msg: msg.into() }
}

fn take<'a>(obj: &'a Map<String, Value>, line: usize, field: &str) -> Result<&'a Value, FormatError> {
    obj.get(field).ok_or_else(|| field_err(line, field, "missing"))
}

fn triples(v: &Value, line: usize, field: &str) -> Result<Vec<(Option<String>, f64, f64, f64)>, FormatError> {
    let arr = v.as_array().ok_or_else(|| field_err(line, field, "expected an array"))?;
    let mut out = Vec::with_capacity(arr.len());
    for (i, item) in arr.iter().enumerate() {
        let t = item
            .as_array()
            .filter(|t| t.len() == 3)
            .ok_or_else(|| field_err(line, field, format!("entry {i} is not a 3-element array")))?;
        let num = |j: usize| {
            t[j].as_f64().ok_or_else(|| field_err(line, field, format!("entry {i} element {j} is not a number")))
        };
        if field == "timed_words" {
            let w = t[0].as_str().ok_or_else(|| field_err(line, field, format!("entry {i} word is not a string")))?;
            out.push((Some(w.to_string()), 0.0, num(1)?, num(2)?));
        } else {
            out.push((None, num(0)?, num(1)?, num(2)?));
        }
    }
    Ok(out)
}

/// Parses one non-blank line.
pub fn parse_line(text: &str, line: usize) -> Result<NarrativeRecord, FormatError> {
    let value: Value = serde_json::from_str(text).map_err(|e| FormatError::Syntax { line, msg: e.to_string() })?;
    let obj = value.as_object().ok_or_else(|| FormatError::Syntax { line, msg: "expected a JSON object".into() })?;
    if let Some(extra) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(field_err(line, extra, "unknown field"));
    }
    let image_id = take(obj, line, "image_id")?
        .as_str()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| field_err(line, "image_id", "expected a non-empty string"))?
        .to_string();
    let caption = take(obj, line, "caption")?
        .as_str()
        .ok_or_else(|| field_err(line, "caption", "expected a string"))?
        .to_string();
    let timed_words = triples(take(obj, line, "timed_words")?, line, "timed_words")?
        .into_iter()
        .map(|(w, _, t_start, t_end)| TimedWord { word: w.unwrap_or_default(), t_start, t_end })
        .collect();
    let points = triples(take(obj, line, "trace")?, line, "trace")?
        .into_iter()
        .map(|(_, x, y, t)| TracePoint { x, y, t })
        .collect();
    let trace = MouseTrace::new(points).map_err(|e| field_err(line, "trace", e.to_string()))?;
    let record = NarrativeRecord { image_id, caption, timed_words, trace };
    record.validate().map_err(|e| field_err(line, "timed_words", e.to_string()))?;
    Ok(record)
}

pub fn read_narratives(path: &Path) -> Result<Vec<NarrativeRecord>, FormatError> {
    let file = fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, text) in BufReader::new(file).lines().enumerate() {
        let text = text.map_err(|e| FormatError::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let record = parse_line(&text, i + 1)?;
        if !seen.insert(record.image_id.clone()) {
            return Err(FormatError::DuplicateId { line: i + 1, id: record.image_id });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn to_line(r: &NarrativeRecord) -> String {
    let words: Vec<Value> = r.timed_words.iter().map(|w| serde_json::json!([w.word, w.t_start, w.t_end])).collect();
    let trace: Vec<Value> = r.trace.points().iter().map(|p| serde_json::json!([p.x, p.y, p.t])).collect();
    // fixed key order keeps files diffable
    format!(
        "{{\"image_id\":{},\"caption\":{},\"timed_words\":{},\"trace\":{}}}",
        Value::from(r.image_id.as_str()),
        Value::from(r.caption.as_str()),
        Value::Array(words),
        Value::Array(trace)
    )
}

pub fn write_narratives(path: &Path, records: &[NarrativeRecord]) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    for r in records {
        buf.extend_from_slice(to_line(r).as_bytes());
        buf.push(b'\n');
    }
    super::write_bytes(path, &buf)
}
