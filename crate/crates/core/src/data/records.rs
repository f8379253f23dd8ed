use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{MouseTrace, TraceBox};

/// Lowercases and drops everything but alphanumerics and single spaces.
pub fn normalize_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        let w: String = word.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect();
        if w.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&w);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub word: String,
    pub t_start: f64,
    pub t_end: f64,
}

/// One caption with word timings and the mouse trace recorded while it was spoken.
#[derive(Debug, Clone, PartialEq)]
pub struct NarrativeRecord {
    pub image_id: String,
    pub caption: String,
    pub timed_words: Vec<TimedWord>,
    pub trace: MouseTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordError {
    CaptionMismatch { image_id: String },
    BadInterval { image_id: String, word: usize },
    Overlap { image_id: String, word: usize },
    RegionCount { image_id: String, got: usize, max: usize },
    Dimension { image_id: String, what: &'static str, got: usize, expected: usize },
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordError::CaptionMismatch { image_id } => {
                write!(f, "{image_id}: timed words do not spell the caption")
            }
            RecordError::BadInterval { image_id, word } => {
                write!(f, "{image_id}: word {word} ends before it starts")
            }
            RecordError::Overlap { image_id, word } => {
                write!(f, "{image_id}: word {word} overlaps or precedes the previous word")
            }
            RecordError::RegionCount { image_id, got, max } => {
                write!(f, "{image_id}: {got} regions exceed the limit of {max}")
            }
            RecordError::Dimension { image_id, what, got, expected } => {
                write!(f, "{image_id}: {what} has dimension {got}, expected {expected}")
            }
        }
    }
}

impl core::error::Error for RecordError {}

impl NarrativeRecord {
    pub fn validate(&self) -> Result<(), RecordError> {
        let joined: Vec<&str> = self.timed_words.iter().map(|w| w.word.as_str()).collect();
        if normalize_text(&joined.join(" ")) != normalize_text(&self.caption) {
            return Err(RecordError::CaptionMismatch { image_id: self.image_id.clone() });
        }
        let mut prev_end = f64::NEG_INFINITY;
        for (i, w) in self.timed_words.iter().enumerate() {
            if !(w.t_start <= w.t_end) {
                return Err(RecordError::BadInterval { image_id: self.image_id.clone(), word: i });
            }
            if w.t_start < prev_end {
                return Err(RecordError::Overlap { image_id: self.image_id.clone(), word: i });
            }
            prev_end = w.t_end;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub feature: Vec<f32>,
    pub geometry: TraceBox,
    pub valid: bool,
}

/// Image representation: a global vector plus exactly `N` region slots.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub image_id: String,
    pub global: Vec<f32>,
    pub regions: Vec<Region>,
}

impl FeatureRecord {
    /// Pads `regions` to `n` slots with zero vectors, whole-image geometry and a cleared validity bit.
    pub fn padded(
        image_id: String,
        global: Vec<f32>,
        regions: Vec<(Vec<f32>, TraceBox)>,
        n: usize,
        region_dim: usize,
    ) -> Result<Self, RecordError> {
        if regions.len() > n {
            return Err(RecordError::RegionCount { image_id, got: regions.len(), max: n });
        }
        let mut slots = Vec::with_capacity(n);
        for (feature, geometry) in regions {
            if feature.len() != region_dim {
                return Err(RecordError::Dimension {
                    image_id,
                    what: "region feature",
                    got: feature.len(),
                    expected: region_dim,
                });
            }
            slots.push(Region { feature, geometry, valid: true });
        }
        while slots.len() < n {
            slots.push(Region { feature: vec![0.0; region_dim], geometry: TraceBox::WHOLE, valid: false });
        }
        Ok(Self { image_id, global, regions: slots })
    }

    pub fn valid_regions(&self) -> usize {
        self.regions.iter().filter(|r| r.valid).count()
    }

    /// Checks dimensions against `(global_dim, region_dim, n)`.
    pub fn check_dims(&self, global_dim: usize, region_dim: usize, n: usize) -> Result<(), RecordError> {
        let err = |what, got, expected| RecordError::Dimension { image_id: self.image_id.clone(), what, got, expected };
        if self.global.len() != global_dim {
            return Err(err("global feature", self.global.len(), global_dim));
        }
        if self.regions.len() != n {
            return Err(err("region count", self.regions.len(), n));
        }
        if let Some(r) = self.regions.iter().find(|r| r.feature.len() != region_dim) {
            return Err(err("region feature", r.feature.len(), region_dim));
        }
        Ok(())
    }
}
