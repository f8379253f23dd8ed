//! Mouse traces, word timings, and the per-token boxes derived from them.
//!
//! A token's box is built in two steps: the trace is cut to the token's time
//! interval widened by `t_p` on both ends (endpoints inclusive), then the
//! tightest box around the cut points is grown by `s_p` on every side and
//! clipped to the unit canvas. Tokens whose cut is empty get the whole canvas.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Default temporal padding in seconds.
pub const DEFAULT_TEMPORAL_PADDING: f64 = 0.1;
/// Default spatial padding in normalized canvas units.
pub const DEFAULT_SPATIAL_PADDING: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl TracePoint {
    /// Point with coordinates clipped to `[0, 1]`.
    pub fn clipped(x: f64, y: f64, t: f64) -> Self {
        Self { x: x.clamp(0.0, 1.0), y: y.clamp(0.0, 1.0), t }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceError {
    NegativeTime { index: usize },
    NonMonotonic { index: usize },
    NotFinite { index: usize },
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceError::NegativeTime { index } => write!(f, "trace point {index} has a negative timestamp"),
            TraceError::NonMonotonic { index } => write!(f, "trace point {index} goes back in time"),
            TraceError::NotFinite { index } => write!(f, "trace point {index} is not finite"),
        }
    }
}

impl core::error::Error for TraceError {}

/// Time-ordered pointer samples with coordinates in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MouseTrace {
    points: Vec<TracePoint>,
}

impl MouseTrace {
    /// Validates ordering and clips coordinates onto the canvas.
    pub fn new(points: Vec<TracePoint>) -> Result<Self, TraceError> {
        let mut last = 0.0;
        let mut out = Vec::with_capacity(points.len());
        for (index, p) in points.into_iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.t.is_finite()) {
                return Err(TraceError::NotFinite { index });
            }
            if p.t < 0.0 {
                return Err(TraceError::NegativeTime { index });
            }
            if p.t < last {
                return Err(TraceError::NonMonotonic { index });
            }
            last = p.t;
            out.push(TracePoint::clipped(p.x, p.y, p.t));
        }
        Ok(Self { points: out })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[TracePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedToken {
    pub token_id: u32,
    pub t_start: f64,
    pub t_end: f64,
}

/// Normalized box in canonical order `(xmin, ymin, xmax, ymax, area)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    pub area: f64,
}

impl TraceBox {
    /// The whole canvas `(0, 0, 1, 1)` with area 1.
    pub const WHOLE: TraceBox = TraceBox { xmin: 0.0, ymin: 0.0, xmax: 1.0, ymax: 1.0, area: 1.0 };

    /// Box from corners, clipped to the unit square; area is computed after clipping.
    pub fn from_corners(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        let (xmin, xmax) = (xmin.clamp(0.0, 1.0), xmax.clamp(0.0, 1.0));
        let (ymin, ymax) = (ymin.clamp(0.0, 1.0), ymax.clamp(0.0, 1.0));
        Self { xmin, ymin, xmax, ymax, area: (xmax - xmin) * (ymax - ymin) }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.xmin, self.ymin, self.xmax, self.ymax, self.area]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self { xmin: v[0], ymin: v[1], xmax: v[2], ymax: v[3], area: v[4] }
    }

    pub fn contains_box(&self, other: &TraceBox) -> bool {
        self.xmin <= other.xmin && self.ymin <= other.ymin && self.xmax >= other.xmax && self.ymax >= other.ymax
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.xmin)
            && (0.0..=1.0).contains(&self.ymin)
            && self.xmin <= self.xmax
            && self.ymin <= self.ymax
            && self.xmax <= 1.0
            && self.ymax <= 1.0
    }
}

/// Points with `t` in `[t1 - t_p, t2 + t_p]`, in trace order.
pub fn slice_trace(trace: &MouseTrace, t1: f64, t2: f64, t_p: f64) -> Vec<TracePoint> {
    let (lo, hi) = (t1 - t_p, t2 + t_p);
    let pts = trace.points();
    // timestamps are non-decreasing, so the window is a contiguous run
    let start = pts.partition_point(|p| p.t < lo);
    let end = pts.partition_point(|p| p.t <= hi);
    if start >= end {
        return Vec::new();
    }
    pts[start..end].to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmptySegment;

impl fmt::Display for EmptySegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("cannot build a box from an empty trace segment")
    }
}

impl core::error::Error for EmptySegment {}

/// Tightest box around `points`, grown by `s_p` on each side, then clipped.
pub fn box_from_points(points: &[TracePoint], s_p: f64) -> Result<TraceBox, EmptySegment> {
    let first = points.first().ok_or(EmptySegment)?;
    let (mut xmin, mut ymin, mut xmax, mut ymax) = (first.x, first.y, first.x, first.y);
    for p in &points[1..] {
        xmin = xmin.min(p.x);
        ymin = ymin.min(p.y);
        xmax = xmax.max(p.x);
        ymax = ymax.max(p.y);
    }
    Ok(TraceBox::from_corners(xmin - s_p, ymin - s_p, xmax + s_p, ymax + s_p))
}

/// One box per token; tokens with no covered trace points get [`TraceBox::WHOLE`].
pub fn boxes_for_query(tokens: &[TimedToken], trace: &MouseTrace, t_p: f64, s_p: f64) -> Vec<TraceBox> {
    tokens
        .iter()
        .map(|tok| {
            let seg = slice_trace(trace, tok.t_start, tok.t_end, t_p);
            box_from_points(&seg, s_p).unwrap_or(TraceBox::WHOLE)
        })
        .collect()
}
