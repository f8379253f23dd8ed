//! Desk-scale synthetic corpus of grouped grid scenes.
//!
//! Scenes in one group share the same multiset of typed objects but place
//! them in different cells, so their captions carry identical information and
//! only the trace can tell them apart.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::records::{FeatureRecord, NarrativeRecord, TimedWord};
use crate::geometry::{MouseTrace, TraceBox, TracePoint};

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "diamond"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const NUM_TYPES: usize = SHAPES.len() * COLORS.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub scenes: usize,
    pub group_size: usize,
    pub grid: usize,
    pub objects_per_scene: usize,
    /// Region slots per feature record.
    pub regions: usize,
    pub feature_dim: usize,
    pub trace_noise: f64,
    pub feature_noise: f64,
    /// Trace sampling period in seconds.
    pub sample_period: f64,
    /// Samples per spoken word; word duration is `ticks_per_word * sample_period`.
    pub ticks_per_word: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 256,
            group_size: 4,
            grid: 4,
            objects_per_scene: 3,
            regions: 16,
            feature_dim: 64,
            trace_noise: 0.02,
            feature_noise: 0.1,
            sample_period: 0.05,
            ticks_per_word: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    GroupSize(usize),
    SceneCount { scenes: usize, group_size: usize },
    GridTooSmall { cells: usize, objects: usize },
    TooManyObjects { objects: usize, limit: usize },
    FeatureDim { dim: usize, needed: usize },
    NotEnoughLayouts,
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::GroupSize(g) => write!(f, "group size must be at least 2, got {g}"),
            SynthError::SceneCount { scenes, group_size } => {
                write!(f, "{scenes} scenes do not split into groups of {group_size}")
            }
            SynthError::GridTooSmall { cells, objects } => {
                write!(f, "grid has {cells} cells, cannot place {objects} objects")
            }
            SynthError::TooManyObjects { objects, limit } => {
                write!(f, "{objects} objects per scene exceed the limit {limit}")
            }
            SynthError::FeatureDim { dim, needed } => {
                write!(f, "feature dimension {dim} cannot hold {needed} type indicators")
            }
            SynthError::NotEnoughLayouts => f.write_str("could not find distinct layouts for a group"),
        }
    }
}

impl core::error::Error for SynthError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: u8,
    pub color: u8,
    pub row: u8,
    pub col: u8,
}

impl SceneObject {
    pub fn type_index(&self) -> usize {
        self.color as usize * SHAPES.len() + self.shape as usize
    }

    pub fn cell_box(&self, grid: usize) -> TraceBox {
        let g = grid as f64;
        TraceBox::from_corners(
            self.col as f64 / g,
            self.row as f64 / g,
            (self.col as f64 + 1.0) / g,
            (self.row as f64 + 1.0) / g,
        )
    }

    fn center(&self, grid: usize) -> (f64, f64) {
        let g = grid as f64;
        ((self.col as f64 + 0.5) / g, (self.row as f64 + 0.5) / g)
    }
}

/// Layout of one synthetic image; objects are listed in caption order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: String,
    pub group: usize,
    pub grid: usize,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub scenes: Vec<Scene>,
    pub narratives: Vec<NarrativeRecord>,
    pub features: Vec<FeatureRecord>,
}

pub fn scene_id(index: usize) -> String {
    format!("scene-{index:05}")
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    if cfg.group_size < 2 {
        return Err(SynthError::GroupSize(cfg.group_size));
    }
    if cfg.scenes == 0 || cfg.scenes % cfg.group_size != 0 {
        return Err(SynthError::SceneCount { scenes: cfg.scenes, group_size: cfg.group_size });
    }
    let cells = cfg.grid * cfg.grid;
    if cfg.objects_per_scene == 0 || cfg.objects_per_scene > cells {
        return Err(SynthError::GridTooSmall { cells, objects: cfg.objects_per_scene });
    }
    let limit = cfg.regions.min(NUM_TYPES);
    if cfg.objects_per_scene > limit {
        return Err(SynthError::TooManyObjects { objects: cfg.objects_per_scene, limit });
    }
    if cfg.feature_dim < NUM_TYPES {
        return Err(SynthError::FeatureDim { dim: cfg.feature_dim, needed: NUM_TYPES });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let groups = cfg.scenes / cfg.group_size;
    let mut seen_types: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut scenes = Vec::with_capacity(cfg.scenes);

    for group in 0..groups {
        // distinct type multisets across groups while the type space allows it
        let mut types: Vec<usize> = Vec::new();
        for _ in 0..64 {
            let mut all: Vec<usize> = (0..NUM_TYPES).collect();
            all.shuffle(&mut rng);
            types = all[..cfg.objects_per_scene].to_vec();
            types.sort_unstable();
            if !seen_types.contains(&types) {
                break;
            }
        }
        seen_types.insert(types.clone());

        let mut layouts: Vec<Vec<usize>> = Vec::new();
        let mut attempts = 0;
        while layouts.len() < cfg.group_size {
            attempts += 1;
            if attempts > 1000 {
                return Err(SynthError::NotEnoughLayouts);
            }
            let mut all: Vec<usize> = (0..cells).collect();
            all.shuffle(&mut rng);
            let chosen = all[..cfg.objects_per_scene].to_vec();
            let mut key = chosen.clone();
            key.sort_unstable();
            if layouts.iter().any(|l| {
                let mut k = l.clone();
                k.sort_unstable();
                k == key
            }) {
                continue;
            }
            layouts.push(chosen);
        }

        for (member, cells_for_scene) in layouts.into_iter().enumerate() {
            let mut objects: Vec<SceneObject> = types
                .iter()
                .zip(&cells_for_scene)
                .map(|(&t, &cell)| SceneObject {
                    shape: (t % SHAPES.len()) as u8,
                    color: (t / SHAPES.len()) as u8,
                    row: (cell / cfg.grid) as u8,
                    col: (cell % cfg.grid) as u8,
                })
                .collect();
            objects.shuffle(&mut rng);
            scenes.push(Scene { image_id: scene_id(group * cfg.group_size + member), group, grid: cfg.grid, objects });
        }
    }

    let mut narratives = Vec::with_capacity(scenes.len());
    let mut features = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        narratives.push(narrate(scene, cfg, &mut rng));
        features.push(featurize(scene, cfg, &mut rng));
    }
    Ok(SynthDataset { scenes, narratives, features })
}

/// Caption words: `a <color> <shape>` per object, joined by `and`.
fn caption_words(scene: &Scene) -> Vec<(String, Option<usize>)> {
    let mut words = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        if i > 0 {
            words.push(("and".to_string(), None));
        }
        words.push(("a".to_string(), Some(i)));
        words.push((COLORS[o.color as usize].to_string(), Some(i)));
        words.push((SHAPES[o.shape as usize].to_string(), Some(i)));
    }
    words
}

fn narrate(scene: &Scene, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> NarrativeRecord {
    let words = caption_words(scene);
    let tpw = cfg.ticks_per_word;
    let at = |tick: usize| tick as f64 * cfg.sample_period;
    let timed_words: Vec<TimedWord> = words
        .iter()
        .enumerate()
        .map(|(w, (word, _))| TimedWord { word: word.clone(), t_start: at(w * tpw), t_end: at((w + 1) * tpw) })
        .collect();

    let noise = Normal::new(0.0, cfg.trace_noise.max(0.0)).expect("finite std");
    let g = cfg.grid as f64;
    // dwell points stay in the inner part of the cell so noise-free boxes sit inside it
    let inner = 0.8 / g;
    let total_ticks = words.len() * tpw;
    let mut points = Vec::with_capacity(total_ticks + 1);
    for tick in 0..=total_ticks {
        let w = (tick / tpw).min(words.len() - 1);
        // a tick on a word boundary belongs to the object word on either side
        let owner = words[w].1.or_else(|| if tick % tpw == 0 && w > 0 { words[w - 1].1 } else { None });
        let (x, y) = match owner {
            Some(i) => {
                let (cx, cy) = scene.objects[i].center(cfg.grid);
                (cx + (rng.random::<f64>() - 0.5) * inner, cy + (rng.random::<f64>() - 0.5) * inner)
            }
            None => {
                // "and" between objects: straight transit from the previous to the next cell
                let prev_obj = words[w - 1].1.expect("and follows an object");
                let next_obj = words[w + 1].1.expect("and precedes an object");
                let (ax, ay) = scene.objects[prev_obj].center(cfg.grid);
                let (bx, by) = scene.objects[next_obj].center(cfg.grid);
                let f = (tick - w * tpw) as f64 / tpw as f64;
                (ax + (bx - ax) * f, ay + (by - ay) * f)
            }
        };
        let (nx, ny) = if cfg.trace_noise > 0.0 { (noise.sample(rng), noise.sample(rng)) } else { (0.0, 0.0) };
        points.push(TracePoint::clipped(x + nx, y + ny, at(tick)));
    }
    let caption = words.iter().map(|(w, _)| w.as_str()).collect::<Vec<_>>().join(" ");
    NarrativeRecord {
        image_id: scene.image_id.clone(),
        caption,
        timed_words,
        trace: MouseTrace::new(points).expect("generated trace is ordered"),
    }
}

fn featurize(scene: &Scene, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> FeatureRecord {
    let noise = Normal::new(0.0, cfg.feature_noise.max(0.0)).expect("finite std");
    let mut regions: Vec<(Vec<f32>, TraceBox)> = scene
        .objects
        .iter()
        .map(|o| {
            let mut v = vec![0.0f32; cfg.feature_dim];
            v[o.type_index()] = 1.0;
            if cfg.feature_noise > 0.0 {
                for x in &mut v {
                    *x += noise.sample(rng) as f32;
                }
            }
            (v, o.cell_box(cfg.grid))
        })
        .collect();
    // detector output order carries no caption information
    regions.shuffle(rng);
    let k = regions.len() as f32;
    let mut global = vec![0.0f32; cfg.feature_dim];
    for (v, _) in &regions {
        for (g, x) in global.iter_mut().zip(v) {
            *g += x / k;
        }
    }
    FeatureRecord::padded(scene.image_id.clone(), global, regions, cfg.regions, cfg.feature_dim)
        .expect("region count checked against config")
}

/// Splits scene indices into `(train, eval)` by whole groups.
///
/// `eval_groups` groups, chosen by a seeded shuffle, go to evaluation.
pub fn split_by_group(scenes: &[Scene], eval_groups: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: Vec<usize> = scenes.iter().map(|s| s.group).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let eval: BTreeSet<usize> = groups.into_iter().take(eval_groups).collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in scenes.iter().enumerate() {
        if eval.contains(&s.group) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}
