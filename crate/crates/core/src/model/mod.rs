//! Two-tower matcher: region/token/box embedders, transformer towers, mean pooling and a dot-product fuser.

mod config;
pub mod layers;
mod loss;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{ModelConfig, QueryMode};
pub use layers::{encoder_layer_shapes, Builder, Init, ATTENTION_MASK};
pub use loss::{contrastive_loss, contrastive_loss_node};

use crate::data::{FeatureRecord, QueryInput};
use crate::numerics::{Array, Axis, Graph, GraphError, NodeId, ParamStore, Real};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Config(String),
    MissingParam(String),
    Graph(GraphError),
    NotSquare { rows: usize, cols: usize },
    Dimension { what: String, got: usize, expected: usize },
    TokenOutOfRange { id: u32, vocab: usize },
    Input(String),
    EmptyBatch,
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(m) => write!(f, "invalid model config: {m}"),
            ModelError::MissingParam(n) => write!(f, "parameter `{n}` missing from store"),
            ModelError::Graph(e) => write!(f, "{e}"),
            ModelError::NotSquare { rows, cols } => write!(f, "score matrix must be square, got {rows}x{cols}"),
            ModelError::Dimension { what, got, expected } => write!(f, "{what}: got {got}, expected {expected}"),
            ModelError::TokenOutOfRange { id, vocab } => write!(f, "token id {id} outside vocabulary of {vocab}"),
            ModelError::Input(m) => f.write_str(m),
            ModelError::EmptyBatch => f.write_str("empty batch"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<GraphError> for ModelError {
    fn from(e: GraphError) -> Self {
        ModelError::Graph(e)
    }
}

/// Named parameter shapes for `cfg`, in a fixed order.
pub fn parameter_specs(cfg: &ModelConfig) -> Vec<(String, [usize; 2], Init)> {
    let d = cfg.d_model;
    let h = cfg.embed_hidden;
    let mut out: Vec<(String, [usize; 2], Init)> = Vec::new();
    let mut push = |name: &str, shape: [usize; 2], init: Init| out.push((name.into(), shape, init));

    let loc = if cfg.use_locations { d } else { 0 };
    if cfg.use_locations {
        push("ire.loc.w", [5, d], Init::Normal);
        push("ire.loc.b", [1, d], Init::Zeros);
    }
    push("ire.global.w1", [cfg.global_dim + loc, h], Init::Normal);
    push("ire.global.b1", [1, h], Init::Zeros);
    push("ire.region.w1", [cfg.region_dim + loc, h], Init::Normal);
    push("ire.region.b1", [1, h], Init::Zeros);
    push("ire.w2", [h, d], Init::Normal);
    push("ire.b2", [1, d], Init::Zeros);

    if cfg.query_mode.uses_text() {
        push("tte.emb", [cfg.vocab_size, d], Init::Normal);
        push("tte.w1", [d, h], Init::Normal);
        push("tte.b1", [1, h], Init::Zeros);
        push("tte.w2", [h, d], Init::Normal);
        push("tte.b2", [1, d], Init::Zeros);
        if cfg.use_positions {
            push("tte.pos", [cfg.max_tokens, d], Init::Normal);
        }
    }
    if cfg.query_mode.uses_traces() {
        push("tbe.proj.w", [5, d], Init::Normal);
        push("tbe.proj.b", [1, d], Init::Zeros);
        push("tbe.w1", [d, h], Init::Normal);
        push("tbe.b1", [1, h], Init::Zeros);
        push("tbe.w2", [h, d], Init::Normal);
        push("tbe.b2", [1, d], Init::Zeros);
        if cfg.use_positions {
            push("tbe.pos", [cfg.max_tokens, d], Init::Normal);
        }
    }
    for (tower, layers) in [("image", cfg.image_layers), ("text", cfg.text_layers)] {
        for i in 0..layers {
            out.extend(encoder_layer_shapes(&format!("{tower}.layer{i}"), d, cfg.filter));
        }
        let p = cfg.pooler_hidden;
        out.push((format!("{tower}.pool.w1"), [d, p], Init::Normal));
        out.push((format!("{tower}.pool.b1"), [1, p], Init::Zeros));
        out.push((format!("{tower}.pool.w2"), [p, cfg.embed_dim], Init::Normal));
        out.push((format!("{tower}.pool.b2"), [1, cfg.embed_dim], Init::Zeros));
    }
    out
}

// FNV-1a, so each parameter's draw depends only on the seed and its own name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Seeded initial value of one parameter.
pub fn init_value<T: Real>(name: &str, shape: [usize; 2], init: Init, std: f64, seed: u64) -> Array<T> {
    match init {
        Init::Zeros => Array::zeros(&shape),
        Init::Ones => Array::full(&shape, T::one()),
        Init::Normal => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
            let normal = Normal::new(0.0, std).expect("positive std");
            let v = (0..shape[0] * shape[1]).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
            Array::matrix(shape[0], shape[1], v).expect("init shape")
        }
    }
}

/// Model parameters plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Graph and key nodes of one forward pass over a batch.
pub struct ForwardPass<T: Real> {
    pub graph: Graph<T>,
    pub image: NodeId,
    pub query: NodeId,
    pub scores: NodeId,
    pub loss: NodeId,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        let mut params = ParamStore::new();
        for (name, shape, init) in parameter_specs(&config) {
            params.insert(&name, init_value(&name, shape, init, config.init_std, seed));
        }
        Ok(Self { config, params })
    }

    /// Wraps an existing store after checking every expected parameter is present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        for (name, shape, _) in parameter_specs(&config) {
            let id = params.find(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            let got = params.get(id).value.dims2();
            if got != (shape[0], shape[1]) {
                return Err(ModelError::Dimension {
                    what: format!("parameter {name} rows x cols"),
                    got: got.0 * got.1,
                    expected: shape[0] * shape[1],
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    fn builder<'a>(&'a self, graph: &'a mut Graph<T>, rng: Option<&'a mut ChaCha8Rng>) -> Builder<'a, T> {
        Builder { graph, params: &self.params, dropout: self.config.dropout, rng }
    }

    fn check_images(&self, images: &[FeatureRecord]) -> Result<(), ModelError> {
        if images.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let c = &self.config;
        for img in images {
            img.check_dims(c.global_dim, c.region_dim, c.regions).map_err(|e| ModelError::Input(format!("{e}")))?;
        }
        Ok(())
    }

    fn check_queries(&self, queries: &[QueryInput]) -> Result<(), ModelError> {
        if queries.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let k = self.config.max_tokens;
        for q in queries {
            for (what, got) in [
                ("query token ids", q.token_ids.len()),
                ("query token mask", q.token_mask.len()),
                ("query boxes", q.boxes.len()),
                ("query box mask", q.box_valid.len()),
            ] {
                if got != k {
                    return Err(ModelError::Dimension { what: what.into(), got, expected: k });
                }
            }
            if self.config.query_mode.uses_text() {
                if let Some(&id) = q.token_ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
                    return Err(ModelError::TokenOutOfRange { id, vocab: self.config.vocab_size });
                }
            }
        }
        Ok(())
    }

    /// IRE over a batch: `B*(N+1)` rows, each example's global entry followed by its `N` regions.
    pub fn build_ire(&self, b: &mut Builder<'_, T>, images: &[FeatureRecord]) -> Result<NodeId, ModelError> {
        let c = &self.config;
        let n = c.regions;
        let bsz = images.len();
        let mut gfeat = Vec::with_capacity(bsz * c.global_dim);
        let mut rfeat = Vec::with_capacity(bsz * n * c.region_dim);
        let mut ggeom = Vec::with_capacity(bsz * 5);
        let mut rgeom = Vec::with_capacity(bsz * n * 5);
        for img in images {
            gfeat.extend(img.global.iter().map(|&v| T::from_f64(v as f64)));
            ggeom.extend(crate::geometry::TraceBox::WHOLE.to_array().map(T::from_f64));
            for r in &img.regions {
                rfeat.extend(r.feature.iter().map(|&v| T::from_f64(v as f64)));
                rgeom.extend(r.geometry.to_array().map(T::from_f64));
            }
        }
        let mut side =
            |feat: Vec<T>, geom: Vec<T>, rows: usize, dim: usize, which: &str| -> Result<NodeId, ModelError> {
                let f = b.graph.constant(Array::matrix(rows, dim, feat).expect("feature shape"));
                let x = if c.use_locations {
                    let g = b.graph.constant(Array::matrix(rows, 5, geom).expect("geometry shape"));
                    let loc = b.linear(g, "ire.loc", "w", "b")?;
                    b.graph.concat(&[f, loc], Axis::Cols)?
                } else {
                    f
                };
                b.mlp_hidden(x, &format!("ire.{which}"), "w1", "b1")
            };
        let hg = side(gfeat, ggeom, bsz, c.global_dim, "global")?;
        let hr = if n > 0 { Some(side(rfeat, rgeom, bsz * n, c.region_dim, "region")?) } else { None };
        let mut parts = Vec::with_capacity(2 * bsz);
        for e in 0..bsz {
            parts.push(b.graph.slice_rows(hg, e, 1)?);
            if let Some(hr) = hr {
                parts.push(b.graph.slice_rows(hr, e * n, n)?);
            }
        }
        let h = if parts.len() == 1 { parts[0] } else { b.graph.concat(&parts, Axis::Rows)? };
        b.linear(h, "ire", "w2", "b2")
    }

    fn positions(&self, b: &mut Builder<'_, T>, table: &str, examples: usize) -> Result<NodeId, ModelError> {
        let k = self.config.max_tokens;
        let ids: Vec<usize> = (0..examples).flat_map(|_| 0..k).collect();
        let t = b.p(table)?;
        Ok(b.graph.embedding(t, &ids)?)
    }

    /// TTE over a batch: `B*K` rows.
    pub fn build_tte(&self, b: &mut Builder<'_, T>, queries: &[QueryInput]) -> Result<NodeId, ModelError> {
        let ids: Vec<usize> = queries.iter().flat_map(|q| q.token_ids.iter().map(|&i| i as usize)).collect();
        let table = b.p("tte.emb")?;
        let x = b.graph.embedding(table, &ids)?;
        let x = b.mlp(x, "tte")?;
        if self.config.use_positions {
            let pos = self.positions(b, "tte.pos", queries.len())?;
            Ok(b.graph.add(x, pos)?)
        } else {
            Ok(x)
        }
    }

    /// TBE over a batch: `B*K` rows.
    pub fn build_tbe(&self, b: &mut Builder<'_, T>, queries: &[QueryInput]) -> Result<NodeId, ModelError> {
        let k = self.config.max_tokens;
        let geom: Vec<T> =
            queries.iter().flat_map(|q| q.boxes.iter().flat_map(|bx| bx.to_array().map(T::from_f64))).collect();
        let g = b.graph.constant(Array::matrix(queries.len() * k, 5, geom).expect("box shape"));
        let x = b.linear(g, "tbe.proj", "w", "b")?;
        let x = b.mlp(x, "tbe")?;
        if self.config.use_positions {
            let pos = self.positions(b, "tbe.pos", queries.len())?;
            Ok(b.graph.add(x, pos)?)
        } else {
            Ok(x)
        }
    }

    fn tower(
        &self,
        b: &mut Builder<'_, T>,
        mut x: NodeId,
        name: &str,
        layers: usize,
        seq: usize,
        masks: &[Vec<bool>],
    ) -> Result<NodeId, ModelError> {
        for i in 0..layers {
            x = b.encoder_layer(x, &format!("{name}.layer{i}"), self.config.heads, seq, masks)?;
        }
        let pooled = b.masked_mean(x, seq, masks)?;
        b.mlp(pooled, &format!("{name}.pool"))
    }

    /// Image tower: `B x E`.
    pub fn build_image_tower(&self, b: &mut Builder<'_, T>, images: &[FeatureRecord]) -> Result<NodeId, ModelError> {
        self.check_images(images)?;
        let x = self.build_ire(b, images)?;
        let masks: Vec<Vec<bool>> = images
            .iter()
            .map(|img| core::iter::once(true).chain(img.regions.iter().map(|r| r.valid)).collect())
            .collect();
        self.tower(b, x, "image", self.config.image_layers, self.config.regions + 1, &masks)
    }

    /// Query tower: `B x E`.
    pub fn build_query_tower(&self, b: &mut Builder<'_, T>, queries: &[QueryInput]) -> Result<NodeId, ModelError> {
        self.check_queries(queries)?;
        let k = self.config.max_tokens;
        let (x, masks) = match self.config.query_mode {
            QueryMode::Text => (self.build_tte(b, queries)?, queries.iter().map(|q| q.token_mask.clone()).collect()),
            QueryMode::TraceOnly => {
                (self.build_tbe(b, queries)?, queries.iter().map(|q| q.box_valid.clone()).collect())
            }
            QueryMode::TextTrace => {
                let text = self.build_tte(b, queries)?;
                let boxes = self.build_tbe(b, queries)?;
                let mut parts = Vec::with_capacity(2 * queries.len());
                for e in 0..queries.len() {
                    parts.push(b.graph.slice_rows(text, e * k, k)?);
                    parts.push(b.graph.slice_rows(boxes, e * k, k)?);
                }
                let masks: Vec<Vec<bool>> =
                    queries.iter().map(|q| q.token_mask.iter().chain(&q.box_valid).copied().collect()).collect();
                (b.graph.concat(&parts, Axis::Rows)?, masks)
            }
        };
        self.tower(b, x, "text", self.config.text_layers, self.config.query_len(), &masks)
    }

    /// Full training graph: both towers, `B x B` scores and the contrastive loss.
    ///
    /// Dropout is active only when `rng` is given.
    pub fn forward(
        &self,
        images: &[FeatureRecord],
        queries: &[QueryInput],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass<T>, ModelError> {
        if images.len() != queries.len() {
            return Err(ModelError::Dimension {
                what: "queries per image".into(),
                got: queries.len(),
                expected: images.len(),
            });
        }
        let mut graph = Graph::new();
        let (image, query) = {
            let mut b = self.builder(&mut graph, rng);
            let image = self.build_image_tower(&mut b, images)?;
            let query = self.build_query_tower(&mut b, queries)?;
            (image, query)
        };
        let qt = graph.transpose(query);
        let scores = graph.matmul(image, qt)?;
        let loss = contrastive_loss_node(&mut graph, scores)?;
        graph.set_output("image", image);
        graph.set_output("query", query);
        graph.set_output("scores", scores);
        graph.set_output("loss", loss);
        Ok(ForwardPass { graph, image, query, scores, loss })
    }

    fn run(
        &self,
        build: impl FnOnce(&mut Builder<'_, T>) -> Result<NodeId, ModelError>,
    ) -> Result<Array<T>, ModelError> {
        let mut graph = Graph::new();
        let out = {
            let mut b = self.builder(&mut graph, None);
            build(&mut b)?
        };
        graph.set_output("out", out);
        let mut outs = graph.evaluate(&self.params, &[])?;
        Ok(outs.remove("out").expect("declared output"))
    }

    /// IRE outputs for each image, `B*(N+1) x d`.
    pub fn embed_image_regions(&self, images: &[FeatureRecord]) -> Result<Array<T>, ModelError> {
        self.check_images(images)?;
        self.run(|b| self.build_ire(b, images))
    }

    /// TTE outputs, `B*K x d`.
    pub fn embed_text_tokens(&self, queries: &[QueryInput]) -> Result<Array<T>, ModelError> {
        if !self.config.query_mode.uses_text() {
            return Err(ModelError::Config("query mode has no text embedder".into()));
        }
        self.check_queries(queries)?;
        self.run(|b| self.build_tte(b, queries))
    }

    /// TBE outputs, `B*K x d`.
    pub fn embed_trace_boxes(&self, queries: &[QueryInput]) -> Result<Array<T>, ModelError> {
        if !self.config.query_mode.uses_traces() {
            return Err(ModelError::Config("query mode has no trace embedder".into()));
        }
        self.check_queries(queries)?;
        self.run(|b| self.build_tbe(b, queries))
    }

    /// Pooled image embeddings, `B x E`, dropout off.
    pub fn encode_image(&self, images: &[FeatureRecord]) -> Result<Array<T>, ModelError> {
        self.run(|b| self.build_image_tower(b, images))
    }

    /// Pooled query embeddings, `B x E`, dropout off.
    pub fn encode_query(&self, queries: &[QueryInput]) -> Result<Array<T>, ModelError> {
        self.run(|b| self.build_query_tower(b, queries))
    }
}

/// Dot product of two embeddings.
pub fn similarity<T: Real>(image: &[T], query: &[T]) -> Result<T, ModelError> {
    if image.len() != query.len() {
        return Err(ModelError::Dimension { what: "embedding width".into(), got: query.len(), expected: image.len() });
    }
    Ok(image.iter().zip(query).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
}

/// Rows of a `B x E` array as owned vectors.
pub fn rows<T: Real>(a: &Array<T>) -> Vec<Vec<T>> {
    let (m, n) = a.dims2();
    (0..m).map(|i| a.values()[i * n..(i + 1) * n].to_vec()).collect()
}

#[cfg(test)]
mod tests;
