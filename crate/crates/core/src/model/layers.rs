//! Graph builders for the layers shared by both towers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::ModelError;
use crate::numerics::{Array, Axis, Graph, NodeId, ParamStore, Real};

/// Additive-mask value for attention to padded keys.
pub const ATTENTION_MASK: f64 = -1e9;

/// Parameter lookup plus the dropout stream for one forward pass.
pub struct Builder<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a ParamStore<T>,
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<T: Real> Builder<'_, T> {
    pub fn p(&mut self, name: &str) -> Result<NodeId, ModelError> {
        let id = self.params.find(name).ok_or_else(|| ModelError::MissingParam(name.into()))?;
        Ok(self.graph.param(self.params, id))
    }

    pub fn drop(&mut self, x: NodeId) -> NodeId {
        let rate = self.dropout;
        match self.rng.as_deref_mut() {
            Some(rng) => self.graph.dropout(x, rate, Some(rng)),
            None => x,
        }
    }

    pub fn linear(&mut self, x: NodeId, prefix: &str, w: &str, b: &str) -> Result<NodeId, ModelError> {
        let wn = self.p(&format!("{prefix}.{w}"))?;
        let bn = self.p(&format!("{prefix}.{b}"))?;
        let h = self.graph.matmul(x, wn)?;
        Ok(self.graph.add(h, bn)?)
    }

    /// First MLP layer with ReLU and dropout.
    pub fn mlp_hidden(&mut self, x: NodeId, prefix: &str, w: &str, b: &str) -> Result<NodeId, ModelError> {
        let h = self.linear(x, prefix, w, b)?;
        let h = self.graph.relu(h);
        Ok(self.drop(h))
    }

    /// Two-layer MLP: `w1, b1` then ReLU, dropout, `w2, b2`.
    pub fn mlp(&mut self, x: NodeId, prefix: &str) -> Result<NodeId, ModelError> {
        let h = self.mlp_hidden(x, prefix, "w1", "b1")?;
        self.linear(h, prefix, "w2", "b2")
    }

    /// Post-norm transformer encoder layer over `examples` stacked sequences of `seq` rows.
    ///
    /// `key_masks[e]` flags the real positions of example `e`; attention to
    /// other positions is suppressed.
    pub fn encoder_layer(
        &mut self,
        x: NodeId,
        prefix: &str,
        heads: usize,
        seq: usize,
        key_masks: &[Vec<bool>],
    ) -> Result<NodeId, ModelError> {
        let (_, d) = self.graph.shape(x);
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let q = self.linear(x, prefix, "wq", "bq")?;
        let k = self.linear(x, prefix, "wk", "bk")?;
        let v = self.linear(x, prefix, "wv", "bv")?;
        let mut per_example = Vec::with_capacity(key_masks.len());
        for (e, mask) in key_masks.iter().enumerate() {
            let qe = self.graph.slice_rows(q, e * seq, seq)?;
            let ke = self.graph.slice_rows(k, e * seq, seq)?;
            let ve = self.graph.slice_rows(v, e * seq, seq)?;
            let mut head_out = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = self.graph.slice_cols(qe, h * dh, dh)?;
                let kh = self.graph.slice_cols(ke, h * dh, dh)?;
                let vh = self.graph.slice_cols(ve, h * dh, dh)?;
                let kt = self.graph.transpose(kh);
                let scores = self.graph.matmul(qh, kt)?;
                let scores = self.graph.scale(scores, scale);
                let scores = if mask.iter().all(|&m| m) {
                    scores
                } else {
                    self.graph.mask_fill(scores, mask, T::from_f64(ATTENTION_MASK))?
                };
                let probs = self.graph.softmax(scores);
                head_out.push(self.graph.matmul(probs, vh)?);
            }
            per_example.push(if heads == 1 { head_out[0] } else { self.graph.concat(&head_out, Axis::Cols)? });
        }
        let attn = if per_example.len() == 1 { per_example[0] } else { self.graph.concat(&per_example, Axis::Rows)? };
        let attn = self.linear(attn, prefix, "wo", "bo")?;
        let attn = self.drop(attn);
        let x = self.graph.add(x, attn)?;
        let x = self.layer_norm(x, &format!("{prefix}.ln1"))?;
        let ff = self.mlp_hidden(x, prefix, "ff_w1", "ff_b1")?;
        let ff = self.linear(ff, prefix, "ff_w2", "ff_b2")?;
        let ff = self.drop(ff);
        let x = self.graph.add(x, ff)?;
        self.layer_norm(x, &format!("{prefix}.ln2"))
    }

    pub fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId, ModelError> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        Ok(self.graph.layer_norm(x, g, b)?)
    }

    /// Mean over the real rows of each stacked sequence, as one `examples x (examples*seq)` product.
    pub fn masked_mean(&mut self, x: NodeId, seq: usize, masks: &[Vec<bool>]) -> Result<NodeId, ModelError> {
        let total = masks.len() * seq;
        let mut weights = vec![T::zero(); masks.len() * total];
        for (e, mask) in masks.iter().enumerate() {
            let count = mask.iter().filter(|&&m| m).count().max(1);
            let w = T::one() / T::from_f64(count as f64);
            for (j, &m) in mask.iter().enumerate() {
                if m {
                    weights[e * total + e * seq + j] = w;
                }
            }
        }
        let pool = self.graph.constant(Array::matrix(masks.len(), total, weights).expect("pool shape"));
        Ok(self.graph.matmul(pool, x)?)
    }
}

/// Names of the parameters of one encoder layer with their shapes.
pub fn encoder_layer_shapes(prefix: &str, d: usize, filter: usize) -> Vec<(alloc::string::String, [usize; 2], Init)> {
    let mut out = Vec::new();
    for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
        out.push((format!("{prefix}.{w}"), [d, d], Init::Normal));
        out.push((format!("{prefix}.{b}"), [1, d], Init::Zeros));
    }
    out.push((format!("{prefix}.ln1.gamma"), [1, d], Init::Ones));
    out.push((format!("{prefix}.ln1.beta"), [1, d], Init::Zeros));
    out.push((format!("{prefix}.ff_w1"), [d, filter], Init::Normal));
    out.push((format!("{prefix}.ff_b1"), [1, filter], Init::Zeros));
    out.push((format!("{prefix}.ff_w2"), [filter, d], Init::Normal));
    out.push((format!("{prefix}.ff_b2"), [1, d], Init::Zeros));
    out.push((format!("{prefix}.ln2.gamma"), [1, d], Init::Ones));
    out.push((format!("{prefix}.ln2.beta"), [1, d], Init::Zeros));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}
