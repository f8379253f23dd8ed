use alloc::vec::Vec;

use num_traits::Float;

use super::ModelError;
use crate::numerics::{Array, Axis, Graph, NodeId, Real};

/// Symmetric in-batch contrastive loss over a `B x B` score matrix with matches on the diagonal.
///
/// `L = -1/2 (mean_i log softmax_row(S)[i,i] + mean_j log softmax_col(S)[j,j])`.
pub fn contrastive_loss<T: Real>(scores: &Array<T>) -> Result<f64, ModelError> {
    let (b, c) = scores.dims2();
    if b != c || b == 0 {
        return Err(ModelError::NotSquare { rows: b, cols: c });
    }
    let s = |i: usize, j: usize| scores.get(i, j).as_f64();
    let mut row_term = 0.0;
    let mut col_term = 0.0;
    for i in 0..b {
        row_term += s(i, i) - log_sum_exp((0..b).map(|j| s(i, j)));
        col_term += s(i, i) - log_sum_exp((0..b).map(|j| s(j, i)));
    }
    Ok(-0.5 * (row_term + col_term) / b as f64)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.map(|x| Float::exp(x - m)).sum();
    m + Float::ln(sum)
}

/// Graph form of [`contrastive_loss`]; returns a `1 x 1` node.
pub fn contrastive_loss_node<T: Real>(graph: &mut Graph<T>, scores: NodeId) -> Result<NodeId, ModelError> {
    let (b, c) = graph.shape(scores);
    if b != c || b == 0 {
        return Err(ModelError::NotSquare { rows: b, cols: c });
    }
    let diag: Vec<usize> = (0..b).collect();
    let rows = graph.log_softmax(scores);
    let rows = graph.pick_per_row(rows, &diag)?;
    let rows = graph.mean(rows, Axis::Rows);
    let t = graph.transpose(scores);
    let cols = graph.log_softmax(t);
    let cols = graph.pick_per_row(cols, &diag)?;
    let cols = graph.mean(cols, Axis::Rows);
    let sum = graph.add(rows, cols)?;
    Ok(graph.scale(sum, T::from_f64(-0.5)))
}
