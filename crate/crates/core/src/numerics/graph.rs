use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use super::array::{Array, ParamId, ParamStore, Real};
use super::kernels::{matmul_nn, matmul_nt, matmul_tn};

/// Variance floor used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce or join along rows (axis 0).
    Rows,
    /// Reduce or join along columns (axis 1, the last axis).
    Cols,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    Shape { node: String, detail: String },
    UnboundInput(String),
    NotEvaluated,
    SeedShape { expected: (usize, usize), got: (usize, usize) },
    NonScalarOutput { rows: usize, cols: usize },
    IndexOutOfRange { node: String, index: usize, bound: usize },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::Shape { node, detail } => write!(f, "shape mismatch at {node}: {detail}"),
            GraphError::UnboundInput(name) => write!(f, "input `{name}` is not bound"),
            GraphError::NotEvaluated => f.write_str("backpropagate called before evaluate"),
            GraphError::SeedShape { expected, got } => {
                write!(f, "seed gradient shape {got:?} does not match output {expected:?}")
            }
            GraphError::NonScalarOutput { rows, cols } => {
                write!(f, "gradient check needs a scalar output, got {rows}x{cols}")
            }
            GraphError::IndexOutOfRange { node, index, bound } => {
                write!(f, "index {index} out of range {bound} at {node}")
            }
        }
    }
}

impl core::error::Error for GraphError {}

#[derive(Debug, Clone)]
enum Op<T> {
    Input(String),
    Param(ParamId),
    Const(Array<T>),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Mean { x: NodeId, axis: Axis },
    Embedding { table: NodeId, ids: Vec<usize> },
    Dropout { x: NodeId, mask: Option<Vec<T>> },
    Concat { parts: Vec<NodeId>, axis: Axis },
    MaskFill { x: NodeId, keep: Vec<bool>, broadcast_rows: bool, fill: T },
    Transpose(NodeId),
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    PickPerRow { x: NodeId, cols: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Mean { .. } => "mean",
            Op::Embedding { .. } => "embedding",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::MaskFill { .. } => "mask_fill",
            Op::Transpose(_) => "transpose",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::PickPerRow { .. } => "pick",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    rows: usize,
    cols: usize,
}

/// Static computation graph over rank-2 arrays.
///
/// Nodes are appended in dependency order, so node index order is a valid
/// topological order and evaluation is deterministic. `evaluate` caches every
/// intermediate needed by `backpropagate`.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    outputs: Vec<(String, NodeId)>,
    values: Vec<Vec<T>>,
    // per-node auxiliary cache (layer norm: normalized values then 1/std per row)
    aux: Vec<Vec<T>>,
    evaluated: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), outputs: Vec::new(), values: Vec::new(), aux: Vec::new(), evaluated: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    fn label(&self, id: usize) -> String {
        format!("{}#{}", self.nodes[id].op.name(), id)
    }

    fn next_label(&self, op: &str) -> String {
        format!("{}#{}", op, self.nodes.len())
    }

    fn push(&mut self, op: Op<T>, rows: usize, cols: usize) -> NodeId {
        self.evaluated = false;
        self.nodes.push(Node { op, rows, cols });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &str, detail: String) -> GraphError {
        GraphError::Shape { node: self.next_label(op), detail }
    }

    /// Declares a named input bound at evaluation time.
    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Input(name.to_string()), rows, cols)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let (rows, cols) = store.get(id).value.dims2();
        self.push(Op::Param(id), rows, cols)
    }

    pub fn constant(&mut self, value: Array<T>) -> NodeId {
        let (rows, cols) = value.dims2();
        self.push(Op::Const(value), rows, cols)
    }

    /// Registers a named output returned by [`Graph::evaluate`].
    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.retain(|(n, _)| n != name);
        self.outputs.push((name.to_string(), id));
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.shape_err("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        Ok(self.push(Op::MatMul(a, b), m, n))
    }

    /// Elementwise sum; `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (m, n) = self.shape(a);
        let (bm, bn) = self.shape(b);
        if bn != n || (bm != m && bm != 1) {
            return Err(self.shape_err("add", format!("{m}x{n} plus {bm}x{bn}")));
        }
        Ok(self.push(Op::Add(a, b), m, n))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let (m, n) = self.shape(x);
        self.push(Op::Scale(x, factor), m, n)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        self.push(Op::Relu(x), m, n)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        self.push(Op::Softmax(x), m, n)
    }

    /// Log-softmax over the last axis, computed with the max-shift for stability.
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        self.push(Op::LogSoftmax(x), m, n)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        self.push(Op::Log(x), m, n)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        self.push(Op::Exp(x), m, n)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each `1 x cols`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, GraphError> {
        let (m, n) = self.shape(x);
        if self.shape(gamma) != (1, n) || self.shape(beta) != (1, n) {
            return Err(self.shape_err(
                "layer_norm",
                format!("affine shapes {:?}/{:?} for width {n}", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, m, n))
    }

    pub fn mean(&mut self, x: NodeId, axis: Axis) -> NodeId {
        let (m, n) = self.shape(x);
        let (r, c) = match axis {
            Axis::Rows => (1, n),
            Axis::Cols => (m, 1),
        };
        self.push(Op::Mean { x, axis }, r, c)
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, GraphError> {
        let (vocab, width) = self.shape(table);
        if ids.is_empty() {
            return Err(self.shape_err("embedding", "empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(GraphError::IndexOutOfRange { node: self.next_label("embedding"), index: bad, bound: vocab });
        }
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, ids.len(), width))
    }

    /// Inverted dropout. With `rng == None` or `rate == 0` the node is the identity.
    ///
    /// The mask is drawn once at construction so repeated evaluations agree.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, rng: Option<&mut R>) -> NodeId {
        let (m, n) = self.shape(x);
        let mask = match rng {
            Some(rng) if rate > 0.0 => {
                let keep = T::from_f64(1.0 / (1.0 - rate));
                Some((0..m * n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect())
            }
            _ => None,
        };
        self.push(Op::Dropout { x, mask }, m, n)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId, GraphError> {
        let Some(&first) = parts.first() else {
            return Err(self.shape_err("concat", "no parts".into()));
        };
        let (m0, n0) = self.shape(first);
        let (mut rows, mut cols) = (0, 0);
        for &p in parts {
            let (m, n) = self.shape(p);
            match axis {
                Axis::Rows if n != n0 => {
                    return Err(self.shape_err("concat", format!("row-join of width {n} with {n0}")));
                }
                Axis::Cols if m != m0 => {
                    return Err(self.shape_err("concat", format!("column-join of height {m} with {m0}")));
                }
                _ => {}
            }
            rows += m;
            cols += n;
        }
        let (r, c) = match axis {
            Axis::Rows => (rows, n0),
            Axis::Cols => (m0, cols),
        };
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, r, c))
    }

    /// Replaces entries where `keep` is false with `fill`.
    ///
    /// `keep` has either one flag per entry or one flag per column, the latter
    /// broadcast over all rows (the attention key mask).
    pub fn mask_fill(&mut self, x: NodeId, keep: &[bool], fill: T) -> Result<NodeId, GraphError> {
        let (m, n) = self.shape(x);
        let broadcast_rows = if keep.len() == m * n {
            false
        } else if keep.len() == n {
            true
        } else {
            return Err(self.shape_err("mask_fill", format!("mask of {} for {m}x{n}", keep.len())));
        };
        Ok(self.push(Op::MaskFill { x, keep: keep.to_vec(), broadcast_rows, fill }, m, n))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        self.push(Op::Transpose(x), n, m)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, GraphError> {
        let (m, n) = self.shape(x);
        if len == 0 || start + len > m {
            return Err(self.shape_err("slice_rows", format!("rows {start}..{} of {m}", start + len)));
        }
        Ok(self.push(Op::SliceRows { x, start }, len, n))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, GraphError> {
        let (m, n) = self.shape(x);
        if len == 0 || start + len > n {
            return Err(self.shape_err("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        Ok(self.push(Op::SliceCols { x, start }, m, len))
    }

    /// Selects `x[i, cols[i]]` for every row, giving an `m x 1` column.
    pub fn pick_per_row(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId, GraphError> {
        let (m, n) = self.shape(x);
        if cols.len() != m {
            return Err(self.shape_err("pick", format!("{} indices for {m} rows", cols.len())));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(GraphError::IndexOutOfRange { node: self.next_label("pick"), index: bad, bound: n });
        }
        Ok(self.push(Op::PickPerRow { x, cols: cols.to_vec() }, m, 1))
    }

    /// Value of a node after [`Graph::evaluate`].
    pub fn value(&self, id: NodeId) -> Array<T> {
        let n = &self.nodes[id.0];
        Array::new(vec![n.rows, n.cols], self.values[id.0].clone()).expect("node shape invariant")
    }

    pub fn value_slice(&self, id: NodeId) -> &[T] {
        &self.values[id.0]
    }

    /// Runs every node in index order, binding `inputs` by name.
    pub fn evaluate(
        &mut self,
        params: &ParamStore<T>,
        inputs: &[(&str, Array<T>)],
    ) -> Result<BTreeMap<String, Array<T>>, GraphError> {
        self.values.clear();
        self.aux.clear();
        self.evaluated = false;
        for id in 0..self.nodes.len() {
            let (value, aux) = self.forward_node(id, params, inputs)?;
            self.values.push(value);
            self.aux.push(aux);
        }
        self.evaluated = true;
        Ok(self.outputs.iter().map(|(name, id)| (name.clone(), self.value(*id))).collect())
    }

    fn forward_node(
        &self,
        id: usize,
        params: &ParamStore<T>,
        inputs: &[(&str, Array<T>)],
    ) -> Result<(Vec<T>, Vec<T>), GraphError> {
        let node = &self.nodes[id];
        let (rows, cols) = (node.rows, node.cols);
        let v = |n: &NodeId| -> &[T] { &self.values[n.0] };
        let out = match &node.op {
            Op::Input(name) => {
                let (_, arr) =
                    inputs.iter().find(|(n, _)| n == name).ok_or_else(|| GraphError::UnboundInput(name.clone()))?;
                if arr.dims2() != (rows, cols) {
                    return Err(GraphError::Shape {
                        node: self.label(id),
                        detail: format!("input `{name}` bound as {:?}, declared {rows}x{cols}", arr.dims2()),
                    });
                }
                arr.values().to_vec()
            }
            Op::Param(pid) => {
                let p = &params.get(*pid).value;
                if p.dims2() != (rows, cols) {
                    return Err(GraphError::Shape {
                        node: self.label(id),
                        detail: format!("parameter now {:?}, graph built for {rows}x{cols}", p.dims2()),
                    });
                }
                p.values().to_vec()
            }
            Op::Const(a) => a.values().to_vec(),
            Op::MatMul(a, b) => {
                let k = self.nodes[a.0].cols;
                let mut out = vec![T::zero(); rows * cols];
                matmul_nn(v(a), v(b), &mut out, rows, k, cols);
                out
            }
            Op::Add(a, b) => {
                let (av, bv) = (v(a), v(b));
                if bv.len() == av.len() {
                    av.iter().zip(bv).map(|(&x, &y)| x + y).collect()
                } else {
                    av.iter().enumerate().map(|(i, &x)| x + bv[i % cols]).collect()
                }
            }
            Op::Scale(x, f) => v(x).iter().map(|&a| a * *f).collect(),
            Op::Relu(x) => v(x).iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect(),
            Op::Softmax(x) => {
                let mut out = v(x).to_vec();
                for row in out.chunks_mut(cols) {
                    softmax_in_place(row);
                }
                out
            }
            Op::LogSoftmax(x) => {
                let mut out = v(x).to_vec();
                for row in out.chunks_mut(cols) {
                    let max = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
                    let lse = row.iter().fold(T::zero(), |s, &a| s + (a - max).exp()).ln() + max;
                    for a in row.iter_mut() {
                        *a = *a - lse;
                    }
                }
                out
            }
            Op::Log(x) => v(x).iter().map(|&a| a.ln()).collect(),
            Op::Exp(x) => v(x).iter().map(|&a| a.exp()).collect(),
            Op::LayerNorm { x, gamma, beta } => {
                let (xv, g, b) = (v(x), v(gamma), v(beta));
                let eps = T::from_f64(LAYER_NORM_EPS);
                let nf = T::from_f64(cols as f64);
                let mut xhat = vec![T::zero(); rows * cols];
                let mut inv_std = vec![T::zero(); rows];
                let mut out = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let mean = row.iter().fold(T::zero(), |s, &a| s + a) / nf;
                    let var = row.iter().fold(T::zero(), |s, &a| s + (a - mean) * (a - mean)) / nf;
                    let is = T::one() / (var + eps).sqrt();
                    inv_std[r] = is;
                    for c in 0..cols {
                        // exact zero for a zero-variance row
                        let h = if var == T::zero() { T::zero() } else { (row[c] - mean) * is };
                        xhat[r * cols + c] = h;
                        out[r * cols + c] = h * g[c] + b[c];
                    }
                }
                xhat.extend(inv_std);
                return Ok((out, xhat));
            }
            Op::Mean { x, axis } => {
                let (m, n) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                let xv = v(x);
                match axis {
                    Axis::Rows => {
                        let mut out = vec![T::zero(); n];
                        for r in 0..m {
                            for c in 0..n {
                                out[c] = out[c] + xv[r * n + c];
                            }
                        }
                        let inv = T::one() / T::from_f64(m as f64);
                        out.iter_mut().for_each(|a| *a = *a * inv);
                        out
                    }
                    Axis::Cols => {
                        let inv = T::one() / T::from_f64(n as f64);
                        xv.chunks(n).map(|row| row.iter().fold(T::zero(), |s, &a| s + a) * inv).collect()
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tv = v(table);
                let mut out = Vec::with_capacity(rows * cols);
                for &i in ids {
                    out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
                }
                out
            }
            Op::Dropout { x, mask } => match mask {
                Some(mask) => v(x).iter().zip(mask).map(|(&a, &m)| a * m).collect(),
                None => v(x).to_vec(),
            },
            Op::Concat { parts, axis } => {
                let mut out = vec![T::zero(); rows * cols];
                let mut offset = 0;
                for p in parts {
                    let (pm, pn) = (self.nodes[p.0].rows, self.nodes[p.0].cols);
                    let pv = v(p);
                    match axis {
                        Axis::Rows => {
                            out[offset * cols..(offset + pm) * cols].copy_from_slice(pv);
                            offset += pm;
                        }
                        Axis::Cols => {
                            for r in 0..pm {
                                out[r * cols + offset..r * cols + offset + pn]
                                    .copy_from_slice(&pv[r * pn..(r + 1) * pn]);
                            }
                            offset += pn;
                        }
                    }
                }
                out
            }
            Op::MaskFill { x, keep, broadcast_rows, fill } => v(x)
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let k = if *broadcast_rows { keep[i % cols] } else { keep[i] };
                    if k {
                        a
                    } else {
                        *fill
                    }
                })
                .collect(),
            Op::Transpose(x) => {
                let xv = v(x);
                let mut out = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        out[r * cols + c] = xv[c * rows + r];
                    }
                }
                out
            }
            Op::SliceRows { x, start } => v(x)[start * cols..(start + rows) * cols].to_vec(),
            Op::SliceCols { x, start } => {
                let n = self.nodes[x.0].cols;
                let xv = v(x);
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    out.extend_from_slice(&xv[r * n + start..r * n + start + cols]);
                }
                out
            }
            Op::PickPerRow { x, cols: idx } => {
                let n = self.nodes[x.0].cols;
                let xv = v(x);
                idx.iter().enumerate().map(|(r, &c)| xv[r * n + c]).collect()
            }
        };
        Ok((out, Vec::new()))
    }

    /// Reverse sweep from `output` seeded with `seed`.
    ///
    /// Gradients are summed into `Parameter::grad` of every parameter with
    /// `requires_grad`; parameters reached by the graph but receiving no signal
    /// get a zero gradient.
    pub fn backpropagate(&self, params: &mut ParamStore<T>, output: NodeId, seed: &Array<T>) -> Result<(), GraphError> {
        if !self.evaluated {
            return Err(GraphError::NotEvaluated);
        }
        let out_shape = self.shape(output);
        if seed.dims2() != out_shape {
            return Err(GraphError::SeedShape { expected: out_shape, got: seed.dims2() });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.values().to_vec());

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if let Op::Param(pid) = node.op {
                let p = params.get_mut(pid);
                if p.requires_grad {
                    let g = grads[id].take().unwrap_or_else(|| vec![T::zero(); node.rows * node.cols]);
                    match &mut p.grad {
                        Some(existing) => {
                            for (e, d) in existing.values_mut().iter_mut().zip(&g) {
                                *e = *e + *d;
                            }
                        }
                        None => p.grad = Some(Array::new(p.value.shape().to_vec(), g).expect("grad shape")),
                    }
                }
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let (rows, cols) = (node.rows, node.cols);
        let out = &self.values[id];
        match &node.op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
            Op::MatMul(a, b) => {
                let k = self.nodes[a.0].cols;
                let ga = acc(grads, *a, rows * k);
                matmul_nt(g, &self.values[b.0], ga, rows, cols, k);
                let gb = acc(grads, *b, k * cols);
                matmul_tn(&self.values[a.0], g, gb, rows, k, cols);
            }
            Op::Add(a, b) => {
                let ga = acc(grads, *a, rows * cols);
                add_into(ga, g);
                let blen = self.nodes[b.0].rows * self.nodes[b.0].cols;
                let gb = acc(grads, *b, blen);
                if blen == g.len() {
                    add_into(gb, g);
                } else {
                    for (i, &d) in g.iter().enumerate() {
                        gb[i % cols] = gb[i % cols] + d;
                    }
                }
            }
            Op::Scale(x, f) => {
                let gx = acc(grads, *x, rows * cols);
                for (o, &d) in gx.iter_mut().zip(g) {
                    *o = *o + d * *f;
                }
            }
            Op::Relu(x) => {
                let xv = &self.values[x.0];
                let gx = acc(grads, *x, rows * cols);
                for i in 0..g.len() {
                    if xv[i] > T::zero() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
            Op::Softmax(x) => {
                let gx = acc(grads, *x, rows * cols);
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gy = &g[r * cols..(r + 1) * cols];
                    let dot = y.iter().zip(gy).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for c in 0..cols {
                        gx[r * cols + c] = gx[r * cols + c] + y[c] * (gy[c] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let gx = acc(grads, *x, rows * cols);
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gy = &g[r * cols..(r + 1) * cols];
                    let total = gy.iter().fold(T::zero(), |s, &a| s + a);
                    for c in 0..cols {
                        gx[r * cols + c] = gx[r * cols + c] + gy[c] - y[c].exp() * total;
                    }
                }
            }
            Op::Log(x) => {
                let xv = &self.values[x.0];
                let gx = acc(grads, *x, rows * cols);
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] / xv[i];
                }
            }
            Op::Exp(x) => {
                let gx = acc(grads, *x, rows * cols);
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * out[i];
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let aux = &self.aux[id];
                let (xhat, inv_std) = aux.split_at(rows * cols);
                let gam = &self.values[gamma.0];
                let nf = T::from_f64(cols as f64);
                {
                    let gg = acc(grads, *gamma, cols);
                    for i in 0..g.len() {
                        gg[i % cols] = gg[i % cols] + g[i] * xhat[i];
                    }
                }
                {
                    let gb = acc(grads, *beta, cols);
                    for i in 0..g.len() {
                        gb[i % cols] = gb[i % cols] + g[i];
                    }
                }
                let gx = acc(grads, *x, rows * cols);
                for r in 0..rows {
                    let base = r * cols;
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for c in 0..cols {
                        let d = g[base + c] * gam[c];
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * xhat[base + c];
                    }
                    for c in 0..cols {
                        let d = g[base + c] * gam[c];
                        let v = (d * nf - sum_d - xhat[base + c] * sum_dx) * inv_std[r] / nf;
                        gx[base + c] = gx[base + c] + v;
                    }
                }
            }
            Op::Mean { x, axis } => {
                let (m, n) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                let gx = acc(grads, *x, m * n);
                match axis {
                    Axis::Rows => {
                        let inv = T::one() / T::from_f64(m as f64);
                        for r in 0..m {
                            for c in 0..n {
                                gx[r * n + c] = gx[r * n + c] + g[c] * inv;
                            }
                        }
                    }
                    Axis::Cols => {
                        let inv = T::one() / T::from_f64(n as f64);
                        for r in 0..m {
                            for c in 0..n {
                                gx[r * n + c] = gx[r * n + c] + g[r] * inv;
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tlen = self.nodes[table.0].rows * cols;
                let gt = acc(grads, *table, tlen);
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[i * cols + c] = gt[i * cols + c] + g[r * cols + c];
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = acc(grads, *x, rows * cols);
                match mask {
                    Some(mask) => {
                        for i in 0..g.len() {
                            gx[i] = gx[i] + g[i] * mask[i];
                        }
                    }
                    None => add_into(gx, g),
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for p in parts {
                    let (pm, pn) = (self.nodes[p.0].rows, self.nodes[p.0].cols);
                    let gp = acc(grads, *p, pm * pn);
                    match axis {
                        Axis::Rows => {
                            add_into(gp, &g[offset * cols..(offset + pm) * cols]);
                            offset += pm;
                        }
                        Axis::Cols => {
                            for r in 0..pm {
                                add_into(&mut gp[r * pn..(r + 1) * pn], &g[r * cols + offset..r * cols + offset + pn]);
                            }
                            offset += pn;
                        }
                    }
                }
            }
            Op::MaskFill { x, keep, broadcast_rows, .. } => {
                let gx = acc(grads, *x, rows * cols);
                for i in 0..g.len() {
                    let k = if *broadcast_rows { keep[i % cols] } else { keep[i] };
                    if k {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
            Op::Transpose(x) => {
                let gx = acc(grads, *x, rows * cols);
                // x is cols x rows
                for r in 0..rows {
                    for c in 0..cols {
                        gx[c * rows + r] = gx[c * rows + r] + g[r * cols + c];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let m = self.nodes[x.0].rows;
                let gx = acc(grads, *x, m * cols);
                add_into(&mut gx[start * cols..(start + rows) * cols], g);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                let gx = acc(grads, *x, m * n);
                for r in 0..rows {
                    add_into(&mut gx[r * n + start..r * n + start + cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::PickPerRow { x, cols: idx } => {
                let (m, n) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                let gx = acc(grads, *x, m * n);
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * n + c] = gx[r * n + c] + g[r];
                }
            }
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut [T] {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
    let mut sum = T::zero();
    for a in row.iter_mut() {
        *a = (*a - max).exp();
        sum = sum + *a;
    }
    for a in row.iter_mut() {
        *a = *a / sum;
    }
}
