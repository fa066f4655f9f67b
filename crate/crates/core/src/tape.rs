//! Expression tape with reverse-mode differentiation.
//!
//! Graphs are built forward, one node per primitive, and replayed in
//! reverse to accumulate exact partial derivatives of a designated
//! scalar output. The primitive set is exactly what the model needs:
//! matrix-vector product, element-wise tanh/sigmoid/product, addition,
//! subtraction, concatenation, scalar-weighted sums, softmax, table
//! lookup, a sliding-window convolution and three-segment max-pooling.
//!
//! Parameter values are copied onto the tape when referenced; after a
//! backward pass [`Tape::apply_grads`] accumulates their gradients back
//! into the owning [`ParamStore`] in node order, which keeps reductions
//! deterministic.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Const,
    Param { param: ParamId },
    Lookup { param: ParamId, row: usize },
    MatVec { w: NodeId, x: NodeId },
    Dot { a: NodeId, b: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Concat { parts: Vec<NodeId> },
    WeightedSum { weights: NodeId, items: Vec<NodeId> },
    Softmax { x: NodeId },
    Conv1d { w: NodeId, xs: Vec<NodeId>, window: usize },
    PiecewiseMax { x: NodeId, p1: usize, p2: usize },
    NegLogPick { x: NodeId, index: usize },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the designated loss w.r.t. this node, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        id
    }

    fn shape_err(&self, op: &'static str, inputs: &[NodeId], msg: String) -> Error {
        let dims: Vec<String> = inputs
            .iter()
            .map(|n| format!("node {}:{:?}", n.0, self.nodes[n.0].value.dims()))
            .collect();
        Error::Shape {
            op,
            msg: format!("{msg} (inputs: {})", dims.join(", ")),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.constant(Tensor::scalar(x))
    }

    /// Copy a parameter value onto the tape. Its gradient is routed back
    /// to the store by [`Tape::apply_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(Op::Param { param: id }, store.value(id).clone())
    }

    /// One row of a matrix parameter, as a vector node. The backward
    /// pass scatter-adds into just that row.
    pub fn lookup(&mut self, store: &ParamStore, id: ParamId, row: usize) -> Result<NodeId> {
        let table = store.value(id);
        if !table.is_matrix() || row >= table.rows() {
            return Err(Error::Shape {
                op: "lookup",
                msg: format!(
                    "row {row} not available in parameter {:?} with dims {:?}",
                    store.name(id),
                    table.dims()
                ),
            });
        }
        let value = Tensor::vector(table.row(row).to_vec());
        Ok(self.push(Op::Lookup { param: id, row }, value))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (wt, xt) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        if !wt.is_matrix() || !xt.is_vector() || wt.cols() != xt.numel() {
            return Err(self.shape_err("matvec", &[w, x], "need matrix (m,n) and vector (n)".into()));
        }
        let (m, n) = (wt.rows(), wt.cols());
        let wd = wt.data();
        let xd = xt.data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * xd[j];
            }
            out[i] = acc;
        }
        Ok(self.push(Op::MatVec { w, x }, Tensor::vector(out)))
    }

    /// `W x + b` as matvec followed by add.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    /// Flat inner product of two tensors with identical dims; returns a
    /// scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if at.dims() != bt.dims() {
            return Err(self.shape_err("dot", &[a, b], "need tensors of identical dims".into()));
        }
        let mut acc = 0.0;
        for (x, y) in at.data().iter().zip(bt.data()) {
            acc += x * y;
        }
        Ok(self.push(Op::Dot { a, b }, Tensor::scalar(acc)))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = map_tensor(&self.nodes[x.0].value, f64::tanh);
        self.push(Op::Tanh { x }, value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = map_tensor(&self.nodes[x.0].value, sigmoid);
        self.push(Op::Sigmoid { x }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_values("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_values("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub { a, b }, value))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_values("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul { a, b }, value))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                msg: "no parts".into(),
            });
        }
        let mut out = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if !t.is_vector() {
                return Err(self.shape_err("concat", parts, format!("node {} is not a vector", p.0)));
            }
            out.extend_from_slice(t.data());
        }
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, Tensor::vector(out)))
    }

    /// `sum_j weights[j] * items[j]` over equal-length vectors.
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> Result<NodeId> {
        let wt = &self.nodes[weights.0].value;
        if !wt.is_vector() || wt.numel() != items.len() || items.is_empty() {
            return Err(self.shape_err(
                "weighted_sum",
                &[weights],
                format!("weight vector must match {} items", items.len()),
            ));
        }
        let dim = self.nodes[items[0].0].value.numel();
        for it in items {
            let t = &self.nodes[it.0].value;
            if !t.is_vector() || t.numel() != dim {
                return Err(self.shape_err("weighted_sum", items, "items must be equal-length vectors".into()));
            }
        }
        let mut out = vec![0.0; dim];
        for (j, it) in items.iter().enumerate() {
            let w = self.nodes[weights.0].value.data()[j];
            for (o, v) in out.iter_mut().zip(self.nodes[it.0].value.data()) {
                *o += w * v;
            }
        }
        Ok(self.push(
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            Tensor::vector(out),
        ))
    }

    /// Numerically stable softmax over a vector (max subtraction).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xt = &self.nodes[x.0].value;
        if !xt.is_vector() {
            return Err(self.shape_err("softmax", &[x], "input must be a vector".into()));
        }
        Ok(self.push(Op::Softmax { x }, Tensor::vector(softmax_slice(xt.data()))))
    }

    /// Sliding-window convolution: `out[k, p] = W[k, :] . concat(xs[p..p+window])`.
    /// `xs` must be at least `window` equal-length vectors.
    pub fn conv1d(&mut self, w: NodeId, xs: &[NodeId], window: usize) -> Result<NodeId> {
        let wt = &self.nodes[w.0].value;
        if xs.is_empty() || window == 0 {
            return Err(Error::Shape {
                op: "conv1d",
                msg: "need at least one input vector and a positive window".into(),
            });
        }
        let d = self.nodes[xs[0].0].value.numel();
        for x in xs {
            let t = &self.nodes[x.0].value;
            if !t.is_vector() || t.numel() != d {
                return Err(self.shape_err("conv1d", xs, "inputs must be equal-length vectors".into()));
            }
        }
        if xs.len() < window {
            return Err(self.shape_err(
                "conv1d",
                xs,
                format!("{} inputs shorter than window {window}", xs.len()),
            ));
        }
        if !wt.is_matrix() || wt.cols() != window * d {
            return Err(self.shape_err(
                "conv1d",
                &[w],
                format!("filter matrix must have {} columns", window * d),
            ));
        }
        let k = wt.rows();
        let positions = xs.len() - window + 1;
        let mut out = vec![0.0; k * positions];
        let wd = wt.data();
        for p in 0..positions {
            for f in 0..k {
                let row = &wd[f * window * d..(f + 1) * window * d];
                let mut acc = 0.0;
                for t in 0..window {
                    let xv = self.nodes[xs[p + t].0].value.data();
                    let seg = &row[t * d..(t + 1) * d];
                    for j in 0..d {
                        acc += seg[j] * xv[j];
                    }
                }
                out[f * positions + p] = acc;
            }
        }
        let value = Tensor::matrix(k, positions, out)?;
        Ok(self.push(
            Op::Conv1d {
                w,
                xs: xs.to_vec(),
                window,
            },
            value,
        ))
    }

    /// Per-row max over the three segments `[0, p1-1]`, `[p1, p2]`,
    /// `[p2+1, cols-1]` of a matrix. Empty segments contribute 0. Output
    /// is filter-major: row k occupies entries `3k..3k+3`.
    pub fn piecewise_max(&mut self, x: NodeId, p1: usize, p2: usize) -> Result<NodeId> {
        let xt = &self.nodes[x.0].value;
        if !xt.is_matrix() {
            return Err(self.shape_err("piecewise_max", &[x], "input must be a matrix".into()));
        }
        let cols = xt.cols();
        if p1 > p2 || p2 >= cols {
            return Err(self.shape_err(
                "piecewise_max",
                &[x],
                format!("positions ({p1}, {p2}) out of range for {cols} columns"),
            ));
        }
        let rows = xt.rows();
        let mut out = vec![0.0; rows * 3];
        for r in 0..rows {
            let row = xt.row(r);
            for (s, (lo, hi)) in segment_bounds(p1, p2, cols).into_iter().enumerate() {
                out[r * 3 + s] = row[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if lo >= hi {
                    out[r * 3 + s] = 0.0;
                }
            }
        }
        Ok(self.push(Op::PiecewiseMax { x, p1, p2 }, Tensor::vector(out)))
    }

    /// `-ln(x[index])`, the per-bag cross-entropy term. May produce an
    /// infinity when the picked probability underflows to zero; callers
    /// surface that as a numeric failure rather than masking it.
    pub fn neg_log_pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xt = &self.nodes[x.0].value;
        if !xt.is_vector() || index >= xt.numel() {
            return Err(self.shape_err(
                "neg_log_pick",
                &[x],
                format!("index {index} out of range"),
            ));
        }
        let v = -xt.data()[index].ln();
        Ok(self.push(Op::NegLogPick { x, index }, Tensor::scalar(v)))
    }

    fn zip_values(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if at.dims() != bt.dims() {
            return Err(self.shape_err(op, &[a, b], "operands must share a shape".into()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| f(*x, *y)).collect();
        if at.is_matrix() {
            Tensor::matrix(at.rows(), at.cols(), data)
        } else {
            Ok(Tensor::vector(data))
        }
    }

    /// Reverse pass seeding the designated scalar loss with 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse pass with an explicit seed, e.g. `1/M` for batch means.
    pub fn backward_scaled(&mut self, loss: NodeId, seed: f64) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                msg: format!(
                    "designated loss node {} must be scalar, has dims {:?}",
                    loss.0,
                    self.nodes[loss.0].value.dims()
                ),
            });
        }
        self.grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let d_out = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &d_out);
            self.grads[i] = Some(d_out);
        }
        Ok(())
    }

    fn add_to(&mut self, id: NodeId, contribution: &[f64]) {
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (dst, src) in g.iter_mut().zip(contribution) {
                    *dst += src;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn backward_node(&mut self, i: usize, d_out: &[f64]) {
        // Ops are matched by value to own copies of the child id lists;
        // the node values themselves are only read.
        match &self.nodes[i].op {
            Op::Const | Op::Param { .. } | Op::Lookup { .. } => {}
            Op::MatVec { w, x } => {
                let (w, x) = (*w, *x);
                let wt = &self.nodes[w.0].value;
                let (m, n) = (wt.rows(), wt.cols());
                let wd = wt.data().to_vec();
                let xd = self.nodes[x.0].value.data().to_vec();
                let mut dw = vec![0.0; m * n];
                let mut dx = vec![0.0; n];
                for r in 0..m {
                    let g = d_out[r];
                    for c in 0..n {
                        dw[r * n + c] += g * xd[c];
                        dx[c] += g * wd[r * n + c];
                    }
                }
                self.add_to(w, &dw);
                self.add_to(x, &dx);
            }
            Op::Dot { a, b } => {
                let (a, b) = (*a, *b);
                let g = d_out[0];
                let da: Vec<f64> = self.nodes[b.0].value.data().iter().map(|v| g * v).collect();
                let db: Vec<f64> = self.nodes[a.0].value.data().iter().map(|v| g * v).collect();
                self.add_to(a, &da);
                self.add_to(b, &db);
            }
            Op::Tanh { x } => {
                let x = *x;
                let dx: Vec<f64> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(d_out)
                    .map(|(y, g)| g * (1.0 - y * y))
                    .collect();
                self.add_to(x, &dx);
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let dx: Vec<f64> = self.nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(d_out)
                    .map(|(y, g)| g * y * (1.0 - y))
                    .collect();
                self.add_to(x, &dx);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_to(a, d_out);
                self.add_to(b, d_out);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.add_to(a, d_out);
                let neg: Vec<f64> = d_out.iter().map(|g| -g).collect();
                self.add_to(b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = d_out
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(g, v)| g * v)
                    .collect();
                let db: Vec<f64> = d_out
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(g, v)| g * v)
                    .collect();
                self.add_to(a, &da);
                self.add_to(b, &db);
            }
            Op::Concat { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    let slice = d_out[offset..offset + n].to_vec();
                    self.add_to(p, &slice);
                    offset += n;
                }
            }
            Op::WeightedSum { weights, items } => {
                let weights = *weights;
                let items = items.clone();
                let wd = self.nodes[weights.0].value.data().to_vec();
                let mut dweights = vec![0.0; items.len()];
                for (j, it) in items.iter().enumerate() {
                    let vd = self.nodes[it.0].value.data();
                    let mut acc = 0.0;
                    for (g, v) in d_out.iter().zip(vd) {
                        acc += g * v;
                    }
                    dweights[j] = acc;
                    let di: Vec<f64> = d_out.iter().map(|g| g * wd[j]).collect();
                    self.add_to(*it, &di);
                }
                self.add_to(weights, &dweights);
            }
            Op::Softmax { x } => {
                let x = *x;
                let y = self.nodes[i].value.data();
                let mut inner = 0.0;
                for (g, yi) in d_out.iter().zip(y) {
                    inner += g * yi;
                }
                let dx: Vec<f64> = y.iter().zip(d_out).map(|(yi, g)| yi * (g - inner)).collect();
                self.add_to(x, &dx);
            }
            Op::Conv1d { w, xs, window } => {
                let (w, xs, window) = (*w, xs.clone(), *window);
                let wt = &self.nodes[w.0].value;
                let (k, cols) = (wt.rows(), wt.cols());
                let d = cols / window;
                let positions = xs.len() - window + 1;
                let wd = wt.data().to_vec();
                let mut dw = vec![0.0; k * cols];
                let mut dxs = vec![vec![0.0; d]; xs.len()];
                for p in 0..positions {
                    for f in 0..k {
                        let g = d_out[f * positions + p];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &wd[f * cols..(f + 1) * cols];
                        for t in 0..window {
                            let xv = self.nodes[xs[p + t].0].value.data();
                            let dx = &mut dxs[p + t];
                            for j in 0..d {
                                dw[f * cols + t * d + j] += g * xv[j];
                                dx[j] += g * row[t * d + j];
                            }
                        }
                    }
                }
                self.add_to(w, &dw);
                for (x, dx) in xs.iter().zip(dxs) {
                    self.add_to(*x, &dx);
                }
            }
            Op::PiecewiseMax { x, p1, p2 } => {
                let (x, p1, p2) = (*x, *p1, *p2);
                let xt = &self.nodes[x.0].value;
                let (rows, cols) = (xt.rows(), xt.cols());
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = xt.row(r);
                    for (s, (lo, hi)) in segment_bounds(p1, p2, cols).into_iter().enumerate() {
                        if lo >= hi {
                            continue;
                        }
                        // first maximum wins on ties
                        let mut arg = lo;
                        for c in lo + 1..hi {
                            if row[c] > row[arg] {
                                arg = c;
                            }
                        }
                        dx[r * cols + arg] += d_out[r * 3 + s];
                    }
                }
                self.add_to(x, &dx);
            }
            Op::NegLogPick { x, index } => {
                let (x, index) = (*x, *index);
                let v = self.nodes[x.0].value.data()[index];
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                dx[index] = -d_out[0] / v;
                self.add_to(x, &dx);
            }
        }
    }

    /// Accumulate parameter and lookup-row gradients into the store, in
    /// node order (fixed, so reductions are deterministic).
    pub fn apply_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &self.grads[i] {
                match node.op {
                    Op::Param { param } => store.add_grad(param, g)?,
                    Op::Lookup { param, row } => store.add_row_grad(param, row, g)?,
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// Segment half-open bounds for three-segment pooling over `cols` slots.
fn segment_bounds(p1: usize, p2: usize, cols: usize) -> [(usize, usize); 3] {
    [(0, p1), (p1, p2 + 1), (p2 + 1, cols)]
}

fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data: Vec<f64> = t.data().iter().map(|x| f(*x)).collect();
    if t.is_matrix() {
        Tensor::matrix(t.rows(), t.cols(), data).expect("shape preserved")
    } else {
        Tensor::vector(data)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stable softmax of a slice (max subtraction; the function is unchanged).
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn tanh_of_zero_vector_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros_vector(5));
        let y = t.tanh(x);
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_sums_to_one_and_is_positive() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let xs: Vec<f64> = (0..9).map(|_| rng.uniform(-40.0, 40.0)).collect();
            let y = softmax_slice(&xs);
            let sum: f64 = y.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(y.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_shift_invariant_bitwise_for_exact_shifts() {
        // integer inputs plus an integer shift keep the max-subtracted
        // differences bit-identical
        let xs = vec![1.0, -3.0, 4.0, 0.0];
        let shifted: Vec<f64> = xs.iter().map(|x| x + 256.0).collect();
        let a = softmax_slice(&xs);
        let b = softmax_slice(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn piecewise_max_hand_example() {
        // conv vector [1,5,2,4,3], p1=1, p2=3 -> (1, 5, 3)
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 5, vec![1.0, 5.0, 2.0, 4.0, 3.0]).unwrap());
        let y = t.piecewise_max(x, 1, 3).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 5.0, 3.0]);
    }

    #[test]
    fn piecewise_max_empty_first_segment_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 3, vec![-4.0, -5.0, -6.0]).unwrap());
        let y = t.piecewise_max(x, 0, 2).unwrap();
        // first and last segments are empty -> 0; middle takes the max
        assert_eq!(t.value(y).data(), &[0.0, -4.0, 0.0]);
    }

    #[test]
    fn piecewise_max_is_filter_major() {
        let mut t = Tape::new();
        let x = t
            .constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 40.0, 50.0, 60.0]).unwrap());
        let y = t.piecewise_max(x, 1, 1).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 40.0, 50.0, 60.0]);
    }

    #[test]
    fn shape_mismatch_names_offending_node() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("node 0") && msg.contains("node 1"), "{msg}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let build = || {
            let mut rng = Rng::new(99);
            let mut t = Tape::new();
            let w = t.constant(crate::params::init_matrix(4, 3, &mut rng));
            let x = t.constant(crate::params::init_vector(3, &mut rng));
            let h = t.matvec(w, x).unwrap();
            let y = t.tanh(h);
            let s = t.softmax(y).unwrap();
            t.value(s).clone()
        };
        assert!(build().bits_eq(&build()));
    }

    #[test]
    fn gradient_of_sum_tanh_matvec_matches_finite_differences() {
        // d/dW sum(tanh(W x)) checked against central differences at a
        // random point; tolerance 1e-6 relative.
        let mut rng = Rng::new(5);
        let w0 = crate::params::init_matrix(4, 3, &mut rng);
        let x0 = crate::params::init_vector(3, &mut rng);

        let eval = |wdata: &[f64]| -> f64 {
            let mut t = Tape::new();
            let w = t.constant(Tensor::matrix(4, 3, wdata.to_vec()).unwrap());
            let x = t.constant(x0.clone());
            let h = t.matvec(w, x).unwrap();
            let y = t.tanh(h);
            let ones = t.constant(Tensor::vector(vec![1.0; 4]));
            let s = t.dot(y, ones).unwrap();
            t.value(s).data()[0]
        };

        let mut t = Tape::new();
        let w = t.constant(w0.clone());
        let x = t.constant(x0.clone());
        let h = t.matvec(w, x).unwrap();
        let y = t.tanh(h);
        let ones = t.constant(Tensor::vector(vec![1.0; 4]));
        let s = t.dot(y, ones).unwrap();
        t.backward(s).unwrap();
        let analytic = t.grad(w).unwrap().to_vec();

        let h_step = 1e-6;
        let mut point = w0.data().to_vec();
        for k in 0..point.len() {
            let orig = point[k];
            point[k] = orig + h_step;
            let plus = eval(&point);
            point[k] = orig - h_step;
            let minus = eval(&point);
            point[k] = orig;
            let numeric = (plus - minus) / (2.0 * h_step);
            let denom = analytic[k].abs().max(numeric.abs()).max(1e-2);
            assert!(
                (analytic[k] - numeric).abs() / denom < 1e-6,
                "coordinate {k}: analytic {} vs numeric {numeric}",
                analytic[k]
            );
        }
    }

    #[test]
    fn lookup_rejects_out_of_range_row() {
        let mut store = ParamStore::new();
        let id = store.insert("table", Tensor::zeros_matrix(3, 2)).unwrap();
        let mut t = Tape::new();
        assert!(t.lookup(&store, id, 3).is_err());
    }

    #[test]
    fn apply_grads_routes_to_rows() {
        let mut store = ParamStore::new();
        let id = store
            .insert("table", Tensor::matrix(3, 2, vec![1.0; 6]).unwrap())
            .unwrap();
        let mut t = Tape::new();
        let row = t.lookup(&store, id, 1).unwrap();
        let probe = t.constant(Tensor::vector(vec![2.0, 3.0]));
        let s = t.dot(row, probe).unwrap();
        t.backward(s).unwrap();
        t.apply_grads(&mut store).unwrap();
        assert_eq!(store.grad(id), &[0.0, 0.0, 2.0, 3.0, 0.0, 0.0]);
    }
}
