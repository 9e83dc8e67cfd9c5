//! Reverse-mode tape over whole-tensor operations.
//!
//! A `Tape` records one step's forward computation as a flat list of nodes,
//! each holding its value and the op that produced it. `backward` replays the
//! list in reverse, accumulating gradients. Ops only reference earlier nodes,
//! so a single reverse sweep is exact.
//!
//! Invariants:
//! - every op output is checked finite; NaN/Inf aborts with the producing op
//! - a parameter binds to at most one leaf per tape (re-binding returns the
//!   existing node, so gradients never split across aliases)
//! - one backward per tape; a second call without a fresh tape is rejected
//! - after backward, gradients are retained for leaf nodes only

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;

use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Result, SefError};

/// Handle to a node on one specific tape. Not transferable across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Elementwise op selector for the generic entry point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Multiply,
    Add,
    Subtract,
    /// Smooth GELU-style activation (tanh form).
    Activation,
    Exp,
    Log,
}

const GELU_C0: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: Real = 0.044_715;
const COSINE_EPS: Real = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Matmul { a: usize, b: usize, ta: bool, tb: bool },
    AddBias { x: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { x: usize, c: Real },
    AddConst { x: usize },
    Gelu { x: usize },
    Exp { x: usize },
    Ln { x: usize },
    Sqrt { x: usize },
    Relu { x: usize },
    SoftClamp { x: usize, limit: Real },
    SoftmaxRows { x: usize },
    LogsumexpRows { x: usize },
    SoftmaxCeRows { x: usize, targets: Vec<usize>, weights: Option<Vec<Real>> },
    RowSum { x: usize },
    ColSum { x: usize },
    SumAll { x: usize },
    Transpose { x: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    CenterCols { x: usize },
    DoubleCenter { x: usize },
    RowCosine { a: usize, b: usize },
    BroadcastMulCol { x: usize, s: usize },
    Detach,
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// node index -> bound parameter, for leaves created by `param`
    param_of: HashMap<usize, ParamId>,
    /// param index -> node, to dedupe bindings
    bound: HashMap<usize, usize>,
    /// populated by backward; leaves only
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Gradient of a leaf node after backward. Interior gradients are freed
    /// during the reverse sweep.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(SefError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape_of(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Register a constant leaf. Rejects non-finite data at the boundary.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Input, "input")
    }

    /// Bind a parameter as a leaf. Binding the same parameter again returns
    /// the existing node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&node) = self.bound.get(&id.index()) {
            return Ok(NodeId(node));
        }
        let value = store.get(id).value.clone();
        let node = self.push(value, Op::Input, "param")?;
        self.param_of.insert(node.0, id);
        self.bound.insert(id.index(), node.0);
        Ok(node)
    }

    // ── matrix ops ──────────────────────────────────────────────────────

    /// out = op(A) . op(B), with optional transposes.
    pub fn matmul_opts(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (ar, ac) = self.shape_of(a);
        let (br, bc) = self.shape_of(b);
        let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k1 != k2 {
            return Err(SefError::shape(
                "matmul",
                format!("inner dims equal (lhs {m}x{k1})"),
                format!("rhs {k2}x{n}"),
            ));
        }
        let mut out = Tensor::zeros(m, n);
        {
            let av = self.nodes[a.0].value.view();
            let bv = self.nodes[b.0].value.view();
            let av = if ta { av.reversed_axes() } else { av };
            let bv = if tb { bv.reversed_axes() } else { bv };
            general_mat_mul(1.0 as Real, &av, &bv, 0.0, &mut out.view_mut());
        }
        self.push(out, Op::Matmul { a: a.0, b: b.0, ta, tb }, "matmul")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_opts(a, b, false, false)
    }

    /// Row-broadcast bias add: x [n, c] + b [1, c].
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, c) = self.shape_of(x);
        let (br, bc) = self.shape_of(b);
        if br != 1 || bc != c {
            return Err(SefError::shape("add_bias", format!("1x{c}"), format!("{br}x{bc}")));
        }
        let mut out = self.nodes[x.0].value.clone();
        let bias = self.nodes[b.0].value.data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += *bv;
            }
        }
        let _ = n;
        self.push(out, Op::AddBias { x: x.0, b: b.0 }, "add_bias")
    }

    /// y = x . W^T + b, the per-cell affine map. W is [c_out, c_in],
    /// b is [1, c_out], x is [n, c_in].
    pub fn linear_map(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, cin) = self.shape_of(x);
        let (cout, wcin) = self.shape_of(w);
        if wcin != cin {
            return Err(SefError::shape(
                "linear_map",
                format!("weight {cout}x{cin}"),
                format!("{cout}x{wcin} against input ..x{cin}"),
            ));
        }
        let y = self.matmul_opts(x, w, false, true)?;
        self.add_bias(y, b)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(SefError::shape(
                name,
                self.nodes[a.0].value.shape_str(),
                self.nodes[b.0].value.shape_str(),
            ));
        }
        let out_data: Vec<Real> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let (r, c) = self.shape_of(a);
        let out = Tensor::from_vec(r, c, out_data)?;
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "div", |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    fn unary(
        &mut self,
        x: NodeId,
        name: &'static str,
        f: impl Fn(Real) -> Real,
        op: Op,
    ) -> Result<NodeId> {
        let out = self.nodes[x.0].value.map(f);
        self.push(out, op, name)
    }

    pub fn scale(&mut self, x: NodeId, c: Real) -> Result<NodeId> {
        self.unary(x, "scale", |v| c * v, Op::Scale { x: x.0, c })
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.scale(x, -1.0)
    }

    pub fn add_const(&mut self, x: NodeId, c: Real) -> Result<NodeId> {
        self.unary(x, "add_const", |v| v + c, Op::AddConst { x: x.0 })
    }

    /// Smooth GELU-style activation, tanh form.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "gelu", gelu_forward, Op::Gelu { x: x.0 })
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "exp", Real::exp, Op::Exp { x: x.0 })
    }

    /// Natural log; domain-checked, rejects inputs <= 0.
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        if self.nodes[x.0].value.data().iter().any(|&v| v <= 0.0) {
            return Err(SefError::domain("ln", "input must be strictly positive"));
        }
        self.unary(x, "ln", Real::ln, Op::Ln { x: x.0 })
    }

    /// Square root; domain-checked, rejects negative inputs.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        if self.nodes[x.0].value.data().iter().any(|&v| v < 0.0) {
            return Err(SefError::domain("sqrt", "input must be non-negative"));
        }
        self.unary(x, "sqrt", Real::sqrt, Op::Sqrt { x: x.0 })
    }

    /// Hinge: max(0, x). Subgradient 0 at the kink.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu { x: x.0 })
    }

    /// Smooth saturating clamp to (-limit, limit): limit * tanh(x / limit).
    pub fn soft_clamp(&mut self, x: NodeId, limit: Real) -> Result<NodeId> {
        debug_assert!(limit > 0.0);
        self.unary(
            x,
            "soft_clamp",
            |v| limit * (v / limit).tanh(),
            Op::SoftClamp { x: x.0, limit },
        )
    }

    /// Generic elementwise entry point over the op selector.
    pub fn elementwise(&mut self, kind: ElementwiseKind, x: NodeId, y: Option<NodeId>) -> Result<NodeId> {
        let need_y = matches!(
            kind,
            ElementwiseKind::Multiply | ElementwiseKind::Add | ElementwiseKind::Subtract
        );
        match (need_y, y) {
            (true, None) => {
                return Err(SefError::Config(format!("elementwise {kind:?} needs two operands")))
            }
            (false, Some(_)) => {
                return Err(SefError::Config(format!("elementwise {kind:?} takes one operand")))
            }
            _ => {}
        }
        match kind {
            ElementwiseKind::Multiply => self.mul(x, y.unwrap()),
            ElementwiseKind::Add => self.add(x, y.unwrap()),
            ElementwiseKind::Subtract => self.sub(x, y.unwrap()),
            ElementwiseKind::Activation => self.gelu(x),
            ElementwiseKind::Exp => self.exp(x),
            ElementwiseKind::Log => self.ln(x),
        }
    }

    // ── row/column structure ────────────────────────────────────────────

    /// Row-wise softmax with max-subtraction. Rows sum to 1 within 1e-9.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape_of(x);
        let mut out = Tensor::zeros(n, k);
        for i in 0..n {
            let row = &self.nodes[x.0].value.data()[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut denom = 0.0;
            let orow = &mut out.data_mut()[i * k..(i + 1) * k];
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                denom += *o;
            }
            for o in orow.iter_mut() {
                *o /= denom;
            }
        }
        self.push(out, Op::SoftmaxRows { x: x.0 }, "softmax")
    }

    /// Row-wise log-sum-exp, stabilized. Output [n, 1].
    pub fn logsumexp_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape_of(x);
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            let row = &self.nodes[x.0].value.data()[i * k..(i + 1) * k];
            out.data_mut()[i] = logsumexp(row);
        }
        self.push(out, Op::LogsumexpRows { x: x.0 }, "logsumexp")
    }

    /// Fused per-row softmax cross-entropy against integer targets, with
    /// optional per-class weights. Output [n, 1] of weighted losses.
    pub fn softmax_ce_rows(
        &mut self,
        x: NodeId,
        targets: &[usize],
        class_weights: Option<&[Real]>,
    ) -> Result<NodeId> {
        let (n, k) = self.shape_of(x);
        if targets.len() != n {
            return Err(SefError::shape(
                "softmax_ce",
                format!("{n} targets"),
                format!("{}", targets.len()),
            ));
        }
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(SefError::shape(
                    "softmax_ce class weights",
                    format!("{k}"),
                    format!("{}", w.len()),
                ));
            }
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(SefError::domain(
                "softmax_ce",
                format!("target {bad} out of range for {k} classes"),
            ));
        }
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            let row = &self.nodes[x.0].value.data()[i * k..(i + 1) * k];
            let lse = logsumexp(row);
            let w = class_weights.map_or(1.0, |w| w[targets[i]]);
            out.data_mut()[i] = w * (lse - row[targets[i]]);
        }
        self.push(
            out,
            Op::SoftmaxCeRows {
                x: x.0,
                targets: targets.to_vec(),
                weights: class_weights.map(|w| w.to_vec()),
            },
            "softmax_ce",
        )
    }

    /// Sum over columns, [n, m] -> [n, 1].
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape_of(x);
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            out.data_mut()[i] = self.nodes[x.0].value.data()[i * m..(i + 1) * m].iter().sum();
        }
        self.push(out, Op::RowSum { x: x.0 }, "row_sum")
    }

    pub fn row_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, m) = self.shape_of(x);
        let s = self.row_sum(x)?;
        self.scale(s, 1.0 / m as Real)
    }

    /// Sum over rows, [n, m] -> [1, m].
    pub fn col_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape_of(x);
        let mut out = Tensor::zeros(1, m);
        for i in 0..n {
            let row = &self.nodes[x.0].value.data()[i * m..(i + 1) * m];
            for (o, &v) in out.data_mut().iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(out, Op::ColSum { x: x.0 }, "col_sum")
    }

    pub fn col_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, _) = self.shape_of(x);
        let s = self.col_sum(x)?;
        self.scale(s, 1.0 / n as Real)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let total: Real = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll { x: x.0 }, "sum_all")
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.0].value.len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as Real)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape_of(x);
        let mut out = Tensor::zeros(m, n);
        for i in 0..n {
            for j in 0..m {
                let v = self.nodes[x.0].value.get(i, j);
                out.set(j, i, v);
            }
        }
        self.push(out, Op::Transpose { x: x.0 }, "transpose")
    }

    /// Concatenate along columns; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(SefError::Config("concat_cols needs at least one part".into()));
        }
        let n = self.shape_of(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape_of(p);
            if r != n {
                return Err(SefError::shape(
                    "concat_cols",
                    format!("{n} rows"),
                    format!("{r} rows"),
                ));
            }
            total += c;
        }
        let mut out = Tensor::zeros(n, total);
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.shape_of(p);
            for i in 0..n {
                let src = &self.nodes[p.0].value.data()[i * c..(i + 1) * c];
                out.data_mut()[i * total + offset..i * total + offset + c].copy_from_slice(src);
            }
            offset += c;
        }
        self.push(
            out,
            Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() },
            "concat_cols",
        )
    }

    /// Column slice [start, start + len).
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, m) = self.shape_of(x);
        if start + len > m {
            return Err(SefError::shape(
                "slice_cols",
                format!("cols within 0..{m}"),
                format!("{start}..{}", start + len),
            ));
        }
        let mut out = Tensor::zeros(n, len);
        for i in 0..n {
            let src = &self.nodes[x.0].value.data()[i * m + start..i * m + start + len];
            out.data_mut()[i * len..(i + 1) * len].copy_from_slice(src);
        }
        self.push(out, Op::SliceCols { x: x.0, start }, "slice_cols")
    }

    /// Select rows by index; duplicates allowed (backward scatter-adds).
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (n, m) = self.shape_of(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(SefError::domain(
                "gather_rows",
                format!("row index {bad} out of range for {n} rows"),
            ));
        }
        let mut out = Tensor::zeros(idx.len(), m);
        for (r, &i) in idx.iter().enumerate() {
            let src = &self.nodes[x.0].value.data()[i * m..(i + 1) * m];
            out.data_mut()[r * m..(r + 1) * m].copy_from_slice(src);
        }
        self.push(out, Op::GatherRows { x: x.0, idx: idx.to_vec() }, "gather_rows")
    }

    /// Subtract the per-column mean (mean over rows). Idempotent projection.
    pub fn center_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape_of(x);
        let out = center_cols_tensor(&self.nodes[x.0].value, n, m);
        self.push(out, Op::CenterCols { x: x.0 }, "center_cols")
    }

    /// Double-centering H X H of a square matrix, H = I - (1/n) 1 1^T.
    pub fn double_center(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape_of(x);
        if n != m {
            return Err(SefError::shape("double_center", "square matrix", format!("{n}x{m}")));
        }
        let out = double_center_tensor(&self.nodes[x.0].value, n);
        self.push(out, Op::DoubleCenter { x: x.0 }, "double_center")
    }

    /// Per-row cosine similarity of two [n, m] tensors -> [n, 1].
    /// Denominator is |a||b| + eps, so outputs stay in [-1, 1].
    pub fn row_cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(SefError::shape(
                "row_cosine",
                self.nodes[a.0].value.shape_str(),
                self.nodes[b.0].value.shape_str(),
            ));
        }
        let (n, m) = self.shape_of(a);
        let mut out = Tensor::zeros(n, 1);
        for i in 0..n {
            let ra = &self.nodes[a.0].value.data()[i * m..(i + 1) * m];
            let rb = &self.nodes[b.0].value.data()[i * m..(i + 1) * m];
            let dot: Real = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            let na: Real = ra.iter().map(|&x| x * x).sum::<Real>().sqrt();
            let nb: Real = rb.iter().map(|&x| x * x).sum::<Real>().sqrt();
            out.data_mut()[i] = dot / (na * nb + COSINE_EPS);
        }
        self.push(out, Op::RowCosine { a: a.0, b: b.0 }, "row_cosine")
    }

    /// x [n, m] scaled per-row by s [n, 1].
    pub fn broadcast_mul_col(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape_of(x);
        let (sr, sc) = self.shape_of(s);
        if sr != n || sc != 1 {
            return Err(SefError::shape("broadcast_mul_col", format!("{n}x1"), format!("{sr}x{sc}")));
        }
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..n {
            let sv = self.nodes[s.0].value.data()[i];
            for v in &mut out.data_mut()[i * m..(i + 1) * m] {
                *v *= sv;
            }
        }
        self.push(out, Op::BroadcastMulCol { x: x.0, s: s.0 }, "broadcast_mul_col")
    }

    /// Identity forward, zero backward. Blocks gradient flow into a branch.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.nodes[x.0].value.clone();
        self.push(out, Op::Detach, "detach")
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Accumulates parameter
    /// gradients into `store`. Leaf gradients stay readable via `grad`.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.backward_done {
            return Err(SefError::Tape("backward already ran on this tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(SefError::Tape(format!(
                "backward target {} is not tracked by this tape",
                loss.0
            )));
        }
        let (lr, lc) = self.shape_of(loss);
        if (lr, lc) != (1, 1) {
            return Err(SefError::Tape(format!(
                "backward requires a scalar loss, got {lr}x{lc}"
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {
                    if let Some(&pid) = self.param_of.get(&id) {
                        store.accumulate_grad(pid, &gout)?;
                    }
                    // keep leaf grads readable
                    grads[id] = Some(gout);
                    continue;
                }
                Op::Matmul { a, b, ta, tb } => {
                    self.backward_matmul(&mut grads, &gout, *a, *b, *ta, *tb);
                }
                Op::AddBias { x, b } => {
                    let (n, c) = self.nodes[id].value.shape();
                    accum(&mut grads, *x, n, c, |g| {
                        add_into(g, gout.data());
                    });
                    accum(&mut grads, *b, 1, c, |g| {
                        for i in 0..n {
                            for (gj, &d) in g.data_mut().iter_mut().zip(&gout.data()[i * c..(i + 1) * c]) {
                                *gj += d;
                            }
                        }
                    });
                }
                Op::Add { a, b } => {
                    let (n, m) = self.nodes[id].value.shape();
                    accum(&mut grads, *a, n, m, |g| add_into(g, gout.data()));
                    accum(&mut grads, *b, n, m, |g| add_into(g, gout.data()));
                }
                Op::Sub { a, b } => {
                    let (n, m) = self.nodes[id].value.shape();
                    accum(&mut grads, *a, n, m, |g| add_into(g, gout.data()));
                    accum(&mut grads, *b, n, m, |g| {
                        for (gj, &d) in g.data_mut().iter_mut().zip(gout.data()) {
                            *gj -= d;
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let (n, m) = self.nodes[id].value.shape();
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    accum(&mut grads, *a, n, m, |g| {
                        for ((gj, &d), &y) in g.data_mut().iter_mut().zip(gout.data()).zip(bv) {
                            *gj += d * y;
                        }
                    });
                    accum(&mut grads, *b, n, m, |g| {
                        for ((gj, &d), &x) in g.data_mut().iter_mut().zip(gout.data()).zip(av) {
                            *gj += d * x;
                        }
                    });
                }
                Op::Div { a, b } => {
                    let (n, m) = self.nodes[id].value.shape();
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    accum(&mut grads, *a, n, m, |g| {
                        for ((gj, &d), &y) in g.data_mut().iter_mut().zip(gout.data()).zip(bv) {
                            *gj += d / y;
                        }
                    });
                    accum(&mut grads, *b, n, m, |g| {
                        for (((gj, &d), &x), &y) in
                            g.data_mut().iter_mut().zip(gout.data()).zip(av).zip(bv)
                        {
                            *gj -= d * x / (y * y);
                        }
                    });
                }
                Op::Scale { x, c } => {
                    let (n, m) = self.nodes[id].value.shape();
                    let c = *c;
                    accum(&mut grads, *x, n, m, |g| {
                        for (gj, &d) in g.data_mut().iter_mut().zip(gout.data()) {
                            *gj += c * d;
                        }
                    });
                }
                Op::AddConst { x } => {
                    let (n, m) = self.nodes[id].value.shape();
                    accum(&mut grads, *x, n, m, |g| add_into(g, gout.data()));
                }
                Op::Gelu { x } => {
                    let (n, m) = self.nodes[id].value.shape();
                    let xv = self.nodes[*x].value.data();
                    accum(&mut grads, *x, n, m, |g| {
                        for ((gj, &d), &v) in g.data_mut().iter_mut().zip(gout.data()).zip(xv) {
                            *gj += d * gelu_derivative(v);
                        }
                    });
                }
                Op::Exp { x } => {
                    let (n, m) = self.nodes[id].value.shape();
                    let yv = self.nodes[id].value.data();
                    accum(&mut grads, *x, n, m, |g| {
                        for ((gj, &d), &y) in g.data_mut().iter_mut().zip(gout.data()).zip(yv) {
                            *gj += d * y;
                        }
                    });
                }
                Op::Ln { x } => {
                    let (n, m) = self.nodes[id].value.shape();
                    let xv = self.nodes[*x].value.data();
                    accum(&mut grads, *x, n, m, |g| {
                        for ((gj, &d), &v) in g.data_mut().iter_mut().zip(gout.data()).zip(xv) {
                            *gj += d / v;
                        }
                    });
                }
                Op::Sqrt { x } => {
                    let (n, m) = self.nodes[id].value.shape();
                    let yv = self.nodes[id].value.data();
                    accum(&mut grads, *x, n, m, |g| {
                        for ((gj, &d), &y) in g.data_mut().iter_mut().zip(gout.data()).zip(yv) {
                            *gj += d * 0.5 / y;
                        }
                    });
                }
                Op::Relu { x } => {
                    let (n, m) = self.nodes[id].value.shape();
                    let xv = self.nodes[*x].value.data();
                    accum(&mut grads, *x, n, m, |g| {
                        for ((gj, &d), &v) in g.data_mut().iter_mut().zip(gout.data()).zip(xv) {
                            if v > 0.0 {
                                *gj += d;
                            }
                        }
                    });
                }
                Op::SoftClamp { x, limit } => {
                    let (n, m) = self.nodes[id].value.shape();
                    let yv = self.nodes[id].value.data();
                    let limit = *limit;
                    accum(&mut grads, *x, n, m, |g| {
                        for ((gj, &d), &y) in g.data_mut().iter_mut().zip(gout.data()).zip(yv) {
                            let t = y / limit;
                            *gj += d * (1.0 - t * t);
                        }
                    });
                }
                Op::SoftmaxRows { x } => {
                    let (n, k) = self.nodes[id].value.shape();
                    let sv = self.nodes[id].value.data();
                    accum(&mut grads, *x, n, k, |g| {
                        for i in 0..n {
                            let s = &sv[i * k..(i + 1) * k];
                            let d = &gout.data()[i * k..(i + 1) * k];
                            let dot: Real = s.iter().zip(d).map(|(&a, &b)| a * b).sum();
                            for (gj, (&sj, &dj)) in g.data_mut()[i * k..(i + 1) * k]
                                .iter_mut()
                                .zip(s.iter().zip(d))
                            {
                                *gj += sj * (dj - dot);
                            }
                        }
                    });
                }
                Op::LogsumexpRows { x } => {
                    let (n, k) = self.nodes[*x].value.shape();
                    let xv = self.nodes[*x].value.data();
                    let lse = self.nodes[id].value.data();
                    accum(&mut grads, *x, n, k, |g| {
                        for i in 0..n {
                            let d = gout.data()[i];
                            for (gj, &v) in g.data_mut()[i * k..(i + 1) * k]
                                .iter_mut()
                                .zip(&xv[i * k..(i + 1) * k])
                            {
                                *gj += d * (v - lse[i]).exp();
                            }
                        }
                    });
                }
                Op::SoftmaxCeRows { x, targets, weights } => {
                    let (n, k) = self.nodes[*x].value.shape();
                    let xv = self.nodes[*x].value.data();
                    let targets = targets.clone();
                    let weights = weights.clone();
                    accum(&mut grads, *x, n, k, |g| {
                        for i in 0..n {
                            let row = &xv[i * k..(i + 1) * k];
                            let lse = logsumexp(row);
                            let w = weights.as_ref().map_or(1.0, |w| w[targets[i]]);
                            let d = gout.data()[i] * w;
                            for (j, (gj, &v)) in g.data_mut()[i * k..(i + 1) * k]
                                .iter_mut()
                                .zip(row)
                                .enumerate()
                            {
                                let p = (v - lse).exp();
                                *gj += d * (p - if j == targets[i] { 1.0 } else { 0.0 });
                            }
                        }
                    });
                }
                Op::RowSum { x } => {
                    let (n, m) = self.nodes[*x].value.shape();
                    accum(&mut grads, *x, n, m, |g| {
                        for i in 0..n {
                            let d = gout.data()[i];
                            for gj in &mut g.data_mut()[i * m..(i + 1) * m] {
                                *gj += d;
                            }
                        }
                    });
                }
                Op::ColSum { x } => {
                    let (n, m) = self.nodes[*x].value.shape();
                    accum(&mut grads, *x, n, m, |g| {
                        for i in 0..n {
                            for (gj, &d) in g.data_mut()[i * m..(i + 1) * m].iter_mut().zip(gout.data()) {
                                *gj += d;
                            }
                        }
                    });
                }
                Op::SumAll { x } => {
                    let (n, m) = self.nodes[*x].value.shape();
                    let d = gout.data()[0];
                    accum(&mut grads, *x, n, m, |g| {
                        for gj in g.data_mut() {
                            *gj += d;
                        }
                    });
                }
                Op::Transpose { x } => {
                    let (n, m) = self.nodes[*x].value.shape();
                    accum(&mut grads, *x, n, m, |g| {
                        for i in 0..n {
                            for j in 0..m {
                                let d = gout.get(j, i);
                                let v = g.get(i, j);
                                g.set(i, j, v + d);
                            }
                        }
                    });
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let n = self.nodes[id].value.rows();
                    let total = self.nodes[id].value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let (_, c) = self.nodes[p].value.shape();
                        accum(&mut grads, p, n, c, |g| {
                            for i in 0..n {
                                for (gj, &d) in g.data_mut()[i * c..(i + 1) * c]
                                    .iter_mut()
                                    .zip(&gout.data()[i * total + offset..i * total + offset + c])
                                {
                                    *gj += d;
                                }
                            }
                        });
                        offset += c;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (n, m) = self.nodes[*x].value.shape();
                    let len = self.nodes[id].value.cols();
                    let start = *start;
                    accum(&mut grads, *x, n, m, |g| {
                        for i in 0..n {
                            for (gj, &d) in g.data_mut()[i * m + start..i * m + start + len]
                                .iter_mut()
                                .zip(&gout.data()[i * len..(i + 1) * len])
                            {
                                *gj += d;
                            }
                        }
                    });
                }
                Op::GatherRows { x, idx } => {
                    let (n, m) = self.nodes[*x].value.shape();
                    let idx = idx.clone();
                    accum(&mut grads, *x, n, m, |g| {
                        for (r, &i) in idx.iter().enumerate() {
                            for (gj, &d) in g.data_mut()[i * m..(i + 1) * m]
                                .iter_mut()
                                .zip(&gout.data()[r * m..(r + 1) * m])
                            {
                                *gj += d;
                            }
                        }
                    });
                }
                Op::CenterCols { x } => {
                    let (n, m) = self.nodes[*x].value.shape();
                    // centering is symmetric: d - colmean(d)
                    let centered = center_cols_tensor(&gout, n, m);
                    accum(&mut grads, *x, n, m, |g| add_into(g, centered.data()));
                }
                Op::DoubleCenter { x } => {
                    let n = self.nodes[*x].value.rows();
                    // H (.) H is symmetric, so backward double-centers the grad
                    let centered = double_center_tensor(&gout, n);
                    accum(&mut grads, *x, n, n, |g| add_into(g, centered.data()));
                }
                Op::RowCosine { a, b } => {
                    self.backward_row_cosine(&mut grads, &gout, id, *a, *b);
                }
                Op::BroadcastMulCol { x, s } => {
                    let (n, m) = self.nodes[*x].value.shape();
                    let xv = self.nodes[*x].value.data();
                    let sv = self.nodes[*s].value.data();
                    accum(&mut grads, *x, n, m, |g| {
                        for i in 0..n {
                            let si = sv[i];
                            for (gj, &d) in g.data_mut()[i * m..(i + 1) * m]
                                .iter_mut()
                                .zip(&gout.data()[i * m..(i + 1) * m])
                            {
                                *gj += d * si;
                            }
                        }
                    });
                    accum(&mut grads, *s, n, 1, |g| {
                        for i in 0..n {
                            let mut acc = 0.0;
                            for (&d, &x) in gout.data()[i * m..(i + 1) * m].iter().zip(&xv[i * m..(i + 1) * m]) {
                                acc += d * x;
                            }
                            g.data_mut()[i] += acc;
                        }
                    });
                }
                Op::Detach => {
                    // gradient flow ends here by design
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_matmul(
        &self,
        grads: &mut Vec<Option<Tensor>>,
        gout: &Tensor,
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    ) {
        let (ar, ac) = self.nodes[a].value.shape();
        let (br, bc) = self.nodes[b].value.shape();
        let gv = gout.view();
        // dA
        {
            let ga = ensure(grads, a, ar, ac);
            let bv = self.nodes[b].value.view();
            match (ta, tb) {
                // C = A B        : dA = G B^T
                (false, false) => general_mat_mul(1.0, &gv, &bv.reversed_axes(), 1.0, &mut ga.view_mut()),
                // C = A B^T      : dA = G B
                (false, true) => general_mat_mul(1.0, &gv, &bv, 1.0, &mut ga.view_mut()),
                // C = A^T B      : dA = B G^T
                (true, false) => general_mat_mul(1.0, &bv, &gv.reversed_axes(), 1.0, &mut ga.view_mut()),
                // C = A^T B^T    : dA = B^T G^T
                (true, true) => general_mat_mul(
                    1.0,
                    &bv.reversed_axes(),
                    &gv.reversed_axes(),
                    1.0,
                    &mut ga.view_mut(),
                ),
            }
        }
        // dB
        {
            let gb = ensure(grads, b, br, bc);
            let av = self.nodes[a].value.view();
            match (ta, tb) {
                // C = A B        : dB = A^T G
                (false, false) => general_mat_mul(1.0, &av.reversed_axes(), &gv, 1.0, &mut gb.view_mut()),
                // C = A B^T      : dB = G^T A
                (false, true) => general_mat_mul(1.0, &gv.reversed_axes(), &av, 1.0, &mut gb.view_mut()),
                // C = A^T B      : dB = A G
                (true, false) => general_mat_mul(1.0, &av, &gv, 1.0, &mut gb.view_mut()),
                // C = A^T B^T    : dB = G^T A^T
                (true, true) => general_mat_mul(
                    1.0,
                    &gv.reversed_axes(),
                    &av.reversed_axes(),
                    1.0,
                    &mut gb.view_mut(),
                ),
            }
        }
    }

    fn backward_row_cosine(
        &self,
        grads: &mut Vec<Option<Tensor>>,
        gout: &Tensor,
        out: usize,
        a: usize,
        b: usize,
    ) {
        let (n, m) = self.nodes[a].value.shape();
        let av = self.nodes[a].value.data();
        let bv = self.nodes[b].value.data();
        let cv = self.nodes[out].value.data();
        for (target, swap) in [(a, false), (b, true)] {
            let g = ensure(grads, target, n, m);
            for i in 0..n {
                let (x, y) = if swap {
                    (&bv[i * m..(i + 1) * m], &av[i * m..(i + 1) * m])
                } else {
                    (&av[i * m..(i + 1) * m], &bv[i * m..(i + 1) * m])
                };
                let nx: Real = x.iter().map(|&v| v * v).sum::<Real>().sqrt();
                let ny: Real = y.iter().map(|&v| v * v).sum::<Real>().sqrt();
                let q = nx * ny + COSINE_EPS;
                let c = cv[i];
                let d = gout.data()[i];
                let ratio = if nx > 0.0 { c * ny / nx } else { 0.0 };
                for ((gj, &xj), &yj) in g.data_mut()[i * m..(i + 1) * m].iter_mut().zip(x).zip(y) {
                    *gj += d * (yj - ratio * xj) / q;
                }
            }
        }
    }
}

// ── free helpers ────────────────────────────────────────────────────────

fn ensure<'g>(grads: &'g mut Vec<Option<Tensor>>, id: usize, rows: usize, cols: usize) -> &'g mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accum(
    grads: &mut Vec<Option<Tensor>>,
    id: usize,
    rows: usize,
    cols: usize,
    f: impl FnOnce(&mut Tensor),
) {
    let g = ensure(grads, id, rows, cols);
    f(g);
}

fn add_into(g: &mut Tensor, d: &[Real]) {
    for (gj, &dj) in g.data_mut().iter_mut().zip(d) {
        *gj += dj;
    }
}

fn logsumexp(row: &[Real]) -> Real {
    let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<Real>().ln()
}

fn gelu_forward(x: Real) -> Real {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_derivative(x: Real) -> Real {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn center_cols_tensor(x: &Tensor, n: usize, m: usize) -> Tensor {
    let mut means = vec![0.0 as Real; m];
    for i in 0..n {
        for (mean, &v) in means.iter_mut().zip(&x.data()[i * m..(i + 1) * m]) {
            *mean += v;
        }
    }
    for mean in &mut means {
        *mean /= n as Real;
    }
    let mut out = x.clone();
    for i in 0..n {
        for (v, &mean) in out.data_mut()[i * m..(i + 1) * m].iter_mut().zip(&means) {
            *v -= mean;
        }
    }
    out
}

fn double_center_tensor(x: &Tensor, n: usize) -> Tensor {
    let mut row_means = vec![0.0 as Real; n];
    let mut col_means = vec![0.0 as Real; n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = x.get(i, j);
            row_means[i] += v;
            col_means[j] += v;
            total += v;
        }
    }
    for v in row_means.iter_mut().chain(col_means.iter_mut()) {
        *v /= n as Real;
    }
    total /= (n * n) as Real;
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, x.get(i, j) - row_means[i] - col_means[j] + total);
        }
    }
    out
}
