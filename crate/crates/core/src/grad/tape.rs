//! Single-assignment tape of tensor-level primitives.
//!
//! Nodes are appended in evaluation order, so the tape is acyclic by
//! construction and `backward` is a single reverse sweep. Sparse operators
//! are expressed through row gathers, segment reductions and segment
//! softmaxes over index maps; those are the differentiation units.

use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Sentinel row index for [`Tape::gather`]: produces a zero row.
pub const NO_ROW: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Every node value is rounded to single precision after evaluation.
    F32,
    #[default]
    F64,
}

static PRECISION: AtomicU8 = AtomicU8::new(1);

/// Sets the process-wide precision used by newly created tapes.
pub fn set_precision(p: Precision) {
    PRECISION.store(matches!(p, Precision::F64) as u8, Ordering::Relaxed);
}

pub fn precision() -> Precision {
    if PRECISION.load(Ordering::Relaxed) == 1 {
        Precision::F64
    } else {
        Precision::F32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    /// tanh approximation.
    Gelu,
    Log,
    Abs,
    Exp,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Affine(NodeId, f64),
    ScaleRows(NodeId, Arc<[f64]>),
    Unary(NodeId, Unary),
    Clamp(NodeId, f64, f64),
    Gather(NodeId, Arc<[u32]>),
    Reshape(NodeId),
    SegmentSum(NodeId, Arc<[u32]>),
    SegmentSoftmax(NodeId, Arc<[usize]>),
    GroupColSum(NodeId, usize),
    RepeatCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    LayerNorm(NodeId, NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    // Op-specific forward cache (layer norm: normalized input then 1/sigma per row).
    aux: Vec<f64>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape using the process-wide precision.
    pub fn new() -> Self {
        Self::with_precision(precision())
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self { nodes: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool, aux: Vec<f64>) -> NodeId {
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node { value, op, needs_grad, aux });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad, Vec::new())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = matmul(self.value(a), self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng, Vec::new())
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip(a, b, |p, q| p + q);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng, Vec::new())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip(a, b, |p, q| p - q);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng, Vec::new())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip(a, b, |p, q| p * q);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng, Vec::new())
    }

    /// `x + bias` with a 1×C bias broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.shape(), (1, xv.cols()), "bias must be 1×cols");
        let mut out = xv.clone();
        let b = bv.data().to_vec();
        par::for_each_row(out.data_mut(), b.len().max(1), |_, r| {
            for (v, bb) in r.iter_mut().zip(&b) {
                *v += bb;
            }
        });
        let ng = self.ng(&[x, bias]);
        self.push(out, Op::AddRow(x, bias), ng, Vec::new())
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|p| scale * p + shift).collect();
        let out = Tensor::from_vec(v.rows(), v.cols(), data);
        let ng = self.ng(&[x]);
        self.push(out, Op::Affine(x, scale), ng, Vec::new())
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.affine(x, s, 0.0)
    }

    /// Multiplies row `r` by `w[r]`.
    pub fn scale_rows(&mut self, x: NodeId, w: Arc<[f64]>) -> NodeId {
        let v = self.value(x);
        assert_eq!(w.len(), v.rows());
        let mut out = v.clone();
        let cols = v.cols();
        if cols > 0 {
            for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
                for e in row {
                    *e *= w[r];
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::ScaleRows(x, w), ng, Vec::new())
    }

    pub fn unary(&mut self, x: NodeId, kind: Unary) -> NodeId {
        let v = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Gelu => gelu,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
            Unary::Exp => f64::exp,
            Unary::Square => |p| p * p,
        };
        // Saturated sigmoid and tanh stay strictly inside their open ranges.
        let top = match self.precision {
            Precision::F64 => 1.0 - f64::EPSILON / 2.0,
            Precision::F32 => 1.0 - f32::EPSILON as f64 / 2.0,
        };
        let (lo, hi) = match kind {
            Unary::Sigmoid => (f32::MIN_POSITIVE as f64, top),
            Unary::Tanh => (-top, top),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        };
        let data = v.data().iter().map(|p| f(*p).clamp(lo, hi)).collect();
        let out = Tensor::from_vec(v.rows(), v.cols(), data);
        let ng = self.ng(&[x]);
        self.push(out, Op::Unary(x, kind), ng, Vec::new())
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Gelu)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Log)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Square)
    }

    /// Elementwise clamp; the gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|p| p.clamp(lo, hi)).collect();
        let out = Tensor::from_vec(v.rows(), v.cols(), data);
        let ng = self.ng(&[x]);
        self.push(out, Op::Clamp(x, lo, hi), ng, Vec::new())
    }

    /// Row gather: output row `r` is input row `idx[r]`, or zeros for [`NO_ROW`].
    pub fn gather(&mut self, x: NodeId, idx: Arc<[u32]>) -> NodeId {
        let v = self.value(x);
        let cols = v.cols();
        let mut out = Tensor::zeros(idx.len(), cols);
        par::for_each_row(out.data_mut(), cols.max(1), |r, row| {
            let src = idx[r];
            if src != NO_ROW && cols > 0 {
                row.copy_from_slice(v.row(src as usize));
            }
        });
        let ng = self.ng(&[x]);
        self.push(out, Op::Gather(x, idx), ng, Vec::new())
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let out = self.value(x).clone().reshaped(rows, cols);
        let ng = self.ng(&[x]);
        self.push(out, Op::Reshape(x), ng, Vec::new())
    }

    /// Sums input rows into `groups` output rows; row `r` goes to `group[r]`.
    pub fn segment_sum(&mut self, x: NodeId, group: Arc<[u32]>, groups: usize) -> NodeId {
        let v = self.value(x);
        assert_eq!(group.len(), v.rows());
        let cols = v.cols();
        let mut out = Tensor::zeros(groups, cols);
        for (r, &g) in group.iter().enumerate() {
            let dst = out.row_mut(g as usize);
            for (d, s) in dst.iter_mut().zip(v.row(r)) {
                *d += s;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::SegmentSum(x, group), ng, Vec::new())
    }

    /// Column-wise softmax within contiguous row segments
    /// `offsets[s]..offsets[s + 1]`. The row max is subtracted first.
    pub fn segment_softmax(&mut self, x: NodeId, offsets: Arc<[usize]>) -> NodeId {
        let v = self.value(x);
        assert_eq!(*offsets.last().unwrap_or(&0), v.rows());
        let cols = v.cols();
        let segs = offsets.len().saturating_sub(1);
        let blocks: Vec<Vec<f64>> = par::map_collect(segs, |s| {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            let mut block = v.data()[lo * cols..hi * cols].to_vec();
            for c in 0..cols {
                let mut m = f64::NEG_INFINITY;
                for r in 0..hi - lo {
                    m = m.max(block[r * cols + c]);
                }
                let mut z = 0.0;
                for r in 0..hi - lo {
                    let e = (block[r * cols + c] - m).exp();
                    block[r * cols + c] = e;
                    z += e;
                }
                for r in 0..hi - lo {
                    block[r * cols + c] /= z;
                }
            }
            block
        });
        let out = Tensor::from_vec(v.rows(), cols, blocks.concat());
        let ng = self.ng(&[x]);
        self.push(out, Op::SegmentSoftmax(x, offsets), ng, Vec::new())
    }

    /// Sums consecutive blocks of `group` columns.
    pub fn group_col_sum(&mut self, x: NodeId, group: usize) -> NodeId {
        let v = self.value(x);
        assert!(group > 0 && v.cols().is_multiple_of(group));
        let oc = v.cols() / group;
        let mut out = Tensor::zeros(v.rows(), oc);
        par::for_each_row(out.data_mut(), oc.max(1), |r, row| {
            let src = v.row(r);
            for (c, o) in row.iter_mut().enumerate() {
                *o = src[c * group..(c + 1) * group].iter().sum();
            }
        });
        let ng = self.ng(&[x]);
        self.push(out, Op::GroupColSum(x, group), ng, Vec::new())
    }

    /// Repeats every column `times` times in place: `[a, b] -> [a, a, b, b]`.
    pub fn repeat_cols(&mut self, x: NodeId, times: usize) -> NodeId {
        let v = self.value(x);
        let oc = v.cols() * times;
        let mut out = Tensor::zeros(v.rows(), oc);
        par::for_each_row(out.data_mut(), oc.max(1), |r, row| {
            for (c, &s) in v.row(r).iter().enumerate() {
                row[c * times..(c + 1) * times].fill(s);
            }
        });
        let ng = self.ng(&[x]);
        self.push(out, Op::RepeatCols(x, times), ng, Vec::new())
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows(), rows, "concat row mismatch");
            let c = v.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + c].copy_from_slice(v.row(r));
            }
            off += c;
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng, Vec::new())
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x);
        assert!(start + len <= v.cols());
        let mut out = Tensor::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::SliceCols(x, start), ng, Vec::new())
    }

    /// Per-row normalization over channels with 1×C gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        assert_eq!(self.value(gain).shape(), (1, cols));
        assert_eq!(self.value(bias).shape(), (1, cols));
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = v.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                xhat[r * cols + c] = (row[c] - mean) * s;
            }
        }
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| xh * g[i % cols] + b[i % cols])
            .collect();
        let out = Tensor::from_vec(rows, cols, data);
        xhat.extend_from_slice(&rstd);
        let ng = self.ng(&[x, gain, bias]);
        self.push(out, Op::LayerNorm(x, gain, bias), ng, xhat)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng, Vec::new())
    }

    /// Mean over every element; 0 for an empty tensor.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = if v.is_empty() { 0.0 } else { v.data().iter().sum::<f64>() / v.len() as f64 };
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng, Vec::new())
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Precondition(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop(node, &g, &mut grads);
        }
        if self.precision == Precision::F32 {
            for t in grads.iter_mut().flatten() {
                for v in t.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let want = |id: &NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(a) {
                    accumulate(grads, *a, matmul(g, &bv.transpose()));
                }
                if want(b) {
                    accumulate(grads, *b, matmul(&av.transpose(), g));
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(b) {
                    accumulate(grads, *b, map(g, |p| -p));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    accumulate(grads, *a, zip(g, self.value(*b), |p, q| p * q));
                }
                if want(b) {
                    accumulate(grads, *b, zip(g, self.value(*a), |p, q| p * q));
                }
            }
            Op::AddRow(x, bias) => {
                if want(x) {
                    accumulate(grads, *x, g.clone());
                }
                if want(bias) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, s) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Affine(x, s) => {
                if want(x) {
                    accumulate(grads, *x, map(g, |p| p * s));
                }
            }
            Op::ScaleRows(x, w) => {
                if want(x) {
                    let mut d = g.clone();
                    let cols = d.cols();
                    if cols > 0 {
                        for (r, row) in d.data_mut().chunks_mut(cols).enumerate() {
                            for e in row {
                                *e *= w[r];
                            }
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::Unary(x, kind) => {
                if want(x) {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data().iter().zip(y.data()))
                        .map(|(gi, (xi, yi))| gi * unary_grad(*kind, *xi, *yi))
                        .collect();
                    accumulate(grads, *x, Tensor::from_vec(g.rows(), g.cols(), data));
                }
            }
            Op::Clamp(x, lo, hi) => {
                if want(x) {
                    let xv = self.value(*x);
                    let d = zip(g, xv, |gi, xi| if xi < *lo || xi > *hi { 0.0 } else { gi });
                    accumulate(grads, *x, d);
                }
            }
            Op::Gather(x, idx) => {
                if want(x) {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Tensor::zeros(rows, cols);
                    for (r, &src) in idx.iter().enumerate() {
                        if src != NO_ROW {
                            let dst = d.row_mut(src as usize);
                            for (a, b) in dst.iter_mut().zip(g.row(r)) {
                                *a += b;
                            }
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::Reshape(x) => {
                if want(x) {
                    let (rows, cols) = self.shape(*x);
                    accumulate(grads, *x, g.clone().reshaped(rows, cols));
                }
            }
            Op::SegmentSum(x, group) => {
                if want(x) {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Tensor::zeros(rows, cols);
                    par::for_each_row(d.data_mut(), cols.max(1), |r, row| {
                        row.copy_from_slice(g.row(group[r] as usize));
                    });
                    accumulate(grads, *x, d);
                }
            }
            Op::SegmentSoftmax(x, offsets) => {
                if want(x) {
                    let y = &node.value;
                    let cols = y.cols();
                    let segs = offsets.len() - 1;
                    let blocks: Vec<Vec<f64>> = par::map_collect(segs, |s| {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        let mut block = vec![0.0; (hi - lo) * cols];
                        for c in 0..cols {
                            let mut dot = 0.0;
                            for r in lo..hi {
                                dot += y.get(r, c) * g.get(r, c);
                            }
                            for r in lo..hi {
                                block[(r - lo) * cols + c] = y.get(r, c) * (g.get(r, c) - dot);
                            }
                        }
                        block
                    });
                    accumulate(grads, *x, Tensor::from_vec(y.rows(), cols, blocks.concat()));
                }
            }
            Op::GroupColSum(x, group) => {
                if want(x) {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Tensor::zeros(rows, cols);
                    par::for_each_row(d.data_mut(), cols.max(1), |r, row| {
                        let src = g.row(r);
                        for (c, e) in row.iter_mut().enumerate() {
                            *e = src[c / group];
                        }
                    });
                    accumulate(grads, *x, d);
                }
            }
            Op::RepeatCols(x, times) => {
                if want(x) {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Tensor::zeros(rows, cols);
                    par::for_each_row(d.data_mut(), cols.max(1), |r, row| {
                        let src = g.row(r);
                        for (c, e) in row.iter_mut().enumerate() {
                            *e = src[c * times..(c + 1) * times].iter().sum();
                        }
                    });
                    accumulate(grads, *x, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, cols) = self.shape(*p);
                    if want(p) {
                        let mut d = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        accumulate(grads, *p, d);
                    }
                    off += cols;
                }
            }
            Op::SliceCols(x, start) => {
                if want(x) {
                    let (rows, cols) = self.shape(*x);
                    let len = g.cols();
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::LayerNorm(x, gain, bias) => {
                let (rows, cols) = self.shape(*x);
                let xhat = &node.aux[..rows * cols];
                let rstd = &node.aux[rows * cols..];
                let gv = self.value(*gain).data();
                if want(x) {
                    let mut d = Tensor::zeros(rows, cols);
                    par::for_each_row(d.data_mut(), cols.max(1), |r, row| {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            m1 += dxh;
                            m2 += dxh * xh[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let dxh = gr[c] * gv[c];
                            row[c] = rstd[r] * (dxh - m1 - xh[c] * m2);
                        }
                    });
                    accumulate(grads, *x, d);
                }
                if want(gain) || want(bias) {
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gi = g.get(r, c);
                            dg.data_mut()[c] += gi * xhat[r * cols + c];
                            db.data_mut()[c] += gi;
                        }
                    }
                    if want(gain) {
                        accumulate(grads, *gain, dg);
                    }
                    if want(bias) {
                        accumulate(grads, *bias, db);
                    }
                }
            }
            Op::SumAll(x) => {
                if want(x) {
                    let (rows, cols) = self.shape(*x);
                    accumulate(grads, *x, Tensor::filled(rows, cols, g.item()));
                }
            }
            Op::MeanAll(x) => {
                if want(x) {
                    let (rows, cols) = self.shape(*x);
                    let n = (rows * cols).max(1) as f64;
                    accumulate(grads, *x, Tensor::filled(rows, cols, g.item() / n));
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when no gradient reached the node.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// The gradient, or zeros shaped like the node if nothing reached it.
    pub fn get_or_zeros(&self, tape: &Tape, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.shape(id);
                Tensor::zeros(r, c)
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, d: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|p| f(*p)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(p, q)| f(*p, *q)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn unary_grad(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Tanh => 1.0 - y * y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Gelu => {
            let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
        }
        Unary::Log => 1.0 / x,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Exp => y,
        Unary::Square => 2.0 * x,
    }
}

/// `a (n×k) · b (k×m)`, parallel over output rows.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.rows(), "matmul inner dimension mismatch");
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(n, m);
    if m == 0 {
        return out;
    }
    let bd = b.data();
    par::for_each_row(out.data_mut(), m, |i, row| {
        let ar = a.row(i);
        for (kk, &av) in ar.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let br = &bd[kk * m..(kk + 1) * m];
            for (o, bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn identity_has_unit_gradient() {
        let mut tape = Tape::with_precision(Precision::F64);
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.sum_all(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn tanh_slope_at_zero_is_one() {
        let mut tape = Tape::with_precision(Precision::F64);
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.tanh(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::with_precision(Precision::F64);
        let x = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Precondition(_))));
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut tape = Tape::with_precision(Precision::F64);
        let x = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::scalar(5.0));
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(&tape, unused).item(), 0.0);
        assert_eq!(g.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = t(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let b = t(3, 2, &[7., 8., 9., 10., 11., 12.]);
        assert_eq!(matmul(&a, &b).data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn segment_softmax_rows_sum_to_one() {
        let mut tape = Tape::with_precision(Precision::F64);
        let x = tape.constant(t(5, 2, &[1., -3., 2., 0., 1000., 1., -2., 5., 0.5, 0.5]));
        let y = tape.segment_softmax(x, Arc::from(vec![0usize, 2, 5]));
        let v = tape.value(y);
        for c in 0..2 {
            assert!((v.get(0, c) + v.get(1, c) - 1.0).abs() < 1e-12);
            assert!((v.get(2, c) + v.get(3, c) + v.get(4, c) - 1.0).abs() < 1e-12);
        }
        assert!(v.is_finite());
    }

    #[test]
    fn f32_mode_rounds_values() {
        let mut tape = Tape::with_precision(Precision::F32);
        let x = tape.constant(Tensor::scalar(0.1));
        assert_eq!(tape.value(x).item(), 0.1f32 as f64);
    }

    #[test]
    fn saturated_heads_stay_inside_open_ranges() {
        for precision in [Precision::F64, Precision::F32] {
            let mut tape = Tape::with_precision(precision);
            let x = tape.constant(t(1, 4, &[-800., -40., 40., 800.]));
            let p = tape.sigmoid(x);
            let q = tape.tanh(x);
            assert!(tape.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
            assert!(tape.value(q).data().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }
}
