//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid reverse topological order. A graph supports exactly one backward pass.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Norm floor used by row normalization.
pub const NORM_FLOOR: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    DivScalar(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm { x: Var, xhat: Tensor, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Transpose(Var),
    SegmentMean(Var, Vec<Vec<usize>>),
    SegmentMax(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MaskedLse { x: Var, mask: Vec<bool> },
    Pick(Var, Vec<(usize, usize)>),
    WeightedSum(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of one backward pass, indexed by parameter id.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Gradients { grads: vec![None; num_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.as_mut())
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.grads.iter_mut().enumerate().filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
    nonfinite: Option<(&'static str, usize)>,
    floor_hits: usize,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
            consumed: false,
            nonfinite: None,
            floor_hits: 0,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Number of rows whose norm fell under [`NORM_FLOOR`] in `l2_normalize_rows`.
    pub fn norm_floor_hits(&self) -> usize {
        self.floor_hits
    }

    /// First non-finite op recorded, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some((op, node)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Var {
        let idx = self.nodes.len();
        if self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some((name, idx));
        }
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(idx)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node so
    /// fan-out gradients accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Leaf, true, "param");
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul {:?} x {:?}", va.shape(), vb.shape());
        let mut out = Tensor::zeros(va.rows(), vb.cols());
        gemm(1.0, va, false, vb, false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng, "matmul")
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "matmul_nt {:?} x {:?}^T", va.shape(), vb.shape());
        let mut out = Tensor::zeros(va.rows(), vb.rows());
        gemm(1.0, va, false, vb, true, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNt(a, b), ng, "matmul_nt")
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &'static str) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{name} shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.shape(), [1, va.cols()], "add_row shapes");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng, "add_row")
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.shape(), [1, va.cols()], "mul_row shapes");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng, "mul_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng, "scale")
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddConst(a), ng, "add_const")
    }

    /// Divides `a` by the `1 x 1` node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.shape(), [1, 1], "div_scalar divisor");
        let sv = sv.item();
        let out = self.value(a).map(|x| x / sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::DivScalar(a, s), ng, "div_scalar")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng, "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng, "tanh")
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = va.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, x) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(xhat.clone(), Op::LayerNorm { x: a, xhat, inv_std }, ng, "layer_norm")
    }

    /// Divides each row by `max(norm, NORM_FLOOR)`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        let mut hits = 0;
        for r in 0..va.rows() {
            let n = va.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < NORM_FLOOR {
                hits += 1;
            }
            let d = n.max(NORM_FLOOR);
            out.row_mut(r).iter_mut().for_each(|x| *x /= d);
            norms.push(n);
        }
        self.floor_hits += hits;
        let ng = self.ng(a);
        self.push(out, Op::L2Normalize { x: a, norms }, ng, "l2_normalize")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + vp.cols()].copy_from_slice(vp.row(r));
            }
            off += vp.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let out = Tensor::from_vec(rows, cols, data).expect("shape");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(idx.len(), va.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(va.row(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), ng, "gather_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng, "slice_cols")
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng, "transpose")
    }

    /// One output row per group: mean of the group's rows (zero row when empty).
    pub fn segment_mean(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(groups.len(), va.cols());
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let inv = 1.0 / members.len() as f64;
            let orow = out.row_mut(g);
            for &m in members {
                for (o, x) in orow.iter_mut().zip(va.row(m)) {
                    *o += x;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let ng = self.ng(a);
        self.push(out, Op::SegmentMean(a, groups.to_vec()), ng, "segment_mean")
    }

    /// Column-wise max over each group; ties resolve to the first row listed.
    pub fn segment_max(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let mut out = Tensor::zeros(groups.len(), cols);
        let mut arg = vec![0usize; groups.len() * cols];
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "segment_max over an empty group");
            for c in 0..cols {
                let mut best = members[0];
                let mut bv = va.get(best, c);
                for &m in &members[1..] {
                    let v = va.get(m, c);
                    if v > bv {
                        bv = v;
                        best = m;
                    }
                }
                out.set(g, c, bv);
                arg[g * cols + c] = best;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SegmentMax(a, arg), ng, "segment_max")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng, "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = logsumexp(row.iter().cloned());
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng, "log_softmax_rows")
    }

    /// Row-wise log-sum-exp over the entries where `mask` is true (row-major,
    /// same shape as `a`). Rows with an empty mask yield `-inf`, which the
    /// caller must avoid.
    pub fn masked_lse_rows(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let va = self.value(a);
        assert_eq!(mask.len(), va.len(), "mask shape");
        let cols = va.cols();
        let mut out = Tensor::zeros(va.rows(), 1);
        for r in 0..va.rows() {
            let row = va.row(r);
            let m = &mask[r * cols..(r + 1) * cols];
            let v = logsumexp(row.iter().zip(m).filter(|(_, &k)| k).map(|(x, _)| *x));
            out.set(r, 0, v);
        }
        let ng = self.ng(a);
        self.push(out, Op::MaskedLse { x: a, mask }, ng, "masked_lse_rows")
    }

    /// Column vector of selected entries.
    pub fn pick(&mut self, a: Var, coords: &[(usize, usize)]) -> Var {
        let va = self.value(a);
        let data = coords.iter().map(|&(r, c)| va.get(r, c)).collect::<Vec<_>>();
        let out = Tensor::from_vec(coords.len(), 1, data).expect("shape");
        let ng = self.ng(a);
        self.push(out, Op::Pick(a, coords.to_vec()), ng, "pick")
    }

    /// `sum_i w_i a_i` over all entries, as a `1 x 1` node.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(weights.len(), va.len(), "weighted_sum weights");
        let s = va.data().iter().zip(&weights).map(|(x, w)| x * w).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), ng, "weighted_sum")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.weighted_sum(a, vec![1.0; n])
    }

    /// Reverse pass from a `1 x 1` loss. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.check_finite()?;
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::NonScalarLoss { rows: lv.rows(), cols: lv.cols() });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::new(self.store.len());

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Some(pid) = self.nodes[i].param {
                out.insert(pid, gout);
                continue;
            }
            self.backprop_node(i, &gout, &mut grads);
        }
        for (_, g) in out.iter() {
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "backward", node: loss.0 });
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let ng = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, g: Tensor| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if ng(*a) {
                    let mut ga = Tensor::zeros(val(*a).rows(), val(*a).cols());
                    gemm(1.0, gout, false, val(*b), true, 0.0, &mut ga);
                    acc(*a, ga);
                }
                if ng(*b) {
                    let mut gb = Tensor::zeros(val(*b).rows(), val(*b).cols());
                    gemm(1.0, val(*a), true, gout, false, 0.0, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                if ng(*a) {
                    let mut ga = Tensor::zeros(val(*a).rows(), val(*a).cols());
                    gemm(1.0, gout, false, val(*b), false, 0.0, &mut ga);
                    acc(*a, ga);
                }
                if ng(*b) {
                    let mut gb = Tensor::zeros(val(*b).rows(), val(*b).cols());
                    gemm(1.0, gout, true, val(*a), false, 0.0, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    acc(*a, hadamard(gout, val(*b)));
                }
                if ng(*b) {
                    acc(*b, hadamard(gout, val(*a)));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, gout.clone());
                if ng(*row) {
                    acc(*row, column_sums(gout));
                }
            }
            Op::MulRow(a, row) => {
                let vr = val(*row);
                if ng(*a) {
                    let mut ga = gout.clone();
                    for r in 0..ga.rows() {
                        for (g, w) in ga.row_mut(r).iter_mut().zip(vr.data()) {
                            *g *= w;
                        }
                    }
                    acc(*a, ga);
                }
                if ng(*row) {
                    acc(*row, column_sums(&hadamard(gout, val(*a))));
                }
            }
            Op::Scale(a, s) => acc(*a, gout.map(|x| x * s)),
            Op::AddConst(a) => acc(*a, gout.clone()),
            Op::DivScalar(a, s) => {
                let sv = val(*s).item();
                if ng(*a) {
                    acc(*a, gout.map(|x| x / sv));
                }
                if ng(*s) {
                    let dot: f64 = gout.data().iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
                    acc(*s, Tensor::scalar(-dot / (sv * sv)));
                }
            }
            Op::Gelu(a) => {
                let ga = zip_map(gout, val(*a), |g, x| g * gelu_grad(x));
                acc(*a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_map(gout, out, |g, y| g * y * (1.0 - y));
                acc(*a, ga);
            }
            Op::Tanh(a) => {
                let ga = zip_map(gout, out, |g, y| g * (1.0 - y * y));
                acc(*a, ga);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let cols = xhat.cols();
                let n = cols as f64;
                let mut gx = Tensor::zeros(xhat.rows(), cols);
                for r in 0..xhat.rows() {
                    let dy = gout.row(r);
                    let xh = xhat.row(r);
                    let sum_dy: f64 = dy.iter().sum();
                    let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
                    let is = inv_std[r];
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = is / n * (n * dy[c] - sum_dy - xh[c] * sum_dy_xh);
                    }
                }
                acc(*x, gx);
            }
            Op::L2Normalize { x, norms } => {
                let mut gx = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let dy = gout.row(r);
                    let n = norms[r];
                    if n < NORM_FLOOR {
                        for (o, d) in gx.row_mut(r).iter_mut().zip(dy) {
                            *o = d / NORM_FLOOR;
                        }
                    } else {
                        let proj: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                        for ((o, d), yy) in gx.row_mut(r).iter_mut().zip(dy).zip(y) {
                            *o = (d - yy * proj) / n;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if ng(p) {
                        let mut gp = Tensor::zeros(gout.rows(), pc);
                        for r in 0..gout.rows() {
                            gp.row_mut(r).copy_from_slice(&gout.row(r)[off..off + pc]);
                        }
                        acc(p, gp);
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = gout.cols();
                let mut off = 0;
                for &p in parts {
                    let pr = val(p).rows();
                    if ng(p) {
                        let data = gout.data()[off * cols..(off + pr) * cols].to_vec();
                        acc(p, Tensor::from_vec(pr, cols, data).expect("shape"));
                    }
                    off += pr;
                }
            }
            Op::GatherRows(a, idx) => {
                let va = val(*a);
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                for (o, &src) in idx.iter().enumerate() {
                    for (g, d) in ga.row_mut(src).iter_mut().zip(gout.row(o)) {
                        *g += d;
                    }
                }
                acc(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let va = val(*a);
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                let len = gout.cols();
                for r in 0..va.rows() {
                    ga.row_mut(r)[*start..*start + len].copy_from_slice(gout.row(r));
                }
                acc(*a, ga);
            }
            Op::Transpose(a) => acc(*a, gout.transpose()),
            Op::SegmentMean(a, groups) => {
                let va = val(*a);
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                for (g, members) in groups.iter().enumerate() {
                    if members.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / members.len() as f64;
                    for &m in members {
                        for (o, d) in ga.row_mut(m).iter_mut().zip(gout.row(g)) {
                            *o += d * inv;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::SegmentMax(a, arg) => {
                let va = val(*a);
                let cols = va.cols();
                let mut ga = Tensor::zeros(va.rows(), cols);
                for g in 0..gout.rows() {
                    for c in 0..cols {
                        let src = arg[g * cols + c];
                        let cur = ga.get(src, c);
                        ga.set(src, c, cur + gout.get(g, c));
                    }
                }
                acc(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let dy = gout.row(r);
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for ((o, yy), d) in ga.row_mut(r).iter_mut().zip(y).zip(dy) {
                        *o = yy * (d - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let dy = gout.row(r);
                    let s: f64 = dy.iter().sum();
                    for ((o, yy), d) in ga.row_mut(r).iter_mut().zip(y).zip(dy) {
                        *o = d - yy.exp() * s;
                    }
                }
                acc(*a, ga);
            }
            Op::MaskedLse { x, mask } => {
                let vx = val(*x);
                let cols = vx.cols();
                let mut gx = Tensor::zeros(vx.rows(), cols);
                for r in 0..vx.rows() {
                    let lse = out.get(r, 0);
                    let d = gout.get(r, 0);
                    let m = &mask[r * cols..(r + 1) * cols];
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        if m[c] {
                            *o = d * (vx.get(r, c) - lse).exp();
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Pick(a, coords) => {
                let va = val(*a);
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                for (k, &(r, c)) in coords.iter().enumerate() {
                    let cur = ga.get(r, c);
                    ga.set(r, c, cur + gout.get(k, 0));
                }
                acc(*a, ga);
            }
            Op::WeightedSum(a, w) => {
                let va = val(*a);
                let d = gout.item();
                let data = w.iter().map(|wi| wi * d).collect();
                acc(*a, Tensor::from_vec(va.rows(), va.cols(), data).expect("shape"));
            }
        }
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("shape")
}

fn column_sums(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, a.cols());
    for r in 0..a.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(a.row(r)) {
            *o += x;
        }
    }
    out
}

/// Numerically stable log-sum-exp; `-inf` for an empty sequence.
pub fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Group;

    #[test]
    fn square_derivative() {
        let mut store = ParamStore::new();
        let x = store.add("x", Group::Shared, Tensor::scalar(3.0));
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let y = g.mul(xv, xv);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let mut store = ParamStore::new();
        let vals = vec![0.3, -1.2, 2.0, 0.5];
        let x = store.add("x", Group::Shared, Tensor::row_vector(vals.clone()));
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let lse = g.masked_lse_rows(xv, vec![true; 4]);
        let grads = g.backward(lse).unwrap();
        let z: f64 = vals.iter().map(|v: &f64| v.exp()).sum();
        for (gv, v) in grads.get(x).unwrap().data().iter().zip(&vals) {
            assert!((gv - v.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut store = ParamStore::new();
        let x = store.add("x", Group::Shared, Tensor::scalar(1.0));
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let y = g.scale(xv, 2.0);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let x = store.add("x", Group::Shared, Tensor::row_vector(vec![1.0, 2.0]));
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        assert!(matches!(g.backward(xv), Err(Error::NonScalarLoss { rows: 1, cols: 2 })));
    }

    #[test]
    fn nan_is_a_hard_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Group::Shared, Tensor::scalar(0.0));
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let zero = g.constant(Tensor::scalar(0.0));
        let y = g.div_scalar(xv, zero);
        assert!(matches!(g.backward(y), Err(Error::NonFinite { op: "div_scalar", .. })));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*a + x*b, dy/dx = a + b
        let mut store = ParamStore::new();
        let x = store.add("x", Group::Shared, Tensor::scalar(2.0));
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let a = g.scale(xv, 3.0);
        let b = g.scale(xv, 5.0);
        let y = g.add(a, b);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 8.0);
    }
}
