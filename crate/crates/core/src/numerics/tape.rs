//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive executed during a forward pass together
//! with whatever the adjoint needs (softmax weights, normalized activations).
//! [`Tape::backward`] replays the records in exact reverse order and adds
//! parameter gradients into a caller-owned [`Gradients`] buffer, so several
//! workers can each own a buffer and reduce them afterwards.
//!
//! Parameters are never copied onto the tape: a parameter node reads its value
//! straight from the [`ParamStore`] it was borrowed from.

use std::collections::HashMap;
use std::sync::Arc;

use super::matrix::{gemm_into, gemm_raw, row_moments, sigmoid, softmax_in_place, Matrix};
use super::params::{Gradients, ParamId, ParamStore};
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rows `start..end` of a grouped linear input share one weight/bias pair.
#[derive(Debug, Clone, Copy)]
pub struct RowGroup {
    pub start: usize,
    pub end: usize,
    pub weight: Var,
    pub bias: Var,
}

/// Compressed per-node lists of key/value rows (CSR layout).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl Segments {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut members = Vec::new();
        offsets.push(0);
        for l in lists {
            members.extend_from_slice(l);
            offsets.push(members.len());
        }
        Self { offsets, members }
    }

    pub fn num_segments(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn segment(&self, i: usize) -> &[usize] {
        &self.members[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn total(&self) -> usize {
        self.members.len()
    }
}

/// Shape of a multi-head segment attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSpec {
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub scale: f64,
}

enum Op<F> {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupedLinear { x: Var, groups: Vec<RowGroup> },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, F),
    GatherRows { src: Var, idx: Arc<Vec<usize>> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<F>, inv_std: Vec<F> },
    Relu(Var),
    Sigmoid(Var),
    SegmentAttention { q: Var, k: Var, v: Var, segs: Arc<Segments>, spec: HeadSpec, weights: Vec<F> },
    BceWithLogits { z: Var, labels: Vec<F> },
    Sum(Var),
}

struct Node<F> {
    value: Option<Matrix<F>>,
    shape: (usize, usize),
    needs_grad: bool,
    op: Op<F>,
}

/// Record of one forward pass.
pub struct Tape<'p, F: Scalar> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    flops: u64,
}

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            flops: 0,
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds performed by recorded forward primitives.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops = 0;
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix<F> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].shape
    }

    /// Normalized weights of a segment attention (slot-major, head-minor) or a row softmax.
    pub fn attention_weights(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::SegmentAttention { weights, .. } => Some(weights),
            Op::RowSoftmax(_) => self.nodes[v.0].value.as_ref().map(|m| m.data()),
            _ => None,
        }
    }

    fn push(&mut self, value: Matrix<F>, needs_grad: bool, op: Op<F>) -> Var {
        let shape = value.shape();
        self.nodes.push(Node {
            value: Some(value),
            shape,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.needs(v))
    }

    /// A constant leaf.
    pub fn input(&mut self, m: Matrix<F>) -> Var {
        self.push(m, false, Op::Input)
    }

    /// A parameter leaf. Repeated calls with the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let shape = self.params.value(id).shape();
        self.nodes.push(Node {
            value: None,
            shape,
            needs_grad: true,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = self
            .value(a)
            .matmul_t(ta, self.value(b), tb)
            .unwrap_or_else(|e| panic!("{e}"));
        let k = if ta { self.shape(a).0 } else { self.shape(a).1 };
        self.flops += (out.rows() * out.cols() * k) as u64;
        let needs = self.any_needs(&[a, b]);
        self.push(out, needs, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `x * w^T + b`, with `w` stored as `out x in` and `b` as `1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = self.shape(x);
        let (dout, win) = self.shape(w);
        if din != win {
            panic!(
                "{}",
                Error::Shape {
                    op: "linear",
                    left: (n, din),
                    right: (dout, win),
                }
            );
        }
        let mut out = Matrix::zeros(n, dout);
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, dout), "linear bias shape");
            for r in 0..n {
                out.row_mut(r).copy_from_slice(bias.data());
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        gemm_into(F::one(), self.value(x), false, self.value(w), true, beta, &mut out);
        self.flops += (n * din * dout) as u64;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, needs, Op::Linear { x, w, b })
    }

    /// Affine map per contiguous row group. Groups must tile disjoint row ranges of `x`;
    /// rows outside every group produce zeros.
    pub fn grouped_linear(&mut self, x: Var, groups: Vec<RowGroup>) -> Var {
        let (n, din) = self.shape(x);
        let dout = groups.first().map_or(0, |g| self.shape(g.weight).0);
        let mut out = Matrix::zeros(n, dout);
        let mut needs = self.needs(x);
        for g in &groups {
            assert!(g.start <= g.end && g.end <= n, "grouped_linear row range");
            let w = self.value(g.weight);
            let b = self.value(g.bias);
            assert_eq!(w.shape(), (dout, din), "grouped_linear weight shape");
            assert_eq!(b.shape(), (1, dout), "grouped_linear bias shape");
            for r in g.start..g.end {
                out.row_mut(r).copy_from_slice(b.data());
            }
            let rows = g.end - g.start;
            let xv = self.value(x);
            gemm_raw(
                rows,
                din,
                dout,
                F::one(),
                &xv.data()[g.start * din..],
                din as isize,
                1,
                w.data(),
                1,
                din as isize,
                F::one(),
                &mut out.data_mut()[g.start * dout..],
                dout as isize,
            );
            self.flops += (rows * din * dout) as u64;
            needs |= self.needs(g.weight) || self.needs(g.bias);
        }
        self.push(out, needs, Op::GroupedLinear { x, groups })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).unwrap_or_else(|e| panic!("{e}"));
        let needs = self.any_needs(&[a, b]);
        self.push(out, needs, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b)).unwrap_or_else(|e| panic!("{e}"));
        let needs = self.any_needs(&[a, b]);
        self.push(out, needs, Op::Sub(a, b))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        let needs = self.needs(x);
        self.push(out, needs, Op::Scale(x, s))
    }

    /// Row lookup, `out[i] = src[idx[i]]`.
    pub fn gather_rows(&mut self, src: Var, idx: Arc<Vec<usize>>) -> Var {
        let s = self.value(src);
        let mut out = Matrix::zeros(idx.len(), s.cols());
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < s.rows(), "gather index {j} out of {} rows", s.rows());
            out.row_mut(i).copy_from_slice(s.row(j));
        }
        let needs = self.needs(src);
        self.push(out, needs, Op::GatherRows { src, idx })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_cols(&mats).unwrap_or_else(|e| panic!("{e}"));
        let needs = self.any_needs(parts);
        self.push(out, needs, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                panic!(
                    "{}",
                    Error::Shape {
                        op: "concat_rows",
                        left: (rows, cols),
                        right: m.shape(),
                    }
                );
            }
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let needs = self.any_needs(parts);
        self.push(Matrix::from_vec(rows, cols, data), needs, Op::ConcatRows(parts.to_vec()))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let out = self.value(x).row_softmax();
        let needs = self.needs(x);
        self.push(out, needs, Op::RowSoftmax(x))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.shape(), (1, d), "layer_norm gamma shape");
        assert_eq!(b.shape(), (1, d), "layer_norm beta shape");
        let mut xhat = Matrix::zeros(n, d);
        let mut out = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let (mean, inv) = row_moments(xv.row(r));
            inv_std.push(inv);
            let xr = xv.row(r);
            let hr = xhat.row_mut(r);
            for c in 0..d {
                hr[c] = (xr[c] - mean) * inv;
            }
            let or = out.row_mut(r);
            let hr = xhat.row(r);
            for c in 0..d {
                or[c] = hr[c] * g.data()[c] + b.data()[c];
            }
        }
        let needs = self.any_needs(&[x, gamma, beta]);
        self.push(
            out,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        let needs = self.needs(x);
        self.push(out, needs, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).sigmoid();
        let needs = self.needs(x);
        self.push(out, needs, Op::Sigmoid(x))
    }

    /// Multi-head attention where query row `i` attends over the key/value rows
    /// listed in segment `i`. Empty segments yield zero rows.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, segs: Arc<Segments>, spec: HeadSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let HeadSpec {
            heads,
            key_dim,
            value_dim,
            ..
        } = spec;
        assert_eq!(qv.cols(), heads * key_dim, "segment_attention query width");
        assert_eq!(kv.cols(), heads * key_dim, "segment_attention key width");
        assert_eq!(vv.cols(), heads * value_dim, "segment_attention value width");
        assert_eq!(segs.num_segments(), qv.rows(), "segment_attention segment count");
        let scale = F::from_f64(spec.scale);
        let mut out = Matrix::zeros(qv.rows(), heads * value_dim);
        let mut weights = vec![F::zero(); segs.total() * heads];
        let mut logits = Vec::new();
        for c in 0..qv.rows() {
            let members = segs.segment(c);
            if members.is_empty() {
                continue;
            }
            let base = segs.range(c).start;
            for h in 0..heads {
                let qh = &qv.row(c)[h * key_dim..(h + 1) * key_dim];
                logits.clear();
                for &m in members {
                    let kh = &kv.row(m)[h * key_dim..(h + 1) * key_dim];
                    logits.push(dot(qh, kh) * scale);
                }
                softmax_in_place(&mut logits);
                let orow = &mut out.row_mut(c)[h * value_dim..(h + 1) * value_dim];
                for (j, &m) in members.iter().enumerate() {
                    let a = logits[j];
                    weights[(base + j) * heads + h] = a;
                    let vh = &vv.row(m)[h * value_dim..(h + 1) * value_dim];
                    for (o, &x) in orow.iter_mut().zip(vh) {
                        *o += a * x;
                    }
                }
            }
        }
        self.flops += (segs.total() * heads * (key_dim + value_dim)) as u64;
        let needs = self.any_needs(&[q, k, v]);
        self.push(
            out,
            needs,
            Op::SegmentAttention {
                q,
                k,
                v,
                segs,
                spec,
                weights,
            },
        )
    }

    /// Mean binary cross-entropy of logits `z` (`n x 1`) against 0/1 labels.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[F]) -> Var {
        let zv = self.value(z);
        assert_eq!(zv.shape(), (labels.len(), 1), "bce logits shape");
        let n = F::from_f64(labels.len().max(1) as f64);
        let total: F = zv
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| stable_bce(x, y))
            .sum();
        let needs = self.needs(z);
        self.push(
            Matrix::from_vec(1, 1, vec![total / n]),
            needs,
            Op::BceWithLogits {
                z,
                labels: labels.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Matrix::from_vec(1, 1, vec![s]), needs, Op::Sum(x))
    }

    /// Propagates d`loss`/d(everything) and adds parameter gradients into `grads`.
    /// `loss` must be `1 x 1`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<F>) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut state = GradState {
            nodes: &self.nodes,
            node_grads: (0..self.nodes.len()).map(|_| None).collect(),
            params: grads,
        };
        state.node_grads[loss.0] = Some(Matrix::filled(1, 1, F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = state.node_grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut state);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Matrix<F>, st: &mut GradState<'_, F>) {
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(id) => st.params.get_mut(*id).add_scaled(g, F::one()),
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let ga = st.slot(a);
                    if ta {
                        gemm_into(F::one(), bv, tb, g, true, F::one(), ga);
                    } else {
                        gemm_into(F::one(), g, false, bv, !tb, F::one(), ga);
                    }
                }
                if self.needs(b) {
                    let gb = st.slot(b);
                    if tb {
                        gemm_into(F::one(), g, true, av, ta, F::one(), gb);
                    } else {
                        gemm_into(F::one(), av, !ta, g, false, F::one(), gb);
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                if self.needs(x) {
                    gemm_into(F::one(), g, false, self.value(w), false, F::one(), st.slot(x));
                }
                if self.needs(w) {
                    gemm_into(F::one(), g, true, self.value(x), false, F::one(), st.slot(w));
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let gb = st.slot(b);
                        for r in 0..g.rows() {
                            for (acc, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            Op::GroupedLinear { x, groups } => {
                let x = *x;
                let xv = self.value(x);
                let (_, din) = xv.shape();
                let dout = g.cols();
                for grp in groups {
                    let rows = grp.end - grp.start;
                    if rows == 0 {
                        continue;
                    }
                    let gy = &g.data()[grp.start * dout..grp.end * dout];
                    if self.needs(x) {
                        let w = self.value(grp.weight);
                        let gx = st.slot(x);
                        gemm_raw(
                            rows,
                            dout,
                            din,
                            F::one(),
                            gy,
                            dout as isize,
                            1,
                            w.data(),
                            din as isize,
                            1,
                            F::one(),
                            &mut gx.data_mut()[grp.start * din..],
                            din as isize,
                        );
                    }
                    if self.needs(grp.weight) {
                        let gw = st.slot(grp.weight);
                        gemm_raw(
                            dout,
                            rows,
                            din,
                            F::one(),
                            gy,
                            1,
                            dout as isize,
                            &xv.data()[grp.start * din..],
                            din as isize,
                            1,
                            F::one(),
                            gw.data_mut(),
                            din as isize,
                        );
                    }
                    if self.needs(grp.bias) {
                        let gb = st.slot(grp.bias);
                        for r in 0..rows {
                            for (acc, &v) in gb.data_mut().iter_mut().zip(&gy[r * dout..(r + 1) * dout]) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    st.slot(a).add_scaled(g, F::one());
                }
                if self.needs(b) {
                    st.slot(b).add_scaled(g, F::one());
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    st.slot(a).add_scaled(g, F::one());
                }
                if self.needs(b) {
                    st.slot(b).add_scaled(g, -F::one());
                }
            }
            &Op::Scale(x, s) => {
                if self.needs(x) {
                    st.slot(x).add_scaled(g, s);
                }
            }
            Op::GatherRows { src, idx } => {
                if self.needs(*src) {
                    let gs = st.slot(*src);
                    for (i, &j) in idx.iter().enumerate() {
                        for (acc, &v) in gs.row_mut(j).iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.needs(p) {
                        let gp = st.slot(p);
                        for r in 0..g.rows() {
                            for (acc, &v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *acc += v;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        for (acc, &v) in st.slot(p).data_mut().iter_mut().zip(&g.data()[off..off + len]) {
                            *acc += v;
                        }
                    }
                    off += len;
                }
            }
            &Op::RowSoftmax(x) => {
                if self.needs(x) {
                    let y = self.nodes[i].value.as_ref().expect("softmax value");
                    let gx = st.slot(x);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((acc, &yv), &gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *acc += yv * (gv - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.shape();
                if self.needs(*beta) {
                    let gb = st.slot(*beta);
                    for r in 0..n {
                        for (acc, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
                if self.needs(*gamma) {
                    let gg = st.slot(*gamma);
                    for r in 0..n {
                        for ((acc, &v), &h) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *acc += v * h;
                        }
                    }
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).data();
                    let dn = F::from_f64(d as f64);
                    let gx = st.slot(*x);
                    let mut dh = vec![F::zero(); d];
                    for r in 0..n {
                        let hr = xhat.row(r);
                        for c in 0..d {
                            dh[c] = g.row(r)[c] * gam[c];
                        }
                        let mean_dh = dh.iter().copied().sum::<F>() / dn;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<F>() / dn;
                        let inv = inv_std[r];
                        for (c, acc) in gx.row_mut(r).iter_mut().enumerate() {
                            *acc += inv * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Relu(x) => {
                if self.needs(x) {
                    let xv = self.value(x);
                    let gx = st.slot(x);
                    for ((acc, &v), &gv) in gx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                        if v > F::zero() {
                            *acc += gv;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if self.needs(x) {
                    let y = self.nodes[i].value.as_ref().expect("sigmoid value");
                    let gx = st.slot(x);
                    for ((acc, &s), &gv) in gx.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                        *acc += gv * s * (F::one() - s);
                    }
                }
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                segs,
                spec,
                weights,
            } => self.backprop_attention((*q, *k, *v), segs, spec, weights, g, st),
            Op::BceWithLogits { z, labels } => {
                if self.needs(*z) {
                    let zv = self.value(*z);
                    let n = F::from_f64(labels.len().max(1) as f64);
                    let scale = g.get(0, 0) / n;
                    let gz = st.slot(*z);
                    for ((acc, &x), &y) in gz.data_mut().iter_mut().zip(zv.data()).zip(labels) {
                        *acc += scale * (sigmoid(x) - y);
                    }
                }
            }
            &Op::Sum(x) => {
                if self.needs(x) {
                    let s = g.get(0, 0);
                    for acc in st.slot(x).data_mut() {
                        *acc += s;
                    }
                }
            }
        }
    }

    fn backprop_attention(
        &self,
        (q, k, v): (Var, Var, Var),
        segs: &Segments,
        spec: &HeadSpec,
        weights: &[F],
        g: &Matrix<F>,
        st: &mut GradState<'_, F>,
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let HeadSpec {
            heads,
            key_dim: dk,
            value_dim: dv,
            ..
        } = *spec;
        let scale = F::from_f64(spec.scale);
        let (nq, nk) = (qv.rows(), kv.rows());
        let mut gq = Matrix::zeros(nq, heads * dk);
        let mut gk = Matrix::zeros(nk, heads * dk);
        let mut gv = Matrix::zeros(nk, heads * dv);
        let mut dlogit = Vec::new();
        for c in 0..nq {
            let members = segs.segment(c);
            if members.is_empty() {
                continue;
            }
            let base = segs.range(c).start;
            for h in 0..heads {
                let go = &g.row(c)[h * dv..(h + 1) * dv];
                dlogit.clear();
                let mut inner = F::zero();
                for (j, &m) in members.iter().enumerate() {
                    let a = weights[(base + j) * heads + h];
                    let vh = &vv.row(m)[h * dv..(h + 1) * dv];
                    let da = dot(go, vh);
                    inner += a * da;
                    dlogit.push(da);
                    for (acc, &x) in gv.row_mut(m)[h * dv..(h + 1) * dv].iter_mut().zip(go) {
                        *acc += a * x;
                    }
                }
                let qh = &qv.row(c)[h * dk..(h + 1) * dk];
                for (j, &m) in members.iter().enumerate() {
                    let a = weights[(base + j) * heads + h];
                    let dl = a * (dlogit[j] - inner) * scale;
                    let kh = &kv.row(m)[h * dk..(h + 1) * dk];
                    for (acc, &x) in gq.row_mut(c)[h * dk..(h + 1) * dk].iter_mut().zip(kh) {
                        *acc += dl * x;
                    }
                    for (acc, &x) in gk.row_mut(m)[h * dk..(h + 1) * dk].iter_mut().zip(qh) {
                        *acc += dl * x;
                    }
                }
            }
        }
        if self.needs(q) {
            st.slot(q).add_scaled(&gq, F::one());
        }
        if self.needs(k) {
            st.slot(k).add_scaled(&gk, F::one());
        }
        if self.needs(v) {
            st.slot(v).add_scaled(&gv, F::one());
        }
    }
}

struct GradState<'a, F> {
    nodes: &'a [Node<F>],
    node_grads: Vec<Option<Matrix<F>>>,
    params: &'a mut Gradients<F>,
}

impl<F: Scalar> GradState<'_, F> {
    /// Gradient accumulator of `v`: the parameter buffer for parameter leaves,
    /// a lazily zeroed node buffer otherwise.
    fn slot(&mut self, v: Var) -> &mut Matrix<F> {
        let node = &self.nodes[v.0];
        if let Op::Param(id) = node.op {
            return self.params.get_mut(id);
        }
        let (r, c) = node.shape;
        self.node_grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
    }
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `-[y ln s(z) + (1-y) ln(1-s(z))]` in the overflow-free logit form.
#[inline]
pub fn stable_bce<F: Scalar>(z: F, y: F) -> F {
    z.max(F::zero()) - z * y + (-z.abs()).exp().ln_1p()
}
