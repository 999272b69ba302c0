//! Dense matrices and a tape-based reverse-mode autodiff engine.
//!
//! Everything is `f64` and row-major. A [`Tape`] borrows a [`ParamStore`]
//! for the duration of one forward/backward pass; parameter nodes read the
//! store directly instead of copying weights onto the tape.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(alloc::format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn scalar(x: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![x] }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// `self · other`
    pub fn matmul(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.cols, other.rows);
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.rows, other.rows);
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        for i in 0..k {
            let a_row = &self.data[i * m..(i + 1) * m];
            let b_row = &other.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.cols, other.cols);
        let (m, n) = (self.rows, other.rows);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                out.data[i * n + j] = dot(a, other.row(j));
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: BTreeMap<String, usize>,
}

pub type ParamId = usize;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Replaces the tensor under `name`, checking the shape.
    pub fn set(&mut self, name: &str, value: Mat) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Shape(alloc::format!("unknown parameter {name}")))?;
        if self.tensors[id].shape() != value.shape() {
            return Err(Error::Shape(alloc::format!(
                "parameter {name}: expected {:?}, got {:?}",
                self.tensors[id].shape(),
                value.shape()
            )));
        }
        self.tensors[id] = value;
        Ok(())
    }
}

pub type NodeId = usize;

/// Grouping of attention rows into sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Mat, rstd: Vec<f64> },
    Gather { table: NodeId, ids: Vec<usize> },
    Attention { q: NodeId, k: NodeId, v: NodeId, layout: AttnLayout, probs: Vec<f64> },
    MeanPool { x: NodeId, group: usize },
    RowNormalize { x: NodeId, norms: Vec<f64> },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>>, probs: Mat, count: usize },
    CosineAlign { x: NodeId, target: Mat },
    Triplet { x: NodeId, pos: Mat, neg: Mat, active: Vec<bool> },
    WeightedSum(Vec<(NodeId, f64)>),
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    values: Vec<Mat>,
    ops: Vec<Op>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, values: Vec::new(), ops: Vec::new(), param_nodes: BTreeMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.ops.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        match self.ops[id] {
            Op::Param(p) => self.params.get(p),
            _ => &self.values[id],
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data[0]
    }

    pub fn constant(&mut self, m: Mat) -> NodeId {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, p: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&p) {
            return n;
        }
        let n = self.push(Mat::default(), Op::Param(p));
        self.param_nodes.insert(p, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.rows {
            return Err(Error::Shape(alloc::format!("matmul {:?} x {:?}", va.shape(), vb.shape())));
        }
        let out = va.matmul(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(alloc::format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows != 1 || vb.cols != vx.cols {
            return Err(Error::Shape(alloc::format!("bias {:?} for {:?}", vb.shape(), vx.shape())));
        }
        let mut out = vx.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&vb.data) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + libm::tanh(GELU_C * (v + 0.044715 * v * v * v))))
            .collect();
        let out = Mat { rows: vx.rows, cols: vx.cols, data };
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (vx, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        if g.data.len() != vx.cols || b.data.len() != vx.cols {
            return Err(Error::Shape("layer norm affine size".into()));
        }
        let d = vx.cols as f64;
        let mut xhat = Mat::zeros(vx.rows, vx.cols);
        let mut out = Mat::zeros(vx.rows, vx.cols);
        let mut rstd = Vec::with_capacity(vx.rows);
        for r in 0..vx.rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (j, v) in row.iter().enumerate() {
                xh[j] = (v - mean) * rs;
            }
            let o = out.row_mut(r);
            for j in 0..vx.cols {
                o[j] = xh[j] * g.data[j] + b.data[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Row `i` of the output is row `ids[i]` of `table`.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows) {
            return Err(Error::Shape(alloc::format!("gather index {bad} >= {}", t.rows)));
        }
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(self.push(out, Op::Gather { table, ids }))
    }

    /// Multi-head scaled dot-product attention over per-sequence row blocks.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, layout: AttnLayout) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let AttnLayout { batch, q_len, k_len, heads, causal } = layout;
        let d = vq.cols;
        if vq.rows != batch * q_len || vk.rows != batch * k_len || vv.rows != batch * k_len || vk.cols != d || vv.cols != d {
            return Err(Error::Shape("attention operand shapes".into()));
        }
        if heads == 0 || d % heads != 0 || (causal && q_len != k_len) {
            return Err(Error::Shape("attention head layout".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut probs = vec![0.0; batch * heads * q_len * k_len];
        let mut out = Mat::zeros(vq.rows, d);
        let mut scores = vec![0.0; k_len];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..q_len {
                    let qi = &vq.row(b * q_len + i)[c0..c0 + dh];
                    let limit = if causal { i + 1 } else { k_len };
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(limit) {
                        *s = dot(qi, &vk.row(b * k_len + j)[c0..c0 + dh]) * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut().take(limit) {
                        *s = libm::exp(*s - max);
                        z += *s;
                    }
                    let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let o = &mut out.row_mut(b * q_len + i)[c0..c0 + dh];
                    for j in 0..limit {
                        let pj = scores[j] / z;
                        p[j] = pj;
                        let vj = &vv.row(b * k_len + j)[c0..c0 + dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += pj * vv;
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::Attention { q, k, v, layout, probs }))
    }

    /// Mean of each consecutive block of `group` rows.
    pub fn mean_pool(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if group == 0 || vx.rows % group != 0 {
            return Err(Error::Shape(alloc::format!("mean pool group {group} for {} rows", vx.rows)));
        }
        let n = vx.rows / group;
        let mut out = Mat::zeros(n, vx.cols);
        for g in 0..n {
            let o = out.row_mut(g);
            for r in 0..group {
                for (a, b) in o.iter_mut().zip(vx.row(g * group + r)) {
                    *a += b;
                }
            }
            for a in o.iter_mut() {
                *a /= group as f64;
            }
        }
        Ok(self.push(out, Op::MeanPool { x, group }))
    }

    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows);
        for r in 0..vx.rows {
            let n = libm::sqrt(vx.row(r).iter().map(|v| v * v).sum::<f64>());
            if n == 0.0 {
                return Err(Error::DegenerateVector);
            }
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        Ok(self.push(out, Op::RowNormalize { x, norms }))
    }

    /// Mean token cross-entropy over unmasked rows.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<Option<usize>>) -> Result<NodeId> {
        let vl = self.value(logits);
        let (loss, probs, count) = losses::softmax_cross_entropy(vl, &targets)?;
        Ok(self.push(Mat::scalar(loss), Op::CrossEntropy { logits, targets, probs, count }))
    }

    /// `mean_i (1 − x_i · target_i)` for unit rows; `target` is constant.
    pub fn cosine_align(&mut self, x: NodeId, target: Mat) -> Result<NodeId> {
        let loss = losses::cosine_alignment(self.value(x), &target)?;
        Ok(self.push(Mat::scalar(loss), Op::CosineAlign { x, target }))
    }

    /// Triplet term `mean_i h(margin − x_i·pos_i + x_i·neg_i)`; `h` is the
    /// hinge when `hinged`, identity otherwise.
    pub fn triplet(&mut self, x: NodeId, pos: Mat, neg: Mat, margin: f64, hinged: bool) -> Result<NodeId> {
        let (loss, active) = losses::triplet_terms(self.value(x), &pos, &neg, margin, hinged)?;
        Ok(self.push(Mat::scalar(loss), Op::Triplet { x, pos, neg, active }))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> Result<NodeId> {
        let mut total = 0.0;
        for &(n, w) in &terms {
            let v = self.value(n);
            if v.shape() != (1, 1) {
                return Err(Error::Shape("weighted_sum expects scalars".into()));
            }
            total += w * v.data[0];
        }
        Ok(self.push(Mat::scalar(total), Op::WeightedSum(terms)))
    }

    /// Back-propagates from scalar `root`; returns one optional gradient per
    /// parameter of the store.
    pub fn backward(&self, root: NodeId) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.ops.len()).map(|_| None).collect();
        grads[root] = Some(Mat::scalar(1.0));
        let mut param_grads: Vec<Option<Mat>> = (0..self.params.len()).map(|_| None).collect();

        fn acc(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.ops[id] {
                Op::Leaf => {}
                Op::Param(p) => param_grads[*p] = Some(g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul_nt(vb));
                    acc(&mut grads, *b, va.matmul_tn(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddBias(x, bias) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *x, g);
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let mut gx = g;
                    for (gv, &v) in gx.data.iter_mut().zip(&vx.data) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = libm::tanh(u);
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gam = self.value(*gamma);
                    let d = g.cols;
                    let mut gg = Mat::zeros(1, d);
                    let mut gbeta = Mat::zeros(1, d);
                    let mut gx = Mat::zeros(g.rows, d);
                    let mut dxh = vec![0.0; d];
                    for r in 0..g.rows {
                        let (gr, xh) = (g.row(r), xhat.row(r));
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            gg.data[j] += gr[j] * xh[j];
                            gbeta.data[j] += gr[j];
                            dxh[j] = gr[j] * gam.data[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xh[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let o = gx.row_mut(r);
                        for j in 0..d {
                            o[j] = rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *x, gx);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Mat::zeros(t.rows, t.cols);
                    for (r, &i) in ids.iter().enumerate() {
                        for (a, b) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Attention { q, k, v, layout, probs } => {
                    let (gq, gk, gv) = self.attention_backward(&g, *q, *k, *v, layout, probs);
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::MeanPool { x, group } => {
                    let vx = self.value(*x);
                    let mut gx = Mat::zeros(vx.rows, vx.cols);
                    for r in 0..vx.rows {
                        for (a, b) in gx.row_mut(r).iter_mut().zip(g.row(r / group)) {
                            *a = b / *group as f64;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::RowNormalize { x, norms } => {
                    let y = &self.values[id];
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let proj = dot(yr, gr);
                        for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * proj) / norms[r];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, targets, probs, count } => {
                    let scale = g.data[0] / *count as f64;
                    let mut gl = Mat::zeros(probs.rows, probs.cols);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for (o, p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                                *o = p * scale;
                            }
                            gl.data[r * probs.cols + t] -= scale;
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::CosineAlign { x, target } => {
                    let scale = -g.data[0] / target.rows as f64;
                    let mut gx = target.clone();
                    gx.data.iter_mut().for_each(|v| *v *= scale);
                    acc(&mut grads, *x, gx);
                }
                Op::Triplet { x, pos, neg, active } => {
                    let scale = g.data[0] / pos.rows as f64;
                    let mut gx = Mat::zeros(pos.rows, pos.cols);
                    for r in 0..pos.rows {
                        if active[r] {
                            for ((o, p), n) in gx.row_mut(r).iter_mut().zip(pos.row(r)).zip(neg.row(r)) {
                                *o = scale * (n - p);
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::WeightedSum(terms) => {
                    for &(n, w) in terms {
                        acc(&mut grads, n, Mat::scalar(w * g.data[0]));
                    }
                }
            }
        }
        param_grads
    }

    fn attention_backward(&self, g: &Mat, q: NodeId, k: NodeId, v: NodeId, layout: &AttnLayout, probs: &[f64]) -> (Mat, Mat, Mat) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let AttnLayout { batch, q_len, k_len, heads, causal } = *layout;
        let d = vq.cols;
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut gq = Mat::zeros(vq.rows, d);
        let mut gk = Mat::zeros(vk.rows, d);
        let mut gv = Mat::zeros(vv.rows, d);
        let mut dp = vec![0.0; k_len];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..q_len {
                    let limit = if causal { i + 1 } else { k_len };
                    let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let go = &g.row(b * q_len + i)[c0..c0 + dh];
                    let mut sum = 0.0;
                    for j in 0..limit {
                        let vj = &vv.row(b * k_len + j)[c0..c0 + dh];
                        dp[j] = dot(go, vj);
                        sum += dp[j] * p[j];
                        let gvj = &mut gv.row_mut(b * k_len + j)[c0..c0 + dh];
                        for (a, o) in gvj.iter_mut().zip(go) {
                            *a += p[j] * o;
                        }
                    }
                    let qi_row = b * q_len + i;
                    for j in 0..limit {
                        let ds = p[j] * (dp[j] - sum) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kr = b * k_len + j;
                        for c in c0..c0 + dh {
                            gq.data[qi_row * d + c] += ds * vk.data[kr * d + c];
                            gk.data[kr * d + c] += ds * vq.data[qi_row * d + c];
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_mat(r: &mut rng::ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat { rows, cols, data: (0..rows * cols).map(|_| rng::normal(r)).collect() }
    }

    /// Central finite differences of `f` with respect to every scalar of
    /// every parameter, compared with the tape gradient.
    fn check(params: &mut ParamStore, f: impl Fn(&mut Tape) -> NodeId) {
        let analytic = {
            let mut t = Tape::new(params);
            let root = f(&mut t);
            t.backward(root)
        };
        let h = 1e-5;
        for p in 0..params.len() {
            for i in 0..params.get(p).data.len() {
                let orig = params.get(p).data[i];
                params.get_mut(p).data[i] = orig + h;
                let up = {
                    let mut t = Tape::new(params);
                    let r = f(&mut t);
                    t.scalar(r)
                };
                params.get_mut(p).data[i] = orig - h;
                let down = {
                    let mut t = Tape::new(params);
                    let r = f(&mut t);
                    t.scalar(r)
                };
                params.get_mut(p).data[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = analytic[p].as_ref().map_or(0.0, |g| g.data[i]);
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
                assert!(err < 1e-4 || (fd - an).abs() < 1e-8, "param {} idx {i}: fd {fd} analytic {an}", params.name(p));
            }
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let mut r = rng::seeded(&[1]);
        let a = rand_mat(&mut r, 3, 4);
        let b = rand_mat(&mut r, 4, 5);
        let c = a.matmul(&b);
        let bt = Mat { rows: 5, cols: 4, data: (0..20).map(|i| b.data[(i % 4) * 5 + i / 4]).collect() };
        let c2 = a.matmul_nt(&bt);
        for (x, y) in c.data.iter().zip(&c2.data) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = Mat { rows: 4, cols: 3, data: (0..12).map(|i| a.data[(i % 3) * 4 + i / 3]).collect() };
        let c3 = at.matmul_tn(&b);
        for (x, y) in c.data.iter().zip(&c3.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_of_dense_ops() {
        let mut r = rng::seeded(&[2]);
        let mut ps = ParamStore::new();
        let x = ps.add("x", rand_mat(&mut r, 4, 6));
        let w = ps.add("w", rand_mat(&mut r, 6, 6));
        let b = ps.add("b", rand_mat(&mut r, 1, 6));
        let g = ps.add("g", rand_mat(&mut r, 1, 6));
        let be = ps.add("be", rand_mat(&mut r, 1, 6));
        let tgt = rand_mat(&mut r, 2, 6);
        check(&mut ps, |t| {
            let (xn, wn, bn, gn, ben) = (t.param(x), t.param(w), t.param(b), t.param(g), t.param(be));
            let h = t.matmul(xn, wn).unwrap();
            let h = t.add_bias(h, bn).unwrap();
            let h = t.gelu(h);
            let h = t.layer_norm(h, gn, ben).unwrap();
            let h = t.add(h, xn).unwrap();
            let p = t.mean_pool(h, 2).unwrap();
            let p = t.row_normalize(p).unwrap();
            let mut tt = tgt.clone();
            for rr in 0..2 {
                let n = libm::sqrt(tt.row(rr).iter().map(|v| v * v).sum::<f64>());
                tt.row_mut(rr).iter_mut().for_each(|v| *v /= n);
            }
            let l1 = t.cosine_align(p, tt).unwrap();
            let ce = t.cross_entropy(h, alloc::vec![Some(1), None, Some(5), Some(0)]).unwrap();
            t.weighted_sum(alloc::vec![(l1, 0.7), (ce, 1.3)]).unwrap()
        });
    }

    #[test]
    fn gradients_of_attention_and_gather() {
        let mut r = rng::seeded(&[3]);
        let mut ps = ParamStore::new();
        let table = ps.add("table", rand_mat(&mut r, 7, 8));
        let wq = ps.add("wq", rand_mat(&mut r, 8, 8));
        let mem = ps.add("mem", rand_mat(&mut r, 6, 8));
        check(&mut ps, |t| {
            let tb = t.param(table);
            let x = t.gather(tb, alloc::vec![1, 3, 3, 0, 6, 2]).unwrap();
            let w = t.param(wq);
            let q = t.matmul(x, w).unwrap();
            let causal = AttnLayout { batch: 2, q_len: 3, k_len: 3, heads: 2, causal: true };
            let a = t.attention(q, x, x, causal).unwrap();
            let m = t.param(mem);
            let cross = AttnLayout { batch: 2, q_len: 3, k_len: 3, heads: 4, causal: false };
            let c = t.attention(a, m, m, cross).unwrap();
            t.cross_entropy(c, alloc::vec![Some(0), Some(7), None, Some(2), Some(3), Some(1)]).unwrap()
        });
    }

    #[test]
    fn gradients_of_triplet() {
        let mut r = rng::seeded(&[4]);
        let mut ps = ParamStore::new();
        let x = ps.add("x", rand_mat(&mut r, 3, 5));
        let unit = |m: Mat| {
            let mut m = m;
            for rr in 0..m.rows {
                let n = libm::sqrt(m.row(rr).iter().map(|v| v * v).sum::<f64>());
                m.row_mut(rr).iter_mut().for_each(|v| *v /= n);
            }
            m
        };
        let pos = unit(rand_mat(&mut r, 3, 5));
        let neg = unit(rand_mat(&mut r, 3, 5));
        for hinged in [true, false] {
            check(&mut ps, |t| {
                let xn = t.param(x);
                let e = t.row_normalize(xn).unwrap();
                t.triplet(e, pos.clone(), neg.clone(), 0.3, hinged).unwrap()
            });
        }
    }

    #[test]
    fn shape_errors() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Mat::zeros(2, 3));
        let mut t = Tape::new(&ps);
        let n = t.param(a);
        assert!(t.matmul(n, n).is_err());
        assert!(t.mean_pool(n, 3).is_err());
        assert!(t.gather(n, alloc::vec![2]).is_err());
        assert!(t.row_normalize(n).is_err());
    }
}
