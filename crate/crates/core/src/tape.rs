//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A forward pass appends nodes to a [`Tape`]; [`Tape::backward`] replays the
//! tape in reverse and accumulates vector-Jacobian products. Reductions run
//! in a fixed left-to-right order so reruns are bit-identical.
//!
//! Parameters live outside the tape in a [`ParamStore`](crate::param::ParamStore)
//! and are registered once per forward pass; registering the same parameter
//! twice returns the same node, which is how weight tying works: gradient
//! contributions from every use accumulate into one node.

use alloc::vec;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{config_err, degenerate_err, Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// GELU tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
/// The standard transformer activation; constants per the usual approximation.
const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

pub(crate) fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let inner = c0 * (x + c1 * x * x * x);
    half * x * (S::ONE + inner.tanh())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c0 * (x + c1 * x * x * x);
    let t = inner.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c0 * (S::ONE + three * c1 * x * x)
}

enum Op<S> {
    /// Constant or parameter leaf.
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Broadcast a 1-row bias over every row of the input.
    AddBias(NodeId, NodeId),
    Scale(NodeId, S),
    /// Multiply every element by a 1x1 node.
    MulScalar(NodeId, NodeId),
    Recip(NodeId),
    Exp(NodeId),
    Clamp(NodeId, S, S),
    Gelu(NodeId),
    /// Row-wise softmax with max subtraction.
    Softmax(NodeId),
    /// Per-row standardization, then affine by 1-row gain and bias.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: S,
    },
    /// Row-wise division by the Euclidean norm.
    L2NormRows(NodeId),
    /// Column-wise max over consecutive blocks of `block` rows.
    MaxPoolRows(NodeId, usize),
    MeanRows(NodeId),
    SumAll(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    /// Row-wise log-sum-exp, the stable building block for cross-entropy.
    LseRows(NodeId),
    /// Pick one column per row; yields an m x 1 column.
    TakePerRow(NodeId, Vec<usize>),
}

struct Node<S: Scalar> {
    value: Array<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    /// param id -> node, so repeated registration reuses one node.
    param_nodes: Vec<(ParamId, NodeId)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Array<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input data; never receives a gradient.
    pub fn constant(&mut self, value: Array<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that collects a gradient (used directly in tests; models go
    /// through `param`).
    pub fn variable(&mut self, value: Array<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Register a parameter from the store. Frozen parameters enter as
    /// constants: gradients still flow *through* ops that use them, but no
    /// gradient is accumulated *for* them.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        if let Some(&(_, nid)) = self.param_nodes.iter().find(|(pid, _)| *pid == id) {
            return nid;
        }
        let p = store.get(id);
        let nid = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.param_nodes.push((id, nid));
        nid
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = crate::array::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut out = Array::zeros(n, m);
        for i in 0..m {
            for j in 0..n {
                *out.at_mut(j, i) = x.at(i, j);
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.shape() != xb.shape() {
            return Err(config_err!(
                "add shapes differ: {:?} vs {:?}",
                xa.shape(),
                xb.shape()
            ));
        }
        let data = xa
            .data()
            .iter()
            .zip(xb.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let v = Array::from_vec(xa.rows(), xa.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.shape() != xb.shape() {
            return Err(config_err!(
                "sub shapes differ: {:?} vs {:?}",
                xa.shape(),
                xb.shape()
            ));
        }
        let data = xa
            .data()
            .iter()
            .zip(xb.data())
            .map(|(&p, &q)| p - q)
            .collect();
        let v = Array::from_vec(xa.rows(), xa.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// `a` is m x d, `bias` is 1 x d; the bias row is added to every row.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xa, xb) = (self.value(a), self.value(bias));
        if xb.rows() != 1 || xb.cols() != xa.cols() {
            return Err(config_err!(
                "bias shape {:?} does not broadcast over {:?}",
                xb.shape(),
                xa.shape()
            ));
        }
        let d = xa.cols();
        let mut v = xa.clone();
        for r in 0..v.rows() {
            for c in 0..d {
                *v.at_mut(r, c) += xb.at(0, c);
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(v, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::Usage("mul_scalar needs a 1x1 multiplier".into()));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(a).map(|x| x * sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(v, Op::MulScalar(a, s), rg))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.recip());
        let rg = self.rg(a);
        self.push(v, Op::Recip(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    /// Clamp to [lo, hi]. Gradient passes where the input lies inside the
    /// closed interval and is zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: S, hi: S) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu_scalar);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise softmax, computed with max subtraction. Rows sum to 1.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut v = Array::zeros(m, n);
        for r in 0..m {
            let row = x.row_slice(r);
            let mx = row.iter().fold(row[0], |acc, &e| acc.max(e));
            let mut sum = S::ZERO;
            for c in 0..n {
                let e = (row[c] - mx).exp();
                *v.at_mut(r, c) = e;
                sum += e;
            }
            for c in 0..n {
                *v.at_mut(r, c) /= sum;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::Softmax(a), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: S) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(config_err!(
                "layer_norm affine shapes {:?}/{:?} do not match width {}",
                gv.shape(),
                bv.shape(),
                d
            ));
        }
        let m = xv.rows();
        let mut v = Array::zeros(m, d);
        let dn = S::from_usize(d);
        for r in 0..m {
            let row = xv.row_slice(r);
            let mean = row.iter().fold(S::ZERO, |a, &e| a + e) / dn;
            let var = row
                .iter()
                .fold(S::ZERO, |a, &e| a + (e - mean) * (e - mean))
                / dn;
            let inv = (var + eps).sqrt().recip();
            for c in 0..d {
                let xn = (row[c] - mean) * inv;
                *v.at_mut(r, c) = xn * gv.at(0, c) + bv.at(0, c);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    /// Divide every row by its Euclidean norm. A zero row is degenerate.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut v = Array::zeros(m, n);
        for r in 0..m {
            let row = x.row_slice(r);
            let norm = row.iter().fold(S::ZERO, |acc, &e| acc + e * e).sqrt();
            if !(norm > S::ZERO) {
                return Err(degenerate_err!("l2_normalize of a zero vector (row {r})"));
            }
            for c in 0..n {
                *v.at_mut(r, c) = row[c] / norm;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(v, Op::L2NormRows(a), rg))
    }

    /// Column-wise max over consecutive blocks of `block` rows:
    /// (g*block) x d -> g x d. Ties route the gradient to the lowest row.
    pub fn max_pool_rows(&mut self, a: NodeId, block: usize) -> Result<NodeId> {
        let x = self.value(a);
        let (m, d) = x.shape();
        if block == 0 || m % block != 0 {
            return Err(config_err!(
                "max_pool_rows: {m} rows not divisible by block {block}"
            ));
        }
        let g = m / block;
        let mut v = Array::zeros(g, d);
        for gi in 0..g {
            for c in 0..d {
                let mut best = x.at(gi * block, c);
                for r in 1..block {
                    let e = x.at(gi * block + r, c);
                    if e > best {
                        best = e;
                    }
                }
                *v.at_mut(gi, c) = best;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(v, Op::MaxPoolRows(a, block), rg))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, d) = x.shape();
        let mut v = Array::zeros(1, d);
        let mn = S::from_usize(m);
        for c in 0..d {
            let mut acc = S::ZERO;
            for r in 0..m {
                acc += x.at(r, c);
            }
            *v.at_mut(0, c) = acc / mn;
        }
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().fold(S::ZERO, |acc, &e| acc + e);
        let rg = self.rg(a);
        self.push(Array::scalar(total), Op::SumAll(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of nothing".into()));
        }
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.cols() != d {
                return Err(config_err!(
                    "concat_rows width mismatch: {} vs {}",
                    x.cols(),
                    d
                ));
            }
            rows += x.rows();
            data.extend_from_slice(x.data());
        }
        let v = Array::from_vec(rows, d, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        let (m, d) = x.shape();
        if start + len > m {
            return Err(config_err!(
                "slice_rows {start}..{} out of {m} rows",
                start + len
            ));
        }
        let data = x.data()[start * d..(start + len) * d].to_vec();
        let v = Array::from_vec(len, d, data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::SliceRows(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of nothing".into()));
        }
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Array::zeros(m, total);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            if x.rows() != m {
                return Err(config_err!(
                    "concat_cols row mismatch: {} vs {}",
                    x.rows(),
                    m
                ));
            }
            for r in 0..m {
                for c in 0..x.cols() {
                    *v.at_mut(r, off + c) = x.at(r, c);
                }
            }
            off += x.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        let (m, d) = x.shape();
        if start + len > d {
            return Err(config_err!(
                "slice_cols {start}..{} out of {d} cols",
                start + len
            ));
        }
        let mut v = Array::zeros(m, len);
        for r in 0..m {
            for c in 0..len {
                *v.at_mut(r, c) = x.at(r, start + c);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(v, Op::SliceCols(a, start), rg))
    }

    /// Row-wise log-sum-exp (stable): m x n -> m x 1.
    pub fn lse_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut v = Array::zeros(m, 1);
        for r in 0..m {
            let row = x.row_slice(r);
            let mx = row.iter().fold(row[0], |acc, &e| acc.max(e));
            let mut sum = S::ZERO;
            for c in 0..n {
                sum += (row[c] - mx).exp();
            }
            *v.at_mut(r, 0) = mx + sum.ln();
        }
        let rg = self.rg(a);
        self.push(v, Op::LseRows(a), rg)
    }

    /// Pick element `idx[r]` from each row r: m x n -> m x 1.
    pub fn take_per_row(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let x = self.value(a);
        let (m, n) = x.shape();
        if idx.len() != m {
            return Err(Error::Usage("take_per_row index length != rows".into()));
        }
        let mut v = Array::zeros(m, 1);
        for r in 0..m {
            if idx[r] >= n {
                return Err(Error::Usage("take_per_row index out of range".into()));
            }
            *v.at_mut(r, 0) = x.at(r, idx[r]);
        }
        let rg = self.rg(a);
        Ok(self.push(v, Op::TakePerRow(a, idx.to_vec()), rg))
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; use
    /// [`Tape::accumulate_param_grads`] to fold them into the store.
    /// Calling backward twice and accumulating both results adds up, per the
    /// documented contract; the training loop resets grads each step.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<S>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(
                "backward needs a scalar (1x1) loss node".into(),
            ));
        }
        let mut grads: Vec<Option<Array<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array::scalar(S::ONE));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Array<S>>], id: NodeId, delta: Array<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += *dv;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Array<S>, grads: &mut [Option<Array<S>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.rg(*a) {
                    // dA = dC B^T
                    let (m, k) = av.shape();
                    let n = bv.cols();
                    let mut da = Array::zeros(m, k);
                    for r in 0..m {
                        for p in 0..k {
                            let mut acc = S::ZERO;
                            for c in 0..n {
                                acc += g.at(r, c) * bv.at(p, c);
                            }
                            *da.at_mut(r, p) = acc;
                        }
                    }
                    self.add_grad(grads, *a, da);
                }
                if self.rg(*b) {
                    // dB = A^T dC
                    let (m, k) = av.shape();
                    let n = bv.cols();
                    let mut db = Array::zeros(k, n);
                    for r in 0..m {
                        for p in 0..k {
                            let a_rp = av.at(r, p);
                            for c in 0..n {
                                *db.at_mut(p, c) += a_rp * g.at(r, c);
                            }
                        }
                    }
                    self.add_grad(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = g.shape();
                let mut da = Array::zeros(n, m);
                for r in 0..m {
                    for c in 0..n {
                        *da.at_mut(c, r) = g.at(r, c);
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.map(|v| -v));
            }
            Op::AddBias(a, bias) => {
                self.add_grad(grads, *a, g.clone());
                if self.rg(*bias) {
                    let (m, d) = g.shape();
                    let mut db = Array::zeros(1, d);
                    for c in 0..d {
                        let mut acc = S::ZERO;
                        for r in 0..m {
                            acc += g.at(r, c);
                        }
                        *db.at_mut(0, c) = acc;
                    }
                    self.add_grad(grads, *bias, db);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.add_grad(grads, *a, g.map(|v| v * c));
            }
            Op::MulScalar(a, s) => {
                let sv = self.nodes[s.0].value.data()[0];
                if self.rg(*a) {
                    self.add_grad(grads, *a, g.map(|v| v * sv));
                }
                if self.rg(*s) {
                    let av = &self.nodes[a.0].value;
                    let mut acc = S::ZERO;
                    for (gv, xv) in g.data().iter().zip(av.data()) {
                        acc += *gv * *xv;
                    }
                    self.add_grad(grads, *s, Array::scalar(acc));
                }
            }
            Op::Recip(a) => {
                let av = &self.nodes[a.0].value;
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &xv)| -gv / (xv * xv))
                    .collect();
                let da = Array::from_vec(g.rows(), g.cols(), data).expect("shape");
                self.add_grad(grads, *a, da);
            }
            Op::Exp(a) => {
                let yv = &self.nodes[i].value;
                let data = g
                    .data()
                    .iter()
                    .zip(yv.data())
                    .map(|(&gv, &y)| gv * y)
                    .collect();
                let da = Array::from_vec(g.rows(), g.cols(), data).expect("shape");
                self.add_grad(grads, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let av = &self.nodes[a.0].value;
                let (lo, hi) = (*lo, *hi);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { S::ZERO })
                    .collect();
                let da = Array::from_vec(g.rows(), g.cols(), data).expect("shape");
                self.add_grad(grads, *a, da);
            }
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &xv)| gv * gelu_grad_scalar(xv))
                    .collect();
                let da = Array::from_vec(g.rows(), g.cols(), data).expect("shape");
                self.add_grad(grads, *a, da);
            }
            Op::Softmax(a) => {
                // dx = y * (dy - sum(dy * y)) per row
                let y = &self.nodes[i].value;
                let (m, n) = y.shape();
                let mut da = Array::zeros(m, n);
                for r in 0..m {
                    let mut dot = S::ZERO;
                    for c in 0..n {
                        dot += g.at(r, c) * y.at(r, c);
                    }
                    for c in 0..n {
                        *da.at_mut(r, c) = y.at(r, c) * (g.at(r, c) - dot);
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let (m, d) = xv.shape();
                let dn = S::from_usize(d);
                let mut dx = Array::zeros(m, d);
                let mut dgain = Array::zeros(1, d);
                let mut dbias = Array::zeros(1, d);
                for r in 0..m {
                    let row = xv.row_slice(r);
                    let mean = row.iter().fold(S::ZERO, |a, &e| a + e) / dn;
                    let var = row
                        .iter()
                        .fold(S::ZERO, |a, &e| a + (e - mean) * (e - mean))
                        / dn;
                    let inv = (var + *eps).sqrt().recip();
                    // h = g*dy; dx = inv * (h - mean(h) - xhat * mean(h*xhat))
                    let mut mean_h = S::ZERO;
                    let mut mean_hx = S::ZERO;
                    for c in 0..d {
                        let xn = (row[c] - mean) * inv;
                        let h = g.at(r, c) * gv.at(0, c);
                        mean_h += h;
                        mean_hx += h * xn;
                        *dgain.at_mut(0, c) += g.at(r, c) * xn;
                        *dbias.at_mut(0, c) += g.at(r, c);
                    }
                    mean_h /= dn;
                    mean_hx /= dn;
                    for c in 0..d {
                        let xn = (row[c] - mean) * inv;
                        let h = g.at(r, c) * gv.at(0, c);
                        *dx.at_mut(r, c) = inv * (h - mean_h - xn * mean_hx);
                    }
                }
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *gain, dgain);
                self.add_grad(grads, *bias, dbias);
            }
            Op::L2NormRows(a) => {
                // y = x / |x|; dx = (dy - y (dy . y)) / |x|
                let xv = &self.nodes[a.0].value;
                let yv = &self.nodes[i].value;
                let (m, n) = xv.shape();
                let mut da = Array::zeros(m, n);
                for r in 0..m {
                    let norm = xv
                        .row_slice(r)
                        .iter()
                        .fold(S::ZERO, |acc, &e| acc + e * e)
                        .sqrt();
                    let mut dot = S::ZERO;
                    for c in 0..n {
                        dot += g.at(r, c) * yv.at(r, c);
                    }
                    for c in 0..n {
                        *da.at_mut(r, c) = (g.at(r, c) - yv.at(r, c) * dot) / norm;
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::MaxPoolRows(a, block) => {
                let xv = &self.nodes[a.0].value;
                let (m, d) = xv.shape();
                let block = *block;
                let mut da = Array::zeros(m, d);
                for gi in 0..m / block {
                    for c in 0..d {
                        let mut best_r = 0usize;
                        let mut best = xv.at(gi * block, c);
                        for r in 1..block {
                            let e = xv.at(gi * block + r, c);
                            if e > best {
                                best = e;
                                best_r = r;
                            }
                        }
                        *da.at_mut(gi * block + best_r, c) += g.at(gi, c);
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::MeanRows(a) => {
                let (m, d) = self.nodes[a.0].value.shape();
                let mn = S::from_usize(m);
                let mut da = Array::zeros(m, d);
                for r in 0..m {
                    for c in 0..d {
                        *da.at_mut(r, c) = g.at(0, c) / mn;
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::SumAll(a) => {
                let (m, d) = self.nodes[a.0].value.shape();
                let gv = g.data()[0];
                self.add_grad(grads, *a, Array::filled(m, d, gv));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.nodes[p.0].value.rows();
                    if self.rg(p) {
                        let d = g.cols();
                        let data = g.data()[start * d..(start + rows) * d].to_vec();
                        let dp = Array::from_vec(rows, d, data).expect("shape");
                        self.add_grad(grads, p, dp);
                    }
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let (m, d) = self.nodes[a.0].value.shape();
                let mut da = Array::zeros(m, d);
                for r in 0..g.rows() {
                    for c in 0..d {
                        *da.at_mut(start + r, c) = g.at(r, c);
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (m, cols) = self.nodes[p.0].value.shape();
                    if self.rg(p) {
                        let mut dp = Array::zeros(m, cols);
                        for r in 0..m {
                            for c in 0..cols {
                                *dp.at_mut(r, c) = g.at(r, start + c);
                            }
                        }
                        self.add_grad(grads, p, dp);
                    }
                    start += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, d) = self.nodes[a.0].value.shape();
                let mut da = Array::zeros(m, d);
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        *da.at_mut(r, start + c) = g.at(r, c);
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::LseRows(a) => {
                // d lse / dx = softmax(x) row-wise
                let xv = &self.nodes[a.0].value;
                let (m, n) = xv.shape();
                let mut da = Array::zeros(m, n);
                for r in 0..m {
                    let row = xv.row_slice(r);
                    let mx = row.iter().fold(row[0], |acc, &e| acc.max(e));
                    let mut sum = S::ZERO;
                    for c in 0..n {
                        sum += (row[c] - mx).exp();
                    }
                    for c in 0..n {
                        *da.at_mut(r, c) = g.at(r, 0) * (row[c] - mx).exp() / sum;
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::TakePerRow(a, idx) => {
                let (m, n) = self.nodes[a.0].value.shape();
                let mut da = Array::zeros(m, n);
                for r in 0..m {
                    *da.at_mut(r, idx[r]) = g.at(r, 0);
                }
                self.add_grad(grads, *a, da);
            }
        }
    }

    /// Fold node gradients into `Parameter.grad` for every registered,
    /// non-frozen parameter. Accumulates (+=).
    pub fn accumulate_param_grads(&self, grads: &Gradients<S>, store: &mut ParamStore<S>) {
        for &(pid, nid) in &self.param_nodes {
            if store.get(pid).frozen {
                continue;
            }
            if let Some(g) = &grads.grads[nid.0] {
                let p = store.get_mut(pid);
                for (pg, gv) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *pg += *gv;
                }
            }
        }
    }
}

pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Array<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Array<S>> {
        self.grads[id.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, flatten_trainable_grads, max_rel_error};
    use crate::param::{Decay, ParamStore};
    use crate::rng::Rng;

    fn arr(rows: usize, cols: usize, data: &[f64]) -> Array<f64> {
        Array::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.variable(arr(1, 3, &[2.0, -1.0, 5.0]));
        let s = t.sum_all(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient_is_two_p() {
        let mut t: Tape<f64> = Tape::new();
        let p = t.variable(arr(1, 3, &[1.0, -2.0, 3.0]));
        let pt = t.transpose(p);
        let sq = t.matmul(p, pt).unwrap();
        let loss = t.sum_all(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_uniform_on_equal_input() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(arr(2, 4, &[3.0, 3.0, 3.0, 3.0, 1.0, 2.0, 3.0, 4.0]));
        let y = t.softmax(x);
        let v = t.value(y);
        for c in 0..4 {
            assert!((v.at(0, c) - 0.25).abs() < 1e-15);
        }
        let row1: f64 = v.row_slice(1).iter().sum();
        assert!((row1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(arr(1, 3, &[1.0, 2.0, 3.0]));
        let b = t.constant(arr(1, 3, &[1001.0, 1002.0, 1003.0]));
        let ya = t.softmax(a);
        let yb = t.softmax(b);
        for c in 0..3 {
            assert!((t.value(ya).at(0, c) - t.value(yb).at(0, c)).abs() < 1e-12);
            assert!(t.value(yb).at(0, c).is_finite());
        }
    }

    #[test]
    fn layer_norm_unit_affine_standardizes() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(arr(1, 2, &[1.0, 3.0]));
        let g = t.constant(arr(1, 2, &[1.0, 1.0]));
        let b = t.constant(arr(1, 2, &[0.0, 0.0]));
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        let v = t.value(y);
        assert!((v.at(0, 0) + 1.0).abs() < 1e-5);
        assert!((v.at(0, 1) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(arr(1, 2, &[3.0, 4.0]));
        let y = t.l2_normalize(x).unwrap();
        assert!((t.value(y).at(0, 0) - 0.6).abs() < 1e-15);
        assert!((t.value(y).at(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_row_is_degenerate() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(arr(1, 2, &[0.0, 0.0]));
        assert!(matches!(
            t.l2_normalize(x),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn matmul_known_case() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(arr(1, 2, &[1.0, 2.0]));
        let b = t.constant(arr(2, 1, &[3.0, 4.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.variable(arr(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn max_pool_ties_route_to_lowest_row() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.variable(arr(2, 1, &[5.0, 5.0]));
        let y = t.max_pool_rows(x, 2).unwrap();
        let s = t.sum_all(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn clamp_gradient_zero_outside_interval() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.variable(arr(1, 3, &[-2.0, 0.5, 2.0]));
        let y = t.clamp(x, -1.0, 1.0);
        let s = t.sum_all(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn param_node_reused_and_grads_accumulate_across_uses() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store
            .register("w", arr(1, 1, &[3.0]), Decay::Apply)
            .unwrap();
        let mut t: Tape<f64> = Tape::new();
        let n1 = t.param(&store, w);
        let n2 = t.param(&store, w);
        assert_eq!(n1, n2);
        // loss = w*w (as two uses of the same node) => dL/dw = 2w = 6
        let prod = t.mul_scalar(n1, n2).unwrap();
        let loss = t.sum_all(prod);
        let g = t.backward(loss).unwrap();
        t.accumulate_param_grads(&g, &mut store);
        assert_eq!(store.get(w).grad.data(), &[6.0]);
    }

    #[test]
    fn frozen_param_gets_no_grad_but_grad_flows_through() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.register_frozen("w", arr(1, 1, &[2.0])).unwrap();
        let v = store
            .register("v", arr(1, 1, &[5.0]), Decay::Apply)
            .unwrap();
        let mut t: Tape<f64> = Tape::new();
        let wn = t.param(&store, w);
        let vn = t.param(&store, v);
        let prod = t.mul_scalar(wn, vn).unwrap();
        let loss = t.sum_all(prod);
        let g = t.backward(loss).unwrap();
        t.accumulate_param_grads(&g, &mut store);
        assert_eq!(store.get(w).grad.data(), &[0.0]);
        // dL/dv = w = 2
        assert_eq!(store.get(v).grad.data(), &[2.0]);
    }

    /// Two-layer MLP with every op family in the path; analytic gradients
    /// must match central differences to high accuracy in 64-bit.
    #[test]
    fn mlp_matches_finite_differences() {
        let mut rng = Rng::from_seed(7);
        let mut store: ParamStore<f64> = ParamStore::new();
        let w1 = store
            .register("w1", Array::trunc_normal(3, 4, 0.5, &mut rng), Decay::Apply)
            .unwrap();
        let b1 = store
            .register("b1", Array::trunc_normal(1, 4, 0.5, &mut rng), Decay::Exclude)
            .unwrap();
        let g1 = store
            .register("g1", Array::filled(1, 4, 1.1), Decay::Exclude)
            .unwrap();
        let be1 = store
            .register("be1", Array::trunc_normal(1, 4, 0.1, &mut rng), Decay::Exclude)
            .unwrap();
        let w2 = store
            .register("w2", Array::trunc_normal(4, 2, 0.5, &mut rng), Decay::Apply)
            .unwrap();
        let x = Array::trunc_normal(5, 3, 1.0, &mut rng);

        let fwd = |store: &ParamStore<f64>, t: &mut Tape<f64>| -> Result<NodeId> {
            let xn = t.constant(x.clone());
            let w1n = t.param(store, w1);
            let b1n = t.param(store, b1);
            let g1n = t.param(store, g1);
            let be1n = t.param(store, be1);
            let w2n = t.param(store, w2);
            let h = t.matmul(xn, w1n)?;
            let h = t.add_bias(h, b1n)?;
            let h = t.gelu(h);
            let h = t.layer_norm(h, g1n, be1n, 1e-5)?;
            let h = t.softmax(h);
            let o = t.matmul(h, w2n)?;
            let o = t.l2_normalize(o)?;
            Ok(t.sum_all(o))
        };

        store.zero_grads();
        let mut t: Tape<f64> = Tape::new();
        let loss = fwd(&store, &mut t).unwrap();
        let g = t.backward(loss).unwrap();
        t.accumulate_param_grads(&g, &mut store);
        let got = flatten_trainable_grads(&store);

        let want = finite_diff_grad(&mut store, 1e-6, |s| {
            let mut t: Tape<f64> = Tape::new();
            let l = fwd(s, &mut t)?;
            Ok(t.value(l).data()[0])
        })
        .unwrap();

        let err = max_rel_error(&got, &want, 1e-6);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn concat_slice_roundtrip_gradients() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.variable(arr(1, 2, &[1.0, 2.0]));
        let b = t.variable(arr(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let cat = t.concat_rows(&[a, b]).unwrap();
        let sl = t.slice_rows(cat, 1, 2).unwrap();
        let s = t.sum_all(sl);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);

        let mut t: Tape<f64> = Tape::new();
        let a = t.variable(arr(2, 1, &[1.0, 2.0]));
        let b = t.variable(arr(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let cat = t.concat_cols(&[a, b]).unwrap();
        let sl = t.slice_cols(cat, 0, 1).unwrap();
        let s = t.sum_all(sl);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn lse_and_take_build_cross_entropy() {
        // -log softmax(x)[target] via lse - take
        let mut t: Tape<f64> = Tape::new();
        let x = t.variable(arr(1, 3, &[1.0, 2.0, 3.0]));
        let lse = t.lse_rows(x);
        let picked = t.take_per_row(x, &[2]).unwrap();
        let nll = t.sub(lse, picked).unwrap();
        let loss = t.sum_all(nll);
        let lv = t.value(loss).data()[0];
        let want = -( (3.0f64 - { let m = 3.0f64; m }).exp()
            / ((1.0f64 - 3.0).exp() + (2.0f64 - 3.0).exp() + 1.0))
            .ln();
        assert!((lv - want).abs() < 1e-12);
        let g = t.backward(loss).unwrap();
        // gradient = softmax(x) - onehot(2)
        let sm2 = 1.0 / ((-2.0f64).exp() + (-1.0f64).exp() + 1.0);
        assert!((g.get(x).unwrap().at(0, 2) - (sm2 - 1.0)).abs() < 1e-12);
    }
}
