//! Reverse-mode gradient tape over dense matrices.
//!
//! Operations are recorded in execution order; [`Tape::backward`] walks
//! them in reverse and accumulates gradients for every registered
//! parameter. Parameters that do not contribute to the loss receive exact
//! zeros.

use serde::{Deserialize, Serialize};

use super::{softmax_in_place, Matrix, Real};
use crate::error::{invalid, shape, Result};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a registered parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter registry.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Matrix<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
        }
    }

    pub fn zeros_like(&self) -> Vec<Matrix<T>> {
        self.values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect()
    }
}

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    /// `a + b` where `b`'s rows repeat cyclically over `a`'s rows.
    AddTiled(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    Attention {
        qkv: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
        /// `probs[segment][head]`, each `len x len`.
        probs: Vec<Vec<Matrix<T>>>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Assemble {
        rows: Var,
        token: Var,
        layout: Vec<Option<usize>>,
    },
    MaskedMse {
        pred: Var,
        target: Matrix<T>,
        rows: Vec<usize>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_nodes: Vec<(ParamId, Var)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
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

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[(0, 0)]
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node,
    /// indexed `[segment][head]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<Matrix<T>>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records a parameter; repeated calls for the same id share one node.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_nodes.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(params.get(id).clone(), Op::Param(id));
        self.param_nodes.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x * w + b`, with `w` shaped `in x out` and `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.rows() {
            return Err(shape("linear", wv.rows(), xv.cols()));
        }
        let (rows, out_dim) = (xv.rows(), wv.cols());
        let mut out = Matrix::zeros(rows, out_dim);
        let mut beta = T::zero();
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != (1, out_dim) {
                return Err(shape(
                    "linear bias",
                    format!("1x{out_dim}"),
                    format!("{:?}", bv.shape()),
                ));
            }
            for r in 0..rows {
                out.row_mut(r).copy_from_slice(bv.row(0));
            }
            beta = T::one();
        }
        let (xv, wv) = (self.value(x), self.value(w));
        T::gemm(
            rows,
            xv.cols(),
            out_dim,
            T::one(),
            xv.data(),
            (xv.cols(), 1),
            wv.data(),
            (out_dim, 1),
            beta,
            out.data_mut(),
            (out_dim, 1),
        );
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() || bv.rows() == 0 || av.rows() % bv.rows() != 0 {
            return Err(shape(
                "add_tiled",
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        let mut out = av.clone();
        let br = bv.rows();
        for r in 0..out.rows() {
            for (o, &t) in out.row_mut(r).iter_mut().zip(bv.row(r % br)) {
                *o += t;
            }
        }
        Ok(self.push(out, Op::AddTiled(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Row-wise layer normalization with `1 x C` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).shape() != (1, c) || self.value(beta).shape() != (1, c) {
            return Err(shape(
                "layer_norm",
                format!("1x{c}"),
                format!("{:?}", self.value(gamma).shape()),
            ));
        }
        let eps = T::lit(LN_EPS);
        let cf = T::lit(c as f64);
        let mut xhat = Matrix::zeros(xv.rows(), c);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            for (h, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gamma).row(0), self.value(beta).row(0));
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for ((o, &gg), &bb) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_K));
        let half = T::lit(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = super::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    /// Multi-head scaled dot-product self-attention over independent row
    /// segments.
    ///
    /// `qkv` holds `[q | k | v]` column blocks of width `d` each; every
    /// `(start, len)` segment attends only within itself. Output is
    /// `rows x d` with heads concatenated along columns.
    pub fn attention(&mut self, qkv: Var, heads: usize, segments: &[(usize, usize)]) -> Result<Var> {
        let qv = self.value(qkv);
        if heads == 0 || !qv.cols().is_multiple_of(3 * heads) {
            return Err(shape(
                "attention",
                format!("cols divisible by {}", 3 * heads),
                qv.cols(),
            ));
        }
        let total: usize = segments.iter().map(|s| s.1).sum();
        if total != qv.rows() || segments.iter().any(|s| s.1 == 0) {
            return Err(shape("attention segments", qv.rows(), total));
        }
        let d = qv.cols() / 3;
        let dh = d / heads;
        let stride = 3 * d;
        let alpha = T::one() / T::lit(dh as f64).sqrt();
        let mut out = Matrix::zeros(qv.rows(), d);
        let mut probs = Vec::with_capacity(segments.len());
        let data = qv.data();
        for &(start, len) in segments {
            let mut seg_probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let q_off = start * stride + h * dh;
                let k_off = q_off + d;
                let v_off = q_off + 2 * d;
                let mut p = Matrix::zeros(len, len);
                T::gemm(
                    len,
                    dh,
                    len,
                    alpha,
                    &data[q_off..],
                    (stride, 1),
                    &data[k_off..],
                    (1, stride),
                    T::zero(),
                    p.data_mut(),
                    (len, 1),
                );
                for r in 0..len {
                    softmax_in_place(p.row_mut(r));
                }
                T::gemm(
                    len,
                    len,
                    dh,
                    T::one(),
                    p.data(),
                    (len, 1),
                    &data[v_off..],
                    (stride, 1),
                    T::zero(),
                    &mut out.data_mut()[start * d + h * dh..],
                    (d, 1),
                );
                seg_probs.push(p);
            }
            probs.push(seg_probs);
        }
        out.ensure_finite("attention")?;
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.rows()) {
            return Err(invalid(format!("gather_rows: index {bad} out of {} rows", xv.rows())));
        }
        let out = xv.select_rows(index);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Builds a matrix whose row `i` is `rows[layout[i]]` when
    /// `layout[i]` is `Some`, else the single row of `token`.
    pub fn assemble(&mut self, rows: Var, token: Var, layout: &[Option<usize>]) -> Result<Var> {
        let (rv, tv) = (self.value(rows), self.value(token));
        if tv.rows() != 1 || tv.cols() != rv.cols() {
            return Err(shape(
                "assemble token",
                format!("1x{}", rv.cols()),
                format!("{:?}", tv.shape()),
            ));
        }
        let c = rv.cols();
        let mut out = Matrix::zeros(layout.len(), c);
        for (i, slot) in layout.iter().enumerate() {
            let src = match *slot {
                Some(j) if j < rv.rows() => rv.row(j),
                Some(j) => return Err(invalid(format!("assemble: row {j} out of {}", rv.rows()))),
                None => tv.row(0),
            };
            out.row_mut(i).copy_from_slice(src);
        }
        Ok(self.push(
            out,
            Op::Assemble {
                rows,
                token,
                layout: layout.to_vec(),
            },
        ))
    }

    /// Mean squared error over the selected rows (all columns).
    pub fn masked_mse(&mut self, pred: Var, target: Matrix<T>, rows: &[usize]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(shape(
                "masked_mse",
                format!("{:?}", pv.shape()),
                format!("{:?}", target.shape()),
            ));
        }
        if rows.is_empty() {
            return Err(invalid("masked_mse: no rows selected"));
        }
        let mut acc = T::zero();
        for &r in rows {
            for (&p, &t) in pv.row(r).iter().zip(target.row(r)) {
                acc += (p - t) * (p - t);
            }
        }
        let denom = T::lit((rows.len() * pv.cols()) as f64);
        let out = Matrix::filled(1, 1, acc / denom);
        Ok(self.push(
            out,
            Op::MaskedMse {
                pred,
                target,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Gradients of a scalar node with respect to every parameter in
    /// `params`, aligned with the registry order.
    pub fn backward(&self, loss: Var, params: &ParamSet<T>) -> Result<Vec<Matrix<T>>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(shape("backward", "1x1", format!("{:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        let mut out = params.zeros_like();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let dx = g.matmul_t(self.value(*w))?;
                    let dw = self.value(*x).t_matmul(&g)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, col_sums(&g));
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddTiled(a, b) => {
                    let br = self.value(*b).rows();
                    let mut db = Matrix::zeros(br, g.cols());
                    for r in 0..g.rows() {
                        for (d, &v) in db.row_mut(r % br).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(self.value(*b))?;
                    let db = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).row(0);
                    let c = g.cols();
                    let cf = T::lit(c as f64);
                    let mut dgamma = Matrix::zeros(1, c);
                    let mut dx = Matrix::zeros(g.rows(), c);
                    let mut dxhat = vec![T::zero(); c];
                    for r in 0..g.rows() {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for j in 0..c {
                            dgamma[(0, j)] += gr[j] * hr[j];
                            dxhat[j] = gr[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let k = inv_std[r] / cf;
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = k * (cf * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                    accumulate(&mut grads, *beta, col_sums(&g));
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let (c, k) = (T::lit(GELU_C), T::lit(GELU_K));
                    let half = T::lit(0.5);
                    let three_k = T::lit(3.0 * GELU_K);
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = c * (T::one() + three_k * v * v);
                        *d *= half * (T::one() + t) + half * v * (T::one() - t * t) * dt;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let p = &node.value;
                    let mut dx = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = pr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention {
                    qkv,
                    heads,
                    segments,
                    probs,
                } => {
                    let dqkv = self.attention_backward(*qkv, *heads, segments, probs, &g);
                    accumulate(&mut grads, *qkv, dqkv);
                }
                Op::GatherRows { x, index } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, &src) in index.iter().enumerate() {
                        for (d, &v) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Assemble { rows, token, layout } => {
                    let rv = self.value(*rows);
                    let mut dr = Matrix::zeros(rv.rows(), rv.cols());
                    let mut dt = Matrix::zeros(1, rv.cols());
                    for (i, slot) in layout.iter().enumerate() {
                        let dst = match *slot {
                            Some(j) => dr.row_mut(j),
                            None => dt.row_mut(0),
                        };
                        for (d, &v) in dst.iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *token, dt);
                    accumulate(&mut grads, *rows, dr);
                }
                Op::MaskedMse { pred, target, rows } => {
                    let pv = self.value(*pred);
                    let scale = g[(0, 0)] * T::lit(2.0) / T::lit((rows.len() * pv.cols()) as f64);
                    let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                    for &r in rows {
                        for ((d, &p), &t) in dp.row_mut(r).iter_mut().zip(pv.row(r)).zip(target.row(r)) {
                            *d += scale * (p - t);
                        }
                    }
                    accumulate(&mut grads, *pred, dp);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, Matrix::filled(xv.rows(), xv.cols(), g[(0, 0)]));
                }
            }
        }
        Ok(out)
    }

    fn attention_backward(
        &self,
        qkv: Var,
        heads: usize,
        segments: &[(usize, usize)],
        probs: &[Vec<Matrix<T>>],
        g: &Matrix<T>,
    ) -> Matrix<T> {
        let qv = self.value(qkv);
        let d = qv.cols() / 3;
        let dh = d / heads;
        let stride = 3 * d;
        let alpha = T::one() / T::lit(dh as f64).sqrt();
        let data = qv.data();
        let mut dqkv = Matrix::zeros(qv.rows(), qv.cols());
        for (&(start, len), seg_probs) in segments.iter().zip(probs) {
            for (h, p) in seg_probs.iter().enumerate() {
                let q_off = start * stride + h * dh;
                let k_off = q_off + d;
                let v_off = q_off + 2 * d;
                let o_off = start * d + h * dh;
                // dP = dO V^T
                let mut dp = Matrix::zeros(len, len);
                T::gemm(
                    len,
                    dh,
                    len,
                    T::one(),
                    &g.data()[o_off..],
                    (d, 1),
                    &data[v_off..],
                    (1, stride),
                    T::zero(),
                    dp.data_mut(),
                    (len, 1),
                );
                // dV = P^T dO
                T::gemm(
                    len,
                    len,
                    dh,
                    T::one(),
                    p.data(),
                    (1, len),
                    &g.data()[o_off..],
                    (d, 1),
                    T::one(),
                    &mut dqkv.data_mut()[v_off..],
                    (stride, 1),
                );
                // dS = P * (dP - rowsum(dP * P))
                for r in 0..len {
                    let pr = p.row(r);
                    let dr = dp.row_mut(r);
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot);
                    }
                }
                // dQ = alpha dS K, dK = alpha dS^T Q
                T::gemm(
                    len,
                    len,
                    dh,
                    alpha,
                    dp.data(),
                    (len, 1),
                    &data[k_off..],
                    (stride, 1),
                    T::one(),
                    &mut dqkv.data_mut()[q_off..],
                    (stride, 1),
                );
                T::gemm(
                    len,
                    len,
                    dh,
                    alpha,
                    dp.data(),
                    (1, len),
                    &data[q_off..],
                    (stride, 1),
                    T::one(),
                    &mut dqkv.data_mut()[k_off..],
                    (stride, 1),
                );
            }
        }
        dqkv
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums<T: Real>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}
