//! Reverse-mode differentiation over a tape of dense matrix operations.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for the parameters that were read.
//! Derivatives with respect to a network input are built as ordinary tape
//! operations (see [`super::dual`]), so they can themselves be
//! back-propagated.

use super::tensor::{matmul, matmul_nt, matmul_tn, sigmoid, softplus};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    MaskMul(Var, Tensor),
    Softplus(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    SumAll(Var),
    SumCols(Var),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Parameter gradients produced by one backward pass.
pub struct ParamGrads(Vec<(ParamId, Tensor)>);

impl ParamGrads {
    pub fn accumulate(self, store: &mut ParamStore) {
        for (id, g) in self.0 {
            store.get_mut(id).grad.add_assign(&g);
        }
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape {
        op,
        detail: format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1),
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            params: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated reads share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param_by_id(id))
    }

    pub fn param_by_id(&mut self, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(self.store.get(id).value.clone(), Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    /// Fails with `label` if `v` holds a NaN or infinity.
    pub fn checked(&self, v: Var, label: &str) -> Result<Var> {
        if self.value(v).all_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(label.to_string()))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let val = matmul(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(val, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let val = self.value(a).zip_map(self.value(b), f);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(val, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a + row`, broadcasting a `1 x C` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(shape_err("add_row", sa, sr));
        }
        let mut val = self.value(a).clone();
        let r = &self.value(row).data;
        for chunk in val.data.chunks_mut(sa.1.max(1)) {
            for (x, b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(val, Op::AddRow(a, row), ng))
    }

    /// Repeats a `1 x C` row `rows` times.
    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Result<Var> {
        let s = self.shape(row);
        if s.0 != 1 {
            return Err(shape_err("broadcast_rows", s, (1, s.1)));
        }
        let r = &self.value(row).data;
        let mut data = Vec::with_capacity(rows * s.1);
        for _ in 0..rows {
            data.extend_from_slice(r);
        }
        let val = Tensor {
            rows,
            cols: s.1,
            data,
        };
        let ng = self.needs(row);
        Ok(self.push(val, Op::BroadcastRows(row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let val = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(val, Op::Scale(a, s), ng)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let val = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(val, Op::Shift(a), ng)
    }

    /// Rectifier; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let val = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(val, Op::Relu(a), ng)
    }

    /// `[a > 0]` as a constant 0/1 tensor.
    pub fn step_mask(&self, a: Var) -> Tensor {
        self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Elementwise product with a constant.
    pub fn mask_mul(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let sa = self.shape(a);
        if sa != mask.shape() {
            return Err(shape_err("mask_mul", sa, mask.shape()));
        }
        let val = self.value(a).zip_map(&mask, |x, m| x * m);
        let ng = self.needs(a);
        Ok(self.push(val, Op::MaskMul(a, mask), ng))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let val = self.value(a).map(softplus);
        let ng = self.needs(a);
        self.push(val, Op::Softplus(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let val = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(val, Op::Sigmoid(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let val = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(val, Op::Log(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let val = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(val, Op::Exp(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let val = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(val, Op::Square(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let val = Tensor::scalar(self.value(a).data.iter().sum());
        let ng = self.needs(a);
        self.push(val, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `R x C -> R x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows).map(|r| t.row_slice(r).iter().sum()).collect();
        let val = Tensor::column(data);
        let ng = self.needs(a);
        self.push(val, Op::SumCols(a), ng)
    }

    /// Selects rows by index (repeats allowed); also serves as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("row {bad} of {}", t.rows),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in &idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let val = Tensor {
            rows: idx.len(),
            cols: t.cols,
            data,
        };
        let ng = self.needs(a);
        Ok(self.push(val, Op::GatherRows(a, idx), ng))
    }

    /// `out[r] = a[r, idx[r]]`, giving an `R x 1` column.
    pub fn pick_cols(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if idx.len() != t.rows || idx.iter().any(|&c| c >= t.cols) {
            return Err(Error::Shape {
                op: "pick_cols",
                detail: format!("{} indices for {}x{}", idx.len(), t.rows, t.cols),
            });
        }
        let data = idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let val = Tensor::column(data);
        let ng = self.needs(a);
        Ok(self.push(val, Op::PickCols(a, idx), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(bad)));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let val = Tensor { rows, cols, data };
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(val, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("{start}+{len} of {} columns", t.cols),
            });
        }
        let mut data = Vec::with_capacity(t.rows * len);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let val = Tensor {
            rows: t.rows,
            cols: len,
            data,
        };
        let ng = self.needs(a);
        Ok(self.push(val, Op::SliceCols(a, start), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut val = t.clone();
        for chunk in val.data.chunks_mut(t.cols.max(1)) {
            softmax_in_place(chunk);
        }
        let ng = self.needs(a);
        self.push(val, Op::SoftmaxRows(a), ng)
    }

    /// Scaled dot-product attention, `softmax(q kᵀ / sqrt(d_k)) v`. With
    /// `causal`, query `i` only attends to keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.1 != sk.1 || sk.0 != sv.0 || (causal && sq.0 != sk.0) {
            return Err(shape_err("attention", sq, sk));
        }
        let scale = 1.0 / (sq.1 as f64).sqrt();
        let mut probs = matmul_nt(self.value(q), self.value(k));
        let n_keys = sk.0;
        for i in 0..sq.0 {
            let row = &mut probs.data[i * n_keys..(i + 1) * n_keys];
            let visible = if causal { i + 1 } else { n_keys };
            row.iter_mut().for_each(|s| *s *= scale);
            softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|s| *s = 0.0);
        }
        let val = matmul(&probs, self.value(v));
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            val,
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            },
            ng,
        ))
    }

    /// `x · w + b` with `w: in x out`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Back-propagates from the scalar `loss`, consuming the graph.
    pub fn backward(self, loss: Var) -> Result<ParamGrads> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("backward", self.shape(loss), (1, 1)));
        }
        let mut grads = self.gradients(loss, 1.0);
        Ok(ParamGrads(
            self.params
                .iter()
                .filter_map(|&(id, v)| grads[v.0].take().map(|g| (id, g)))
                .collect(),
        ))
    }

    /// Gradient of `seed * loss` with respect to every node.
    fn gradients(&self, loss: Var, seed: f64) -> Vec<Option<Tensor>> {
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(seed));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let acc = |grads: &mut Vec<Option<Tensor>>, v: Var, t: Tensor| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, matmul_nt(&g, self.value(*b)));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, matmul_tn(self.value(*a), &g));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.zip_map(bv, |x, y| x / y));
                    }
                    if self.needs(*b) {
                        // d(a/b)/db = -(a/b)/b
                        let q = &node.value;
                        let gb = Tensor {
                            rows: g.rows,
                            cols: g.cols,
                            data: g
                                .data
                                .iter()
                                .zip(&q.data)
                                .zip(&bv.data)
                                .map(|((gx, qx), bx)| -gx * qx / bx)
                                .collect(),
                        };
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        acc(&mut grads, *row, col_sums(&g));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::BroadcastRows(a) => acc(&mut grads, *a, col_sums(&g)),
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Shift(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let gi = g.zip_map(self.value(*a), |x, z| if z > 0.0 { x } else { 0.0 });
                    acc(&mut grads, *a, gi);
                }
                Op::MaskMul(a, m) => acc(&mut grads, *a, g.zip_map(m, |x, y| x * y)),
                Op::Softplus(a) => {
                    let gi = g.zip_map(self.value(*a), |x, z| x * sigmoid(z));
                    acc(&mut grads, *a, gi);
                }
                Op::Sigmoid(a) => {
                    let gi = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                    acc(&mut grads, *a, gi);
                }
                Op::Log(a) => acc(&mut grads, *a, g.zip_map(self.value(*a), |x, z| x / z)),
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Square(a) => {
                    acc(&mut grads, *a, g.zip_map(self.value(*a), |x, z| 2.0 * x * z))
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::filled(r, c, g.data[0]));
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(*a);
                    let mut t = Tensor::zeros(r, c);
                    for (row, gv) in t.data.chunks_mut(c.max(1)).zip(&g.data) {
                        row.iter_mut().for_each(|x| *x = *gv);
                    }
                    acc(&mut grads, *a, t);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut t = Tensor::zeros(r, c);
                    for (gr, &src) in idx.iter().enumerate() {
                        let dst = &mut t.data[src * c..(src + 1) * c];
                        for (d, x) in dst.iter_mut().zip(g.row_slice(gr)) {
                            *d += x;
                        }
                    }
                    acc(&mut grads, *a, t);
                }
                Op::PickCols(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut t = Tensor::zeros(r, c);
                    for (row, &col) in idx.iter().enumerate() {
                        t.data[row * c + col] += g.data[row];
                    }
                    acc(&mut grads, *a, t);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        if self.needs(p) {
                            let mut t = Tensor::zeros(r, c);
                            for row in 0..r {
                                t.data[row * c..(row + 1) * c]
                                    .copy_from_slice(&g.row_slice(row)[start..start + c]);
                            }
                            acc(&mut grads, p, t);
                        }
                        start += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut t = Tensor::zeros(r, c);
                    let w = g.cols;
                    for row in 0..r {
                        t.data[row * c + start..row * c + start + w].copy_from_slice(g.row_slice(row));
                    }
                    acc(&mut grads, *a, t);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut t = g.clone();
                    for r in 0..y.rows {
                        let yr = y.row_slice(r);
                        let gr = &mut t.data[r * y.cols..(r + 1) * y.cols];
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (x, yv) in gr.iter_mut().zip(yr) {
                            *x = yv * (*x - s);
                        }
                    }
                    acc(&mut grads, *a, t);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    scale,
                    probs,
                } => {
                    let vv = self.value(*v);
                    if self.needs(*v) {
                        acc(&mut grads, *v, matmul_tn(probs, &g));
                    }
                    if self.needs(*q) || self.needs(*k) {
                        // dS = P ⊙ (dP - rowsum(dP ⊙ P)), dP = g vᵀ
                        let mut ds = matmul_nt(&g, vv);
                        for r in 0..ds.rows {
                            let pr = probs.row_slice(r);
                            let dr = &mut ds.data[r * probs.cols..(r + 1) * probs.cols];
                            let s: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (x, p) in dr.iter_mut().zip(pr) {
                                *x = p * (*x - s) * *scale;
                            }
                        }
                        if self.needs(*q) {
                            acc(&mut grads, *q, matmul(&ds, self.value(*k)));
                        }
                        if self.needs(*k) {
                            acc(&mut grads, *k, matmul_tn(&ds, self.value(*q)));
                        }
                    }
                }
            }
        }
        grads
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, x) in out.data.iter_mut().zip(g.row_slice(r)) {
            *o += x;
        }
    }
    out
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    xs.iter_mut().for_each(|x| *x /= s);
}
