//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the recipe for propagating adjoints. Parameters enter the tape through
//! [`Graph::param`], which shares the stored matrix instead of copying it.
//! Shapes are checked eagerly; a mismatch is a programming error and panics.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec: {rows}x{cols} vs {}", data.len());
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "Mat::from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Scalar value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar");
        self.data[0]
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Mat, scale: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul {:?} x {:?}", self.shape(), other.shape());
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm_nn(&self.data, &other.data, self.rows, self.cols, other.cols, &mut out.data);
        out
    }
}

/// out(m×n) += a(m×k) · b(k×n)
fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out(m×n) += a(m×k) · b(n×k)ᵀ
fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out(m×n) += a(k×m)ᵀ · b(k×n)
fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Logistic function, kept strictly inside (0, 1) for every finite input:
/// rounding would otherwise reach 1 above about 37 and underflow to 0 below
/// about -745.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Ln(Var),
    XLogX(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    LayerNormRows(Var, f64),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Transpose(Var),
    PickRows(Vec<(Var, usize)>),
}

struct Node {
    value: Arc<Mat>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Mat>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Parameters bound into this graph, in id order.
    pub fn bound_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.params.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// A leaf that does not correspond to a stored parameter.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Bind a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_shared(store.shared(id), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_nt {:?} x {:?}ᵀ", av.shape(), bv.shape());
        let mut out = Mat::zeros(av.rows, bv.rows);
        gemm_nt(&av.data, &bv.data, av.rows, av.cols, bv.rows, &mut out.data);
        self.push(out, Op::MatMulNT(a, b))
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, what: &str) -> Mat {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "{what}: {:?} vs {:?}", av.shape(), bv.shape());
        Mat::from_vec(
            av.rows,
            av.cols,
            av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x + y, "add");
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x - y, "sub");
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x * y, "mul");
        self.push(out, Op::Mul(a, b))
    }

    /// Broadcast-add a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(rv.rows == 1 && rv.cols == av.cols, "add_row {:?} + {:?}", av.shape(), rv.shape());
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Broadcast-multiply every row of an m×n matrix by a 1×n row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(rv.rows == 1 && rv.cols == av.cols, "mul_row {:?} * {:?}", av.shape(), rv.shape());
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    /// Broadcast-multiply every column of an m×n matrix by an m×1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert!(cv.cols == 1 && cv.rows == av.rows, "mul_col {:?} * {:?}", av.shape(), cv.shape());
        let mut out = av.clone();
        for r in 0..out.rows {
            let f = cv.data[r];
            for o in out.row_mut(r) {
                *o *= f;
            }
        }
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Multiply every entry of `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let factor = self.value(s).item();
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::ScaleBy(a, s))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 - x);
        self.push(out, Op::OneMinus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    /// Elementwise x·ln x with 0·ln 0 = 0.
    pub fn xlogx(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x * x.ln() } else { 0.0 });
        self.push(out, Op::XLogX(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::INFINITY {
                // saturated row: mass shared among the +inf entries
                let count = row.iter().filter(|v| **v == f64::INFINITY).count() as f64;
                for v in row.iter_mut() {
                    *v = if *v == f64::INFINITY { 1.0 / count } else { 0.0 };
                }
                continue;
            }
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Divide each row by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let total: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::NormalizeRows(a))
    }

    /// Zero-mean, unit-variance normalization of each row (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let (mean, inv_std) = row_stats(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv_std;
            }
        }
        self.push(out, Op::LayerNormRows(a, eps))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros(indices.len(), tv.cols);
        for (i, &idx) in indices.iter().enumerate() {
            out.row_mut(i).copy_from_slice(tv.row(idx));
        }
        self.push(out, Op::GatherRows(table, indices.to_vec()))
    }

    pub fn gather_cols(&mut self, a: Var, indices: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(av.rows, indices.len());
        for r in 0..av.rows {
            for (j, &idx) in indices.iter().enumerate() {
                out.set(r, j, av.get(r, idx));
            }
        }
        self.push(out, Op::GatherCols(a, indices.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows, "slice_rows out of range");
        let out = Mat::from_vec(len, av.cols, av.data[start * av.cols..(start + len) * av.cols].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut out = Mat::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        self.push(Mat::scalar(total), Op::Sum(a))
    }

    /// Build a matrix whose i-th row is row `picks[i].1` of node `picks[i].0`.
    pub fn pick_rows(&mut self, picks: &[(Var, usize)]) -> Var {
        assert!(!picks.is_empty(), "pick_rows of nothing");
        let cols = self.value(picks[0].0).cols;
        let mut out = Mat::zeros(picks.len(), cols);
        for (i, &(v, r)) in picks.iter().enumerate() {
            let src = self.value(v);
            assert_eq!(src.cols, cols, "pick_rows column mismatch");
            out.row_mut(i).copy_from_slice(src.row(r));
        }
        self.push(out, Op::PickRows(picks.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// x·W + b with b broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, bias)
    }

    /// Propagate adjoints from the scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Adjoints {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Adjoints { grads }
    }

    fn propagate(&self, idx: usize, grad: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, av.shape());
                gemm_nt(&grad.data, &bv.data, av.rows, bv.cols, av.cols, &mut ga.data);
                let gb = slot(grads, *b, bv.shape());
                gemm_tn(&av.data, &grad.data, bv.rows, av.rows, bv.cols, &mut gb.data);
            }
            Op::MatMulNT(a, b) => {
                // out = a·bᵀ, a: m×k, b: n×k, grad: m×n
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, av.shape());
                gemm_nn(&grad.data, &bv.data, av.rows, bv.rows, av.cols, &mut ga.data);
                let gb = slot(grads, *b, bv.shape());
                gemm_tn(&grad.data, &av.data, bv.rows, av.rows, av.cols, &mut gb.data);
            }
            Op::Add(a, b) => {
                slot(grads, *a, grad.shape()).add_assign(grad);
                slot(grads, *b, grad.shape()).add_assign(grad);
            }
            Op::Sub(a, b) => {
                slot(grads, *a, grad.shape()).add_assign(grad);
                slot(grads, *b, grad.shape()).add_scaled(grad, -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, grad.shape());
                for ((g, o), y) in ga.data.iter_mut().zip(&grad.data).zip(&bv.data) {
                    *g += o * y;
                }
                let gb = slot(grads, *b, grad.shape());
                for ((g, o), x) in gb.data.iter_mut().zip(&grad.data).zip(&av.data) {
                    *g += o * x;
                }
            }
            Op::AddRow(a, row) => {
                slot(grads, *a, grad.shape()).add_assign(grad);
                let gr = slot(grads, *row, (1, grad.cols));
                for r in 0..grad.rows {
                    for (g, o) in gr.data.iter_mut().zip(grad.row(r)) {
                        *g += o;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a);
                let rv = self.value(*row);
                let mut gr_acc = vec![0.0; grad.cols];
                {
                    let ga = slot(grads, *a, grad.shape());
                    for r in 0..grad.rows {
                        for c in 0..grad.cols {
                            let o = grad.get(r, c);
                            ga.data[r * grad.cols + c] += o * rv.data[c];
                            gr_acc[c] += o * av.get(r, c);
                        }
                    }
                }
                let gr = slot(grads, *row, (1, grad.cols));
                for (g, v) in gr.data.iter_mut().zip(gr_acc) {
                    *g += v;
                }
            }
            Op::MulCol(a, col) => {
                let av = self.value(*a);
                let cv = self.value(*col);
                let mut gc_acc = vec![0.0; grad.rows];
                {
                    let ga = slot(grads, *a, grad.shape());
                    for r in 0..grad.rows {
                        let f = cv.data[r];
                        for c in 0..grad.cols {
                            let o = grad.get(r, c);
                            ga.data[r * grad.cols + c] += o * f;
                            gc_acc[r] += o * av.get(r, c);
                        }
                    }
                }
                let gc = slot(grads, *col, (grad.rows, 1));
                for (g, v) in gc.data.iter_mut().zip(gc_acc) {
                    *g += v;
                }
            }
            Op::Scale(a, factor) => {
                slot(grads, *a, grad.shape()).add_scaled(grad, *factor);
            }
            Op::ScaleBy(a, s) => {
                let factor = self.value(*s).item();
                let dot: f64 = self.value(*a).data.iter().zip(&grad.data).map(|(x, g)| x * g).sum();
                slot(grads, *a, grad.shape()).add_scaled(grad, factor);
                slot(grads, *s, (1, 1)).data[0] += dot;
            }
            Op::OneMinus(a) => {
                slot(grads, *a, grad.shape()).add_scaled(grad, -1.0);
            }
            Op::Tanh(a) => {
                let ga = slot(grads, *a, grad.shape());
                for ((g, o), y) in ga.data.iter_mut().zip(&grad.data).zip(&out.data) {
                    *g += o * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let ga = slot(grads, *a, grad.shape());
                for ((g, o), y) in ga.data.iter_mut().zip(&grad.data).zip(&out.data) {
                    *g += o * y * (1.0 - y);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let ga = slot(grads, *a, grad.shape());
                for ((g, o), x) in ga.data.iter_mut().zip(&grad.data).zip(&av.data) {
                    *g += o * gelu_grad(*x);
                }
            }
            Op::Ln(a) => {
                let av = self.value(*a);
                let ga = slot(grads, *a, grad.shape());
                for ((g, o), x) in ga.data.iter_mut().zip(&grad.data).zip(&av.data) {
                    *g += o / x;
                }
            }
            Op::XLogX(a) => {
                let av = self.value(*a);
                let ga = slot(grads, *a, grad.shape());
                for ((g, o), x) in ga.data.iter_mut().zip(&grad.data).zip(&av.data) {
                    if *x > 0.0 {
                        *g += o * (x.ln() + 1.0);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let ga = slot(grads, *a, grad.shape());
                for r in 0..grad.rows {
                    let y = out.row(r);
                    let go = grad.row(r);
                    let dot: f64 = y.iter().zip(go).map(|(p, q)| p * q).sum();
                    for c in 0..grad.cols {
                        ga.data[r * grad.cols + c] += y[c] * (go[c] - dot);
                    }
                }
            }
            Op::NormalizeRows(a) => {
                let av = self.value(*a);
                let ga = slot(grads, *a, grad.shape());
                for r in 0..grad.rows {
                    let total: f64 = av.row(r).iter().sum();
                    let y = out.row(r);
                    let go = grad.row(r);
                    let dot: f64 = y.iter().zip(go).map(|(p, q)| p * q).sum();
                    for c in 0..grad.cols {
                        ga.data[r * grad.cols + c] += (go[c] - dot) / total;
                    }
                }
            }
            Op::LayerNormRows(a, eps) => {
                let av = self.value(*a);
                let ga = slot(grads, *a, grad.shape());
                let n = grad.cols as f64;
                for r in 0..grad.rows {
                    let (_, inv_std) = row_stats(av.row(r), *eps);
                    let y = out.row(r);
                    let go = grad.row(r);
                    let mean_g: f64 = go.iter().sum::<f64>() / n;
                    let mean_gy: f64 = go.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / n;
                    for c in 0..grad.cols {
                        ga.data[r * grad.cols + c] += inv_std * (go[c] - mean_g - y[c] * mean_gy);
                    }
                }
            }
            Op::GatherRows(table, indices) => {
                let shape = self.shape(*table);
                let gt = slot(grads, *table, shape);
                for (i, &idx) in indices.iter().enumerate() {
                    for (g, o) in gt.row_mut(idx).iter_mut().zip(grad.row(i)) {
                        *g += o;
                    }
                }
            }
            Op::GatherCols(a, indices) => {
                let shape = self.shape(*a);
                let ga = slot(grads, *a, shape);
                for r in 0..grad.rows {
                    for (j, &idx) in indices.iter().enumerate() {
                        ga.data[r * shape.1 + idx] += grad.get(r, j);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    let n = shape.0 * shape.1;
                    let gp = slot(grads, p, shape);
                    for (g, o) in gp.data.iter_mut().zip(&grad.data[offset..offset + n]) {
                        *g += o;
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    let gp = slot(grads, p, shape);
                    for r in 0..shape.0 {
                        for (g, o) in gp.row_mut(r).iter_mut().zip(&grad.row(r)[offset..offset + shape.1]) {
                            *g += o;
                        }
                    }
                    offset += shape.1;
                }
            }
            Op::SliceRows(a, start) => {
                let shape = self.shape(*a);
                let ga = slot(grads, *a, shape);
                let begin = start * shape.1;
                for (g, o) in ga.data[begin..begin + grad.len()].iter_mut().zip(&grad.data) {
                    *g += o;
                }
            }
            Op::SliceCols(a, start) => {
                let shape = self.shape(*a);
                let ga = slot(grads, *a, shape);
                for r in 0..grad.rows {
                    for (g, o) in ga.row_mut(r)[*start..*start + grad.cols].iter_mut().zip(grad.row(r)) {
                        *g += o;
                    }
                }
            }
            Op::Sum(a) => {
                let g = grad.item();
                let ga = slot(grads, *a, self.shape(*a));
                for v in ga.data.iter_mut() {
                    *v += g;
                }
            }
            Op::Transpose(a) => {
                slot(grads, *a, self.shape(*a)).add_assign(&grad.transpose());
            }
            Op::PickRows(picks) => {
                for (i, &(v, r)) in picks.iter().enumerate() {
                    let shape = self.shape(v);
                    let gv = slot(grads, v, shape);
                    for (g, o) in gv.row_mut(r).iter_mut().zip(grad.row(i)) {
                        *g += o;
                    }
                }
            }
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn slot(grads: &mut [Option<Mat>], v: Var, shape: (usize, usize)) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
}

/// Adjoints of every node after a backward pass.
pub struct Adjoints {
    grads: Vec<Option<Mat>>,
}

impl Adjoints {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Collect gradients of the parameters bound in `graph`.
    pub fn param_grads(mut self, graph: &Graph, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::new(store.len());
        for (&id, &v) in &graph.params {
            if let Some(g) = self.grads[v.0].take() {
                out.accumulate(id, &g);
            }
        }
        out
    }
}

/// Largest relative error between analytic parameter gradients and central
/// finite differences over every entry of `ids`. `build` evaluates the scalar
/// loss for a given parameter state. Entries whose gradients are both below
/// `1e-3` in magnitude are compared against that floor instead.
pub fn max_gradient_error(
    store: &ParamStore,
    ids: &[ParamId],
    step: f64,
    build: impl Fn(&ParamStore) -> (Graph, Var),
) -> f64 {
    let (graph, loss) = build(store);
    let grads = graph.backward(loss).param_grads(&graph, store);
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for &id in ids {
        let zeros = Mat::zeros(store.get(id).rows(), store.get(id).cols());
        let analytic = grads.get(id).unwrap_or(&zeros).clone();
        for i in 0..store.get(id).len() {
            let original = store.get(id).as_slice()[i];
            probe.get_mut(id).as_mut_slice()[i] = original + step;
            let (g, l) = build(&probe);
            let plus = g.value(l).item();
            probe.get_mut(id).as_mut_slice()[i] = original - step;
            let (g, l) = build(&probe);
            let minus = g.value(l).item();
            probe.get_mut(id).as_mut_slice()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_slice()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
