//! Dense row-major matrices and a small reverse-mode tape.
//!
//! Every model computation is recorded on a [`Graph`] as a sequence of
//! matrix-valued nodes. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into a [`Grads`] buffer aligned with a
//! [`ParamStore`]. The tape is generic over [`Scalar`] so that training can
//! run in `f32` while gradient checks and oracles run in `f64`.

use std::collections::HashMap;
use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type usable by the tape.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape {rows}x{cols} vs {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// `self · other`
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t inner dims");
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul inner dims");
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shapes");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Numerically stable `ln σ(x)`.
#[inline]
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Numerically stable `σ(x)`.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Tanh-approximated GELU and its derivative.
#[inline]
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = k * (T::one() + three * c * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

/// Row-wise softmax restricted to `mask`; fully masked rows map to zeros.
pub fn masked_softmax_rows<T: Scalar>(x: &Mat<T>, mask: &[bool]) -> Mat<T> {
    assert_eq!(mask.len(), x.len());
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let base = r * x.cols;
        let mut mx = T::neg_infinity();
        for c in 0..x.cols {
            if mask[base + c] {
                mx = mx.max(x.data[base + c]);
            }
        }
        if mx == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for c in 0..x.cols {
            if mask[base + c] {
                let e = (x.data[base + c] - mx).exp();
                out.data[base + c] = e;
                sum = sum + e;
            }
        }
        for c in 0..x.cols {
            out.data[base + c] = out.data[base + c] / sum;
        }
    }
    out
}

/// Row-wise log-softmax restricted to `mask`; masked entries are 0.
pub fn masked_log_softmax_rows<T: Scalar>(x: &Mat<T>, mask: &[bool]) -> Mat<T> {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let base = r * x.cols;
        let mut mx = T::neg_infinity();
        for c in 0..x.cols {
            if mask[base + c] {
                mx = mx.max(x.data[base + c]);
            }
        }
        if mx == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for c in 0..x.cols {
            if mask[base + c] {
                sum = sum + (x.data[base + c] - mx).exp();
            }
        }
        let lse = mx + sum.ln();
        for c in 0..x.cols {
            if mask[base + c] {
                out.data[base + c] = x.data[base + c] - lse;
            }
        }
    }
    out
}

/// A named learnable array with the group it is reported under.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: String,
    pub value: Mat<T>,
}

/// Ordered collection of learnable arrays. Indices are stable for the
/// lifetime of a model and double as [`Grads`] slots.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, group: impl Into<String>, value: Mat<T>) -> usize {
        self.params.push(Param {
            name: name.into(),
            group: group.into(),
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: usize) -> &Mat<T> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Mat<T> {
        &mut self.params[id].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; untouched slots stay `None`.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub slots: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn get(&self, id: usize) -> Option<&Mat<T>> {
        self.slots[id].as_ref()
    }

    fn slot(&mut self, id: usize, rows: usize, cols: usize) -> &mut Mat<T> {
        self.slots[id].get_or_insert_with(|| Mat::zeros(rows, cols))
    }

    /// Gradient value at flat index `idx` of parameter `id` (zero if untouched).
    pub fn at(&self, id: usize, idx: usize) -> T {
        self.slots[id].as_ref().map_or(T::zero(), |m| m.data[idx])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(usize),
    Gather { param: usize, rows: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Mat<T>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    RowDot(Var, Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Flatten(Var),
    Softmax(Var, Vec<bool>),
    LogSoftmax(Var, Vec<bool>),
    Normalize { x: Var, inv_std: Vec<T> },
    Gelu(Var, Vec<T>),
    Sigmoid(Var),
    LogSigmoid(Var),
    WeightedSum(Var, Mat<T>),
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

/// Reverse-mode tape over matrices, borrowing the parameters it reads.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_cache: HashMap<usize, Var>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.len(), 1, "scalar() on a {}x{} node", m.rows, m.cols);
        m.data[0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Whole parameter as a node; repeated calls share one node.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push(self.params.value(id).clone(), Op::Param(id));
        self.param_cache.insert(id, v);
        v
    }

    /// Rows of a parameter table, in the given order.
    pub fn gather(&mut self, id: usize, rows: &[usize]) -> Var {
        let table = self.params.value(id);
        let mut out = Mat::zeros(rows.len(), table.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(table.row(r));
        }
        self.push(out, Op::Gather { param: id, rows: rows.to_vec() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// `a + b` with `b` (1×cols) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((bv.rows, bv.cols), (1, av.cols), "add_row shapes");
        let mut v = av.clone();
        for r in 0..v.rows {
            for (x, &y) in v.row_mut(r).iter_mut().zip(&bv.data) {
                *x = *x + y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    /// `a ⊙ b` with `b` (1×cols) broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((bv.rows, bv.cols), (1, av.cols), "mul_row shapes");
        let mut v = av.clone();
        for r in 0..v.rows {
            for (x, &y) in v.row_mut(r).iter_mut().zip(&bv.data) {
                *x = *x * y;
            }
        }
        self.push(v, Op::MulRow(a, b))
    }

    /// `a ⊙ c` with `c` (rows×1) broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(c));
        assert_eq!((cv.rows, cv.cols), (av.rows, 1), "mul_col shapes");
        let mut v = av.clone();
        for r in 0..v.rows {
            let s = cv.data[r];
            for x in v.row_mut(r) {
                *x = *x * s;
            }
        }
        self.push(v, Op::MulCol(a, c))
    }

    /// Element-wise product with a constant (masks, dropout).
    pub fn mul_const(&mut self, a: Var, k: Mat<T>) -> Var {
        let v = self.value(a).zip_map(&k, |x, y| x * y);
        self.push(v, Op::MulConst(a, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    /// Per-row inner products, rows×1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dot shapes");
        let data = (0..av.rows).map(|r| dot(av.row(r), bv.row(r))).collect();
        let v = Mat::from_vec(av.rows, 1, data);
        self.push(v, Op::RowDot(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut v = Mat::zeros(av.rows, len);
        for r in 0..av.rows {
            v.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols rows");
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows cols");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Row-major flatten into a single row.
    pub fn flatten(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = Mat::from_vec(1, av.len(), av.data.clone());
        self.push(v, Op::Flatten(a))
    }

    /// Row-wise softmax over entries where `mask` is true.
    pub fn softmax(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let v = masked_softmax_rows(self.value(a), &mask);
        self.push(v, Op::Softmax(a, mask))
    }

    pub fn log_softmax(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let v = masked_log_softmax_rows(self.value(a), &mask);
        self.push(v, Op::LogSoftmax(a, mask))
    }

    /// Per-row standardisation `(x − μ) / sqrt(var + eps)`.
    pub fn normalize(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        let n = T::from_usize(av.cols).unwrap();
        let mut v = Mat::zeros(av.rows, av.cols);
        let mut inv_std = Vec::with_capacity(av.rows);
        for r in 0..av.rows {
            let row = av.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for (o, &x) in v.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(v, Op::Normalize { x: a, inv_std })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut deriv = Vec::with_capacity(av.len());
        let data = av
            .data
            .iter()
            .map(|&x| {
                let (y, d) = gelu(x);
                deriv.push(d);
                y
            })
            .collect();
        let v = Mat::from_vec(av.rows, av.cols, data);
        self.push(v, Op::Gelu(a, deriv))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    /// Scalar `Σ w ⊙ a`.
    pub fn weighted_sum(&mut self, a: Var, w: Mat<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), w.shape(), "weighted_sum shapes");
        let s = dot(&av.data, &w.data);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::WeightedSum(a, w))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape();
        self.weighted_sum(a, Mat::filled(r, c, T::one()))
    }

    /// Reverse sweep from a scalar node; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads = Grads::new(self.params.len());
        let mut adj: Vec<Option<Mat<T>>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[loss.0] = Some(Mat::filled(1, 1, T::one()));

        fn acc<T: Scalar>(adj: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
            match &mut adj[v.0] {
                Some(m) => m.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    grads.slot(*id, g.rows, g.cols).add_assign(&g);
                }
                Op::Gather { param, rows } => {
                    let table = self.params.value(*param);
                    let slot = grads.slot(*param, table.rows, table.cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &x) in slot.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o = *o + x;
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut adj, *a, g.map(|x| x * s));
                }
                Op::AddRow(a, b) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, &x) in gb.data.iter_mut().zip(g.row(r)) {
                            *o = *o + x;
                        }
                    }
                    acc(&mut adj, *a, g);
                    acc(&mut adj, *b, gb);
                }
                Op::MulRow(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            let gi = g.get(r, c);
                            ga.set(r, c, gi * bv.data[c]);
                            gb.data[c] = gb.data[c] + gi * av.get(r, c);
                        }
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MulCol(a, c) => {
                    let (av, cv) = (self.value(*a), self.value(*c));
                    let mut ga = g.clone();
                    let mut gc = Mat::zeros(g.rows, 1);
                    for r in 0..g.rows {
                        let s = cv.data[r];
                        for (o, &x) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o = x * s;
                        }
                        gc.data[r] = dot(g.row(r), av.row(r));
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *c, gc);
                }
                Op::MulConst(a, k) => {
                    acc(&mut adj, *a, g.zip_map(k, |x, y| x * y));
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    let mut gb = Mat::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        let s = g.data[r];
                        for c in 0..av.cols {
                            ga.set(r, c, s * bv.get(r, c));
                            gb.set(r, c, s * av.get(r, c));
                        }
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows, av.cols);
                    for r in 0..g.rows {
                        ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        let mut gp = Mat::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        off += pc;
                        acc(&mut adj, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        let gp = Mat::from_vec(pv.rows, pv.cols, g.data[off..off + n].to_vec());
                        off += n;
                        acc(&mut adj, p, gp);
                    }
                }
                Op::Flatten(a) => {
                    let av = self.value(*a);
                    acc(&mut adj, *a, Mat::from_vec(av.rows, av.cols, g.data));
                }
                Op::Softmax(a, mask) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let s = dot(g.row(r), y.row(r));
                        for c in 0..y.cols {
                            if mask[r * y.cols + c] {
                                ga.set(r, c, y.get(r, c) * (g.get(r, c) - s));
                            }
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::LogSoftmax(a, mask) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let mut gs = T::zero();
                        for c in 0..y.cols {
                            if mask[r * y.cols + c] {
                                gs = gs + g.get(r, c);
                            }
                        }
                        for c in 0..y.cols {
                            if mask[r * y.cols + c] {
                                ga.set(r, c, g.get(r, c) - y.get(r, c).exp() * gs);
                            }
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Normalize { x, inv_std } => {
                    let y = &node.value;
                    let n = T::from_usize(y.cols).unwrap();
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.iter().copied().sum::<T>() / n;
                        let mean_gy = dot(gr, yr) / n;
                        for c in 0..y.cols {
                            ga.set(r, c, inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy));
                        }
                    }
                    acc(&mut adj, *x, ga);
                }
                Op::Gelu(a, deriv) => {
                    let mut ga = g;
                    for (o, &d) in ga.data.iter_mut().zip(deriv) {
                        *o = *o * d;
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y * (T::one() - y));
                    acc(&mut adj, *a, ga);
                }
                Op::LogSigmoid(a) => {
                    // d/dx ln σ(x) = σ(−x)
                    let ga = g.zip_map(self.value(*a), |x, z| x * sigmoid(-z));
                    acc(&mut adj, *a, ga);
                }
                Op::WeightedSum(a, w) => {
                    let s = g.data[0];
                    acc(&mut adj, *a, w.map(|x| x * s));
                }
            }
        }
        grads
    }
}
