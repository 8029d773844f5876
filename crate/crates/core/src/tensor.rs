//! Dense 64-bit tensors and a reverse-mode gradient tape.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! append a node holding the output value plus whatever the backward rule
//! needs; handles to nodes are plain [`Var`] indices. Because nodes are only
//! ever appended, the node list is already in topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Matrices are row-major. Rank-1 tensors act as a single row and rank-0
//! tensors as a 1x1 matrix wherever a matrix is expected.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("softmax row {row} has no unmasked entry")]
    FullyMasked { row: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) when viewed as a matrix.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn get2(&self, row: usize, col: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[row * cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[row * cols..(row + 1) * cols]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Negate,
    Exp,
    Log,
    Softplus,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Unary { x: Var, kind: Unary },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice { x: Var, row0: usize, col0: usize },
    Sum { x: Var },
    ScalarFn { x: Var, grad: Vec<f64> },
    Attention(Box<AttentionNode>),
}

#[derive(Debug)]
struct AttentionNode {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<AttentionSegment>,
    /// Row-major attention weights per (segment, head), concatenated.
    probs: Vec<f64>,
}

/// One block of rows attending to another. Query row `i` of the block sees
/// key rows `j <= i` when `causal`, every key row otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSegment {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
    pub causal: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `c = beta * c + a * b` with `a` m x k and `b` k x n given by element strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n);
}

/// As [`gemm`], writing row `i` of the result at `c[i * rsc..]`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(rsc >= n && c.len() >= (m - 1) * rsc + n);
    if k == 0 {
        for row in c.chunks_mut(rsc).take(m) {
            row[..n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserted extents keep every strided access inside the slices,
    // and `c` is exclusively borrowed with rows at least `n` apart.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        check_finite(op_name, value.data())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// A non-differentiable input; backward never visits it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`, without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}{}", self.shape(a), self.shape(b), if trans_b { "^T" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if trans_b {
                gemm(m, k, n, av, k, 1, bv, 1, k, 0.0, &mut out);
            } else {
                gemm(m, k, n, av, k, 1, bv, n, 1, 0.0, &mut out);
            }
        }
        let rg = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul { a, b, trans_b }, rg)
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)
        } else if bv.numel() == 1 {
            let y = bv.data()[0];
            Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x, y)).collect())
        } else if av.numel() == 1 {
            let x = av.data()[0];
            Tensor::new(bv.shape().to_vec(), bv.data().iter().map(|&y| f(x, y)).collect())
        } else {
            Err(shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())))
        }
    }

    /// Elementwise sum; shapes must match or one side must be a single value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push("add", value, Op::Add { a, b }, rg)
    }

    /// Elementwise product; shapes must match or one side must be a single value.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        self.push("mul", value, Op::Mul { a, b }, rg)
    }

    /// Adds `row` (length = cols) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.dims(x);
        let rv = self.value(row);
        if rv.numel() != cols {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", self.shape(x), rv.shape())));
        }
        let rdata = rv.data();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(cols.max(1)) {
            for (v, r) in chunk.iter_mut().zip(rdata) {
                *v += r;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs(x) || self.needs(row);
        self.push("add_row", value, Op::AddRow { x, row }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * factor).collect())?;
        let rg = self.needs(x);
        self.push("scale", value, Op::Scale { x, factor }, rg)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f64> = match kind {
            Unary::Negate => xv.data().iter().map(|v| -v).collect(),
            Unary::Exp => xv.data().iter().map(|v| v.exp()).collect(),
            Unary::Log => {
                if let Some(bad) = xv.data().iter().find(|v| **v <= 0.0) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: format!("non-positive argument {bad}"),
                    });
                }
                xv.data().iter().map(|v| v.ln()).collect()
            }
            Unary::Softplus => xv.data().iter().map(|&v| softplus(v)).collect(),
            Unary::Gelu => xv.data().iter().map(|&v| gelu(v)).collect(),
        };
        let name = match kind {
            Unary::Negate => "negate",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Softplus => "softplus",
            Unary::Gelu => "gelu",
        };
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs(x);
        self.push(name, value, Op::Unary { x, kind }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Negate, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    /// Softmax over the last dimension. `mask[i] == true` keeps entry `i`;
    /// masked entries come out as exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(shape_err("softmax", format!("mask of {} for {:?}", m.len(), xv.shape())));
            }
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let src = &xv.data()[r * cols..(r + 1) * cols];
            let dst = &mut out[r * cols..(r + 1) * cols];
            let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in src.iter().enumerate() {
                if keep(c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::FullyMasked { row: r });
            }
            let mut total = 0.0;
            for (c, &v) in src.iter().enumerate() {
                if keep(c) {
                    let e = (v - max).exp();
                    dst[c] = e;
                    total += e;
                }
            }
            dst.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(x);
        self.push("softmax", value, Op::Softmax { x }, rg)
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        let n = cols as f64;
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                normed[r * cols + c] = h;
                out[r * cols + c] = g[c] * h + b[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        )
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.dims(p).1).unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(shape_err("concat_rows", format!("column counts {cols} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(shape_err("concat_cols", format!("row counts {rows} vs {r}")));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", Tensor::matrix(rows, cols, data)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Copies the sub-matrix `x[rows, cols]`.
    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (xr, xc) = self.dims(x);
        if rows.end > xr || cols.end > xc || rows.start > rows.end || cols.start > cols.end {
            return Err(shape_err("slice", format!("[{rows:?}, {cols:?}] of {:?}", self.shape(x))));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&xv[r * xc + cols.start..r * xc + cols.end]);
        }
        let rg = self.needs(x);
        self.push(
            "slice",
            Tensor::matrix(rows.len(), cols.len(), data)?,
            Op::Slice {
                x,
                row0: rows.start,
                col0: cols.start,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let rg = self.needs(x);
        self.push("sum", Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// Multi-head scaled dot-product attention over independent segments.
    /// `q` is `[nq, d]`, `k` and `v` are `[nk, d]`, heads split the columns.
    /// Query rows outside every segment produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[AttentionSegment]) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        if dk != d || self.dims(v) != (nk, d) || heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}, {heads} heads", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        let mut covered = vec![false; nq];
        for seg in segments {
            let bad_range = seg.queries.end > nq || seg.keys.end > nk || seg.keys.is_empty();
            let bad_causal = seg.causal && seg.queries.len() > seg.keys.len();
            if bad_range || bad_causal || covered[seg.queries.clone()].iter().any(|&c| c) {
                return Err(shape_err("attention", format!("segment {seg:?} for {nq} queries, {nk} keys")));
            }
            covered[seg.queries.clone()].iter_mut().for_each(|c| *c = true);
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::new();
        for seg in segments {
            let (r, c) = (seg.queries.len(), seg.keys.len());
            if r == 0 {
                continue;
            }
            for h in 0..heads {
                let col = h * dh;
                let base = probs.len();
                probs.resize(base + r * c, 0.0);
                let p = &mut probs[base..];
                gemm(r, dh, c, &qv[seg.queries.start * d + col..], d, 1, &kv[seg.keys.start * d + col..], 1, d, 0.0, p);
                for i in 0..r {
                    let visible = if seg.causal { i + 1 } else { c };
                    let row = &mut p[i * c..(i + 1) * c];
                    let max = row[..visible].iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let mut total = 0.0;
                    for x in row[..visible].iter_mut() {
                        *x = ((*x - max) * scale).exp();
                        total += *x;
                    }
                    row[..visible].iter_mut().for_each(|x| *x /= total);
                    row[visible..].fill(0.0);
                }
                gemm_strided(r, c, dh, p, c, 1, &vv[seg.keys.start * d + col..], d, 1, 0.0, &mut out[seg.queries.start * d + col..], d);
            }
        }
        let rg = self.needs(q) || self.needs(k) || self.needs(v);
        let node = AttentionNode {
            q,
            k,
            v,
            heads,
            segments: segments.to_vec(),
            probs,
        };
        self.push("attention", Tensor::matrix(nq, d, out)?, Op::Attention(Box::new(node)), rg)
    }

    /// Records a scalar function of `x` whose value and gradient were computed
    /// by the caller. Lets numerically delicate closed forms keep their own
    /// derivative code while still composing with the tape.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return Err(shape_err(
                "scalar_fn",
                format!("gradient of {} for input {:?}", grad.len(), self.shape(x)),
            ));
        }
        check_finite("scalar_fn", &grad)?;
        let rg = self.needs(x);
        self.push("scalar_fn", Tensor::scalar(value), Op::ScalarFn { x, grad }, rg)
    }

    /// Propagates d(root)/d(node) back through the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(*a);
                let n = node.value.dims2().1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    if *trans_b {
                        // dA = dC * B, B is n x k
                        gemm(m, n, k, g, n, 1, bv, k, 1, 1.0, ga);
                    } else {
                        // dA = dC * B^T, B is k x n
                        gemm(m, n, k, g, n, 1, bv, 1, n, 1.0, ga);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        // dB = dC^T * A  (n x k)
                        gemm(n, m, k, g, 1, n, av, k, 1, 1.0, gb);
                    } else {
                        // dB = A^T * dC  (k x n)
                        gemm(k, m, n, av, 1, k, g, n, 1, 1.0, gb);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    let broadcast = self.value(v).numel() != g.len();
                    if let Some(gv) = self.slot(grads, v) {
                        if broadcast {
                            gv[0] += g.iter().sum::<f64>();
                        } else {
                            gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let at = |i: usize, d: &[f64]| if d.len() == 1 { d[0] } else { d[i] };
                if let Some(ga) = self.slot(grads, *a) {
                    if ga.len() == 1 && g.len() != 1 {
                        ga[0] += g.iter().enumerate().map(|(i, gi)| gi * at(i, bv)).sum::<f64>();
                    } else {
                        ga.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * at(i, bv));
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if gb.len() == 1 && g.len() != 1 {
                        gb[0] += g.iter().enumerate().map(|(i, gi)| gi * at(i, av)).sum::<f64>();
                    } else {
                        gb.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * at(i, av));
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    let cols = gr.len();
                    for chunk in g.chunks(cols.max(1)) {
                        gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * factor);
                }
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x).data();
                let out = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..gx.len() {
                        let d = match kind {
                            Unary::Negate => -1.0,
                            Unary::Exp => out[i],
                            Unary::Log => 1.0 / xv[i],
                            Unary::Softplus => sigmoid(xv[i]),
                            Unary::Gelu => gelu_grad(xv[i]),
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::Softmax { x } => {
                let (rows, cols) = node.value.dims2();
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                        for i in span {
                            gx[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let (rows, cols) = node.value.dims2();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * normed[r * cols + c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = cols as f64;
                    let mut dh = vec![0.0; cols];
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gv[c];
                            dh[c] = d;
                            sum_dh += d;
                            sum_dh_h += d * normed[r * cols + c];
                        }
                        for c in 0..cols {
                            gx[r * cols + c] +=
                                inv_std[r] / n * (n * dh[c] - sum_dh - normed[r * cols + c] * sum_dh_h);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = node.value.dims2();
                let mut col0 = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * cols + col0..r * cols + col0 + pc];
                            gp[r * pc..(r + 1) * pc].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    col0 += pc;
                }
            }
            Op::Slice { x, row0, col0 } => {
                let (rows, cols) = node.value.dims2();
                let xc = self.dims(*x).1;
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let dst = &mut gx[(row0 + r) * xc + col0..(row0 + r) * xc + col0 + cols];
                        dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::ScalarFn { x, grad } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(grad).for_each(|(a, b)| *a += g[0] * b);
                }
            }
            Op::Attention(node) => self.attention_backward(node, g, grads),
        }
    }
}

impl Tape {
    fn attention_backward(&self, node: &AttentionNode, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let AttentionNode {
            q,
            k,
            v,
            heads,
            segments,
            probs,
        } = node;
        let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
        let d = self.dims(*q).1;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut offset = 0;
        let mut dp = Vec::new();
        for seg in segments {
            let (r, c) = (seg.queries.len(), seg.keys.len());
            if r == 0 {
                continue;
            }
            let (q0, k0) = (seg.queries.start * d, seg.keys.start * d);
            for h in 0..*heads {
                let col = h * dh;
                let p = &probs[offset..offset + r * c];
                offset += r * c;
                let go = &g[q0 + col..];
                // dV = P^T dO
                gemm_strided(c, r, dh, p, 1, c, go, d, 1, 1.0, &mut dv[k0 + col..], d);
                // dP = dO V^T, then through the softmax
                dp.clear();
                dp.resize(r * c, 0.0);
                gemm(r, dh, c, go, d, 1, &vv[k0 + col..], 1, d, 0.0, &mut dp);
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        dp[j] = p[j] * (dp[j] - dot) * scale;
                    }
                }
                // dQ = dS K, dK = dS^T Q
                gemm_strided(r, c, dh, &dp, c, 1, &kv[k0 + col..], d, 1, 1.0, &mut dq[q0 + col..], d);
                gemm_strided(c, r, dh, &dp, 1, c, &qv[q0 + col..], d, 1, 1.0, &mut dk[k0 + col..], d);
            }
        }
        for (var, local) in [(*q, dq), (*k, dk), (*v, dv)] {
            if let Some(slot) = self.slot(grads, var) {
                slot.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Gradients of a scalar root with respect to every leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zero when `v` did not influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}
