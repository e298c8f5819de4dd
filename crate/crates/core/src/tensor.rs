//! Dense row-major `f64` tensors and a reverse-mode autodiff tape.
//!
//! Values live in [`Tensor`]; every differentiable computation is recorded on a
//! [`Tape`] and addressed through lightweight [`Var`] handles. The tape also
//! keeps a multiply-accumulate counter: only [`Tape::matmul`] contributes to it,
//! and it is incremented by exactly `m·k·n` per product. Backward passes do not
//! touch the counter.
//!
//! ```
//! use crosslmm::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let a = tape.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
//! let b = tape.constant(Tensor::eye(2));
//! let c = tape.matmul(a, b).unwrap();
//! let loss = tape.sum(c).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(a).data(), &[1.0, 1.0, 1.0, 1.0]);
//! assert_eq!(tape.macs(), 8);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{contract, Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(contract(format!("shape {shape:?} must have positive extents")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    /// Seeded uniform initialisation in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| rng.gen_range(lo..hi)).collect(),
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

    /// Leading extent; for a matrix, the row count.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn tape_id(&self) -> u64 {
        self.tape
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// `out[r] = a[r] + b[r % rows(b)]`
    AddTiled(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
        head_dim: usize,
    },
    Embedding(Var, Vec<usize>),
    MeanRows(Var, Vec<Vec<usize>>),
    Clamp(Var, f64, f64),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of forward operations, replayed in reverse by [`Tape::backward`].
///
/// A tape belongs to one thread of execution; distinct tapes are independent.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    macs: u64,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zero when `var` is not on
    /// any path to the loss.
    pub fn get(&self, var: Var) -> Tensor {
        assert_eq!(var.tape, self.tape, "var belongs to a different tape");
        match &self.grads[var.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.index]),
        }
    }

    pub fn is_reachable(&self, var: Var) -> bool {
        self.grads[var.index].is_some()
    }
}

impl Tape {
    /// A new tape in checked mode: every op verifies its output is finite.
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            macs: 0,
            checked: true,
        }
    }

    pub fn unchecked() -> Self {
        Self {
            checked: false,
            ..Self::new()
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Multiply-accumulates performed by forward matmuls so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.check_owner(var);
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn check_owner(&self, var: Var) {
        assert_eq!(var.tape, self.id, "var belongs to tape {}, not {}", var.tape, self.id);
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn matrix(&self, op: &'static str, var: Var) -> Result<&Tensor> {
        let t = self.value(var);
        if !t.is_matrix() {
            return Err(Error::Shape {
                op,
                lhs: t.shape.clone(),
                rhs: vec![],
            });
        }
        Ok(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.matrix("matmul", a)?, self.matrix("matmul", b)?);
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        if tb.shape[0] != k {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = gemm(&ta.data, &tb.data, m, k, n);
        self.macs += (m * k * n) as u64;
        self.push("matmul", Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Shape {
                op: "add",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        self.push("add", Tensor { shape, data }, Op::Add(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Shape {
                op: "mul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        self.push("mul", Tensor { shape, data }, Op::Mul(a, b), &[a, b])
    }

    /// Adds `b` to every row of `a`, cycling through the rows of `b`.
    ///
    /// `b` is either a vector `[d]` (row-wise bias) or a matrix `[n×d]` whose
    /// row count divides the row count of `a`.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.matrix("add_tiled", a)?;
        let tb = self.value(b);
        let d = ta.shape[1];
        let n = if tb.shape.len() == 1 { 1 } else { tb.shape[0] };
        if tb.cols_for_bias() != d || ta.shape[0] % n != 0 || tb.shape.len() > 2 {
            return Err(Error::Shape {
                op: "add_tiled",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut data = ta.data.clone();
        for (r, row) in data.chunks_mut(d).enumerate() {
            let src = &tb.data[(r % n) * d..(r % n + 1) * d];
            row.iter_mut().zip(src).for_each(|(x, y)| *x += y);
        }
        let shape = ta.shape.clone();
        self.push("add_tiled", Tensor { shape, data }, Op::AddTiled(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * s).collect();
        let shape = ta.shape.clone();
        self.push("scale", Tensor { shape, data }, Op::Scale(a, s), &[a])
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.value(a).shape.clone(),
                rhs: ts.shape.clone(),
            });
        }
        let factor = ts.data[0];
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * factor).collect();
        let shape = ta.shape.clone();
        self.push("scale_by", Tensor { shape, data }, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.matrix("transpose", a)?;
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let data = transpose_raw(&ta.data, m, n);
        self.push("transpose", Tensor { shape: vec![n, m], data }, Op::Transpose(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat_rows of zero tensors"));
        }
        let cols = self.matrix("concat_rows", parts[0])?.shape[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.matrix("concat_rows", p)?;
            if t.shape[1] != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let value = Tensor {
            shape: vec![rows, cols],
            data,
        };
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat_cols of zero tensors"));
        }
        let rows = self.matrix("concat_cols", parts[0])?.shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.matrix("concat_cols", p)?;
            if t.shape[0] != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            widths.push(t.shape[1]);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.index].value.data[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor {
            shape: vec![rows, cols],
            data,
        };
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.matrix("slice_rows", a)?;
        if len == 0 || start + len > ta.shape[0] {
            return Err(contract(format!(
                "slice_rows [{start}, {}) out of range for {:?}",
                start + len,
                ta.shape
            )));
        }
        let c = ta.shape[1];
        let data = ta.data[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Tensor { shape: vec![len, c], data }, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.matrix("slice_cols", a)?;
        let (m, n) = (ta.shape[0], ta.shape[1]);
        if len == 0 || start + len > n {
            return Err(contract(format!(
                "slice_cols [{start}, {}) out of range for {:?}",
                start + len,
                ta.shape
            )));
        }
        let data = (0..m)
            .flat_map(|r| ta.data[r * n + start..r * n + start + len].iter().copied())
            .collect();
        self.push("slice_cols", Tensor { shape: vec![m, len], data }, Op::SliceCols(a, start), &[a])
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, None)
    }

    /// Row-wise softmax where row `i` only sees columns `j <= i + offset`.
    /// Masked entries come out as exact zeros.
    pub fn causal_softmax_rows(&mut self, a: Var, offset: usize) -> Result<Var> {
        self.softmax_masked(a, Some(offset))
    }

    fn softmax_masked(&mut self, a: Var, causal: Option<usize>) -> Result<Var> {
        let ta = self.matrix("softmax", a)?;
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let visible = match causal {
                Some(off) => (i + off + 1).min(n),
                None => n,
            };
            let row = &ta.data[i * n..i * n + visible];
            let out = &mut data[i * n..i * n + visible];
            softmax_into(row, out);
        }
        let shape = ta.shape.clone();
        self.push("softmax", Tensor { shape, data }, Op::Softmax(a), &[a])
    }

    /// Per-row normalisation to zero mean and unit (biased) variance, then
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(contract("layer_norm eps must be positive"));
        }
        let tx = self.matrix("layer_norm", x)?;
        let d = tx.shape[1];
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: tx.shape.clone(),
                rhs: tg.shape.clone(),
            });
        }
        let m = tx.shape[0];
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &tx.data[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = tg.data[j] * h + tb.data[j];
            }
        }
        let value = Tensor {
            shape: vec![m, d],
            data: out,
        };
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Exact GeLU, `x·Φ(x)` with `Φ` the standard normal CDF.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = ta.shape.clone();
        self.push("gelu", Tensor { shape, data }, Op::Gelu(a), &[a])
    }

    /// Rotary position encoding over `x: [L × heads·head_dim]`.
    ///
    /// Row `r` is rotated by position `pos_offset + r`. Within each head the
    /// first half of the channels is paired with the second half.
    pub fn rope(&mut self, x: Var, head_dim: usize, pos_offset: usize, base: f64) -> Result<Var> {
        let tx = self.matrix("rope", x)?;
        let (l, width) = (tx.shape[0], tx.shape[1]);
        if head_dim == 0 || !head_dim.is_multiple_of(2) || width % head_dim != 0 {
            return Err(contract(format!(
                "rope head_dim {head_dim} must be even and divide width {width}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = vec![0.0; l * half];
        let mut sin = vec![0.0; l * half];
        for r in 0..l {
            let pos = (pos_offset + r) as f64;
            for i in 0..half {
                let theta = pos * base.powf(-2.0 * i as f64 / head_dim as f64);
                cos[r * half + i] = theta.cos();
                sin[r * half + i] = theta.sin();
            }
        }
        let mut data = tx.data.clone();
        rotate(&mut data, &cos, &sin, width, head_dim, false);
        let value = Tensor {
            shape: vec![l, width],
            data,
        };
        self.push(
            "rope",
            value,
            Op::Rope {
                x,
                cos,
                sin,
                head_dim,
            },
            &[x],
        )
    }

    /// Gathers rows of `table: [V × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.matrix("embedding", table)?;
        let (v, d) = (tt.shape[0], tt.shape[1]);
        if ids.is_empty() {
            return Err(contract("embedding lookup with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(contract(format!("token id {bad} outside vocabulary of {v}")));
        }
        let data = ids
            .iter()
            .flat_map(|&i| tt.data[i * d..(i + 1) * d].iter().copied())
            .collect();
        let value = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        self.push("embedding", value, Op::Embedding(table, ids.to_vec()), &[table])
    }

    /// Output row `g` is the arithmetic mean of input rows `groups[g]`.
    pub fn mean_rows(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let ta = self.matrix("mean_rows", a)?;
        let (m, d) = (ta.shape[0], ta.shape[1]);
        if groups.is_empty() || groups.iter().any(|g| g.is_empty() || g.iter().any(|&r| r >= m)) {
            return Err(contract("mean_rows groups must be non-empty and in range"));
        }
        let mut data = vec![0.0; groups.len() * d];
        for (g, members) in groups.iter().enumerate() {
            let out = &mut data[g * d..(g + 1) * d];
            for &r in members {
                out.iter_mut()
                    .zip(&ta.data[r * d..(r + 1) * d])
                    .for_each(|(o, x)| *o += x);
            }
            let inv = 1.0 / members.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor {
            shape: vec![groups.len(), d],
            data,
        };
        self.push("mean_rows", value, Op::MeanRows(a, groups), &[a])
    }

    /// Elementwise clamp. The gradient passes through where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x.clamp(lo, hi)).collect();
        let shape = ta.shape.clone();
        self.push("clamp", Tensor { shape, data }, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data.iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.matrix("cross_entropy", logits)?;
        let (m, v) = (tl.shape[0], tl.shape[1]);
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: tl.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(contract(format!("target {bad} outside vocabulary of {v}")));
        }
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &tl.data[i * v..(i + 1) * v];
            softmax_into(row, &mut probs[i * v..(i + 1) * v]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
        }
        let value = Tensor::scalar(loss / m as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_owner(loss);
        if self.nodes[loss.index].value.numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.index].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);

        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad).map(|data| Tensor {
                    shape: n.value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |v: Var, delta: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            if !self.nodes[v.index].requires_grad {
                return;
            }
            match &mut grads[v.index] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.nodes[a.index].requires_grad {
                    acc(*a, gemm_nt(g, &tb.data, m, n, k), grads);
                }
                if self.nodes[b.index].requires_grad {
                    acc(*b, gemm_tn(&ta.data, g, m, k, n), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec(), grads);
                acc(*b, g.to_vec(), grads);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                acc(*a, g.iter().zip(&tb.data).map(|(x, y)| x * y).collect(), grads);
                acc(*b, g.iter().zip(&ta.data).map(|(x, y)| x * y).collect(), grads);
            }
            Op::AddTiled(a, b) => {
                acc(*a, g.to_vec(), grads);
                let tb = self.val(*b);
                let d = *tb.shape.last().unwrap();
                let n = tb.numel() / d;
                let mut gb = vec![0.0; tb.numel()];
                for (r, row) in g.chunks(d).enumerate() {
                    let dst = &mut gb[(r % n) * d..(r % n + 1) * d];
                    dst.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
                acc(*b, gb, grads);
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect(), grads),
            Op::ScaleBy(a, s) => {
                let factor = self.val(*s).data[0];
                acc(*a, g.iter().map(|x| x * factor).collect(), grads);
                let ds = g.iter().zip(&self.val(*a).data).map(|(x, y)| x * y).sum();
                acc(*s, vec![ds], grads);
            }
            Op::Transpose(a) => {
                let (m, n) = (self.val(*a).shape[0], self.val(*a).shape[1]);
                acc(*a, transpose_raw(g, n, m), grads);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).numel();
                    acc(p, g[offset..offset + len].to_vec(), grads);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape[0];
                let cols = node.value.shape[1];
                let mut start = 0;
                for &p in parts {
                    let w = self.val(p).shape[1];
                    let delta = (0..rows)
                        .flat_map(|r| g[r * cols + start..r * cols + start + w].iter().copied())
                        .collect();
                    acc(p, delta, grads);
                    start += w;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = self.val(*a);
                let c = ta.shape[1];
                let mut delta = vec![0.0; ta.numel()];
                delta[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*a, delta, grads);
            }
            Op::SliceCols(a, start) => {
                let ta = self.val(*a);
                let (m, n) = (ta.shape[0], ta.shape[1]);
                let len = node.value.shape[1];
                let mut delta = vec![0.0; m * n];
                for r in 0..m {
                    delta[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*a, delta, grads);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.shape[1];
                let mut delta = vec![0.0; y.numel()];
                for i in 0..y.shape[0] {
                    let yr = &y.data[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        delta[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, delta, grads);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.shape[1];
                let m = node.value.shape[0];
                let tg = &self.val(*gain).data;
                let mut dx = vec![0.0; m * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for i in 0..m {
                    let gr = &g[i * d..(i + 1) * d];
                    let hr = &xhat[i * d..(i + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * tg[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * tg[j];
                        dx[i * d + j] = rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(*x, dx, grads);
                acc(*gain, dgain, grads);
                acc(*bias, dbias, grads);
            }
            Op::Gelu(a) => {
                let delta = self
                    .val(*a)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&x, gy)| gy * gelu_grad(x))
                    .collect();
                acc(*a, delta, grads);
            }
            Op::Rope {
                x,
                cos,
                sin,
                head_dim,
            } => {
                let width = node.value.shape[1];
                let mut delta = g.to_vec();
                rotate(&mut delta, cos, sin, width, *head_dim, true);
                acc(*x, delta, grads);
            }
            Op::Embedding(table, ids) => {
                let tt = self.val(*table);
                let d = tt.shape[1];
                let mut delta = vec![0.0; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    delta[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(x, y)| *x += y);
                }
                acc(*table, delta, grads);
            }
            Op::MeanRows(a, groups) => {
                let ta = self.val(*a);
                let d = ta.shape[1];
                let mut delta = vec![0.0; ta.numel()];
                for (gi, members) in groups.iter().enumerate() {
                    let inv = 1.0 / members.len() as f64;
                    for &r in members {
                        delta[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(&g[gi * d..(gi + 1) * d])
                            .for_each(|(x, y)| *x += y * inv);
                    }
                }
                acc(*a, delta, grads);
            }
            Op::Clamp(a, lo, hi) => {
                let delta = self
                    .val(*a)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(x, gy)| if x >= lo && x <= hi { *gy } else { 0.0 })
                    .collect();
                acc(*a, delta, grads);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.val(*a).numel()], grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.val(*logits).shape[1];
                let m = targets.len();
                let scale = g[0] / m as f64;
                let mut delta: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    delta[i * v + t] -= scale;
                }
                acc(*logits, delta, grads);
            }
        }
    }
}

trait BiasWidth {
    fn cols_for_bias(&self) -> usize;
}

impl BiasWidth for Tensor {
    fn cols_for_bias(&self) -> usize {
        *self.shape.last().unwrap()
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn rotate(data: &mut [f64], cos: &[f64], sin: &[f64], width: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for (r, row) in data.chunks_mut(width).enumerate() {
        for head in row.chunks_mut(head_dim) {
            for i in 0..half {
                let (c, s) = (cos[r * half + i], sign * sin[r * half + i]);
                let (x1, x2) = (head[i], head[i + half]);
                head[i] = x1 * c - x2 * s;
                head[i + half] = x1 * s + x2 * c;
            }
        }
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `C[m×n] = A[m×k] · B[k×n]`
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += aip * b);
        }
    }
    c
}

/// `C[m×k] = G[m×n] · B[k×n]ᵀ`
fn gemm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `C[k×n] = A[m×k]ᵀ · G[m×n]`
fn gemm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            c[p * n..(p + 1) * n]
                .iter_mut()
                .zip(grow)
                .for_each(|(c, g)| *c += aip * g);
        }
    }
    c
}

fn transpose_raw(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}
