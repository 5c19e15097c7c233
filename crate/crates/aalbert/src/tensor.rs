//! Tape-based reverse-mode automatic differentiation over flat-storage
//! tensors.
//!
//! The tape owns every tensor produced during a forward pass. Operations
//! append a node holding the result plus an op record pointing at the input
//! node ids; `backward` walks the tape in reverse and *accumulates* into each
//! input's gradient. Accumulation (rather than assignment) is what makes
//! weight sharing work: a parameter inserted once and used by L layers ends
//! up with the sum of all L per-layer gradients.
//!
//! The tape is rebuilt for every forward pass; nothing is retained across
//! optimizer steps.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use thiserror::Error;

/// Element type for all numerics: f32 for training, f64 for the
/// finite-difference gradient checks.
pub trait Scalar:
    Float + FromPrimitive + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    /// Serialized width in bytes (little-endian IEEE 754).
    const WIDTH: usize;

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable constant")
    }
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("finite")
    }
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const WIDTH: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const WIDTH: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, msg: msg.into() }
}

// ─────────────────────────── plain 2-D storage ───────────────────────────

/// Row-major 2-D array used for weights, features, and tape-free inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Matrix { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| G::of(v.as_f64())).collect(),
        }
    }

    pub fn transposed(&self) -> Self {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Plain (tape-free) matrix product, used by inference-only paths.
    pub fn matmul(&self, rhs: &Matrix<F>) -> Matrix<F> {
        assert_eq!(self.cols, rhs.rows, "matmul inner dims");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        matmul_into(
            &self.data, &rhs.data, &mut out.data, self.rows, self.cols, rhs.cols,
        );
        out
    }

    /// Adds a 1×cols row vector to every row.
    pub fn add_row(&self, bias: &Matrix<F>) -> Matrix<F> {
        assert_eq!(bias.cols, self.cols, "bias width");
        assert_eq!(bias.rows, 1, "bias is a row vector");
        let mut out = self.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                let v = out.get(r, c) + bias.get(0, c);
                out.set(r, c, v);
            }
        }
        out
    }

    /// Column-wise mean over rows, as a 1×cols matrix.
    pub fn mean_rows(&self) -> Matrix<F> {
        assert!(self.rows > 0, "mean of zero rows");
        let inv = F::of(1.0 / self.rows as f64);
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = out.get(0, c) + self.get(r, c) * inv;
                out.set(0, c, v);
            }
        }
        out
    }
}

/// out += does not apply; plain C = A·B with the k-loop in the middle for
/// cache-friendly row-major access.
fn matmul_into<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu_scalar<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let c = F::of(0.797_884_560_802_865_4); // √(2/π)
    let k = F::of(0.044715);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let c = F::of(0.797_884_560_802_865_4);
    let k = F::of(0.044715);
    let three_k = F::of(3.0 * 0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three_k * x * x)
}

/// Row-wise softmax with max subtraction, tape-free.
pub fn softmax_rows_plain<F: Scalar>(x: &Matrix<F>) -> Matrix<F> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_row_into(out.row_mut(r));
    }
    out
}

fn softmax_row_into<F: Scalar>(row: &mut [F]) {
    let mut max = F::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

// ─────────────────────────────── the tape ───────────────────────────────

pub type NodeId = usize;

/// One tape entry: result values plus the op that produced them.
/// `grad` is populated by `backward` for every node that requires gradients
/// and is reachable from the loss.
#[derive(Debug)]
pub struct Tensor<F: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
    op: Op<F>,
}

#[derive(Clone, Debug)]
enum Op<F: Scalar> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Reshape { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: F },
    AddRowBroadcast { x: NodeId, bias: NodeId },
    SoftmaxRows { x: NodeId },
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId, eps: F },
    Gelu { x: NodeId },
    Dropout { x: NodeId, keep: Vec<F> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols { xs: Vec<NodeId> },
    MeanAxis { x: NodeId, axis: usize },
    SumAll { x: NodeId },
    MaskedL1 { pred: NodeId, target: Vec<F>, rows: Vec<usize> },
    CrossEntropyRows { logits: NodeId, targets: Vec<usize> },
    LinearCombine { mats: Vec<NodeId>, coeffs: NodeId },
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool, op: Op<F>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Tensor { shape, data, requires_grad, grad: None, op });
        self.nodes.len() - 1
    }

    /// Inserts a constant or trainable leaf holding a copy of `m`.
    pub fn leaf(&mut self, m: &Matrix<F>, requires_grad: bool) -> NodeId {
        self.push(
            vec![m.rows(), m.cols()],
            m.data().to_vec(),
            requires_grad,
            Op::Leaf,
        )
    }

    pub fn leaf_scalar(&mut self, v: F, requires_grad: bool) -> NodeId {
        self.push(vec![1, 1], vec![v], requires_grad, Op::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: NodeId) -> &[F] {
        &self.nodes[id].data
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, id: NodeId) -> F {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].op, Op::Leaf)
    }

    /// Copies a 2-D node back out as a matrix.
    pub fn value(&self, id: NodeId) -> Matrix<F> {
        let n = &self.nodes[id];
        assert_eq!(n.shape.len(), 2, "value() expects a 2-D node");
        Matrix::from_vec(n.shape[0], n.shape[1], n.data.clone())
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = &self.nodes[id].shape;
        if s.len() != 2 {
            return Err(invalid(op, format!("expected 2-D input, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ────────────────────────── forward ops ──────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        matmul_into(&self.nodes[a].data, &self.nodes[b].data, &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = &self.nodes[x].data;
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(vec![c, r], out, rg, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].data.len() {
            return Err(invalid(
                "reshape",
                format!(
                    "cannot view {:?} ({} elements) as {shape:?} ({numel} elements)",
                    self.nodes[x].shape,
                    self.nodes[x].data.len()
                ),
            ));
        }
        let data = self.nodes[x].data.clone();
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(shape, data, rg, Op::Reshape { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let data: Vec<F> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, data, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let data: Vec<F> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, data, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let data: Vec<F> = self.nodes[x].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.nodes[x].requires_grad;
        self.push(shape, data, rg, Op::Scale { x, c })
    }

    /// x: [t, d], bias: [1, d]; adds bias to every row.
    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (t, d) = self.dims2(x, "add_row_broadcast")?;
        let (br, bd) = self.dims2(bias, "add_row_broadcast")?;
        if br != 1 || bd != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.nodes[x].shape.clone(),
                rhs: self.nodes[bias].shape.clone(),
            });
        }
        let mut data = self.nodes[x].data.clone();
        for r in 0..t {
            for c in 0..d {
                data[r * d + c] = data[r * d + c] + self.nodes[bias].data[c];
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(vec![t, d], data, rg, Op::AddRowBroadcast { x, bias }))
    }

    /// Convenience: x·W + b.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_row_broadcast(xw, b)
    }

    /// Softmax over the last axis of a 2-D node, with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (t, d) = self.dims2(x, "softmax_rows")?;
        let mut data = self.nodes[x].data.clone();
        for r in 0..t {
            softmax_row_into(&mut data[r * d..(r + 1) * d]);
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(vec![t, d], data, rg, Op::SoftmaxRows { x }))
    }

    /// Layer norm over the last axis with affine parameters; gamma/beta are
    /// [1, d]. Uses population variance plus `eps` inside the square root.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: F,
    ) -> Result<NodeId, TensorError> {
        let (t, d) = self.dims2(x, "layer_norm_rows")?;
        for &p in &[gamma, beta] {
            let (pr, pd) = self.dims2(p, "layer_norm_rows")?;
            if pr != 1 || pd != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm_rows",
                    lhs: self.nodes[x].shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
        }
        let inv_d = F::of(1.0 / d as f64);
        let mut data = vec![F::zero(); t * d];
        for r in 0..t {
            let row = &self.nodes[x].data[r * d..(r + 1) * d];
            let mut mean = F::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = F::zero();
            for &v in row {
                let dv = v - mean;
                var = var + dv * dv;
            }
            var = var * inv_d;
            let inv_std = (var + eps).sqrt().recip();
            for c in 0..d {
                let xhat = (row[c] - mean) * inv_std;
                data[r * d + c] = xhat * self.nodes[gamma].data[c] + self.nodes[beta].data[c];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(vec![t, d], data, rg, Op::LayerNormRows { x, gamma, beta, eps }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<F> = self.nodes[x].data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.nodes[x].requires_grad;
        self.push(shape, data, rg, Op::Gelu { x })
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-rate). `rate == 0`
    /// returns the input node unchanged.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> NodeId {
        if rate <= 0.0 {
            return x;
        }
        assert!(rate < 1.0, "dropout rate must be < 1");
        let scale = F::of(1.0 / (1.0 - rate));
        let keep: Vec<F> = self.nodes[x]
            .data
            .iter()
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { scale })
            .collect();
        let data: Vec<F> = self.nodes[x]
            .data
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| v * k)
            .collect();
        let shape = self.nodes[x].shape.clone();
        let rg = self.nodes[x].requires_grad;
        self.push(shape, data, rg, Op::Dropout { x, keep })
    }

    /// Copies columns [start, start+width) of a 2-D node.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId, TensorError> {
        let (t, d) = self.dims2(x, "slice_cols")?;
        if start + width > d || width == 0 {
            return Err(invalid(
                "slice_cols",
                format!("columns [{start}, {}) out of range for width {d}", start + width),
            ));
        }
        let mut data = Vec::with_capacity(t * width);
        for r in 0..t {
            data.extend_from_slice(&self.nodes[x].data[r * d + start..r * d + start + width]);
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(vec![t, width], data, rg, Op::SliceCols { x, start }))
    }

    /// Concatenates 2-D nodes with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        if xs.is_empty() {
            return Err(invalid("concat_cols", "no inputs"));
        }
        let (t, _) = self.dims2(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &id in xs {
            let (r, c) = self.dims2(id, "concat_cols")?;
            if r != t {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[xs[0]].shape.clone(),
                    rhs: self.nodes[id].shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(t * total);
        for r in 0..t {
            for (&id, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[id].data[r * w..(r + 1) * w]);
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(vec![t, total], data, rg, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// Mean over one axis of a 2-D node: axis 0 → [1, d], axis 1 → [t, 1].
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let (t, d) = self.dims2(x, "mean_axis")?;
        if axis > 1 {
            return Err(invalid("mean_axis", format!("axis {axis} out of range for 2-D")));
        }
        let src = &self.nodes[x].data;
        let (shape, data) = if axis == 0 {
            let inv = F::of(1.0 / t as f64);
            let mut out = vec![F::zero(); d];
            for r in 0..t {
                for c in 0..d {
                    out[c] = out[c] + src[r * d + c] * inv;
                }
            }
            (vec![1, d], out)
        } else {
            let inv = F::of(1.0 / d as f64);
            let mut out = vec![F::zero(); t];
            for r in 0..t {
                for c in 0..d {
                    out[r] = out[r] + src[r * d + c] * inv;
                }
            }
            (vec![t, 1], out)
        };
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(shape, data, rg, Op::MeanAxis { x, axis }))
    }

    /// Sum of all elements, as a [1,1] scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = F::zero();
        for &v in &self.nodes[x].data {
            s = s + v;
        }
        let rg = self.nodes[x].requires_grad;
        self.push(vec![1, 1], vec![s], rg, Op::SumAll { x })
    }

    /// Mean absolute error between `pred` and a constant target, restricted
    /// to the listed rows; averaged over |rows| × cols entries. The target
    /// never receives gradients. The subgradient of |·| at 0 is taken as 0.
    pub fn masked_l1(
        &mut self,
        pred: NodeId,
        target: &Matrix<F>,
        rows: &[usize],
    ) -> Result<NodeId, TensorError> {
        let (t, d) = self.dims2(pred, "masked_l1")?;
        if target.rows() != t || target.cols() != d {
            return Err(TensorError::ShapeMismatch {
                op: "masked_l1",
                lhs: self.nodes[pred].shape.clone(),
                rhs: vec![target.rows(), target.cols()],
            });
        }
        if rows.is_empty() {
            return Err(invalid("masked_l1", "no masked rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= t) {
            return Err(invalid("masked_l1", format!("masked row {bad} out of range for {t} rows")));
        }
        let denom = F::of(1.0 / (rows.len() * d) as f64);
        let mut s = F::zero();
        for &r in rows {
            for c in 0..d {
                s = s + (self.nodes[pred].data[r * d + c] - target.get(r, c)).abs() * denom;
            }
        }
        let rg = self.nodes[pred].requires_grad;
        Ok(self.push(
            vec![1, 1],
            vec![s],
            rg,
            Op::MaskedL1 { pred, target: target.data().to_vec(), rows: rows.to_vec() },
        ))
    }

    /// Mean over rows of −log softmax(logits)[target]; targets are class
    /// indices, one per row.
    pub fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, TensorError> {
        let (t, d) = self.dims2(logits, "cross_entropy_rows")?;
        if targets.len() != t {
            return Err(invalid(
                "cross_entropy_rows",
                format!("{} targets for {t} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= d) {
            return Err(invalid(
                "cross_entropy_rows",
                format!("target class {bad} out of range for {d} classes"),
            ));
        }
        let inv_t = F::of(1.0 / t as f64);
        let mut loss = F::zero();
        for r in 0..t {
            let row = &self.nodes[logits].data[r * d..(r + 1) * d];
            let mut max = F::neg_infinity();
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut lse = F::zero();
            for &v in row {
                lse = lse + (v - max).exp();
            }
            let lse = lse.ln() + max;
            loss = loss + (lse - row[targets[r]]) * inv_t;
        }
        let rg = self.nodes[logits].requires_grad;
        Ok(self.push(
            vec![1, 1],
            vec![loss],
            rg,
            Op::CrossEntropyRows { logits, targets: targets.to_vec() },
        ))
    }

    /// Σᵢ coeffs[i] · mats[i], where all mats share one shape and `coeffs`
    /// is a [1, n] node. Gradients flow into both the matrices and the
    /// coefficients.
    pub fn linear_combine(&mut self, mats: &[NodeId], coeffs: NodeId) -> Result<NodeId, TensorError> {
        if mats.is_empty() {
            return Err(invalid("linear_combine", "no inputs"));
        }
        let (cr, cn) = self.dims2(coeffs, "linear_combine")?;
        if cr != 1 || cn != mats.len() {
            return Err(invalid(
                "linear_combine",
                format!("{} coefficients for {} matrices", cr * cn, mats.len()),
            ));
        }
        let shape = self.nodes[mats[0]].shape.clone();
        for &m in mats {
            if self.nodes[m].shape != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "linear_combine",
                    lhs: shape,
                    rhs: self.nodes[m].shape.clone(),
                });
            }
        }
        let numel = self.nodes[mats[0]].data.len();
        let mut data = vec![F::zero(); numel];
        for (i, &m) in mats.iter().enumerate() {
            let w = self.nodes[coeffs].data[i];
            for (o, &v) in data.iter_mut().zip(&self.nodes[m].data) {
                *o = *o + w * v;
            }
        }
        let mut ids = mats.to_vec();
        ids.push(coeffs);
        let rg = self.any_grad(&ids);
        Ok(self.push(shape, data, rg, Op::LinearCombine { mats: mats.to_vec(), coeffs }))
    }

    // ────────────────────────── backward ──────────────────────────

    fn accumulate(&mut self, id: NodeId, contrib: &[F]) {
        let node = &mut self.nodes[id];
        if !node.requires_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![F::zero(); node.data.len()]);
        debug_assert_eq!(g.len(), contrib.len());
        for (a, b) in g.iter_mut().zip(contrib) {
            *a = *a + *b;
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across every
    /// use of a node, so parameters staged once and consumed by many layers
    /// receive the sum of all per-use gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss].data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.nodes[loss].shape.clone() });
        }
        if !self.nodes[loss].requires_grad {
            return Ok(()); // nothing trainable feeds the loss
        }
        self.nodes[loss].grad = Some(vec![F::one()]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.clone().expect("checked above");
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[1];
                    if self.nodes[a].requires_grad {
                        // dA = G · Bᵀ
                        let mut da = vec![F::zero(); m * k];
                        let bd = &self.nodes[b].data;
                        for i2 in 0..m {
                            for j in 0..n {
                                let g = grad[i2 * n + j];
                                if g == F::zero() {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i2 * k + p] = da[i2 * k + p] + g * bd[p * n + j];
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        // dB = Aᵀ · G
                        let mut db = vec![F::zero(); k * n];
                        let ad = &self.nodes[a].data;
                        for i2 in 0..m {
                            for p in 0..k {
                                let av = ad[i2 * k + p];
                                if av == F::zero() {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] = db[p * n + j] + av * grad[i2 * n + j];
                                }
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::Transpose { x } => {
                    let (c, r) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut dx = vec![F::zero(); r * c];
                    for i2 in 0..c {
                        for j in 0..r {
                            dx[j * c + i2] = grad[i2 * r + j];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Reshape { x } => self.accumulate(x, &grad),
                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Mul { a, b } => {
                    if self.nodes[a].requires_grad {
                        let da: Vec<F> =
                            grad.iter().zip(&self.nodes[b].data).map(|(&g, &v)| g * v).collect();
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b].requires_grad {
                        let db: Vec<F> =
                            grad.iter().zip(&self.nodes[a].data).map(|(&g, &v)| g * v).collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Scale { x, c } => {
                    let dx: Vec<F> = grad.iter().map(|&g| g * c).collect();
                    self.accumulate(x, &dx);
                }
                Op::AddRowBroadcast { x, bias } => {
                    let (t, d) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    self.accumulate(x, &grad);
                    if self.nodes[bias].requires_grad {
                        let mut db = vec![F::zero(); d];
                        for r in 0..t {
                            for c in 0..d {
                                db[c] = db[c] + grad[r * d + c];
                            }
                        }
                        self.accumulate(bias, &db);
                    }
                }
                Op::SoftmaxRows { x } => {
                    // ds_i = s_i · (g_i − Σ_j g_j s_j), per row
                    let (t, d) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let s = &self.nodes[i].data;
                    let mut dx = vec![F::zero(); t * d];
                    for r in 0..t {
                        let mut dot = F::zero();
                        for c in 0..d {
                            dot = dot + grad[r * d + c] * s[r * d + c];
                        }
                        for c in 0..d {
                            dx[r * d + c] = s[r * d + c] * (grad[r * d + c] - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let (t, d) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let inv_d = F::of(1.0 / d as f64);
                    let xd = &self.nodes[x].data;
                    let gd = &self.nodes[gamma].data;
                    let mut dx = vec![F::zero(); t * d];
                    let mut dgamma = vec![F::zero(); d];
                    let mut dbeta = vec![F::zero(); d];
                    for r in 0..t {
                        let row = &xd[r * d..(r + 1) * d];
                        let mut mean = F::zero();
                        for &v in row {
                            mean = mean + v;
                        }
                        mean = mean * inv_d;
                        let mut var = F::zero();
                        for &v in row {
                            let dv = v - mean;
                            var = var + dv * dv;
                        }
                        var = var * inv_d;
                        let inv_std = (var + eps).sqrt().recip();
                        // dxhat, then the two projection sums
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        let mut xhat = vec![F::zero(); d];
                        let mut dxhat = vec![F::zero(); d];
                        for c in 0..d {
                            xhat[c] = (row[c] - mean) * inv_std;
                            let g = grad[r * d + c];
                            dgamma[c] = dgamma[c] + g * xhat[c];
                            dbeta[c] = dbeta[c] + g;
                            dxhat[c] = g * gd[c];
                            sum_dxhat = sum_dxhat + dxhat[c];
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat[c] * xhat[c];
                        }
                        for c in 0..d {
                            dx[r * d + c] = inv_std
                                * (dxhat[c] - inv_d * sum_dxhat - inv_d * xhat[c] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::Gelu { x } => {
                    let dx: Vec<F> = grad
                        .iter()
                        .zip(&self.nodes[x].data)
                        .map(|(&g, &v)| g * gelu_grad_scalar(v))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Dropout { x, keep } => {
                    let dx: Vec<F> = grad.iter().zip(&keep).map(|(&g, &k)| g * k).collect();
                    self.accumulate(x, &dx);
                }
                Op::SliceCols { x, start } => {
                    let (t, w) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let d = self.nodes[x].shape[1];
                    let mut dx = vec![F::zero(); self.nodes[x].data.len()];
                    for r in 0..t {
                        for c in 0..w {
                            dx[r * d + start + c] = grad[r * w + c];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::ConcatCols { xs } => {
                    let t = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for &id in &xs {
                        let w = self.nodes[id].shape[1];
                        if self.nodes[id].requires_grad {
                            let mut dx = vec![F::zero(); t * w];
                            for r in 0..t {
                                dx[r * w..(r + 1) * w]
                                    .copy_from_slice(&grad[r * total + offset..r * total + offset + w]);
                            }
                            self.accumulate(id, &dx);
                        }
                        offset += w;
                    }
                }
                Op::MeanAxis { x, axis } => {
                    let (t, d) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let mut dx = vec![F::zero(); t * d];
                    if axis == 0 {
                        let inv = F::of(1.0 / t as f64);
                        for r in 0..t {
                            for c in 0..d {
                                dx[r * d + c] = grad[c] * inv;
                            }
                        }
                    } else {
                        let inv = F::of(1.0 / d as f64);
                        for r in 0..t {
                            for c in 0..d {
                                dx[r * d + c] = grad[r] * inv;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::SumAll { x } => {
                    let dx = vec![grad[0]; self.nodes[x].data.len()];
                    self.accumulate(x, &dx);
                }
                Op::MaskedL1 { pred, target, rows } => {
                    let d = self.nodes[pred].shape[1];
                    let denom = F::of(1.0 / (rows.len() * d) as f64);
                    let g = grad[0] * denom;
                    let mut dx = vec![F::zero(); self.nodes[pred].data.len()];
                    for &r in &rows {
                        for c in 0..d {
                            let diff = self.nodes[pred].data[r * d + c] - target[r * d + c];
                            let sign = if diff > F::zero() {
                                F::one()
                            } else if diff < F::zero() {
                                -F::one()
                            } else {
                                F::zero()
                            };
                            dx[r * d + c] = g * sign;
                        }
                    }
                    self.accumulate(pred, &dx);
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let (t, d) = (self.nodes[logits].shape[0], self.nodes[logits].shape[1]);
                    let inv_t = F::of(1.0 / t as f64);
                    let g = grad[0] * inv_t;
                    let mut dx = vec![F::zero(); t * d];
                    for r in 0..t {
                        let row = &self.nodes[logits].data[r * d..(r + 1) * d];
                        let mut sm = row.to_vec();
                        softmax_row_into(&mut sm);
                        for c in 0..d {
                            let indicator = if c == targets[r] { F::one() } else { F::zero() };
                            dx[r * d + c] = g * (sm[c] - indicator);
                        }
                    }
                    self.accumulate(logits, &dx);
                }
                Op::LinearCombine { mats, coeffs } => {
                    let mut dcoeffs = vec![F::zero(); mats.len()];
                    for (idx, &m) in mats.iter().enumerate() {
                        let w = self.nodes[coeffs].data[idx];
                        if self.nodes[m].requires_grad {
                            let dm: Vec<F> = grad.iter().map(|&g| g * w).collect();
                            self.accumulate(m, &dm);
                        }
                        if self.nodes[coeffs].requires_grad {
                            let mut dot = F::zero();
                            for (g, &v) in grad.iter().zip(&self.nodes[m].data) {
                                dot = dot + *g * v;
                            }
                            dcoeffs[idx] = dot;
                        }
                    }
                    self.accumulate(coeffs, &dcoeffs);
                }
            }
        }
        Ok(())
    }
}
