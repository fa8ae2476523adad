//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass and records
//! one backward rule per operation. Calling [`Tape::backward`] on a scalar
//! loss replays the records in reverse, accumulating gradients into every
//! tensor on a `requires_grad` path. The tape is rebuilt from scratch for
//! each training step.
//!
//! Shapes are row-major. Gradients only propagate into inputs that can reach
//! a trainable leaf, so frozen leaves never receive a gradient buffer.

use crate::scalar::Scalar;
use thiserror::Error;

/// Index of a tensor on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

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
    #[error("cross_entropy: target id {id} out of range for vocab size {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("backward already ran on this tape; build a fresh tape first")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// One dense tensor: shape, row-major value buffer, optional gradient buffer.
#[derive(Debug, Clone)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub grad: Option<Vec<S>>,
    pub requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Recorded operations. Each variant stores the input ids its backward rule
/// needs; `Attention` additionally saves the softmax probabilities from the
/// forward pass.
#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize },
    /// a[m,k] @ b[n,k]^T -> [m,n]; used for the tied output head.
    MatMulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    Relu { x: usize },
    Tanh { x: usize },
    Exp { x: usize },
    Neg { x: usize },
    Scale { x: usize, c: S },
    /// Multiply every element of `x` by the single element of `s`.
    MulScalar { x: usize, s: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize },
    CrossEntropy { logits: usize, targets: Vec<usize> },
    MeanRows { x: usize },
    Sum { x: usize },
    GatherRows { table: usize, indices: Vec<usize> },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        n_heads: usize,
        causal: bool,
        probs: Vec<S>,
    },
    WeightedSum { items: Vec<usize>, weights: usize },
}

const LAYERNORM_EPS: f64 = 1e-5;

/// Ordered record of executed operations plus the tensors they produced.
pub struct Tape<S> {
    nodes: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    backward_run: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Raw kernels
// ---------------------------------------------------------------------------

/// C[m,n] += A[m,k] @ B[k,n]. i-k-j order so the inner loop runs over
/// contiguous rows of B and C.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] @ B[n,k]^T. Row-by-row dot products.
pub fn matmul_nt_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            out_row[j] += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T @ B[m,n]. Accumulates outer products row by row.
pub fn matmul_tn_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// Numerically stable softmax of a slice (max-subtraction before exp).
pub fn stable_softmax<S: Scalar>(xs: &[S]) -> Vec<S> {
    let max = xs.iter().fold(S::neg_infinity(), |acc, &x| acc.maximum(x));
    let exps: Vec<S> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// A parameter buffer that lives outside any tape. Model structs hold these;
/// each training step stages them onto a fresh tape as leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> ParamTensor<S> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        ParamTensor {
            shape,
            data: vec![S::ZERO; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        ParamTensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// Normal(0, std) initialization.
    pub fn randn(rng: &mut crate::rng::Rng, shape: Vec<usize>, std: f64) -> Self {
        let numel = shape.iter().product();
        ParamTensor {
            shape,
            data: (0..numel)
                .map(|_| S::from_f64(rng.next_normal() * std))
                .collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Copy onto a tape as a leaf.
    pub fn stage(&self, tape: &mut Tape<S>, trainable: bool) -> Result<TensorId> {
        tape.leaf(self.data.clone(), self.shape.clone(), trainable)
    }
}

/// FNV-1a (64-bit) over the exact bit patterns of a parameter stream.
/// Used for frozen-base checks and dataset fingerprints.
pub fn fnv1a_update(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

pub const FNV_OFFSET: u64 = 0xCBF2_9CE4_8422_2325;

/// Checksum a sequence of parameter tensors in order. Values are widened to
/// f64 (exact for f32) so the checksum is precision-independent.
pub fn params_checksum<'a, S: Scalar + 'a>(
    params: impl IntoIterator<Item = &'a ParamTensor<S>>,
) -> u64 {
    let mut hash = FNV_OFFSET;
    for p in params {
        for &x in &p.data {
            hash = fnv1a_update(hash, &x.to_f64().to_bits().to_le_bytes());
        }
    }
    hash
}

// ---------------------------------------------------------------------------
// Tape: construction and forward ops
// ---------------------------------------------------------------------------

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            backward_run: false,
        }
    }

    /// Number of tensors currently on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Create a leaf tensor. Rejects shape/data length mismatches and
    /// non-finite entries.
    pub fn leaf(&mut self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(TensorError::Invalid {
                op: "leaf",
                msg: format!("shape {:?} does not describe {} elements", shape, data.len()),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::Invalid {
                op: "leaf",
                msg: "non-finite entry in leaf data".into(),
            });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<S>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool, op: Op<S>) -> TensorId {
        let id = self.nodes.len();
        self.nodes.push(Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
        });
        self.ops.push(op);
        TensorId(id)
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// First (and for losses, only) element.
    pub fn scalar(&self, id: TensorId) -> S {
        self.nodes[id.0].data[0]
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn shape2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("expected a 2-d tensor, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape2(a, "matmul")?;
        let (k2, n) = self.shape2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![S::ZERO; m * n];
        matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, vec![m, n], rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// a[m,k] @ b[n,k]^T; avoids materializing the transpose.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape2(a, "matmul_nt")?;
        let (n, k2) = self.shape2(b, "matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![S::ZERO; m * n];
        matmul_nt_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, vec![m, n], rg, Op::MatMulNT { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, shape, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Add a length-d bias vector to every row of x[n,d]. The only broadcast
    /// this graph needs.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, d) = self.shape2(x, "add_bias")?;
        if self.nodes[bias.0].data.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(n * d);
        {
            let bdata = &self.nodes[bias.0].data;
            for row in self.nodes[x.0].data.chunks_exact(d) {
                out.extend(row.iter().zip(bdata).map(|(&x, &b)| x + b));
            }
        }
        let rg = self.needs(&[x.0, bias.0]);
        Ok(self.push(out, vec![n, d], rg, Op::AddBias { x: x.0, bias: bias.0 }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, shape, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| v.maximum(S::ZERO))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, shape, rg, Op::Relu { x: x.0 }))
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<S> = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, shape, rg, Op::Tanh { x: x.0 }))
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<S> = self.nodes[x.0].data.iter().map(|&v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, shape, rg, Op::Exp { x: x.0 }))
    }

    pub fn neg(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<S> = self.nodes[x.0].data.iter().map(|&v| -v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, shape, rg, Op::Neg { x: x.0 }))
    }

    /// Multiply by a plain constant (not a tape node).
    pub fn scale(&mut self, x: TensorId, c: S) -> Result<TensorId> {
        let out: Vec<S> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, shape, rg, Op::Scale { x: x.0, c }))
    }

    /// Multiply every element of `x` by a single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(TensorError::Invalid {
                op: "mul_scalar",
                msg: format!(
                    "scale tensor must hold 1 element, has shape {:?}",
                    self.nodes[s.0].shape
                ),
            });
        }
        let sv = self.nodes[s.0].data[0];
        let out: Vec<S> = self.nodes[x.0].data.iter().map(|&v| v * sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(&[x.0, s.0]);
        Ok(self.push(out, shape, rg, Op::MulScalar { x: x.0, s: s.0 }))
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        if self.nodes[x.0].data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: "non-finite input".into(),
            });
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![S::ZERO; self.nodes[x.0].data.len()];
        {
            let data = &self.nodes[x.0].data;
            for o in 0..outer {
                for i in 0..inner {
                    let mut max = S::neg_infinity();
                    for a in 0..axis_len {
                        max = max.maximum(data[o * axis_len * inner + a * inner + i]);
                    }
                    let mut total = S::ZERO;
                    for a in 0..axis_len {
                        let idx = o * axis_len * inner + a * inner + i;
                        let e = (data[idx] - max).exp();
                        out[idx] = e;
                        total += e;
                    }
                    for a in 0..axis_len {
                        let idx = o * axis_len * inner + a * inner + i;
                        out[idx] = out[idx] / total;
                    }
                }
            }
        }
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, shape, rg, Op::Softmax { x: x.0, axis }))
    }

    /// Per-row normalization of x[n,d] to zero mean and unit variance
    /// (epsilon 1e-5 inside the square root), then `gain * xhat + bias`.
    pub fn layernorm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, d) = self.shape2(x, "layernorm")?;
        for (name, t) in [("gain", gain), ("bias", bias)] {
            if self.nodes[t.0].data.len() != d {
                return Err(TensorError::Invalid {
                    op: "layernorm",
                    msg: format!(
                        "{name} must have {d} elements, has shape {:?}",
                        self.nodes[t.0].shape
                    ),
                });
            }
        }
        let eps = S::from_f64(LAYERNORM_EPS);
        let inv_d = S::ONE / S::from_f64(d as f64);
        let mut out = Vec::with_capacity(n * d);
        {
            let gdat = &self.nodes[gain.0].data;
            let bdat = &self.nodes[bias.0].data;
            for row in self.nodes[x.0].data.chunks_exact(d) {
                let mean: S = row.iter().copied().sum::<S>() * inv_d;
                let var: S = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
                let inv_std = S::ONE / (var + eps).sqrt();
                for j in 0..d {
                    out.push((row[j] - mean) * inv_std * gdat[j] + bdat[j]);
                }
            }
        }
        let rg = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            out,
            vec![n, d],
            rg,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 },
        ))
    }

    /// Mean negative log-probability of `targets` under rows of `logits`.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (n, vocab) = self.shape2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("{n} logit rows but {} targets", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::TargetOutOfRange { id: bad, vocab });
        }
        let mut total = S::ZERO;
        for (row, &t) in self.nodes[logits.0].data.chunks_exact(vocab).zip(targets) {
            let max = row.iter().fold(S::neg_infinity(), |acc, &x| acc.maximum(x));
            let lse: S = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            total += lse - row[t];
        }
        let mean = total / S::from_f64(n as f64);
        let rg = self.needs(&[logits.0]);
        Ok(self.push(
            vec![mean],
            vec![1],
            rg,
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec() },
        ))
    }

    /// Column means of x[n,d], produced as a [1,d] row (pooling).
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, d) = self.shape2(x, "mean_rows")?;
        let inv_n = S::ONE / S::from_f64(n as f64);
        let mut out = vec![S::ZERO; d];
        for row in self.nodes[x.0].data.chunks_exact(d) {
            for j in 0..d {
                out[j] += row[j] * inv_n;
            }
        }
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, vec![1, d], rg, Op::MeanRows { x: x.0 }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let total: S = self.nodes[x.0].data.iter().copied().sum();
        let rg = self.needs(&[x.0]);
        Ok(self.push(vec![total], vec![1], rg, Op::Sum { x: x.0 }))
    }

    /// Select rows of a [rows,d] table; used for embedding lookups.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (rows, d) = self.shape2(table, "gather_rows")?;
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "empty index list".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row index {bad} out of range for table with {rows} rows"),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        {
            let data = &self.nodes[table.0].data;
            for &i in indices {
                out.extend_from_slice(&data[i * d..(i + 1) * d]);
            }
        }
        let rg = self.needs(&[table.0]);
        Ok(self.push(
            out,
            vec![indices.len(), d],
            rg,
            Op::GatherRows { table: table.0, indices: indices.to_vec() },
        ))
    }

    /// Scaled dot-product attention over `n_heads` head slices of q/k/v[n,d],
    /// optionally causal (row i attends to columns <= i). Scores are scaled
    /// by 1/sqrt(d/n_heads); output has shape [n,d].
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        n_heads: usize,
        causal: bool,
    ) -> Result<TensorId> {
        let (n, d) = self.shape2(q, "attention")?;
        for other in [k, v] {
            if self.nodes[other.0].shape != [n, d] {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: vec![n, d],
                    rhs: self.nodes[other.0].shape.clone(),
                });
            }
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("width {d} not divisible by {n_heads} heads"),
            });
        }
        let dh = d / n_heads;
        let inv_sqrt = S::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![S::ZERO; n * d];
        let mut probs = vec![S::ZERO; n_heads * n * n];
        {
            let qd = &self.nodes[q.0].data;
            let kd = &self.nodes[k.0].data;
            let vd = &self.nodes[v.0].data;
            let mut scores = vec![S::ZERO; n];
            for h in 0..n_heads {
                let off = h * dh;
                for i in 0..n {
                    let limit = if causal { i + 1 } else { n };
                    let q_row = &qd[i * d + off..i * d + off + dh];
                    for j in 0..limit {
                        let k_row = &kd[j * d + off..j * d + off + dh];
                        let mut dot = S::ZERO;
                        for p in 0..dh {
                            dot += q_row[p] * k_row[p];
                        }
                        scores[j] = dot * inv_sqrt;
                    }
                    let row_probs = stable_softmax(&scores[..limit]);
                    let p_base = h * n * n + i * n;
                    probs[p_base..p_base + limit].copy_from_slice(&row_probs);
                    let out_row = &mut out[i * d + off..i * d + off + dh];
                    for (j, &a) in row_probs.iter().enumerate() {
                        let v_row = &vd[j * d + off..j * d + off + dh];
                        for p in 0..dh {
                            out_row[p] += a * v_row[p];
                        }
                    }
                }
            }
        }
        let rg = self.needs(&[q.0, k.0, v.0]);
        Ok(self.push(
            out,
            vec![n, d],
            rg,
            Op::Attention { q: q.0, k: k.0, v: v.0, n_heads, causal, probs },
        ))
    }

    /// Attention probabilities saved by the [`Tape::attention`] call that
    /// produced `id`, laid out `[head][query][key]`. Test hook.
    pub fn attention_probs(&self, id: TensorId) -> Option<&[S]> {
        match &self.ops[id.0] {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// out = sum_k weights[k] * items[k]; all items share one shape and
    /// weights is a length-K vector.
    pub fn weighted_sum(&mut self, items: &[TensorId], weights: TensorId) -> Result<TensorId> {
        if items.is_empty() {
            return Err(TensorError::Invalid {
                op: "weighted_sum",
                msg: "no items to combine".into(),
            });
        }
        if self.nodes[weights.0].data.len() != items.len() {
            return Err(TensorError::Invalid {
                op: "weighted_sum",
                msg: format!(
                    "{} items but {} weights",
                    items.len(),
                    self.nodes[weights.0].data.len()
                ),
            });
        }
        let shape = self.nodes[items[0].0].shape.clone();
        for &it in &items[1..] {
            if self.nodes[it.0].shape != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: shape,
                    rhs: self.nodes[it.0].shape.clone(),
                });
            }
        }
        let numel: usize = shape.iter().product();
        let mut out = vec![S::ZERO; numel];
        for (idx, &it) in items.iter().enumerate() {
            let w = self.nodes[weights.0].data[idx];
            for (o, &x) in out.iter_mut().zip(&self.nodes[it.0].data) {
                *o += w * x;
            }
        }
        let mut input_ids: Vec<usize> = items.iter().map(|t| t.0).collect();
        input_ids.push(weights.0);
        let rg = self.needs(&input_ids);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::WeightedSum { items: items.iter().map(|t| t.0).collect(), weights: weights.0 },
        ))
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

impl<S: Scalar> Tape<S> {
    /// Reverse sweep from a scalar loss. Populates `grad` on every tensor on
    /// a `requires_grad` path that feeds the loss; untouched tensors keep
    /// `grad = None`. A tape can only run backward once.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_run {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.backward_run = true;
        self.nodes[loss.0].grad = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = self.nodes[i].grad.take().expect("grad checked above");
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            self.apply_backward(&op, i, &grad);
            self.ops[i] = op;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn acc_into(&mut self, node: usize, delta: &[S]) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let len = self.nodes[node].data.len();
        let buf = self.nodes[node]
            .grad
            .get_or_insert_with(|| vec![S::ZERO; len]);
        for (g, &d) in buf.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn apply_backward(&mut self, op: &Op<S>, out_id: usize, grad: &[S]) {
        match op {
            Op::Leaf => {}

            &Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    let mut da = vec![S::ZERO; m * k];
                    matmul_nt_raw(grad, &self.nodes[b].data, m, n, k, &mut da);
                    self.acc_into(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![S::ZERO; k * n];
                    matmul_tn_raw(&self.nodes[a].data, grad, m, k, n, &mut db);
                    self.acc_into(b, &db);
                }
            }

            &Op::MatMulNT { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[0];
                if self.nodes[a].requires_grad {
                    let mut da = vec![S::ZERO; m * k];
                    matmul_raw(grad, &self.nodes[b].data, m, n, k, &mut da);
                    self.acc_into(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![S::ZERO; n * k];
                    matmul_tn_raw(grad, &self.nodes[a].data, m, n, k, &mut db);
                    self.acc_into(b, &db);
                }
            }

            &Op::Add { a, b } => {
                self.acc_into(a, grad);
                self.acc_into(b, grad);
            }

            &Op::AddBias { x, bias } => {
                self.acc_into(x, grad);
                if self.nodes[bias].requires_grad {
                    let d = self.nodes[bias].data.len();
                    let mut db = vec![S::ZERO; d];
                    for row in grad.chunks_exact(d) {
                        for (g, &gy) in db.iter_mut().zip(row) {
                            *g += gy;
                        }
                    }
                    self.acc_into(bias, &db);
                }
            }

            &Op::Mul { a, b } => {
                if self.nodes[a].requires_grad {
                    let da: Vec<S> = grad
                        .iter()
                        .zip(&self.nodes[b].data)
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.acc_into(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let db: Vec<S> = grad
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.acc_into(b, &db);
                }
            }

            &Op::Relu { x } => {
                let dx: Vec<S> = grad
                    .iter()
                    .zip(&self.nodes[x].data)
                    .map(|(&g, &v)| if v > S::ZERO { g } else { S::ZERO })
                    .collect();
                self.acc_into(x, &dx);
            }

            &Op::Tanh { x } => {
                let dx: Vec<S> = grad
                    .iter()
                    .zip(&self.nodes[out_id].data)
                    .map(|(&g, &t)| g * (S::ONE - t * t))
                    .collect();
                self.acc_into(x, &dx);
            }

            &Op::Exp { x } => {
                let dx: Vec<S> = grad
                    .iter()
                    .zip(&self.nodes[out_id].data)
                    .map(|(&g, &e)| g * e)
                    .collect();
                self.acc_into(x, &dx);
            }

            &Op::Neg { x } => {
                let dx: Vec<S> = grad.iter().map(|&g| -g).collect();
                self.acc_into(x, &dx);
            }

            &Op::Scale { x, c } => {
                let dx: Vec<S> = grad.iter().map(|&g| g * c).collect();
                self.acc_into(x, &dx);
            }

            &Op::MulScalar { x, s } => {
                if self.nodes[x].requires_grad {
                    let sv = self.nodes[s].data[0];
                    let dx: Vec<S> = grad.iter().map(|&g| g * sv).collect();
                    self.acc_into(x, &dx);
                }
                if self.nodes[s].requires_grad {
                    let dot: S = grad
                        .iter()
                        .zip(&self.nodes[x].data)
                        .map(|(&g, &xv)| g * xv)
                        .sum();
                    self.acc_into(s, &[dot]);
                }
            }

            &Op::Softmax { x, axis } => {
                let shape = &self.nodes[out_id].shape;
                let axis_len = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let out = &self.nodes[out_id].data;
                let mut dx = vec![S::ZERO; out.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let mut dot = S::ZERO;
                        for a in 0..axis_len {
                            let idx = o * axis_len * inner + a * inner + ii;
                            dot += grad[idx] * out[idx];
                        }
                        for a in 0..axis_len {
                            let idx = o * axis_len * inner + a * inner + ii;
                            dx[idx] = out[idx] * (grad[idx] - dot);
                        }
                    }
                }
                self.acc_into(x, &dx);
            }

            &Op::LayerNorm { x, gain, bias } => {
                let d = self.nodes[gain].data.len();
                let d_s = S::from_f64(d as f64);
                let eps = S::from_f64(LAYERNORM_EPS);
                let inv_d = S::ONE / d_s;
                let n = self.nodes[x].data.len() / d;
                let mut dx = vec![S::ZERO; n * d];
                let mut dgain = vec![S::ZERO; d];
                let mut dbias = vec![S::ZERO; d];
                {
                    let xdata = &self.nodes[x].data;
                    let gdata = &self.nodes[gain].data;
                    for r in 0..n {
                        let row = &xdata[r * d..(r + 1) * d];
                        let g_row = &grad[r * d..(r + 1) * d];
                        let mean: S = row.iter().copied().sum::<S>() * inv_d;
                        let var: S =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
                        let inv_std = S::ONE / (var + eps).sqrt();
                        let xhat: Vec<S> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<S> =
                            g_row.iter().zip(gdata).map(|(&gy, &gm)| gy * gm).collect();
                        let sum_dxhat: S = dxhat.iter().copied().sum();
                        let sum_dxhat_xhat: S =
                            dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dgain[j] += g_row[j] * xhat[j];
                            dbias[j] += g_row[j];
                            dx[r * d + j] = inv_std
                                * inv_d
                                * (d_s * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
                self.acc_into(x, &dx);
                self.acc_into(gain, &dgain);
                self.acc_into(bias, &dbias);
            }

            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                let vocab = self.nodes[logits].shape[1];
                let scale = grad[0] / S::from_f64(targets.len() as f64);
                let mut dl = vec![S::ZERO; self.nodes[logits].data.len()];
                {
                    let ldata = &self.nodes[logits].data;
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &ldata[r * vocab..(r + 1) * vocab];
                        let sm = stable_softmax(row);
                        for (j, &p) in sm.iter().enumerate() {
                            let delta = if j == t { S::ONE } else { S::ZERO };
                            dl[r * vocab + j] = (p - delta) * scale;
                        }
                    }
                }
                self.acc_into(logits, &dl);
            }

            &Op::MeanRows { x } => {
                let d = self.nodes[out_id].data.len();
                let n = self.nodes[x].data.len() / d;
                let inv_n = S::ONE / S::from_f64(n as f64);
                let mut dx = vec![S::ZERO; n * d];
                for row in dx.chunks_exact_mut(d) {
                    for (gx, &gy) in row.iter_mut().zip(grad) {
                        *gx = gy * inv_n;
                    }
                }
                self.acc_into(x, &dx);
            }

            &Op::Sum { x } => {
                let gy = grad[0];
                let dx = vec![gy; self.nodes[x].data.len()];
                self.acc_into(x, &dx);
            }

            Op::GatherRows { table, indices } => {
                let table = *table;
                if self.nodes[table].requires_grad {
                    let d = self.nodes[table].shape[1];
                    let mut dt = vec![S::ZERO; self.nodes[table].data.len()];
                    for (r, &idx) in indices.iter().enumerate() {
                        let src = &grad[r * d..(r + 1) * d];
                        let dst = &mut dt[idx * d..(idx + 1) * d];
                        for (gx, &gy) in dst.iter_mut().zip(src) {
                            *gx += gy;
                        }
                    }
                    self.acc_into(table, &dt);
                }
            }

            Op::Attention { q, k, v, n_heads, causal, probs } => {
                let (q, k, v, n_heads, causal) = (*q, *k, *v, *n_heads, *causal);
                let n = self.nodes[q].shape[0];
                let d = self.nodes[q].shape[1];
                let dh = d / n_heads;
                let inv_sqrt = S::from_f64(1.0 / (dh as f64).sqrt());
                let mut dq = vec![S::ZERO; n * d];
                let mut dk = vec![S::ZERO; n * d];
                let mut dv = vec![S::ZERO; n * d];
                {
                    let qd = &self.nodes[q].data;
                    let kd = &self.nodes[k].data;
                    let vd = &self.nodes[v].data;
                    let mut d_attn = vec![S::ZERO; n];
                    for h in 0..n_heads {
                        let off = h * dh;
                        for qi in 0..n {
                            let limit = if causal { qi + 1 } else { n };
                            let g_row = &grad[qi * d + off..qi * d + off + dh];
                            let p_row = &probs[h * n * n + qi * n..h * n * n + qi * n + limit];
                            // dV plus the gradient wrt the attention probs.
                            let mut dot_pa = S::ZERO;
                            for j in 0..limit {
                                let v_row = &vd[j * d + off..j * d + off + dh];
                                let mut da = S::ZERO;
                                for p in 0..dh {
                                    da += g_row[p] * v_row[p];
                                }
                                d_attn[j] = da;
                                dot_pa += da * p_row[j];
                                let dv_row = &mut dv[j * d + off..j * d + off + dh];
                                for p in 0..dh {
                                    dv_row[p] += p_row[j] * g_row[p];
                                }
                            }
                            // Softmax backward, then into q and k.
                            let q_row = &qd[qi * d + off..qi * d + off + dh];
                            for j in 0..limit {
                                let ds = p_row[j] * (d_attn[j] - dot_pa) * inv_sqrt;
                                let k_row = &kd[j * d + off..j * d + off + dh];
                                let dq_row = &mut dq[qi * d + off..qi * d + off + dh];
                                for p in 0..dh {
                                    dq_row[p] += ds * k_row[p];
                                }
                                let dk_row = &mut dk[j * d + off..j * d + off + dh];
                                for p in 0..dh {
                                    dk_row[p] += ds * q_row[p];
                                }
                            }
                        }
                    }
                }
                self.acc_into(q, &dq);
                self.acc_into(k, &dk);
                self.acc_into(v, &dv);
            }

            Op::WeightedSum { items, weights } => {
                let weights = *weights;
                for (idx, &it) in items.iter().enumerate() {
                    if self.nodes[it].requires_grad {
                        let w = self.nodes[weights].data[idx];
                        let di: Vec<S> = grad.iter().map(|&g| g * w).collect();
                        self.acc_into(it, &di);
                    }
                }
                if self.nodes[weights].requires_grad {
                    let mut dw = vec![S::ZERO; items.len()];
                    for (idx, &it) in items.iter().enumerate() {
                        dw[idx] = grad
                            .iter()
                            .zip(&self.nodes[it].data)
                            .map(|(&g, &x)| g * x)
                            .sum();
                    }
                    self.acc_into(weights, &dw);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_close, finite_difference_grads};
    use crate::rng::Rng;

    fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.next_normal()).collect()
    }

    /// Build `op(params...)`, project the output onto a fixed random vector,
    /// and return the scalar loss. Projection (rather than a plain sum) keeps
    /// the check sensitive for ops like softmax whose outputs sum to a
    /// constant.
    fn projected_loss<F>(
        params: &[Vec<f64>],
        shapes: &[Vec<usize>],
        projection: &[f64],
        build: &F,
    ) -> f64
    where
        F: Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
    {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params
            .iter()
            .zip(shapes)
            .map(|(d, s)| tape.leaf(d.clone(), s.clone(), true).unwrap())
            .collect();
        let out = build(&mut tape, &ids);
        let shape = tape.shape(out).to_vec();
        let proj = tape.constant(projection.to_vec(), shape).unwrap();
        let prod = tape.mul(out, proj).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.scalar(loss)
    }

    /// Analytic gradients vs central finite differences (h = 1e-5, f64),
    /// worst relative error below 1e-4, across `n_seeds` random inputs.
    fn fd_check_op<F>(label: &str, n_seeds: u64, shapes: &[Vec<usize>], build: F)
    where
        F: Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
    {
        for seed in 0..n_seeds {
            let mut rng = Rng::derive(0xF00D, &[seed]);
            let params: Vec<Vec<f64>> = shapes
                .iter()
                .map(|s| randn(&mut rng, s.iter().product()))
                .collect();

            // Discover output size, then fix the projection.
            let mut probe = Tape::new();
            let probe_ids: Vec<TensorId> = params
                .iter()
                .zip(shapes)
                .map(|(d, s)| probe.leaf(d.clone(), s.clone(), true).unwrap())
                .collect();
            let probe_out = build(&mut probe, &probe_ids);
            let out_numel: usize = probe.shape(probe_out).iter().product();
            let projection = randn(&mut rng, out_numel);

            // Analytic pass.
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = params
                .iter()
                .zip(shapes)
                .map(|(d, s)| tape.leaf(d.clone(), s.clone(), true).unwrap())
                .collect();
            let out = build(&mut tape, &ids);
            let shape = tape.shape(out).to_vec();
            let proj = tape.constant(projection.clone(), shape).unwrap();
            let prod = tape.mul(out, proj).unwrap();
            let loss = tape.sum(prod).unwrap();
            tape.backward(loss).unwrap();

            let numeric = finite_difference_grads(
                |p| projected_loss(p, shapes, &projection, &build),
                &params,
                1e-5,
            );
            for (i, id) in ids.iter().enumerate() {
                let analytic = tape.grad(*id).unwrap_or_else(|| {
                    panic!("{label} seed {seed}: param {i} received no gradient")
                });
                assert_close(&format!("{label} seed {seed} param {i}"), analytic, &numeric[i], 1e-4);
            }
        }
    }

    // -- forward values -----------------------------------------------------

    #[test]
    fn matmul_identity() {
        let mut tape: Tape<f64> = Tape::new();
        let eye = tape.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let m = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let lhs = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.data(lhs), &[1.0, 2.0, 3.0, 4.0]);
        let rhs = tape.matmul(m, eye).unwrap();
        assert_eq!(tape.data(rhs), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = tape.constant(vec![0.0; 8], vec![2, 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "got: {msg}");
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![-1.0, 0.0, 2.0], vec![1, 3]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1.5, -2.5, 3.0], vec![1, 3]).unwrap();
        let z = tape.constant(vec![0.0; 3], vec![1, 3]).unwrap();
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![0.0; 3], vec![1, 3]).unwrap();
        let y = tape.constant(vec![0.0; 4], vec![1, 4]).unwrap();
        assert!(tape.add(x, y).is_err());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        for &p in tape.data(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_two_logit_value() {
        // exp(2)/(exp(2)+1) = 0.8808 to four decimals.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![2.0, 0.0], vec![2]).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.data(y)[0] - 0.8808).abs() < 5e-5);
        assert!((tape.data(y)[1] - 0.1192).abs() < 5e-5);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1000.0, 0.0], vec![2]).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let out = tape.data(y);
        assert!(out.iter().all(|p| p.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = Rng::new(31);
        for _ in 0..20 {
            let data = randn(&mut rng, 12);
            let shifted: Vec<f64> = data.iter().map(|x| x + 7.25).collect();
            let mut tape: Tape<f64> = Tape::new();
            let a = tape.constant(data, vec![3, 4]).unwrap();
            let b = tape.constant(shifted, vec![3, 4]).unwrap();
            let sa = tape.softmax(a, 1).unwrap();
            let sb = tape.softmax(b, 1).unwrap();
            for row in tape.data(sa).chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            for (x, y) in tape.data(sa).iter().zip(tape.data(sb)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.constant(vec![0.0; 30], vec![3, 10]).unwrap();
        let loss = tape.cross_entropy(logits, &[0, 5, 9]).unwrap();
        assert!((tape.scalar(loss) - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let mut data = vec![0.0; 8];
        data[2] = 50.0;
        let logits = tape.constant(data, vec![1, 8]).unwrap();
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        assert!(tape.scalar(loss) < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.constant(vec![0.0; 8], vec![2, 4]).unwrap();
        let err = tape.cross_entropy(logits, &[1, 4]).unwrap_err();
        assert!(matches!(err, TensorError::TargetOutOfRange { id: 4, vocab: 4 }));
    }

    #[test]
    fn layernorm_constant_row_goes_to_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![3.0; 4], vec![1, 4]).unwrap();
        let g = tape.constant(vec![1.0; 4], vec![4]).unwrap();
        let b = tape.constant(vec![0.0; 4], vec![4]).unwrap();
        let y = tape.layernorm(x, g, b).unwrap();
        for &v in tape.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_standardized_row_is_unchanged() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1.0, -1.0], vec![1, 2]).unwrap();
        let g = tape.constant(vec![1.0; 2], vec![2]).unwrap();
        let b = tape.constant(vec![0.0; 2], vec![2]).unwrap();
        let y = tape.layernorm(x, g, b).unwrap();
        assert!((tape.data(y)[0] - 1.0).abs() < 1e-4);
        assert!((tape.data(y)[1] + 1.0).abs() < 1e-4);
    }

    // -- backward -----------------------------------------------------------

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0], vec![1, 3], true).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 0.5], vec![1, 3], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0], vec![1], true).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![1, 2], true).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn frozen_leaf_receives_no_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![1, 2], true).unwrap();
        let frozen = tape.leaf(vec![3.0, 4.0], vec![1, 2], false).unwrap();
        let prod = tape.mul(x, frozen).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(frozen).is_none());
    }

    #[test]
    fn unreachable_leaf_untouched_by_backward() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![2.0], vec![1], true).unwrap();
        let unused = tape.leaf(vec![5.0], vec![1], true).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(unused).is_none());
    }

    // -- finite-difference checks, >= 10 seeds each --------------------------

    #[test]
    fn fd_matmul() {
        fd_check_op("matmul", 10, &[vec![3, 4], vec![4, 2]], |t, p| {
            t.matmul(p[0], p[1]).unwrap()
        });
    }

    #[test]
    fn fd_matmul_nt() {
        fd_check_op("matmul_nt", 10, &[vec![3, 4], vec![5, 4]], |t, p| {
            t.matmul_nt(p[0], p[1]).unwrap()
        });
    }

    #[test]
    fn fd_elementwise_mul() {
        fd_check_op("mul", 10, &[vec![2, 3], vec![2, 3]], |t, p| {
            t.mul(p[0], p[1]).unwrap()
        });
    }

    #[test]
    fn fd_add_bias() {
        fd_check_op("add_bias", 10, &[vec![3, 4], vec![4]], |t, p| {
            t.add_bias(p[0], p[1]).unwrap()
        });
    }

    #[test]
    fn fd_relu_tanh_exp_neg() {
        fd_check_op("relu", 10, &[vec![2, 5]], |t, p| t.relu(p[0]).unwrap());
        fd_check_op("tanh", 10, &[vec![2, 5]], |t, p| t.tanh(p[0]).unwrap());
        fd_check_op("exp", 10, &[vec![2, 5]], |t, p| t.exp(p[0]).unwrap());
        fd_check_op("neg", 10, &[vec![2, 5]], |t, p| t.neg(p[0]).unwrap());
    }

    #[test]
    fn fd_softmax() {
        fd_check_op("softmax", 10, &[vec![3, 4]], |t, p| t.softmax(p[0], 1).unwrap());
        fd_check_op("softmax_axis0", 10, &[vec![4]], |t, p| t.softmax(p[0], 0).unwrap());
    }

    #[test]
    fn fd_layernorm() {
        fd_check_op("layernorm", 10, &[vec![3, 5], vec![5], vec![5]], |t, p| {
            t.layernorm(p[0], p[1], p[2]).unwrap()
        });
    }

    #[test]
    fn fd_cross_entropy() {
        fd_check_op("cross_entropy", 10, &[vec![4, 7]], |t, p| {
            t.cross_entropy(p[0], &[0, 3, 6, 2]).unwrap()
        });
    }

    #[test]
    fn fd_mean_rows_and_scale() {
        fd_check_op("mean_rows", 10, &[vec![3, 4]], |t, p| t.mean_rows(p[0]).unwrap());
        fd_check_op("scale", 10, &[vec![2, 3]], |t, p| t.scale(p[0], 1.7).unwrap());
    }

    #[test]
    fn fd_mul_scalar() {
        fd_check_op("mul_scalar", 10, &[vec![2, 3], vec![1]], |t, p| {
            t.mul_scalar(p[0], p[1]).unwrap()
        });
    }

    #[test]
    fn fd_gather_rows_with_repeats() {
        fd_check_op("gather_rows", 10, &[vec![5, 3]], |t, p| {
            t.gather_rows(p[0], &[0, 2, 2, 4]).unwrap()
        });
    }

    #[test]
    fn fd_attention_causal_and_bidirectional() {
        for causal in [true, false] {
            fd_check_op(
                if causal { "attention_causal" } else { "attention_full" },
                10,
                &[vec![4, 6], vec![4, 6], vec![4, 6]],
                move |t, p| t.attention(p[0], p[1], p[2], 2, causal).unwrap(),
            );
        }
    }

    #[test]
    fn fd_weighted_sum() {
        fd_check_op(
            "weighted_sum",
            10,
            &[vec![2, 3], vec![2, 3], vec![2, 3], vec![3]],
            |t, p| t.weighted_sum(&p[..3], p[3]).unwrap(),
        );
    }

    // -- op-level structure checks -------------------------------------------

    #[test]
    fn attention_single_token_weight_is_one() {
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = Rng::new(3);
        let q = tape.constant(randn(&mut rng, 4), vec![1, 4]).unwrap();
        let k = tape.constant(randn(&mut rng, 4), vec![1, 4]).unwrap();
        let v_data = randn(&mut rng, 4);
        let v = tape.constant(v_data.clone(), vec![1, 4]).unwrap();
        let out = tape.attention(q, k, v, 2, true).unwrap();
        assert_eq!(tape.data(out), &v_data[..]);
        assert_eq!(tape.attention_probs(out).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        // Perturb q/k/v at position 3; rows 0..3 of the output must be
        // bit-identical.
        let mut rng = Rng::new(17);
        let (n, d) = (4, 6);
        let q = randn(&mut rng, n * d);
        let k = randn(&mut rng, n * d);
        let v = randn(&mut rng, n * d);
        let run = |q: &[f64], k: &[f64], v: &[f64]| {
            let mut tape: Tape<f64> = Tape::new();
            let qt = tape.constant(q.to_vec(), vec![n, d]).unwrap();
            let kt = tape.constant(k.to_vec(), vec![n, d]).unwrap();
            let vt = tape.constant(v.to_vec(), vec![n, d]).unwrap();
            let out = tape.attention(qt, kt, vt, 2, true).unwrap();
            tape.data(out).to_vec()
        };
        let base = run(&q, &k, &v);
        let mut q2 = q.clone();
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for buf in [&mut q2, &mut k2, &mut v2] {
            for x in &mut buf[3 * d..] {
                *x += 10.0;
            }
        }
        let bumped = run(&q2, &k2, &v2);
        assert_eq!(&base[..3 * d], &bumped[..3 * d]);
        assert_ne!(&base[3 * d..], &bumped[3 * d..]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = Rng::new(99);
            let mut tape: Tape<f64> = Tape::new();
            let a = tape.leaf(randn(&mut rng, 12), vec![3, 4], true).unwrap();
            let b = tape.leaf(randn(&mut rng, 8), vec![4, 2], true).unwrap();
            let mm = tape.matmul(a, b).unwrap();
            let act = tape.tanh(mm).unwrap();
            let loss = tape.sum(act).unwrap();
            tape.scalar(loss).to_bits()
        };
        assert_eq!(run(), run());
    }
}
