//! Reverse-mode automatic differentiation on a linear operation tape.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Each
//! operation records its inputs and enough metadata to run its backward
//! rule; [`Tape::backward`] replays the tape in reverse and accumulates
//! gradients additively across fan-out. Ops are recorded in topological
//! order by construction, so the reverse sweep visits each node once.
//!
//! Every operation checks its output for NaN/Inf and fails rather than
//! letting non-finite values propagate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{fl, matmul_raw, transpose_raw, NumericsError, Scalar, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel target for cross-entropy rows that must not contribute.
pub const IGNORE_INDEX: usize = usize::MAX;

enum Op<F> {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: F },
    Relu { x: Var },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    MaskedSoftmax { x: Var, key_valid: Vec<bool> },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: F },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Sum { x: Var },
    Gather { table: Var, index: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    MeanRowsMasked { x: Var, keep: Vec<bool> },
    Reshape { x: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    GlobalAvgPool { x: Var },
    ChwToRows { x: Var },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Wengert list: ordered record of operations plus their values.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
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

    /// Register an input value. Only leaves with `requires_grad` receive
    /// gradients after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(id)
    }

    /// Register a value that never needs a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it was computed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(id))
    }

    // ---- operations ------------------------------------------------------

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let req = self.requires(a) || self.requires(b);
        self.push("matmul", value, Op::Matmul { a, b }, req)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "transpose",
                left: tx.shape().to_vec(),
                right: vec![],
            });
        }
        let (r, c) = (tx.rows(), tx.cols());
        let value = Tensor::new(vec![c, r], transpose_raw(tx.data(), r, c))?;
        let req = self.requires(x);
        self.push("transpose", value, Op::Transpose { x }, req)
    }

    /// Element-wise sum of two tensors of identical shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        self.push("add", value, Op::Add { a, b }, req)
    }

    /// Element-wise product of two tensors of identical shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        self.push("mul", value, Op::Mul { a, b }, req)
    }

    /// Add a rank-1 bias along the last axis of a rank-2 tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.rank() != 1 || tb.len() != tx.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let cols = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % cols])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let req = self.requires(x) || self.requires(bias);
        self.push("add_bias", value, Op::AddBias { x, bias }, req)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let req = self.requires(x);
        self.push("scale", value, Op::Scale { x, c }, req)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let req = self.requires(x);
        self.push("relu", value, Op::Relu { x }, req)
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_value(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let req = self.requires(x);
        self.push("gelu", value, Op::Gelu { x }, req)
    }

    /// Exp-normalization along `axis` with max-subtraction for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(NumericsError::InvalidAxis {
                op: "softmax",
                axis,
                rank: tx.rank(),
            });
        }
        let (outer, len, inner) = axis_strides(tx.shape(), axis);
        let mut data = tx.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..len {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut sum = F::zero();
                for j in 0..len {
                    let e = (data[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    data[base + j * inner] = data[base + j * inner] / sum;
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let req = self.requires(x);
        self.push("softmax", value, Op::Softmax { x, axis }, req)
    }

    /// Row-wise softmax over the last axis of a rank-2 tensor, restricted to
    /// positions where `key_valid` is true. Invalid positions get weight
    /// exactly zero and receive exactly zero gradient.
    pub fn masked_softmax(&mut self, x: Var, key_valid: &[bool]) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.cols() != key_valid.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_softmax",
                left: tx.shape().to_vec(),
                right: vec![key_valid.len()],
            });
        }
        if !key_valid.iter().any(|&v| v) {
            return Err(NumericsError::BadValue {
                op: "masked_softmax",
                msg: format!("no valid key positions"),
            });
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mut mx = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if key_valid[j] {
                    mx = mx.max(v);
                }
            }
            let mut sum = F::zero();
            for (j, &v) in row.iter().enumerate() {
                if key_valid[j] {
                    let e = (v - mx).exp();
                    data[r * cols + j] = e;
                    sum = sum + e;
                }
            }
            for j in 0..cols {
                if key_valid[j] {
                    data[r * cols + j] = data[r * cols + j] / sum;
                }
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let req = self.requires(x);
        self.push(
            "masked_softmax",
            value,
            Op::MaskedSoftmax {
                x,
                key_valid: key_valid.to_vec(),
            },
            req,
        )
    }

    /// Normalize the last axis to zero mean / unit variance, then apply the
    /// learned affine `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var, NumericsError> {
        if eps <= F::zero() {
            return Err(NumericsError::BadValue {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let last = *tx.shape().last().unwrap_or(&0);
        if tg.shape() != [last] || tb.shape() != [last] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = tx.len() / last;
        let mut data = vec![F::zero(); tx.len()];
        let n = fl::<F>(last as f64);
        for r in 0..rows {
            let row = &tx.data()[r * last..(r + 1) * last];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<F>()
                / n;
            let denom = (var + eps).sqrt();
            for j in 0..last {
                let xhat = (row[j] - mean) / denom;
                data[r * last + j] = tg.data()[j] * xhat + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, eps }, req)
    }

    /// Mean negative log-softmax probability over rows whose target is not
    /// [`IGNORE_INDEX`]. Errors if every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.rows() != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let classes = tl.cols();
        let mut loss = F::zero();
        let mut n_valid = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            if t >= classes {
                return Err(NumericsError::BadValue {
                    op: "cross_entropy",
                    msg: format!("target {t} out of range for {classes} classes (row {r})"),
                });
            }
            let row = &tl.data()[r * classes..(r + 1) * classes];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln() + mx;
            loss = loss + (lse - row[t]);
            n_valid += 1;
        }
        if n_valid == 0 {
            return Err(NumericsError::EmptyLoss);
        }
        let value = Tensor::scalar(loss / fl::<F>(n_valid as f64));
        let req = self.requires(logits);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            req,
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let value = Tensor::scalar(tx.data().iter().copied().sum::<F>());
        let req = self.requires(x);
        self.push("sum", value, Op::Sum { x }, req)
    }

    /// Select rows of a rank-2 tensor by index (embedding lookup / row
    /// selection). Backward is scatter-add.
    pub fn gather(&mut self, table: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "gather",
                left: tt.shape().to_vec(),
                right: vec![],
            });
        }
        if index.is_empty() {
            return Err(NumericsError::BadValue {
                op: "gather",
                msg: format!("empty index list"),
            });
        }
        let (rows, cols) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(NumericsError::BadValue {
                    op: "gather",
                    msg: format!("row index {i} out of range for {rows} rows"),
                });
            }
            data.extend_from_slice(&tt.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![index.len(), cols], data)?;
        let req = self.requires(table);
        self.push(
            "gather",
            value,
            Op::Gather {
                table,
                index: index.to_vec(),
            },
            req,
        )
    }

    /// Stack rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::BadValue {
                op: "concat_rows",
                msg: format!("no parts"),
            });
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.rank() != 2 || tp.cols() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: tp.shape().to_vec(),
                });
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(
            "concat_rows",
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            req,
        )
    }

    /// Take a contiguous column range of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        if tx.rank() != 2 || start + len > tx.cols() || len == 0 {
            return Err(NumericsError::BadValue {
                op: "slice_cols",
                msg: format!(
                    "columns {start}..{} invalid for shape {:?}",
                    start + len,
                    tx.shape()
                ),
            });
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        let req = self.requires(x);
        self.push("slice_cols", value, Op::SliceCols { x, start, len }, req)
    }

    /// Concatenate rank-2 tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::BadValue {
                op: "concat_cols",
                msg: format!("no parts"),
            });
        }
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            let tp = self.value(p);
            if tp.rank() != 2 || tp.rows() != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: tp.shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (pi, &p) in parts.iter().enumerate() {
                let tp = self.value(p);
                data.extend_from_slice(&tp.data()[r * widths[pi]..(r + 1) * widths[pi]]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(
            "concat_cols",
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            req,
        )
    }

    /// Mean over the rows of a rank-2 tensor restricted to `keep` positions.
    pub fn mean_rows_masked(&mut self, x: Var, keep: &[bool]) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        if tx.rank() != 2 || tx.rows() != keep.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "mean_rows_masked",
                left: tx.shape().to_vec(),
                right: vec![keep.len()],
            });
        }
        let n = keep.iter().filter(|&&k| k).count();
        if n == 0 {
            return Err(NumericsError::BadValue {
                op: "mean_rows_masked",
                msg: format!("no rows kept"),
            });
        }
        let cols = tx.cols();
        let mut data = vec![F::zero(); cols];
        for (r, &k) in keep.iter().enumerate() {
            if k {
                for c in 0..cols {
                    data[c] = data[c] + tx.data()[r * cols + c];
                }
            }
        }
        let inv = F::one() / fl::<F>(n as f64);
        for v in data.iter_mut() {
            *v = *v * inv;
        }
        let value = Tensor::new(vec![cols], data)?;
        let req = self.requires(x);
        self.push(
            "mean_rows_masked",
            value,
            Op::MeanRowsMasked {
                x,
                keep: keep.to_vec(),
            },
            req,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let n: usize = shape.iter().product();
        if n != tx.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                left: tx.shape().to_vec(),
                right: shape,
            });
        }
        let value = Tensor::new(shape, tx.data().to_vec())?;
        let req = self.requires(x);
        self.push("reshape", value, Op::Reshape { x }, req)
    }

    /// 2-D convolution: input `[C_in, H, W]`, weight `[C_out, C_in, kh, kw]`,
    /// bias `[C_out]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NumericsError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 3 || tw.rank() != 4 || tx.shape()[0] != tw.shape()[1] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let (c_out, c_in) = (tw.shape()[0], tw.shape()[1]);
        let (kh, kw) = (tw.shape()[2], tw.shape()[3]);
        let (h, wd) = (tx.shape()[1], tx.shape()[2]);
        if tb.shape() != [c_out] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                left: tw.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(NumericsError::BadValue {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} stride {stride} pad {pad} too large for {h}x{wd}"),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        // Row-major accumulation; per-output term order is (ci, ky, kx)
        // ascending, so results are bitwise reproducible.
        let mut data = vec![F::zero(); c_out * ho * wo];
        for co in 0..c_out {
            for oy in 0..ho {
                let out_row = &mut data[(co * ho + oy) * wo..(co * ho + oy + 1) * wo];
                for v in out_row.iter_mut() {
                    *v = tb.data()[co];
                }
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        let x_row = &tx.data()[(ci * h + iy) * wd..(ci * h + iy + 1) * wd];
                        let w_row = &tw.data()
                            [((co * c_in + ci) * kh + ky) * kw..((co * c_in + ci) * kh + ky + 1) * kw];
                        for (kx, &wv) in w_row.iter().enumerate() {
                            let (ox_lo, ox_hi) = conv_ox_range(kx, pad, stride, wd, wo);
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                out_row[ox] = out_row[ox] + x_row[ix] * wv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![c_out, ho, wo], data)?;
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, stride, pad }, req)
    }

    /// Spatial mean of a `[C, H, W]` tensor, producing `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(NumericsError::ShapeMismatch {
                op: "global_avg_pool",
                left: tx.shape().to_vec(),
                right: vec![],
            });
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let inv = F::one() / fl::<F>((h * w) as f64);
        let mut data = vec![F::zero(); c];
        for ci in 0..c {
            let mut acc = F::zero();
            for i in 0..h * w {
                acc = acc + tx.data()[ci * h * w + i];
            }
            data[ci] = acc * inv;
        }
        let value = Tensor::new(vec![c], data)?;
        let req = self.requires(x);
        self.push("global_avg_pool", value, Op::GlobalAvgPool { x }, req)
    }

    /// Reinterpret `[C, H, W]` as `[(H*W), C]` rows, one row per spatial cell.
    pub fn chw_to_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(NumericsError::ShapeMismatch {
                op: "chw_to_rows",
                left: tx.shape().to_vec(),
                right: vec![],
            });
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let mut data = vec![F::zero(); c * h * w];
        for i in 0..h * w {
            for ci in 0..c {
                data[i * c + ci] = tx.data()[ci * h * w + i];
            }
        }
        let value = Tensor::new(vec![h * w, c], data)?;
        let req = self.requires(x);
        self.push("chw_to_rows", value, Op::ChwToRows { x }, req)
    }

    // ---- backward --------------------------------------------------------

    /// Populate gradients of `loss` w.r.t. every `requires_grad` node.
    /// Gradient accumulation across fan-out is additive; leaves that do not
    /// influence the loss receive zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let d_out = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &d_out, &mut grads);
            grads[i] = Some(d_out);
        }

        for i in 0..n {
            if self.nodes[i].requires_grad {
                let shape = self.nodes[i].value.shape().to_vec();
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![F::zero(); self.nodes[i].value.len()]);
                self.nodes[i].grad = Some(Tensor::new(shape, data)?);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, d_out: &[F], grads: &mut [Option<Vec<F>>]) {
        // Accumulation helper: adds a contribution into the input slot.
        fn acc<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize, add: impl FnOnce(&mut [F])) {
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
            add(slot);
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n2) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires(*a) {
                    let bt = transpose_raw(tb.data(), k, n2);
                    let da = matmul_raw(d_out, &bt, m, n2, k);
                    acc(grads, *a, m * k, |g| {
                        for (gi, di) in g.iter_mut().zip(da) {
                            *gi = *gi + di;
                        }
                    });
                }
                if self.requires(*b) {
                    let at = transpose_raw(ta.data(), m, k);
                    let db = matmul_raw(&at, d_out, k, m, n2);
                    acc(grads, *b, k * n2, |g| {
                        for (gi, di) in g.iter_mut().zip(db) {
                            *gi = *gi + di;
                        }
                    });
                }
            }
            Op::Transpose { x } => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                if self.requires(*x) {
                    let dt = transpose_raw(d_out, c, r);
                    acc(grads, *x, r * c, |g| {
                        for (gi, di) in g.iter_mut().zip(dt) {
                            *gi = *gi + di;
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for &v in [a, b] {
                    if self.requires(v) {
                        acc(grads, v, d_out.len(), |g| {
                            for (gi, &di) in g.iter_mut().zip(d_out) {
                                *gi = *gi + di;
                            }
                        });
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    acc(grads, *a, ta.len(), |g| {
                        for j in 0..g.len() {
                            g[j] = g[j] + d_out[j] * tb.data()[j];
                        }
                    });
                }
                if self.requires(*b) {
                    acc(grads, *b, tb.len(), |g| {
                        for j in 0..g.len() {
                            g[j] = g[j] + d_out[j] * ta.data()[j];
                        }
                    });
                }
            }
            Op::AddBias { x, bias } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                if self.requires(*x) {
                    acc(grads, *x, tx.len(), |g| {
                        for (gi, &di) in g.iter_mut().zip(d_out) {
                            *gi = *gi + di;
                        }
                    });
                }
                if self.requires(*bias) {
                    acc(grads, *bias, cols, |g| {
                        for (j, &di) in d_out.iter().enumerate() {
                            g[j % cols] = g[j % cols] + di;
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                if self.requires(*x) {
                    acc(grads, *x, d_out.len(), |g| {
                        for (gi, &di) in g.iter_mut().zip(d_out) {
                            *gi = *gi + di * *c;
                        }
                    });
                }
            }
            Op::Relu { x } => {
                let tx = self.value(*x);
                if self.requires(*x) {
                    acc(grads, *x, tx.len(), |g| {
                        for j in 0..g.len() {
                            if tx.data()[j] > F::zero() {
                                g[j] = g[j] + d_out[j];
                            }
                        }
                    });
                }
            }
            Op::Gelu { x } => {
                let tx = self.value(*x);
                if self.requires(*x) {
                    acc(grads, *x, tx.len(), |g| {
                        for j in 0..g.len() {
                            g[j] = g[j] + d_out[j] * gelu_derivative(tx.data()[j]);
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                if !self.requires(*x) {
                    return;
                }
                let p = &node.value;
                let (outer, len, inner) = axis_strides(p.shape(), *axis);
                acc(grads, *x, p.len(), |g| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut dot = F::zero();
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot = dot + d_out[idx] * p.data()[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                g[idx] = g[idx] + p.data()[idx] * (d_out[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, key_valid } => {
                if !self.requires(*x) {
                    return;
                }
                let p = &node.value;
                let (rows, cols) = (p.rows(), p.cols());
                acc(grads, *x, p.len(), |g| {
                    for r in 0..rows {
                        let base = r * cols;
                        let mut dot = F::zero();
                        for j in 0..cols {
                            if key_valid[j] {
                                dot = dot + d_out[base + j] * p.data()[base + j];
                            }
                        }
                        for j in 0..cols {
                            if key_valid[j] {
                                g[base + j] =
                                    g[base + j] + p.data()[base + j] * (d_out[base + j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                let last = *tx.shape().last().unwrap();
                let rows = tx.len() / last;
                let n = fl::<F>(last as f64);
                // Recompute per-row statistics; cheaper than caching them.
                let mut xhat = vec![F::zero(); tx.len()];
                let mut inv_denom = vec![F::zero(); rows];
                for r in 0..rows {
                    let row = &tx.data()[r * last..(r + 1) * last];
                    let mean = row.iter().copied().sum::<F>() / n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                    let denom = (var + *eps).sqrt();
                    inv_denom[r] = F::one() / denom;
                    for j in 0..last {
                        xhat[r * last + j] = (row[j] - mean) * inv_denom[r];
                    }
                }
                if self.requires(*x) {
                    acc(grads, *x, tx.len(), |g| {
                        for r in 0..rows {
                            let base = r * last;
                            let mut m1 = F::zero();
                            let mut m2 = F::zero();
                            for j in 0..last {
                                let dy = d_out[base + j] * tg.data()[j];
                                m1 = m1 + dy;
                                m2 = m2 + dy * xhat[base + j];
                            }
                            m1 = m1 / n;
                            m2 = m2 / n;
                            for j in 0..last {
                                let dy = d_out[base + j] * tg.data()[j];
                                g[base + j] =
                                    g[base + j] + (dy - m1 - xhat[base + j] * m2) * inv_denom[r];
                            }
                        }
                    });
                }
                if self.requires(*gamma) {
                    acc(grads, *gamma, last, |g| {
                        for r in 0..rows {
                            for j in 0..last {
                                g[j] = g[j] + d_out[r * last + j] * xhat[r * last + j];
                            }
                        }
                    });
                }
                if self.requires(*beta) {
                    acc(grads, *beta, last, |g| {
                        for r in 0..rows {
                            for j in 0..last {
                                g[j] = g[j] + d_out[r * last + j];
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if !self.requires(*logits) {
                    return;
                }
                let tl = self.value(*logits);
                let classes = tl.cols();
                let n_valid = targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
                let scale = d_out[0] / fl::<F>(n_valid as f64);
                acc(grads, *logits, tl.len(), |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        let row = &tl.data()[r * classes..(r + 1) * classes];
                        let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                        let sum = row.iter().map(|&v| (v - mx).exp()).sum::<F>();
                        for j in 0..classes {
                            let p = (row[j] - mx).exp() / sum;
                            let delta = if j == t { F::one() } else { F::zero() };
                            g[r * classes + j] = g[r * classes + j] + (p - delta) * scale;
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let tx = self.value(*x);
                if self.requires(*x) {
                    acc(grads, *x, tx.len(), |g| {
                        for gi in g.iter_mut() {
                            *gi = *gi + d_out[0];
                        }
                    });
                }
            }
            Op::Gather { table, index } => {
                if !self.requires(*table) {
                    return;
                }
                let tt = self.value(*table);
                let cols = tt.cols();
                acc(grads, *table, tt.len(), |g| {
                    for (r, &src) in index.iter().enumerate() {
                        for c in 0..cols {
                            g[src * cols + c] = g[src * cols + c] + d_out[r * cols + c];
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let len = tp.len();
                    if self.requires(p) {
                        acc(grads, p, len, |g| {
                            for (gi, &di) in g.iter_mut().zip(&d_out[offset..offset + len]) {
                                *gi = *gi + di;
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start, len } => {
                if !self.requires(*x) {
                    return;
                }
                let tx = self.value(*x);
                let (rows, cols) = (tx.rows(), tx.cols());
                acc(grads, *x, tx.len(), |g| {
                    for r in 0..rows {
                        for j in 0..*len {
                            g[r * cols + start + j] = g[r * cols + start + j] + d_out[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let rows = self.value(parts[0]).rows();
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let w = tp.cols();
                    if self.requires(p) {
                        acc(grads, p, tp.len(), |g| {
                            for r in 0..rows {
                                for j in 0..w {
                                    g[r * w + j] = g[r * w + j] + d_out[r * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::MeanRowsMasked { x, keep } => {
                if !self.requires(*x) {
                    return;
                }
                let tx = self.value(*x);
                let cols = tx.cols();
                let n = keep.iter().filter(|&&k| k).count();
                let inv = F::one() / fl::<F>(n as f64);
                acc(grads, *x, tx.len(), |g| {
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            for c in 0..cols {
                                g[r * cols + c] = g[r * cols + c] + d_out[c] * inv;
                            }
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                if self.requires(*x) {
                    acc(grads, *x, d_out.len(), |g| {
                        for (gi, &di) in g.iter_mut().zip(d_out) {
                            *gi = *gi + di;
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (c_out, c_in) = (tw.shape()[0], tw.shape()[1]);
                let (kh, kw) = (tw.shape()[2], tw.shape()[3]);
                let (h, wd) = (tx.shape()[1], tx.shape()[2]);
                let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
                let (s, p) = (*stride, *pad);
                if self.requires(*b) {
                    acc(grads, *b, c_out, |g| {
                        for co in 0..c_out {
                            for i in 0..ho * wo {
                                g[co] = g[co] + d_out[co * ho * wo + i];
                            }
                        }
                    });
                }
                if self.requires(*w) {
                    acc(grads, *w, tw.len(), |g| {
                        for co in 0..c_out {
                            for ci in 0..c_in {
                                for ky in 0..kh {
                                    let w_base = ((co * c_in + ci) * kh + ky) * kw;
                                    for kx in 0..kw {
                                        let (ox_lo, ox_hi) = conv_ox_range(kx, p, s, wd, wo);
                                        let mut total = F::zero();
                                        for oy in 0..ho {
                                            let iy = oy * s + ky;
                                            if iy < p || iy - p >= h {
                                                continue;
                                            }
                                            let iy = iy - p;
                                            let d_row = &d_out[(co * ho + oy) * wo
                                                ..(co * ho + oy + 1) * wo];
                                            let x_row = &tx.data()
                                                [(ci * h + iy) * wd..(ci * h + iy + 1) * wd];
                                            for ox in ox_lo..ox_hi {
                                                let ix = ox * s + kx - p;
                                                total = total + d_row[ox] * x_row[ix];
                                            }
                                        }
                                        g[w_base + kx] = g[w_base + kx] + total;
                                    }
                                }
                            }
                        }
                    });
                }
                if self.requires(*x) {
                    acc(grads, *x, tx.len(), |g| {
                        for co in 0..c_out {
                            for oy in 0..ho {
                                let d_row =
                                    &d_out[(co * ho + oy) * wo..(co * ho + oy + 1) * wo];
                                for ci in 0..c_in {
                                    for ky in 0..kh {
                                        let iy = oy * s + ky;
                                        if iy < p || iy - p >= h {
                                            continue;
                                        }
                                        let iy = iy - p;
                                        let g_row =
                                            &mut g[(ci * h + iy) * wd..(ci * h + iy + 1) * wd];
                                        let w_base = ((co * c_in + ci) * kh + ky) * kw;
                                        for kx in 0..kw {
                                            let wv = tw.data()[w_base + kx];
                                            let (ox_lo, ox_hi) =
                                                conv_ox_range(kx, p, s, wd, wo);
                                            for ox in ox_lo..ox_hi {
                                                let ix = ox * s + kx - p;
                                                g_row[ix] = g_row[ix] + d_row[ox] * wv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::GlobalAvgPool { x } => {
                if !self.requires(*x) {
                    return;
                }
                let tx = self.value(*x);
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let inv = F::one() / fl::<F>((h * w) as f64);
                acc(grads, *x, tx.len(), |g| {
                    for ci in 0..c {
                        for i in 0..h * w {
                            g[ci * h * w + i] = g[ci * h * w + i] + d_out[ci] * inv;
                        }
                    }
                });
            }
            Op::ChwToRows { x } => {
                if !self.requires(*x) {
                    return;
                }
                let tx = self.value(*x);
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                acc(grads, *x, tx.len(), |g| {
                    for i in 0..h * w {
                        for ci in 0..c {
                            g[ci * h * w + i] = g[ci * h * w + i] + d_out[i * c + ci];
                        }
                    }
                });
            }
        }
    }
}

/// Output-column range `[lo, hi)` whose input column `ox*stride + kx - pad`
/// lands inside `[0, width)`.
fn conv_ox_range(kx: usize, pad: usize, stride: usize, width: usize, out_width: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi_in = width + pad;
    let hi = if hi_in > kx {
        ((hi_in - 1 - kx) / stride + 1).min(out_width)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn gelu_value<F: Scalar>(x: F) -> F {
    let c = fl::<F>(0.7978845608028654); // sqrt(2/pi)
    let k = fl::<F>(0.044715);
    let half = fl::<F>(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_derivative<F: Scalar>(x: F) -> F {
    let c = fl::<F>(0.7978845608028654);
    let k = fl::<F>(0.044715);
    let half = fl::<F>(0.5);
    let three = fl::<F>(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * k * x * x)
}

/// Max relative error between analytic gradients of a scalar-valued tensor
/// function and central finite differences at `point`.
///
/// The closure builds the function on a fresh tape from the supplied input
/// variable; it is re-invoked for every perturbed evaluation. Intended for
/// `f64` points; the error is `|analytic - numeric| / max(1, |analytic|)`
/// maximized over coordinates.
pub fn grad_check<F: Scalar>(
    point: &Tensor<F>,
    h: F,
    mut f: impl FnMut(&mut Tape<F>, Var) -> Result<Var, NumericsError>,
) -> Result<F, NumericsError> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(NumericsError::NotScalar {
            op: "grad_check",
            shape: tape.value(y).shape().to_vec(),
        });
    }
    tape.backward(y)?;
    let analytic = tape.grad(x).expect("leaf gradient").clone();

    let mut eval = |pt: Tensor<F>| -> Result<F, NumericsError> {
        let mut t = Tape::new();
        let v = t.leaf(pt, false);
        let y = f(&mut t, v)?;
        Ok(t.value(y).item())
    };

    let two = fl::<F>(2.0);
    let mut max_rel = F::zero();
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + h;
        let mut minus = point.clone();
        minus.data_mut()[i] = minus.data()[i] - h;
        let numeric = (eval(plus)? - eval(minus)?) / (two * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / F::one().max(a.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(t2(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = tape.constant(t2(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn matmul_hand_product() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 2, &[1., 2., 3., 4.]));
        let b = tape.constant(t2(2, 1, &[0., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2., 4.]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![2, 3]));
        let x = tape.constant(t2(3, 4, &[1.0; 12]));
        let y = tape.matmul(z, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        match tape.matmul(a, b) {
            Err(NumericsError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 3, &[2.5, 2.5, 2.5]));
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.value(y).data() {
            assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // [0, ln 2] -> [1/3, 2/3]
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 2, &[0.0, core::f64::consts::LN_2]));
        let y = tape.softmax(x, 1).unwrap();
        assert_relative_eq!(tape.value(y).data()[0], 1.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(tape.value(y).data()[1], 2.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn softmax_singleton_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 1, &[42.0]));
        let y = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn softmax_invalid_axis() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.softmax(x, 2),
            Err(NumericsError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn layer_norm_zero_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 3, &[1.0, 2.0, 3.0]));
        let g = tape.constant(Tensor::full(vec![3], 1.0));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.layer_norm(x, g, b, 1e-9).unwrap();
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gamma_zero_collapses_to_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 9.0]));
        let g = tape.constant(Tensor::zeros(vec![3]));
        let b = tape.constant(Tensor::new(vec![3], vec![7.0, 8.0, 9.0]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-9).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn layer_norm_constant_row_guarded_by_eps() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(1, 4, &[5.0, 5.0, 5.0, 5.0]));
        let g = tape.constant(Tensor::full(vec![4], 1.0));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3]));
        let g = tape.constant(Tensor::full(vec![3], 1.0));
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(matches!(
            tape.layer_norm(x, g, b, 0.0),
            Err(NumericsError::BadValue { .. })
        ));
    }

    #[test]
    fn gelu_fixed_points() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(vec![3], vec![0.0f64, 10.0, -10.0]).unwrap());
        let y = tape.gelu(x).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 10.0).abs() < 1e-4);
        assert!(out[2].abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut tape = Tape::new();
        let logits = tape.constant(t2(2, 5, &[0.7; 10]));
        let loss = tape.cross_entropy(logits, &[3, 1]).unwrap();
        assert_relative_eq!(tape.value(loss).item(), (5.0f64).ln(), max_relative = 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_logit_is_near_zero() {
        let mut tape = Tape::new();
        let mut row = vec![0.0f64; 4];
        row[2] = 30.0;
        let logits = tape.constant(t2(1, 4, &row));
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        assert!(tape.value(loss).item() < 1e-10);
    }

    #[test]
    fn cross_entropy_ignored_row_matches_single_row() {
        let data = [0.3, -1.2, 0.8, 2.0, 0.1, -0.4];
        let mut tape = Tape::new();
        let both = tape.constant(t2(2, 3, &data));
        let loss2 = tape.cross_entropy(both, &[1, IGNORE_INDEX]).unwrap();
        let single = tape.constant(t2(1, 3, &data[..3]));
        let loss1 = tape.cross_entropy(single, &[1]).unwrap();
        assert_eq!(tape.value(loss2).item(), tape.value(loss1).item());
    }

    #[test]
    fn cross_entropy_all_ignored_is_error() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 3]));
        assert_eq!(
            tape.cross_entropy(logits, &[IGNORE_INDEX, IGNORE_INDEX]),
            Err(NumericsError::EmptyLoss)
        );
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic() {
        // loss = sum(x * x) at x = [1, 2] -> grad [2, 4]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_fanout_accumulates() {
        // y = sum(2x) + sum(3x) -> grad = 5 everywhere
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0f64, -4.0]).unwrap(), true);
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.scale(x, 3.0).unwrap();
        let sa = tape.sum(a).unwrap();
        let sb = tape.sum(b).unwrap();
        let y = tape.add(sa, sb).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]), true);
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::NotScalar { .. })
        ));
    }

    #[test]
    fn disconnected_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap(), true);
        let unused = tape.leaf(Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_zeros_invalid_keys() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 4, &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]));
        let y = tape.masked_softmax(x, &[true, true, false, true]).unwrap();
        for r in 0..2 {
            assert_eq!(tape.value(y).at2(r, 2), 0.0);
            let sum: f64 = (0..4).map(|c| tape.value(y).at2(r, c)).sum();
            assert_relative_eq!(sum, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn masked_softmax_invalid_key_grad_exactly_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 3, &[0.5, -0.5, 9.0]), true);
        let p = tape.masked_softmax(x, &[true, true, false]).unwrap();
        let w = tape.constant(t2(1, 3, &[1.0, 2.0, 3.0]));
        let py = tape.mul(p, w).unwrap();
        let s = tape.sum(py).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data()[2], 0.0);
    }

    #[test]
    fn gather_and_scatter_add() {
        let mut tape = Tape::new();
        let table = tape.leaf(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let picked = tape.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(picked).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(picked).unwrap();
        tape.backward(s).unwrap();
        // row 2 picked twice, row 0 once, row 1 never
        assert_eq!(tape.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn grad_check_sum_is_exact() {
        let point = Tensor::new(vec![4], vec![0.3f64, -1.1, 2.2, 0.9]).unwrap();
        let err = grad_check(&point, 1e-5, |tape, x| tape.sum(x)).unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn grad_check_softmax_cross_entropy() {
        let point = Tensor::new(
            vec![2, 4],
            vec![0.25f64, -0.9, 1.4, 0.03, -2.0, 0.6, 0.61, -0.2],
        )
        .unwrap();
        let err = grad_check(&point, 1e-5, |tape, x| {
            let p = tape.cross_entropy(x, &[2, 1])?;
            Ok(p)
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1], vec![1.0e38f32]).unwrap());
        let big = tape.scale(x, 1.0e38).unwrap_err();
        assert_eq!(big, NumericsError::NonFinite { op: "scale" });
    }
}
