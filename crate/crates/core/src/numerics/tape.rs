//! Computation tape: records primitive applications during the forward pass
//! and replays them in reverse to accumulate gradients.
//!
//! Node ids are assigned in creation order, so every input id precedes its
//! output id and a single reverse sweep visits each node exactly once.

use super::{ensure_matrix, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

/// Elementwise binary operation kinds exposed to callers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Subtract,
    Multiply,
}

enum Op<F: Scalar> {
    LeafGrad,
    LeafConst,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, F),
    Matmul(VarId, VarId),
    Transpose(VarId),
    Softmax {
        x: VarId,
        axis: usize,
    },
    Relu(VarId),
    WindowedConv {
        x: VarId,
        kernel: VarId,
        width: usize,
    },
    MaxPool {
        x: VarId,
        width: usize,
        argmax: Vec<usize>,
    },
    SquashCols(VarId),
    ColNorms(VarId),
    Embed {
        table: VarId,
        ids: Vec<usize>,
    },
    LayerNormCols {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: F,
    },
    AddBias {
        x: VarId,
        bias: VarId,
    },
    ConcatCols(Vec<VarId>),
    ConcatRows(Vec<VarId>),
    SliceCols {
        x: VarId,
        start: usize,
        end: usize,
    },
    SliceRows {
        x: VarId,
        start: usize,
        end: usize,
    },
    Sum(VarId),
    MaxAll {
        x: VarId,
        argmax: usize,
    },
    CrossEntropyCols {
        logits: VarId,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Vec<F>,
        n_active: usize,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Ordered record of primitive applications with reverse-mode replay.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated for `id` by [`Tape::backward`], if any flowed there.
    pub fn grad(&self, id: VarId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record a trainable leaf. Its gradient is retrievable after backward.
    pub fn leaf(&mut self, value: Tensor<F>) -> VarId {
        self.push(value, Op::LeafGrad, true)
    }

    /// Record a constant input; no gradient flows to it.
    pub fn constant(&mut self, value: Tensor<F>) -> VarId {
        self.push(value, Op::LeafConst, false)
    }

    // ── elementwise and scalar ops ──────────────────────────────────────

    fn binary_same_shape(&self, a: VarId, b: VarId) -> Result<Vec<usize>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        Ok(va.shape().to_vec())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let shape = self.binary_same_shape(a, b)?;
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let shape = self.binary_same_shape(a, b)?;
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let shape = self.binary_same_shape(a, b)?;
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Mul(a, b), needs))
    }

    pub fn elementwise(&mut self, a: VarId, b: VarId, kind: ElementwiseKind) -> Result<VarId> {
        match kind {
            ElementwiseKind::Subtract => self.sub(a, b),
            ElementwiseKind::Multiply => self.mul(a, b),
        }
    }

    pub fn scale(&mut self, a: VarId, c: F) -> VarId {
        let value = Tensor {
            shape: self.value(a).shape().to_vec(),
            data: self.value(a).data().iter().map(|&x| x * c).collect(),
            grad: None,
        };
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let value = Tensor {
            shape: self.value(a).shape().to_vec(),
            data: self
                .value(a)
                .data()
                .iter()
                .map(|&x| if x > F::zero() { x } else { F::zero() })
                .collect(),
            grad: None,
        };
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (p, q) = ensure_matrix(self.value(a))?;
        let (q2, r) = ensure_matrix(self.value(b))?;
        if q != q2 {
            return Err(TensorError::MatmulMismatch {
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![F::zero(); p * r];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for i in 0..p {
                for k in 0..q {
                    let aik = da[i * q + k];
                    let brow = &db[k * r..(k + 1) * r];
                    let crow = &mut out[i * r..(i + 1) * r];
                    for j in 0..r {
                        crow[j] = crow[j] + aik * brow[j];
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(vec![p, r], out)?, Op::Matmul(a, b), needs))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let (r, c) = ensure_matrix(self.value(a))?;
        let da = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = da[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(vec![c, r], out)?, Op::Transpose(a), needs))
    }

    /// Softmax along `axis`; every slice along that axis sums to 1 and the
    /// result is invariant to additive shifts (max is subtracted first).
    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: va.rank(),
            });
        }
        let (r, c) = ensure_matrix(va)?;
        let mut out = va.data().to_vec();
        softmax_slices_in_place(&mut out, r, c, axis);
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(vec![r, c], out)?,
            Op::Softmax { x: a, axis },
            needs,
        ))
    }

    // ── windows ─────────────────────────────────────────────────────────

    /// Non-overlapping windowed convolution: each output column is
    /// `kernel × concat(window columns)`. Requires `width == stride`.
    pub fn windowed_conv(
        &mut self,
        x: VarId,
        kernel: VarId,
        width: usize,
        stride: usize,
    ) -> Result<VarId> {
        if width != stride || width == 0 {
            return Err(TensorError::WindowStride { width, stride });
        }
        let (d, w) = ensure_matrix(self.value(x))?;
        if w % width != 0 {
            return Err(TensorError::WindowIndivisible { w, stride: width });
        }
        let (dout, kin) = ensure_matrix(self.value(kernel))?;
        if kin != d * width {
            return Err(TensorError::KernelShape {
                kernel: self.value(kernel).shape().to_vec(),
                rows: d,
                width,
            });
        }
        let wout = w / width;
        let mut out = vec![F::zero(); dout * wout];
        {
            let dx = self.value(x).data();
            let dk = self.value(kernel).data();
            for j in 0..wout {
                // flattened window: for channel c and offset u, x[c, j*width+u]
                for o in 0..dout {
                    let mut acc = F::zero();
                    for c in 0..d {
                        for u in 0..width {
                            acc = acc + dk[o * kin + c * width + u] * dx[c * w + j * width + u];
                        }
                    }
                    out[o * wout + j] = acc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(kernel);
        Ok(self.push(
            Tensor::from_vec(vec![dout, wout], out)?,
            Op::WindowedConv { x, kernel, width },
            needs,
        ))
    }

    /// Per-row window maximum with `width == stride`; width 1 is identity.
    pub fn max_pool(&mut self, x: VarId, width: usize, stride: usize) -> Result<VarId> {
        if width != stride || width == 0 {
            return Err(TensorError::WindowStride { width, stride });
        }
        let (d, w) = ensure_matrix(self.value(x))?;
        if w % width != 0 {
            return Err(TensorError::WindowIndivisible { w, stride: width });
        }
        let wout = w / width;
        let mut out = vec![F::zero(); d * wout];
        let mut argmax = vec![0usize; d * wout];
        {
            let dx = self.value(x).data();
            for r in 0..d {
                for j in 0..wout {
                    let mut best = dx[r * w + j * width];
                    let mut best_at = j * width;
                    for u in 1..width {
                        let v = dx[r * w + j * width + u];
                        if v > best {
                            best = v;
                            best_at = j * width + u;
                        }
                    }
                    out[r * wout + j] = best;
                    argmax[r * wout + j] = best_at;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(vec![d, wout], out)?,
            Op::MaxPool { x, width, argmax },
            needs,
        ))
    }

    // ── capsule primitives ──────────────────────────────────────────────

    /// Squash every column: `s ↦ (‖s‖²/(1+‖s‖²))·(s/‖s‖)`, with the zero
    /// column mapped to zero by continuity.
    pub fn squash_cols(&mut self, x: VarId) -> Result<VarId> {
        let (d, n) = ensure_matrix(self.value(x))?;
        let dx = self.value(x).data();
        let mut out = vec![F::zero(); d * n];
        for j in 0..n {
            let mut sq = F::zero();
            for r in 0..d {
                let v = dx[r * n + j];
                sq = sq + v * v;
            }
            let norm = sq.sqrt();
            if norm > F::zero() {
                let factor = norm / (F::one() + sq);
                for r in 0..d {
                    out[r * n + j] = dx[r * n + j] * factor;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(vec![d, n], out)?,
            Op::SquashCols(x),
            needs,
        ))
    }

    /// Single-vector squash; accepts a column vector.
    pub fn squash(&mut self, x: VarId) -> Result<VarId> {
        self.squash_cols(x)
    }

    /// Euclidean norm of each column, as a 1×n row.
    pub fn col_norms(&mut self, x: VarId) -> Result<VarId> {
        let (d, n) = ensure_matrix(self.value(x))?;
        let dx = self.value(x).data();
        let mut out = vec![F::zero(); n];
        for j in 0..n {
            let mut sq = F::zero();
            for r in 0..d {
                let v = dx[r * n + j];
                sq = sq + v * v;
            }
            out[j] = sq.sqrt();
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(vec![1, n], out)?, Op::ColNorms(x), needs))
    }

    // ── neural-net plumbing ─────────────────────────────────────────────

    /// Look up embedding rows for `ids` in a table with one row per token;
    /// output column `t` is the embedding of `ids[t]`.
    pub fn embed(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let (rows, d) = ensure_matrix(self.value(table))?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(TensorError::IndexOutOfRange { id: bad, rows });
        }
        let t = ids.len();
        let dt = self.value(table).data();
        let mut out = vec![F::zero(); d * t];
        for (j, &id) in ids.iter().enumerate() {
            for r in 0..d {
                out[r * t + j] = dt[id * d + r];
            }
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::from_vec(vec![d, t], out)?,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Normalize each column to zero mean / unit variance, then scale by
    /// `gamma` and shift by `beta` (both d×1).
    pub fn layer_norm_cols(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: F,
    ) -> Result<VarId> {
        let (d, n) = ensure_matrix(self.value(x))?;
        for &p in &[gamma, beta] {
            let (pr, pc) = ensure_matrix(self.value(p))?;
            if pr != d || pc != 1 {
                return Err(TensorError::ShapeMismatch {
                    lhs: vec![d, 1],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let dx = self.value(x).data();
        let dg = self.value(gamma).data();
        let db = self.value(beta).data();
        let dn = F::of(d as f64);
        let mut out = vec![F::zero(); d * n];
        for j in 0..n {
            let mut mean = F::zero();
            for r in 0..d {
                mean = mean + dx[r * n + j];
            }
            mean = mean / dn;
            let mut var = F::zero();
            for r in 0..d {
                let c = dx[r * n + j] - mean;
                var = var + c * c;
            }
            var = var / dn;
            let inv = (var + eps).sqrt().recip();
            for r in 0..d {
                let xhat = (dx[r * n + j] - mean) * inv;
                out[r * n + j] = dg[r] * xhat + db[r];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_vec(vec![d, n], out)?,
            Op::LayerNormCols {
                x,
                gamma,
                beta,
                eps,
            },
            needs,
        ))
    }

    /// Broadcast-add a d×1 bias to every column of a d×n tensor.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (d, n) = ensure_matrix(self.value(x))?;
        let (br, bc) = ensure_matrix(self.value(bias))?;
        if br != d || bc != 1 {
            return Err(TensorError::ShapeMismatch {
                lhs: vec![d, 1],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let dx = self.value(x).data();
        let db = self.value(bias).data();
        let mut out = vec![F::zero(); d * n];
        for r in 0..d {
            for j in 0..n {
                out[r * n + j] = dx[r * n + j] + db[r];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            Tensor::from_vec(vec![d, n], out)?,
            Op::AddBias { x, bias },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, xs: &[VarId]) -> Result<VarId> {
        assert!(!xs.is_empty(), "concat of nothing");
        let (d, _) = ensure_matrix(self.value(xs[0]))?;
        let mut total = 0usize;
        for &x in xs {
            let (dr, dc) = ensure_matrix(self.value(x))?;
            if dr != d {
                return Err(TensorError::ShapeMismatch {
                    lhs: self.value(xs[0]).shape().to_vec(),
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            total += dc;
        }
        let mut out = vec![F::zero(); d * total];
        let mut off = 0usize;
        for &x in xs {
            let (_, c) = ensure_matrix(self.value(x))?;
            let dx = self.value(x).data();
            for r in 0..d {
                out[r * total + off..r * total + off + c]
                    .copy_from_slice(&dx[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(
            Tensor::from_vec(vec![d, total], out)?,
            Op::ConcatCols(xs.to_vec()),
            needs,
        ))
    }

    pub fn concat_rows(&mut self, xs: &[VarId]) -> Result<VarId> {
        assert!(!xs.is_empty(), "concat of nothing");
        let (_, c) = ensure_matrix(self.value(xs[0]))?;
        let mut total = 0usize;
        for &x in xs {
            let (dr, dc) = ensure_matrix(self.value(x))?;
            if dc != c {
                return Err(TensorError::ShapeMismatch {
                    lhs: self.value(xs[0]).shape().to_vec(),
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            total += dr;
        }
        let mut out = Vec::with_capacity(total * c);
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(
            Tensor::from_vec(vec![total, c], out)?,
            Op::ConcatRows(xs.to_vec()),
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, end: usize) -> Result<VarId> {
        let (d, w) = ensure_matrix(self.value(x))?;
        if start >= end || end > w {
            return Err(TensorError::SliceOutOfBounds {
                start,
                end,
                extent: w,
            });
        }
        let c = end - start;
        let dx = self.value(x).data();
        let mut out = vec![F::zero(); d * c];
        for r in 0..d {
            out[r * c..(r + 1) * c].copy_from_slice(&dx[r * w + start..r * w + end]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(vec![d, c], out)?,
            Op::SliceCols { x, start, end },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, end: usize) -> Result<VarId> {
        let (d, w) = ensure_matrix(self.value(x))?;
        if start >= end || end > d {
            return Err(TensorError::SliceOutOfBounds {
                start,
                end,
                extent: d,
            });
        }
        let r = end - start;
        let dx = self.value(x).data();
        let out = dx[start * w..end * w].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(vec![r, w], out)?,
            Op::SliceRows { x, start, end },
            needs,
        ))
    }

    // ── reductions and losses ───────────────────────────────────────────

    /// Sum of all entries, as a 1×1 scalar.
    pub fn sum(&mut self, x: VarId) -> VarId {
        let total: F = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Maximum entry of the whole tensor, as a 1×1 scalar.
    pub fn max_all(&mut self, x: VarId) -> VarId {
        let data = self.value(x).data();
        let mut best = data[0];
        let mut argmax = 0usize;
        for (i, &v) in data.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                argmax = i;
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(best), Op::MaxAll { x, argmax }, needs)
    }

    /// Mean negative log-likelihood of `targets[t]` under a column-wise
    /// softmax of `logits`, averaged over columns where `active[t]` holds.
    pub fn cross_entropy_cols(
        &mut self,
        logits: VarId,
        targets: &[usize],
        active: &[bool],
    ) -> Result<VarId> {
        let (v, t) = ensure_matrix(self.value(logits))?;
        if targets.len() != t || active.len() != t {
            return Err(TensorError::ShapeMismatch {
                lhs: vec![v, t],
                rhs: vec![targets.len(), active.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(TensorError::IndexOutOfRange { id: bad, rows: v });
        }
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active == 0 {
            return Err(TensorError::NonFinite {
                context: "cross entropy over zero active positions".into(),
            });
        }
        let dl = self.value(logits).data();
        let mut probs = vec![F::zero(); v * t];
        let mut nll = F::zero();
        for j in 0..t {
            let mut mx = dl[j];
            for r in 1..v {
                if dl[r * t + j] > mx {
                    mx = dl[r * t + j];
                }
            }
            let mut z = F::zero();
            for r in 0..v {
                let e = (dl[r * t + j] - mx).exp();
                probs[r * t + j] = e;
                z = z + e;
            }
            for r in 0..v {
                probs[r * t + j] = probs[r * t + j] / z;
            }
            if active[j] {
                nll = nll - (dl[targets[j] * t + j] - mx - z.ln());
            }
        }
        let loss = nll / F::of(n_active as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyCols {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
                probs,
                n_active,
            },
            needs,
        ))
    }

    // ── reverse sweep ───────────────────────────────────────────────────

    /// Accumulate `d loss / d node` for every node reachable from `loss`.
    /// Repeated calls keep accumulating until [`Tape::clear_grads`].
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut pass: Vec<Option<Vec<F>>> = vec![None; n];
        pass[loss.0] = Some(vec![F::one()]);
        for id in (0..n).rev() {
            let Some(gout) = pass[id].take() else {
                continue;
            };
            if self.nodes[id].needs_grad {
                self.propagate(id, &gout, &mut pass);
            }
            match self.grads[id] {
                Some(ref mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&gout) {
                        *a = *a + *g;
                    }
                }
                None => self.grads[id] = Some(gout),
            }
        }
        Ok(())
    }

    fn add_into(&self, pass: &mut [Option<Vec<F>>], id: VarId, delta: impl Fn(&mut [F])) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut pass[id.0];
        if slot.is_none() {
            *slot = Some(vec![F::zero(); self.nodes[id.0].value.numel()]);
        }
        delta(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: usize, gout: &[F], pass: &mut [Option<Vec<F>>]) {
        match &self.nodes[id].op {
            Op::LeafGrad | Op::LeafConst => {}
            Op::Add(a, b) => {
                self.add_into(pass, *a, |g| {
                    for (gi, &d) in g.iter_mut().zip(gout) {
                        *gi = *gi + d;
                    }
                });
                self.add_into(pass, *b, |g| {
                    for (gi, &d) in g.iter_mut().zip(gout) {
                        *gi = *gi + d;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.add_into(pass, *a, |g| {
                    for (gi, &d) in g.iter_mut().zip(gout) {
                        *gi = *gi + d;
                    }
                });
                self.add_into(pass, *b, |g| {
                    for (gi, &d) in g.iter_mut().zip(gout) {
                        *gi = *gi - d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.add_into(pass, *a, |g| {
                    for ((gi, &d), &y) in g.iter_mut().zip(gout).zip(vb) {
                        *gi = *gi + d * y;
                    }
                });
                self.add_into(pass, *b, |g| {
                    for ((gi, &d), &x) in g.iter_mut().zip(gout).zip(va) {
                        *gi = *gi + d * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.add_into(pass, *a, |g| {
                    for (gi, &d) in g.iter_mut().zip(gout) {
                        *gi = *gi + d * c;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (p, q) = (self.value(*a).rows(), self.value(*a).cols());
                let r = self.value(*b).cols();
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                // dA = G Bᵀ
                self.add_into(pass, *a, |g| {
                    for i in 0..p {
                        for k in 0..q {
                            let mut acc = F::zero();
                            for j in 0..r {
                                acc = acc + gout[i * r + j] * db[k * r + j];
                            }
                            g[i * q + k] = g[i * q + k] + acc;
                        }
                    }
                });
                // dB = Aᵀ G
                self.add_into(pass, *b, |g| {
                    for k in 0..q {
                        for i in 0..p {
                            let aik = da[i * q + k];
                            for j in 0..r {
                                g[k * r + j] = g[k * r + j] + aik * gout[i * r + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                self.add_into(pass, *a, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] = g[i * c + j] + gout[j * r + i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[id].value.data();
                let (r, c) = (self.nodes[id].value.rows(), self.nodes[id].value.cols());
                let axis = *axis;
                self.add_into(pass, *x, |g| {
                    let (slices, len, stride, base) = if axis == 1 {
                        (r, c, 1usize, c)
                    } else {
                        (c, r, c, 1usize)
                    };
                    for s in 0..slices {
                        let start = s * base;
                        let mut dot = F::zero();
                        for i in 0..len {
                            let idx = start + i * stride;
                            dot = dot + gout[idx] * y[idx];
                        }
                        for i in 0..len {
                            let idx = start + i * stride;
                            g[idx] = g[idx] + y[idx] * (gout[idx] - dot);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.add_into(pass, *a, |g| {
                    for ((gi, &d), &x) in g.iter_mut().zip(gout).zip(va) {
                        if x > F::zero() {
                            *gi = *gi + d;
                        }
                    }
                });
            }
            Op::WindowedConv { x, kernel, width } => {
                let width = *width;
                let (d, w) = (self.value(*x).rows(), self.value(*x).cols());
                let (dout, kin) = (self.value(*kernel).rows(), self.value(*kernel).cols());
                let wout = w / width;
                let dx = self.value(*x).data();
                let dk = self.value(*kernel).data();
                self.add_into(pass, *kernel, |g| {
                    for o in 0..dout {
                        for c in 0..d {
                            for u in 0..width {
                                let mut acc = F::zero();
                                for j in 0..wout {
                                    acc = acc + gout[o * wout + j] * dx[c * w + j * width + u];
                                }
                                let idx = o * kin + c * width + u;
                                g[idx] = g[idx] + acc;
                            }
                        }
                    }
                });
                self.add_into(pass, *x, |g| {
                    for j in 0..wout {
                        for c in 0..d {
                            for u in 0..width {
                                let mut acc = F::zero();
                                for o in 0..dout {
                                    acc = acc + dk[o * kin + c * width + u] * gout[o * wout + j];
                                }
                                let idx = c * w + j * width + u;
                                g[idx] = g[idx] + acc;
                            }
                        }
                    }
                });
            }
            Op::MaxPool { x, width, argmax } => {
                let (d, w) = (self.value(*x).rows(), self.value(*x).cols());
                let wout = w / width;
                self.add_into(pass, *x, |g| {
                    for r in 0..d {
                        for j in 0..wout {
                            let src = argmax[r * wout + j];
                            g[r * w + src] = g[r * w + src] + gout[r * wout + j];
                        }
                    }
                });
            }
            Op::SquashCols(x) => {
                let (d, n) = (self.value(*x).rows(), self.value(*x).cols());
                let dx = self.value(*x).data();
                self.add_into(pass, *x, |g| {
                    for j in 0..n {
                        let mut sq = F::zero();
                        for r in 0..d {
                            let v = dx[r * n + j];
                            sq = sq + v * v;
                        }
                        let norm = sq.sqrt();
                        if norm == F::zero() {
                            continue;
                        }
                        let one_plus = F::one() + sq;
                        let f = norm / one_plus;
                        // f'(n) = (1 - n²) / (1 + n²)²
                        let fprime = (F::one() - sq) / (one_plus * one_plus);
                        let mut dot = F::zero();
                        for r in 0..d {
                            dot = dot + dx[r * n + j] * gout[r * n + j];
                        }
                        let coef = fprime / norm * dot;
                        for r in 0..d {
                            let idx = r * n + j;
                            g[idx] = g[idx] + f * gout[idx] + coef * dx[idx];
                        }
                    }
                });
            }
            Op::ColNorms(x) => {
                let (d, n) = (self.value(*x).rows(), self.value(*x).cols());
                let dx = self.value(*x).data();
                let y = self.nodes[id].value.data();
                self.add_into(pass, *x, |g| {
                    for j in 0..n {
                        if y[j] == F::zero() {
                            continue;
                        }
                        let coef = gout[j] / y[j];
                        for r in 0..d {
                            let idx = r * n + j;
                            g[idx] = g[idx] + coef * dx[idx];
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                let d = self.value(*table).cols();
                let t = ids.len();
                self.add_into(pass, *table, |g| {
                    for (j, &tok) in ids.iter().enumerate() {
                        for r in 0..d {
                            g[tok * d + r] = g[tok * d + r] + gout[r * t + j];
                        }
                    }
                });
            }
            Op::LayerNormCols {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (d, n) = (self.value(*x).rows(), self.value(*x).cols());
                let dx = self.value(*x).data();
                let dg = self.value(*gamma).data();
                let dn = F::of(d as f64);
                // recompute per-column statistics
                let mut stats = Vec::with_capacity(n);
                for j in 0..n {
                    let mut mean = F::zero();
                    for r in 0..d {
                        mean = mean + dx[r * n + j];
                    }
                    mean = mean / dn;
                    let mut var = F::zero();
                    for r in 0..d {
                        let c = dx[r * n + j] - mean;
                        var = var + c * c;
                    }
                    var = var / dn;
                    stats.push((mean, (var + *eps).sqrt().recip()));
                }
                self.add_into(pass, *beta, |g| {
                    for r in 0..d {
                        let mut acc = F::zero();
                        for j in 0..n {
                            acc = acc + gout[r * n + j];
                        }
                        g[r] = g[r] + acc;
                    }
                });
                self.add_into(pass, *gamma, |g| {
                    for r in 0..d {
                        let mut acc = F::zero();
                        for j in 0..n {
                            let (mean, inv) = stats[j];
                            acc = acc + gout[r * n + j] * (dx[r * n + j] - mean) * inv;
                        }
                        g[r] = g[r] + acc;
                    }
                });
                self.add_into(pass, *x, |g| {
                    for j in 0..n {
                        let (mean, inv) = stats[j];
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for r in 0..d {
                            let xhat = (dx[r * n + j] - mean) * inv;
                            let dxhat = gout[r * n + j] * dg[r];
                            m1 = m1 + dxhat;
                            m2 = m2 + dxhat * xhat;
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for r in 0..d {
                            let xhat = (dx[r * n + j] - mean) * inv;
                            let dxhat = gout[r * n + j] * dg[r];
                            let idx = r * n + j;
                            g[idx] = g[idx] + inv * (dxhat - m1 - xhat * m2);
                        }
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let (d, n) = (self.value(*x).rows(), self.value(*x).cols());
                self.add_into(pass, *x, |g| {
                    for (gi, &d) in g.iter_mut().zip(gout) {
                        *gi = *gi + d;
                    }
                });
                self.add_into(pass, *bias, |g| {
                    for r in 0..d {
                        let mut acc = F::zero();
                        for j in 0..n {
                            acc = acc + gout[r * n + j];
                        }
                        g[r] = g[r] + acc;
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = self.nodes[id].value.cols();
                let d = self.nodes[id].value.rows();
                let mut off = 0usize;
                for &x in xs {
                    let c = self.value(x).cols();
                    self.add_into(pass, x, |g| {
                        for r in 0..d {
                            for j in 0..c {
                                g[r * c + j] = g[r * c + j] + gout[r * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(xs) => {
                let c = self.nodes[id].value.cols();
                let mut off = 0usize;
                for &x in xs {
                    let r = self.value(x).rows();
                    self.add_into(pass, x, |g| {
                        for (gi, &d) in g.iter_mut().zip(&gout[off * c..(off + r) * c]) {
                            *gi = *gi + d;
                        }
                    });
                    off += r;
                }
            }
            Op::SliceCols { x, start, end } => {
                let (d, w) = (self.value(*x).rows(), self.value(*x).cols());
                let c = end - start;
                self.add_into(pass, *x, |g| {
                    for r in 0..d {
                        for j in 0..c {
                            g[r * w + start + j] = g[r * w + start + j] + gout[r * c + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start, end } => {
                let w = self.value(*x).cols();
                let r = end - start;
                self.add_into(pass, *x, |g| {
                    for (gi, &d) in g[start * w..(start + r) * w].iter_mut().zip(gout) {
                        *gi = *gi + d;
                    }
                });
            }
            Op::Sum(x) => {
                let d = gout[0];
                self.add_into(pass, *x, |g| {
                    for gi in g.iter_mut() {
                        *gi = *gi + d;
                    }
                });
            }
            Op::MaxAll { x, argmax } => {
                let d = gout[0];
                let argmax = *argmax;
                self.add_into(pass, *x, |g| {
                    g[argmax] = g[argmax] + d;
                });
            }
            Op::CrossEntropyCols {
                logits,
                targets,
                active,
                probs,
                n_active,
            } => {
                let (v, t) = (self.value(*logits).rows(), self.value(*logits).cols());
                let scale = gout[0] / F::of(*n_active as f64);
                self.add_into(pass, *logits, |g| {
                    for j in 0..t {
                        if !active[j] {
                            continue;
                        }
                        for r in 0..v {
                            let indicator = if r == targets[j] { F::one() } else { F::zero() };
                            let idx = r * t + j;
                            g[idx] = g[idx] + scale * (probs[idx] - indicator);
                        }
                    }
                });
            }
        }
    }
}

/// In-place softmax over slices of a row-major r×c buffer.
fn softmax_slices_in_place<F: Scalar>(data: &mut [F], r: usize, c: usize, axis: usize) {
    let (slices, len, stride, base) = if axis == 1 {
        (r, c, 1usize, c)
    } else {
        (c, r, c, 1usize)
    };
    for s in 0..slices {
        let start = s * base;
        let mut mx = data[start];
        for i in 1..len {
            let v = data[start + i * stride];
            if v > mx {
                mx = v;
            }
        }
        let mut z = F::zero();
        for i in 0..len {
            let idx = start + i * stride;
            let e = (data[idx] - mx).exp();
            data[idx] = e;
            z = z + e;
        }
        for i in 0..len {
            let idx = start + i * stride;
            data[idx] = data[idx] / z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Deterministic "random" values, kept away from relu/max kinks.
    fn varied(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                let u = ((state >> 11) as f64) / ((1u64 << 53) as f64);
                let v = 2.0 * u - 1.0;
                if v.abs() < 0.05 {
                    v + 0.2
                } else {
                    v
                }
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let denom = a.abs().max(b.abs());
        if denom < 1e-6 {
            0.0
        } else {
            (a - b).abs() / denom
        }
    }

    /// Central finite differences against the analytic gradient of a scalar
    /// built from `f`'s output via a fixed varied weighting.
    fn gradcheck(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[VarId]) -> VarId) {
        let to_scalar = |tape: &mut Tape<f64>, out: VarId| {
            let w = Tensor::from_vec(
                tape.value(out).shape().to_vec(),
                varied(tape.value(out).numel(), 99),
            )
            .unwrap();
            let w = tape.constant(w);
            let prod = tape.mul(out, w).unwrap();
            tape.sum(prod)
        };
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &ids);
        let loss = to_scalar(&mut tape, out);
        tape.backward(loss).unwrap();
        let eval = |pert: &[Tensor<f64>]| {
            let mut t2 = Tape::new();
            let ids2: Vec<VarId> = pert.iter().map(|x| t2.constant(x.clone())).collect();
            let out2 = f(&mut t2, &ids2);
            let l2 = to_scalar(&mut t2, out2);
            t2.value(l2).item()
        };
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(ids[k]).map(<[f64]>::to_vec).unwrap_or_else(|| {
                vec![0.0; input.numel()]
            });
            for e in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                assert!(
                    rel_err(analytic[e], numeric) < 1e-4,
                    "input {k} elem {e}: analytic {} vs numeric {}",
                    analytic[e],
                    numeric
                );
            }
        }
    }

    // ── matmul ──────────────────────────────────────────────────────────

    #[test]
    fn matmul_identity_preserves_any_matrix() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[3.5, -2.0, 0.25, 7.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(m).data());
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[0.0, 1.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_reports_both_shapes_on_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        match tape.matmul(a, b).unwrap_err() {
            TensorError::MatmulMismatch { lhs, rhs } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    // ── softmax ─────────────────────────────────────────────────────────

    #[test]
    fn softmax_symmetric_pair() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_constant_slice_is_uniform() {
        for c in [-100.0, 0.0, 3.25, 1e6] {
            let mut tape = Tape::new();
            let x = tape.constant(t(&[1, 3], &[c, c, c]));
            let y = tape.softmax(x, 1).unwrap();
            for &v in tape.value(y).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_log_weights_give_normalized_ratios() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = tape.softmax(x, 1).unwrap();
        let got = tape.value(y).data();
        for (g, want) in got.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 5.0, 0.0, 5.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        assert!((v.at(0, 0) + v.at(1, 0) - 1.0).abs() < 1e-12);
        assert!((v.at(0, 1) + v.at(1, 1) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_slices_sum_to_one_and_shift_invariant(
            vals in proptest::collection::vec(-30.0f64..30.0, 6),
            shift in -50.0f64..50.0,
        ) {
            let mut tape = Tape::new();
            let x = tape.constant(t(&[2, 3], &vals));
            let y = tape.softmax(x, 1).unwrap();
            for r in 0..2 {
                let s: f64 = (0..3).map(|c| tape.value(y).at(r, c)).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
            let xs = tape.constant(t(&[2, 3], &shifted));
            let ys = tape.softmax(xs, 1).unwrap();
            for i in 0..6 {
                prop_assert!((tape.value(y).data()[i] - tape.value(ys).data()[i]).abs() < 1e-9);
            }
        }
    }

    // ── elementwise, relu ───────────────────────────────────────────────

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let ones = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let b = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let diff = tape.elementwise(a, a, ElementwiseKind::Subtract).unwrap();
        assert_eq!(tape.value(diff).data(), &[0.0, 0.0]);
        let keep = tape.elementwise(a, ones, ElementwiseKind::Multiply).unwrap();
        assert_eq!(tape.value(keep).data(), &[1.0, 2.0]);
        let prod = tape.elementwise(a, b, ElementwiseKind::Multiply).unwrap();
        assert_eq!(tape.value(prod).data(), &[3.0, 8.0]);
    }

    #[test]
    fn elementwise_shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        assert!(matches!(
            tape.mul(a, b).unwrap_err(),
            TensorError::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn relu_examples_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let neg = tape.constant(t(&[1, 3], &[-3.0, -0.5, -1e9]));
        let yneg = tape.relu(neg);
        assert_eq!(tape.value(yneg).data(), &[0.0, 0.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1], &[3.0]));
        let y = tape.relu(x);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    // ── windows ─────────────────────────────────────────────────────────

    #[test]
    fn conv_averaging_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[1.0, 3.0, 5.0, 9.0]));
        let k = tape.constant(t(&[1, 2], &[0.5, 0.5]));
        let y = tape.windowed_conv(x, k, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 7.0]);
    }

    #[test]
    fn conv_selector_kernel_keeps_even_columns() {
        let d = 2;
        let mut tape = Tape::new();
        let x = tape.constant(t(&[d, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        // kernel [I | 0] picks the first column of each window
        let k = tape.constant(t(
            &[d, d * 2],
            &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        ));
        let y = tape.windowed_conv(x, k, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv_rejects_indivisible_width() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 6], &[0.0; 6]));
        let k = tape.constant(t(&[1, 4], &[0.0; 4]));
        assert!(matches!(
            tape.windowed_conv(x, k, 4, 4).unwrap_err(),
            TensorError::WindowIndivisible { w: 6, stride: 4 }
        ));
    }

    #[test]
    fn conv_rejects_width_stride_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[0.0; 4]));
        let k = tape.constant(t(&[1, 2], &[0.0; 2]));
        assert!(matches!(
            tape.windowed_conv(x, k, 2, 1).unwrap_err(),
            TensorError::WindowStride { .. }
        ));
    }

    #[test]
    fn max_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[3.0, 1.0, 2.0, 5.0]));
        let ident = tape.max_pool(x, 1, 1).unwrap();
        assert_eq!(tape.value(ident).data(), tape.value(x).data());
        let y = tape.max_pool(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
        let flat = tape.constant(t(&[1, 4], &[7.0; 4]));
        let yf = tape.max_pool(flat, 2, 2).unwrap();
        assert_eq!(tape.value(yf).data(), &[7.0, 7.0]);
    }

    // ── squash ──────────────────────────────────────────────────────────

    #[test]
    fn squash_zero_maps_to_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 1], &[0.0, 0.0, 0.0]));
        let y = tape.squash(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn squash_unit_vector_halves() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 0.0]));
        let y = tape.squash(x).unwrap();
        assert!((tape.value(y).data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(tape.value(y).data()[1], 0.0);
    }

    #[test]
    fn squash_three_four_vector() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.squash(x).unwrap();
        let got = tape.value(y).data();
        assert!((got[0] - 25.0 / 26.0 * 0.6).abs() < 1e-12);
        assert!((got[1] - 25.0 / 26.0 * 0.8).abs() < 1e-12);
        let norm = (got[0] * got[0] + got[1] * got[1]).sqrt();
        assert!((norm - 25.0 / 26.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn squash_is_norm_monotone_and_bounded(
            a in proptest::collection::vec(-10.0f64..10.0, 3),
            b in proptest::collection::vec(-10.0f64..10.0, 3),
        ) {
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let squash_norm = |v: &[f64]| {
                let mut tape = Tape::new();
                let x = tape.constant(t(&[3, 1], v));
                let y = tape.squash(x).unwrap();
                norm(tape.value(y).data())
            };
            let (na, nb) = (norm(&a), norm(&b));
            let (sa, sb) = (squash_norm(&a), squash_norm(&b));
            prop_assert!(sa < 1.0 && sb < 1.0);
            if na < nb {
                prop_assert!(sa < sb);
            }
        }
    }

    // ── backward basics ─────────────────────────────────────────────────

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let loss = tape.sum(a);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_at_three_is_six() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1], &[3.0]));
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(a).unwrap_err(),
            TensorError::NonScalarLoss { .. }
        ));
    }

    #[test]
    fn repeated_backward_accumulates_until_cleared() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let loss = tape.sum(a);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0]);
        tape.clear_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
    }

    // ── finite differences for every primitive ──────────────────────────

    #[test]
    fn gradcheck_add_sub_mul_scale() {
        let a = t(&[2, 3], &varied(6, 1));
        let b = t(&[2, 3], &varied(6, 2));
        gradcheck(&[a.clone(), b.clone()], |tape, ids| {
            tape.add(ids[0], ids[1]).unwrap()
        });
        gradcheck(&[a.clone(), b.clone()], |tape, ids| {
            tape.sub(ids[0], ids[1]).unwrap()
        });
        gradcheck(&[a.clone(), b.clone()], |tape, ids| {
            tape.mul(ids[0], ids[1]).unwrap()
        });
        gradcheck(&[a], |tape, ids| tape.scale(ids[0], -1.75));
    }

    #[test]
    fn gradcheck_matmul_transpose() {
        let a = t(&[2, 3], &varied(6, 3));
        let b = t(&[3, 4], &varied(12, 4));
        gradcheck(&[a.clone(), b], |tape, ids| {
            tape.matmul(ids[0], ids[1]).unwrap()
        });
        gradcheck(&[a], |tape, ids| tape.transpose(ids[0]).unwrap());
    }

    #[test]
    fn gradcheck_softmax_both_axes() {
        let x = t(&[3, 4], &varied(12, 5));
        gradcheck(&[x.clone()], |tape, ids| tape.softmax(ids[0], 1).unwrap());
        gradcheck(&[x], |tape, ids| tape.softmax(ids[0], 0).unwrap());
    }

    #[test]
    fn gradcheck_relu_and_windows() {
        let x = t(&[2, 4], &varied(8, 6));
        gradcheck(&[x.clone()], |tape, ids| tape.relu(ids[0]));
        let k = t(&[3, 4], &varied(12, 7));
        gradcheck(&[x.clone(), k], |tape, ids| {
            tape.windowed_conv(ids[0], ids[1], 2, 2).unwrap()
        });
        gradcheck(&[x], |tape, ids| tape.max_pool(ids[0], 2, 2).unwrap());
    }

    #[test]
    fn gradcheck_squash_col_norms() {
        let x = t(&[3, 2], &varied(6, 8));
        gradcheck(&[x.clone()], |tape, ids| tape.squash_cols(ids[0]).unwrap());
        gradcheck(&[x], |tape, ids| tape.col_norms(ids[0]).unwrap());
    }

    #[test]
    fn gradcheck_embed_layer_norm_bias() {
        let table = t(&[5, 3], &varied(15, 9));
        gradcheck(&[table], |tape, ids| {
            tape.embed(ids[0], &[4, 0, 2, 2]).unwrap()
        });
        let x = t(&[4, 3], &varied(12, 10));
        let gamma = t(&[4, 1], &varied(4, 11));
        let beta = t(&[4, 1], &varied(4, 12));
        gradcheck(&[x.clone(), gamma, beta], |tape, ids| {
            tape.layer_norm_cols(ids[0], ids[1], ids[2], 1e-5).unwrap()
        });
        let bias = t(&[4, 1], &varied(4, 13));
        gradcheck(&[x, bias], |tape, ids| {
            tape.add_bias(ids[0], ids[1]).unwrap()
        });
    }

    #[test]
    fn gradcheck_concat_slice_reduce() {
        let a = t(&[2, 2], &varied(4, 14));
        let b = t(&[2, 3], &varied(6, 15));
        gradcheck(&[a.clone(), b.clone()], |tape, ids| {
            tape.concat_cols(&[ids[0], ids[1]]).unwrap()
        });
        let c = t(&[3, 2], &varied(6, 16));
        gradcheck(&[a.clone(), c], |tape, ids| {
            tape.concat_rows(&[ids[0], ids[1]]).unwrap()
        });
        gradcheck(&[b.clone()], |tape, ids| {
            tape.slice_cols(ids[0], 1, 3).unwrap()
        });
        gradcheck(&[b.clone()], |tape, ids| {
            tape.slice_rows(ids[0], 0, 1).unwrap()
        });
        gradcheck(&[b.clone()], |tape, ids| tape.sum(ids[0]));
        gradcheck(&[b], |tape, ids| tape.max_all(ids[0]));
    }

    #[test]
    fn gradcheck_cross_entropy_cols() {
        let logits = t(&[4, 3], &varied(12, 17));
        gradcheck(&[logits], |tape, ids| {
            tape.cross_entropy_cols(ids[0], &[2, 0, 1], &[true, false, true])
                .unwrap()
        });
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[3, 1], &[1.0, 2.0, 0.5]));
        let loss = tape
            .cross_entropy_cols(logits, &[1], &[true])
            .unwrap();
        let z: f64 = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp()).sum();
        let want = -(2.0f64 - z.ln());
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn forward_and_grads_stay_finite() {
        let x = t(&[3, 4], &varied(12, 20));
        let k = t(&[3, 12], &varied(36, 21));
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let kid = tape.leaf(k);
        let s = tape.softmax(xid, 1).unwrap();
        let c = tape.windowed_conv(s, kid, 4, 4).unwrap();
        let q = tape.squash_cols(c).unwrap();
        let n = tape.col_norms(q).unwrap();
        let loss = tape.sum(n);
        tape.backward(loss).unwrap();
        for id in [xid, kid, s, c, q, n, loss] {
            assert!(tape.value(id).data().iter().all(|v| v.is_finite()));
            if let Some(g) = tape.grad(id) {
                assert!(g.iter().all(|v| v.is_finite()));
            }
        }
    }
}
