//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive application of a forward pass; calling
//! [`Tape::backward`] from a scalar walks the recording in reverse and
//! accumulates gradients. Tapes are rebuilt each pass and tracked tensors are
//! never mutated in place, so a node's saved value is always valid when its
//! backward rule runs. A tape is single-threaded: one forward/backward pass
//! owns it exclusively.

use std::sync::Arc;

use crate::conv::{conv3d_backward, conv3d_forward};
use crate::interp::{upsample2_backward, upsample2_forward, warp_backward, warp_forward};
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Ln(TensorId),
    Clamp(TensorId, f64, f64),
    Gelu(TensorId),
    Matmul(TensorId, TensorId),
    Transpose2d(TensorId),
    SoftmaxLast(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    MeanAll(TensorId),
    SumLastKeep(TensorId),
    RepeatLast(TensorId, usize),
    Reshape(TensorId),
    Concat0(Vec<TensorId>),
    GatherRows {
        src: TensorId,
        rows: Arc<Vec<usize>>,
    },
    IndexAddRows {
        base: TensorId,
        rows: TensorId,
        idx: Arc<Vec<usize>>,
    },
    GatherElems {
        src: TensorId,
        idx: Arc<Vec<usize>>,
    },
    AddRowBias {
        x: TensorId,
        bias: TensorId,
    },
    Conv3d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
    },
    GroupedAttention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        segs: Arc<Vec<(usize, usize)>>,
        scale: f64,
    },
    Warp {
        vol: TensorId,
        disp: TensorId,
    },
    Upsample2(TensorId),
}

pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    is_leaf: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            is_leaf: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> TensorId {
        self.values.push(value);
        self.is_leaf.push(matches!(op, Op::Leaf));
        self.ops.push(op);
        self.needs_grad.push(needs);
        self.grads.push(None);
        TensorId(self.values.len() - 1)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.needs_grad[id.0])
    }

    /// Register a differentiable leaf (copies the tensor's current value).
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let mut v = t.clone();
        v.grad = None;
        let needs = t.requires_grad;
        self.push(v, Op::Leaf, needs)
    }

    /// Register a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.values[id.0].shape
    }

    /// Gradient accumulated at `id`, if backward has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Drop all accumulated gradients (e.g. between two backward passes over
    /// the same recording).
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> TensorResult<TensorId> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape.clone(), data);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, op, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let t = &self.values[a.0];
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&x| c * x).collect());
        let needs = self.needs_grad[a.0];
        self.push(out, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let t = &self.values[a.0];
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&x| x + c).collect());
        let needs = self.needs_grad[a.0];
        self.push(out, Op::AddScalar(a), needs)
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let t = &self.values[a.0];
        debug_assert!(t.data.iter().all(|&x| x > 0.0), "ln of non-positive value");
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&x| x.ln()).collect());
        let needs = self.needs_grad[a.0];
        self.push(out, Op::Ln(a), needs)
    }

    /// Clamp to [lo, hi]; gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let t = &self.values[a.0];
        let out = Tensor::new(
            t.shape.clone(),
            t.data.iter().map(|&x| x.clamp(lo, hi)).collect(),
        );
        let needs = self.needs_grad[a.0];
        self.push(out, Op::Clamp(a, lo, hi), needs)
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let t = &self.values[a.0];
        let out = Tensor::new(
            t.shape.clone(),
            t.data.iter().map(|&x| gelu_val(x)).collect(),
        );
        let needs = self.needs_grad[a.0];
        self.push(out, Op::Gelu(a), needs)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// 2D matrix product `[m,p] x [p,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (m, p, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row_a = &ta.data[i * p..(i + 1) * p];
            let row_c = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in row_a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let row_b = &tb.data[kk * n..(kk + 1) * n];
                for (c, &bv) in row_c.iter_mut().zip(row_b) {
                    *c += aik * bv;
                }
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::Matmul(a, b), needs))
    }

    pub fn transpose2d(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let t = &self.values[a.0];
        if t.shape.len() != 2 {
            return Err(TensorError::InvalidArgument(format!(
                "transpose2d expects rank 2, got {:?}",
                t.shape
            )));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data[i * c + j];
            }
        }
        let needs = self.needs_grad[a.0];
        Ok(self.push(Tensor::new(vec![c, r], out), Op::Transpose2d(a), needs))
    }

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax_last(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let t = &self.values[a.0];
        if !t.all_finite() {
            return Err(TensorError::Numeric(
                "softmax input contains non-finite values".into(),
            ));
        }
        let c = *t.shape.last().expect("softmax on empty shape");
        let mut out = t.data.clone();
        for row in out.chunks_exact_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs_grad[a.0];
        Ok(self.push(Tensor::new(t.shape.clone(), out), Op::SoftmaxLast(a), needs))
    }

    /// Per-row standardization over the last axis with learned scale/offset.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TensorResult<TensorId> {
        let t = &self.values[x.0];
        let c = *t.shape.last().expect("layer_norm on empty shape");
        if self.values[gamma.0].numel() != c || self.values[beta.0].numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: t.shape.clone(),
                rhs: self.values[gamma.0].shape.clone(),
            });
        }
        let g = &self.values[gamma.0].data;
        let b = &self.values[beta.0].data;
        let mut out = vec![0.0; t.numel()];
        for (row_in, row_out) in t.data.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let mean = row_in.iter().sum::<f64>() / c as f64;
            let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                row_out[j] = (row_in[j] - mean) * inv * g[j] + b[j];
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(t.shape.clone(), out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            needs,
        ))
    }

    // ── reductions and broadcasts ───────────────────────────────────────

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let t = &self.values[a.0];
        let m = t.data.iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs_grad[a.0];
        self.push(Tensor::scalar(m), Op::MeanAll(a), needs)
    }

    /// `[r, c] -> [r, 1]` row sums.
    pub fn sum_last_keep(&mut self, a: TensorId) -> TensorResult<TensorId> {
        let t = &self.values[a.0];
        if t.shape.len() != 2 {
            return Err(TensorError::InvalidArgument(format!(
                "sum_last_keep expects rank 2, got {:?}",
                t.shape
            )));
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let out: Vec<f64> = t.data.chunks_exact(c).map(|row| row.iter().sum()).collect();
        let needs = self.needs_grad[a.0];
        Ok(self.push(Tensor::new(vec![r, 1], out), Op::SumLastKeep(a), needs))
    }

    /// `[r, 1] -> [r, c]` column broadcast.
    pub fn repeat_last(&mut self, a: TensorId, c: usize) -> TensorResult<TensorId> {
        let t = &self.values[a.0];
        if t.shape.len() != 2 || t.shape[1] != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "repeat_last expects shape [r,1], got {:?}",
                t.shape
            )));
        }
        let r = t.shape[0];
        let mut out = vec![0.0; r * c];
        for (i, &v) in t.data.iter().enumerate() {
            out[i * c..(i + 1) * c].fill(v);
        }
        let needs = self.needs_grad[a.0];
        Ok(self.push(Tensor::new(vec![r, c], out), Op::RepeatLast(a, c), needs))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorResult<TensorId> {
        let t = &self.values[a.0];
        if shape.iter().product::<usize>() != t.numel() {
            return Err(TensorError::InvalidArgument(format!(
                "reshape {:?} -> {:?} changes element count",
                t.shape, shape
            )));
        }
        let out = Tensor::new(shape.to_vec(), t.data.clone());
        let needs = self.needs_grad[a.0];
        Ok(self.push(out, Op::Reshape(a), needs))
    }

    /// Concatenate along axis 0; trailing axes must agree.
    pub fn concat0(&mut self, parts: &[TensorId]) -> TensorResult<TensorId> {
        assert!(!parts.is_empty());
        let tail = self.values[parts[0].0].shape[1..].to_vec();
        let mut dim0 = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.values[p.0];
            if t.shape[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat0",
                    lhs: self.values[parts[0].0].shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            dim0 += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(&tail);
        let needs = self.needs(parts);
        Ok(self.push(Tensor::new(shape, data), Op::Concat0(parts.to_vec()), needs))
    }

    /// Select rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&mut self, src: TensorId, rows: Arc<Vec<usize>>) -> TensorResult<TensorId> {
        let t = &self.values[src.0];
        if t.shape.len() != 2 {
            return Err(TensorError::InvalidArgument(format!(
                "gather_rows expects rank 2, got {:?}",
                t.shape
            )));
        }
        let c = t.shape[1];
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows.iter() {
            debug_assert!(r < t.shape[0]);
            data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
        }
        let needs = self.needs_grad[src.0];
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], data),
            Op::GatherRows { src, rows },
            needs,
        ))
    }

    /// `out = base; out[idx[m], :] += rows[m, :]`.
    pub fn index_add_rows(
        &mut self,
        base: TensorId,
        rows: TensorId,
        idx: Arc<Vec<usize>>,
    ) -> TensorResult<TensorId> {
        let (tb, tr) = (&self.values[base.0], &self.values[rows.0]);
        if tb.shape.len() != 2 || tr.shape.len() != 2 || tb.shape[1] != tr.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "index_add_rows",
                lhs: tb.shape.clone(),
                rhs: tr.shape.clone(),
            });
        }
        assert_eq!(tr.shape[0], idx.len());
        let c = tb.shape[1];
        let mut data = tb.data.clone();
        for (m, &r) in idx.iter().enumerate() {
            debug_assert!(r < tb.shape[0]);
            for j in 0..c {
                data[r * c + j] += tr.data[m * c + j];
            }
        }
        let shape = tb.shape.clone();
        let needs = self.needs(&[base, rows]);
        Ok(self.push(
            Tensor::new(shape, data),
            Op::IndexAddRows { base, rows, idx },
            needs,
        ))
    }

    /// Select arbitrary flat elements into a vector `[m]`.
    pub fn gather_elems(&mut self, src: TensorId, idx: Arc<Vec<usize>>) -> TensorId {
        let t = &self.values[src.0];
        let data: Vec<f64> = idx.iter().map(|&i| t.data[i]).collect();
        let needs = self.needs_grad[src.0];
        self.push(
            Tensor::new(vec![idx.len()], data),
            Op::GatherElems { src, idx },
            needs,
        )
    }

    /// `[r, c] + [c]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> TensorResult<TensorId> {
        let (tx, tb) = (&self.values[x.0], &self.values[bias.0]);
        let c = *tx.shape.last().expect("add_row_bias on empty shape");
        if tb.numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: tx.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut data = tx.data.clone();
        for row in data.chunks_exact_mut(c) {
            for (v, &b) in row.iter_mut().zip(&tb.data) {
                *v += b;
            }
        }
        let shape = tx.shape.clone();
        let needs = self.needs(&[x, bias]);
        Ok(self.push(Tensor::new(shape, data), Op::AddRowBias { x, bias }, needs))
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// 3D cross-correlation, stride 1, zero padding (s-1)/2.
    /// `input [c_in,d,h,w]`, `kernel [c_out,c_in,s,s,s]`, `bias [c_out]`.
    pub fn conv3d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
    ) -> TensorResult<TensorId> {
        let (ti, tk, tb) = (
            &self.values[input.0],
            &self.values[kernel.0],
            &self.values[bias.0],
        );
        if ti.shape.len() != 4 || tk.shape.len() != 5 {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: ti.shape.clone(),
                rhs: tk.shape.clone(),
            });
        }
        let (c_in, dims) = (ti.shape[0], [ti.shape[1], ti.shape[2], ti.shape[3]]);
        let (c_out, s) = (tk.shape[0], tk.shape[2]);
        if tk.shape[1] != c_in || tk.shape[3] != s || tk.shape[4] != s {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: ti.shape.clone(),
                rhs: tk.shape.clone(),
            });
        }
        if s % 2 == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "conv3d kernel size {s} is even"
            )));
        }
        if tb.numel() != c_out {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: tk.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut out = vec![0.0; c_out * dims[0] * dims[1] * dims[2]];
        conv3d_forward(&ti.data, c_in, dims, &tk.data, c_out, s, &tb.data, &mut out);
        let shape = vec![c_out, dims[0], dims[1], dims[2]];
        let needs = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::new(shape, out),
            Op::Conv3d {
                input,
                kernel,
                bias,
            },
            needs,
        ))
    }

    /// Per-row attention restricted to a key/value segment: row `r` of `q`
    /// attends to rows `segs[r].0 .. segs[r].1` of `k`/`v`. Scores are scaled
    /// by `scale` and softmax-normalized.
    pub fn grouped_attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        segs: Arc<Vec<(usize, usize)>>,
        scale: f64,
    ) -> TensorResult<TensorId> {
        let (tq, tk, tv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        if tq.shape.len() != 2 || tk.shape != tv.shape || tk.shape[1] != tq.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "grouped_attention",
                lhs: tq.shape.clone(),
                rhs: tk.shape.clone(),
            });
        }
        assert_eq!(tq.shape[0], segs.len());
        let dh = tq.shape[1];
        let mut out = vec![0.0; tq.numel()];
        let mut scores = Vec::new();
        for (r, &(s0, s1)) in segs.iter().enumerate() {
            debug_assert!(s0 < s1 && s1 <= tk.shape[0]);
            let qr = &tq.data[r * dh..(r + 1) * dh];
            scores.clear();
            let mut m = f64::NEG_INFINITY;
            for j in s0..s1 {
                let kj = &tk.data[j * dh..(j + 1) * dh];
                let s: f64 = scale * qr.iter().zip(kj).map(|(&a, &b)| a * b).sum::<f64>();
                m = m.max(s);
                scores.push(s);
            }
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                sum += *s;
            }
            let or = &mut out[r * dh..(r + 1) * dh];
            for (j, a) in (s0..s1).zip(&scores) {
                let w = a / sum;
                let vj = &tv.data[j * dh..(j + 1) * dh];
                for (dst, &vv) in or.iter_mut().zip(vj) {
                    *dst += w * vv;
                }
            }
        }
        let shape = tq.shape.clone();
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(
            Tensor::new(shape, out),
            Op::GroupedAttention {
                q,
                k,
                v,
                segs,
                scale,
            },
            needs,
        ))
    }

    /// Trilinear warp: `vol [c,d,h,w]` sampled at `x + disp(x)`,
    /// `disp [3,d,h,w]`, border-clamped, differentiable in both.
    pub fn warp(&mut self, vol: TensorId, disp: TensorId) -> TensorResult<TensorId> {
        let (tv, td) = (&self.values[vol.0], &self.values[disp.0]);
        if tv.shape.len() != 4
            || td.shape.len() != 4
            || td.shape[0] != 3
            || tv.shape[1..] != td.shape[1..]
        {
            return Err(TensorError::ShapeMismatch {
                op: "warp",
                lhs: tv.shape.clone(),
                rhs: td.shape.clone(),
            });
        }
        let channels = tv.shape[0];
        let dims = [tv.shape[1], tv.shape[2], tv.shape[3]];
        let mut out = vec![0.0; tv.numel()];
        warp_forward(&tv.data, channels, dims, &td.data, &mut out);
        let shape = tv.shape.clone();
        let needs = self.needs(&[vol, disp]);
        Ok(self.push(Tensor::new(shape, out), Op::Warp { vol, disp }, needs))
    }

    /// Trilinear upsampling by 2 per axis: `[c,d,h,w] -> [c,2d,2h,2w]`.
    pub fn upsample2(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let t = &self.values[x.0];
        if t.shape.len() != 4 {
            return Err(TensorError::InvalidArgument(format!(
                "upsample2 expects rank 4, got {:?}",
                t.shape
            )));
        }
        let channels = t.shape[0];
        let dims = [t.shape[1], t.shape[2], t.shape[3]];
        let mut out = vec![0.0; t.numel() * 8];
        upsample2_forward(&t.data, channels, dims, &mut out);
        let shape = vec![channels, 2 * dims[0], 2 * dims[1], 2 * dims[2]];
        let needs = self.needs_grad[x.0];
        Ok(self.push(Tensor::new(shape, out), Op::Upsample2(x), needs))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Propagate gradients from a scalar node back to every leaf that
    /// requires them.
    pub fn backward(&mut self, from: TensorId) -> TensorResult<()> {
        self.backward_impl(from, 0, false)
    }

    /// Partial backward for intermediate-gradient probes: the reverse sweep
    /// stops at `stop_at` (gradients at nodes with lower indices are left
    /// untouched) and accumulation into leaf nodes is skipped entirely.
    /// Gradients of all nodes at or above `stop_at` are complete on return.
    pub fn backward_partial(&mut self, from: TensorId, stop_at: TensorId) -> TensorResult<()> {
        self.backward_impl(from, stop_at.0, true)
    }

    fn backward_impl(
        &mut self,
        from: TensorId,
        stop: usize,
        skip_leaves: bool,
    ) -> TensorResult<()> {
        if !self.values[from.0].is_scalar() {
            return Err(TensorError::InvalidArgument(format!(
                "backward from non-scalar node of shape {:?}",
                self.values[from.0].shape
            )));
        }
        let Tape {
            values,
            ops,
            needs_grad,
            is_leaf,
            grads,
        } = self;
        let filtered: Vec<bool>;
        let active: &[bool] = if skip_leaves {
            filtered = needs_grad
                .iter()
                .zip(is_leaf.iter())
                .map(|(&n, &l)| n && !l)
                .collect();
            &filtered
        } else {
            needs_grad
        };
        grads[from.0].get_or_insert_with(|| vec![0.0; 1]).fill(1.0);
        for i in (stop..=from.0).rev() {
            if grads[i].is_none() || !active[i] {
                continue;
            }
            let g = grads[i].take().expect("grad checked above");
            backprop(&ops[i], TensorId(i), &g, values, active, grads);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], values: &[Tensor], id: TensorId) -> &'a mut Vec<f64> {
    let n = values[id.0].numel();
    grads[id.0].get_or_insert_with(|| vec![0.0; n])
}

/// One node's reverse step: reads the node's incoming gradient `g` and the
/// saved values of its parents, and accumulates into the buffers of parents
/// marked active.
#[allow(clippy::too_many_lines)]
fn backprop(
    op: &Op,
    node: TensorId,
    g: &[f64],
    values: &[Tensor],
    needs_grad: &[bool],
    grads: &mut [Option<Vec<f64>>],
) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &p in [a, b].iter() {
                if needs_grad[p.0] {
                    for (d, &gv) in buf(grads, values, *p).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if needs_grad[a.0] {
                for (d, &gv) in buf(grads, values, *a).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if needs_grad[b.0] {
                for (d, &gv) in buf(grads, values, *b).iter_mut().zip(g) {
                    *d -= gv;
                }
            }
        }
        Op::Mul(a, b) => {
            if needs_grad[a.0] {
                let vb = &values[b.0].data;
                for ((d, &gv), &bv) in buf(grads, values, *a).iter_mut().zip(g).zip(vb) {
                    *d += gv * bv;
                }
            }
            if needs_grad[b.0] {
                let va = &values[a.0].data;
                for ((d, &gv), &av) in buf(grads, values, *b).iter_mut().zip(g).zip(va) {
                    *d += gv * av;
                }
            }
        }
        Op::Div(a, b) => {
            let vb = &values[b.0].data;
            if needs_grad[a.0] {
                for ((d, &gv), &bv) in buf(grads, values, *a).iter_mut().zip(g).zip(vb) {
                    *d += gv / bv;
                }
            }
            if needs_grad[b.0] {
                let va = &values[a.0].data;
                let db = buf(grads, values, *b);
                for (i, (d, &gv)) in db.iter_mut().zip(g).enumerate() {
                    *d -= gv * va[i] / (vb[i] * vb[i]);
                }
            }
        }
        Op::Scale(a, c) => {
            if needs_grad[a.0] {
                for (d, &gv) in buf(grads, values, *a).iter_mut().zip(g) {
                    *d += c * gv;
                }
            }
        }
        Op::AddScalar(a) => {
            if needs_grad[a.0] {
                for (d, &gv) in buf(grads, values, *a).iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Ln(a) => {
            if needs_grad[a.0] {
                let va = &values[a.0].data;
                for ((d, &gv), &xv) in buf(grads, values, *a).iter_mut().zip(g).zip(va) {
                    *d += gv / xv;
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            if needs_grad[a.0] {
                let va = &values[a.0].data;
                let (lo, hi) = (*lo, *hi);
                for ((d, &gv), &xv) in buf(grads, values, *a).iter_mut().zip(g).zip(va) {
                    if xv > lo && xv < hi {
                        *d += gv;
                    }
                }
            }
        }
        Op::Gelu(a) => {
            if needs_grad[a.0] {
                let va = &values[a.0].data;
                for ((d, &gv), &xv) in buf(grads, values, *a).iter_mut().zip(g).zip(va) {
                    *d += gv * gelu_deriv(xv);
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, p) = (values[a.0].shape[0], values[a.0].shape[1]);
            let n = values[b.0].shape[1];
            if needs_grad[a.0] {
                let vb = &values[b.0].data;
                let da = buf(grads, values, *a);
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for kk in 0..p {
                        let row_b = &vb[kk * n..(kk + 1) * n];
                        let mut acc = 0.0;
                        for (gv, bv) in gi.iter().zip(row_b) {
                            acc += gv * bv;
                        }
                        da[i * p + kk] += acc;
                    }
                }
            }
            if needs_grad[b.0] {
                let va = &values[a.0].data;
                let db = buf(grads, values, *b);
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for kk in 0..p {
                        let aik = va[i * p + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        let row = &mut db[kk * n..(kk + 1) * n];
                        for (d, &gv) in row.iter_mut().zip(gi) {
                            *d += aik * gv;
                        }
                    }
                }
            }
        }
        Op::Transpose2d(a) => {
            if needs_grad[a.0] {
                let (c, r) = (values[node.0].shape[0], values[node.0].shape[1]);
                let da = buf(grads, values, *a);
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::SoftmaxLast(a) => {
            if needs_grad[a.0] {
                let p = &values[node.0].data;
                let c = *values[node.0].shape.last().expect("rank >= 1");
                let da = buf(grads, values, *a);
                for (row, (pr, gr)) in p.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                    let dot: f64 = pr.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                    let dr = &mut da[row * c..(row + 1) * c];
                    for ((d, &pv), &gv) in dr.iter_mut().zip(pr).zip(gr) {
                        *d += pv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        } => {
            let xv = &values[x.0].data;
            let gv = &values[gamma.0].data;
            let c = gv.len();
            let rows = xv.len() / c;
            if needs_grad[x.0] {
                let dx = buf(grads, values, *x);
                for r in 0..rows {
                    let xr = &xv[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut mh = 0.0;
                    let mut mhx = 0.0;
                    for j in 0..c {
                        let xh = (xr[j] - mean) * inv;
                        let hh = gv[j] * gr[j];
                        mh += hh;
                        mhx += hh * xh;
                    }
                    mh /= c as f64;
                    mhx /= c as f64;
                    for j in 0..c {
                        let xh = (xr[j] - mean) * inv;
                        dx[r * c + j] += (gv[j] * gr[j] - mh - xh * mhx) * inv;
                    }
                }
            }
            if needs_grad[gamma.0] {
                let dgamma = buf(grads, values, *gamma);
                for r in 0..rows {
                    let xr = &xv[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..c {
                        dgamma[j] += gr[j] * (xr[j] - mean) * inv;
                    }
                }
            }
            if needs_grad[beta.0] {
                let dbeta = buf(grads, values, *beta);
                for gr in g.chunks_exact(c) {
                    for (d, &gvv) in dbeta.iter_mut().zip(gr) {
                        *d += gvv;
                    }
                }
            }
        }
        Op::MeanAll(a) => {
            if needs_grad[a.0] {
                let n = values[a.0].numel() as f64;
                let gv = g[0] / n;
                for d in buf(grads, values, *a).iter_mut() {
                    *d += gv;
                }
            }
        }
        Op::SumLastKeep(a) => {
            if needs_grad[a.0] {
                let c = values[a.0].shape[1];
                let da = buf(grads, values, *a);
                for (r, &gv) in g.iter().enumerate() {
                    for d in da[r * c..(r + 1) * c].iter_mut() {
                        *d += gv;
                    }
                }
            }
        }
        Op::RepeatLast(a, c) => {
            if needs_grad[a.0] {
                let da = buf(grads, values, *a);
                for (r, chunk) in g.chunks_exact(*c).enumerate() {
                    da[r] += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::Reshape(a) => {
            if needs_grad[a.0] {
                for (d, &gv) in buf(grads, values, *a).iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Concat0(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = values[p.0].numel();
                if needs_grad[p.0] {
                    for (d, &gv) in buf(grads, values, p).iter_mut().zip(&g[off..off + n]) {
                        *d += gv;
                    }
                }
                off += n;
            }
        }
        Op::GatherRows { src, rows } => {
            if needs_grad[src.0] {
                let c = values[src.0].shape[1];
                let ds = buf(grads, values, *src);
                for (m, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        ds[r * c + j] += g[m * c + j];
                    }
                }
            }
        }
        Op::IndexAddRows { base, rows, idx } => {
            if needs_grad[base.0] {
                for (d, &gv) in buf(grads, values, *base).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if needs_grad[rows.0] {
                let c = values[rows.0].shape[1];
                let dr = buf(grads, values, *rows);
                for (m, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        dr[m * c + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::GatherElems { src, idx } => {
            if needs_grad[src.0] {
                let ds = buf(grads, values, *src);
                for (m, &i) in idx.iter().enumerate() {
                    ds[i] += g[m];
                }
            }
        }
        Op::AddRowBias { x, bias } => {
            if needs_grad[x.0] {
                for (d, &gv) in buf(grads, values, *x).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if needs_grad[bias.0] {
                let c = values[bias.0].numel();
                let db = buf(grads, values, *bias);
                for chunk in g.chunks_exact(c) {
                    for (d, &gv) in db.iter_mut().zip(chunk) {
                        *d += gv;
                    }
                }
            }
        }
        Op::Conv3d {
            input,
            kernel,
            bias,
        } => {
            let ti = &values[input.0];
            let (c_in, dims) = (ti.shape[0], [ti.shape[1], ti.shape[2], ti.shape[3]]);
            let tk = &values[kernel.0];
            let (c_out, s) = (tk.shape[0], tk.shape[2]);
            let want_input = needs_grad[input.0];
            let want_kernel = needs_grad[kernel.0];
            let want_bias = needs_grad[bias.0];
            let mut d_in = if want_input {
                vec![0.0; ti.numel()]
            } else {
                vec![]
            };
            let mut d_ker = if want_kernel {
                vec![0.0; tk.numel()]
            } else {
                vec![]
            };
            let mut d_bias = if want_bias { vec![0.0; c_out] } else { vec![] };
            conv3d_backward(
                g,
                &ti.data,
                c_in,
                dims,
                &tk.data,
                c_out,
                s,
                &mut d_in,
                &mut d_ker,
                &mut d_bias,
            );
            if want_input {
                for (d, v) in buf(grads, values, *input).iter_mut().zip(&d_in) {
                    *d += v;
                }
            }
            if want_kernel {
                for (d, v) in buf(grads, values, *kernel).iter_mut().zip(&d_ker) {
                    *d += v;
                }
            }
            if want_bias {
                for (d, v) in buf(grads, values, *bias).iter_mut().zip(&d_bias) {
                    *d += v;
                }
            }
        }
        Op::GroupedAttention {
            q,
            k,
            v,
            segs,
            scale,
        } => {
            let tq = &values[q.0].data;
            let tk = &values[k.0].data;
            let tv = &values[v.0].data;
            let dh = values[q.0].shape[1];
            let mut dq = vec![0.0; tq.len()];
            let mut dk = vec![0.0; tk.len()];
            let mut dv = vec![0.0; tv.len()];
            let mut attn = Vec::new();
            let mut da = Vec::new();
            for (r, &(s0, s1)) in segs.iter().enumerate() {
                let qr = &tq[r * dh..(r + 1) * dh];
                let gr = &g[r * dh..(r + 1) * dh];
                attn.clear();
                let mut m = f64::NEG_INFINITY;
                for j in s0..s1 {
                    let kj = &tk[j * dh..(j + 1) * dh];
                    let s: f64 = scale * qr.iter().zip(kj).map(|(&a, &b)| a * b).sum::<f64>();
                    m = m.max(s);
                    attn.push(s);
                }
                let mut sum = 0.0;
                for s in attn.iter_mut() {
                    *s = (*s - m).exp();
                    sum += *s;
                }
                for s in attn.iter_mut() {
                    *s /= sum;
                }
                da.clear();
                let mut dot = 0.0;
                for (j, &a) in (s0..s1).zip(&attn) {
                    let vj = &tv[j * dh..(j + 1) * dh];
                    let dval: f64 = gr.iter().zip(vj).map(|(&gg, &vv)| gg * vv).sum();
                    da.push(dval);
                    dot += dval * a;
                    for (d, &gg) in dv[j * dh..(j + 1) * dh].iter_mut().zip(gr) {
                        *d += a * gg;
                    }
                }
                for ((j, &a), &dval) in (s0..s1).zip(&attn).zip(&da) {
                    let ds = a * (dval - dot) * scale;
                    let kj = &tk[j * dh..(j + 1) * dh];
                    for (dqv, &kv) in dq[r * dh..(r + 1) * dh].iter_mut().zip(kj) {
                        *dqv += ds * kv;
                    }
                    for (dkv, &qv) in dk[j * dh..(j + 1) * dh].iter_mut().zip(qr) {
                        *dkv += ds * qv;
                    }
                }
            }
            if needs_grad[q.0] {
                for (d, v2) in buf(grads, values, *q).iter_mut().zip(&dq) {
                    *d += v2;
                }
            }
            if needs_grad[k.0] {
                for (d, v2) in buf(grads, values, *k).iter_mut().zip(&dk) {
                    *d += v2;
                }
            }
            if needs_grad[v.0] {
                for (d, v2) in buf(grads, values, *v).iter_mut().zip(&dv) {
                    *d += v2;
                }
            }
        }
        Op::Warp { vol, disp } => {
            let tv = &values[vol.0];
            let channels = tv.shape[0];
            let dims = [tv.shape[1], tv.shape[2], tv.shape[3]];
            let disp_data = &values[disp.0].data;
            let mut d_vol = if needs_grad[vol.0] {
                vec![0.0; tv.numel()]
            } else {
                vec![]
            };
            let mut d_disp = if needs_grad[disp.0] {
                vec![0.0; disp_data.len()]
            } else {
                vec![]
            };
            warp_backward(
                g,
                &tv.data,
                channels,
                dims,
                disp_data,
                &mut d_vol,
                &mut d_disp,
            );
            if !d_vol.is_empty() {
                for (d, v2) in buf(grads, values, *vol).iter_mut().zip(&d_vol) {
                    *d += v2;
                }
            }
            if !d_disp.is_empty() {
                for (d, v2) in buf(grads, values, *disp).iter_mut().zip(&d_disp) {
                    *d += v2;
                }
            }
        }
        Op::Upsample2(a) => {
            if needs_grad[a.0] {
                let t = &values[a.0];
                let channels = t.shape[0];
                let dims = [t.shape[1], t.shape[2], t.shape[3]];
                let mut dx = vec![0.0; t.numel()];
                upsample2_backward(g, channels, dims, &mut dx);
                for (d, v2) in buf(grads, values, *a).iter_mut().zip(&dx) {
                    *d += v2;
                }
            }
        }
    }
}
