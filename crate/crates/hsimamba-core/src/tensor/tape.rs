use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::{broadcast_shape, broadcast_strides, StrideWalker, Tensor, TensorError};
use crate::math;

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `a` is `[.., m, k]` (any leading batch dims), `b` is a `[k, n]` matrix.
    MatMul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Reshape { x: TensorId },
    Softmax { x: TensorId, axis: usize },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    Sigmoid { x: TensorId },
    Silu { x: TensorId },
    Relu { x: TensorId },
    Softplus { x: TensorId },
    Sqrt { x: TensorId },
    Scale { x: TensorId, c: f64 },
    AddScalar { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Sum { x: TensorId },
    SumAxis { x: TensorId, axis: usize },
    GatherRows { x: TensorId, idx: Rc<Vec<usize>> },
    ScatterRows { x: TensorId, idx: Rc<Vec<usize>> },
    /// `[n, m]` matrix of squared Euclidean distances between row sets.
    PairwiseSqdist { a: TensorId, b: TensorId },
    /// Fused causal selective-scan recurrence; `hist` keeps the hidden
    /// states from the forward pass for the adjoint sweep.
    SelectiveScan {
        u: TensorId,
        delta: TensorId,
        log_a: TensorId,
        b_in: TensorId,
        c_in: TensorId,
        d_skip: TensorId,
        hist: Rc<Vec<f64>>,
    },
    /// Mean cross-entropy over rows whose target is >= 0.
    CrossEntropy {
        logits: TensorId,
        targets: Rc<Vec<i64>>,
        probs: Rc<Vec<f64>>,
    },
    LastToken { x: TensorId },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Define-by-run computation tape.
///
/// Operations append nodes in execution order; [`Tape::backward`] walks the
/// nodes in exact reverse order with a fixed per-op accumulation sequence,
/// so gradients are bit-reproducible for identical tapes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        id
    }

    /// Records an input tensor (parameter, activation, or constant).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if reached.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the node value.
    pub fn grad_tensor(&self, id: TensorId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value shape")
        })
    }

    // ── shape helpers ──────────────────────────────────────────────────

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    // ── linear algebra ─────────────────────────────────────────────────

    /// `a` of shape `[.., m, k]` times a `[k, n]` matrix, batched over the
    /// leading axes of `a`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k, n) = (ash[ash.len() - 2], ash[ash.len() - 1], bsh[1]);
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out_shape = ash.clone();
        let last = out_shape.len() - 1;
        out_shape[last] = n;
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for q in 0..batch {
                let abase = q * m * k;
                let obase = q * m * n;
                for i in 0..m {
                    let arow = &ad[abase + i * k..abase + (i + 1) * k];
                    let orow = &mut out[obase + i * n..obase + (i + 1) * n];
                    for (p, &aip) in arow.iter().enumerate() {
                        let brow = &bd[p * n..(p + 1) * n];
                        for j in 0..n {
                            orow[j] += aip * brow[j];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(out_shape, out).expect("matmul shape");
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: sh,
                rhs: Vec::new(),
            });
        }
        let (m, n) = (sh[0], sh[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out).expect("transpose shape");
        Ok(self.push(value, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::new(shape, self.data(x).to_vec()).expect("reshape");
        Ok(self.push(value, Op::Reshape { x }))
    }

    // ── nonlinearities ─────────────────────────────────────────────────

    /// Softmax along `axis`, with the axis max subtracted before
    /// exponentiation. Rejects non-finite input.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let sh = self.shape(x).to_vec();
        if axis >= sh.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                ndim: sh.len(),
            });
        }
        if !self.nodes[x.0].value.all_finite() {
            return Err(TensorError::NonFiniteInput { op: "softmax" });
        }
        let (outer, len, inner) = split_axis(&sh, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(xd[base + j * inner]);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = math::exp(xd[base + j * inner] - max);
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        let value = Tensor::new(sh, out).expect("softmax shape");
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last (feature) axis with affine output.
    pub fn layernorm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let sh = self.shape(x).to_vec();
        let feat = *sh.last().unwrap_or(&0);
        if feat < 1 {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: sh,
                rhs: Vec::new(),
            });
        }
        if self.shape(gain) != [feat] || self.shape(bias) != [feat] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape(gain).to_vec(),
                rhs: vec![feat],
            });
        }
        let rows = self.nodes[x.0].value.numel() / feat;
        let mut out = vec![0.0; rows * feat];
        {
            let xd = self.data(x);
            let gd = self.data(gain);
            let bd = self.data(bias);
            for r in 0..rows {
                let row = &xd[r * feat..(r + 1) * feat];
                let mean = row.iter().sum::<f64>() / feat as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / feat as f64;
                let inv = 1.0 / math::sqrt(var + eps);
                let orow = &mut out[r * feat..(r + 1) * feat];
                for f in 0..feat {
                    orow[f] = (row[f] - mean) * inv * gd[f] + bd[f];
                }
            }
        }
        let value = Tensor::new(sh, out).expect("layernorm shape");
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let value = self.map_unary(x, math::sigmoid);
        self.push(value, Op::Sigmoid { x })
    }

    pub fn silu(&mut self, x: TensorId) -> TensorId {
        let value = self.map_unary(x, |v| v * math::sigmoid(v));
        self.push(value, Op::Silu { x })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let value = self.map_unary(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu { x })
    }

    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        let value = self.map_unary(x, math::softplus);
        self.push(value, Op::Softplus { x })
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        let value = self.map_unary(x, math::sqrt);
        self.push(value, Op::Sqrt { x })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let value = self.map_unary(x, |v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let value = self.map_unary(x, |v| v + c);
        self.push(value, Op::AddScalar { x })
    }

    fn map_unary(&self, x: TensorId, f: impl Fn(f64) -> f64) -> Tensor {
        let node = &self.nodes[x.0].value;
        let data = node.data().iter().map(|&v| f(v)).collect();
        Tensor::new(node.shape().to_vec(), data).expect("unary shape")
    }

    // ── broadcast binary ops ───────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary("div", a, b, |x, y| x / y, |a, b| Op::Div { a, b })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(TensorId, TensorId) -> Op,
    ) -> Result<TensorId, TensorError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&ash, &bsh).ok_or(TensorError::ShapeMismatch {
            op: name,
            lhs: ash.clone(),
            rhs: bsh.clone(),
        })?;
        let numel: usize = out_shape.iter().product();
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; numel];
        if ash == bsh {
            for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
                *o = f(x, y);
            }
        } else {
            let mut wa = StrideWalker::new(&out_shape, broadcast_strides(&ash, &out_shape));
            let mut wb = StrideWalker::new(&out_shape, broadcast_strides(&bsh, &out_shape));
            for o in out.iter_mut() {
                *o = f(ad[wa.offset()], bd[wb.offset()]);
                wa.advance();
                wb.advance();
            }
        }
        let value = Tensor::new(out_shape, out).expect("binary shape");
        Ok(self.push(value, op(a, b)))
    }

    // ── reductions ─────────────────────────────────────────────────────

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].value.numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let sh = self.shape(x).to_vec();
        if axis >= sh.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                ndim: sh.len(),
            });
        }
        let (outer, len, inner) = split_axis(&sh, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * len + j) * inner + i];
                }
            }
        }
        let mut out_shape = sh;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out).expect("sum_axis shape");
        Ok(self.push(value, Op::SumAxis { x, axis }))
    }

    // ── token indexing ─────────────────────────────────────────────────

    /// Selects rows of a `[L, D]` tensor. Gradient scatters back with
    /// accumulation, so repeated indices are allowed here.
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId, TensorError> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: sh,
                rhs: Vec::new(),
            });
        }
        let (rows, width) = (sh[0], sh[1]);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    index: i,
                    len: rows,
                });
            }
        }
        let xd = self.data(x);
        let mut out = vec![0.0; idx.len() * width];
        for (r, &i) in idx.iter().enumerate() {
            out[r * width..(r + 1) * width].copy_from_slice(&xd[i * width..(i + 1) * width]);
        }
        let value = Tensor::new(vec![idx.len(), width], out).expect("gather shape");
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: Rc::new(idx.to_vec()),
            },
        ))
    }

    /// Places the rows of an `[n, D]` tensor at distinct positions of an
    /// `[out_rows, D]` output; untargeted rows are zero.
    pub fn scatter_rows(
        &mut self,
        x: TensorId,
        idx: &[usize],
        out_rows: usize,
    ) -> Result<TensorId, TensorError> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 2 || sh[0] != idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                lhs: sh,
                rhs: vec![idx.len()],
            });
        }
        let width = sh[1];
        let mut seen = vec![false; out_rows];
        for &i in idx {
            if i >= out_rows {
                return Err(TensorError::IndexOutOfRange {
                    index: i,
                    len: out_rows,
                });
            }
            if seen[i] {
                return Err(TensorError::DuplicateScatterIndex { index: i });
            }
            seen[i] = true;
        }
        let xd = self.data(x);
        let mut out = vec![0.0; out_rows * width];
        for (r, &i) in idx.iter().enumerate() {
            out[i * width..(i + 1) * width].copy_from_slice(&xd[r * width..(r + 1) * width]);
        }
        let value = Tensor::new(vec![out_rows, width], out).expect("scatter shape");
        Ok(self.push(
            value,
            Op::ScatterRows {
                x,
                idx: Rc::new(idx.to_vec()),
            },
        ))
    }

    /// Squared Euclidean distances between the rows of `[n, D]` and `[m, D]`.
    pub fn pairwise_sqdist(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[1] {
            return Err(TensorError::ShapeMismatch {
                op: "pairwise_sqdist",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (n, m, width) = (ash[0], bsh[0], ash[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &ad[i * width..(i + 1) * width];
            for j in 0..m {
                let brow = &bd[j * width..(j + 1) * width];
                let mut acc = 0.0;
                for (x, y) in arow.iter().zip(brow) {
                    let d = x - y;
                    acc += d * d;
                }
                out[i * m + j] = acc;
            }
        }
        let value = Tensor::new(vec![n, m], out).expect("sqdist shape");
        Ok(self.push(value, Op::PairwiseSqdist { a, b }))
    }

    /// Last sequence position of a `[B, N, D]` tensor, shape `[B, D]`.
    pub fn last_token(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "last_token",
                lhs: sh,
                rhs: Vec::new(),
            });
        }
        if sh[1] == 0 {
            return Err(TensorError::EmptySequence { op: "last_token" });
        }
        let (b, n, d) = (sh[0], sh[1], sh[2]);
        let xd = self.data(x);
        let mut out = vec![0.0; b * d];
        for q in 0..b {
            let src = (q * n + (n - 1)) * d;
            out[q * d..(q + 1) * d].copy_from_slice(&xd[src..src + d]);
        }
        let value = Tensor::new(vec![b, d], out).expect("last_token shape");
        Ok(self.push(value, Op::LastToken { x }))
    }

    // ── fused model ops ────────────────────────────────────────────────

    /// Causal selective-scan recurrence over `[B, N, D_inner]` inputs:
    ///
    /// `h_t = exp(Δ_t ⊙ A) ⊙ h_{t-1} + (Δ_t ⊙ u_t) ⊗ B_t`,
    /// `y_t = Σ_s C_t[s] · h_t[·, s] + D ⊙ u_t`,
    ///
    /// with `A = −exp(log_a)` of shape `[D_inner, S]`, `B_t`/`C_t` of shape
    /// `[B, N, S]` and skip `d_skip` of shape `[D_inner]`.
    pub fn selective_scan(
        &mut self,
        u: TensorId,
        delta: TensorId,
        log_a: TensorId,
        b_in: TensorId,
        c_in: TensorId,
        d_skip: TensorId,
    ) -> Result<TensorId, TensorError> {
        let ush = self.shape(u).to_vec();
        if ush.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "selective_scan",
                lhs: ush,
                rhs: Vec::new(),
            });
        }
        let (bs, n, di) = (ush[0], ush[1], ush[2]);
        if n == 0 {
            return Err(TensorError::EmptySequence {
                op: "selective_scan",
            });
        }
        let ash = self.shape(log_a).to_vec();
        if ash.len() != 2 || ash[0] != di {
            return Err(TensorError::ShapeMismatch {
                op: "selective_scan",
                lhs: ush,
                rhs: ash,
            });
        }
        let s = ash[1];
        if self.shape(delta) != ush.as_slice()
            || self.shape(b_in) != [bs, n, s]
            || self.shape(c_in) != [bs, n, s]
            || self.shape(d_skip) != [di]
        {
            return Err(TensorError::ShapeMismatch {
                op: "selective_scan",
                lhs: ush,
                rhs: self.shape(b_in).to_vec(),
            });
        }

        let ud = self.data(u);
        let dd = self.data(delta);
        let lad = self.data(log_a);
        let bd = self.data(b_in);
        let cd = self.data(c_in);
        let skip = self.data(d_skip);

        let a: Vec<f64> = lad.iter().map(|&v| -math::exp(v)).collect();
        let mut hist = vec![0.0; bs * n * di * s];
        let mut out = vec![0.0; bs * n * di];
        let mut h = vec![0.0; di * s];
        for q in 0..bs {
            h.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..n {
                let tok = (q * n + t) * di;
                let brow = &bd[(q * n + t) * s..(q * n + t + 1) * s];
                let crow = &cd[(q * n + t) * s..(q * n + t + 1) * s];
                for d in 0..di {
                    let dt = dd[tok + d];
                    let uv = ud[tok + d];
                    let dtu = dt * uv;
                    let hrow = &mut h[d * s..(d + 1) * s];
                    let arow = &a[d * s..(d + 1) * s];
                    let mut acc = 0.0;
                    for j in 0..s {
                        let abar = math::exp(dt * arow[j]);
                        let hnew = abar * hrow[j] + dtu * brow[j];
                        hrow[j] = hnew;
                        acc += crow[j] * hnew;
                    }
                    out[tok + d] = acc + skip[d] * uv;
                }
                let hbase = (q * n + t) * di * s;
                hist[hbase..hbase + di * s].copy_from_slice(&h);
            }
        }
        let value = Tensor::new(vec![bs, n, di], out).expect("scan shape");
        Ok(self.push(
            value,
            Op::SelectiveScan {
                u,
                delta,
                log_a,
                b_in,
                c_in,
                d_skip,
                hist: Rc::new(hist),
            },
        ))
    }

    /// Mean cross-entropy of `[L, K]` logits against integer targets;
    /// rows with target `< 0` are excluded from both loss and gradient.
    pub fn cross_entropy_mean(
        &mut self,
        logits: TensorId,
        targets: &[i64],
    ) -> Result<TensorId, TensorError> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 || sh[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: sh,
                rhs: vec![targets.len()],
            });
        }
        let (rows, classes) = (sh[0], sh[1]);
        let xd = self.data(logits);
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..rows {
            let t = targets[r];
            if t < 0 {
                continue;
            }
            let t = t as usize;
            if t >= classes {
                return Err(TensorError::IndexOutOfRange {
                    index: t,
                    len: classes,
                });
            }
            let row = &xd[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (k, &v) in row.iter().enumerate() {
                let e = math::exp(v - max);
                probs[r * classes + k] = e;
                denom += e;
            }
            for k in 0..classes {
                probs[r * classes + k] /= denom;
            }
            total += math::ln(denom) + max - row[t];
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: Rc::new(targets.to_vec()),
                probs: Rc::new(probs),
            },
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar loss. Fails on a non-scalar
    /// loss and on a second call for the same tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let contribs = parent_grads(&self.nodes, i, &g);
            self.nodes[i].grad = Some(g);
            for (parent, contrib) in contribs {
                self.accumulate(parent, &contrib);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[f64]) {
        let node = &mut self.nodes[id.0];
        let grad = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.numel()]);
        for (g, c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }
}

/// Decomposes a shape around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sums `g` (laid out as `out_shape`) down to an operand's shape for
/// broadcast binary ops, applying `f` to each upstream element first.
fn reduce_to_operand(
    g: &[f64],
    out_shape: &[usize],
    operand_shape: &[usize],
    operand_numel: usize,
    f: impl Fn(usize, f64) -> f64,
) -> Vec<f64> {
    let mut out = vec![0.0; operand_numel];
    let mut w = StrideWalker::new(out_shape, broadcast_strides(operand_shape, out_shape));
    for (flat, &gv) in g.iter().enumerate() {
        out[w.offset()] += f(flat, gv);
        w.advance();
    }
    out
}

fn parent_grads(nodes: &[Node], idx: usize, g: &[f64]) -> Vec<(TensorId, Vec<f64>)> {
    let value = &nodes[idx].value;
    match &nodes[idx].op {
        Op::Leaf => Vec::new(),

        Op::MatMul { a, b } => {
            let ash = nodes[a.0].value.shape();
            let bsh = nodes[b.0].value.shape();
            let (m, k, n) = (ash[ash.len() - 2], ash[ash.len() - 1], bsh[1]);
            let batch: usize = ash[..ash.len() - 2].iter().product();
            let ad = nodes[a.0].value.data();
            let bd = nodes[b.0].value.data();
            let mut ga = vec![0.0; batch * m * k];
            let mut gb = vec![0.0; k * n];
            for q in 0..batch {
                let abase = q * m * k;
                let obase = q * m * n;
                for i in 0..m {
                    let grow = &g[obase + i * n..obase + (i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        ga[abase + i * k + p] = acc;
                    }
                    let aip = &ad[abase + i * k..abase + (i + 1) * k];
                    for p in 0..k {
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            gbrow[j] += aip[p] * grow[j];
                        }
                    }
                }
            }
            vec![(*a, ga), (*b, gb)]
        }

        Op::Transpose { x } => {
            let sh = value.shape();
            let (m, n) = (sh[0], sh[1]); // value is [n_orig, m_orig] transposed
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    gx[j * m + i] = g[i * n + j];
                }
            }
            vec![(*x, gx)]
        }

        Op::Reshape { x } => vec![(*x, g.to_vec())],

        Op::Softmax { axis, x } => {
            let sh = value.shape();
            let (outer, len, inner) = split_axis(sh, *axis);
            let y = value.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = 0.0;
                    for j in 0..len {
                        let p = base + j * inner;
                        dot += g[p] * y[p];
                    }
                    for j in 0..len {
                        let p = base + j * inner;
                        gx[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            vec![(*x, gx)]
        }

        Op::LayerNorm { x, gain, bias, eps } => {
            let xv = nodes[x.0].value.data();
            let gd = nodes[gain.0].value.data();
            let feat = nodes[gain.0].value.numel();
            let rows = xv.len() / feat;
            let mut gx = vec![0.0; xv.len()];
            let mut ggain = vec![0.0; feat];
            let mut gbias = vec![0.0; feat];
            for r in 0..rows {
                let row = &xv[r * feat..(r + 1) * feat];
                let grow = &g[r * feat..(r + 1) * feat];
                let mean = row.iter().sum::<f64>() / feat as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / feat as f64;
                let inv = 1.0 / math::sqrt(var + eps);
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for f in 0..feat {
                    let xhat = (row[f] - mean) * inv;
                    let dxhat = grow[f] * gd[f];
                    ggain[f] += grow[f] * xhat;
                    gbias[f] += grow[f];
                    m1 += dxhat;
                    m2 += dxhat * xhat;
                }
                m1 /= feat as f64;
                m2 /= feat as f64;
                for f in 0..feat {
                    let xhat = (row[f] - mean) * inv;
                    let dxhat = grow[f] * gd[f];
                    gx[r * feat + f] = inv * (dxhat - m1 - xhat * m2);
                }
            }
            vec![(*x, gx), (*gain, ggain), (*bias, gbias)]
        }

        Op::Sigmoid { x } => {
            let y = value.data();
            let gx = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect();
            vec![(*x, gx)]
        }

        Op::Silu { x } => {
            let xv = nodes[x.0].value.data();
            let gx = g
                .iter()
                .zip(xv)
                .map(|(&gv, &v)| {
                    let s = math::sigmoid(v);
                    gv * s * (1.0 + v * (1.0 - s))
                })
                .collect();
            vec![(*x, gx)]
        }

        Op::Relu { x } => {
            let xv = nodes[x.0].value.data();
            let gx = g
                .iter()
                .zip(xv)
                .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                .collect();
            vec![(*x, gx)]
        }

        Op::Softplus { x } => {
            let xv = nodes[x.0].value.data();
            let gx = g
                .iter()
                .zip(xv)
                .map(|(&gv, &v)| gv * math::sigmoid(v))
                .collect();
            vec![(*x, gx)]
        }

        Op::Sqrt { x } => {
            let y = value.data();
            let gx = g.iter().zip(y).map(|(&gv, &yv)| gv * 0.5 / yv).collect();
            vec![(*x, gx)]
        }

        Op::Scale { x, c } => vec![(*x, g.iter().map(|&gv| gv * c).collect())],

        Op::AddScalar { x } => vec![(*x, g.to_vec())],

        Op::Add { a, b } => {
            let out_shape = value.shape();
            let ga = reduce_to_operand(
                g,
                out_shape,
                nodes[a.0].value.shape(),
                nodes[a.0].value.numel(),
                |_, gv| gv,
            );
            let gb = reduce_to_operand(
                g,
                out_shape,
                nodes[b.0].value.shape(),
                nodes[b.0].value.numel(),
                |_, gv| gv,
            );
            vec![(*a, ga), (*b, gb)]
        }

        Op::Sub { a, b } => {
            let out_shape = value.shape();
            let ga = reduce_to_operand(
                g,
                out_shape,
                nodes[a.0].value.shape(),
                nodes[a.0].value.numel(),
                |_, gv| gv,
            );
            let gb = reduce_to_operand(
                g,
                out_shape,
                nodes[b.0].value.shape(),
                nodes[b.0].value.numel(),
                |_, gv| -gv,
            );
            vec![(*a, ga), (*b, gb)]
        }

        Op::Mul { a, b } => {
            let out_shape = value.shape().to_vec();
            let bexp = expand_to(&nodes[b.0].value, &out_shape);
            let aexp = expand_to(&nodes[a.0].value, &out_shape);
            let ga = reduce_to_operand(
                g,
                &out_shape,
                nodes[a.0].value.shape(),
                nodes[a.0].value.numel(),
                |i, gv| gv * bexp[i],
            );
            let gb = reduce_to_operand(
                g,
                &out_shape,
                nodes[b.0].value.shape(),
                nodes[b.0].value.numel(),
                |i, gv| gv * aexp[i],
            );
            vec![(*a, ga), (*b, gb)]
        }

        Op::Div { a, b } => {
            let out_shape = value.shape().to_vec();
            let bexp = expand_to(&nodes[b.0].value, &out_shape);
            let outv = value.data();
            let ga = reduce_to_operand(
                g,
                &out_shape,
                nodes[a.0].value.shape(),
                nodes[a.0].value.numel(),
                |i, gv| gv / bexp[i],
            );
            let gb = reduce_to_operand(
                g,
                &out_shape,
                nodes[b.0].value.shape(),
                nodes[b.0].value.numel(),
                |i, gv| -gv * outv[i] / bexp[i],
            );
            vec![(*a, ga), (*b, gb)]
        }

        Op::Sum { x } => {
            let n = nodes[x.0].value.numel();
            vec![(*x, vec![g[0]; n])]
        }

        Op::SumAxis { x, axis } => {
            let sh = nodes[x.0].value.shape();
            let (outer, len, inner) = split_axis(sh, *axis);
            let mut gx = vec![0.0; nodes[x.0].value.numel()];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        gx[(o * len + j) * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![(*x, gx)]
        }

        Op::GatherRows { x, idx } => {
            let width = value.shape()[1];
            let mut gx = vec![0.0; nodes[x.0].value.numel()];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..width {
                    gx[i * width + c] += g[r * width + c];
                }
            }
            vec![(*x, gx)]
        }

        Op::ScatterRows { x, idx } => {
            let width = value.shape()[1];
            let mut gx = vec![0.0; nodes[x.0].value.numel()];
            for (r, &i) in idx.iter().enumerate() {
                gx[r * width..(r + 1) * width].copy_from_slice(&g[i * width..(i + 1) * width]);
            }
            vec![(*x, gx)]
        }

        Op::PairwiseSqdist { a, b } => {
            let ad = nodes[a.0].value.data();
            let bd = nodes[b.0].value.data();
            let width = nodes[a.0].value.shape()[1];
            let n = nodes[a.0].value.shape()[0];
            let m = nodes[b.0].value.shape()[0];
            let mut ga = vec![0.0; ad.len()];
            let mut gb = vec![0.0; bd.len()];
            for i in 0..n {
                for j in 0..m {
                    let gv = g[i * m + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..width {
                        let d = ad[i * width + c] - bd[j * width + c];
                        ga[i * width + c] += gv * 2.0 * d;
                        gb[j * width + c] -= gv * 2.0 * d;
                    }
                }
            }
            vec![(*a, ga), (*b, gb)]
        }

        Op::SelectiveScan {
            u,
            delta,
            log_a,
            b_in,
            c_in,
            d_skip,
            hist,
        } => {
            let ush = nodes[u.0].value.shape();
            let (bs, n, di) = (ush[0], ush[1], ush[2]);
            let s = nodes[log_a.0].value.shape()[1];
            let ud = nodes[u.0].value.data();
            let dd = nodes[delta.0].value.data();
            let lad = nodes[log_a.0].value.data();
            let bd = nodes[b_in.0].value.data();
            let cd = nodes[c_in.0].value.data();
            let skip = nodes[d_skip.0].value.data();
            let a: Vec<f64> = lad.iter().map(|&v| -math::exp(v)).collect();

            let mut gu = vec![0.0; ud.len()];
            let mut gdelta = vec![0.0; dd.len()];
            let mut gloga = vec![0.0; lad.len()];
            let mut gb = vec![0.0; bd.len()];
            let mut gc = vec![0.0; cd.len()];
            let mut gskip = vec![0.0; skip.len()];
            let mut gh = vec![0.0; di * s];

            for q in 0..bs {
                gh.iter_mut().for_each(|v| *v = 0.0);
                for t in (0..n).rev() {
                    let tok = (q * n + t) * di;
                    let seq = (q * n + t) * s;
                    let hbase = (q * n + t) * di * s;
                    for d in 0..di {
                        let gy = g[tok + d];
                        let uv = ud[tok + d];
                        let dt = dd[tok + d];
                        gu[tok + d] += gy * skip[d];
                        gskip[d] += gy * uv;
                        for j in 0..s {
                            let h_ts = hist[hbase + d * s + j];
                            gc[seq + j] += gy * h_ts;
                            let mut ghds = gh[d * s + j] + gy * cd[seq + j];
                            let a_ds = a[d * s + j];
                            let abar = math::exp(dt * a_ds);
                            let hprev = if t > 0 {
                                hist[hbase - di * s + d * s + j]
                            } else {
                                0.0
                            };
                            let gabar = ghds * hprev;
                            gdelta[tok + d] += gabar * a_ds * abar + ghds * bd[seq + j] * uv;
                            // A = −exp(log_a) ⇒ dA/dlog_a = A
                            gloga[d * s + j] += gabar * dt * abar * a_ds;
                            gb[seq + j] += ghds * dt * uv;
                            gu[tok + d] += ghds * dt * bd[seq + j];
                            ghds *= abar;
                            gh[d * s + j] = ghds;
                        }
                    }
                }
            }
            vec![
                (*u, gu),
                (*delta, gdelta),
                (*log_a, gloga),
                (*b_in, gb),
                (*c_in, gc),
                (*d_skip, gskip),
            ]
        }

        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let classes = nodes[logits.0].value.shape()[1];
            let count = targets.iter().filter(|&&t| t >= 0).count();
            let mut gx = vec![0.0; nodes[logits.0].value.numel()];
            if count > 0 {
                let scale = g[0] / count as f64;
                for (r, &t) in targets.iter().enumerate() {
                    if t < 0 {
                        continue;
                    }
                    for k in 0..classes {
                        let indicator = if k == t as usize { 1.0 } else { 0.0 };
                        gx[r * classes + k] = scale * (probs[r * classes + k] - indicator);
                    }
                }
            }
            vec![(*logits, gx)]
        }

        Op::LastToken { x } => {
            let sh = nodes[x.0].value.shape();
            let (bs, n, d) = (sh[0], sh[1], sh[2]);
            let mut gx = vec![0.0; nodes[x.0].value.numel()];
            for q in 0..bs {
                let dst = (q * n + (n - 1)) * d;
                gx[dst..dst + d].copy_from_slice(&g[q * d..(q + 1) * d]);
            }
            vec![(*x, gx)]
        }
    }
}

/// Materializes a tensor broadcast to `out_shape` (flat).
fn expand_to(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    let mut w = StrideWalker::new(out_shape, broadcast_strides(t.shape(), out_shape));
    let mut out = vec![0.0; numel];
    let data = t.data();
    for o in out.iter_mut() {
        *o = data[w.offset()];
        w.advance();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_row_sum() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.leaf(Tensor::eye(2));
        let ai = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);

        let ones = tape.leaf(t2(2, 1, &[1.0, 1.0]));
        let rs = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(rs).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, &[0.0; 6]));
        let b = tape.leaf(t2(2, 2, &[0.0; 4]));
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.leaf(Tensor::new(vec![2], vec![0.0, math::ln(3.0)]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.25).abs() < 1e-15);
        assert!((out[1] - 0.75).abs() < 1e-15);

        // max subtraction keeps huge inputs finite
        let x = tape.leaf(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(
            tape.softmax(x, 0),
            Err(TensorError::NonFiniteInput { .. })
        ));
    }

    #[test]
    fn layernorm_zero_variance_and_two_point() {
        let mut tape = Tape::new();
        let gain = tape.leaf(Tensor::full(vec![4], 1.0));
        let bias = tape.leaf(Tensor::zeros(vec![4]));
        let x = tape.leaf(Tensor::new(vec![1, 4], vec![5.0; 4]).unwrap());
        let y = tape.layernorm(x, gain, bias, 1e-5).unwrap();
        for v in tape.value(y).data() {
            assert_eq!(*v, 0.0);
        }

        let gain = tape.leaf(Tensor::full(vec![2], 1.0));
        let bias = tape.leaf(Tensor::zeros(vec![2]));
        let x = tape.leaf(t2(1, 2, &[1.0, 3.0]));
        let y = tape.layernorm(x, gain, bias, 0.0).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pointwise_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.0, math::ln(3.0), 0.0]).unwrap());
        let s = tape.sigmoid(x);
        let out = tape.value(s).data();
        assert_eq!(out[0], 0.5);
        assert!((out[1] - 0.75).abs() < 1e-15);

        let z = tape.silu(x);
        assert_eq!(tape.value(z).data()[0], 0.0);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, &[0.0; 6]));
        let b = tape.leaf(Tensor::new(vec![2], vec![0.0; 2]).unwrap());
        assert!(matches!(
            tape.add(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gather_scatter_round_trip_and_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(4, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let idx: Vec<usize> = (0..4).collect();
        let gathered = tape.gather_rows(x, &idx).unwrap();
        assert_eq!(tape.value(gathered).data(), tape.value(x).data());

        let perm = [2usize, 0, 3, 1];
        let g = tape.gather_rows(x, &perm).unwrap();
        let back = tape.scatter_rows(g, &perm, 4).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());

        assert!(matches!(
            tape.gather_rows(x, &[4]),
            Err(TensorError::IndexOutOfRange { index: 4, len: 4 })
        ));
        let two = tape.gather_rows(x, &[0, 1]).unwrap();
        assert!(matches!(
            tape.scatter_rows(two, &[1, 1], 4),
            Err(TensorError::DuplicateScatterIndex { index: 1 })
        ));
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(
            tape.backward(s),
            Err(TensorError::BackwardAlreadyRun)
        ));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn gather_gradient_is_permutation_indicator() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.gather_rows(x, &[2, 0]).unwrap();
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t2(2, 3, &[0.3, -1.2, 0.7, 2.0, -0.5, 0.1]));
            let w = tape.leaf(t2(3, 2, &[0.5, -0.25, 1.5, 0.75, -1.0, 2.0]));
            let y = tape.matmul(x, w).unwrap();
            let sm = tape.softmax(y, 1).unwrap();
            let s = tape.sum(sm);
            tape.backward(s).unwrap();
            (
                tape.grad(x).unwrap().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn cross_entropy_ignores_negative_targets() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t2(3, 2, &[2.0, 0.0, 0.0, 2.0, 5.0, -5.0]));
        let loss = tape.cross_entropy_mean(logits, &[0, -1, 1]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        assert_eq!(&g[2..4], &[0.0, 0.0]);
        assert!(g[0] != 0.0 && g[4] != 0.0);
    }
}
