//! Recorded-operation graph (a Wengert tape) with reverse-mode backward.
//!
//! Operations append nodes in execution order; [`Graph::backward`] replays
//! the tape in reverse insertion order exactly once, accumulating gradients
//! additively. Values are computed eagerly at record time, so a [`Var`]'s
//! value can be inspected mid-construction (routing does this to pick
//! experts before recording the dispatch).

use std::sync::Arc;

use super::kernels::{
    axpy, gelu_f64, gelu_grad_f64, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_rows,
};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf { requires_grad: bool },
    /// [m,k] x [k,n]
    Matmul { a: Var, b: Var },
    /// [m,k] x [n,k]^T
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// [r,c] + v[c] broadcast over rows
    AddRow { a: Var, v: Var },
    /// [r,c] + u[r] broadcast over columns
    AddCol { a: Var, u: Var },
    /// x + coef * s with s a scalar
    AddScalarBcast { a: Var, s: Var, coef: f64 },
    Mul { a: Var, b: Var },
    /// [r,c] * v[c] broadcast over rows
    MulRow { a: Var, v: Var },
    /// [r,c] with row i scaled by w[i]
    ScaleRows { a: Var, w: Var },
    Scale { a: Var, coef: f64 },
    Gelu { a: Var },
    Sqrt { a: Var },
    /// softmax over the last axis
    Softmax { a: Var },
    /// normalize last axis to mean 0 / var 1 (no affine)
    LayerNorm { a: Var },
    /// x / max(||x||_2, eps) per row
    L2NormalizeRows { a: Var },
    /// mean over batch of -sum_c q_c log softmax(logits)_c
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
    },
    /// depthwise 7x7 correlation, zero padding 3, tokens [h*w, C]
    DwConv7 {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        h: usize,
        w: usize,
    },
    /// [h*w, C] -> [(h/s)*(w/s), C*s*s], patch-major (di, dj, c) flattening
    SpaceToDepth { x: Var, h: usize, w: usize, s: usize },
    /// [C,H,W] image -> [H*W, C] tokens
    ChwToTokens { x: Var, c: usize, h: usize, w: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize, len: usize },
    /// y[i, :] = a[idx[i], :]
    GatherRows { a: Var, idx: Vec<usize> },
    /// y = zeros[rows, c]; y[idx[i], :] += src[i, :]
    ScatterAddRows { src: Var, idx: Vec<usize> },
    /// y[m] = a[pairs[m].0, pairs[m].1]
    GatherElems { a: Var, pairs: Vec<(usize, usize)> },
    SumAll { a: Var },
    /// [r,c] -> [c]
    SumAxis0 { a: Var },
    /// [r,c] -> [r]
    SumAxis1 { a: Var },
    Reshape { a: Var },
    Div { a: Var, b: Var },
}

struct Node<E: Element> {
    op: Op,
    shape: Vec<usize>,
    value: Arc<Vec<E>>,
    /// Extra forward context needed by backward (inv-std rows, probs, norms).
    saved: Vec<E>,
    needs_grad: bool,
}

/// Append-only operation tape. Single-threaded per instance.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    /// Persistent per-leaf gradient accumulators, filled by `backward`.
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
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

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Snapshot a var's value as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape consistent")
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<E>, saved: Vec<E>) -> Var {
        let needs_grad = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            other => self.parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value: Arc::new(value),
            saved,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf { .. } => vec![],
            Op::Matmul { a, b }
            | Op::MatmulNt { a, b }
            | Op::Add { a, b }
            | Op::Mul { a, b }
            | Op::Div { a, b } => vec![*a, *b],
            Op::AddRow { a, v } | Op::MulRow { a, v } => vec![*a, *v],
            Op::AddCol { a, u } => vec![*a, *u],
            Op::AddScalarBcast { a, s, .. } => vec![*a, *s],
            Op::ScaleRows { a, w } => vec![*a, *w],
            Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::Sqrt { a }
            | Op::Softmax { a }
            | Op::LayerNorm { a }
            | Op::L2NormalizeRows { a }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::GatherElems { a, .. }
            | Op::SumAll { a }
            | Op::SumAxis0 { a }
            | Op::SumAxis1 { a }
            | Op::Reshape { a } => vec![*a],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::DwConv7 { x, kernel, bias, .. } => {
                let mut p = vec![*x, *kernel];
                if let Some(b) = bias {
                    p.push(*b);
                }
                p
            }
            Op::SpaceToDepth { x, .. } | Op::ChwToTokens { x, .. } => vec![*x],
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.clone(),
            Op::ScatterAddRows { src, .. } => vec![*src],
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                expected: vec![0, 0],
                got: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Bind a tensor into the graph. Data is shared, not copied.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Var {
        let op = Op::Leaf {
            requires_grad: t.requires_grad(),
        };
        self.nodes.push(Node {
            op,
            shape: t.shape().to_vec(),
            value: t.data_arc(),
            saved: Vec::new(),
            needs_grad: t.requires_grad(),
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<E>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(self.push(Op::Leaf { requires_grad: false }, shape, data, Vec::new()))
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(
            Op::Leaf { requires_grad: false },
            vec![1],
            vec![E::from_f64(v)],
            Vec::new(),
        )
    }

    // ── arithmetic ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![E::ZERO; m * n];
        matmul_acc(&mut out, self.value(a), self.value(b), m, k, n);
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out, Vec::new()))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![E::ZERO; m * n];
        matmul_nt_acc(&mut out, self.value(a), self.value(b), m, k, n);
        Ok(self.push(Op::MatmulNt { a, b }, vec![m, n], out, Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(Op::Add { a, b }, self.shape(a).to_vec(), out, Vec::new()))
    }

    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_r, c) = self.rows_cols(a);
        if self.shape(v) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                expected: vec![c],
                got: self.shape(v).to_vec(),
            });
        }
        let vv = self.value(v).to_vec();
        let mut out = Vec::with_capacity(self.numel(a));
        for row in self.value(a).chunks_exact(c) {
            out.extend(row.iter().zip(&vv).map(|(&x, &y)| x + y));
        }
        Ok(self.push(Op::AddRow { a, v }, self.shape(a).to_vec(), out, Vec::new()))
    }

    pub fn add_col(&mut self, a: Var, u: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "add_col")?;
        if self.shape(u) != [r] {
            return Err(Error::ShapeMismatch {
                op: "add_col",
                expected: vec![r],
                got: self.shape(u).to_vec(),
            });
        }
        let uu = self.value(u).to_vec();
        let mut out = Vec::with_capacity(r * c);
        for (row, &ui) in self.value(a).chunks_exact(c).zip(&uu) {
            out.extend(row.iter().map(|&x| x + ui));
        }
        Ok(self.push(Op::AddCol { a, u }, vec![r, c], out, Vec::new()))
    }

    /// y = a + coef * s, with s a scalar var broadcast over all of a.
    pub fn add_scalar_bcast(&mut self, a: Var, s: Var, coef: f64) -> Result<Var> {
        if self.numel(s) != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_scalar_bcast",
                expected: vec![1],
                got: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s)[0];
        let cf = E::from_f64(coef);
        let out = self.value(a).iter().map(|&x| x + cf * sv).collect();
        Ok(self.push(
            Op::AddScalarBcast { a, s, coef },
            self.shape(a).to_vec(),
            out,
            Vec::new(),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(Op::Mul { a, b }, self.shape(a).to_vec(), out, Vec::new()))
    }

    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_r, c) = self.rows_cols(a);
        if self.shape(v) != [c] {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                expected: vec![c],
                got: self.shape(v).to_vec(),
            });
        }
        let vv = self.value(v).to_vec();
        let mut out = Vec::with_capacity(self.numel(a));
        for row in self.value(a).chunks_exact(c) {
            out.extend(row.iter().zip(&vv).map(|(&x, &y)| x * y));
        }
        Ok(self.push(Op::MulRow { a, v }, self.shape(a).to_vec(), out, Vec::new()))
    }

    /// Row i of `a` scaled by `w[i]` (per-token gate weighting).
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "scale_rows")?;
        if self.shape(w) != [r] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                expected: vec![r],
                got: self.shape(w).to_vec(),
            });
        }
        let wv = self.value(w).to_vec();
        let mut out = Vec::with_capacity(r * c);
        for (row, &wi) in self.value(a).chunks_exact(c).zip(&wv) {
            out.extend(row.iter().map(|&x| x * wi));
        }
        Ok(self.push(Op::ScaleRows { a, w }, vec![r, c], out, Vec::new()))
    }

    pub fn scale(&mut self, a: Var, coef: f64) -> Var {
        let cf = E::from_f64(coef);
        let out = self.value(a).iter().map(|&x| x * cf).collect();
        self.push(Op::Scale { a, coef }, self.shape(a).to_vec(), out, Vec::new())
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| E::from_f64(gelu_f64(x.to_f64())))
            .collect();
        self.push(Op::Gelu { a }, self.shape(a).to_vec(), out, Vec::new())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.sqrt()).collect();
        self.push(Op::Sqrt { a }, self.shape(a).to_vec(), out, Vec::new())
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "div",
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x / y)
            .collect();
        Ok(self.push(Op::Div { a, b }, self.shape(a).to_vec(), out, Vec::new()))
    }

    // ── normalization / activations over last axis ─────────────────────

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        let last = *s.last().expect("non-empty shape");
        (self.numel(v) / last, last)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let (_r, c) = self.rows_cols(a);
        let mut out = vec![E::ZERO; self.numel(a)];
        softmax_rows(&mut out, self.value(a), c);
        self.push(Op::Softmax { a }, self.shape(a).to_vec(), out, Vec::new())
    }

    /// Normalize the last axis to mean 0 / variance 1 (population variance,
    /// eps inside the square root). Affine scale/shift is applied separately.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.rows_cols(a);
        let mut out = vec![E::ZERO; r * c];
        let mut inv_std = vec![E::ZERO; r];
        let inv_c = E::from_f64(1.0 / c as f64);
        let epse = E::from_f64(eps);
        for ((x_row, o_row), is) in self
            .value(a)
            .chunks_exact(c)
            .zip(out.chunks_exact_mut(c))
            .zip(inv_std.iter_mut())
        {
            let mut mean = E::ZERO;
            for &x in x_row {
                mean = mean + x;
            }
            mean = mean * inv_c;
            let mut var = E::ZERO;
            for &x in x_row {
                let d = x - mean;
                var = var + d * d;
            }
            var = var * inv_c;
            let inv = E::ONE / (var + epse).sqrt();
            *is = inv;
            for (o, &x) in o_row.iter_mut().zip(x_row) {
                *o = (x - mean) * inv;
            }
        }
        self.push(Op::LayerNorm { a }, self.shape(a).to_vec(), out, inv_std)
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(a, "l2_normalize_rows")?;
        let mut out = vec![E::ZERO; r * c];
        let mut norms = vec![E::ZERO; r];
        let epse = E::from_f64(eps);
        for ((x_row, o_row), nrm) in self
            .value(a)
            .chunks_exact(c)
            .zip(out.chunks_exact_mut(c))
            .zip(norms.iter_mut())
        {
            let mut ss = E::ZERO;
            for &x in x_row {
                ss = ss + x * x;
            }
            let n = ss.sqrt();
            let n = if n > epse { n } else { epse };
            *nrm = n;
            let inv = E::ONE / n;
            for (o, &x) in o_row.iter_mut().zip(x_row) {
                *o = x * inv;
            }
        }
        Ok(self.push(Op::L2NormalizeRows { a }, vec![r, c], out, norms))
    }

    /// Mean over the batch of the smoothed negative log-likelihood.
    /// Target distribution: q_c = smoothing/C + (1-smoothing) on the label.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                expected: vec![b],
                got: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: target {bad} out of range for {c} classes"
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: smoothing {smoothing} outside [0,1)"
            )));
        }
        // log-softmax in one pass; save probs for backward
        let mut probs = vec![E::ZERO; b * c];
        let mut total = 0.0f64;
        let uniform = smoothing / c as f64;
        let on_label = 1.0 - smoothing;
        for ((x_row, p_row), &t) in self
            .value(logits)
            .chunks_exact(c)
            .zip(probs.chunks_exact_mut(c))
            .zip(targets)
        {
            let mut max = x_row[0];
            for &v in &x_row[1..] {
                if v > max {
                    max = v;
                }
            }
            let mut sum = 0.0f64;
            for &v in x_row {
                sum += (v - max).to_f64().exp();
            }
            let lse = max.to_f64() + sum.ln();
            let mut row_loss = 0.0f64;
            for (j, (&v, p)) in x_row.iter().zip(p_row.iter_mut()).enumerate() {
                let logp = v.to_f64() - lse;
                *p = E::from_f64(logp.exp());
                let q = uniform + if j == t { on_label } else { 0.0 };
                if q > 0.0 {
                    row_loss -= q * logp;
                }
            }
            total += row_loss;
        }
        total /= b as f64;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
            },
            vec![1],
            vec![E::from_f64(total)],
            probs,
        ))
    }

    // ── spatial ─────────────────────────────────────────────────────────

    /// Per-channel 7x7 correlation over a (h, w) token grid, zero padding 3.
    /// `x` is [h*w, C] (token-major), `kernel` is [C, 7, 7].
    pub fn depthwise_conv7x7(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let (t, c) = self.dims2(x, "depthwise_conv7x7")?;
        if t != h * w {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv7x7",
                expected: vec![h * w, c],
                got: vec![t, c],
            });
        }
        if self.shape(kernel) != [c, 7, 7] {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv7x7",
                expected: vec![c, 7, 7],
                got: self.shape(kernel).to_vec(),
            });
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "depthwise_conv7x7",
                    expected: vec![c],
                    got: self.shape(bv).to_vec(),
                });
            }
        }
        // transpose kernel to tap-major [49, C] for contiguous channel loops
        let kv = self.value(kernel);
        let mut ktr = vec![E::ZERO; 49 * c];
        for ch in 0..c {
            for tap in 0..49 {
                ktr[tap * c + ch] = kv[ch * 49 + tap];
            }
        }
        let xv = self.value(x);
        let mut out = vec![E::ZERO; t * c];
        dw7_forward(&mut out, xv, &ktr, h, w, c);
        if let Some(bv) = bias {
            let bvals = self.value(bv).to_vec();
            for row in out.chunks_exact_mut(c) {
                for (o, &b) in row.iter_mut().zip(&bvals) {
                    *o = *o + b;
                }
            }
        }
        Ok(self.push(
            Op::DwConv7 { x, kernel, bias, h, w },
            vec![t, c],
            out,
            Vec::new(),
        ))
    }

    /// Group non-overlapping s x s patches: [h*w, C] -> [(h/s)(w/s), s*s*C],
    /// flattened as (di, dj, channel). Realizes stride-s convs and patch
    /// embedding as a rearrange followed by `matmul`.
    pub fn space_to_depth(&mut self, x: Var, h: usize, w: usize, s: usize) -> Result<Var> {
        let (t, c) = self.dims2(x, "space_to_depth")?;
        if t != h * w || h % s != 0 || w % s != 0 {
            return Err(Error::InvalidArgument(format!(
                "space_to_depth: grid {h}x{w} (tokens {t}) not divisible by {s}"
            )));
        }
        let (oh, ow) = (h / s, w / s);
        let oc = s * s * c;
        let xv = self.value(x);
        let mut out = vec![E::ZERO; oh * ow * oc];
        for bi in 0..oh {
            for bj in 0..ow {
                let orow = (bi * ow + bj) * oc;
                for di in 0..s {
                    for dj in 0..s {
                        let irow = ((bi * s + di) * w + (bj * s + dj)) * c;
                        let off = orow + (di * s + dj) * c;
                        out[off..off + c].copy_from_slice(&xv[irow..irow + c]);
                    }
                }
            }
        }
        Ok(self.push(Op::SpaceToDepth { x, h, w, s }, vec![oh * ow, oc], out, Vec::new()))
    }

    /// [C,H,W] image to [H*W, C] tokens.
    pub fn chw_to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "chw_to_tokens",
                expected: vec![0, 0, 0],
                got: s,
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = vec![E::ZERO; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                out[p * c + ch] = xv[ch * h * w + p];
            }
        }
        Ok(self.push(Op::ChwToTokens { x, c, h, w }, vec![h * w, c], out, Vec::new()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows: no parts".into()));
        }
        let (_r0, c0) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != c0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    expected: vec![0, c0],
                    got: vec![r, c],
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c0);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, c0], out, Vec::new()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols: no parts".into()));
        }
        let (r0, _c0) = self.dims2(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != r0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    expected: vec![r0, 0],
                    got: vec![r, c],
                });
            }
            cols += c;
        }
        let mut out = vec![E::ZERO; r0 * cols];
        let mut off = 0;
        for &p in parts {
            let (_r, c) = self.dims2(p, "concat_cols")?;
            for (i, row) in self.value(p).chunks_exact(c).enumerate() {
                out[i * cols + off..i * cols + off + c].copy_from_slice(row);
            }
            off += c;
        }
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, vec![r0, cols], out, Vec::new()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_rows")?;
        if start + len > r {
            return Err(Error::InvalidArgument(format!(
                "slice_rows: [{start}, {start}+{len}) out of {r} rows"
            )));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(Op::SliceRows { a, start }, vec![len, c], out, Vec::new()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if start + len > c {
            return Err(Error::InvalidArgument(format!(
                "slice_cols: [{start}, {start}+{len}) out of {c} cols"
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in self.value(a).chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(Op::SliceCols { a, start, len }, vec![r, len], out, Vec::new()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(a, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {bad} out of {r} rows"
            )));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Op::GatherRows { a, idx: idx.to_vec() },
            vec![idx.len(), c],
            out,
            Vec::new(),
        ))
    }

    pub fn scatter_add_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (m, c) = self.dims2(src, "scatter_add_rows")?;
        if idx.len() != m {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                expected: vec![m],
                got: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "scatter_add_rows: index {bad} out of {rows} rows"
            )));
        }
        let mut out = vec![E::ZERO; rows * c];
        for (&i, row) in idx.iter().zip(self.value(src).chunks_exact(c)) {
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        Ok(self.push(
            Op::ScatterAddRows { src, idx: idx.to_vec() },
            vec![rows, c],
            out,
            Vec::new(),
        ))
    }

    pub fn gather_elems(&mut self, a: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims2(a, "gather_elems")?;
        if let Some(&bad) = pairs.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::InvalidArgument(format!(
                "gather_elems: index {bad:?} out of [{r}, {c}]"
            )));
        }
        let av = self.value(a);
        let out = pairs.iter().map(|&(i, j)| av[i * c + j]).collect();
        Ok(self.push(
            Op::GatherElems { a, pairs: pairs.to_vec() },
            vec![pairs.len()],
            out,
            Vec::new(),
        ))
    }

    // ── reductions / shape ──────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = E::ZERO;
        for &v in self.value(a) {
            s = s + v;
        }
        self.push(Op::SumAll { a }, vec![1], vec![s], Vec::new())
    }

    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let (_r, c) = self.dims2(a, "sum_axis0")?;
        let mut out = vec![E::ZERO; c];
        for row in self.value(a).chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        Ok(self.push(Op::SumAxis0 { a }, vec![c], out, Vec::new()))
    }

    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "sum_axis1")?;
        let mut out = Vec::with_capacity(r);
        for row in self.value(a).chunks_exact(c) {
            let mut s = E::ZERO;
            for &v in row {
                s = s + v;
            }
            out.push(s);
        }
        Ok(self.push(Op::SumAxis1 { a }, vec![r], out, Vec::new()))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(a) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: shape,
                got: self.shape(a).to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        Ok(self.push(Op::Reshape { a }, shape, out, Vec::new()))
    }

    // ── composites ──────────────────────────────────────────────────────

    /// y = x W + b over the last axis; x may have any leading shape.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (d_in, d_out) = self.dims2(w, "linear")?;
        let xshape = self.shape(x).to_vec();
        if *xshape.last().unwrap_or(&0) != d_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                expected: vec![d_in, d_out],
                got: xshape,
            });
        }
        let rows = self.numel(x) / d_in;
        let x2 = self.reshape(x, vec![rows, d_in])?;
        let mut y = self.matmul(x2, w)?;
        if let Some(bv) = b {
            y = self.add_row(y, bv)?;
        }
        let mut out_shape = xshape;
        *out_shape.last_mut().unwrap() = d_out;
        self.reshape(y, out_shape)
    }

    /// LayerNorm with affine scale and shift.
    pub fn layer_norm_affine(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.layer_norm(x, eps);
        let g = self.mul_row(n, gamma)?;
        self.add_row(g, beta)
    }

    /// Mean over rows: [r, c] -> [1, c].
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "mean_rows")?;
        let s = self.sum_axis0(a)?;
        let m = self.scale(s, 1.0 / r as f64);
        self.reshape(m, vec![1, c])
    }

    /// Squared coefficient of variation of a vector: Var(v) / Mean(v)^2
    /// with population variance.
    pub fn cv_squared(&mut self, v: Var) -> Result<Var> {
        let n = self.numel(v);
        let s = self.sum_all(v);
        let mean = self.scale(s, 1.0 / n as f64);
        let centered = self.add_scalar_bcast(v, mean, -1.0)?;
        let sq = self.mul(centered, centered)?;
        let ssq = self.sum_all(sq);
        let var = self.scale(ssq, 1.0 / n as f64);
        let mean_sq = self.mul(mean, mean)?;
        self.div(var, mean_sq)
    }

    /// Standard multi-head scaled dot-product self-attention with output
    /// projection. `x` is [T, d]; d must be divisible by `heads`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        x: Var,
        heads: usize,
        wq: Var,
        bq: Option<Var>,
        wk: Var,
        bk: Option<Var>,
        wv: Var,
        bv: Option<Var>,
        wo: Var,
        bo: Option<Var>,
    ) -> Result<Var> {
        let (_t, d) = self.dims2(x, "attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention: dim {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let q = self.linear(x, wq, bq)?;
        let k = self.linear(x, wk, bk)?;
        let v = self.linear(x, wv, bv)?;
        let mut outs = Vec::with_capacity(heads);
        for hidx in 0..heads {
            let qh = self.slice_cols(q, hidx * dh, dh)?;
            let kh = self.slice_cols(k, hidx * dh, dh)?;
            let vh = self.slice_cols(v, hidx * dh, dh)?;
            let scores = self.matmul_nt(qh, kh)?;
            let scaled = self.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = self.softmax(scaled);
            outs.push(self.matmul(attn, vh)?);
        }
        let merged = self.concat_cols(&outs)?;
        self.linear(merged, wo, bo)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Visits the tape in reverse
    /// insertion order exactly once; leaf gradients accumulate additively
    /// across repeated calls until `reset_grads`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut local: Vec<Option<Vec<E>>> = vec![None; n];
        local[loss.0] = Some(vec![E::ONE]);

        for idx in (0..n).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(dy) = local[idx].take() else { continue };
            self.propagate(idx, &dy, &mut local);
            // keep leaf grads; intermediate grads are dropped
            if matches!(self.nodes[idx].op, Op::Leaf { requires_grad: true }) {
                match &mut self.grads[idx] {
                    Some(g) => axpy(g, &dy, E::ONE),
                    slot => *slot = Some(dy),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &[E], local: &mut [Option<Vec<E>>]) {
        // allocate-or-get a parent's local grad buffer
        macro_rules! buf {
            ($v:expr) => {{
                let p = $v.0;
                if local[p].is_none() {
                    local[p] = Some(vec![E::ZERO; self.nodes[p].value.len()]);
                }
                local[p].as_mut().unwrap()
            }};
        }
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n2 = self.nodes[b.0].shape[1];
                if needs(*a) {
                    let bval = Arc::clone(&self.nodes[b.0].value);
                    matmul_nt_acc(buf!(a), dy, &bval, m, n2, k);
                }
                if needs(*b) {
                    let aval = Arc::clone(&self.nodes[a.0].value);
                    matmul_tn_acc(buf!(b), &aval, dy, m, k, n2);
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n2 = self.nodes[b.0].shape[0];
                if needs(*a) {
                    let bval = Arc::clone(&self.nodes[b.0].value);
                    matmul_acc(buf!(a), dy, &bval, m, n2, k);
                }
                if needs(*b) {
                    let aval = Arc::clone(&self.nodes[a.0].value);
                    matmul_tn_acc(buf!(b), dy, &aval, m, n2, k);
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    axpy(buf!(a), dy, E::ONE);
                }
                if needs(*b) {
                    axpy(buf!(b), dy, E::ONE);
                }
            }
            Op::AddRow { a, v } => {
                if needs(*a) {
                    axpy(buf!(a), dy, E::ONE);
                }
                if needs(*v) {
                    let c = self.nodes[v.0].value.len();
                    let g = buf!(v);
                    for row in dy.chunks_exact(c) {
                        for (gi, &d) in g.iter_mut().zip(row) {
                            *gi = *gi + d;
                        }
                    }
                }
            }
            Op::AddCol { a, u } => {
                if needs(*a) {
                    axpy(buf!(a), dy, E::ONE);
                }
                if needs(*u) {
                    let c = self.nodes[a.0].shape[1];
                    let g = buf!(u);
                    for (gi, row) in g.iter_mut().zip(dy.chunks_exact(c)) {
                        for &d in row {
                            *gi = *gi + d;
                        }
                    }
                }
            }
            Op::AddScalarBcast { a, s, coef } => {
                if needs(*a) {
                    axpy(buf!(a), dy, E::ONE);
                }
                if needs(*s) {
                    let mut acc = E::ZERO;
                    for &d in dy {
                        acc = acc + d;
                    }
                    buf!(s)[0] = buf!(s)[0] + E::from_f64(*coef) * acc;
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let bval = Arc::clone(&self.nodes[b.0].value);
                    let g = buf!(a);
                    for ((gi, &d), &bv) in g.iter_mut().zip(dy).zip(bval.iter()) {
                        *gi = *gi + d * bv;
                    }
                }
                if needs(*b) {
                    let aval = Arc::clone(&self.nodes[a.0].value);
                    let g = buf!(b);
                    for ((gi, &d), &av) in g.iter_mut().zip(dy).zip(aval.iter()) {
                        *gi = *gi + d * av;
                    }
                }
            }
            Op::MulRow { a, v } => {
                let c = self.nodes[v.0].value.len();
                if needs(*a) {
                    let vval = Arc::clone(&self.nodes[v.0].value);
                    let g = buf!(a);
                    for (g_row, d_row) in g.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
                        for ((gi, &d), &vv) in g_row.iter_mut().zip(d_row).zip(vval.iter()) {
                            *gi = *gi + d * vv;
                        }
                    }
                }
                if needs(*v) {
                    let aval = Arc::clone(&self.nodes[a.0].value);
                    let g = buf!(v);
                    for (a_row, d_row) in aval.chunks_exact(c).zip(dy.chunks_exact(c)) {
                        for ((gi, &d), &av) in g.iter_mut().zip(d_row).zip(a_row) {
                            *gi = *gi + d * av;
                        }
                    }
                }
            }
            Op::ScaleRows { a, w } => {
                let c = self.nodes[a.0].shape[1];
                if needs(*a) {
                    let wval = Arc::clone(&self.nodes[w.0].value);
                    let g = buf!(a);
                    for ((g_row, d_row), &wi) in
                        g.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(wval.iter())
                    {
                        for (gi, &d) in g_row.iter_mut().zip(d_row) {
                            *gi = *gi + d * wi;
                        }
                    }
                }
                if needs(*w) {
                    let aval = Arc::clone(&self.nodes[a.0].value);
                    let g = buf!(w);
                    for ((gi, a_row), d_row) in
                        g.iter_mut().zip(aval.chunks_exact(c)).zip(dy.chunks_exact(c))
                    {
                        let mut acc = E::ZERO;
                        for (&av, &d) in a_row.iter().zip(d_row) {
                            acc = acc + av * d;
                        }
                        *gi = *gi + acc;
                    }
                }
            }
            Op::Scale { a, coef } => {
                if needs(*a) {
                    axpy(buf!(a), dy, E::from_f64(*coef));
                }
            }
            Op::Gelu { a } => {
                if needs(*a) {
                    let aval = Arc::clone(&self.nodes[a.0].value);
                    let g = buf!(a);
                    for ((gi, &d), &x) in g.iter_mut().zip(dy).zip(aval.iter()) {
                        *gi = *gi + d * E::from_f64(gelu_grad_f64(x.to_f64()));
                    }
                }
            }
            Op::Sqrt { a } => {
                if needs(*a) {
                    let yval = Arc::clone(&node.value);
                    let floor = E::from_f64(1e-12);
                    let g = buf!(a);
                    for ((gi, &d), &y) in g.iter_mut().zip(dy).zip(yval.iter()) {
                        let denom = if y > floor { y } else { floor };
                        *gi = *gi + d / (denom + denom);
                    }
                }
            }
            Op::Softmax { a } => {
                if needs(*a) {
                    let c = *node.shape.last().unwrap();
                    let yval = Arc::clone(&node.value);
                    let g = buf!(a);
                    for ((g_row, d_row), y_row) in g
                        .chunks_exact_mut(c)
                        .zip(dy.chunks_exact(c))
                        .zip(yval.chunks_exact(c))
                    {
                        let mut dot = E::ZERO;
                        for (&d, &y) in d_row.iter().zip(y_row) {
                            dot = dot + d * y;
                        }
                        for ((gi, &d), &y) in g_row.iter_mut().zip(d_row).zip(y_row) {
                            *gi = *gi + (d - dot) * y;
                        }
                    }
                }
            }
            Op::LayerNorm { a } => {
                if needs(*a) {
                    let c = *node.shape.last().unwrap();
                    let inv_c = E::from_f64(1.0 / c as f64);
                    let xhat = Arc::clone(&node.value);
                    let g = buf!(a);
                    for (((g_row, d_row), xh_row), &istd) in g
                        .chunks_exact_mut(c)
                        .zip(dy.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                        .zip(node.saved.iter())
                    {
                        let mut sum_d = E::ZERO;
                        let mut sum_dx = E::ZERO;
                        for (&d, &xh) in d_row.iter().zip(xh_row) {
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xh;
                        }
                        let mean_d = sum_d * inv_c;
                        let mean_dx = sum_dx * inv_c;
                        for ((gi, &d), &xh) in g_row.iter_mut().zip(d_row).zip(xh_row) {
                            *gi = *gi + istd * (d - mean_d - xh * mean_dx);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { a } => {
                if needs(*a) {
                    let c = node.shape[1];
                    let yval = Arc::clone(&node.value);
                    let g = buf!(a);
                    for (((g_row, d_row), y_row), &nrm) in g
                        .chunks_exact_mut(c)
                        .zip(dy.chunks_exact(c))
                        .zip(yval.chunks_exact(c))
                        .zip(node.saved.iter())
                    {
                        let mut dot = E::ZERO;
                        for (&d, &y) in d_row.iter().zip(y_row) {
                            dot = dot + d * y;
                        }
                        let inv = E::ONE / nrm;
                        for ((gi, &d), &y) in g_row.iter_mut().zip(d_row).zip(y_row) {
                            *gi = *gi + (d - y * dot) * inv;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
            } => {
                if needs(*logits) {
                    let c = self.nodes[logits.0].shape[1];
                    let b = targets.len();
                    let dyv = dy[0];
                    let scale = E::from_f64(1.0 / b as f64) * dyv;
                    let uniform = E::from_f64(smoothing / c as f64);
                    let on_label = E::from_f64(1.0 - smoothing);
                    let g = buf!(logits);
                    for ((g_row, p_row), &t) in g
                        .chunks_exact_mut(c)
                        .zip(node.saved.chunks_exact(c))
                        .zip(targets)
                    {
                        for (j, (gi, &p)) in g_row.iter_mut().zip(p_row).enumerate() {
                            let q = if j == t { uniform + on_label } else { uniform };
                            *gi = *gi + scale * (p - q);
                        }
                    }
                }
            }
            Op::DwConv7 { x, kernel, bias, h, w } => {
                let c = self.nodes[x.0].shape[1];
                if needs(*x) {
                    let kval = Arc::clone(&self.nodes[kernel.0].value);
                    let mut ktr = vec![E::ZERO; 49 * c];
                    for ch in 0..c {
                        for tap in 0..49 {
                            ktr[tap * c + ch] = kval[ch * 49 + tap];
                        }
                    }
                    dw7_backward_input(buf!(x), dy, &ktr, *h, *w, c);
                }
                if needs(*kernel) {
                    let xval = Arc::clone(&self.nodes[x.0].value);
                    dw7_backward_kernel(buf!(kernel), dy, &xval, *h, *w, c);
                }
                if let Some(bv) = bias {
                    if needs(*bv) {
                        let g = buf!(bv);
                        for row in dy.chunks_exact(c) {
                            for (gi, &d) in g.iter_mut().zip(row) {
                                *gi = *gi + d;
                            }
                        }
                    }
                }
            }
            Op::SpaceToDepth { x, h, w, s } => {
                if needs(*x) {
                    let c = self.nodes[x.0].shape[1];
                    let (oh, ow) = (h / s, w / s);
                    let oc = s * s * c;
                    let g = buf!(x);
                    for bi in 0..oh {
                        for bj in 0..ow {
                            let orow = (bi * ow + bj) * oc;
                            for di in 0..*s {
                                for dj in 0..*s {
                                    let irow = ((bi * s + di) * w + (bj * s + dj)) * c;
                                    let off = orow + (di * s + dj) * c;
                                    for (gi, &d) in
                                        g[irow..irow + c].iter_mut().zip(&dy[off..off + c])
                                    {
                                        *gi = *gi + d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ChwToTokens { x, c, h, w } => {
                if needs(*x) {
                    let g = buf!(x);
                    for ch in 0..*c {
                        for p in 0..h * w {
                            g[ch * h * w + p] = g[ch * h * w + p] + dy[p * c + ch];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if needs(p) {
                        axpy(buf!(p), &dy[off..off + len], E::ONE);
                    }
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p.0].shape[1];
                    if needs(p) {
                        let g = buf!(p);
                        for (g_row, d_row) in g.chunks_exact_mut(c).zip(dy.chunks_exact(total)) {
                            for (gi, &d) in g_row.iter_mut().zip(&d_row[off..off + c]) {
                                *gi = *gi + d;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { a, start } => {
                if needs(*a) {
                    let c = self.nodes[a.0].shape[1];
                    let g = buf!(a);
                    axpy(&mut g[start * c..start * c + dy.len()], dy, E::ONE);
                }
            }
            Op::SliceCols { a, start, len } => {
                if needs(*a) {
                    let c = self.nodes[a.0].shape[1];
                    let g = buf!(a);
                    for (g_row, d_row) in g.chunks_exact_mut(c).zip(dy.chunks_exact(*len)) {
                        for (gi, &d) in g_row[*start..start + len].iter_mut().zip(d_row) {
                            *gi = *gi + d;
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if needs(*a) {
                    let c = self.nodes[a.0].shape[1];
                    let g = buf!(a);
                    for (&i, d_row) in idx.iter().zip(dy.chunks_exact(c)) {
                        for (gi, &d) in g[i * c..(i + 1) * c].iter_mut().zip(d_row) {
                            *gi = *gi + d;
                        }
                    }
                }
            }
            Op::ScatterAddRows { src, idx } => {
                if needs(*src) {
                    let c = self.nodes[src.0].shape[1];
                    let g = buf!(src);
                    for (g_row, &i) in g.chunks_exact_mut(c).zip(idx) {
                        for (gi, &d) in g_row.iter_mut().zip(&dy[i * c..(i + 1) * c]) {
                            *gi = *gi + d;
                        }
                    }
                }
            }
            Op::GatherElems { a, pairs } => {
                if needs(*a) {
                    let c = self.nodes[a.0].shape[1];
                    let g = buf!(a);
                    for (&(i, j), &d) in pairs.iter().zip(dy) {
                        g[i * c + j] = g[i * c + j] + d;
                    }
                }
            }
            Op::SumAll { a } => {
                if needs(*a) {
                    axpy(buf!(a), &vec![dy[0]; self.nodes[a.0].value.len()], E::ONE);
                }
            }
            Op::SumAxis0 { a } => {
                if needs(*a) {
                    let c = self.nodes[a.0].shape[1];
                    let g = buf!(a);
                    for g_row in g.chunks_exact_mut(c) {
                        for (gi, &d) in g_row.iter_mut().zip(dy) {
                            *gi = *gi + d;
                        }
                    }
                }
            }
            Op::SumAxis1 { a } => {
                if needs(*a) {
                    let c = self.nodes[a.0].shape[1];
                    let g = buf!(a);
                    for (g_row, &d) in g.chunks_exact_mut(c).zip(dy) {
                        for gi in g_row.iter_mut() {
                            *gi = *gi + d;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if needs(*a) {
                    axpy(buf!(a), dy, E::ONE);
                }
            }
            Op::Div { a, b } => {
                let bval = Arc::clone(&self.nodes[b.0].value);
                if needs(*a) {
                    let g = buf!(a);
                    for ((gi, &d), &bv) in g.iter_mut().zip(dy).zip(bval.iter()) {
                        *gi = *gi + d / bv;
                    }
                }
                if needs(*b) {
                    let aval = Arc::clone(&self.nodes[a.0].value);
                    let g = buf!(b);
                    for (((gi, &d), &av), &bv) in
                        g.iter_mut().zip(dy).zip(aval.iter()).zip(bval.iter())
                    {
                        *gi = *gi - d * av / (bv * bv);
                    }
                }
            }
        }
    }
}

fn dw7_forward<E: Element>(out: &mut [E], x: &[E], ktr: &[E], h: usize, w: usize, c: usize) {
    for i in 0..h {
        for j in 0..w {
            let o_off = (i * w + j) * c;
            for di in 0..7usize {
                let ii = i as isize + di as isize - 3;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..7usize {
                    let jj = j as isize + dj as isize - 3;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let x_off = (ii as usize * w + jj as usize) * c;
                    let k_off = (di * 7 + dj) * c;
                    for ch in 0..c {
                        out[o_off + ch] = out[o_off + ch] + x[x_off + ch] * ktr[k_off + ch];
                    }
                }
            }
        }
    }
}

fn dw7_backward_input<E: Element>(gx: &mut [E], dy: &[E], ktr: &[E], h: usize, w: usize, c: usize) {
    for i in 0..h {
        for j in 0..w {
            let dy_off = (i * w + j) * c;
            for di in 0..7usize {
                let ii = i as isize + di as isize - 3;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..7usize {
                    let jj = j as isize + dj as isize - 3;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let x_off = (ii as usize * w + jj as usize) * c;
                    let k_off = (di * 7 + dj) * c;
                    for ch in 0..c {
                        gx[x_off + ch] = gx[x_off + ch] + dy[dy_off + ch] * ktr[k_off + ch];
                    }
                }
            }
        }
    }
}

fn dw7_backward_kernel<E: Element>(gk: &mut [E], dy: &[E], x: &[E], h: usize, w: usize, c: usize) {
    // gk layout is [C, 49]
    for i in 0..h {
        for j in 0..w {
            let dy_off = (i * w + j) * c;
            for di in 0..7usize {
                let ii = i as isize + di as isize - 3;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..7usize {
                    let jj = j as isize + dj as isize - 3;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let x_off = (ii as usize * w + jj as usize) * c;
                    let tap = di * 7 + dj;
                    for ch in 0..c {
                        gk[ch * 49 + tap] = gk[ch * 49 + tap] + dy[dy_off + ch] * x[x_off + ch];
                    }
                }
            }
        }
    }
}
