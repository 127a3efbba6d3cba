//! Tape-based reverse-mode differentiation over the exact op set the
//! pipeline needs.
//!
//! Every operation executes eagerly, records itself on the tape, and is
//! replayed in exact reverse order by [`Tape::backward`]. Gradients are
//! materialized only for nodes that transitively depend on a tracked leaf.
//! Interior value and gradient buffers are released as the backward sweep
//! retires them, so only leaf gradients survive a backward pass.
//!
//! All ops reject non-finite outputs: NaN/Inf is surfaced as an error,
//! never silently propagated.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Layer-norm epsilon used everywhere in the encoder.
pub const LN_EPS: f64 = 1e-6;
/// Lower clamp applied by the score activation so log(score) stays finite.
pub const SCORE_FLOOR: f64 = 1e-6;
/// Norm floor used by L2 normalization and cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Boolean attention mask: `allow[q * cols + k]` marks key `k` visible to
/// query `q`. Softmax assigns masked positions probability exactly zero;
/// fully-masked rows yield all-zero probability rows rather than NaN.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::contract(format!(
                "mask of {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                allow.len()
            )));
        }
        Ok(AttnMask { rows, cols, allow })
    }

    pub fn full(n: usize) -> Self {
        AttnMask {
            rows: n,
            cols: n,
            allow: vec![true; n * n],
        }
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.cols + k]
    }

    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        (0..self.rows).all(|q| (0..q).all(|k| self.allows(q, k) == self.allows(k, q)))
    }
}

#[derive(Clone)]
enum Op<R> {
    Leaf,
    Matmul { a: usize, b: usize },
    MatmulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRowVec { a: usize, v: usize },
    Scale { a: usize, c: R },
    Sum { a: usize },
    GroupMeanRows { a: usize, groups: Arc<Vec<Vec<usize>>> },
    GatherRows { a: usize, idx: Arc<Vec<usize>> },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { a: usize, b: usize },
    Reshape { a: usize },
    Gelu { a: usize },
    ScoreActivation { a: usize },
    Log { a: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize },
    SoftmaxBiased {
        logits: usize,
        bias: Option<usize>,
        mask: Option<Arc<AttnMask>>,
        scale: R,
    },
    L2NormalizeRows { a: usize },
    CosineRows { a: usize, b: usize },
    Mse { a: usize, b: usize },
    CrossEntropyLogits { logits: usize, target: usize },
}

struct Node<R> {
    shape: Vec<usize>,
    data: Vec<R>,
    op: Op<R>,
    tracked: bool,
}

impl<R: Real> Node<R> {
    fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Gradient tape. One per forward pass; not shareable across threads.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    swept: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            swept: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input. No gradient is ever materialized for it.
    pub fn leaf(&mut self, t: Tensor<R>) -> TensorId {
        self.push_unchecked(t.shape().to_vec(), t.into_data(), Op::Leaf, false)
    }

    /// Records a trainable parameter (tracked leaf).
    pub fn param(&mut self, t: &Tensor<R>) -> TensorId {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn zeros_leaf(&mut self, shape: Vec<usize>) -> TensorId {
        self.leaf(Tensor::zeros(shape))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a node. Invalid for interior nodes once backward has run.
    pub fn data(&self, id: TensorId) -> &[R] {
        let node = &self.nodes[id.0];
        assert!(
            !self.swept || matches!(node.op, Op::Leaf) || !node.data.is_empty(),
            "interior value read after backward"
        );
        &node.data
    }

    pub fn value(&self, id: TensorId) -> Tensor<R> {
        Tensor::new(self.shape(id).to_vec(), self.data(id).to_vec()).expect("node is consistent")
    }

    pub fn is_tracked(&self, id: TensorId) -> bool {
        self.nodes[id.0].tracked
    }

    /// Gradient accumulated for a leaf, if any reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[R]> {
        self.grads[id.0].as_deref()
    }

    pub fn grad_or_zeros(&self, id: TensorId) -> Vec<R> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![R::zero(); self.nodes[id.0].shape.iter().product()],
        }
    }

    fn push_unchecked(
        &mut self,
        shape: Vec<usize>,
        data: Vec<R>,
        op: Op<R>,
        tracked: bool,
    ) -> TensorId {
        debug_assert!(!self.swept, "op recorded after backward");
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            op,
            tracked,
        });
        self.grads.push(None);
        TensorId(id)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<R>,
        op: Op<R>,
        tracked: bool,
    ) -> Result<TensorId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(shape, data, op, tracked))
    }

    fn dims2(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows(), n.cols())
    }

    fn tracked_any(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    fn shape_err(&self, op: &'static str, a: TensorId, b: TensorId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    // ── Arithmetic ──────────────────────────────────────────────────

    /// out = a(m×k) · b(k×n)
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        if k != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![R::zero(); m * n];
        kernels::mm_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let tracked = self.tracked_any(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::Matmul { a: a.0, b: b.0 }, tracked)
    }

    /// out = a(m×k) · b(n×k)ᵀ
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a);
        let (n, kb) = self.dims2(b);
        if k != kb {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![R::zero(); m * n];
        kernels::mm_nt_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let tracked = self.tracked_any(&[a, b]);
        self.push(
            "matmul_nt",
            vec![m, n],
            out,
            Op::MatmulNt { a: a.0, b: b.0 },
            tracked,
        )
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(R, R) -> R,
        op: Op<R>,
    ) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.shape_err(name, a, b));
        }
        let out: Vec<R> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked_any(&[a, b]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(name, shape, out, op, tracked)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// out[i][j] = a[i][j] + v[j]
    pub fn add_row_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a);
        if self.nodes[v.0].data.len() != n {
            return Err(self.shape_err("add_row_vec", a, v));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &self.nodes[a.0].data[i * n..(i + 1) * n];
            for (x, y) in row.iter().zip(&self.nodes[v.0].data) {
                out.push(*x + *y);
            }
        }
        let tracked = self.tracked_any(&[a, v]);
        let shape = self.nodes[a.0].shape.clone();
        self.push("add_row_vec", shape, out, Op::AddRowVec { a: a.0, v: v.0 }, tracked)
    }

    pub fn scale(&mut self, a: TensorId, c: R) -> Result<TensorId> {
        let out: Vec<R> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let tracked = self.nodes[a.0].tracked;
        let shape = self.nodes[a.0].shape.clone();
        self.push("scale", shape, out, Op::Scale { a: a.0, c }, tracked)
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s: R = self.nodes[a.0].data.iter().copied().sum();
        let tracked = self.nodes[a.0].tracked;
        self.push("sum", vec![1], vec![s], Op::Sum { a: a.0 }, tracked)
    }

    // ── Structure ───────────────────────────────────────────────────

    /// Mean over each row group; group `q` of the output averages the input
    /// rows listed in `groups[q]`.
    pub fn group_mean_rows(
        &mut self,
        a: TensorId,
        groups: Arc<Vec<Vec<usize>>>,
    ) -> Result<TensorId> {
        let (m, n) = self.dims2(a);
        let mut out = vec![R::zero(); groups.len() * n];
        for (q, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::contract("group_mean_rows: empty group"));
            }
            let inv = R::from_f64(1.0 / group.len() as f64);
            for &r in group {
                if r >= m {
                    return Err(Error::contract(format!(
                        "group_mean_rows: row {} out of {}",
                        r, m
                    )));
                }
                let src = &self.nodes[a.0].data[r * n..(r + 1) * n];
                for (o, &x) in out[q * n..(q + 1) * n].iter_mut().zip(src) {
                    *o += x;
                }
            }
            for o in out[q * n..(q + 1) * n].iter_mut() {
                *o *= inv;
            }
        }
        let tracked = self.nodes[a.0].tracked;
        let g = groups.len();
        self.push(
            "group_mean_rows",
            vec![g, n],
            out,
            Op::GroupMeanRows { a: a.0, groups },
            tracked,
        )
    }

    /// out row i = a row idx[i]; indices may repeat.
    pub fn gather_rows(&mut self, a: TensorId, idx: Arc<Vec<usize>>) -> Result<TensorId> {
        let (m, n) = self.dims2(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &r in idx.iter() {
            if r >= m {
                return Err(Error::contract(format!(
                    "gather_rows: row {} out of {}",
                    r, m
                )));
            }
            out.extend_from_slice(&self.nodes[a.0].data[r * n..(r + 1) * n]);
        }
        let tracked = self.nodes[a.0].tracked;
        let rows = idx.len();
        self.push(
            "gather_rows",
            vec![rows, n],
            out,
            Op::GatherRows { a: a.0, idx },
            tracked,
        )
    }

    /// Stacks parts vertically. All parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: no parts"));
        }
        let n = self.dims2(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p);
            if pn != n {
                return Err(self.shape_err("concat_rows", parts[0], p));
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let tracked = self.tracked_any(parts);
        self.push(
            "concat_rows",
            vec![rows, n],
            out,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            tracked,
        )
    }

    /// out row i = [a row i ‖ b row i]
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, p) = self.dims2(a);
        let (mb, q) = self.dims2(b);
        if m != mb {
            return Err(self.shape_err("concat_cols", a, b));
        }
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&self.nodes[a.0].data[i * p..(i + 1) * p]);
            out.extend_from_slice(&self.nodes[b.0].data[i * q..(i + 1) * q]);
        }
        let tracked = self.tracked_any(&[a, b]);
        self.push(
            "concat_cols",
            vec![m, p + q],
            out,
            Op::ConcatCols { a: a.0, b: b.0 },
            tracked,
        )
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::contract(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.nodes[a.0].shape, shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let tracked = self.nodes[a.0].tracked;
        self.push("reshape", shape, data, Op::Reshape { a: a.0 }, tracked)
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<R> = self.nodes[a.0].data.iter().map(|&x| gelu_val(x)).collect();
        let tracked = self.nodes[a.0].tracked;
        let shape = self.nodes[a.0].shape.clone();
        self.push("gelu", shape, out, Op::Gelu { a: a.0 }, tracked)
    }

    /// Sigmoid clamped below at [`SCORE_FLOOR`] so a following log stays finite.
    pub fn score_activation(&mut self, a: TensorId) -> Result<TensorId> {
        let floor = R::from_f64(SCORE_FLOOR);
        let out: Vec<R> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| sigmoid(x).max(floor))
            .collect();
        let tracked = self.nodes[a.0].tracked;
        let shape = self.nodes[a.0].shape.clone();
        self.push(
            "score_activation",
            shape,
            out,
            Op::ScoreActivation { a: a.0 },
            tracked,
        )
    }

    /// Natural log. Non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<R> = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        let tracked = self.nodes[a.0].tracked;
        let shape = self.nodes[a.0].shape.clone();
        self.push("log", shape, out, Op::Log { a: a.0 }, tracked)
    }

    /// Row-wise layer normalization with learned scale/offset.
    pub fn layer_norm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a);
        if self.nodes[gamma.0].data.len() != n {
            return Err(self.shape_err("layer_norm", a, gamma));
        }
        if self.nodes[beta.0].data.len() != n {
            return Err(self.shape_err("layer_norm", a, beta));
        }
        let eps = R::from_f64(LN_EPS);
        let inv_n = R::from_f64(1.0 / n as f64);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &self.nodes[a.0].data[i * n..(i + 1) * n];
            let mu: R = row.iter().copied().sum::<R>() * inv_n;
            let var: R = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<R>() * inv_n;
            let inv_sig = (var + eps).sqrt().recip();
            for ((&x, &g), &b) in row
                .iter()
                .zip(&self.nodes[gamma.0].data)
                .zip(&self.nodes[beta.0].data)
            {
                out.push((x - mu) * inv_sig * g + b);
            }
        }
        let tracked = self.tracked_any(&[a, gamma, beta]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                a: a.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            tracked,
        )
    }

    /// Row-wise softmax over `scale * logits + bias`, honoring the mask.
    ///
    /// `bias` may be a length-`cols` vector (broadcast over rows, the
    /// key-side form the encoder uses) or a full matrix. Masked positions
    /// get probability exactly zero; a fully-masked row yields all zeros.
    pub fn softmax_biased(
        &mut self,
        logits: TensorId,
        bias: Option<TensorId>,
        mask: Option<Arc<AttnMask>>,
        scale: R,
    ) -> Result<TensorId> {
        let (m, n) = self.dims2(logits);
        if let Some(b) = bias {
            let len = self.nodes[b.0].data.len();
            if len != n && len != m * n {
                return Err(self.shape_err("softmax_biased", logits, b));
            }
        }
        if let Some(msk) = &mask {
            if msk.rows != m || msk.cols != n {
                return Err(Error::contract(format!(
                    "softmax_biased: mask {}x{} vs logits {}x{}",
                    msk.rows, msk.cols, m, n
                )));
            }
        }
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            let row = &self.nodes[logits.0].data[i * n..(i + 1) * n];
            let mut zmax = R::neg_infinity();
            for j in 0..n {
                if let Some(msk) = &mask {
                    if !msk.allows(i, j) {
                        continue;
                    }
                }
                let z = row[j] * scale + self.bias_at(bias, i, j, n);
                if z > zmax {
                    zmax = z;
                }
            }
            if zmax == R::neg_infinity() {
                continue; // fully masked row: all-zero probabilities
            }
            let mut total = R::zero();
            for j in 0..n {
                if let Some(msk) = &mask {
                    if !msk.allows(i, j) {
                        continue;
                    }
                }
                let z = row[j] * scale + self.bias_at(bias, i, j, n);
                let e = (z - zmax).exp();
                out[i * n + j] = e;
                total += e;
            }
            let inv = total.recip();
            for j in 0..n {
                out[i * n + j] *= inv;
            }
        }
        let mut inputs = vec![logits];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let tracked = self.tracked_any(&inputs);
        let shape = self.nodes[logits.0].shape.clone();
        self.push(
            "softmax_biased",
            shape,
            out,
            Op::SoftmaxBiased {
                logits: logits.0,
                bias: bias.map(|b| b.0),
                mask,
                scale,
            },
            tracked,
        )
    }

    fn bias_at(&self, bias: Option<TensorId>, i: usize, j: usize, n: usize) -> R {
        match bias {
            None => R::zero(),
            Some(b) => {
                let data = &self.nodes[b.0].data;
                if data.len() == n {
                    data[j]
                } else {
                    data[i * n + j]
                }
            }
        }
    }

    // ── Similarity and losses ───────────────────────────────────────

    /// Rows scaled to unit L2 norm, with the norm floored at [`NORM_EPS`].
    pub fn l2_normalize_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a);
        let eps = R::from_f64(NORM_EPS);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &self.nodes[a.0].data[i * n..(i + 1) * n];
            let norm = row.iter().map(|&x| x * x).sum::<R>().sqrt().max(eps);
            out.extend(row.iter().map(|&x| x / norm));
        }
        let tracked = self.nodes[a.0].tracked;
        let shape = self.nodes[a.0].shape.clone();
        self.push(
            "l2_normalize_rows",
            shape,
            out,
            Op::L2NormalizeRows { a: a.0 },
            tracked,
        )
    }

    /// Cosine similarity between corresponding rows of a and b; output [m].
    pub fn cosine_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.shape_err("cosine_rows", a, b));
        }
        let (m, n) = self.dims2(a);
        let eps = R::from_f64(NORM_EPS);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let ra = &self.nodes[a.0].data[i * n..(i + 1) * n];
            let rb = &self.nodes[b.0].data[i * n..(i + 1) * n];
            let na = ra.iter().map(|&x| x * x).sum::<R>().sqrt().max(eps);
            let nb = rb.iter().map(|&x| x * x).sum::<R>().sqrt().max(eps);
            let dot: R = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            out.push(dot / (na * nb));
        }
        let tracked = self.tracked_any(&[a, b]);
        self.push(
            "cosine_rows",
            vec![m],
            out,
            Op::CosineRows { a: a.0, b: b.0 },
            tracked,
        )
    }

    /// Mean squared error between same-shaped tensors; scalar output.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.shape_err("mse", a, b));
        }
        let numel = self.nodes[a.0].data.len();
        let inv = R::from_f64(1.0 / numel as f64);
        let s: R = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let tracked = self.tracked_any(&[a, b]);
        self.push(
            "mse",
            vec![1],
            vec![s * inv],
            Op::Mse { a: a.0, b: b.0 },
            tracked,
        )
    }

    /// Cross-entropy of a logit vector against a class index, computed via
    /// log-sum-exp so confident predictions stay finite.
    pub fn cross_entropy_logits(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let n = self.nodes[logits.0].data.len();
        if target >= n {
            return Err(Error::contract(format!(
                "cross_entropy_logits: target {} out of {}",
                target, n
            )));
        }
        let data = &self.nodes[logits.0].data;
        let zmax = data.iter().copied().fold(R::neg_infinity(), R::max);
        let lse = data.iter().map(|&z| (z - zmax).exp()).sum::<R>().ln() + zmax;
        let loss = lse - data[target];
        let tracked = self.nodes[logits.0].tracked;
        self.push(
            "cross_entropy_logits",
            vec![1],
            vec![loss],
            Op::CrossEntropyLogits {
                logits: logits.0,
                target,
            },
            tracked,
        )
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of tracked leaves are
    /// retained; interior buffers are freed as the sweep retires them.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if self.swept {
            return Err(Error::contract("backward invoked twice on one tape"));
        }
        self.swept = true;
        if self.nodes[loss.0].tracked {
            self.grads[loss.0] = Some(vec![R::one()]);
        }
        for i in (0..=loss.0).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => {
                    self.retire(i);
                    continue;
                }
            };
            self.backward_op(i, &g);
            self.grads[i] = Some(g);
            self.retire(i);
        }
        Ok(())
    }

    /// Frees the value buffer and gradient of a retired interior node.
    fn retire(&mut self, i: usize) {
        if !matches!(self.nodes[i].op, Op::Leaf) {
            self.nodes[i].data = Vec::new();
            self.grads[i] = None;
        }
    }

    fn acc(&mut self, target: usize, contrib: impl FnOnce(&mut [R])) {
        if !self.nodes[target].tracked {
            return;
        }
        let numel: usize = self.nodes[target].shape.iter().product();
        let slot = self.grads[target].get_or_insert_with(|| vec![R::zero(); numel]);
        // Split borrow: the closure must not touch the tape.
        contrib(slot);
    }

    fn backward_op(&mut self, i: usize, g: &[R]) {
        // Ops read input values (ids < i), which are still live here.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a].rows(), self.nodes[a].cols());
                let n = self.nodes[b].cols();
                if self.nodes[a].tracked {
                    let bd = std::mem::take(&mut self.nodes[b].data);
                    self.acc(a, |da| kernels::mm_nt_acc(g, &bd, da, m, n, k));
                    self.nodes[b].data = bd;
                }
                if self.nodes[b].tracked {
                    let ad = std::mem::take(&mut self.nodes[a].data);
                    self.acc(b, |db| kernels::mm_tn_acc(&ad, g, db, m, k, n));
                    self.nodes[a].data = ad;
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = (self.nodes[a].rows(), self.nodes[a].cols());
                let n = self.nodes[b].rows();
                if self.nodes[a].tracked {
                    let bd = std::mem::take(&mut self.nodes[b].data);
                    self.acc(a, |da| kernels::mm_acc(g, &bd, da, m, n, k));
                    self.nodes[b].data = bd;
                }
                if self.nodes[b].tracked {
                    let ad = std::mem::take(&mut self.nodes[a].data);
                    self.acc(b, |db| kernels::mm_tn_acc(g, &ad, db, m, n, k));
                    self.nodes[a].data = ad;
                }
            }
            Op::Add { a, b } => {
                self.acc(a, |da| add_assign(da, g));
                self.acc(b, |db| add_assign(db, g));
            }
            Op::Sub { a, b } => {
                self.acc(a, |da| add_assign(da, g));
                self.acc(b, |db| sub_assign(db, g));
            }
            Op::Mul { a, b } => {
                if self.nodes[a].tracked {
                    let bd = std::mem::take(&mut self.nodes[b].data);
                    self.acc(a, |da| {
                        for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(&bd) {
                            *d += gv * bv;
                        }
                    });
                    self.nodes[b].data = bd;
                }
                if self.nodes[b].tracked {
                    let ad = std::mem::take(&mut self.nodes[a].data);
                    self.acc(b, |db| {
                        for ((d, &gv), &av) in db.iter_mut().zip(g).zip(&ad) {
                            *d += gv * av;
                        }
                    });
                    self.nodes[a].data = ad;
                }
            }
            Op::AddRowVec { a, v } => {
                let n = self.nodes[v].shape.iter().product::<usize>();
                self.acc(a, |da| add_assign(da, g));
                self.acc(v, |dv| {
                    for (j, d) in dv.iter_mut().enumerate() {
                        let mut s = R::zero();
                        let mut p = j;
                        while p < g.len() {
                            s += g[p];
                            p += n;
                        }
                        *d += s;
                    }
                });
            }
            Op::Scale { a, c } => {
                self.acc(a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }
            Op::Sum { a } => {
                let gv = g[0];
                self.acc(a, |da| {
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::GroupMeanRows { a, groups } => {
                let n = self.nodes[a].cols();
                self.acc(a, |da| {
                    for (q, group) in groups.iter().enumerate() {
                        let inv = R::from_f64(1.0 / group.len() as f64);
                        let grow = &g[q * n..(q + 1) * n];
                        for &r in group {
                            for (d, &gv) in da[r * n..(r + 1) * n].iter_mut().zip(grow) {
                                *d += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::GatherRows { a, idx } => {
                let n = self.nodes[a].cols();
                self.acc(a, |da| {
                    for (i_out, &r) in idx.iter().enumerate() {
                        for (d, &gv) in da[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(&g[i_out * n..(i_out + 1) * n])
                        {
                            *d += gv;
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let numel: usize = self.nodes[p].shape.iter().product();
                    let slice = &g[offset..offset + numel];
                    self.acc(p, |dp| add_assign(dp, slice));
                    offset += numel;
                }
            }
            Op::ConcatCols { a, b } => {
                let p = self.nodes[a].cols();
                let q = self.nodes[b].cols();
                let m = self.nodes[a].rows();
                self.acc(a, |da| {
                    for i in 0..m {
                        for (d, &gv) in da[i * p..(i + 1) * p]
                            .iter_mut()
                            .zip(&g[i * (p + q)..i * (p + q) + p])
                        {
                            *d += gv;
                        }
                    }
                });
                self.acc(b, |db| {
                    for i in 0..m {
                        for (d, &gv) in db[i * q..(i + 1) * q]
                            .iter_mut()
                            .zip(&g[i * (p + q) + p..(i + 1) * (p + q)])
                        {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                self.acc(a, |da| add_assign(da, g));
            }
            Op::Gelu { a } => {
                let ad = std::mem::take(&mut self.nodes[a].data);
                self.acc(a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(&ad) {
                        *d += gv * gelu_grad(x);
                    }
                });
                self.nodes[a].data = ad;
            }
            Op::ScoreActivation { a } => {
                let floor = R::from_f64(SCORE_FLOOR);
                let ad = std::mem::take(&mut self.nodes[a].data);
                self.acc(a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(&ad) {
                        let s = sigmoid(x);
                        if s > floor {
                            *d += gv * s * (R::one() - s);
                        }
                    }
                });
                self.nodes[a].data = ad;
            }
            Op::Log { a } => {
                let ad = std::mem::take(&mut self.nodes[a].data);
                self.acc(a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(&ad) {
                        *d += gv / x;
                    }
                });
                self.nodes[a].data = ad;
            }
            Op::LayerNorm { a, gamma, beta } => {
                let (m, n) = (self.nodes[a].rows(), self.nodes[a].cols());
                let eps = R::from_f64(LN_EPS);
                let inv_n = R::from_f64(1.0 / n as f64);
                let ad = std::mem::take(&mut self.nodes[a].data);
                let gd = std::mem::take(&mut self.nodes[gamma].data);
                // Recompute per-row stats; cheaper than caching them forward.
                let mut xhat = vec![R::zero(); m * n];
                let mut inv_sig = vec![R::zero(); m];
                for i in 0..m {
                    let row = &ad[i * n..(i + 1) * n];
                    let mu: R = row.iter().copied().sum::<R>() * inv_n;
                    let var: R = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<R>() * inv_n;
                    let is = (var + eps).sqrt().recip();
                    inv_sig[i] = is;
                    for (j, &x) in row.iter().enumerate() {
                        xhat[i * n + j] = (x - mu) * is;
                    }
                }
                self.acc(a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let xrow = &xhat[i * n..(i + 1) * n];
                        let mut m1 = R::zero();
                        let mut m2 = R::zero();
                        for ((&gv, &gam), &xh) in grow.iter().zip(&gd).zip(xrow) {
                            let dxh = gv * gam;
                            m1 += dxh;
                            m2 += dxh * xh;
                        }
                        m1 *= inv_n;
                        m2 *= inv_n;
                        for (((d, &gv), &gam), &xh) in
                            da[i * n..(i + 1) * n].iter_mut().zip(grow).zip(&gd).zip(xrow)
                        {
                            let dxh = gv * gam;
                            *d += (dxh - m1 - xh * m2) * inv_sig[i];
                        }
                    }
                });
                self.acc(gamma, |dg| {
                    for i in 0..m {
                        for ((d, &gv), &xh) in dg
                            .iter_mut()
                            .zip(&g[i * n..(i + 1) * n])
                            .zip(&xhat[i * n..(i + 1) * n])
                        {
                            *d += gv * xh;
                        }
                    }
                });
                self.acc(beta, |db| {
                    for i in 0..m {
                        for (d, &gv) in db.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *d += gv;
                        }
                    }
                });
                self.nodes[a].data = ad;
                self.nodes[gamma].data = gd;
            }
            Op::SoftmaxBiased {
                logits,
                bias,
                mask,
                scale,
            } => {
                let (m, n) = (self.nodes[logits].rows(), self.nodes[logits].cols());
                let probs = std::mem::take(&mut self.nodes[i].data);
                let bias_is_vec = bias
                    .map(|b| self.nodes[b].data.len() == n)
                    .unwrap_or(false);
                // d(z_j) = p_j (g_j - sum_k g_k p_k), per row over unmasked keys.
                let mut dz = vec![R::zero(); m * n];
                for r in 0..m {
                    let prow = &probs[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mut dot = R::zero();
                    for (p, gv) in prow.iter().zip(grow) {
                        dot += *p * *gv;
                    }
                    for j in 0..n {
                        if let Some(msk) = &mask {
                            if !msk.allows(r, j) {
                                continue;
                            }
                        }
                        dz[r * n + j] = prow[j] * (grow[j] - dot);
                    }
                }
                self.acc(logits, |dl| {
                    for (d, &z) in dl.iter_mut().zip(&dz) {
                        *d += z * scale;
                    }
                });
                if let Some(b) = bias {
                    self.acc(b, |db| {
                        if bias_is_vec {
                            for (j, d) in db.iter_mut().enumerate() {
                                let mut s = R::zero();
                                for r in 0..m {
                                    s += dz[r * n + j];
                                }
                                *d += s;
                            }
                        } else {
                            add_assign(db, &dz);
                        }
                    });
                }
                self.nodes[i].data = probs;
            }
            Op::L2NormalizeRows { a } => {
                let (m, n) = (self.nodes[a].rows(), self.nodes[a].cols());
                let eps = R::from_f64(NORM_EPS);
                let ad = std::mem::take(&mut self.nodes[a].data);
                self.acc(a, |da| {
                    for i in 0..m {
                        let row = &ad[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let norm = row.iter().map(|&x| x * x).sum::<R>().sqrt();
                        if norm > eps {
                            let dot: R = row.iter().zip(grow).map(|(&x, &gv)| x * gv).sum();
                            let n3 = norm * norm * norm;
                            for ((d, &gv), &x) in
                                da[i * n..(i + 1) * n].iter_mut().zip(grow).zip(row)
                            {
                                *d += gv / norm - x * dot / n3;
                            }
                        } else {
                            for (d, &gv) in da[i * n..(i + 1) * n].iter_mut().zip(grow) {
                                *d += gv / eps;
                            }
                        }
                    }
                });
                self.nodes[a].data = ad;
            }
            Op::CosineRows { a, b } => {
                let (m, n) = (self.nodes[a].rows(), self.nodes[a].cols());
                let eps = R::from_f64(NORM_EPS);
                let ad = std::mem::take(&mut self.nodes[a].data);
                let bd = std::mem::take(&mut self.nodes[b].data);
                let mut da_buf = vec![R::zero(); m * n];
                let mut db_buf = vec![R::zero(); m * n];
                for i in 0..m {
                    let ra = &ad[i * n..(i + 1) * n];
                    let rb = &bd[i * n..(i + 1) * n];
                    let na_raw = ra.iter().map(|&x| x * x).sum::<R>().sqrt();
                    let nb_raw = rb.iter().map(|&x| x * x).sum::<R>().sqrt();
                    let na = na_raw.max(eps);
                    let nb = nb_raw.max(eps);
                    let dot: R = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
                    let gv = g[i];
                    for j in 0..n {
                        let mut da = rb[j] / (na * nb);
                        if na_raw > eps {
                            da -= ra[j] * dot / (na * na * na * nb);
                        }
                        da_buf[i * n + j] = gv * da;
                        let mut db = ra[j] / (na * nb);
                        if nb_raw > eps {
                            db -= rb[j] * dot / (nb * nb * nb * na);
                        }
                        db_buf[i * n + j] = gv * db;
                    }
                }
                self.acc(a, |da| add_assign(da, &da_buf));
                self.acc(b, |db| add_assign(db, &db_buf));
                self.nodes[a].data = ad;
                self.nodes[b].data = bd;
            }
            Op::Mse { a, b } => {
                let numel = self.nodes[a].shape.iter().product::<usize>();
                let coef = g[0] * R::from_f64(2.0 / numel as f64);
                let ad = std::mem::take(&mut self.nodes[a].data);
                let bd = std::mem::take(&mut self.nodes[b].data);
                self.acc(a, |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(&ad).zip(&bd) {
                        *d += coef * (x - y);
                    }
                });
                self.acc(b, |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(&ad).zip(&bd) {
                        *d -= coef * (x - y);
                    }
                });
                self.nodes[a].data = ad;
                self.nodes[b].data = bd;
            }
            Op::CrossEntropyLogits { logits, target } => {
                let data = std::mem::take(&mut self.nodes[logits].data);
                let zmax = data.iter().copied().fold(R::neg_infinity(), R::max);
                let total: R = data.iter().map(|&z| (z - zmax).exp()).sum();
                let gv = g[0];
                self.acc(logits, |dl| {
                    for (j, (d, &z)) in dl.iter_mut().zip(&data).enumerate() {
                        let p = (z - zmax).exp() / total;
                        let delta = if j == target { R::one() } else { R::zero() };
                        *d += gv * (p - delta);
                    }
                });
                self.nodes[logits].data = data;
            }
        }
    }
}

fn add_assign<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_assign<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        (R::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

fn gelu_val<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (R::one() + u.tanh())
}

fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let three = R::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (R::one() + t) + half * x * (R::one() - t * t) * c * (R::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{compare_grads, finite_diff_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.leaf(t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t2(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(1, 2, vec![1.0, 2.0]));
        let b = tape.leaf(t2(2, 1, vec![3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(2, 3, vec![0.0; 6]));
        let b = tape.leaf(t2(2, 2, vec![0.0; 4]));
        match tape.matmul(a, b) {
            Err(crate::error::Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(vec![5, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![4, 3], 1.0, &mut rng);

        let mut tape = Tape::new();
        let ia = tape.param(&a);
        let ib = tape.leaf(b.clone());
        let prod = tape.matmul(ia, ib).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        let analytic = vec![Tensor::new(vec![5, 4], tape.grad(ia).unwrap().to_vec()).unwrap()];

        let numeric = finite_diff_grad(
            &mut |p: &[Tensor<f64>]| {
                let mut t = Tape::new();
                let ia = t.leaf(p[0].clone());
                let ib = t.leaf(b.clone());
                let prod = t.matmul(ia, ib)?;
                let loss = t.sum(prod)?;
                Ok(t.data(loss)[0])
            },
            &[a],
            1e-6,
        )
        .unwrap();
        let cmp = compare_grads(&analytic, &numeric, 1e-9).unwrap();
        assert!(cmp.within(1e-6), "max rel err {}", cmp.max_rel_err);
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t2(1, 4, vec![0.0; 4]));
        let p = tape.softmax_biased(logits, None, None, 1.0).unwrap();
        for &v in tape.data(p) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_log_bias_acts_multiplicatively() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t2(1, 4, vec![0.0; 4]));
        let bias = tape.leaf(Tensor::new(vec![4], vec![3.0f64.ln(), 0.0, 0.0, 0.0]).unwrap());
        let p = tape.softmax_biased(logits, Some(bias), None, 1.0).unwrap();
        let got = tape.data(p);
        let want = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_rows_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::<f64>::randn(vec![5, 6], 2.0, &mut rng);
        // Row 0: full; row 3: partially masked; row 4: fully masked.
        let mut allow = vec![true; 30];
        for k in 0..6 {
            allow[3 * 6 + k] = k % 2 == 0;
            allow[4 * 6 + k] = false;
        }
        let mask = Arc::new(AttnMask::new(5, 6, allow).unwrap());
        let mut tape = Tape::new();
        let il = tape.leaf(logits);
        let p = tape.softmax_biased(il, None, Some(mask.clone()), 1.0).unwrap();
        let data = tape.data(p);
        for r in 0..4 {
            let sum: f64 = data[r * 6..(r + 1) * 6].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
        }
        for k in 0..6 {
            if !mask.allows(3, k) {
                assert_eq!(data[3 * 6 + k], 0.0);
            }
            assert_eq!(data[4 * 6 + k], 0.0, "fully-masked row must be zero");
        }
    }

    #[test]
    fn softmax_bias_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits = Tensor::<f64>::randn(vec![6, 6], 1.0, &mut rng);
        let bias = Tensor::<f64>::randn(vec![6, 6], 1.0, &mut rng);
        let weight = Tensor::<f64>::randn(vec![6, 6], 1.0, &mut rng);

        let mut tape = Tape::new();
        let il = tape.leaf(logits.clone());
        let ib = tape.param(&bias);
        let iw = tape.leaf(weight.clone());
        let p = tape.softmax_biased(il, Some(ib), None, 1.0).unwrap();
        // Weighted sum so the gradient is not identically zero by symmetry.
        let wp = tape.mul(p, iw).unwrap();
        let loss = tape.sum(wp).unwrap();
        tape.backward(loss).unwrap();
        let analytic = vec![Tensor::new(vec![6, 6], tape.grad(ib).unwrap().to_vec()).unwrap()];

        let numeric = finite_diff_grad(
            &mut |p: &[Tensor<f64>]| {
                let mut t = Tape::new();
                let il = t.leaf(logits.clone());
                let ib = t.leaf(p[0].clone());
                let iw = t.leaf(weight.clone());
                let sm = t.softmax_biased(il, Some(ib), None, 1.0)?;
                let wp = t.mul(sm, iw)?;
                let loss = t.sum(wp)?;
                Ok(t.data(loss)[0])
            },
            &[bias],
            1e-6,
        )
        .unwrap();
        let cmp = compare_grads(&analytic, &numeric, 1e-9).unwrap();
        assert!(cmp.within(1e-5), "max rel err {}", cmp.max_rel_err);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let ix = tape.param(&x);
        let loss = tape.sum(ix).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(ix).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn mse_of_identical_tensors_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let ia = tape.param(&x);
        let ib = tape.leaf(x.clone());
        let loss = tape.mse(ia, ib).unwrap();
        assert_eq!(tape.data(loss), &[0.0]);
        tape.backward(loss).unwrap();
        assert!(tape.grad(ia).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.backward(x),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn untracked_gradients_never_materialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(vec![2, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let ix = tape.leaf(x.clone()); // untracked
        let iy = tape.param(&x);
        let prod = tape.mul(ix, iy).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(ix).is_none());
        assert!(tape.grad(iy).is_some());
    }

    #[test]
    fn nonfinite_outputs_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(1, 2, vec![0.0, -1.0]));
        assert!(matches!(
            tape.log(x),
            Err(crate::error::Error::NonFinite { op: "log" })
        ));
    }

    /// Finite-difference sweep over every differentiable op in scope.
    #[test]
    fn per_op_gradients_match_finite_differences() {
        type Builder = fn(&mut Tape<f64>, TensorId) -> TensorId;
        let cases: Vec<(&str, Vec<usize>, Builder)> = vec![
            ("gelu", vec![3, 4], |t, x| {
                let y = t.gelu(x).unwrap();
                t.sum(y).unwrap()
            }),
            ("score_activation", vec![3, 4], |t, x| {
                let y = t.score_activation(x).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq).unwrap()
            }),
            ("log_of_softplus_range", vec![3, 4], |t, x| {
                // keep inputs positive: log(score_activation(x))
                let s = t.score_activation(x).unwrap();
                let y = t.log(s).unwrap();
                t.sum(y).unwrap()
            }),
            ("layer_norm_input", vec![4, 6], |t, x| {
                let gamma = t.param(&Tensor::from_fn(vec![6], |i| 0.5 + 0.1 * i as f64));
                let beta = t.param(&Tensor::from_fn(vec![6], |i| 0.05 * i as f64));
                let y = t.layer_norm(x, gamma, beta).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq).unwrap()
            }),
            ("l2_normalize", vec![3, 5], |t, x| {
                let y = t.l2_normalize_rows(x).unwrap();
                let w = t.leaf(Tensor::from_fn(vec![3, 5], |i| 0.3 + 0.07 * i as f64));
                let wy = t.mul(y, w).unwrap();
                t.sum(wy).unwrap()
            }),
            ("cosine_rows", vec![4, 5], |t, x| {
                let other = t.leaf(Tensor::from_fn(vec![4, 5], |i| ((i * 13 % 7) as f64) - 2.5));
                let c = t.cosine_rows(x, other).unwrap();
                let sq = t.mul(c, c).unwrap();
                t.sum(sq).unwrap()
            }),
            ("mse", vec![3, 4], |t, x| {
                let target = t.leaf(Tensor::from_fn(vec![3, 4], |i| 0.1 * i as f64));
                t.mse(x, target).unwrap()
            }),
            ("cross_entropy", vec![1, 4], |t, x| {
                let flat = t.reshape(x, vec![4]).unwrap();
                t.cross_entropy_logits(flat, 2).unwrap()
            }),
            ("add_row_vec_and_matmul", vec![3, 4], |t, x| {
                let w = t.leaf(Tensor::from_fn(vec![4, 2], |i| 0.2 * i as f64 - 0.7));
                let v = t.leaf(Tensor::from_fn(vec![2], |i| 0.3 + i as f64));
                let y = t.matmul(x, w).unwrap();
                let y = t.add_row_vec(y, v).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq).unwrap()
            }),
            ("gather_concat_group_mean", vec![4, 3], |t, x| {
                let gathered = t
                    .gather_rows(x, Arc::new(vec![2, 0, 2, 3, 1]))
                    .unwrap();
                let stacked = t.concat_rows(&[gathered, x]).unwrap();
                let halves = t.concat_cols(stacked, stacked).unwrap();
                let pooled = t
                    .group_mean_rows(halves, Arc::new(vec![vec![0, 1, 2], vec![3, 4, 5, 6, 7, 8]]))
                    .unwrap();
                let sq = t.mul(pooled, pooled).unwrap();
                t.sum(sq).unwrap()
            }),
            ("softmax_masked_grad", vec![4, 4], |t, x| {
                let mut allow = vec![true; 16];
                allow[1 * 4 + 2] = false;
                allow[3 * 4 + 0] = false;
                let mask = Arc::new(AttnMask::new(4, 4, allow).unwrap());
                let w = t.leaf(Tensor::from_fn(vec![4, 4], |i| 0.11 * i as f64 - 0.8));
                let p = t.softmax_biased(x, None, Some(mask), 0.5).unwrap();
                let wp = t.mul(p, w).unwrap();
                t.sum(wp).unwrap()
            }),
        ];

        for (name, shape, build) in cases {
            let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF ^ shape.len() as u64);
            let x = Tensor::<f64>::randn(shape.clone(), 0.8, &mut rng);

            let mut tape = Tape::new();
            let ix = tape.param(&x);
            let loss = build(&mut tape, ix);
            tape.backward(loss).unwrap();
            let analytic =
                vec![Tensor::new(shape.clone(), tape.grad(ix).unwrap().to_vec()).unwrap()];

            let numeric = finite_diff_grad(
                &mut |p: &[Tensor<f64>]| {
                    let mut t = Tape::new();
                    let ix = t.param(&p[0]);
                    let loss = build(&mut t, ix);
                    Ok(t.data(loss)[0])
                },
                &[x],
                1e-6,
            )
            .unwrap();
            let cmp = compare_grads(&analytic, &numeric, 1e-8).unwrap();
            assert!(
                cmp.within(1e-6),
                "{name}: max rel err {} (abs {})",
                cmp.max_rel_err,
                cmp.max_abs_err
            );
        }
    }

    #[test]
    fn determinism_identical_inputs_bitwise_equal() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let a = Tensor::<f64>::randn(vec![6, 6], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(vec![6, 6], 1.0, &mut rng);
            let mut tape = Tape::new();
            let ia = tape.param(&a);
            let ib = tape.leaf(b);
            let p = tape.matmul(ia, ib).unwrap();
            let s = tape.softmax_biased(p, None, None, 0.25).unwrap();
            let loss = tape.sum(s).unwrap();
            let v = tape.data(loss)[0];
            tape.backward(loss).unwrap();
            (v, tape.grad(ia).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1.len(), g2.len());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
