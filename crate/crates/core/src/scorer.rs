//! The token scorer: spatial mean-pooling, a single self-attention pooler
//! layer, temporal concatenation with the previous frame, a 3-layer MLP
//! scoring head, block-constant score expansion, and log-bias emission.

use std::sync::Arc;

use rand::Rng;

use crate::config::BlockGeometry;
use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId, SCORE_FLOOR};
use crate::tensor::{Real, Tensor};

/// Scorer parameters: one pre-norm self-attention layer over pooled tokens
/// (no MLP block), then a 3-layer MLP tapering 2D -> D -> D/2 -> 1.
#[derive(Debug, Clone)]
pub struct ScorerParams<R> {
    pub ln_g: Tensor<R>,
    pub ln_b: Tensor<R>,
    pub wq: Tensor<R>,
    pub bq: Tensor<R>,
    pub wk: Tensor<R>,
    pub bk: Tensor<R>,
    pub wv: Tensor<R>,
    pub bv: Tensor<R>,
    pub wo: Tensor<R>,
    pub bo: Tensor<R>,
    pub w1: Tensor<R>,
    pub b1: Tensor<R>,
    pub w2: Tensor<R>,
    pub b2: Tensor<R>,
    pub w3: Tensor<R>,
    pub b3: Tensor<R>,
}

impl<R: Real> ScorerParams<R> {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let std = R::from_f64(INIT_STD);
        let half = dim / 2;
        ScorerParams {
            ln_g: Tensor::full(vec![dim], R::one()),
            ln_b: Tensor::zeros(vec![dim]),
            wq: Tensor::randn(vec![dim, dim], std, rng),
            bq: Tensor::zeros(vec![dim]),
            wk: Tensor::randn(vec![dim, dim], std, rng),
            bk: Tensor::zeros(vec![dim]),
            wv: Tensor::randn(vec![dim, dim], std, rng),
            bv: Tensor::zeros(vec![dim]),
            wo: Tensor::randn(vec![dim, dim], std, rng),
            bo: Tensor::zeros(vec![dim]),
            w1: Tensor::randn(vec![2 * dim, dim], std, rng),
            b1: Tensor::zeros(vec![dim]),
            w2: Tensor::randn(vec![dim, half], std, rng),
            b2: Tensor::zeros(vec![half]),
            w3: Tensor::randn(vec![half, 1], std, rng),
            b3: Tensor::zeros(vec![1]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<R>)) {
        for (name, t) in self.fields() {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<R>)) {
        let fields: [(&'static str, &mut Tensor<R>); 16] = [
            ("ln.g", &mut self.ln_g),
            ("ln.b", &mut self.ln_b),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("mlp.w1", &mut self.w1),
            ("mlp.b1", &mut self.b1),
            ("mlp.w2", &mut self.w2),
            ("mlp.b2", &mut self.b2),
            ("mlp.w3", &mut self.w3),
            ("mlp.b3", &mut self.b3),
        ];
        for (name, t) in fields {
            f(format!("{prefix}.{name}"), t);
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<R>); 16] {
        [
            ("ln.g", &self.ln_g),
            ("ln.b", &self.ln_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("mlp.w1", &self.w1),
            ("mlp.b1", &self.b1),
            ("mlp.w2", &self.w2),
            ("mlp.b2", &self.b2),
            ("mlp.w3", &self.w3),
            ("mlp.b3", &self.b3),
        ]
    }
}

/// Tape handles for registered scorer parameters.
#[derive(Debug, Clone, Copy)]
pub struct ScorerNodes {
    pub ln_g: TensorId,
    pub ln_b: TensorId,
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub w3: TensorId,
    pub b3: TensorId,
}

impl ScorerNodes {
    pub fn register<R: Real>(tape: &mut Tape<R>, p: &ScorerParams<R>) -> Self {
        ScorerNodes {
            ln_g: tape.param(&p.ln_g),
            ln_b: tape.param(&p.ln_b),
            wq: tape.param(&p.wq),
            bq: tape.param(&p.bq),
            wk: tape.param(&p.wk),
            bk: tape.param(&p.bk),
            wv: tape.param(&p.wv),
            bv: tape.param(&p.bv),
            wo: tape.param(&p.wo),
            bo: tape.param(&p.bo),
            w1: tape.param(&p.w1),
            b1: tape.param(&p.b1),
            w2: tape.param(&p.w2),
            b2: tape.param(&p.b2),
            w3: tape.param(&p.w3),
            b3: tape.param(&p.b3),
        }
    }
}

/// Runs one pre-norm self-attention layer with a residual over each
/// frame's pooled tokens. Pooling happens upstream via [`spatial_pool`] so
/// the similarity targets and the scorer read the same pooled features.
pub fn pooler_forward<R: Real>(
    tape: &mut Tape<R>,
    pooled_frames: &[TensorId],
    scorer: &ScorerNodes,
    heads: usize,
) -> Result<Vec<TensorId>> {
    let mut out = Vec::with_capacity(pooled_frames.len());
    for &pooled in pooled_frames {
        let m = tape.shape(pooled)[0];
        let dim = tape.shape(pooled)[1];
        if dim % heads != 0 {
            return Err(Error::config(format!(
                "pooler dim {dim} not divisible by {heads} heads"
            )));
        }
        let dk = dim / heads;
        let scale = R::from_f64(1.0 / (dk as f64).sqrt());

        let h = tape.layer_norm(pooled, scorer.ln_g, scorer.ln_b)?;
        let q = tape.matmul(h, scorer.wq)?;
        let q = tape.add_row_vec(q, scorer.bq)?;
        let k = tape.matmul(h, scorer.wk)?;
        let k = tape.add_row_vec(k, scorer.bk)?;
        let v = tape.matmul(h, scorer.wv)?;
        let v = tape.add_row_vec(v, scorer.bv)?;
        let qh = tape.reshape(q, vec![m * heads, dk])?;
        let kh = tape.reshape(k, vec![m * heads, dk])?;
        let vh = tape.reshape(v, vec![m * heads, dk])?;
        let mut ctx: Option<TensorId> = None;
        for head in 0..heads {
            let idx: Arc<Vec<usize>> = Arc::new((0..m).map(|s| s * heads + head).collect());
            let qs = tape.gather_rows(qh, Arc::clone(&idx))?;
            let ks = tape.gather_rows(kh, Arc::clone(&idx))?;
            let vs = tape.gather_rows(vh, idx)?;
            let logits = tape.matmul_nt(qs, ks)?;
            let probs = tape.softmax_biased(logits, None, None, scale)?;
            let head_ctx = tape.matmul(probs, vs)?;
            ctx = Some(match ctx {
                None => head_ctx,
                Some(prev) => tape.concat_cols(prev, head_ctx)?,
            });
        }
        let ctx = ctx.expect("at least one head");
        let attn = tape.matmul(ctx, scorer.wo)?;
        let attn = tape.add_row_vec(attn, scorer.bo)?;
        out.push(tape.add(pooled, attn)?);
    }
    Ok(out)
}

/// Pairs each frame's pooled features with the previous frame's:
/// row t = [pooled_t ‖ pooled_{t-1}], with frame 0 padded by zeros.
pub fn temporal_concat<R: Real>(
    tape: &mut Tape<R>,
    pooled: &[TensorId],
) -> Result<Vec<TensorId>> {
    if pooled.is_empty() {
        return Err(Error::contract("temporal_concat: no frames"));
    }
    let shape = tape.shape(pooled[0]).to_vec();
    let mut out = Vec::with_capacity(pooled.len());
    for (t, &cur) in pooled.iter().enumerate() {
        let prev = if t == 0 {
            tape.zeros_leaf(shape.clone())
        } else {
            pooled[t - 1]
        };
        out.push(tape.concat_cols(cur, prev)?);
    }
    Ok(out)
}

/// 3-layer MLP with GELU between layers and a clamped sigmoid output.
/// Returns one [M, 1] score column per frame, scores in [1e-6, 1].
pub fn score<R: Real>(
    tape: &mut Tape<R>,
    concat: &[TensorId],
    scorer: &ScorerNodes,
) -> Result<Vec<TensorId>> {
    concat
        .iter()
        .map(|&x| {
            let h = tape.matmul(x, scorer.w1)?;
            let h = tape.add_row_vec(h, scorer.b1)?;
            let h = tape.gelu(h)?;
            let h = tape.matmul(h, scorer.w2)?;
            let h = tape.add_row_vec(h, scorer.b2)?;
            let h = tape.gelu(h)?;
            let h = tape.matmul(h, scorer.w3)?;
            let h = tape.add_row_vec(h, scorer.b3)?;
            tape.score_activation(h)
        })
        .collect()
}

/// Expands pooled scores block-constant to patch resolution and takes the
/// log: one length-N bias vector per frame, every entry ≤ 0 and finite.
pub fn expand_and_bias<R: Real>(
    tape: &mut Tape<R>,
    pooled_scores: &[TensorId],
    geo: &BlockGeometry,
) -> Result<Vec<TensorId>> {
    let n = geo.n_patches();
    pooled_scores
        .iter()
        .map(|&s| {
            if tape.shape(s)[0] != geo.n_blocks() {
                return Err(Error::contract(format!(
                    "expand_and_bias: {} scores vs {} blocks",
                    tape.shape(s)[0],
                    geo.n_blocks()
                )));
            }
            let expanded = tape.gather_rows(s, Arc::clone(&geo.patch_block))?;
            let bias = tape.log(expanded)?;
            tape.reshape(bias, vec![n])
        })
        .collect()
}

/// Per-patch importance scores of one clip, read off the tape: pooled
/// scores [T, M] and their block-constant expansion [T, N].
#[derive(Debug, Clone)]
pub struct ScoreMap<R> {
    pub pooled: Tensor<R>,
    pub expanded: Tensor<R>,
}

impl<R: Real> ScoreMap<R> {
    /// Builds the map from per-frame pooled score values. The expansion
    /// copies each block score bit-for-bit to its w² patches.
    pub fn from_pooled(pooled: Tensor<R>, geo: &BlockGeometry) -> Result<Self> {
        let t = pooled.shape()[0];
        let m = pooled.shape()[1];
        if m != geo.n_blocks() {
            return Err(Error::contract(format!(
                "score map has {m} blocks, geometry {}",
                geo.n_blocks()
            )));
        }
        let floor = R::from_f64(SCORE_FLOOR);
        if pooled.data().iter().any(|&s| s < floor || s > R::one()) {
            return Err(Error::contract("pooled scores outside [1e-6, 1]"));
        }
        let n = geo.n_patches();
        let mut expanded = Tensor::zeros(vec![t, n]);
        for ti in 0..t {
            for p in 0..n {
                expanded.data_mut()[ti * n + p] =
                    pooled.data()[ti * m + geo.patch_block[p]];
            }
        }
        Ok(ScoreMap { pooled, expanded })
    }

    pub fn frames(&self) -> usize {
        self.pooled.shape()[0]
    }

    pub fn blocks(&self) -> usize {
        self.pooled.shape()[1]
    }
}
