//! Toy multi-frame ViT encoder: patch embedding, pre-norm transformer
//! layers with optional key-side attention bias and attention masks, and
//! spatial mean-pooling.
//!
//! Frames attend only within themselves. Before packing each frame is its
//! own sequence; after packing the block-diagonal mask of the packed batch
//! keeps source frames isolated.

use std::sync::Arc;

use rand::Rng;

use crate::config::BlockGeometry;
use crate::error::{Error, Result};
use crate::tape::{AttnMask, Tape, TensorId};
use crate::tensor::{Real, Tensor};

/// A clip of T equally sized grayscale frames with pixel values in [0, 1].
/// Pixels are stored as f32 regardless of the compute precision.
#[derive(Debug, Clone)]
pub struct FrameBatch {
    pub side: usize,
    pub frames: Vec<Vec<f32>>,
    /// Informational only; nothing samples by it.
    pub fps: Option<f32>,
}

impl FrameBatch {
    pub fn new(side: usize, frames: Vec<Vec<f32>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::config("frame batch needs at least one frame"));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.len() != side * side {
                return Err(Error::config(format!(
                    "frame {i} has {} pixels, expected {}",
                    f.len(),
                    side * side
                )));
            }
            if f.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::config(format!("frame {i} has pixels outside [0,1]")));
            }
        }
        Ok(FrameBatch {
            side,
            frames,
            fps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Parameters of one pre-norm transformer layer.
#[derive(Debug, Clone)]
pub struct EncoderLayerParams<R> {
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
    pub ln1_g: Tensor<R>,
    pub ln1_b: Tensor<R>,
    pub ln2_g: Tensor<R>,
    pub ln2_b: Tensor<R>,
}

pub const INIT_STD: f64 = 0.02;
/// MLP expansion factor of the encoder layers.
pub const MLP_RATIO: usize = 4;

impl<R: Real> EncoderLayerParams<R> {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let std = R::from_f64(INIT_STD);
        let hidden = dim * MLP_RATIO;
        EncoderLayerParams {
            wq: Tensor::randn(vec![dim, dim], std, rng),
            bq: Tensor::zeros(vec![dim]),
            wk: Tensor::randn(vec![dim, dim], std, rng),
            bk: Tensor::zeros(vec![dim]),
            wv: Tensor::randn(vec![dim, dim], std, rng),
            bv: Tensor::zeros(vec![dim]),
            wo: Tensor::randn(vec![dim, dim], std, rng),
            bo: Tensor::zeros(vec![dim]),
            w1: Tensor::randn(vec![dim, hidden], std, rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: Tensor::randn(vec![hidden, dim], std, rng),
            b2: Tensor::zeros(vec![dim]),
            ln1_g: Tensor::full(vec![dim], R::one()),
            ln1_b: Tensor::zeros(vec![dim]),
            ln2_g: Tensor::full(vec![dim], R::one()),
            ln2_b: Tensor::zeros(vec![dim]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<R>)) {
        for (name, t) in self.fields() {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<R>)) {
        for (name, t) in self.fields_mut() {
            f(format!("{prefix}.{name}"), t);
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<R>); 16] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<R>); 16] {
        [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
        ]
    }
}

/// Tape handles for one registered layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
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
    pub ln1_g: TensorId,
    pub ln1_b: TensorId,
    pub ln2_g: TensorId,
    pub ln2_b: TensorId,
}

impl LayerNodes {
    pub fn register<R: Real>(tape: &mut Tape<R>, p: &EncoderLayerParams<R>) -> Self {
        LayerNodes {
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
            ln1_g: tape.param(&p.ln1_g),
            ln1_b: tape.param(&p.ln1_b),
            ln2_g: tape.param(&p.ln2_g),
            ln2_b: tape.param(&p.ln2_b),
        }
    }
}

/// Extracts the row-major patch matrix of one frame: row p holds the
/// patch_size² pixels of patch p, patches ordered top-left to bottom-right.
pub fn patch_matrix<R: Real>(frame: &[f32], side: usize, patch_size: usize) -> Result<Tensor<R>> {
    if patch_size == 0 || side % patch_size != 0 {
        return Err(Error::config(format!(
            "frame side {side} not divisible by patch size {patch_size}"
        )));
    }
    let grid = side / patch_size;
    let n = grid * grid;
    let pp = patch_size * patch_size;
    let mut data = Vec::with_capacity(n * pp);
    for pr in 0..grid {
        for pc in 0..grid {
            for r in 0..patch_size {
                let row = pr * patch_size + r;
                let start = row * side + pc * patch_size;
                for &px in &frame[start..start + patch_size] {
                    data.push(R::from_f64(px as f64));
                }
            }
        }
    }
    Tensor::new(vec![n, pp], data)
}

/// Patch-embedding parameters: linear projection plus learned per-patch
/// positional embeddings, shared across frames.
#[derive(Debug, Clone, Copy)]
pub struct EmbedNodes {
    pub w: TensorId,
    pub b: TensorId,
    pub pos: TensorId,
}

/// Projects every frame to a [N, D] token matrix: tokens = patches·W + b + pos.
pub fn patchify<R: Real>(
    tape: &mut Tape<R>,
    batch: &FrameBatch,
    patch_size: usize,
    embed: EmbedNodes,
) -> Result<Vec<TensorId>> {
    let mut out = Vec::with_capacity(batch.len());
    for frame in &batch.frames {
        let patches = patch_matrix::<R>(frame, batch.side, patch_size)?;
        let ip = tape.leaf(patches);
        let proj = tape.matmul(ip, embed.w)?;
        let proj = tape.add_row_vec(proj, embed.b)?;
        let tokens = tape.add(proj, embed.pos)?;
        out.push(tokens);
    }
    Ok(out)
}

/// One pre-norm transformer layer over a [S, D] sequence.
///
/// `bias` is a length-S log-score vector added per key position, broadcast
/// over queries and heads. `mask` restricts which keys each query sees.
pub fn layer_forward<R: Real>(
    tape: &mut Tape<R>,
    x: TensorId,
    layer: &LayerNodes,
    heads: usize,
    bias: Option<TensorId>,
    mask: Option<Arc<AttnMask>>,
) -> Result<TensorId> {
    let seq = tape.shape(x)[0];
    let dim = tape.shape(x)[1];
    if dim % heads != 0 {
        return Err(Error::config(format!(
            "dim {dim} not divisible by {heads} heads"
        )));
    }
    let dk = dim / heads;
    let scale = R::from_f64(1.0 / (dk as f64).sqrt());

    let h = tape.layer_norm(x, layer.ln1_g, layer.ln1_b)?;
    let q = tape.matmul(h, layer.wq)?;
    let q = tape.add_row_vec(q, layer.bq)?;
    let k = tape.matmul(h, layer.wk)?;
    let k = tape.add_row_vec(k, layer.bk)?;
    let v = tape.matmul(h, layer.wv)?;
    let v = tape.add_row_vec(v, layer.bv)?;

    // Row s*heads+h of the reshaped view is head h of token s.
    let qh = tape.reshape(q, vec![seq * heads, dk])?;
    let kh = tape.reshape(k, vec![seq * heads, dk])?;
    let vh = tape.reshape(v, vec![seq * heads, dk])?;

    let mut ctx: Option<TensorId> = None;
    for head in 0..heads {
        let idx: Arc<Vec<usize>> = Arc::new((0..seq).map(|s| s * heads + head).collect());
        let qs = tape.gather_rows(qh, Arc::clone(&idx))?;
        let ks = tape.gather_rows(kh, Arc::clone(&idx))?;
        let vs = tape.gather_rows(vh, idx)?;
        let logits = tape.matmul_nt(qs, ks)?;
        let probs = tape.softmax_biased(logits, bias, mask.clone(), scale)?;
        let head_ctx = tape.matmul(probs, vs)?;
        ctx = Some(match ctx {
            None => head_ctx,
            Some(prev) => tape.concat_cols(prev, head_ctx)?,
        });
    }
    let ctx = ctx.expect("at least one head");
    let attn = tape.matmul(ctx, layer.wo)?;
    let attn = tape.add_row_vec(attn, layer.bo)?;
    let x = tape.add(x, attn)?;

    let h2 = tape.layer_norm(x, layer.ln2_g, layer.ln2_b)?;
    let m = tape.matmul(h2, layer.w1)?;
    let m = tape.add_row_vec(m, layer.b1)?;
    let m = tape.gelu(m)?;
    let m = tape.matmul(m, layer.w2)?;
    let m = tape.add_row_vec(m, layer.b2)?;
    tape.add(x, m)
}

/// Runs layers 0..=l on every frame independently (no bias, no mask).
pub fn encode_pre<R: Real>(
    tape: &mut Tape<R>,
    frames: &[TensorId],
    layers: &[LayerNodes],
    heads: usize,
) -> Result<Vec<TensorId>> {
    let mut xs = frames.to_vec();
    for layer in layers {
        for x in xs.iter_mut() {
            *x = layer_forward(tape, *x, layer, heads, None, None)?;
        }
    }
    Ok(xs)
}

/// Runs one layer per frame with a per-frame key-side bias.
pub fn encode_biased_layer<R: Real>(
    tape: &mut Tape<R>,
    frames: &[TensorId],
    layer: &LayerNodes,
    heads: usize,
    bias_per_frame: &[TensorId],
) -> Result<Vec<TensorId>> {
    if frames.len() != bias_per_frame.len() {
        return Err(Error::contract(format!(
            "{} frames but {} bias vectors",
            frames.len(),
            bias_per_frame.len()
        )));
    }
    for (t, &b) in bias_per_frame.iter().enumerate() {
        let n = tape.shape(frames[t])[0];
        if tape.data(b).len() != n {
            return Err(Error::ShapeMismatch {
                op: "encode_biased_layer",
                lhs: tape.shape(frames[t]).to_vec(),
                rhs: tape.shape(b).to_vec(),
            });
        }
    }
    frames
        .iter()
        .zip(bias_per_frame)
        .map(|(&x, &b)| layer_forward(tape, x, layer, heads, Some(b), None))
        .collect()
}

/// Runs layers l+2..end on packed bins under their block-diagonal masks.
pub fn encode_packed<R: Real>(
    tape: &mut Tape<R>,
    bins: &[TensorId],
    masks: &[Arc<AttnMask>],
    layers: &[LayerNodes],
    heads: usize,
) -> Result<Vec<TensorId>> {
    if bins.len() != masks.len() {
        return Err(Error::contract(format!(
            "{} bins but {} masks",
            bins.len(),
            masks.len()
        )));
    }
    let mut xs = bins.to_vec();
    for layer in layers {
        for (x, mask) in xs.iter_mut().zip(masks) {
            *x = layer_forward(tape, *x, layer, heads, None, Some(Arc::clone(mask)))?;
        }
    }
    Ok(xs)
}

/// Mean over each w×w spatial block: [N, D] -> [N/w², D].
pub fn spatial_pool<R: Real>(
    tape: &mut Tape<R>,
    tokens: TensorId,
    geo: &BlockGeometry,
) -> Result<TensorId> {
    if tape.shape(tokens)[0] != geo.n_patches() {
        return Err(Error::contract(format!(
            "spatial_pool: {} tokens vs {} patches in geometry",
            tape.shape(tokens)[0],
            geo.n_patches()
        )));
    }
    tape.group_mean_rows(tokens, Arc::clone(&geo.block_patches))
}
