//! The assembled model: parameters, tape registration, and the full
//! per-clip forward pass from pixels to the combined loss.
//!
//! Scoring and bias injection run in every prune mode; the mode only
//! selects which blocks the retention mask drops. The post-pruning layers
//! run on one of three paths: densely packed bins (the real pipeline),
//! per-frame full tensors with pruned positions masked out (no compute
//! savings, for comparison), or the unpruned baseline.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::auxloss::{neighbor_cosine, similarity_loss, total_loss, SimilarityMap};
use crate::checkpoint::NamedTensors;
use crate::config::{BlockGeometry, PipelineConfig, PruneMode};
use crate::encoder::{
    encode_biased_layer, encode_packed, encode_pre, layer_forward, patchify, spatial_pool,
    EmbedNodes, EncoderLayerParams, FrameBatch, LayerNodes,
};
use crate::error::{Error, Result};
use crate::packing::{pack, select_retention, unpack, PackedBatch, RetentionMask};
use crate::scorer::{expand_and_bias, pooler_forward, score, temporal_concat, ScoreMap, ScorerNodes, ScorerParams};
use crate::tape::{AttnMask, Tape, TensorId};
use crate::task::{
    heuristic_prune, random_prune, task_head_forward, task_loss, TaskHeadNodes, TaskHeadParams,
};
use crate::tensor::{Real, Tensor};

/// Every trainable tensor of the pipeline.
#[derive(Debug, Clone)]
pub struct ModelParams<R> {
    pub embed_w: Tensor<R>,
    pub embed_b: Tensor<R>,
    pub pos: Tensor<R>,
    pub layers: Vec<EncoderLayerParams<R>>,
    pub scorer: ScorerParams<R>,
    pub head: TaskHeadParams<R>,
}

impl<R: Real> ModelParams<R> {
    pub fn init(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pp = cfg.patch_size * cfg.patch_size;
        let std = R::from_f64(crate::encoder::INIT_STD);
        Ok(ModelParams {
            embed_w: Tensor::randn(vec![pp, cfg.dim], std, &mut rng),
            embed_b: Tensor::zeros(vec![cfg.dim]),
            pos: Tensor::randn(vec![cfg.n_patches(), cfg.dim], std, &mut rng),
            layers: (0..cfg.layers)
                .map(|_| EncoderLayerParams::init(cfg.dim, &mut rng))
                .collect(),
            scorer: ScorerParams::init(cfg.dim, &mut rng),
            head: TaskHeadParams::init(cfg.dim, &mut rng),
        })
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor<R>)) {
        f("embed.w".into(), &self.embed_w);
        f("embed.b".into(), &self.embed_b);
        f("embed.pos".into(), &self.pos);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layers.{i}"), f);
        }
        self.scorer.visit("scorer", f);
        self.head.visit("head", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<R>)) {
        f("embed.w".into(), &mut self.embed_w);
        f("embed.b".into(), &mut self.embed_b);
        f("embed.pos".into(), &mut self.pos);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("layers.{i}"), f);
        }
        self.scorer.visit_mut("scorer", f);
        self.head.visit_mut("head", f);
    }

    pub fn to_named(&self) -> NamedTensors<R> {
        let mut named = NamedTensors::new();
        self.visit(&mut |name, t| named.push(name, t.clone()));
        named
    }

    /// Rebuilds parameters from a checkpoint, validating names and shapes
    /// against a freshly initialized skeleton.
    pub fn from_named(cfg: &PipelineConfig, named: &NamedTensors<R>) -> Result<Self> {
        let mut params = Self::init(cfg, 0)?;
        let mut missing = Vec::new();
        params.visit_mut(&mut |name, t| match named.get(&name) {
            Some(stored) if stored.shape() == t.shape() => *t = stored.clone(),
            Some(stored) => missing.push(format!(
                "{name}: shape {:?} vs expected {:?}",
                stored.shape(),
                t.shape()
            )),
            None => missing.push(format!("{name}: missing")),
        });
        if !missing.is_empty() {
            return Err(Error::format("checkpoint", missing.join("; ")));
        }
        Ok(params)
    }

    /// Parameter cast through f64 (used to run f32 checkpoints at f64).
    pub fn cast<S: Real>(&self) -> ModelParams<S> {
        ModelParams {
            embed_w: self.embed_w.cast(),
            embed_b: self.embed_b.cast(),
            pos: self.pos.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayerParams {
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    bk: l.bk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                    ln1_g: l.ln1_g.cast(),
                    ln1_b: l.ln1_b.cast(),
                    ln2_g: l.ln2_g.cast(),
                    ln2_b: l.ln2_b.cast(),
                })
                .collect(),
            scorer: ScorerParams {
                ln_g: self.scorer.ln_g.cast(),
                ln_b: self.scorer.ln_b.cast(),
                wq: self.scorer.wq.cast(),
                bq: self.scorer.bq.cast(),
                wk: self.scorer.wk.cast(),
                bk: self.scorer.bk.cast(),
                wv: self.scorer.wv.cast(),
                bv: self.scorer.bv.cast(),
                wo: self.scorer.wo.cast(),
                bo: self.scorer.bo.cast(),
                w1: self.scorer.w1.cast(),
                b1: self.scorer.b1.cast(),
                w2: self.scorer.w2.cast(),
                b2: self.scorer.b2.cast(),
                w3: self.scorer.w3.cast(),
                b3: self.scorer.b3.cast(),
            },
            head: TaskHeadParams {
                w: self.head.w.cast(),
                b: self.head.b.cast(),
            },
        }
    }
}

/// Tape handles for a registered model, plus the flat name/id list used
/// for gradient extraction (same order as [`ModelParams::visit`]).
pub struct ModelNodes {
    pub embed: EmbedNodes,
    pub layers: Vec<LayerNodes>,
    pub scorer: ScorerNodes,
    pub head: TaskHeadNodes,
    pub ordered: Vec<(String, TensorId)>,
}

pub fn register_model<R: Real>(tape: &mut Tape<R>, params: &ModelParams<R>) -> ModelNodes {
    let embed = EmbedNodes {
        w: tape.param(&params.embed_w),
        b: tape.param(&params.embed_b),
        pos: tape.param(&params.pos),
    };
    let layers: Vec<LayerNodes> = params
        .layers
        .iter()
        .map(|l| LayerNodes::register(tape, l))
        .collect();
    let scorer = ScorerNodes::register(tape, &params.scorer);
    let head = TaskHeadNodes::register(tape, &params.head);

    let mut ordered = vec![
        ("embed.w".to_string(), embed.w),
        ("embed.b".to_string(), embed.b),
        ("embed.pos".to_string(), embed.pos),
    ];
    for (i, l) in layers.iter().enumerate() {
        let p = format!("layers.{i}");
        ordered.extend([
            (format!("{p}.wq"), l.wq),
            (format!("{p}.bq"), l.bq),
            (format!("{p}.wk"), l.wk),
            (format!("{p}.bk"), l.bk),
            (format!("{p}.wv"), l.wv),
            (format!("{p}.bv"), l.bv),
            (format!("{p}.wo"), l.wo),
            (format!("{p}.bo"), l.bo),
            (format!("{p}.w1"), l.w1),
            (format!("{p}.b1"), l.b1),
            (format!("{p}.w2"), l.w2),
            (format!("{p}.b2"), l.b2),
            (format!("{p}.ln1.g"), l.ln1_g),
            (format!("{p}.ln1.b"), l.ln1_b),
            (format!("{p}.ln2.g"), l.ln2_g),
            (format!("{p}.ln2.b"), l.ln2_b),
        ]);
    }
    ordered.extend([
        ("scorer.ln.g".to_string(), scorer.ln_g),
        ("scorer.ln.b".to_string(), scorer.ln_b),
        ("scorer.wq".to_string(), scorer.wq),
        ("scorer.bq".to_string(), scorer.bq),
        ("scorer.wk".to_string(), scorer.wk),
        ("scorer.bk".to_string(), scorer.bk),
        ("scorer.wv".to_string(), scorer.wv),
        ("scorer.bv".to_string(), scorer.bv),
        ("scorer.wo".to_string(), scorer.wo),
        ("scorer.bo".to_string(), scorer.bo),
        ("scorer.mlp.w1".to_string(), scorer.w1),
        ("scorer.mlp.b1".to_string(), scorer.b1),
        ("scorer.mlp.w2".to_string(), scorer.w2),
        ("scorer.mlp.b2".to_string(), scorer.b2),
        ("scorer.mlp.w3".to_string(), scorer.w3),
        ("scorer.mlp.b3".to_string(), scorer.b3),
    ]);
    ordered.push(("head.w".to_string(), head.w));
    ordered.push(("head.b".to_string(), head.b));

    ModelNodes {
        embed,
        layers,
        scorer,
        head,
        ordered,
    }
}

/// Post-pruning execution strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathVariant {
    /// Survivors packed into dense bins (the real pipeline).
    Packed,
    /// Full tensors with pruned positions masked out of attention.
    MaskedOnly,
    /// No pruning at all; the mask is ignored downstream.
    Unpruned,
}

/// Everything a caller reads off one clip's forward pass. Values are
/// snapshots taken before backward.
pub struct ForwardOutput<R: Real> {
    pub total: TensorId,
    pub task_value: R,
    pub sim_value: R,
    pub total_value: R,
    pub logits: Vec<R>,
    pub mask: RetentionMask,
    pub score_map: ScoreMap<R>,
    pub sim_map: SimilarityMap<R>,
    pub t_packed: usize,
    pub pack_comparisons: usize,
}

pub struct ForwardOptions<'a> {
    pub variant: PathVariant,
    /// Fixed mask, bypassing mode-based selection (gradient checks).
    pub mask_override: Option<&'a RetentionMask>,
    /// Seed for the random-prune mode.
    pub prune_seed: u64,
    /// Skip the task head and use only the similarity objective.
    pub aux_only: bool,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions {
            variant: PathVariant::Packed,
            mask_override: None,
            prune_seed: 0,
            aux_only: false,
        }
    }
}

pub fn forward_video<R: Real>(
    tape: &mut Tape<R>,
    nodes: &ModelNodes,
    cfg: &PipelineConfig,
    geo: &BlockGeometry,
    video: &FrameBatch,
    label: u8,
    opts: &ForwardOptions,
) -> Result<ForwardOutput<R>> {
    let t_frames = video.len();
    if t_frames != cfg.frames {
        return Err(Error::config(format!(
            "clip has {t_frames} frames, config expects {}",
            cfg.frames
        )));
    }
    let l = cfg.inject_layer;

    // Layers 0..=l per frame.
    let tokens = patchify(tape, video, cfg.patch_size, nodes.embed)?;
    let pre = encode_pre(tape, &tokens, &nodes.layers[..=l], cfg.heads)?;

    // Shared w×w pooled features: scorer input and similarity source.
    let pooled: Vec<TensorId> = pre
        .iter()
        .map(|&x| spatial_pool(tape, x, geo))
        .collect::<Result<_>>()?;

    // Similarity targets are constants: values only, no gradient path.
    let pooled_values: Vec<Tensor<R>> = pooled.iter().map(|&p| tape.value(p)).collect();
    let sim_map = neighbor_cosine(&pooled_values)?;

    // Scorer: pooler attention, temporal pairing, MLP, expansion to bias.
    let pooler_out = pooler_forward(tape, &pooled, &nodes.scorer, cfg.heads)?;
    let cat = temporal_concat(tape, &pooler_out)?;
    let score_cols = score(tape, &cat, &nodes.scorer)?;
    let bias = expand_and_bias(tape, &score_cols, geo)?;

    // Score matrix [T, M] for the auxiliary loss and for selection.
    let score_rows: Vec<TensorId> = score_cols
        .iter()
        .map(|&c| tape.reshape(c, vec![1, geo.n_blocks()]))
        .collect::<Result<_>>()?;
    let scores_tm = tape.concat_rows(&score_rows)?;
    let score_map = ScoreMap::from_pooled(tape.value(scores_tm), geo)?;

    // Retention mask by mode (or fixed by the caller).
    let mask = match opts.mask_override {
        Some(m) => m.clone(),
        None => match cfg.prune_mode {
            PruneMode::Stts => {
                select_retention(&score_map, geo, cfg.prune_ratio, cfg.protect_first)?
            }
            PruneMode::Heuristic => {
                heuristic_prune(&sim_map, geo, cfg.prune_ratio, cfg.protect_first)?
            }
            PruneMode::Random => random_prune(
                t_frames,
                geo,
                cfg.prune_ratio,
                cfg.protect_first,
                opts.prune_seed,
            )?,
            PruneMode::None => RetentionMask::full(t_frames, geo.n_patches()),
        },
    };

    // Layer l+1 with the log-score bias injected per key position.
    let biased = encode_biased_layer(tape, &pre, &nodes.layers[l + 1], cfg.heads, &bias)?;

    // Post-pruning layers on the selected path, then the ragged survivors.
    let post_layers = &nodes.layers[l + 2..];
    let mut t_packed = t_frames;
    let mut pack_comparisons = 0;
    let survivors: Vec<TensorId> = match opts.variant {
        PathVariant::Packed => {
            let packed = pack(tape, &biased, &mask)?;
            t_packed = packed.plan.t_packed();
            pack_comparisons = packed.plan.comparisons;
            let bins = encode_packed(tape, &packed.bins, &packed.masks, post_layers, cfg.heads)?;
            let processed = PackedBatch {
                plan: packed.plan,
                bins,
                masks: packed.masks,
                kept: packed.kept,
            };
            unpack(tape, &processed)?
        }
        PathVariant::MaskedOnly => {
            let n = geo.n_patches();
            let mut frames = biased.clone();
            for t in 0..t_frames {
                let kept: Vec<bool> = (0..n).map(|p| mask.kept(t, p)).collect();
                let mut allow = vec![false; n * n];
                for q in 0..n {
                    for k in 0..n {
                        allow[q * n + k] = kept[q] && kept[k];
                    }
                }
                let frame_mask = Arc::new(AttnMask::new(n, n, allow)?);
                for layer in post_layers {
                    frames[t] = layer_forward(
                        tape,
                        frames[t],
                        layer,
                        cfg.heads,
                        None,
                        Some(Arc::clone(&frame_mask)),
                    )?;
                }
            }
            (0..t_frames)
                .map(|t| {
                    let idx = Arc::new(mask.kept_patches(t));
                    tape.gather_rows(frames[t], idx)
                })
                .collect::<Result<_>>()?
        }
        PathVariant::Unpruned => {
            let mut frames = biased.clone();
            for layer in post_layers {
                for x in frames.iter_mut() {
                    *x = layer_forward(tape, *x, layer, cfg.heads, None, None)?;
                }
            }
            frames
        }
    };

    // Objective.
    let sim = similarity_loss(tape, scores_tm, &sim_map, cfg.pool_width, geo.n_patches())?;
    let (total, task_value, logits) = if opts.aux_only {
        (sim.mean_scaled, R::zero(), Vec::new())
    } else {
        let logits = task_head_forward(tape, &survivors, nodes.head)?;
        let t_loss = task_loss(tape, logits, label)?;
        let total = total_loss(tape, t_loss, sim.mean_scaled)?;
        (total, tape.data(t_loss)[0], tape.data(logits).to_vec())
    };

    Ok(ForwardOutput {
        total,
        task_value,
        sim_value: tape.data(sim.mean_scaled)[0],
        total_value: tape.data(total)[0],
        logits,
        mask,
        score_map,
        sim_map,
        t_packed,
        pack_comparisons,
    })
}
