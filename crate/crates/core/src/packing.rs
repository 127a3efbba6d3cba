//! Budgeted bottom-k pruning, first-fit-descending packing of the ragged
//! survivors into dense bins, block attention-mask construction, and
//! scatter-back unpacking.
//!
//! Pruning operates on whole pooled blocks: scores are block-constant, so
//! any within-block order would be arbitrary. The global budget is
//! ceil((1 - k%) · T · N) tokens; frame 0 is kept intact by default,
//! which floors the achievable ratio when k is extreme.

use std::sync::Arc;

use crate::config::BlockGeometry;
use crate::error::{Error, Result};
use crate::scorer::ScoreMap;
use crate::tape::{AttnMask, Tape, TensorId};
use crate::tensor::Real;

/// Binary keep/drop mask over frames × patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetentionMask {
    pub frames: usize,
    pub n_patches: usize,
    keep: Vec<bool>,
    retained: usize,
}

impl RetentionMask {
    pub fn full(frames: usize, n_patches: usize) -> Self {
        RetentionMask {
            frames,
            n_patches,
            keep: vec![true; frames * n_patches],
            retained: frames * n_patches,
        }
    }

    pub fn from_keep(frames: usize, n_patches: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != frames * n_patches {
            return Err(Error::contract(format!(
                "mask needs {} entries, got {}",
                frames * n_patches,
                keep.len()
            )));
        }
        let retained = keep.iter().filter(|&&k| k).count();
        Ok(RetentionMask {
            frames,
            n_patches,
            keep,
            retained,
        })
    }

    pub fn kept(&self, frame: usize, patch: usize) -> bool {
        self.keep[frame * self.n_patches + patch]
    }

    fn drop_block(&mut self, frame: usize, patches: &[usize]) {
        for &p in patches {
            let slot = frame * self.n_patches + p;
            if self.keep[slot] {
                self.keep[slot] = false;
                self.retained -= 1;
            }
        }
    }

    pub fn retained_count(&self) -> usize {
        self.retained
    }

    /// Valid token count per frame, the packing algorithm's C_valid.
    pub fn frame_counts(&self) -> Vec<usize> {
        (0..self.frames)
            .map(|t| {
                self.keep[t * self.n_patches..(t + 1) * self.n_patches]
                    .iter()
                    .filter(|&&k| k)
                    .count()
            })
            .collect()
    }

    /// Kept patch indices of one frame, in original patch order.
    pub fn kept_patches(&self, frame: usize) -> Vec<usize> {
        (0..self.n_patches)
            .filter(|&p| self.kept(frame, p))
            .collect()
    }

    pub fn achieved_ratio(&self) -> f64 {
        self.retained as f64 / (self.frames * self.n_patches) as f64
    }

    /// Every pooled block is kept or dropped atomically.
    pub fn is_block_aligned(&self, geo: &BlockGeometry) -> bool {
        (0..self.frames).all(|t| {
            geo.block_patches.iter().all(|patches| {
                let first = self.kept(t, patches[0]);
                patches.iter().all(|&p| self.kept(t, p) == first)
            })
        })
    }

    /// Text dump: one line of '0'/'1' per frame, length N.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.frames * (self.n_patches + 1));
        for t in 0..self.frames {
            for p in 0..self.n_patches {
                out.push(if self.kept(t, p) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if lines.is_empty() {
            return Err(Error::contract("empty mask dump"));
        }
        let n = lines[0].len();
        let mut keep = Vec::with_capacity(lines.len() * n);
        for line in &lines {
            if line.len() != n {
                return Err(Error::contract("ragged mask dump"));
            }
            for c in line.chars() {
                match c {
                    '0' => keep.push(false),
                    '1' => keep.push(true),
                    other => return Err(Error::contract(format!("bad mask char '{other}'"))),
                }
            }
        }
        Self::from_keep(lines.len(), n, keep)
    }
}

/// Token budget for a pruning ratio: ceil((1 - k/100) · total).
pub fn retention_budget(total_tokens: usize, prune_ratio: u32) -> usize {
    let keep_pct = (100 - prune_ratio.min(100)) as usize;
    (keep_pct * total_tokens).div_ceil(100)
}

/// Drops whole blocks in the given priority order until the budget is met.
/// Shared by score-based, heuristic, and random selection so all three
/// enforce identical budget and frame-0 rules.
pub fn drop_blocks_to_budget(
    frames: usize,
    geo: &BlockGeometry,
    drop_order: &[(usize, usize)],
    prune_ratio: u32,
) -> RetentionMask {
    let n = geo.n_patches();
    let budget = retention_budget(frames * n, prune_ratio);
    let mut mask = RetentionMask::full(frames, n);
    for &(t, b) in drop_order {
        if mask.retained_count() <= budget {
            break;
        }
        mask.drop_block(t, &geo.block_patches[b]);
    }
    mask
}

/// Bottom-k% pruning by score: drops the lowest-scoring pooled blocks from
/// frames 1..T-1 (all frames when `protect_first` is off) until the global
/// budget holds. Ties break by (frame, block) ascending, lower index
/// dropped first. When the budget falls below frame 0's token count the
/// mask caps at frame 0 and `achieved_ratio` reports the shortfall.
pub fn select_retention<R: Real>(
    scores: &ScoreMap<R>,
    geo: &BlockGeometry,
    prune_ratio: u32,
    protect_first: bool,
) -> Result<RetentionMask> {
    if prune_ratio > 100 {
        return Err(Error::config(format!("prune ratio {prune_ratio} > 100")));
    }
    let t_frames = scores.frames();
    let m = scores.blocks();
    if m != geo.n_blocks() {
        return Err(Error::contract(format!(
            "score map has {m} blocks, geometry {}",
            geo.n_blocks()
        )));
    }
    let first = if protect_first { 1 } else { 0 };
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(t_frames * m);
    for t in first..t_frames {
        for b in 0..m {
            candidates.push((scores.pooled.data()[t * m + b].as_f64(), t, b));
        }
    }
    // Lowest score dropped first; ties by ascending (frame, block).
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("scores are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let order: Vec<(usize, usize)> = candidates.iter().map(|&(_, t, b)| (t, b)).collect();
    Ok(drop_blocks_to_budget(t_frames, geo, &order, prune_ratio))
}

/// First-fit scan: smallest bin index whose load still accommodates
/// `count`, or `loads.len()` when a fresh bin is needed. Also returns the
/// number of load comparisons performed.
pub fn find_first_fit(count: usize, loads: &[usize], capacity: usize) -> Result<(usize, usize)> {
    if count > capacity {
        return Err(Error::contract(format!(
            "find_first_fit: count {count} exceeds capacity {capacity}"
        )));
    }
    let mut comparisons = 0;
    for (b, &load) in loads.iter().enumerate() {
        comparisons += 1;
        if load + count <= capacity {
            return Ok((b, comparisons));
        }
    }
    Ok((loads.len(), comparisons))
}

/// Placement computed by first-fit descending over per-frame token counts.
#[derive(Debug, Clone)]
pub struct PackPlan {
    pub capacity: usize,
    pub counts: Vec<usize>,
    /// Source frame -> bin. Meaningless for frames with count 0.
    pub assign: Vec<usize>,
    /// Source frame -> start position inside its bin.
    pub offset: Vec<usize>,
    /// Token load per (non-empty) bin.
    pub load: Vec<usize>,
    /// find_first_fit comparisons spent, for the O(T²) cost bound.
    pub comparisons: usize,
}

impl PackPlan {
    pub fn t_packed(&self) -> usize {
        self.load.len()
    }

    /// Frames assigned to `bin`, ordered by their offset.
    pub fn frames_in_bin(&self, bin: usize) -> Vec<usize> {
        let mut frames: Vec<usize> = (0..self.counts.len())
            .filter(|&f| self.counts[f] > 0 && self.assign[f] == bin)
            .collect();
        frames.sort_by_key(|&f| self.offset[f]);
        frames
    }

    /// Per-bin validity flags over the padded capacity.
    pub fn valid(&self) -> Vec<Vec<bool>> {
        self.load
            .iter()
            .map(|&l| (0..self.capacity).map(|p| p < l).collect())
            .collect()
    }
}

/// First-fit descending: frames sorted by valid-token count (descending,
/// ties by ascending frame index), each placed into the first bin with
/// room. Empty bins are never created for zero-count frames.
pub fn pack_plan(counts: &[usize], capacity: usize) -> Result<PackPlan> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    pack_plan_with_order(counts, capacity, &order)
}

/// First-fit over an arbitrary frame iteration order. Any order yields a
/// valid placement; FFD is the production choice.
pub fn pack_plan_with_order(
    counts: &[usize],
    capacity: usize,
    order: &[usize],
) -> Result<PackPlan> {
    for (f, &c) in counts.iter().enumerate() {
        if c > capacity {
            return Err(Error::contract(format!(
                "frame {f} holds {c} tokens, capacity {capacity}"
            )));
        }
    }
    if order.len() != counts.len() {
        return Err(Error::contract("order must cover every frame once"));
    }

    let mut load: Vec<usize> = Vec::new();
    let mut assign = vec![0usize; counts.len()];
    let mut offset = vec![0usize; counts.len()];
    let mut comparisons = 0;
    for &f in order {
        let count = counts[f];
        if count == 0 {
            continue;
        }
        let (bin, cmps) = find_first_fit(count, &load, capacity)?;
        comparisons += cmps;
        if bin == load.len() {
            load.push(0);
        }
        assign[f] = bin;
        offset[f] = load[bin];
        load[bin] += count;
    }
    Ok(PackPlan {
        capacity,
        counts: counts.to_vec(),
        assign,
        offset,
        load,
        comparisons,
    })
}

/// Block-diagonal attention masks, one per bin: a position pair is allowed
/// iff both positions hold tokens of the same source frame; the padded
/// tail allows nothing and is allowed by nothing.
pub fn build_attention_mask(plan: &PackPlan) -> Result<Vec<Arc<AttnMask>>> {
    let n = plan.capacity;
    let mut masks = Vec::with_capacity(plan.t_packed());
    for bin in 0..plan.t_packed() {
        let mut allow = vec![false; n * n];
        let mut covered = 0;
        for f in plan.frames_in_bin(bin) {
            let start = plan.offset[f];
            let end = start + plan.counts[f];
            if start != covered || end > n {
                return Err(Error::contract(format!(
                    "bin {bin}: frame {f} span {start}..{end} overlaps or exceeds capacity"
                )));
            }
            covered = end;
            for q in start..end {
                for k in start..end {
                    allow[q * n + k] = true;
                }
            }
        }
        if covered != plan.load[bin] {
            return Err(Error::contract(format!(
                "bin {bin}: spans cover {covered} positions but load is {}",
                plan.load[bin]
            )));
        }
        masks.push(Arc::new(AttnMask::new(n, n, allow)?));
    }
    Ok(masks)
}

/// Densely packed surviving tokens plus the maps needed to scatter back.
pub struct PackedBatch {
    pub plan: PackPlan,
    /// One [N, D] node per bin; padded tail rows are zero.
    pub bins: Vec<TensorId>,
    pub masks: Vec<Arc<AttnMask>>,
    /// Per source frame: kept patch indices, in original order.
    pub kept: Vec<Arc<Vec<usize>>>,
}

/// Gathers each frame's surviving tokens and scatters them into dense
/// bins. Survivors of one frame occupy a contiguous span at their
/// recorded offset; invalid positions hold zeros.
pub fn pack<R: Real>(
    tape: &mut Tape<R>,
    frame_tokens: &[TensorId],
    mask: &RetentionMask,
) -> Result<PackedBatch> {
    let counts = mask.frame_counts();
    let plan = pack_plan(&counts, mask.n_patches)?;
    pack_with_plan(tape, frame_tokens, mask, plan)
}

/// Scatters survivors according to an externally supplied plan. Any valid
/// placement works; the packed outputs must not depend on which bin a
/// frame landed in.
pub fn pack_with_plan<R: Real>(
    tape: &mut Tape<R>,
    frame_tokens: &[TensorId],
    mask: &RetentionMask,
    plan: PackPlan,
) -> Result<PackedBatch> {
    if frame_tokens.len() != mask.frames {
        return Err(Error::contract(format!(
            "{} frames of tokens vs mask over {}",
            frame_tokens.len(),
            mask.frames
        )));
    }
    let n = mask.n_patches;
    let dim = if frame_tokens.is_empty() {
        0
    } else {
        tape.shape(frame_tokens[0])[1]
    };
    for &ft in frame_tokens {
        if tape.shape(ft)[0] != n {
            return Err(Error::contract(format!(
                "frame node has {} rows, mask expects {}",
                tape.shape(ft)[0],
                n
            )));
        }
    }
    if plan.counts != mask.frame_counts() {
        return Err(Error::contract("plan counts disagree with mask"));
    }
    let kept: Vec<Arc<Vec<usize>>> = (0..mask.frames)
        .map(|t| Arc::new(mask.kept_patches(t)))
        .collect();

    let mut bins = Vec::with_capacity(plan.t_packed());
    for bin in 0..plan.t_packed() {
        let mut parts = Vec::new();
        for f in plan.frames_in_bin(bin) {
            parts.push(tape.gather_rows(frame_tokens[f], Arc::clone(&kept[f]))?);
        }
        let pad = n - plan.load[bin];
        if pad > 0 {
            parts.push(tape.zeros_leaf(vec![pad, dim]));
        }
        bins.push(tape.concat_rows(&parts)?);
    }
    let masks = build_attention_mask(&plan)?;
    Ok(PackedBatch {
        plan,
        bins,
        masks,
        kept,
    })
}

/// Inverse scatter: per-frame ragged survivor lists, original patch order.
/// Frames with nothing retained yield a [0, D] node.
pub fn unpack<R: Real>(tape: &mut Tape<R>, packed: &PackedBatch) -> Result<Vec<TensorId>> {
    let frames = packed.plan.counts.len();
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let count = packed.plan.counts[f];
        if count == 0 {
            let dim = if packed.bins.is_empty() {
                0
            } else {
                tape.shape(packed.bins[0])[1]
            };
            out.push(tape.zeros_leaf(vec![0, dim]));
            continue;
        }
        let bin = packed.plan.assign[f];
        let start = packed.plan.offset[f];
        let idx: Arc<Vec<usize>> = Arc::new((start..start + count).collect());
        out.push(tape.gather_rows(packed.bins[bin], idx)?);
    }
    Ok(out)
}

/// Exact minimum bin count by branch and bound. Test oracle only; refuses
/// more than 12 non-empty items.
pub fn optimal_bins(counts: &[usize], capacity: usize) -> Result<usize> {
    let mut items: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    if items.len() > 12 {
        return Err(Error::contract(format!(
            "optimal_bins is exhaustive; {} items exceed the limit of 12",
            items.len()
        )));
    }
    for &c in &items {
        if c > capacity {
            return Err(Error::contract(format!(
                "item {c} exceeds capacity {capacity}"
            )));
        }
    }
    if items.is_empty() {
        return Ok(0);
    }
    items.sort_unstable_by(|a, b| b.cmp(a));
    let total: usize = items.iter().sum();
    let lower = total.div_ceil(capacity);
    let mut best = items.len();
    let mut bins: Vec<usize> = Vec::new();

    fn search(
        items: &[usize],
        i: usize,
        bins: &mut Vec<usize>,
        capacity: usize,
        best: &mut usize,
        lower: usize,
    ) {
        if *best == lower {
            return;
        }
        if i == items.len() {
            *best = (*best).min(bins.len());
            return;
        }
        if bins.len() >= *best {
            return;
        }
        let mut tried = Vec::new();
        for b in 0..bins.len() {
            // Bins with identical load are interchangeable.
            if bins[b] + items[i] <= capacity && !tried.contains(&bins[b]) {
                tried.push(bins[b]);
                bins[b] += items[i];
                search(items, i + 1, bins, capacity, best, lower);
                bins[b] -= items[i];
            }
        }
        if bins.len() + 1 <= *best {
            bins.push(items[i]);
            search(items, i + 1, bins, capacity, best, lower);
            bins.pop();
        }
    }

    search(&items, 0, &mut bins, capacity, &mut best, lower);
    Ok(best)
}
