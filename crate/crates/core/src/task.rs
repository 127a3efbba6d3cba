//! Pruning baselines, the foreground-retention metric, and the toy
//! downstream classification head.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::auxloss::SimilarityMap;
use crate::config::BlockGeometry;
use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::packing::{drop_blocks_to_budget, RetentionMask};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor};

/// Number of end-quadrant classes.
pub const NUM_CLASSES: usize = 4;

/// Heuristic baseline: drops the most temporally similar pooled blocks
/// first, under the same budget, frame-0 and tie rules as score-based
/// selection (ties by ascending frame then block index).
pub fn heuristic_prune<R: Real>(
    sim: &SimilarityMap<R>,
    geo: &BlockGeometry,
    prune_ratio: u32,
    protect_first: bool,
) -> Result<RetentionMask> {
    if prune_ratio > 100 {
        return Err(Error::config(format!("prune ratio {prune_ratio} > 100")));
    }
    let t_frames = sim.frames();
    let m = sim.blocks();
    if m != geo.n_blocks() {
        return Err(Error::contract(format!(
            "similarity map has {m} blocks, geometry {}",
            geo.n_blocks()
        )));
    }
    let first = if protect_first { 1 } else { 0 };
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(t_frames * m);
    for t in first..t_frames {
        for b in 0..m {
            candidates.push((sim.sims.data()[t * m + b].as_f64(), t, b));
        }
    }
    // Highest similarity dropped first; ties by ascending (frame, block).
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("similarities are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let order: Vec<(usize, usize)> = candidates.iter().map(|&(_, t, b)| (t, b)).collect();
    Ok(drop_blocks_to_budget(t_frames, geo, &order, prune_ratio))
}

/// Random baseline: uniform block sample without replacement, seeded,
/// same budget and frame-0 rules.
pub fn random_prune(
    frames: usize,
    geo: &BlockGeometry,
    prune_ratio: u32,
    protect_first: bool,
    seed: u64,
) -> Result<RetentionMask> {
    if prune_ratio > 100 {
        return Err(Error::config(format!("prune ratio {prune_ratio} > 100")));
    }
    let first = if protect_first { 1 } else { 0 };
    let mut order: Vec<(usize, usize)> = (first..frames)
        .flat_map(|t| (0..geo.n_blocks()).map(move |b| (t, b)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(drop_blocks_to_budget(frames, geo, &order, prune_ratio))
}

/// Fraction of ground-truth foreground patches that survive pruning, over
/// frames 1..T-1. Defined as 1 when there is no foreground to preserve.
pub fn foreground_retention(mask: &RetentionMask, foreground: &[bool]) -> Result<f64> {
    let n = mask.n_patches;
    if foreground.len() != mask.frames * n {
        return Err(Error::contract(format!(
            "foreground mask has {} entries, expected {}",
            foreground.len(),
            mask.frames * n
        )));
    }
    let mut total = 0usize;
    let mut kept = 0usize;
    for t in 1..mask.frames {
        for p in 0..n {
            if foreground[t * n + p] {
                total += 1;
                if mask.kept(t, p) {
                    kept += 1;
                }
            }
        }
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(kept as f64 / total as f64)
}

/// Linear classifier over the mean of all surviving tokens. Pruning is
/// block-aligned and blocks share a size, so this equals mean-pooling the
/// surviving pooled tokens.
#[derive(Debug, Clone)]
pub struct TaskHeadParams<R> {
    pub w: Tensor<R>,
    pub b: Tensor<R>,
}

impl<R: Real> TaskHeadParams<R> {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        TaskHeadParams {
            w: Tensor::randn(vec![dim, NUM_CLASSES], R::from_f64(INIT_STD), rng),
            b: Tensor::zeros(vec![NUM_CLASSES]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<R>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<R>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TaskHeadNodes {
    pub w: TensorId,
    pub b: TensorId,
}

impl TaskHeadNodes {
    pub fn register<R: Real>(tape: &mut Tape<R>, p: &TaskHeadParams<R>) -> Self {
        TaskHeadNodes {
            w: tape.param(&p.w),
            b: tape.param(&p.b),
        }
    }
}

/// Logits over the surviving tokens: mean of all survivor rows through a
/// linear layer. With nothing retained the mean is defined as zero, so the
/// prediction falls back to the bias.
pub fn task_head_forward<R: Real>(
    tape: &mut Tape<R>,
    survivors: &[TensorId],
    head: TaskHeadNodes,
) -> Result<TensorId> {
    let dim = tape.shape(head.w)[0];
    let non_empty: Vec<TensorId> = survivors
        .iter()
        .copied()
        .filter(|&s| tape.shape(s)[0] > 0)
        .collect();
    let mean = if non_empty.is_empty() {
        tape.zeros_leaf(vec![1, dim])
    } else {
        let stacked = tape.concat_rows(&non_empty)?;
        let rows = tape.shape(stacked)[0];
        let group = std::sync::Arc::new(vec![(0..rows).collect::<Vec<usize>>()]);
        tape.group_mean_rows(stacked, group)?
    };
    let logits = tape.matmul(mean, head.w)?;
    let logits = tape.add_row_vec(logits, head.b)?;
    tape.reshape(logits, vec![NUM_CLASSES])
}

/// Cross-entropy task loss against the end-quadrant label.
pub fn task_loss<R: Real>(tape: &mut Tape<R>, logits: TensorId, label: u8) -> Result<TensorId> {
    tape.cross_entropy_logits(logits, label as usize)
}

pub fn predict<R: Real>(logits: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packing::{pack, retention_budget, select_retention, unpack};
    use crate::scorer::ScoreMap;

    fn geo() -> BlockGeometry {
        BlockGeometry::new(6, 3).unwrap()
    }

    fn sim_map(t: usize, sims: Vec<f64>) -> SimilarityMap<f64> {
        let s = Tensor::new(vec![t, 4], sims).unwrap();
        let mut targets = s.map(|v| (1.0 - v).clamp(0.0, 1.0));
        for i in 0..4 {
            targets.data_mut()[i] = 0.0;
        }
        SimilarityMap { sims: s, targets }
    }

    #[test]
    fn heuristic_on_identical_frames_drops_in_tie_break_order() {
        let sim = sim_map(3, vec![1.0; 12]);
        let mask = heuristic_prune(&sim, &geo(), 50, true).unwrap();
        assert_eq!(mask.retained_count(), retention_budget(108, 50));
        // 6 blocks dropped: all of frame 1, first two of frame 2.
        for b in 0..4 {
            assert!(!mask.kept(1, geo().block_patches[b][0]));
        }
        assert!(!mask.kept(2, geo().block_patches[0][0]));
        assert!(!mask.kept(2, geo().block_patches[1][0]));
        assert!(mask.kept(2, geo().block_patches[2][0]));
    }

    #[test]
    fn heuristic_keeps_the_moving_block() {
        // One dissimilar (moving) block among static ones.
        let mut sims = vec![0.99; 12];
        sims[4 + 2] = 0.1; // frame 1, block 2 moves
        let sim = sim_map(3, sims);
        let mask = heuristic_prune(&sim, &geo(), 50, true).unwrap();
        assert!(mask.kept(1, geo().block_patches[2][0]));
    }

    #[test]
    fn heuristic_k_zero_keeps_everything() {
        let sim = sim_map(2, vec![1.0; 8]);
        let mask = heuristic_prune(&sim, &geo(), 0, true).unwrap();
        assert_eq!(mask.retained_count(), 72);
    }

    #[test]
    fn random_prune_is_seed_deterministic() {
        let a = random_prune(4, &geo(), 50, true, 123).unwrap();
        let b = random_prune(4, &geo(), 50, true, 123).unwrap();
        assert_eq!(a, b);
        let c = random_prune(4, &geo(), 50, true, 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_prune_k_zero_full() {
        let mask = random_prune(4, &geo(), 0, true, 5).unwrap();
        assert_eq!(mask.retained_count(), 4 * 36);
    }

    #[test]
    fn random_prune_mean_block_retention_tracks_budget_ratio() {
        // Mean retention over ALL blocks (frame 0 included) approaches the
        // budget ratio; per-candidate retention is lower to compensate for
        // the protected first frame.
        let t = 4;
        let k = 50;
        let mut total_ratio = 0.0;
        let trials = 10_000;
        for seed in 0..trials {
            let mask = random_prune(t, &geo(), k, true, seed).unwrap();
            total_ratio += mask.retained_count() as f64 / (t * 36) as f64;
        }
        let mean = total_ratio / trials as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean retention {mean}");
    }

    #[test]
    fn all_modes_share_budget_and_frame_zero_rules() {
        let values: Vec<f64> = (0..16).map(|i| 0.05 + 0.05 * i as f64).collect();
        let scores = ScoreMap::from_pooled(Tensor::new(vec![4, 4], values).unwrap(), &geo())
            .unwrap();
        let sims = sim_map(4, (0..16).map(|i| 1.0 - 0.05 * i as f64).collect());
        for k in [0u32, 25, 50, 75] {
            let by_score = select_retention(&scores, &geo(), k, true).unwrap();
            let by_sim = heuristic_prune(&sims, &geo(), k, true).unwrap();
            let by_rng = random_prune(4, &geo(), k, true, 9).unwrap();
            let budget = retention_budget(4 * 36, k);
            for mask in [&by_score, &by_sim, &by_rng] {
                assert_eq!(mask.retained_count(), by_score.retained_count());
                assert!(mask.retained_count() <= budget);
                assert!((0..36).all(|p| mask.kept(0, p)));
                assert!(mask.is_block_aligned(&geo()));
            }
        }
    }

    #[test]
    fn foreground_retention_trivial_cases() {
        let mask = RetentionMask::full(3, 36);
        let fg = vec![true; 3 * 36];
        assert_eq!(foreground_retention(&mask, &fg).unwrap(), 1.0);

        // Dropping only background leaves the metric at 1.
        let mut keep = vec![true; 3 * 36];
        let mut fg2 = vec![false; 3 * 36];
        for t in 1..3 {
            fg2[t * 36 + 7] = true;
            keep[t * 36 + 20] = false;
        }
        let dropped_bg = RetentionMask::from_keep(3, 36, keep).unwrap();
        assert_eq!(foreground_retention(&dropped_bg, &fg2).unwrap(), 1.0);

        // No foreground at all: defined as 1.
        let none = vec![false; 3 * 36];
        assert_eq!(foreground_retention(&mask, &none).unwrap(), 1.0);
    }

    #[test]
    fn random_mask_at_half_budget_retains_about_half_the_foreground() {
        let t = 5;
        let mut fg = vec![false; t * 36];
        // Foreground in every non-first frame: block 3 (9 patches each).
        for ti in 1..t {
            for &p in &geo().block_patches[3] {
                fg[ti * 36 + p] = true;
            }
        }
        let mut acc = 0.0;
        let trials = 4000;
        for seed in 0..trials {
            let mask = random_prune(t, &geo(), 50, true, seed).unwrap();
            acc += foreground_retention(&mask, &fg).unwrap();
        }
        let mean = acc / trials as f64;
        // Candidate retention for T=5, k=50: (90-36)/144 = 0.45 of blocks 1..T.
        let expected = (retention_budget(t * 36, 50) - 36) as f64 / ((t - 1) * 36) as f64;
        assert!(
            (mean - expected).abs() < 0.02,
            "mean {mean} vs expected {expected}"
        );
    }

    #[test]
    fn task_head_is_invariant_to_packing_layout() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let head = TaskHeadParams::<f64>::init(8, &mut rng);
        let frames: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::randn(vec![36, 8], 1.0, &mut rng))
            .collect();
        let keep: Vec<bool> = (0..4 * 36).map(|i| i % 3 != 0).collect();
        let mask = RetentionMask::from_keep(4, 36, keep).unwrap();

        // Path A: through pack/unpack.
        let mut tape_a = Tape::new();
        let head_a = TaskHeadNodes::register(&mut tape_a, &head);
        let ids: Vec<TensorId> = frames.iter().map(|f| tape_a.leaf(f.clone())).collect();
        let packed = pack(&mut tape_a, &ids, &mask).unwrap();
        let survivors = unpack(&mut tape_a, &packed).unwrap();
        let logits_a = task_head_forward(&mut tape_a, &survivors, head_a).unwrap();

        // Path B: direct per-frame gather, no packing at all.
        let mut tape_b = Tape::new();
        let head_b = TaskHeadNodes::register(&mut tape_b, &head);
        let ids_b: Vec<TensorId> = frames.iter().map(|f| tape_b.leaf(f.clone())).collect();
        let direct: Vec<TensorId> = (0..4)
            .map(|t| {
                let idx = std::sync::Arc::new(mask.kept_patches(t));
                tape_b.gather_rows(ids_b[t], idx).unwrap()
            })
            .collect();
        let logits_b = task_head_forward(&mut tape_b, &direct, head_b).unwrap();

        for (a, b) in tape_a.data(logits_a).iter().zip(tape_b.data(logits_b)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_survivor_set_falls_back_to_bias() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut head = TaskHeadParams::<f64>::init(8, &mut rng);
        head.b = Tensor::new(vec![4], vec![0.1, 0.9, 0.2, 0.3]).unwrap();
        let mut tape = Tape::new();
        let nodes = TaskHeadNodes::register(&mut tape, &head);
        let logits = task_head_forward(&mut tape, &[], nodes).unwrap();
        assert_eq!(tape.data(logits), head.b.data());
        assert_eq!(predict(tape.data(logits)), 1);
    }
}
