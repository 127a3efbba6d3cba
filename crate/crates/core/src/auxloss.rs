//! Neighboring-frame cosine-similarity targets, the per-element MSE
//! alignment loss, and the combined training objective.
//!
//! Targets are treated as constants: gradients flow into the scores only,
//! never through the pooled features that produced the similarities.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor};

/// Per-block neighbor similarities and the alignment targets derived from
/// them. Row 0 is defined (sims = 1, targets = 0) but never trained on.
#[derive(Debug, Clone)]
pub struct SimilarityMap<R> {
    /// [T, M]; sims[t][i] compares pooled block i of frames t-1 and t.
    pub sims: Tensor<R>,
    /// clamp(1 - sims, 0, 1), the score regression targets.
    pub targets: Tensor<R>,
}

impl<R: Real> SimilarityMap<R> {
    pub fn frames(&self) -> usize {
        self.sims.shape()[0]
    }

    pub fn blocks(&self) -> usize {
        self.sims.shape()[1]
    }
}

/// Cosine similarity between corresponding pooled blocks of adjacent
/// frames, computed over L2-normalized features with ε-guarded norms.
pub fn neighbor_cosine<R: Real>(pooled: &[Tensor<R>]) -> Result<SimilarityMap<R>> {
    if pooled.is_empty() {
        return Err(Error::contract("neighbor_cosine: no frames"));
    }
    let t = pooled.len();
    let m = pooled[0].shape()[0];
    let mut sims = Tensor::full(vec![t, m], R::one());
    let mut tape = Tape::new();
    for ti in 1..t {
        if pooled[ti].shape() != pooled[0].shape() {
            return Err(Error::contract("neighbor_cosine: ragged pooled input"));
        }
        let prev = tape.leaf(pooled[ti - 1].clone());
        let cur = tape.leaf(pooled[ti].clone());
        let pn = tape.l2_normalize_rows(prev)?;
        let cn = tape.l2_normalize_rows(cur)?;
        let cos = tape.cosine_rows(pn, cn)?;
        sims.data_mut()[ti * m..(ti + 1) * m].copy_from_slice(tape.data(cos));
    }
    let tol = R::from_f64(1.0 + 1e-9);
    if sims.data().iter().any(|&s| s.abs() > tol) {
        return Err(Error::contract("cosine similarity left [-1, 1]"));
    }
    let mut targets = sims.map(|s| (R::one() - s).max(R::zero()).min(R::one()));
    for i in 0..m {
        targets.data_mut()[i] = R::zero();
    }
    Ok(SimilarityMap { sims, targets })
}

/// Per-element squared error against the clamped targets plus the scaled
/// mean that enters the total loss.
pub struct SimilarityLoss<R> {
    /// [T, M] element losses with row 0 forced to zero.
    pub per_element: Tensor<R>,
    /// (w²/(T·N)) · ΣΣ per_element, on the tape.
    pub mean_scaled: TensorId,
}

/// scores: [T, M] node. The scaling constant w²/(T·N) turns the double sum
/// into an arithmetic mean over pooled elements (frame 0 contributing its
/// defined zeros).
pub fn similarity_loss<R: Real>(
    tape: &mut Tape<R>,
    scores: TensorId,
    sim: &SimilarityMap<R>,
    pool_width: usize,
    n_patches: usize,
) -> Result<SimilarityLoss<R>> {
    let t = sim.frames();
    let m = sim.blocks();
    if tape.shape(scores) != [t, m] {
        return Err(Error::ShapeMismatch {
            op: "similarity_loss",
            lhs: tape.shape(scores).to_vec(),
            rhs: vec![t, m],
        });
    }
    let targets = tape.leaf(sim.targets.clone());
    let diff = tape.sub(scores, targets)?;
    let sq = tape.mul(diff, diff)?;
    let frame0_mask = tape.leaf(Tensor::from_fn(vec![t, m], |i| {
        if i < m {
            R::zero()
        } else {
            R::one()
        }
    }));
    let masked = tape.mul(sq, frame0_mask)?;
    let per_element = tape.value(masked);
    let total = tape.sum(masked)?;
    let w2 = (pool_width * pool_width) as f64;
    let mean_scaled = tape.scale(total, R::from_f64(w2 / (t * n_patches) as f64))?;
    Ok(SimilarityLoss {
        per_element,
        mean_scaled,
    })
}

/// Total objective: task loss plus the scaled similarity mean, weight 1.
pub fn total_loss<R: Real>(
    tape: &mut Tape<R>,
    task: TensorId,
    sim_mean: TensorId,
) -> Result<TensorId> {
    if tape.data(task).len() != 1 || tape.data(sim_mean).len() != 1 {
        return Err(Error::contract("total_loss expects scalar terms"));
    }
    tape.add(task, sim_mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{compare_grads, finite_diff_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_frames_give_unit_similarity_and_zero_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let a = Tensor::<f64>::randn(vec![4, 8], 1.0, &mut rng);
        let map = neighbor_cosine(&[a.clone(), a]).unwrap();
        for i in 0..4 {
            assert!((map.sims.data()[4 + i] - 1.0).abs() < 1e-12);
            assert!(map.targets.data()[4 + i].abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_features_give_zero_similarity_and_unit_target() {
        let mut a = Tensor::<f64>::zeros(vec![2, 4]);
        let mut b = Tensor::<f64>::zeros(vec![2, 4]);
        a.data_mut()[0] = 1.0;
        b.data_mut()[1] = 1.0;
        a.data_mut()[4 + 2] = 2.0;
        b.data_mut()[4 + 3] = 3.0;
        let map = neighbor_cosine(&[a, b]).unwrap();
        for i in 0..2 {
            assert!(map.sims.data()[2 + i].abs() < 1e-12);
            assert!((map.targets.data()[2 + i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let frames: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::randn(vec![4, 8], 1.0, &mut rng))
            .collect();
        let map = neighbor_cosine(&frames).unwrap();
        for t in 1..3 {
            for i in 0..4 {
                let a = &frames[t - 1].data()[i * 8..(i + 1) * 8];
                let b = &frames[t].data()[i * 8..(i + 1) * 8];
                let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = dot / (na * nb);
                let got = map.sims.data()[t * 4 + i];
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let a = Tensor::<f64>::randn(vec![4, 8], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![4, 8], 1.0, &mut rng);
        let base = neighbor_cosine(&[a.clone(), b.clone()]).unwrap();
        for c in [0.001, 0.37, 250.0] {
            let scaled = neighbor_cosine(&[a.map(|v| v * c), b.map(|v| v * c)]).unwrap();
            for (x, y) in base.sims.data().iter().zip(scaled.sims.data()) {
                assert!((x - y).abs() < 1e-9, "scale {c}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn zero_norm_rows_are_guarded() {
        let zero = Tensor::<f64>::zeros(vec![2, 4]);
        let map = neighbor_cosine(&[zero.clone(), zero]).unwrap();
        assert!(map.sims.is_finite());
    }

    fn toy_map(t: usize, m: usize, targets: Vec<f64>) -> SimilarityMap<f64> {
        let sims = Tensor::from_fn(vec![t, m], |i| 1.0 - targets[i]);
        let mut tg = Tensor::new(vec![t, m], targets).unwrap();
        for i in 0..m {
            tg.data_mut()[i] = 0.0;
        }
        SimilarityMap { sims, targets: tg }
    }

    #[test]
    fn perfect_scores_give_zero_loss() {
        let map = toy_map(2, 3, vec![0.0, 0.0, 0.0, 0.2, 0.5, 0.9]);
        let mut tape = Tape::new();
        let scores = tape.leaf(map.targets.clone());
        let loss = similarity_loss(&mut tape, scores, &map, 3, 36).unwrap();
        assert_eq!(tape.data(loss.mean_scaled), &[0.0]);
    }

    #[test]
    fn half_score_against_zero_target_costs_a_quarter() {
        let map = toy_map(2, 2, vec![0.0, 0.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let scores = tape.leaf(Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.5, 0.0]).unwrap());
        let loss = similarity_loss(&mut tape, scores, &map, 3, 18).unwrap();
        assert!((loss.per_element.data()[2] - 0.25).abs() < 1e-15);
        // Scaled mean: 9/(2*18) * 0.25
        let want = 9.0 / 36.0 * 0.25;
        assert!((tape.data(loss.mean_scaled)[0] - want).abs() < 1e-15);
    }

    #[test]
    fn frame_zero_losses_are_forced_to_zero() {
        let map = toy_map(2, 2, vec![0.0, 0.0, 0.1, 0.2]);
        let mut tape = Tape::new();
        // Scores wildly off on frame 0; loss must ignore them.
        let scores = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.1, 0.2]).unwrap());
        let loss = similarity_loss(&mut tape, scores, &map, 3, 18).unwrap();
        assert_eq!(&loss.per_element.data()[..2], &[0.0, 0.0]);
        assert_eq!(tape.data(loss.mean_scaled), &[0.0]);
    }

    #[test]
    fn matches_loop_oracle_with_scaling_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let t = 3;
        let m = 4;
        let w = 3;
        let n = 36;
        let targets: Vec<f64> = (0..t * m)
            .map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0))
            .collect();
        let map = toy_map(t, m, targets);
        let svals: Vec<f64> = (0..t * m)
            .map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0))
            .collect();
        let mut tape = Tape::new();
        let scores = tape.leaf(Tensor::new(vec![t, m], svals.clone()).unwrap());
        let loss = similarity_loss(&mut tape, scores, &map, w, n).unwrap();

        let mut acc = 0.0;
        for ti in 1..t {
            for i in 0..m {
                let d = svals[ti * m + i] - map.targets.data()[ti * m + i];
                acc += d * d;
            }
        }
        let want = (w * w) as f64 / (t * n) as f64 * acc;
        assert!((tape.data(loss.mean_scaled)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_wrt_scores_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let map = toy_map(
            3,
            4,
            (0..12).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect(),
        );
        let scores = Tensor::<f64>::from_fn(vec![3, 4], |_| {
            rand::Rng::gen_range(&mut rng, 0.05..0.95)
        });

        let mut tape = Tape::new();
        let is = tape.param(&scores);
        let loss = similarity_loss(&mut tape, is, &map, 3, 36).unwrap();
        tape.backward(loss.mean_scaled).unwrap();
        let analytic = vec![Tensor::new(vec![3, 4], tape.grad(is).unwrap().to_vec()).unwrap()];

        let numeric = finite_diff_grad(
            &mut |p: &[Tensor<f64>]| {
                let mut t = Tape::new();
                let is = t.leaf(p[0].clone());
                let loss = similarity_loss(&mut t, is, &map, 3, 36)?;
                Ok(t.data(loss.mean_scaled)[0])
            },
            &[scores],
            1e-6,
        )
        .unwrap();
        let cmp = compare_grads(&analytic, &numeric, 1e-9).unwrap();
        assert!(cmp.within(1e-6), "max rel err {}", cmp.max_rel_err);
    }

    #[test]
    fn total_loss_is_a_plain_sum() {
        let mut tape = Tape::<f64>::new();
        let task = tape.leaf(Tensor::scalar(0.3));
        let sim = tape.leaf(Tensor::scalar(0.2));
        let total = total_loss(&mut tape, task, sim).unwrap();
        assert!((tape.data(total)[0] - 0.5).abs() < 1e-15);

        let zero = tape.leaf(Tensor::scalar(0.0));
        let only_task = total_loss(&mut tape, task, zero).unwrap();
        assert_eq!(tape.data(only_task)[0], 0.3);
        let only_sim = total_loss(&mut tape, zero, sim).unwrap();
        assert_eq!(tape.data(only_sim)[0], 0.2);
    }
}
