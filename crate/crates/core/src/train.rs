//! Training loop with per-group learning rates, evaluation sweeps, and the
//! wall-clock throughput benchmark.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{BlockGeometry, PipelineConfig, PruneMode};
use crate::error::{Error, Result};
use crate::pipeline::{
    forward_video, register_model, ForwardOptions, ModelParams, PathVariant,
};
use crate::synthetic::Dataset;
use crate::tape::Tape;
use crate::task::predict;
use crate::tensor::Real;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SHUFFLE_SALT: u64 = 0x51AF_F1E5_EED5_0000;

/// Adam with one state slot per parameter tensor, in registration order.
/// Scorer parameters use the dedicated scorer learning rate.
struct Adam<R> {
    step: usize,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
    lrs: Vec<R>,
}

impl<R: Real> Adam<R> {
    fn new(params: &ModelParams<R>, lr_main: f64, lr_scorer: f64) -> Self {
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut lrs = Vec::new();
        params.visit(&mut |name, t| {
            m.push(vec![R::zero(); t.numel()]);
            v.push(vec![R::zero(); t.numel()]);
            lrs.push(R::from_f64(if name.starts_with("scorer.") {
                lr_scorer
            } else {
                lr_main
            }));
        });
        Adam {
            step: 0,
            m,
            v,
            lrs,
        }
    }

    fn update(&mut self, params: &mut ModelParams<R>, grads: &[Vec<R>]) {
        self.step += 1;
        let b1 = R::from_f64(ADAM_BETA1);
        let b2 = R::from_f64(ADAM_BETA2);
        let eps = R::from_f64(ADAM_EPS);
        let bc1 = R::from_f64(1.0 - ADAM_BETA1.powi(self.step as i32));
        let bc2 = R::from_f64(1.0 - ADAM_BETA2.powi(self.step as i32));
        let mut slot = 0;
        params.visit_mut(&mut |_, t| {
            let g = &grads[slot];
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let lr = self.lrs[slot];
            for ((p, &gi), (mi, vi)) in t
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (R::one() - b1) * gi;
                *vi = b2 * *vi + (R::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
            slot += 1;
        });
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Drop the task head from the objective; train on the similarity
    /// alignment alone.
    pub aux_only: bool,
    /// Print a progress line every 100 steps.
    pub verbose: bool,
}

pub struct StepMetrics {
    pub step: usize,
    pub task_loss: f64,
    pub sim_loss: f64,
    pub total: f64,
    pub retained_ratio: f64,
    pub wallclock_ms: f64,
}

pub struct TrainResult<R> {
    pub params: ModelParams<R>,
    pub metrics: Vec<StepMetrics>,
}

pub const METRICS_SCHEMA: &str = "# stts-metrics v1";

/// Serializes metrics to CSV. Every column except wallclock_ms is a pure
/// function of the seed.
pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_SCHEMA);
    out.push('\n');
    out.push_str("step,task_loss,sim_loss,total,retained_ratio,wallclock_ms\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            m.step, m.task_loss, m.sim_loss, m.total, m.retained_ratio, m.wallclock_ms
        ));
    }
    out
}

/// Stable per-(step, clip) seed for the random-prune mode.
fn prune_seed(base: u64, step: usize, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ (index as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7)
}

pub fn train<R: Real>(
    cfg: &PipelineConfig,
    dataset: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainResult<R>> {
    cfg.validate()?;
    if dataset.videos.is_empty() && cfg.steps > 0 {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let geo = BlockGeometry::new(cfg.grid(), cfg.pool_width)?;
    let mut params = ModelParams::<R>::init(cfg, cfg.seed)?;
    let mut adam = Adam::new(&params, cfg.lr_main, cfg.lr_scorer);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let started = Instant::now();
        // Seeded epoch shuffling; refill when exhausted.
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..dataset.videos.len()).collect();
                order.shuffle(&mut order_rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }

        let mut tape = Tape::new();
        let nodes = register_model(&mut tape, &params);
        let mut loss_ids = Vec::with_capacity(batch.len());
        let mut task_acc = 0.0;
        let mut sim_acc = 0.0;
        let mut ratio_acc = 0.0;
        for &vi in &batch {
            let video = &dataset.videos[vi];
            let out = forward_video(
                &mut tape,
                &nodes,
                cfg,
                &geo,
                &video.batch,
                video.label,
                &ForwardOptions {
                    variant: PathVariant::Packed,
                    mask_override: None,
                    prune_seed: prune_seed(cfg.seed, step, vi),
                    aux_only: opts.aux_only,
                },
            )
            .map_err(|e| Error::Training {
                step,
                reason: e.to_string(),
            })?;
            task_acc += out.task_value.as_f64();
            sim_acc += out.sim_value.as_f64();
            ratio_acc += out.mask.achieved_ratio();
            loss_ids.push(out.total);
        }
        let mut total = loss_ids[0];
        for &l in &loss_ids[1..] {
            total = tape.add(total, l)?;
        }
        let total = tape.scale(total, R::from_f64(1.0 / batch.len() as f64))?;
        let total_value = tape.data(total)[0].as_f64();
        if !total_value.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("non-finite loss {total_value}"),
            });
        }
        tape.backward(total).map_err(|e| Error::Training {
            step,
            reason: e.to_string(),
        })?;

        let mut grads = Vec::with_capacity(nodes.ordered.len());
        for (name, id) in &nodes.ordered {
            let g = tape.grad_or_zeros(*id);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training {
                    step,
                    reason: format!("non-finite gradient for {name}"),
                });
            }
            grads.push(g);
        }
        adam.update(&mut params, &grads);

        let m = StepMetrics {
            step,
            task_loss: task_acc / batch.len() as f64,
            sim_loss: sim_acc / batch.len() as f64,
            total: total_value,
            retained_ratio: ratio_acc / batch.len() as f64,
            wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if opts.verbose && (step % 100 == 0 || step + 1 == cfg.steps) {
            eprintln!(
                "step {:>5}  task {:.4}  sim {:.5}  total {:.4}  retained {:.3}",
                m.step, m.task_loss, m.sim_loss, m.total, m.retained_ratio
            );
        }
        metrics.push(m);
    }
    Ok(TrainResult { params, metrics })
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub mode: PruneMode,
    pub k: u32,
    pub accuracy: f64,
    pub fg_retention: f64,
}

pub const EVAL_SCHEMA: &str = "# stts-eval v1";

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::new();
    out.push_str(EVAL_SCHEMA);
    out.push('\n');
    out.push_str("mode,k,accuracy,fg_retention\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.mode, r.k, r.accuracy, r.fg_retention
        ));
    }
    out
}

/// Accuracy and foreground retention per (mode, k) cell over a dataset.
pub fn evaluate<R: Real>(
    params: &ModelParams<R>,
    cfg: &PipelineConfig,
    dataset: &Dataset,
    modes: &[PruneMode],
    ks: &[u32],
) -> Result<Vec<EvalRow>> {
    let geo = BlockGeometry::new(cfg.grid(), cfg.pool_width)?;
    let mut rows = Vec::new();
    for &mode in modes {
        for &k in ks {
            let mut cell_cfg = cfg.clone();
            cell_cfg.prune_mode = mode;
            cell_cfg.prune_ratio = k;
            let mut correct = 0usize;
            let mut fg_acc = 0.0;
            for (vi, video) in dataset.videos.iter().enumerate() {
                let mut tape = Tape::new();
                let nodes = register_model(&mut tape, params);
                let out = forward_video(
                    &mut tape,
                    &nodes,
                    &cell_cfg,
                    &geo,
                    &video.batch,
                    video.label,
                    &ForwardOptions {
                        variant: PathVariant::Packed,
                        mask_override: None,
                        prune_seed: prune_seed(cfg.seed ^ u64::from(k), 0, vi),
                        aux_only: false,
                    },
                )?;
                if predict(&out.logits) == video.label as usize {
                    correct += 1;
                }
                fg_acc += crate::task::foreground_retention(&out.mask, &video.foreground)?;
            }
            let n = dataset.videos.len().max(1);
            rows.push(EvalRow {
                mode,
                k,
                accuracy: correct as f64 / n as f64,
                fg_retention: fg_acc / n as f64,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub k: u32,
    pub frames: usize,
    pub unpruned_ms: f64,
    pub packed_ms: f64,
    pub masked_ms: f64,
    pub speedup_packed: f64,
    pub speedup_masked: f64,
    pub median_t_packed: usize,
}

pub const BENCH_SCHEMA: &str = "# stts-bench v1";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    out.push_str(BENCH_SCHEMA);
    out.push('\n');
    out.push_str(
        "k,frames,unpruned_ms,packed_ms,masked_ms,speedup_packed,speedup_masked,t_packed\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{}\n",
            r.k,
            r.frames,
            r.unpruned_ms,
            r.packed_ms,
            r.masked_ms,
            r.speedup_packed,
            r.speedup_masked,
            r.median_t_packed
        ));
    }
    out
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// One timed forward+backward on a fresh tape. Input generation and
/// parameter ownership stay outside the timed region; registration and
/// packing are part of the measured pipeline.
fn timed_iteration<R: Real>(
    params: &ModelParams<R>,
    cfg: &PipelineConfig,
    geo: &BlockGeometry,
    video: &crate::synthetic::SyntheticVideo,
    variant: PathVariant,
) -> Result<(f64, usize)> {
    let started = Instant::now();
    let mut tape = Tape::new();
    let nodes = register_model(&mut tape, params);
    let out = forward_video(
        &mut tape,
        &nodes,
        cfg,
        geo,
        &video.batch,
        video.label,
        &ForwardOptions {
            variant,
            mask_override: None,
            prune_seed: 11,
            aux_only: false,
        },
    )?;
    tape.backward(out.total)?;
    Ok((started.elapsed().as_secs_f64() * 1e3, out.t_packed))
}

/// Wall-clock medians for unpruned, packed, and masked-only execution at
/// each pruning ratio. Variants are interleaved within a repetition so
/// machine drift cancels in the ratios. `warmup` iterations (at least 3)
/// are excluded from the medians.
pub fn run_bench<R: Real>(
    cfg: &PipelineConfig,
    ks: &[u32],
    warmup: usize,
    reps: usize,
) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let warmup = warmup.max(3);
    if reps == 0 {
        return Err(Error::config("bench needs at least one timed repetition"));
    }
    let geo = BlockGeometry::new(cfg.grid(), cfg.pool_width)?;
    let params = ModelParams::<R>::init(cfg, cfg.seed)?;
    let spec = crate::synthetic::SyntheticVideoSpec {
        frame_size: cfg.frame_size,
        patch_size: cfg.patch_size,
        frames: cfg.frames,
        sprite_size: (cfg.frame_size / 3).max(2),
        ..Default::default()
    };
    let video = crate::synthetic::gen_synthetic(&spec, cfg.seed)?;

    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut cell_cfg = cfg.clone();
        cell_cfg.prune_ratio = k;
        cell_cfg.prune_mode = PruneMode::Stts;
        let mut samples: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut t_packed_samples = Vec::new();
        for rep in 0..warmup + reps {
            for (slot, variant) in [
                PathVariant::Unpruned,
                PathVariant::Packed,
                PathVariant::MaskedOnly,
            ]
            .into_iter()
            .enumerate()
            {
                let (ms, t_packed) = timed_iteration(&params, &cell_cfg, &geo, &video, variant)?;
                if rep >= warmup {
                    samples[slot].push(ms);
                    if variant == PathVariant::Packed {
                        t_packed_samples.push(t_packed);
                    }
                }
            }
        }
        let unpruned_ms = median(samples[0].clone());
        let packed_ms = median(samples[1].clone());
        let masked_ms = median(samples[2].clone());
        t_packed_samples.sort_unstable();
        rows.push(BenchRow {
            k,
            frames: cfg.frames,
            unpruned_ms,
            packed_ms,
            masked_ms,
            speedup_packed: unpruned_ms / packed_ms,
            speedup_masked: unpruned_ms / masked_ms,
            median_t_packed: t_packed_samples[t_packed_samples.len() / 2],
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_dataset, SyntheticVideoSpec};

    fn tiny_cfg() -> PipelineConfig {
        PipelineConfig {
            frame_size: 12,
            patch_size: 4,
            frames: 3,
            dim: 8,
            heads: 2,
            layers: 5,
            inject_layer: 3,
            pool_width: 3,
            prune_ratio: 34,
            steps: 3,
            batch_size: 2,
            ..Default::default()
        }
    }

    fn tiny_dataset(count: usize) -> Dataset {
        let spec = SyntheticVideoSpec {
            frame_size: 12,
            patch_size: 4,
            frames: 3,
            sprite_size: 4,
            ..Default::default()
        };
        generate_dataset(&spec, count, 5).unwrap()
    }

    #[test]
    fn zero_steps_returns_initial_parameters() {
        let mut cfg = tiny_cfg();
        cfg.steps = 0;
        let ds = tiny_dataset(2);
        let result = train::<f64>(&cfg, &ds, &TrainOptions::default()).unwrap();
        let init = ModelParams::<f64>::init(&cfg, cfg.seed).unwrap();
        let mut equal = true;
        init.visit(&mut |name, t| {
            result.params.visit(&mut |n2, t2| {
                if n2 == name {
                    equal &= t.data() == t2.data();
                }
            });
        });
        assert!(equal);
        assert!(result.metrics.is_empty());
    }

    #[test]
    fn no_pruning_keeps_retained_ratio_at_one() {
        let mut cfg = tiny_cfg();
        cfg.prune_mode = PruneMode::None;
        cfg.prune_ratio = 0;
        let ds = tiny_dataset(3);
        let result = train::<f32>(&cfg, &ds, &TrainOptions::default()).unwrap();
        assert!(result.metrics.iter().all(|m| m.retained_ratio == 1.0));
    }

    #[test]
    fn identical_seeds_replay_identical_metrics() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset(4);
        let a = train::<f32>(&cfg, &ds, &TrainOptions::default()).unwrap();
        let b = train::<f32>(&cfg, &ds, &TrainOptions::default()).unwrap();
        let strip = |csv: &str| -> String {
            csv.lines()
                .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_else(|| l.to_string()))
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(strip(&metrics_csv(&a.metrics)), strip(&metrics_csv(&b.metrics)));
    }

    #[test]
    fn training_reduces_the_loss_on_a_tiny_problem() {
        let mut cfg = tiny_cfg();
        cfg.steps = 60;
        cfg.batch_size = 2;
        cfg.lr_main = 3e-3;
        let ds = tiny_dataset(4);
        let result = train::<f64>(&cfg, &ds, &TrainOptions::default()).unwrap();
        let first = result.metrics.first().unwrap().total;
        let last = result.metrics.last().unwrap().total;
        assert!(last < first, "loss did not drop: {first} -> {last}");
    }

    #[test]
    fn evaluate_produces_identical_rows_at_k_zero() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset(4);
        let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let rows = evaluate(
            &params,
            &cfg,
            &ds,
            &[PruneMode::Stts, PruneMode::Heuristic, PruneMode::Random],
            &[0],
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows[1..] {
            assert_eq!(r.accuracy, rows[0].accuracy);
            assert_eq!(r.fg_retention, rows[0].fg_retention);
        }
        assert_eq!(rows[0].fg_retention, 1.0);
    }

    #[test]
    fn bench_rows_carry_finite_medians() {
        let mut cfg = tiny_cfg();
        cfg.layers = 6;
        let rows = run_bench::<f32>(&cfg, &[0, 50], 3, 2).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.unpruned_ms.is_finite() && r.unpruned_ms > 0.0);
            assert!(r.packed_ms.is_finite() && r.packed_ms > 0.0);
            assert!(r.masked_ms.is_finite() && r.masked_ms > 0.0);
        }
        assert_eq!(rows[0].k, 0);
        assert!(rows[1].median_t_packed <= cfg.frames);
    }
}
