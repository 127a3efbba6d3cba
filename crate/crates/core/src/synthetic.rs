//! Synthetic sprite videos with per-patch foreground ground truth, plus
//! the on-disk dataset format.
//!
//! Each clip shows a textured sprite drifting at constant velocity over a
//! static textured background with per-frame pixel noise. The sprite
//! starts near the center and ends inside one of the four quadrants; the
//! end quadrant is the class label. The per-patch foreground mask marks
//! every patch the sprite's bounding box touches.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::FrameBatch;
use crate::error::{Error, Result};

/// Generator parameters. Textures are shared by every clip of a dataset;
/// motion and noise vary per clip seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideoSpec {
    pub frame_size: usize,
    pub patch_size: usize,
    pub frames: usize,
    pub sprite_size: usize,
    /// Per-axis speed cap in pixels per frame. Zero pins the sprite.
    pub max_speed: f64,
    pub noise_amp: f32,
    pub texture_seed: u64,
    pub bg_seed: u64,
}

impl Default for SyntheticVideoSpec {
    fn default() -> Self {
        SyntheticVideoSpec {
            frame_size: 24,
            patch_size: 4,
            frames: 8,
            sprite_size: 8,
            max_speed: 1.2,
            noise_amp: 0.05,
            texture_seed: 7,
            bg_seed: 13,
        }
    }
}

impl SyntheticVideoSpec {
    pub fn grid(&self) -> usize {
        self.frame_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.frame_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "frame size {} not divisible by patch size {}",
                self.frame_size, self.patch_size
            )));
        }
        if self.frames == 0 {
            return Err(Error::config("need at least one frame"));
        }
        if self.sprite_size == 0 || self.sprite_size >= self.frame_size {
            return Err(Error::config(format!(
                "sprite size {} does not fit a {} px frame",
                self.sprite_size, self.frame_size
            )));
        }
        // Quadrant targets need clearance on both sides of the center lines.
        let half = self.frame_size as f64 / 2.0;
        let lo = self.sprite_size as f64 / 2.0;
        let hi = self.frame_size as f64 - self.sprite_size as f64 / 2.0;
        if half - 2.5 <= lo || half + 2.5 >= hi {
            return Err(Error::config(
                "sprite too large to land clearly inside a quadrant",
            ));
        }
        Ok(())
    }
}

/// One generated clip: frames, label, and the per-patch foreground mask
/// (frame-major, patch row-major).
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub batch: FrameBatch,
    pub label: u8,
    pub foreground: Vec<bool>,
    /// Integer top-left sprite position per frame, for the rasterizer oracle.
    pub sprite_pos: Vec<(usize, usize)>,
}

fn bg_texture(spec: &SyntheticVideoSpec) -> Vec<f32> {
    // Blocky low-contrast field: 4 px cells.
    let side = spec.frame_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.bg_seed);
    let cells = side.div_ceil(4);
    let cell_vals: Vec<f32> = (0..cells * cells)
        .map(|_| rng.gen_range(0.30..0.60))
        .collect();
    let mut tex = vec![0.0f32; side * side];
    for y in 0..side {
        for x in 0..side {
            tex[y * side + x] = cell_vals[(y / 4) * cells + (x / 4)];
        }
    }
    tex
}

fn sprite_texture(spec: &SyntheticVideoSpec) -> Vec<f32> {
    // High-contrast checker with jitter, visually distinct from the field.
    let s = spec.sprite_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    let mut tex = vec![0.0f32; s * s];
    for y in 0..s {
        for x in 0..s {
            let base = if (x / 2 + y / 2) % 2 == 0 { 0.9 } else { 0.08 };
            let jitter: f32 = rng.gen_range(-0.06..0.06);
            tex[y * s + x] = (base + jitter).clamp(0.0, 1.0);
        }
    }
    tex
}

/// Deterministic clip generation from a seed.
pub fn gen_synthetic(spec: &SyntheticVideoSpec, seed: u64) -> Result<SyntheticVideo> {
    spec.validate()?;
    let side = spec.frame_size;
    let s = spec.sprite_size;
    let t_frames = spec.frames;
    let bg = bg_texture(spec);
    let sprite = sprite_texture(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Start near the center, end inside a sampled quadrant with clearance
    // so rounding cannot flip the label.
    let half = side as f64 / 2.0;
    let max_tl = (side - s) as f64;
    let quadrant: usize = rng.gen_range(0..4);
    let start_x = max_tl / 2.0 + rng.gen_range(-1.0..1.0);
    let start_y = max_tl / 2.0 + rng.gen_range(-1.0..1.0);
    let sample_axis = |rng: &mut ChaCha8Rng, positive: bool| -> f64 {
        // Center coordinate range within the half, 2.5 px off the line.
        let (lo, hi) = if positive {
            (half + 2.5, side as f64 - s as f64 / 2.0 - 0.5)
        } else {
            (s as f64 / 2.0 + 0.5, half - 2.5)
        };
        rng.gen_range(lo..hi) - s as f64 / 2.0 // back to top-left coords
    };
    let mut end_x = sample_axis(&mut rng, quadrant % 2 == 1);
    let mut end_y = sample_axis(&mut rng, quadrant / 2 == 1);
    // Enforce the per-axis speed cap by shrinking the displacement.
    if t_frames > 1 {
        let steps = (t_frames - 1) as f64;
        for (end, start) in [(&mut end_x, start_x), (&mut end_y, start_y)] {
            let disp = *end - start;
            let cap = spec.max_speed * steps;
            if disp.abs() > cap {
                *end = start + disp.signum() * cap;
            }
        }
    } else {
        end_x = start_x;
        end_y = start_y;
    }
    if spec.max_speed == 0.0 {
        end_x = start_x;
        end_y = start_y;
    }

    let grid = spec.grid();
    let n = spec.n_patches();
    let mut frames = Vec::with_capacity(t_frames);
    let mut foreground = vec![false; t_frames * n];
    let mut sprite_pos = Vec::with_capacity(t_frames);
    for t in 0..t_frames {
        let alpha = if t_frames > 1 {
            t as f64 / (t_frames - 1) as f64
        } else {
            0.0
        };
        let px = (start_x + (end_x - start_x) * alpha).round().clamp(0.0, max_tl) as usize;
        let py = (start_y + (end_y - start_y) * alpha).round().clamp(0.0, max_tl) as usize;
        sprite_pos.push((px, py));

        let mut frame = bg.clone();
        for sy in 0..s {
            for sx in 0..s {
                frame[(py + sy) * side + (px + sx)] = sprite[sy * s + sx];
            }
        }
        for p in frame.iter_mut() {
            let noise: f32 = rng.gen_range(-1.0..1.0) * spec.noise_amp;
            *p = (*p + noise).clamp(0.0, 1.0);
        }
        frames.push(frame);

        // A patch is foreground when the sprite's bounding box overlaps it.
        let p0x = px / spec.patch_size;
        let p1x = (px + s - 1) / spec.patch_size;
        let p0y = py / spec.patch_size;
        let p1y = (py + s - 1) / spec.patch_size;
        for gy in p0y..=p1y.min(grid - 1) {
            for gx in p0x..=p1x.min(grid - 1) {
                foreground[t * n + gy * grid + gx] = true;
            }
        }
    }

    // Label from the rendered final position.
    let (fx, fy) = sprite_pos[t_frames - 1];
    let cx = fx as f64 + s as f64 / 2.0;
    let cy = fy as f64 + s as f64 / 2.0;
    let label = (usize::from(cy >= half) * 2 + usize::from(cx >= half)) as u8;

    let batch = FrameBatch::new(side, frames)?;
    Ok(SyntheticVideo {
        batch,
        label,
        foreground,
        sprite_pos,
    })
}

/// Stable per-clip seed derivation for dataset generation.
pub fn clip_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

// ── Dataset file format ───────────────────────────────────────────────
//
// Text header of key=value lines between "STTS-DATASET v1" and "---",
// then per clip: frames as f32 LE pixels, one label byte, and the
// foreground bitmask (LSB-first within each byte).

pub struct Dataset {
    pub spec: SyntheticVideoSpec,
    pub seed: u64,
    pub videos: Vec<SyntheticVideo>,
}

pub fn generate_dataset(spec: &SyntheticVideoSpec, count: usize, seed: u64) -> Result<Dataset> {
    let videos = (0..count)
        .map(|i| gen_synthetic(spec, clip_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        videos,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let spec = &ds.spec;
    writeln!(out, "STTS-DATASET v1").unwrap();
    writeln!(out, "frame_size={}", spec.frame_size).unwrap();
    writeln!(out, "patch_size={}", spec.patch_size).unwrap();
    writeln!(out, "frames={}", spec.frames).unwrap();
    writeln!(out, "sprite_size={}", spec.sprite_size).unwrap();
    writeln!(out, "max_speed={}", spec.max_speed).unwrap();
    writeln!(out, "noise_amp={}", spec.noise_amp).unwrap();
    writeln!(out, "texture_seed={}", spec.texture_seed).unwrap();
    writeln!(out, "bg_seed={}", spec.bg_seed).unwrap();
    writeln!(out, "count={}", ds.videos.len()).unwrap();
    writeln!(out, "seed={}", ds.seed).unwrap();
    writeln!(out, "---").unwrap();
    let n = spec.n_patches();
    for v in &ds.videos {
        for frame in &v.batch.frames {
            for &p in frame {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out.push(v.label);
        let bits = spec.frames * n;
        let mut mask_bytes = vec![0u8; bits.div_ceil(8)];
        for (i, &fg) in v.foreground.iter().enumerate() {
            if fg {
                mask_bytes[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&mask_bytes);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let display = path.display().to_string();
    let fail = |reason: &str| Error::format(&display, reason);

    let mut pos = 0usize;
    let line = |pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(fail("truncated header"));
        }
        let s = std::str::from_utf8(&bytes[start..*pos])
            .map_err(|_| fail("header is not UTF-8"))?
            .to_string();
        *pos += 1;
        Ok(s)
    };

    if line(&mut pos)? != "STTS-DATASET v1" {
        return Err(fail("missing STTS-DATASET v1 header"));
    }
    let mut spec = SyntheticVideoSpec::default();
    let mut count = 0usize;
    let mut seed = 0u64;
    loop {
        let l = line(&mut pos)?;
        if l == "---" {
            break;
        }
        let (key, value) = l
            .split_once('=')
            .ok_or_else(|| fail(&format!("bad header line '{l}'")))?;
        let parse_usize =
            |v: &str| v.parse::<usize>().map_err(|_| fail(&format!("bad value for {key}")));
        match key {
            "frame_size" => spec.frame_size = parse_usize(value)?,
            "patch_size" => spec.patch_size = parse_usize(value)?,
            "frames" => spec.frames = parse_usize(value)?,
            "sprite_size" => spec.sprite_size = parse_usize(value)?,
            "max_speed" => {
                spec.max_speed = value.parse().map_err(|_| fail("bad max_speed"))?;
            }
            "noise_amp" => {
                spec.noise_amp = value.parse().map_err(|_| fail("bad noise_amp"))?;
            }
            "texture_seed" => {
                spec.texture_seed = value.parse().map_err(|_| fail("bad texture_seed"))?;
            }
            "bg_seed" => spec.bg_seed = value.parse().map_err(|_| fail("bad bg_seed"))?,
            "count" => count = parse_usize(value)?,
            "seed" => seed = value.parse().map_err(|_| fail("bad seed"))?,
            other => return Err(fail(&format!("unknown header key '{other}'"))),
        }
    }

    let side = spec.frame_size;
    let n = spec.n_patches();
    let frame_bytes = side * side * 4;
    let mask_bytes = (spec.frames * n).div_ceil(8);
    let record = spec.frames * frame_bytes + 1 + mask_bytes;
    if bytes.len() - pos != count * record {
        return Err(fail(&format!(
            "expected {} record bytes, found {}",
            count * record,
            bytes.len() - pos
        )));
    }
    let mut videos = Vec::with_capacity(count);
    for _ in 0..count {
        let mut frames = Vec::with_capacity(spec.frames);
        for _ in 0..spec.frames {
            let mut frame = Vec::with_capacity(side * side);
            for _ in 0..side * side {
                frame.push(f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()));
                pos += 4;
            }
            frames.push(frame);
        }
        let label = bytes[pos];
        pos += 1;
        let mut foreground = vec![false; spec.frames * n];
        for (i, fg) in foreground.iter_mut().enumerate() {
            *fg = bytes[pos + i / 8] & (1 << (i % 8)) != 0;
        }
        pos += mask_bytes;
        videos.push(SyntheticVideo {
            batch: FrameBatch::new(side, frames)?,
            label,
            foreground,
            sprite_pos: Vec::new(), // not serialized; oracle-only field
        });
    }
    Ok(Dataset {
        spec,
        seed,
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_velocity_keeps_foreground_static() {
        let spec = SyntheticVideoSpec {
            max_speed: 0.0,
            ..Default::default()
        };
        let v = gen_synthetic(&spec, 1).unwrap();
        let n = spec.n_patches();
        for t in 1..spec.frames {
            assert_eq!(
                &v.foreground[t * n..(t + 1) * n],
                &v.foreground[..n],
                "frame {t} moved"
            );
        }
    }

    #[test]
    fn label_matches_final_sprite_quadrant() {
        let spec = SyntheticVideoSpec::default();
        for seed in 0..64 {
            let v = gen_synthetic(&spec, seed).unwrap();
            let (fx, fy) = *v.sprite_pos.last().unwrap();
            let cx = fx as f64 + spec.sprite_size as f64 / 2.0;
            let cy = fy as f64 + spec.sprite_size as f64 / 2.0;
            let half = spec.frame_size as f64 / 2.0;
            let want = (usize::from(cy >= half) * 2 + usize::from(cx >= half)) as u8;
            assert_eq!(v.label, want);
        }
    }

    #[test]
    fn labels_cover_all_quadrants() {
        let spec = SyntheticVideoSpec::default();
        let mut seen = [0usize; 4];
        for seed in 0..200 {
            let v = gen_synthetic(&spec, seed).unwrap();
            seen[v.label as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c > 20), "unbalanced labels: {seen:?}");
    }

    #[test]
    fn sprite_stays_in_bounds() {
        let spec = SyntheticVideoSpec::default();
        for seed in 0..50 {
            let v = gen_synthetic(&spec, seed).unwrap();
            for &(x, y) in &v.sprite_pos {
                assert!(x + spec.sprite_size <= spec.frame_size);
                assert!(y + spec.sprite_size <= spec.frame_size);
            }
        }
    }

    #[test]
    fn foreground_matches_pixel_rasterization_oracle() {
        let spec = SyntheticVideoSpec::default();
        let n = spec.n_patches();
        let grid = spec.grid();
        for seed in 0..20 {
            let v = gen_synthetic(&spec, seed).unwrap();
            for (t, &(px, py)) in v.sprite_pos.iter().enumerate() {
                // Rasterize sprite pixels, mark every touched patch.
                let mut want = vec![false; n];
                for sy in 0..spec.sprite_size {
                    for sx in 0..spec.sprite_size {
                        let gx = (px + sx) / spec.patch_size;
                        let gy = (py + sy) / spec.patch_size;
                        want[gy * grid + gx] = true;
                    }
                }
                assert_eq!(&v.foreground[t * n..(t + 1) * n], &want[..], "frame {t}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticVideoSpec::default();
        let a = gen_synthetic(&spec, 17).unwrap();
        let b = gen_synthetic(&spec, 17).unwrap();
        assert_eq!(a.label, b.label);
        assert_eq!(a.foreground, b.foreground);
        for (fa, fb) in a.batch.frames.iter().zip(&b.batch.frames) {
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn oversized_sprite_is_a_spec_error() {
        let spec = SyntheticVideoSpec {
            sprite_size: 20,
            ..Default::default()
        };
        assert!(gen_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn dataset_round_trips_and_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticVideoSpec::default();
        let ds = generate_dataset(&spec, 5, 42).unwrap();
        let p1 = dir.path().join("a.ds");
        let p2 = dir.path().join("b.ds");
        write_dataset(&ds, &p1).unwrap();
        let ds2 = generate_dataset(&spec, 5, 42).unwrap();
        write_dataset(&ds2, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let back = read_dataset(&p1).unwrap();
        assert_eq!(back.spec, spec);
        assert_eq!(back.videos.len(), 5);
        for (a, b) in back.videos.iter().zip(&ds.videos) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.foreground, b.foreground);
            for (fa, fb) in a.batch.frames.iter().zip(&b.batch.frames) {
                assert_eq!(fa, fb);
            }
        }
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticVideoSpec::default();
        let ds = generate_dataset(&spec, 0, 1).unwrap();
        let path = dir.path().join("empty.ds");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert!(back.videos.is_empty());
        let text = fs::read(&path).unwrap();
        assert!(text.ends_with(b"---\n"));
    }
}
