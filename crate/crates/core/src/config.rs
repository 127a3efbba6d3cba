//! Pipeline configuration and the patch/block geometry derived from it.

use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Precision;

/// Which rule selects the retention mask. Scoring and bias injection run in
/// every mode; the mode only decides which tokens are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMode {
    Stts,
    Heuristic,
    Random,
    None,
}

impl FromStr for PruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stts" => Ok(PruneMode::Stts),
            "heuristic" => Ok(PruneMode::Heuristic),
            "random" => Ok(PruneMode::Random),
            "none" => Ok(PruneMode::None),
            other => Err(Error::config(format!(
                "unknown prune mode '{other}' (expected stts|heuristic|random|none)"
            ))),
        }
    }
}

impl std::fmt::Display for PruneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            PruneMode::Stts => "stts",
            PruneMode::Heuristic => "heuristic",
            PruneMode::Random => "random",
            PruneMode::None => "none",
        };
        write!(f, "{name}")
    }
}

/// All hyperparameters of one pipeline instance.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Square frame side length in pixels.
    pub frame_size: usize,
    pub patch_size: usize,
    /// Number of frames T.
    pub frames: usize,
    /// Hidden dimension D.
    pub dim: usize,
    pub heads: usize,
    /// Total encoder layer count.
    pub layers: usize,
    /// Injection layer l: the scorer reads features after layer l and the
    /// bias lands in layer l+1.
    pub inject_layer: usize,
    /// Pooling width w.
    pub pool_width: usize,
    /// Prune ratio k in percent.
    pub prune_ratio: u32,
    pub prune_mode: PruneMode,
    pub protect_first: bool,
    pub seed: u64,
    pub precision: Precision,
    pub lr_main: f64,
    pub lr_scorer: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            frame_size: 24,
            patch_size: 4,
            frames: 8,
            dim: 32,
            heads: 4,
            layers: 6,
            inject_layer: 3,
            pool_width: 3,
            prune_ratio: 50,
            prune_mode: PruneMode::Stts,
            protect_first: true,
            seed: 0,
            precision: Precision::F32,
            lr_main: 1e-3,
            lr_scorer: 1e-4,
            steps: 500,
            batch_size: 2,
        }
    }
}

impl PipelineConfig {
    /// Patches per frame side.
    pub fn grid(&self) -> usize {
        self.frame_size / self.patch_size
    }

    /// Patch tokens per frame, N.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Pooled blocks per frame, N / w².
    pub fn n_blocks(&self) -> usize {
        let b = self.grid() / self.pool_width;
        b * b
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn total_tokens(&self) -> usize {
        self.frames * self.n_patches()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.frame_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "frame size {} not divisible by patch size {}",
                self.frame_size, self.patch_size
            )));
        }
        if self.pool_width == 0 || self.grid() % self.pool_width != 0 {
            return Err(Error::config(format!(
                "patch grid {} not divisible by pool width {}",
                self.grid(),
                self.pool_width
            )));
        }
        if self.frames == 0 {
            return Err(Error::config("frame count must be at least 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} not divisible by head count {}",
                self.dim, self.heads
            )));
        }
        if self.dim % 2 != 0 {
            return Err(Error::config("dim must be even (scorer tapers to dim/2)"));
        }
        if self.inject_layer + 1 >= self.layers {
            return Err(Error::config(format!(
                "injection layer {} needs layer {} to exist (have {} layers)",
                self.inject_layer,
                self.inject_layer + 1,
                self.layers
            )));
        }
        if self.prune_ratio > 100 {
            return Err(Error::config(format!(
                "prune ratio {}% out of [0, 100]",
                self.prune_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Spatial patch/block geometry of one frame: a g×g patch grid pooled into
/// (g/w)² blocks of w×w patches each. Patch and block indices are row-major.
#[derive(Debug, Clone)]
pub struct BlockGeometry {
    pub grid: usize,
    pub pool_width: usize,
    /// Per block: the patch indices it covers, each of length w².
    pub block_patches: Arc<Vec<Vec<usize>>>,
    /// Per patch: the block it belongs to.
    pub patch_block: Arc<Vec<usize>>,
}

impl BlockGeometry {
    pub fn new(grid: usize, pool_width: usize) -> Result<Self> {
        if pool_width == 0 || grid % pool_width != 0 {
            return Err(Error::config(format!(
                "patch grid {grid} not divisible by pool width {pool_width}"
            )));
        }
        let blocks_per_side = grid / pool_width;
        let n_blocks = blocks_per_side * blocks_per_side;
        let mut block_patches = vec![Vec::with_capacity(pool_width * pool_width); n_blocks];
        let mut patch_block = vec![0usize; grid * grid];
        for r in 0..grid {
            for c in 0..grid {
                let patch = r * grid + c;
                let block = (r / pool_width) * blocks_per_side + (c / pool_width);
                block_patches[block].push(patch);
                patch_block[patch] = block;
            }
        }
        Ok(BlockGeometry {
            grid,
            pool_width,
            block_patches: Arc::new(block_patches),
            patch_block: Arc::new(patch_block),
        })
    }

    pub fn n_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn n_blocks(&self) -> usize {
        self.block_patches.len()
    }

    pub fn patches_per_block(&self) -> usize {
        self.pool_width * self.pool_width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn geometry_partitions_patches() {
        let geo = BlockGeometry::new(6, 3).unwrap();
        assert_eq!(geo.n_blocks(), 4);
        assert_eq!(geo.n_patches(), 36);
        let mut seen = vec![false; 36];
        for (b, patches) in geo.block_patches.iter().enumerate() {
            assert_eq!(patches.len(), 9);
            for &p in patches {
                assert!(!seen[p]);
                seen[p] = true;
                assert_eq!(geo.patch_block[p], b);
            }
        }
        assert!(seen.iter().all(|&s| s));
        // Top-left 3x3 of a 6-wide grid belongs to block 0.
        assert_eq!(geo.patch_block[0], 0);
        assert_eq!(geo.patch_block[2], 0);
        assert_eq!(geo.patch_block[3], 1);
        assert_eq!(geo.patch_block[6 * 3], 2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = PipelineConfig::default();
        c.inject_layer = 5;
        assert!(c.validate().is_err());

        let mut c = PipelineConfig::default();
        c.frame_size = 25;
        assert!(c.validate().is_err());

        let mut c = PipelineConfig::default();
        c.prune_ratio = 101;
        assert!(c.validate().is_err());
    }
}
