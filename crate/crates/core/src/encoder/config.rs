use serde::{Deserialize, Serialize};

use crate::error::{PatError, Result};

/// Shape of the part-aware encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub num_parts: usize,
    pub num_classes: usize,
    pub mlp_hidden: usize,
    /// Standard deviation of the truncated-normal init for tokens and projections.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(20)
    }
}

impl ModelConfig {
    /// 64x32 images, patch 8, D=64, 4 heads, 4 blocks, 3 parts.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            image_h: 64,
            image_w: 32,
            channels: 3,
            patch_size: 8,
            embed_dim: 64,
            heads: 4,
            blocks: 4,
            num_parts: 3,
            num_classes,
            mlp_hidden: 256,
            init_std: 0.02,
        }
    }

    /// ViT-B/16-like geometry on 256x128 inputs (N = 128 image tokens).
    pub fn full(num_classes: usize) -> Self {
        Self {
            image_h: 256,
            image_w: 128,
            channels: 3,
            patch_size: 16,
            embed_dim: 768,
            heads: 12,
            blocks: 12,
            num_parts: 3,
            num_classes,
            mlp_hidden: 3072,
            init_std: 0.02,
        }
    }

    /// Small enough that every parameter can be finite-differenced.
    pub fn gradcheck() -> Self {
        Self {
            image_h: 16,
            image_w: 8,
            channels: 3,
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            blocks: 2,
            num_parts: 3,
            num_classes: 4,
            mlp_hidden: 16,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.image_h.is_multiple_of(p) || !self.image_w.is_multiple_of(p) {
            return Err(PatError::config(format!(
                "image {}x{} not divisible by patch {p}",
                self.image_h, self.image_w
            )));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(PatError::config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.num_parts == 0 || self.channels == 0 || self.num_classes == 0 {
            return Err(PatError::config("num_parts, channels and num_classes must be >= 1"));
        }
        if self.mlp_hidden == 0 {
            return Err(PatError::config("mlp_hidden must be >= 1"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(PatError::config("init_std must be a positive finite number"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    /// Number of image tokens N.
    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// N + 1 + M: class token, part tokens, image tokens.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1 + self.num_parts
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// For each part token, the image-token indices it may attend to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartRegionSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub regions: Vec<Vec<usize>>,
}

impl PartRegionSpec {
    pub fn num_parts(&self) -> usize {
        self.regions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid_h * self.grid_w;
        let mut row_covered = vec![false; self.grid_h];
        for (i, r) in self.regions.iter().enumerate() {
            if r.is_empty() {
                return Err(PatError::config(format!("part region {i} is empty")));
            }
            for &t in r {
                if t >= n {
                    return Err(PatError::config(format!(
                        "part region {i} token {t} outside grid of {n}"
                    )));
                }
                row_covered[t / self.grid_w] = true;
            }
        }
        if let Some(row) = row_covered.iter().position(|c| !c) {
            return Err(PatError::config(format!("grid row {row} is not covered by any part")));
        }
        Ok(())
    }

    /// Top grid row and height of each region, assuming full-width windows.
    pub fn row_spans(&self) -> Vec<(usize, usize)> {
        self.regions
            .iter()
            .map(|r| {
                let top = r.iter().map(|t| t / self.grid_w).min().unwrap_or(0);
                let bottom = r.iter().map(|t| t / self.grid_w).max().unwrap_or(0);
                (top, bottom + 1 - top)
            })
            .collect()
    }
}

/// `num_parts` square windows of side `grid_w`, tops evenly spaced over
/// `[0, grid_h - grid_w]` (rounded down). One part covers the whole grid.
pub fn default_part_regions(grid_h: usize, grid_w: usize, num_parts: usize) -> Result<PartRegionSpec> {
    if num_parts == 0 || grid_w == 0 {
        return Err(PatError::config("need at least one part and a non-empty grid"));
    }
    if num_parts == 1 {
        let spec = PartRegionSpec {
            grid_h,
            grid_w,
            regions: vec![(0..grid_h * grid_w).collect()],
        };
        return Ok(spec);
    }
    if grid_h < grid_w {
        return Err(PatError::config(format!(
            "grid {grid_h}x{grid_w}: no square window of side {grid_w} fits"
        )));
    }
    let span = grid_h - grid_w;
    let regions = (0..num_parts)
        .map(|i| {
            let top = i * span / (num_parts - 1);
            (top * grid_w..(top + grid_w) * grid_w).collect()
        })
        .collect();
    let spec = PartRegionSpec {
        grid_h,
        grid_w,
        regions,
    };
    spec.validate()?;
    Ok(spec)
}
