use std::path::Path;

use serde::{Deserialize, Serialize};

use super::segment::TissueMask;
use crate::error::{Error, Result};

pub const DEFAULT_PATCH_SIZE: u32 = 224;
pub const DEFAULT_MIN_TISSUE_FRACTION: f64 = 0.5;

/// Kept patches of a non-overlapping grid, top-left corners at level 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: u32,
    pub coords: Vec<(u32, u32)>,
    pub tissue_fraction: Vec<f64>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        crate::bagio::write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid: PatchGrid = serde_json::from_str(&text)?;
        if grid.coords.len() != grid.tissue_fraction.len() {
            return Err(Error::InvalidConfig(format!(
                "{}: {} coords but {} tissue fractions",
                path.display(),
                grid.coords.len(),
                grid.tissue_fraction.len()
            )));
        }
        Ok(grid)
    }
}

/// Fraction of the level-0 square `[x0, x0+size) × [y0, y0+size)` covered by mask cells.
fn tissue_fraction(mask: &TissueMask, width: u32, height: u32, x0: u32, y0: u32, size: u32) -> f64 {
    let ds = mask.downsample;
    let (x1, y1) = (x0 + size, y0 + size);
    let mut covered = 0u64;
    for cy in y0 / ds..y1.div_ceil(ds).min(mask.height) {
        let oy = (cy * ds).max(y0)..((cy + 1) * ds).min(y1).min(height);
        let span_y = oy.end.saturating_sub(oy.start) as u64;
        for cx in x0 / ds..x1.div_ceil(ds).min(mask.width) {
            if !mask.get(cx, cy) {
                continue;
            }
            let ox = (cx * ds).max(x0)..((cx + 1) * ds).min(x1).min(width);
            covered += span_y * ox.end.saturating_sub(ox.start) as u64;
        }
    }
    covered as f64 / (size as u64 * size as u64) as f64
}

/// Tiles a `width`×`height` level-0 image into aligned, non-overlapping
/// patches that lie fully inside it, keeping those whose tissue fraction is at
/// least `min_tissue_fraction`. Coordinates come out in row-major order.
pub fn extract_patches(
    width: u32,
    height: u32,
    mask: &TissueMask,
    patch_size: u32,
    min_tissue_fraction: f64,
) -> Result<PatchGrid> {
    if patch_size == 0 {
        return Err(Error::InvalidConfig("patch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&min_tissue_fraction) {
        return Err(Error::InvalidConfig(format!(
            "min tissue fraction {min_tissue_fraction} outside [0, 1]"
        )));
    }
    let ds = mask.downsample;
    if mask.width != width.div_ceil(ds) || mask.height != height.div_ceil(ds) {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} at downsample {ds} does not match a {width}x{height} image",
            mask.width, mask.height
        )));
    }
    let mut grid = PatchGrid {
        patch_size,
        coords: Vec::new(),
        tissue_fraction: Vec::new(),
    };
    if patch_size > width || patch_size > height {
        log::warn!("patch size {patch_size} exceeds image {width}x{height}; no patches extracted");
        return Ok(grid);
    }
    for row in 0..height / patch_size {
        for col in 0..width / patch_size {
            let (x, y) = (col * patch_size, row * patch_size);
            let frac = tissue_fraction(mask, width, height, x, y, patch_size);
            if frac >= min_tissue_fraction {
                grid.coords.push((x, y));
                grid.tissue_fraction.push(frac);
            }
        }
    }
    Ok(grid)
}
