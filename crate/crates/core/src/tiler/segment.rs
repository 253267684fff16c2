use image::{GrayImage, Luma, RgbImage};

use crate::error::{Error, Result};

/// Minimum connected-component size kept in the mask, in downsampled cells.
pub const MIN_COMPONENT_CELLS: usize = 64;
pub const MEDIAN_WINDOW: usize = 7;

/// Binary tissue mask on a grid downsampled from level 0 by `downsample`.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub downsample: u32,
    pub width: u32,
    pub height: u32,
    pub threshold: u8,
    cells: Vec<bool>,
}

impl TissueMask {
    pub fn from_cells(downsample: u32, width: u32, height: u32, threshold: u8, cells: Vec<bool>) -> Result<Self> {
        if downsample == 0 {
            return Err(Error::InvalidConfig("downsample factor must be at least 1".into()));
        }
        if cells.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "{} mask cells for a {width}x{height} grid",
                cells.len()
            )));
        }
        Ok(TissueMask {
            downsample,
            width,
            height,
            threshold,
            cells,
        })
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.cells[(y * self.width + x) as usize]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn tissue_cells(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn from_image(img: &GrayImage, downsample: u32) -> Result<Self> {
        let cells = img.pixels().map(|p| p.0[0] >= 128).collect();
        TissueMask::from_cells(downsample, img.width(), img.height(), 0, cells)
    }
}

/// Box-filter downsampling; edge boxes average only the pixels they cover.
pub fn downsample(image: &RgbImage, factor: u32) -> RgbImage {
    if factor == 1 {
        return image.clone();
    }
    let (w, h) = image.dimensions();
    let (ow, oh) = (w.div_ceil(factor), h.div_ceil(factor));
    RgbImage::from_fn(ow, oh, |ox, oy| {
        let mut sum = [0u32; 3];
        let mut n = 0u32;
        for y in oy * factor..((oy + 1) * factor).min(h) {
            for x in ox * factor..((ox + 1) * factor).min(w) {
                let p = image.get_pixel(x, y).0;
                for c in 0..3 {
                    sum[c] += p[c] as u32;
                }
                n += 1;
            }
        }
        image::Rgb(sum.map(|s| ((s + n / 2) / n) as u8))
    })
}

/// HSV saturation scaled to 0..=255.
pub fn saturation(rgb: [u8; 3]) -> u8 {
    let max = *rgb.iter().max().unwrap() as u32;
    let min = *rgb.iter().min().unwrap() as u32;
    if max == 0 {
        0
    } else {
        ((255 * (max - min) + max / 2) / max) as u8
    }
}

/// Median over a `window`×`window` neighbourhood with edge clamping.
pub fn median_filter(values: &[u8], width: usize, height: usize, window: usize) -> Vec<u8> {
    let r = (window / 2) as isize;
    let mut out = vec![0u8; values.len()];
    let mut hist = [0u32; 256];
    let half = (window * window / 2) as u32;
    for y in 0..height as isize {
        for x in 0..width as isize {
            hist.fill(0);
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, height as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, width as isize - 1) as usize;
                    hist[values[yy * width + xx] as usize] += 1;
                }
            }
            let mut acc = 0;
            for (v, &count) in hist.iter().enumerate() {
                acc += count;
                if acc > half {
                    out[y as usize * width + x as usize] = v as u8;
                    break;
                }
            }
        }
    }
    out
}

/// Otsu's threshold over a 256-bin histogram. Values `<= t` are background.
/// When several thresholds attain the maximum between-class variance the
/// middle of that plateau is returned.
pub fn otsu_threshold(hist: &[u64; 256]) -> u8 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0;
    }
    let total_sum: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let mut w0 = 0u64;
    let mut sum0 = 0f64;
    let mut best = -1f64;
    let mut first = 0usize;
    let mut last = 0usize;
    for t in 0..256 {
        w0 += hist[t];
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = sum0 / w0 as f64;
        let mu1 = (total_sum - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (mu0 - mu1).powi(2);
        let tol = 1e-12 * best.abs().max(1.0);
        if between > best + tol {
            best = between;
            first = t;
            last = t;
        } else if (between - best).abs() <= tol {
            last = t;
        }
    }
    ((first + last) / 2) as u8
}

/// Drops 8-connected `true` components smaller than `min_cells`.
pub fn remove_small_components(cells: &mut [bool], width: usize, height: usize, min_cells: usize) {
    let mut visited = vec![false; cells.len()];
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..cells.len() {
        if !cells[start] || visited[start] {
            continue;
        }
        component.clear();
        visited[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            component.push(i);
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if cells[j] && !visited[j] {
                        visited[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if component.len() < min_cells {
            for &i in &component {
                cells[i] = false;
            }
        }
    }
}

/// Tissue mask from saturation: downsample, median-filter the HSV saturation
/// channel, Otsu-threshold it and clear small connected components.
pub fn segment_tissue(image: &RgbImage, downsample_factor: u32) -> Result<TissueMask> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::InvalidImage("image is empty".into()));
    }
    if downsample_factor == 0 {
        return Err(Error::InvalidConfig("downsample factor must be at least 1".into()));
    }
    let small = downsample(image, downsample_factor);
    let (w, h) = (small.width() as usize, small.height() as usize);
    let sat: Vec<u8> = small.pixels().map(|p| saturation(p.0)).collect();
    let sat = median_filter(&sat, w, h, MEDIAN_WINDOW);
    let mut hist = [0u64; 256];
    for &s in &sat {
        hist[s as usize] += 1;
    }
    let threshold = otsu_threshold(&hist);
    let mut cells: Vec<bool> = sat.iter().map(|&s| s > threshold).collect();
    remove_small_components(&mut cells, w, h, MIN_COMPONENT_CELLS);
    if !cells.iter().any(|&c| c) {
        return Err(Error::NoTissue);
    }
    TissueMask::from_cells(downsample_factor, w as u32, h as u32, threshold, cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PINK: [u8; 3] = [228, 140, 196];

    pub(super) fn disk_image(size: u32, cx: f64, cy: f64, r: f64) -> RgbImage {
        RgbImage::from_fn(size, size, |x, y| {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            image::Rgb(if d <= r { PINK } else { [255, 255, 255] })
        })
    }

    fn iou(a: &[bool], b: &[bool]) -> f64 {
        let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
        inter as f64 / union as f64
    }

    /// Mask upsampled back to level-0 pixels.
    fn level0(mask: &TissueMask, size: u32) -> Vec<bool> {
        let ds = mask.downsample;
        (0..size * size)
            .map(|i| mask.get((i % size) / ds, (i / size) / ds))
            .collect()
    }

    #[test]
    fn disk_is_recovered() {
        let size = 256;
        let img = disk_image(size, 128.0, 128.0, 80.0);
        let mask = segment_tissue(&img, 1).unwrap();
        let truth: Vec<bool> = img.pixels().map(|p| p.0 == PINK).collect();
        assert!(iou(mask.cells(), &truth) >= 0.9);
    }

    #[test]
    fn white_image_has_no_tissue() {
        let img = RgbImage::from_pixel(64, 64, image::Rgb([255, 255, 255]));
        assert!(matches!(segment_tissue(&img, 1), Err(Error::NoTissue)));
    }

    #[test]
    fn small_specks_are_removed() {
        let mut img = disk_image(128, 64.0, 64.0, 30.0);
        // 4x4 speck far from the disk
        for y in 2..6 {
            for x in 2..6 {
                img.put_pixel(x, y, image::Rgb(PINK));
            }
        }
        let mask = segment_tissue(&img, 1).unwrap();
        assert!(!mask.get(3, 3));
        assert!(mask.get(64, 64));
    }

    #[test]
    fn downsampling_preserves_mask() {
        let size = 256;
        let img = disk_image(size, 120.0, 136.0, 70.0);
        let reference = level0(&segment_tissue(&img, 1).unwrap(), size);
        for ds in [2, 4] {
            let m = segment_tissue(&img, ds).unwrap();
            assert_eq!(m.width, size.div_ceil(ds));
            assert!(iou(&level0(&m, size), &reference) >= 0.8, "downsample {ds}");
        }
    }

    /// Brute-force Otsu: minimise the weighted within-class variance directly.
    fn within_class_variance(hist: &[u64; 256], t: usize) -> Option<f64> {
        let stats = |range: std::ops::Range<usize>| {
            let n: u64 = hist[range.clone()].iter().sum();
            if n == 0 {
                return None;
            }
            let mean = range.clone().map(|v| v as f64 * hist[v] as f64).sum::<f64>() / n as f64;
            let var = range.map(|v| hist[v] as f64 * (v as f64 - mean).powi(2)).sum::<f64>();
            Some(var)
        };
        Some(stats(0..t + 1)? + stats(t + 1..256)?)
    }

    #[test]
    fn otsu_matches_brute_force_on_bimodal_histogram() {
        let mut hist = [0u64; 256];
        for (v, h) in hist.iter_mut().enumerate() {
            let g = |m: f64, s: f64| (-(v as f64 - m).powi(2) / (2.0 * s * s)).exp();
            *h = (1000.0 * g(10.0, 4.0) + 600.0 * g(200.0, 6.0)).round() as u64;
        }
        let t = otsu_threshold(&hist) as usize;
        assert!(t > 10 && t < 200, "threshold {t}");
        let best = (0..256)
            .filter_map(|t| within_class_variance(&hist, t))
            .fold(f64::INFINITY, f64::min);
        let got = within_class_variance(&hist, t).unwrap();
        assert!((got - best).abs() <= 1e-9 * best.max(1.0), "{got} vs {best}");
    }

    #[test]
    fn otsu_plateau_picks_middle() {
        let mut hist = [0u64; 256];
        hist[10] = 50;
        hist[200] = 50;
        assert_eq!(otsu_threshold(&hist), 104);
    }

    #[test]
    fn median_removes_salt_noise() {
        let mut v = vec![10u8; 81];
        v[40] = 250;
        let out = median_filter(&v, 9, 9, 7);
        assert!(out.iter().all(|&x| x == 10));
    }
}
