//! Attention heatmaps: per-instance attention mapped back to slide
//! coordinates and painted as a flat per-patch color overlay.

mod colormap;

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

pub use colormap::COOLWARM;

use crate::bagio::FeatureBag;
use crate::error::{Error, Result};
use crate::evalstat::percentile;
use crate::milnet::{forward, MilModel};
use crate::rng;

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Min-max over the slide.
    #[default]
    MinMax,
    /// Clamp to the slide's 1st–99th percentile, then min-max.
    Percentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayEntry {
    /// Position of the instance in its bag.
    pub instance: usize,
    pub x: i32,
    pub y: i32,
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideOverlay {
    pub slide: u16,
    pub entries: Vec<OverlayEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionOverlay {
    pub case_id: String,
    pub patch_size: u32,
    pub normalization: Normalization,
    pub slides: Vec<SlideOverlay>,
}

impl AttentionOverlay {
    pub fn n_instances(&self) -> usize {
        self.slides.iter().map(|s| s.entries.len()).sum()
    }

    pub fn slide(&self, slide: u16) -> Option<&SlideOverlay> {
        self.slides.iter().find(|s| s.slide == slide)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Maps scores into [0, 1]; constant scores map to 0.5.
pub fn normalize(scores: &[f64], mode: Normalization) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let (lo, hi) = match mode {
        Normalization::MinMax => (
            scores.iter().copied().fold(f64::INFINITY, f64::min),
            scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
        Normalization::Percentile => (percentile(scores, 1.0), percentile(scores, 99.0)),
    };
    if hi <= lo {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|&s| (s.clamp(lo, hi) - lo) / (hi - lo)).collect()
}

/// Evaluation-mode attention of every instance, normalized per slide.
pub fn attention_scores(
    model: &MilModel,
    bag: &FeatureBag,
    patch_size: u32,
    mode: Normalization,
) -> Result<AttentionOverlay> {
    let mut unused = rng::seeded(0);
    let trace = forward(model, bag, false, &mut unused)?;
    let mut by_slide: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, c) in bag.coords().iter().enumerate() {
        by_slide.entry(c.slide).or_default().push(i);
    }
    let slides = by_slide
        .into_iter()
        .map(|(slide, idx)| {
            let raw: Vec<f64> = idx.iter().map(|&i| trace.attention[i]).collect();
            let norm = normalize(&raw, mode);
            let entries = idx
                .iter()
                .zip(raw.iter().zip(norm))
                .map(|(&i, (&raw, normalized))| OverlayEntry {
                    instance: i,
                    x: bag.coords()[i].x,
                    y: bag.coords()[i].y,
                    raw,
                    normalized,
                })
                .collect();
            SlideOverlay { slide, entries }
        })
        .collect();
    Ok(AttentionOverlay {
        case_id: bag.case_id.clone(),
        patch_size,
        normalization: mode,
        slides,
    })
}

/// Colormap entry for a normalized score.
pub fn color_of(colormap: &[[u8; 3]; 256], normalized: f64) -> [u8; 3] {
    colormap[(normalized.clamp(0.0, 1.0) * 255.0).round() as usize]
}

/// A labelled polygon in level-0 coordinates, drawn as an outline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub label: String,
    pub vertices: Vec<(f64, f64)>,
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone)]
pub struct RenderOptions<'a> {
    pub slide: u16,
    /// Level-0 pixels per output pixel.
    pub downsample: u32,
    pub alpha: f64,
    pub colormap: &'a [[u8; 3]; 256],
    pub annotations: &'a [Annotation],
    pub outline: [u8; 3],
}

impl Default for RenderOptions<'_> {
    fn default() -> Self {
        RenderOptions {
            slide: 0,
            downsample: 1,
            alpha: DEFAULT_ALPHA,
            colormap: &COOLWARM,
            annotations: &[],
            outline: [0, 0, 0],
        }
    }
}

/// Paints each patch of one slide with its colormap color blended at `alpha`
/// over `base`, or over a white canvas covering the patches.
pub fn render(overlay: &AttentionOverlay, base: Option<&RgbImage>, opts: &RenderOptions<'_>) -> Result<RgbImage> {
    if opts.downsample == 0 {
        return Err(Error::InvalidConfig("downsample must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&opts.alpha) {
        return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", opts.alpha)));
    }
    let empty = SlideOverlay {
        slide: opts.slide,
        entries: Vec::new(),
    };
    let slide = overlay.slide(opts.slide).unwrap_or(&empty);
    let ds = opts.downsample as i64;
    let ps = overlay.patch_size as i64;
    let rect = |e: &OverlayEntry| {
        let x0 = e.x as i64 / ds;
        let y0 = e.y as i64 / ds;
        let x1 = (e.x as i64 + ps + ds - 1) / ds;
        let y1 = (e.y as i64 + ps + ds - 1) / ds;
        (x0, y0, x1, y1)
    };
    if let Some(e) = slide.entries.iter().find(|e| e.x < 0 || e.y < 0) {
        return Err(Error::InvalidImage(format!("patch at ({}, {}) has negative coordinates", e.x, e.y)));
    }

    let mut img = match base {
        Some(b) => {
            for e in &slide.entries {
                let (_, _, x1, y1) = rect(e);
                if x1 > b.width() as i64 || y1 > b.height() as i64 {
                    return Err(Error::InvalidImage(format!(
                        "patch at ({}, {}) extends past the {}x{} base image",
                        e.x,
                        e.y,
                        b.width(),
                        b.height()
                    )));
                }
            }
            b.clone()
        }
        None => {
            let w = slide.entries.iter().map(|e| rect(e).2).max().unwrap_or(1).max(1);
            let h = slide.entries.iter().map(|e| rect(e).3).max().unwrap_or(1).max(1);
            RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]))
        }
    };

    // later patches win where patches overlap; each pixel is blended once
    let (w, h) = img.dimensions();
    let mut layer: Vec<Option<[u8; 3]>> = vec![None; (w * h) as usize];
    for e in &slide.entries {
        let (x0, y0, x1, y1) = rect(e);
        let color = color_of(opts.colormap, e.normalized);
        for y in y0..y1.min(h as i64) {
            for x in x0..x1.min(w as i64) {
                layer[(y as u32 * w + x as u32) as usize] = Some(color);
            }
        }
    }
    let a = opts.alpha;
    for (i, c) in layer.iter().enumerate() {
        if let Some(c) = c {
            let px = img.get_pixel_mut(i as u32 % w, i as u32 / w);
            for ch in 0..3 {
                px.0[ch] = ((1.0 - a) * px.0[ch] as f64 + a * c[ch] as f64).round() as u8;
            }
        }
    }

    for ann in opts.annotations {
        let n = ann.vertices.len();
        for i in 0..n {
            let (ax, ay) = ann.vertices[i];
            let (bx, by) = ann.vertices[(i + 1) % n];
            let scale = opts.downsample as f64;
            draw_line(
                &mut img,
                ((ax / scale).round() as i64, (ay / scale).round() as i64),
                ((bx / scale).round() as i64, (by / scale).round() as i64),
                opts.outline,
            );
        }
    }
    Ok(img)
}

/// Bresenham segment, clipped to the image.
fn draw_line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, Rgb(color));
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// PNG bytes of a rendered map.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    crate::bagio::write_atomic(path.as_ref(), &encode_png(img)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagio::PatchCoord;
    use crate::milnet::{MilMode, ModelConfig};

    fn overlay(entries: &[(i32, i32, f64)]) -> AttentionOverlay {
        AttentionOverlay {
            case_id: "c".into(),
            patch_size: 4,
            normalization: Normalization::MinMax,
            slides: vec![SlideOverlay {
                slide: 0,
                entries: entries
                    .iter()
                    .enumerate()
                    .map(|(i, &(x, y, n))| OverlayEntry {
                        instance: i,
                        x,
                        y,
                        raw: n,
                        normalized: n,
                    })
                    .collect(),
            }],
        }
    }

    #[test]
    fn min_max_example() {
        let n = normalize(&[0.1, 0.2, 0.7], Normalization::MinMax);
        let expected = [0.0, 1.0 / 6.0, 1.0];
        for (a, b) in n.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(normalize(&[0.4; 3], Normalization::MinMax), vec![0.5; 3]);
    }

    #[test]
    fn percentile_mode_clamps_outliers() {
        let mut s: Vec<f64> = (0..200).map(|i| i as f64).collect();
        s.push(1e6);
        let n = normalize(&s, Normalization::Percentile);
        assert_eq!(n[200], 1.0);
        assert_eq!(n[0], 0.0);
        assert!(n[100] > 0.4 && n[100] < 0.6);
        assert!(n.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn single_instance_overlay() {
        let model = MilModel::new(ModelConfig::new(MilMode::Abmil, 3, 2)).unwrap();
        let bag = FeatureBag::new("one", 3, vec![PatchCoord { slide: 0, x: 0, y: 0 }], vec![1.0, 2.0, 3.0]).unwrap();
        let o = attention_scores(&model, &bag, 224, Normalization::MinMax).unwrap();
        assert_eq!(o.slides[0].entries[0].raw, 1.0);
        assert_eq!(o.slides[0].entries[0].normalized, 0.5);
    }

    #[test]
    fn slides_normalize_independently() {
        let model = MilModel::new(ModelConfig::new(MilMode::Abmil, 2, 2)).unwrap();
        let coords = vec![
            PatchCoord { slide: 0, x: 0, y: 0 },
            PatchCoord { slide: 0, x: 224, y: 0 },
            PatchCoord { slide: 1, x: 0, y: 0 },
            PatchCoord { slide: 1, x: 224, y: 0 },
        ];
        let bag = FeatureBag::new("two", 2, coords, vec![0.0, 1.0, 5.0, -1.0, 2.0, 2.0, -3.0, 0.5]).unwrap();
        let o = attention_scores(&model, &bag, 224, Normalization::MinMax).unwrap();
        assert_eq!(o.n_instances(), 4);
        for s in &o.slides {
            let mut n: Vec<f64> = s.entries.iter().map(|e| e.normalized).collect();
            n.sort_by(f64::total_cmp);
            assert_eq!((n[0], n[1]), (0.0, 1.0));
        }
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(color_of(&COOLWARM, 0.0), COOLWARM[0]);
        assert_eq!(color_of(&COOLWARM, 1.0), COOLWARM[255]);
        // blue end is cool, red end warm
        assert!(COOLWARM[0][2] > COOLWARM[0][0]);
        assert!(COOLWARM[255][0] > COOLWARM[255][2]);
    }

    #[test]
    fn zero_alpha_is_identity() {
        let base = RgbImage::from_fn(8, 8, |x, y| Rgb([x as u8 * 30, y as u8 * 30, 7]));
        let o = overlay(&[(0, 0, 0.2), (4, 4, 0.9)]);
        let opts = RenderOptions {
            alpha: 0.0,
            ..Default::default()
        };
        assert_eq!(render(&o, Some(&base), &opts).unwrap(), base);
    }

    #[test]
    fn grid_of_four_uses_table_colors() {
        let o = overlay(&[(0, 0, 0.0), (4, 0, 1.0 / 3.0), (0, 4, 2.0 / 3.0), (4, 4, 1.0)]);
        let opts = RenderOptions {
            alpha: 1.0,
            ..Default::default()
        };
        let img = render(&o, None, &opts).unwrap();
        assert_eq!(img.dimensions(), (8, 8));
        let expected = [COOLWARM[0], COOLWARM[85], COOLWARM[170], COOLWARM[255]];
        let got = [img.get_pixel(1, 1).0, img.get_pixel(5, 1).0, img.get_pixel(1, 5).0, img.get_pixel(5, 5).0];
        assert_eq!(got, expected);
        let distinct: std::collections::BTreeSet<_> = got.iter().collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn half_alpha_blend() {
        let o = overlay(&[(0, 0, 1.0)]);
        let img = render(&o, None, &RenderOptions::default()).unwrap();
        let c = COOLWARM[255];
        let want: Vec<u8> = c.iter().map(|&v| ((255.0 + v as f64) / 2.0).round() as u8).collect();
        assert_eq!(img.get_pixel(0, 0).0.to_vec(), want);
    }

    #[test]
    fn patch_outside_base_is_an_error() {
        let base = RgbImage::new(6, 6);
        let o = overlay(&[(4, 4, 0.5)]);
        assert!(matches!(render(&o, Some(&base), &RenderOptions::default()), Err(Error::InvalidImage(_))));
    }

    #[test]
    fn downsampled_canvas_and_outline() {
        let o = overlay(&[(0, 0, 0.5), (8, 8, 0.5)]);
        let ann = [Annotation {
            label: "tumor".into(),
            vertices: vec![(0.0, 0.0), (10.0, 0.0), (10.0, 10.0)],
        }];
        let opts = RenderOptions {
            downsample: 2,
            annotations: &ann,
            outline: [1, 2, 3],
            ..Default::default()
        };
        let img = render(&o, None, &opts).unwrap();
        assert_eq!(img.dimensions(), (6, 6));
        assert_eq!(img.get_pixel(3, 0).0, [1, 2, 3]);
        assert_eq!(img.get_pixel(5, 3).0, [1, 2, 3]);
    }

    #[test]
    fn png_bytes_are_deterministic() {
        let o = overlay(&[(0, 0, 0.1), (4, 0, 0.8)]);
        let a = encode_png(&render(&o, None, &RenderOptions::default()).unwrap()).unwrap();
        let b = encode_png(&render(&o, None, &RenderOptions::default()).unwrap()).unwrap();
        assert_eq!(a, b);
        let back = image::load_from_memory(&a).unwrap().to_rgb8();
        assert_eq!(back, render(&o, None, &RenderOptions::default()).unwrap());
    }
}
