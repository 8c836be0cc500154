//! Procedural toy corpus: random smooth curves rasterized at a known
//! width onto a textured background. The mask is the exact rasterization;
//! every caption field is recomputed from the mask itself, so stored
//! captions stay faithful to the pixels by construction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::captions::{self, CaptionRecord, RecordKind};
use crate::error::{Error, Result};
use crate::imageio;
use crate::rng::{derive_rng, uniform, uniform_usize, Rng};
use crate::segmap_post::{BinaryMask, GrayImage};

use super::{DatasetManifest, SampleEntry, Split};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyGenParams {
    /// Image side length; a power of two, at least 16.
    pub size: usize,
    pub curve_count: (usize, usize),
    /// Stroke width range in pixels.
    pub width_px: (f64, f64),
    /// Maximum per-step turning angle range (radians).
    pub waviness: (f64, f64),
    /// Background value-noise amplitude in [0, 1).
    pub texture_level: f64,
    /// How much darker the curve is than the background.
    pub contrast: (f64, f64),
    pub dataset_name: String,
}

impl Default for ToyGenParams {
    fn default() -> Self {
        ToyGenParams {
            size: 32,
            curve_count: (1, 2),
            width_px: (2.0, 3.5),
            waviness: (0.05, 0.35),
            texture_level: 0.12,
            contrast: (0.45, 0.7),
            dataset_name: "toycurves".into(),
        }
    }
}

impl ToyGenParams {
    pub fn validate(&self) -> Result<()> {
        if !self.size.is_power_of_two() || self.size < 16 {
            return Err(Error::Config(format!(
                "toy size {} must be a power of two >= 16",
                self.size
            )));
        }
        let ranges_ok = self.curve_count.0 >= 1
            && self.curve_count.0 <= self.curve_count.1
            && self.width_px.0 > 0.5
            && self.width_px.0 <= self.width_px.1
            && self.waviness.0 >= 0.0
            && self.waviness.0 <= self.waviness.1
            && (0.0..1.0).contains(&self.texture_level)
            && self.contrast.0 > 0.0
            && self.contrast.0 <= self.contrast.1
            && self.contrast.1 <= 1.0;
        if !ranges_ok {
            return Err(Error::Config("degenerate toy generator ranges".into()));
        }
        if self.dataset_name.trim().is_empty() {
            return Err(Error::Config("dataset name must be non-empty".into()));
        }
        Ok(())
    }

    pub fn dataset_field(&self) -> String {
        format!("{} dataset", self.dataset_name)
    }
}

fn stamp_disk(bits: &mut [bool], size: usize, cx: f64, cy: f64, r: f64) {
    let r2 = r * r;
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil().min(size as f64 - 1.0)) as usize;
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil().min(size as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= r2 {
                bits[y * size + x] = true;
            }
        }
    }
}

fn render_mask(params: &ToyGenParams, rng: &mut Rng) -> (BinaryMask, f64) {
    let s = params.size;
    let mut bits = vec![false; s * s];
    let n_curves = uniform_usize(rng, params.curve_count.0, params.curve_count.1);
    let width = uniform(rng, params.width_px.0, params.width_px.1);
    let r = width / 2.0;
    let margin = r + 1.0;
    let lo = margin;
    let hi = s as f64 - 1.0 - margin;
    for _ in 0..n_curves {
        let mut x = uniform(rng, s as f64 * 0.2, s as f64 * 0.8);
        let mut y = uniform(rng, s as f64 * 0.2, s as f64 * 0.8);
        let mut theta = uniform(rng, 0.0, std::f64::consts::TAU);
        let turn = uniform(rng, params.waviness.0, params.waviness.1);
        let steps = (s as f64 * uniform(rng, 1.4, 2.4) / 0.5) as usize;
        for _ in 0..steps {
            stamp_disk(&mut bits, s, x, y, r);
            theta += uniform(rng, -turn, turn);
            let nx = x + 0.5 * theta.cos();
            let ny = y + 0.5 * theta.sin();
            if nx < lo || nx > hi {
                theta = std::f64::consts::PI - theta;
            }
            if ny < lo || ny > hi {
                theta = -theta;
            }
            x = (x + 0.5 * theta.cos()).clamp(lo, hi);
            y = (y + 0.5 * theta.sin()).clamp(lo, hi);
        }
    }
    let pixels = bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    (BinaryMask::new(s, s, pixels).expect("mask"), width)
}

/// Value noise plus an intensity gradient, darkened under the (blurred)
/// mask.
fn render_image(params: &ToyGenParams, mask: &BinaryMask, rng: &mut Rng) -> GrayImage {
    let s = params.size;
    let cell = 8usize;
    let gw = s / cell + 2;
    let grid: Vec<f64> = (0..gw * gw).map(|_| uniform(rng, 0.0, 1.0)).collect();
    let gx = uniform(rng, -0.18, 0.18);
    let gy = uniform(rng, -0.18, 0.18);
    let contrast = uniform(rng, params.contrast.0, params.contrast.1);

    // 3x3 box blur of the mask softens curve edges
    let soft = |x: isize, y: isize| -> f64 {
        let mut acc = 0.0;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (xx, yy) = (x + dx, y + dy);
                if xx >= 0 && xx < s as isize && yy >= 0 && yy < s as isize {
                    if mask.pixels()[yy as usize * s + xx as usize] == 255 {
                        acc += 1.0;
                    }
                }
            }
        }
        acc / 9.0
    };

    let mut pixels = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let g00 = grid[iy * gw + ix];
            let g10 = grid[iy * gw + ix + 1];
            let g01 = grid[(iy + 1) * gw + ix];
            let g11 = grid[(iy + 1) * gw + ix + 1];
            let noise = g00 * (1.0 - tx) * (1.0 - ty)
                + g10 * tx * (1.0 - ty)
                + g01 * (1.0 - tx) * ty
                + g11 * tx * ty;
            let bg = 0.62
                + gx * (x as f64 / s as f64 - 0.5)
                + gy * (y as f64 / s as f64 - 0.5)
                + params.texture_level * (noise - 0.5) * 2.0;
            let v = (bg - contrast * soft(x as isize, y as isize)).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    GrayImage::new(s, s, pixels).expect("image")
}

/// L1 distance-to-background transform (background outside the image).
fn distance_transform(mask: &BinaryMask) -> Vec<u32> {
    let (w, h) = (mask.width(), mask.height());
    let big = (w + h) as u32;
    let mut d: Vec<u32> = mask
        .pixels()
        .iter()
        .map(|&p| if p == 255 { big } else { 0 })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if d[i] == 0 {
                continue;
            }
            let up = if y > 0 { d[i - w] } else { 0 };
            let left = if x > 0 { d[i - 1] } else { 0 };
            d[i] = d[i].min(up + 1).min(left + 1);
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let i = y * w + x;
            if d[i] == 0 {
                continue;
            }
            let down = if y + 1 < h { d[i + w] } else { 0 };
            let right = if x + 1 < w { d[i + 1] } else { 0 };
            d[i] = d[i].min(down + 1).min(right + 1);
        }
    }
    d
}

/// Stroke-width estimate: `2 * median(ridge) - 1`, where the ridge holds
/// the local maxima of the distance transform. Robust to curve crossings.
pub fn measure_thickness(mask: &BinaryMask) -> f64 {
    let (w, h) = (mask.width(), mask.height());
    let d = distance_transform(mask);
    let mut ridge = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = d[y * w + x];
            if v == 0 {
                continue;
            }
            let mut is_max = true;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    let nv = if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        0
                    } else {
                        d[yy as usize * w + xx as usize]
                    };
                    if nv > v {
                        is_max = false;
                    }
                }
            }
            if is_max {
                ridge.push(v);
            }
        }
    }
    if ridge.is_empty() {
        return 0.0;
    }
    ridge.sort_unstable();
    let median = ridge[(ridge.len() - 1) / 2];
    (2 * median) as f64 - 1.0
}

/// Mask-derived caption descriptors: location from the foreground
/// centroid, size from the thickness estimate and coverage, trend/shape
/// from the principal axis and anisotropy of the foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDescriptors {
    pub location: String,
    pub size: String,
    pub trend_shape: String,
}

pub fn toy_descriptors(mask: &BinaryMask) -> ToyDescriptors {
    let (w, h) = (mask.width(), mask.height());
    let fg: Vec<(f64, f64)> = mask
        .pixels()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p == 255)
        .map(|(i, _)| ((i % w) as f64, (i / w) as f64))
        .collect();
    if fg.is_empty() {
        return ToyDescriptors {
            location: "no curvilinear objects visible".into(),
            size: "no measurable extent".into(),
            trend_shape: "no discernible trend".into(),
        };
    }
    let n = fg.len() as f64;
    let cx = fg.iter().map(|p| p.0).sum::<f64>() / n / (w as f64 - 1.0);
    let cy = fg.iter().map(|p| p.1).sum::<f64>() / n / (h as f64 - 1.0);
    let location = if (cx - 0.5).abs() < 0.12 && (cy - 0.5).abs() < 0.12 {
        "in the center of the image".to_string()
    } else {
        let v = if cy < 0.5 { "top" } else { "bottom" };
        let hpos = if cx < 0.5 { "left" } else { "right" };
        format!("in the {v} {hpos} of the image")
    };

    let width_est = measure_thickness(mask).max(1.0) as usize;
    let pct = (mask.fg_fraction() * 100.0).round() as usize;
    let coverage = if pct == 0 {
        "under 1%".to_string()
    } else {
        format!("about {pct}%")
    };
    let size =
        format!("curvilinear objects about {width_est} px wide, covering {coverage} of the image");

    let mx = fg.iter().map(|p| p.0).sum::<f64>() / n;
    let my = fg.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for (x, y) in &fg {
        cxx += (x - mx) * (x - mx);
        cyy += (y - my) * (y - my);
        cxy += (x - mx) * (y - my);
    }
    let angle = 0.5 * (2.0 * cxy).atan2(cxx - cyy);
    let deg = angle.to_degrees().abs();
    let direction = if deg <= 22.5 {
        "horizontal"
    } else if deg >= 67.5 {
        "vertical"
    } else {
        "diagonal"
    };
    let tr = cxx + cyy;
    let det = ((cxx - cyy) * (cxx - cyy) + 4.0 * cxy * cxy).sqrt();
    let lmax = (tr + det) / 2.0;
    let lmin = (tr - det) / 2.0;
    let ratio = if lmax > 0.0 {
        (lmin / lmax).max(0.0)
    } else {
        0.0
    };
    let winding = if ratio <= 0.05 {
        "nearly straight"
    } else if ratio <= 0.25 {
        "gently winding"
    } else {
        "strongly winding"
    };
    let trend_shape = format!("mostly {direction}, {winding}");

    ToyDescriptors {
        location,
        size,
        trend_shape,
    }
}

fn texture_bucket(level: f64) -> &'static str {
    if level < 0.08 {
        "faint"
    } else if level < 0.2 {
        "soft"
    } else {
        "strong"
    }
}

pub(crate) fn records_for_mask(
    params: &ToyGenParams,
    mask: &BinaryMask,
) -> (CaptionRecord, CaptionRecord) {
    let d = toy_descriptors(mask);
    let segmap = CaptionRecord {
        overview: "GT semantic map of a synthetic curvilinear object image".into(),
        dataset: params.dataset_field(),
        location: d.location.clone(),
        size: d.size.clone(),
        trend_shape: d.trend_shape.clone(),
        background: None,
        kind: RecordKind::Segmap,
    };
    let image = CaptionRecord {
        overview: "A grayscale image of dark curvilinear objects".into(),
        dataset: params.dataset_field(),
        location: d.location,
        size: d.size,
        trend_shape: d.trend_shape,
        background: Some(format!(
            "smooth gray background with {} texture and a gentle intensity gradient",
            texture_bucket(params.texture_level)
        )),
        kind: RecordKind::Image,
    };
    (segmap, image)
}

/// Generate `n` paired samples under `root` (images/, masks/,
/// captions.jsonl, manifest.json). Per-sample seeds derive from `seed`,
/// so the corpus is byte-identical across reruns.
pub fn toy_generate(
    params: &ToyGenParams,
    n: usize,
    root: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    params.validate()?;
    if n < 1 {
        return Err(Error::Config("need at least one sample".into()));
    }
    std::fs::create_dir_all(root.join("images")).map_err(|e| Error::io(root, e))?;
    std::fs::create_dir_all(root.join("masks")).map_err(|e| Error::io(root, e))?;

    let mut samples = Vec::with_capacity(n);
    let mut caption_entries = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut rng = derive_rng(seed, i as u64);
        let (mask, _) = render_mask(params, &mut rng);
        let image = render_image(params, &mask, &mut rng);
        let id = format!("sample_{i:05}");
        let rel_img = format!("images/{id}.png");
        let rel_mask = format!("masks/{id}.png");
        imageio::save_gray_png(&root.join(&rel_img), &image)?;
        imageio::save_mask_png(&root.join(&rel_mask), &mask)?;
        let (seg_rec, img_rec) = records_for_mask(params, &mask);
        caption_entries.push((id.clone(), seg_rec));
        caption_entries.push((id.clone(), img_rec));
        samples.push(SampleEntry {
            id,
            image_path: rel_img,
            mask_path: rel_mask,
            split: Split::Unassigned,
        });
    }
    captions::write_jsonl(&root.join("captions.jsonl"), &caption_entries)?;
    let manifest = DatasetManifest {
        name: params.dataset_name.clone(),
        canonical: params.size,
        samples,
        root: root.to_path_buf(),
    };
    manifest.save(root)?;
    Ok(manifest)
}
