//! Post-processing of generated semantic maps: histogram-based
//! binarization that maximizes between-class variance, and a plausibility
//! filter guarding the pipeline against vacuous or saturated generations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Data(format!(
                "gray image {width}x{height} with {} pixels",
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    /// Collapse a [-1, 1] tensor to 8-bit intensities by channel mean.
    pub fn from_tensor_channel_mean(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw();
        let hw = h * w;
        let mut pixels = Vec::with_capacity(hw);
        for i in 0..hw {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += t.data()[ch * hw + i];
            }
            let mean = acc / c as f64;
            pixels.push(((mean + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
        }
        GrayImage::new(w, h, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

/// Two-valued mask; 255 marks the curvilinear foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Data(format!(
                "mask {width}x{height} with {} pixels",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|&&v| v != 0 && v != 255) {
            return Err(Error::Data(format!("non-binary mask value {v}")));
        }
        Ok(BinaryMask {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn fg_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v == 255).count()
    }

    pub fn fg_fraction(&self) -> f64 {
        self.fg_count() as f64 / self.pixels.len() as f64
    }

    /// Foreground as 1.0, background as 0.0, shaped [1, H, W].
    pub fn to_unit_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.pixels
                .iter()
                .map(|&v| if v == 255 { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn as_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.clone(),
        }
    }

    /// Content fingerprint for pairing-integrity checks.
    pub fn content_hash(&self) -> u64 {
        crate::rng::fnv1a64(&self.pixels)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OtsuOutcome {
    pub threshold: u8,
    pub mask: BinaryMask,
    /// Set when the histogram admits no split with two non-empty classes
    /// (a constant image); the mask is then all background.
    pub degenerate: bool,
}

/// Between-class variance comparison for a candidate threshold, kept in
/// exact integer arithmetic so ties resolve deterministically: the score
/// is (s0*n1 - s1*n0)^2 / (n0*n1), compared by cross-multiplication.
fn better(num_a: u128, den_a: u128, num_b: u128, den_b: u128) -> bool {
    // a/b > c/d  <=>  a*d > c*b  (denominators positive)
    num_a * den_b > num_b * den_a
}

/// Threshold maximizing the between-class variance of the 256-bin
/// histogram; pixels strictly above the threshold become foreground. Among
/// equal-variance thresholds the smallest wins.
pub fn otsu_threshold(img: &GrayImage) -> Result<OtsuOutcome> {
    let n_total = img.pixels.len();
    // exact path bound: scores fit u128 for any image up to 512x512
    debug_assert!(n_total <= 512 * 512, "image too large for exact scoring");
    let mut hist = [0u64; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let total_sum: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();

    let mut best: Option<(u8, u128, u128)> = None;
    let mut n0: u64 = 0;
    let mut s0: u64 = 0;
    for t in 0..255usize {
        n0 += hist[t];
        s0 += t as u64 * hist[t];
        let n1 = n_total as u64 - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_sum - s0;
        let a = s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128;
        let num = (a * a) as u128;
        let den = n0 as u128 * n1 as u128;
        match &best {
            Some((_, bn, bd)) if !better(num, den, *bn, *bd) => {}
            _ => best = Some((t as u8, num, den)),
        }
    }

    match best {
        Some((threshold, _, _)) => {
            let pixels = img
                .pixels
                .iter()
                .map(|&p| if p > threshold { 255 } else { 0 })
                .collect();
            Ok(OtsuOutcome {
                threshold,
                mask: BinaryMask::new(img.width, img.height, pixels)?,
                degenerate: false,
            })
        }
        None => {
            // constant image: no valid split, return all background
            Ok(OtsuOutcome {
                threshold: img.pixels[0],
                mask: BinaryMask::new(img.width, img.height, vec![0; n_total])?,
                degenerate: true,
            })
        }
    }
}

/// Independent exhaustive search over all 256 thresholds with per-pixel
/// class sums; shares no code with [`otsu_threshold`]'s histogram path.
/// Lives here so unit tests and the acceptance suite use the same oracle.
pub fn otsu_brute_force_oracle(img: &GrayImage) -> Option<u8> {
    let mut best: Option<(u8, u128, u128)> = None;
    for t in 0..255u16 {
        let mut n0: u64 = 0;
        let mut s0: u64 = 0;
        let mut n1: u64 = 0;
        let mut s1: u64 = 0;
        for &p in &img.pixels {
            if (p as u16) <= t {
                n0 += 1;
                s0 += p as u64;
            } else {
                n1 += 1;
                s1 += p as u64;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let a = s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128;
        let num = (a * a) as u128;
        let den = n0 as u128 * n1 as u128;
        match &best {
            Some((_, bn, bd)) if !better(num, den, *bn, *bd) => {}
            _ => best = Some((t as u8, num, den)),
        }
    }
    best.map(|(t, _, _)| t)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    Reject(FilterReason),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterReason {
    /// Foreground fraction below the minimum.
    Empty,
    /// Foreground fraction above the maximum.
    Saturated,
}

impl FilterReason {
    pub fn code(&self) -> &'static str {
        match self {
            FilterReason::Empty => "empty",
            FilterReason::Saturated => "saturated",
        }
    }
}

/// Accept a mask iff its foreground fraction lies in
/// `[min_fg_fraction, max_fg_fraction]` (inclusive).
pub fn plausibility_filter(
    mask: &BinaryMask,
    min_fg_fraction: f64,
    max_fg_fraction: f64,
) -> Result<FilterDecision> {
    if !(min_fg_fraction > 0.0 && min_fg_fraction < max_fg_fraction && max_fg_fraction < 1.0) {
        return Err(Error::Config(format!(
            "plausibility bounds must satisfy 0 < min < max < 1, got [{min_fg_fraction}, {max_fg_fraction}]"
        )));
    }
    let f = mask.fg_fraction();
    Ok(if f < min_fg_fraction {
        FilterDecision::Reject(FilterReason::Empty)
    } else if f > max_fg_fraction {
        FilterDecision::Reject(FilterReason::Saturated)
    } else {
        FilterDecision::Accept
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seed_rng, uniform_usize};
    use proptest::prelude::*;

    fn random_gray(rng: &mut crate::rng::Rng, w: usize, h: usize) -> GrayImage {
        GrayImage::new(
            w,
            h,
            (0..w * h)
                .map(|_| uniform_usize(rng, 0, 255) as u8)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_valued_image_separates_exactly() {
        let mut rng = seed_rng(3);
        for _ in 0..20 {
            let pixels: Vec<u8> = (0..256)
                .map(|_| {
                    if uniform_usize(&mut rng, 0, 9) < 3 {
                        200
                    } else {
                        10
                    }
                })
                .collect();
            if !pixels.contains(&200) || !pixels.contains(&10) {
                continue;
            }
            let img = GrayImage::new(16, 16, pixels.clone()).unwrap();
            let out = otsu_threshold(&img).unwrap();
            assert!(
                out.threshold >= 10 && out.threshold < 200,
                "t = {}",
                out.threshold
            );
            for (m, p) in out.mask.pixels().iter().zip(&pixels) {
                assert_eq!(*m == 255, *p == 200);
            }
            assert_eq!(Some(out.threshold), otsu_brute_force_oracle(&img));
        }
    }

    #[test]
    fn already_binary_image_is_fixed_point() {
        let mut rng = seed_rng(5);
        let pixels: Vec<u8> = (0..64)
            .map(|_| {
                if uniform_usize(&mut rng, 0, 4) == 0 {
                    255
                } else {
                    0
                }
            })
            .collect();
        let img = GrayImage::new(8, 8, pixels.clone()).unwrap();
        let out = otsu_threshold(&img).unwrap();
        assert_eq!(out.mask.pixels(), pixels.as_slice());

        // idempotence: rerunning on the mask reproduces it
        let again = otsu_threshold(&out.mask.as_gray()).unwrap();
        assert_eq!(again.mask, out.mask);
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = GrayImage::new(4, 4, vec![77; 16]).unwrap();
        let out = otsu_threshold(&img).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.mask.fg_count(), 0);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_images() {
        let mut rng = seed_rng(11);
        for _ in 0..30 {
            let img = random_gray(&mut rng, 32, 32);
            let out = otsu_threshold(&img).unwrap();
            assert_eq!(Some(out.threshold), otsu_brute_force_oracle(&img));
        }
    }

    #[test]
    fn filter_bounds_are_inclusive_and_validated() {
        let mask = BinaryMask::new(10, 10, {
            let mut p = vec![0u8; 100];
            for v in p.iter_mut().take(5) {
                *v = 255;
            }
            p
        })
        .unwrap();
        // exactly the min fraction: accepted
        assert_eq!(
            plausibility_filter(&mask, 0.05, 0.5).unwrap(),
            FilterDecision::Accept
        );
        assert_eq!(
            plausibility_filter(&mask, 0.06, 0.5).unwrap(),
            FilterDecision::Reject(FilterReason::Empty)
        );
        let empty = BinaryMask::new(4, 4, vec![0; 16]).unwrap();
        assert_eq!(
            plausibility_filter(&empty, 0.001, 0.5).unwrap(),
            FilterDecision::Reject(FilterReason::Empty)
        );
        assert!(plausibility_filter(&mask, 0.5, 0.2).is_err());
        assert!(plausibility_filter(&mask, 0.0, 0.2).is_err());
    }

    #[test]
    fn filter_matches_counting_oracle() {
        let mut rng = seed_rng(13);
        for _ in 0..100 {
            let pixels: Vec<u8> = (0..64)
                .map(|_| {
                    if uniform_usize(&mut rng, 0, 3) == 0 {
                        255
                    } else {
                        0
                    }
                })
                .collect();
            let mask = BinaryMask::new(8, 8, pixels.clone()).unwrap();
            let count = pixels.iter().filter(|&&v| v == 255).count();
            let frac = count as f64 / 64.0;
            let want = if frac < 0.1 {
                FilterDecision::Reject(FilterReason::Empty)
            } else if frac > 0.4 {
                FilterDecision::Reject(FilterReason::Saturated)
            } else {
                FilterDecision::Accept
            };
            assert_eq!(plausibility_filter(&mask, 0.1, 0.4).unwrap(), want);
        }
    }

    #[test]
    fn mask_rejects_intermediate_values() {
        assert!(BinaryMask::new(2, 2, vec![0, 128, 255, 0]).is_err());
    }

    proptest! {
        #[test]
        fn otsu_masks_are_strictly_two_valued(seed in 0u64..500) {
            let mut rng = seed_rng(seed);
            let img = random_gray(&mut rng, 8, 8);
            let out = otsu_threshold(&img).unwrap();
            prop_assert!(out.mask.pixels().iter().all(|&v| v == 0 || v == 255));
            // thresholding consistency
            for (m, p) in out.mask.pixels().iter().zip(img.pixels()) {
                prop_assert_eq!(*m == 255, *p > out.threshold);
            }
        }
    }
}
