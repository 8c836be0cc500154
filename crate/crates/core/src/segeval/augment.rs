//! Traditional augmentation baselines. Every geometric transform applies
//! identically to the image and its mask; cutout zeroes the image patch
//! and sets the mask patch to background.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::segmap_post::BinaryMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    Cutout,
    FlipRotate,
}

impl std::str::FromStr for AugmentMethod {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cutout" => Ok(AugmentMethod::Cutout),
            "flip_rotate" => Ok(AugmentMethod::FlipRotate),
            other => Err(crate::error::Error::Config(format!(
                "unknown augmentation {other:?}"
            ))),
        }
    }
}

fn hflip_gray<T: Copy>(data: &[T], w: usize, h: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = data[y * w + (w - 1 - x)];
        }
    }
    out
}

fn vflip_gray<T: Copy>(data: &[T], w: usize, h: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for y in 0..h {
        out[y * w..(y + 1) * w].copy_from_slice(&data[(h - 1 - y) * w..(h - y) * w]);
    }
    out
}

/// Rotate a square buffer by `k` quarter turns counter-clockwise.
fn rot90_gray<T: Copy + Default>(data: &[T], n: usize, k: usize) -> Vec<T> {
    let mut cur = data.to_vec();
    for _ in 0..(k % 4) {
        let mut next = vec![T::default(); n * n];
        for y in 0..n {
            for x in 0..n {
                next[(n - 1 - x) * n + y] = cur[y * n + x];
            }
        }
        cur = next;
    }
    cur
}

pub(crate) fn hflip_sample(image: &Tensor, mask: &BinaryMask) -> (Tensor, BinaryMask) {
    let (_, h, w) = image.chw();
    (
        Tensor::new(image.shape().to_vec(), hflip_gray(image.data(), w, h)),
        BinaryMask::new(w, h, hflip_gray(mask.pixels(), w, h)).expect("mask"),
    )
}

pub(crate) fn vflip_sample(image: &Tensor, mask: &BinaryMask) -> (Tensor, BinaryMask) {
    let (_, h, w) = image.chw();
    (
        Tensor::new(image.shape().to_vec(), vflip_gray(image.data(), w, h)),
        BinaryMask::new(w, h, vflip_gray(mask.pixels(), w, h)).expect("mask"),
    )
}

pub(crate) fn rot90_sample(image: &Tensor, mask: &BinaryMask, k: usize) -> (Tensor, BinaryMask) {
    let (_, h, w) = image.chw();
    assert_eq!(h, w, "rotation needs square samples");
    (
        Tensor::new(image.shape().to_vec(), rot90_gray(image.data(), w, k)),
        BinaryMask::new(w, h, rot90_gray(mask.pixels(), w, k)).expect("mask"),
    )
}

pub(crate) fn cutout_sample(
    image: &Tensor,
    mask: &BinaryMask,
    x0: usize,
    y0: usize,
    cw: usize,
    ch: usize,
) -> (Tensor, BinaryMask) {
    let (_, h, w) = image.chw();
    let mut img = image.to_vec();
    let mut m = mask.pixels().to_vec();
    for y in y0..(y0 + ch).min(h) {
        for x in x0..(x0 + cw).min(w) {
            img[y * w + x] = 0.0;
            m[y * w + x] = 0;
        }
    }
    (
        Tensor::new(image.shape().to_vec(), img),
        BinaryMask::new(w, h, m).expect("mask"),
    )
}

/// Apply one randomly drawn augmentation of `method` to the paired
/// sample. The same transform hits image and mask.
pub fn baseline_augment(
    image: &Tensor,
    mask: &BinaryMask,
    method: AugmentMethod,
    rng: &mut Rng,
) -> (Tensor, BinaryMask) {
    match method {
        AugmentMethod::FlipRotate => {
            let mut out = (image.clone(), mask.clone());
            if rng.gen_bool(0.5) {
                out = hflip_sample(&out.0, &out.1);
            }
            if rng.gen_bool(0.5) {
                out = vflip_sample(&out.0, &out.1);
            }
            let k = rng.gen_range(0..4);
            rot90_sample(&out.0, &out.1, k)
        }
        AugmentMethod::Cutout => {
            let (_, h, w) = image.chw();
            let cw = rng.gen_range(w / 8..=w / 3);
            let ch = rng.gen_range(h / 8..=h / 3);
            let x0 = rng.gen_range(0..w - cw);
            let y0 = rng.gen_range(0..h - ch);
            cutout_sample(image, mask, x0, y0, cw, ch)
        }
    }
}
