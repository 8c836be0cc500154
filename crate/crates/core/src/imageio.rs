//! PNG I/O and conversions between tensors, gray images, and masks.
//! Masks travel as 8-bit single-channel PNG with values {0, 255}.

use std::path::Path;

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::segmap_post::{BinaryMask, GrayImage};
use crate::tensor::Tensor;

fn to_image_buffer(img: &GrayImage) -> image::GrayImage {
    image::GrayImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.pixels().to_vec(),
    )
    .expect("buffer size")
}

pub fn save_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_image_buffer(img)
        .save(path)
        .map_err(|e| Error::image(path, e))
}

pub fn load_gray_png(path: &Path) -> Result<GrayImage> {
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .into_luma8();
    GrayImage::new(img.width() as usize, img.height() as usize, img.into_raw())
}

pub fn save_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    save_gray_png(path, &mask.as_gray())
}

/// Load a mask; any value other than {0, 255} is rejected.
pub fn load_mask_png(path: &Path) -> Result<BinaryMask> {
    let g = load_gray_png(path)?;
    BinaryMask::new(g.width(), g.height(), g.pixels().to_vec())
        .map_err(|_| Error::Data(format!("{}: non-binary mask", path.display())))
}

pub fn resize_gray_bilinear(img: &GrayImage, size: usize) -> Result<GrayImage> {
    if img.width() == size && img.height() == size {
        return Ok(img.clone());
    }
    let resized = image::imageops::resize(
        &to_image_buffer(img),
        size as u32,
        size as u32,
        FilterType::Triangle,
    );
    GrayImage::new(size, size, resized.into_raw())
}

/// Nearest-neighbor keeps masks strictly two-valued.
pub fn resize_mask_nearest(mask: &BinaryMask, size: usize) -> Result<BinaryMask> {
    if mask.width() == size && mask.height() == size {
        return Ok(mask.clone());
    }
    let resized = image::imageops::resize(
        &to_image_buffer(&mask.as_gray()),
        size as u32,
        size as u32,
        FilterType::Nearest,
    );
    BinaryMask::new(size, size, resized.into_raw())
}

/// Gray intensities to the model's signed domain: [0, 255] -> [-1, 1].
pub fn gray_to_signed_tensor(img: &GrayImage) -> Tensor {
    Tensor::new(
        vec![1, img.height(), img.width()],
        img.pixels()
            .iter()
            .map(|&p| p as f64 / 127.5 - 1.0)
            .collect(),
    )
}

/// Model output back to 8-bit intensities (clamped).
pub fn signed_tensor_to_gray(t: &Tensor) -> Result<GrayImage> {
    let (c, h, w) = t.chw();
    if c != 1 {
        return Err(Error::Shape(format!("expected 1 channel, got {c}")));
    }
    GrayImage::new(
        w,
        h,
        t.data()
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect(),
    )
}

/// Horizontal panel: left image, 2px separator, right image.
pub fn side_by_side(left: &GrayImage, right: &GrayImage) -> Result<GrayImage> {
    if left.height() != right.height() {
        return Err(Error::Shape("panel height mismatch".into()));
    }
    let h = left.height();
    let w = left.width() + 2 + right.width();
    let mut pixels = vec![128u8; w * h];
    for y in 0..h {
        let row = &mut pixels[y * w..(y + 1) * w];
        row[..left.width()]
            .copy_from_slice(&left.pixels()[y * left.width()..(y + 1) * left.width()]);
        row[left.width() + 2..]
            .copy_from_slice(&right.pixels()[y * right.width()..(y + 1) * right.width()]);
    }
    GrayImage::new(w, h, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join("curvex_imageio_test");
        std::fs::create_dir_all(&dir).unwrap();
        let img = GrayImage::new(5, 3, (0u8..15).map(|v| v * 17).collect()).unwrap();
        let p = dir.join("g.png");
        save_gray_png(&p, &img).unwrap();
        assert_eq!(load_gray_png(&p).unwrap(), img);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mask_resize_stays_binary() {
        let mask = BinaryMask::new(
            8,
            8,
            (0..64).map(|i| if i % 3 == 0 { 255 } else { 0 }).collect(),
        )
        .unwrap();
        let up = resize_mask_nearest(&mask, 32).unwrap();
        assert!(up.pixels().iter().all(|&v| v == 0 || v == 255));
        let down = resize_mask_nearest(&up, 8).unwrap();
        assert_eq!(down, mask);
    }

    #[test]
    fn signed_tensor_conversion_roundtrip() {
        let img = GrayImage::new(4, 2, vec![0, 51, 102, 153, 204, 255, 13, 250]).unwrap();
        let t = gray_to_signed_tensor(&img);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = signed_tensor_to_gray(&t).unwrap();
        assert_eq!(back, img);
    }
}
