//! Dataset layout, ingestion at a canonical resolution, splits, and the
//! procedural toy corpus.
//!
//! On-disk layout of every dataset:
//!   <root>/images/*.png        8-bit grayscale images
//!   <root>/masks/*.png         8-bit masks, values {0, 255}
//!   <root>/captions.jsonl      two caption records per sample (pair_id)
//!   <root>/manifest.json       sample list, splits, canonical resolution

mod toygen;

pub use toygen::{measure_thickness, toy_descriptors, toy_generate, ToyGenParams};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom as _;
use serde::{Deserialize, Serialize};

use crate::captions::{validate_record, CaptionRecord, FeaturePool};
use crate::error::{Error, Result};
use crate::imageio;
use crate::rng::seed_rng;
use crate::segmap_post::BinaryMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Unassigned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub split: Split,
}

/// Paired (image, mask, caption) samples with split and provenance
/// metadata; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub canonical: usize,
    pub samples: Vec<SampleEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join("manifest.json");
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<DatasetManifest> {
        let path = root.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest = serde_json::from_slice(&bytes)?;
        m.root = root.to_path_buf();
        Ok(m)
    }

    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn captions_path(&self) -> PathBuf {
        self.root.join("captions.jsonl")
    }

    pub fn feature_pool(&self) -> Result<FeaturePool> {
        FeaturePool::load_jsonl(&self.captions_path())
    }
}

/// A fully loaded sample: signed-domain image, binary mask, and the two
/// caption records.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub split: Split,
    pub image: Tensor,
    pub mask: BinaryMask,
    pub segmap_caption: CaptionRecord,
    pub image_caption: CaptionRecord,
}

/// Load every sample of `manifest` (optionally one split only) into
/// memory, paired with its caption records.
pub fn load_samples(manifest: &DatasetManifest, split: Option<Split>) -> Result<Vec<LoadedSample>> {
    let pool = manifest.feature_pool()?;
    let mut by_id: BTreeMap<&str, (&CaptionRecord, &CaptionRecord)> = BTreeMap::new();
    for name in pool.dataset_names().collect::<Vec<_>>() {
        for pair in pool.pairs(name).unwrap() {
            by_id.insert(&pair.pair_id, (&pair.segmap, &pair.image));
        }
    }
    let mut out = Vec::new();
    for entry in &manifest.samples {
        if let Some(want) = split {
            if entry.split != want {
                continue;
            }
        }
        let (seg_rec, img_rec) = by_id
            .get(entry.id.as_str())
            .ok_or_else(|| Error::Data(format!("sample {} has no caption pair", entry.id)))?;
        let img = imageio::load_gray_png(&manifest.root.join(&entry.image_path))?;
        let mask = imageio::load_mask_png(&manifest.root.join(&entry.mask_path))?;
        if img.width() != manifest.canonical || mask.width() != manifest.canonical {
            return Err(Error::Data(format!(
                "sample {} not at canonical resolution {}",
                entry.id, manifest.canonical
            )));
        }
        out.push(LoadedSample {
            id: entry.id.clone(),
            split: entry.split,
            image: imageio::gray_to_signed_tensor(&img),
            mask,
            segmap_caption: (*seg_rec).clone(),
            image_caption: (*img_rec).clone(),
        });
    }
    Ok(out)
}

fn stem_of(path: &Path) -> Option<String> {
    path.file_stem().map(|s| s.to_string_lossy().into_owned())
}

/// Ingest a dataset in the documented layout: resize images (bilinear)
/// and masks (nearest-neighbor) to the canonical size, validate captions,
/// and write the normalized copy plus manifest under `dst_root`.
pub fn ingest_dataset(
    src_root: &Path,
    dst_root: &Path,
    canonical: usize,
    name: &str,
) -> Result<DatasetManifest> {
    let images_dir = src_root.join("images");
    let masks_dir = src_root.join("masks");
    let captions = src_root.join("captions.jsonl");
    for (what, p) in [("images/", &images_dir), ("masks/", &masks_dir)] {
        if !p.is_dir() {
            return Err(Error::Data(format!(
                "{} missing {what} directory",
                src_root.display()
            )));
        }
    }
    if !captions.is_file() {
        return Err(Error::Data(format!(
            "{} missing captions.jsonl",
            src_root.display()
        )));
    }

    let list_pngs = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        v.sort();
        Ok(v)
    };
    let images = list_pngs(&images_dir)?;
    let masks = list_pngs(&masks_dir)?;
    let image_stems: Vec<String> = images.iter().filter_map(|p| stem_of(p)).collect();
    let mask_stems: Vec<String> = masks.iter().filter_map(|p| stem_of(p)).collect();
    let unpaired: Vec<&String> = image_stems
        .iter()
        .filter(|s| !mask_stems.contains(s))
        .chain(mask_stems.iter().filter(|s| !image_stems.contains(s)))
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::Data(format!(
            "unpaired image/mask files: {}",
            unpaired
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    if images.is_empty() {
        return Err(Error::Data("dataset has no samples".into()));
    }

    // captions must parse, pair, and validate
    let pool = FeaturePool::load_jsonl(&captions)?;
    for ds in pool.dataset_names().collect::<Vec<_>>() {
        for pair in pool.pairs(ds).unwrap() {
            for rec in [&pair.segmap, &pair.image] {
                let v = validate_record(rec);
                if !v.is_empty() {
                    return Err(Error::Data(format!(
                        "caption {} invalid: {}",
                        pair.pair_id,
                        v.iter().map(|v| v.code()).collect::<Vec<_>>().join(",")
                    )));
                }
            }
        }
    }

    fs::create_dir_all(dst_root.join("images")).map_err(|e| Error::io(dst_root, e))?;
    fs::create_dir_all(dst_root.join("masks")).map_err(|e| Error::io(dst_root, e))?;
    let mut samples = Vec::new();
    for (img_path, mask_path) in images.iter().zip(&masks) {
        let id = stem_of(img_path).unwrap();
        let img = imageio::load_gray_png(img_path)?;
        let mask = imageio::load_mask_png(mask_path)?;
        let img = imageio::resize_gray_bilinear(&img, canonical)?;
        let mask = imageio::resize_mask_nearest(&mask, canonical)?;
        let rel_img = format!("images/{id}.png");
        let rel_mask = format!("masks/{id}.png");
        imageio::save_gray_png(&dst_root.join(&rel_img), &img)?;
        imageio::save_mask_png(&dst_root.join(&rel_mask), &mask)?;
        samples.push(SampleEntry {
            id,
            image_path: rel_img,
            mask_path: rel_mask,
            split: Split::Unassigned,
        });
    }
    if src_root != dst_root {
        fs::copy(&captions, dst_root.join("captions.jsonl"))
            .map_err(|e| Error::io(&captions, e))?;
    }
    let manifest = DatasetManifest {
        name: name.to_string(),
        canonical,
        samples,
        root: dst_root.to_path_buf(),
    };
    manifest.save(dst_root)?;
    Ok(manifest)
}

/// Randomly assign train/val splits. Both sides must end up non-empty.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n = manifest.samples.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "split of {n} samples at {train_fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed_rng(seed);
    order.shuffle(&mut rng);
    let mut out = manifest.clone();
    for (rank, &idx) in order.iter().enumerate() {
        out.samples[idx].split = if rank < n_train {
            Split::Train
        } else {
            Split::Val
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captions::record_caption;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("curvex_data_{name}"));
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn toy_roundtrip_through_ingest() {
        let dir = tmp("roundtrip");
        let params = ToyGenParams {
            size: 32,
            ..Default::default()
        };
        let manifest = toy_generate(&params, 4, &dir, 9).unwrap();
        assert_eq!(manifest.samples.len(), 4);

        let dst = tmp("roundtrip_dst");
        let ingested = ingest_dataset(&dir, &dst, 32, "toycurves").unwrap();
        assert_eq!(ingested.samples.len(), 4);
        let samples = load_samples(&ingested, None).unwrap();
        for s in &samples {
            assert!(validate_record(&s.segmap_caption).is_empty());
            assert!(validate_record(&s.image_caption).is_empty());
            assert!(!record_caption(&s.segmap_caption).is_empty());
        }
        std::fs::remove_dir_all(&dir).ok();
        std::fs::remove_dir_all(&dst).ok();
    }

    #[test]
    fn ingest_rejects_unpaired_and_nonbinary() {
        let dir = tmp("unpaired");
        let params = ToyGenParams {
            size: 16,
            ..Default::default()
        };
        toy_generate(&params, 2, &dir, 1).unwrap();
        // drop one mask
        let victim = dir.join("masks/sample_00001.png");
        std::fs::remove_file(&victim).unwrap();
        let dst = tmp("unpaired_dst");
        let err = ingest_dataset(&dir, &dst, 16, "x");
        assert!(matches!(err, Err(Error::Data(_))));

        // put back a non-binary mask
        let g = crate::segmap_post::GrayImage::new(16, 16, vec![128; 256]).unwrap();
        imageio::save_gray_png(&victim, &g).unwrap();
        let err = ingest_dataset(&dir, &dst, 16, "x");
        assert!(matches!(err, Err(Error::Data(_))));
        std::fs::remove_dir_all(&dir).ok();
        std::fs::remove_dir_all(&dst).ok();
    }

    #[test]
    fn split_arithmetic_and_determinism() {
        let dir = tmp("split");
        let params = ToyGenParams {
            size: 16,
            ..Default::default()
        };
        let manifest = toy_generate(&params, 10, &dir, 3).unwrap();
        let a = split_dataset(&manifest, 0.8, 42).unwrap();
        let b = split_dataset(&manifest, 0.8, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.of_split(Split::Train).count(), 8);
        assert_eq!(a.of_split(Split::Val).count(), 2);
        // union is everything, intersection empty by construction
        assert!(a.samples.iter().all(|s| s.split != Split::Unassigned));
        assert!(split_dataset(&manifest, 0.01, 1).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
