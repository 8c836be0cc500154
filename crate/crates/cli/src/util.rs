//! Shared plumbing for the subcommands: dataset-to-training-item
//! conversion, checkpoint paths, and the output-directory lock.

use std::fs;
use std::path::{Path, PathBuf};

use curvex::captions::{record_caption, truncate_caption};
use curvex::data::LoadedSample;
use curvex::error::{Error, Result};
use curvex::nets::{ControlItem, TrainItem};
use curvex::segeval::SegSample;
use curvex::tensor::Tensor;

/// Mask pixels in the generator's signed domain.
pub fn mask_as_signed_image(sample: &LoadedSample) -> Tensor {
    sample.mask.to_unit_tensor().map(|v| v * 2.0 - 1.0)
}

/// Base-phase items: every sample contributes its semantic map (as an
/// image, captioned by the segmap record) and its photograph (captioned
/// by the image record).
pub fn base_items(samples: &[LoadedSample], max_tokens: usize) -> Vec<TrainItem> {
    let mut items = Vec::with_capacity(2 * samples.len());
    for s in samples {
        items.push(TrainItem {
            image: mask_as_signed_image(s),
            caption: truncate_caption(&record_caption(&s.segmap_caption), max_tokens),
        });
        items.push(TrainItem {
            image: s.image.clone(),
            caption: truncate_caption(&record_caption(&s.image_caption), max_tokens),
        });
    }
    items
}

/// Control-phase items: image, image caption, and the conditioning mask.
pub fn control_items(samples: &[LoadedSample], max_tokens: usize) -> Vec<ControlItem> {
    samples
        .iter()
        .map(|s| ControlItem {
            image: s.image.clone(),
            caption: truncate_caption(&record_caption(&s.image_caption), max_tokens),
            segmap: s.mask.to_unit_tensor(),
        })
        .collect()
}

pub fn seg_samples(samples: &[LoadedSample]) -> Vec<SegSample> {
    samples
        .iter()
        .map(|s| SegSample {
            image: s.image.clone(),
            mask: s.mask.clone(),
        })
        .collect()
}

/// Exclusive lock on an output directory; removed on drop. A leftover
/// lock from a crashed run must be deleted manually.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".curvex.lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        fs::remove_file(&self.path).ok();
    }
}
