//! Three-step dataset expansion: recombine caption features, generate a
//! semantic map from the caption, then generate the paired image from the
//! map and the image caption. Every synthetic pair carries provenance
//! (feature sources, seed, mask hash) and passes the plausibility filter.

use std::fs;
use std::io::{BufRead as _, Write as _};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::captions::{
    compose_img_caption, compose_sem_caption, sample_features, truncate_caption, FeaturePool,
    FeatureProvenance, SamplingMode,
};
use crate::data::{DatasetManifest, Split};
use crate::diffusion::{sample_loop, AutoencoderPair, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imageio;
use crate::nets::{text_encode, BasePredictor, ScpPredictor, TextVocab, Weights};
use crate::rng::{derive_rng, Rng};
use crate::segeval::{miou, SegSample, Segmenter};
use crate::segmap_post::{
    otsu_threshold, plausibility_filter, BinaryMask, FilterDecision, GrayImage,
};
use crate::tensor::Tensor;

/// Parameters of one expansion run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpansionSpec {
    /// Pool key; must match the caption records' dataset field.
    pub dataset_name: String,
    /// Total-size multiplier k: synthetic count is (k-1) * |orig train|.
    pub ratio: usize,
    pub master_seed: u64,
    /// Reverse steps per generation (at most the schedule's T).
    pub gen_steps: usize,
    pub rejection_limit: usize,
    pub min_fg_fraction: f64,
    pub max_fg_fraction: f64,
    pub sampling_mode: SamplingMode,
}

impl ExpansionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratio < 2 {
            return Err(Error::Config(format!(
                "expansion ratio {} must be at least 2",
                self.ratio
            )));
        }
        if self.rejection_limit == 0 {
            return Err(Error::Config("rejection limit must be positive".into()));
        }
        Ok(())
    }
}

/// Provenance of one synthetic pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairProvenance {
    pub features: FeatureProvenance,
    pub seed_index: u64,
    /// Fingerprint of the mask the image generation was conditioned on.
    pub mask_hash: String,
    pub segmap_attempts: usize,
}

/// One synthetic (image, mask) pair with its captions and provenance.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub index: usize,
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub c_sem: String,
    pub c_img: String,
    pub provenance: PairProvenance,
}

/// Generation knobs shared by both generation steps.
#[derive(Clone, Copy, Debug)]
pub struct GenOpts {
    pub steps: usize,
    pub rejection_limit: usize,
    pub min_fg_fraction: f64,
    pub max_fg_fraction: f64,
}

/// Sample a semantic map conditioned on a caption, binarize it, and
/// filter; retries up to the rejection limit and reports the attempt
/// count.
pub fn generate_segmap(
    c_sem: &str,
    weights: &Weights,
    schedule: &NoiseSchedule,
    opts: &GenOpts,
    rng: &mut Rng,
) -> Result<(BinaryMask, usize)> {
    let vocab = TextVocab::new(weights.config.text.clone());
    let text = text_encode(c_sem, &vocab, &weights.base)?;
    let predictor = BasePredictor { weights, text };
    let ae = AutoencoderPair::identity();
    let shape = (
        weights.config.in_channels,
        weights.config.canonical,
        weights.config.canonical,
    );
    let mut last_reason = String::new();
    for attempt in 1..=opts.rejection_limit {
        let sample = sample_loop(&predictor, schedule, opts.steps, shape, rng, &ae)?;
        let gray = GrayImage::from_tensor_channel_mean(&sample)?;
        let outcome = otsu_threshold(&gray)?;
        if outcome.degenerate {
            last_reason = "degenerate (constant) generation".into();
            continue;
        }
        match plausibility_filter(&outcome.mask, opts.min_fg_fraction, opts.max_fg_fraction)? {
            FilterDecision::Accept => return Ok((outcome.mask, attempt)),
            FilterDecision::Reject(reason) => {
                last_reason = format!(
                    "{} (foreground fraction {:.4})",
                    reason.code(),
                    outcome.mask.fg_fraction()
                );
            }
        }
    }
    Err(Error::DegenerateGenerator(format!(
        "no acceptable semantic map in {} attempts; last rejection: {last_reason}",
        opts.rejection_limit
    )))
}

/// Sample an image conditioned on a semantic map and a caption.
pub fn generate_image(
    s_prime: &BinaryMask,
    c_img: &str,
    weights: &Weights,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut Rng,
) -> Result<GrayImage> {
    let vocab = TextVocab::new(weights.config.text.clone());
    let text = text_encode(c_img, &vocab, &weights.base)?;
    let predictor = ScpPredictor {
        weights,
        text,
        segmap: s_prime.to_unit_tensor(),
    };
    let ae = AutoencoderPair::identity();
    let shape = (
        weights.config.in_channels,
        weights.config.canonical,
        weights.config.canonical,
    );
    let sample = sample_loop(&predictor, schedule, steps, shape, rng, &ae)?;
    imageio::signed_tensor_to_gray(&sample)
}

fn synthesize_one(
    index: usize,
    spec: &ExpansionSpec,
    segmap_weights: &Weights,
    image_weights: &Weights,
    schedule: &NoiseSchedule,
    pool: &FeaturePool,
    max_tokens: usize,
) -> Result<SynthPair> {
    let mut rng = derive_rng(spec.master_seed, index as u64);
    let features = sample_features(pool, &spec.dataset_name, spec.sampling_mode, &mut rng)?;
    let c_sem = truncate_caption(&compose_sem_caption(&features)?, max_tokens);
    let c_img = truncate_caption(&compose_img_caption(&features)?, max_tokens);
    let opts = GenOpts {
        steps: spec.gen_steps,
        rejection_limit: spec.rejection_limit,
        min_fg_fraction: spec.min_fg_fraction,
        max_fg_fraction: spec.max_fg_fraction,
    };
    let (mask, attempts) = generate_segmap(&c_sem, segmap_weights, schedule, &opts, &mut rng)?;
    let image = generate_image(
        &mask,
        &c_img,
        image_weights,
        schedule,
        spec.gen_steps,
        &mut rng,
    )?;
    Ok(SynthPair {
        index,
        image,
        mask: mask.clone(),
        c_sem,
        c_img,
        provenance: PairProvenance {
            features: features.provenance,
            seed_index: index as u64,
            mask_hash: format!("{:016x}", mask.content_hash()),
            segmap_attempts: attempts,
        },
    })
}

/// Run the full expansion: exactly `(ratio - 1) * n` synthetic pairs for
/// the `n` training samples of `orig`. A pure function of (manifest,
/// spec, weights, master seed); samples are generated in parallel under
/// derived per-sample seeds.
pub fn expand_dataset(
    orig: &DatasetManifest,
    spec: &ExpansionSpec,
    weights: &Weights,
    schedule: &NoiseSchedule,
    pool: &FeaturePool,
) -> Result<Vec<SynthPair>> {
    expand_dataset_with(orig, spec, weights, weights, schedule, pool)
}

/// Two-generator variant: semantic maps from one model, images from
/// another (both default to the same weights in [`expand_dataset`]).
pub fn expand_dataset_with(
    orig: &DatasetManifest,
    spec: &ExpansionSpec,
    segmap_weights: &Weights,
    image_weights: &Weights,
    schedule: &NoiseSchedule,
    pool: &FeaturePool,
) -> Result<Vec<SynthPair>> {
    spec.validate()?;
    image_weights
        .control
        .as_ref()
        .ok_or_else(|| Error::Config("image generation needs control-branch weights".into()))?;
    for w in [segmap_weights, image_weights] {
        if w.config.canonical != orig.canonical {
            return Err(Error::Config(format!(
                "weights canonical {} vs dataset {}",
                w.config.canonical, orig.canonical
            )));
        }
    }
    if spec.gen_steps < 1 || spec.gen_steps > schedule.t_max() {
        return Err(Error::Config(format!(
            "generation steps {} outside [1, {}]",
            spec.gen_steps,
            schedule.t_max()
        )));
    }
    let n = orig.of_split(Split::Train).count();
    if n == 0 {
        return Err(Error::Config("original manifest has no train split".into()));
    }
    let target = (spec.ratio - 1) * n;
    let max_tokens = image_weights.config.text.max_tokens;
    let pairs: Vec<Result<SynthPair>> = (0..target)
        .into_par_iter()
        .map(|i| {
            synthesize_one(
                i,
                spec,
                segmap_weights,
                image_weights,
                schedule,
                pool,
                max_tokens,
            )
        })
        .collect();
    pairs.into_iter().collect()
}

/// Mean IoU between the oracle's segmentation of each generated image and
/// the mask that conditioned it, over arbitrary (image, mask) pairs.
pub fn consistency_score_pairs(
    images: &[Tensor],
    masks: &[BinaryMask],
    oracle: &Segmenter,
) -> Result<f64> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(Error::Data(
            "consistency score needs matched non-empty pairs".into(),
        ));
    }
    let scores: Vec<Result<f64>> = images
        .par_iter()
        .zip(masks.par_iter())
        .map(|(img, mask)| {
            let pred = oracle.predict(img)?;
            miou(&pred, mask)
        })
        .collect();
    let mut acc = 0.0;
    for s in scores {
        acc += s?;
    }
    Ok(acc / images.len() as f64)
}

/// Consistency of synthetic pairs under a trained oracle.
pub fn consistency_score(pairs: &[SynthPair], oracle: &Segmenter) -> Result<f64> {
    let images: Vec<Tensor> = pairs
        .iter()
        .map(|p| imageio::gray_to_signed_tensor(&p.image))
        .collect();
    let masks: Vec<BinaryMask> = pairs.iter().map(|p| p.mask.clone()).collect();
    consistency_score_pairs(&images, &masks, oracle)
}

/// Summary of the within-dataset provenance audit.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AuditSummary {
    pub pairs: usize,
    pub features_checked: usize,
    pub cross_dataset_features: usize,
}

pub fn audit_within_dataset(pairs: &[SynthPair], expected_dataset: &str) -> AuditSummary {
    let mut s = AuditSummary {
        pairs: pairs.len(),
        ..Default::default()
    };
    for p in pairs {
        for r in p.provenance.features.refs() {
            s.features_checked += 1;
            if r.dataset != expected_dataset {
                s.cross_dataset_features += 1;
            }
        }
    }
    s
}

/// One line of the on-disk synthetic manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthManifestEntry {
    pub index: usize,
    pub image_path: String,
    pub mask_path: String,
    pub c_sem: String,
    pub c_img: String,
    pub seed: u64,
    pub provenance: PairProvenance,
}

/// Write pairs as PNGs plus a JSONL manifest under `dir`.
pub fn write_synth_dataset(dir: &Path, pairs: &[SynthPair]) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("synth_manifest.jsonl");
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for p in pairs {
        let image_path = format!("images/synth_{:05}.png", p.index);
        let mask_path = format!("masks/synth_{:05}.png", p.index);
        imageio::save_gray_png(&dir.join(&image_path), &p.image)?;
        imageio::save_mask_png(&dir.join(&mask_path), &p.mask)?;
        let entry = SynthManifestEntry {
            index: p.index,
            image_path,
            mask_path,
            c_sem: p.c_sem.clone(),
            c_img: p.c_img.clone(),
            seed: p.provenance.seed_index,
            provenance: p.provenance.clone(),
        };
        let line = serde_json::to_string(&entry)?;
        writeln!(f, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(())
}

/// Load a synthetic dataset written by [`write_synth_dataset`] as
/// segmenter training samples, verifying each stored mask hash.
pub fn load_synth_pairs(dir: &Path) -> Result<Vec<SegSample>> {
    let manifest_path = dir.join("synth_manifest.jsonl");
    let f = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: SynthManifestEntry = serde_json::from_str(&line)?;
        let img = imageio::load_gray_png(&dir.join(&entry.image_path))?;
        let mask = imageio::load_mask_png(&dir.join(&entry.mask_path))?;
        let hash = format!("{:016x}", mask.content_hash());
        if hash != entry.provenance.mask_hash {
            return Err(Error::Data(format!(
                "pair {}: mask hash {} does not match manifest {}",
                entry.index, hash, entry.provenance.mask_hash
            )));
        }
        out.push(SegSample {
            image: imageio::gray_to_signed_tensor(&img),
            mask,
        });
    }
    Ok(out)
}
