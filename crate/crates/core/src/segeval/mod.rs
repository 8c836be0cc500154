//! Segmentation evaluation harness: pixel metrics, the fixed-epoch
//! training protocol with best-epoch selection by mean IoU, traditional
//! augmentation baselines, and a feature-distance aid for generative
//! model selection.

mod augment;
mod distance;
mod segmenter;

pub use augment::{baseline_augment, AugmentMethod};
pub use distance::{feature_distance, FeatureDistance, Projector};
pub use segmenter::{
    load_segmenter, save_segmenter, train_segmenter, SegConfig, SegHyperparams, SegSample,
    Segmenter,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmap_post::BinaryMask;

/// Pixel confusion counts; foreground is the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::Shape(format!(
            "mask shapes {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
        match (p == 255, g == 255) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn iou_or_vacuous(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Two-class mean intersection-over-union in [0, 100]. A class with an
/// empty union (absent from both masks) counts as perfect agreement.
pub fn miou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    Ok(miou_from_counts(&c))
}

pub fn miou_from_counts(c: &ConfusionCounts) -> f64 {
    let fg = iou_or_vacuous(c.tp, c.tp + c.fp + c.fn_);
    let bg = iou_or_vacuous(c.tn, c.tn + c.fp + c.fn_);
    (fg + bg) / 2.0 * 100.0
}

/// Foreground F1 (Dice) in [0, 100]; vacuously 100 when foreground is
/// absent from both masks.
pub fn f1(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    Ok(f1_from_counts(&c))
}

pub fn f1_from_counts(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        100.0
    } else {
        2.0 * c.tp as f64 / denom as f64 * 100.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub miou: f64,
    pub f1: f64,
}

/// Metric trajectory of one training run plus its best-epoch summary.
/// Selection uses mean IoU only, even when F1 peaks elsewhere.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub ratio: Option<usize>,
    pub seed: u64,
    pub per_epoch: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub best_f1: f64,
}

impl EvalReport {
    /// Summarize a trajectory; `best_epoch` is the earliest argmax of
    /// mean IoU.
    pub fn from_trajectory(
        method: impl Into<String>,
        ratio: Option<usize>,
        seed: u64,
        per_epoch: Vec<EpochMetrics>,
    ) -> Result<EvalReport> {
        if per_epoch.is_empty() {
            return Err(Error::Data("empty metric trajectory".into()));
        }
        let mut best_epoch = 0;
        for (i, m) in per_epoch.iter().enumerate() {
            if m.miou > per_epoch[best_epoch].miou {
                best_epoch = i;
            }
        }
        Ok(EvalReport {
            method: method.into(),
            ratio,
            seed,
            best_miou: per_epoch[best_epoch].miou,
            best_f1: per_epoch[best_epoch].f1,
            best_epoch,
            per_epoch,
        })
    }
}

/// One aggregated row of the comparison table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub ratio: Option<usize>,
    pub seeds: Vec<u64>,
    pub mean_best_miou: f64,
    pub std_best_miou: f64,
    pub mean_best_f1: f64,
    pub std_best_f1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// Published vanilla-segmenter reference values kept as static context in
/// emitted reports: crack500 at its 5x expansion.
pub const REFERENCE_CONTEXT: &[(&str, f64, f64)] = &[
    ("crack500-published-original", 73.2, 81.4),
    ("crack500-published-scp-5x", 78.4, 86.3),
];

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate per-method/per-ratio reports (across seeds) into a table.
pub fn compare_methods(reports: &[EvalReport]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::Data("no reports to compare".into()));
    }
    let mut keys: Vec<(String, Option<usize>)> = reports
        .iter()
        .map(|r| (r.method.clone(), r.ratio))
        .collect();
    keys.sort();
    keys.dedup();
    let mut rows = Vec::new();
    for (method, ratio) in keys {
        let group: Vec<&EvalReport> = reports
            .iter()
            .filter(|r| r.method == method && r.ratio == ratio)
            .collect();
        let mious: Vec<f64> = group.iter().map(|r| r.best_miou).collect();
        let f1s: Vec<f64> = group.iter().map(|r| r.best_f1).collect();
        let (mm, ms) = mean_std(&mious);
        let (fm, fs) = mean_std(&f1s);
        rows.push(ComparisonRow {
            method,
            ratio,
            seeds: group.iter().map(|r| r.seed).collect(),
            mean_best_miou: mm,
            std_best_miou: ms,
            mean_best_f1: fm,
            std_best_f1: fs,
        });
    }
    Ok(ComparisonTable { rows })
}

fn ratio_label(r: Option<usize>) -> String {
    match r {
        Some(k) => format!("{k}x"),
        None => "-".to_string(),
    }
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,ratio,seeds,mean_best_miou,std_best_miou,mean_best_f1,std_best_f1\n",
        );
        for r in &self.rows {
            let seeds = r
                .seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join("|");
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
                r.method,
                ratio_label(r.ratio),
                seeds,
                r.mean_best_miou,
                r.std_best_miou,
                r.mean_best_f1,
                r.std_best_f1
            ));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| method | ratio | seeds | best mIoU (mean +/- std) | best F1 (mean +/- std) |\n|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {:.2} +/- {:.2} | {:.2} +/- {:.2} |\n",
                r.method,
                ratio_label(r.ratio),
                r.seeds.len(),
                r.mean_best_miou,
                r.std_best_miou,
                r.mean_best_f1,
                r.std_best_f1
            ));
        }
        out.push_str("\nPublished reference (vanilla segmenter, crack500):\n");
        for (label, miou, f1) in REFERENCE_CONTEXT {
            out.push_str(&format!("- {label}: mIoU {miou:.1}, F1 {f1:.1}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seed_rng, uniform_usize};

    fn mask_from_bits(bits: &[u8], w: usize, h: usize) -> BinaryMask {
        BinaryMask::new(
            w,
            h,
            bits.iter().map(|&b| if b != 0 { 255 } else { 0 }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_masks_score_100() {
        let m = mask_from_bits(&[1, 0, 0, 1, 1, 0, 0, 0, 1], 3, 3);
        assert_eq!(miou(&m, &m).unwrap(), 100.0);
        assert_eq!(f1(&m, &m).unwrap(), 100.0);
    }

    #[test]
    fn complement_on_half_mask_scores_zero() {
        let gt = mask_from_bits(&[1, 1, 0, 0], 2, 2);
        let pred = mask_from_bits(&[0, 0, 1, 1], 2, 2);
        assert_eq!(miou(&pred, &gt).unwrap(), 0.0);
        assert_eq!(f1(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn all_background_pred_against_nonempty_gt_has_zero_f1() {
        let gt = mask_from_bits(&[1, 0, 0, 0], 2, 2);
        let pred = mask_from_bits(&[0, 0, 0, 0], 2, 2);
        assert_eq!(f1(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn empty_union_is_vacuously_perfect() {
        let a = mask_from_bits(&[0, 0, 0, 0], 2, 2);
        assert_eq!(miou(&a, &a).unwrap(), 100.0);
        assert_eq!(f1(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn random_masks_match_counting_oracle_and_f1_identity() {
        let mut rng = seed_rng(17);
        for _ in 0..300 {
            let bits_a: Vec<u8> = (0..64)
                .map(|_| (uniform_usize(&mut rng, 0, 3) == 0) as u8)
                .collect();
            let bits_b: Vec<u8> = (0..64)
                .map(|_| (uniform_usize(&mut rng, 0, 3) == 0) as u8)
                .collect();
            let pred = mask_from_bits(&bits_a, 8, 8);
            let gt = mask_from_bits(&bits_b, 8, 8);

            // brute-force per-pixel oracle
            let (mut tp, mut fp, mut fnn, mut tn) = (0u64, 0u64, 0u64, 0u64);
            for i in 0..64 {
                match (bits_a[i] != 0, bits_b[i] != 0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fnn += 1,
                    (false, false) => tn += 1,
                }
            }
            let iou_fg = if tp + fp + fnn == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp + fnn) as f64
            };
            let iou_bg = if tn + fp + fnn == 0 {
                1.0
            } else {
                tn as f64 / (tn + fp + fnn) as f64
            };
            let want_miou = (iou_fg + iou_bg) / 2.0 * 100.0;
            let want_f1 = if 2 * tp + fp + fnn == 0 {
                100.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fnn) as f64 * 100.0
            };
            assert!((miou(&pred, &gt).unwrap() - want_miou).abs() < 1e-9);
            assert!((f1(&pred, &gt).unwrap() - want_f1).abs() < 1e-9);
            // F1 = 2 IoU_fg / (1 + IoU_fg)
            let identity = 2.0 * iou_fg / (1.0 + iou_fg) * 100.0;
            assert!((f1(&pred, &gt).unwrap() - identity).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = mask_from_bits(&[0; 4], 2, 2);
        let b = mask_from_bits(&[0; 9], 3, 3);
        assert!(miou(&a, &b).is_err());
    }

    #[test]
    fn best_epoch_uses_miou_only() {
        let traj = vec![
            EpochMetrics {
                miou: 50.0,
                f1: 90.0,
            },
            EpochMetrics {
                miou: 70.0,
                f1: 60.0,
            },
            EpochMetrics {
                miou: 65.0,
                f1: 99.0,
            },
        ];
        let r = EvalReport::from_trajectory("m", None, 0, traj).unwrap();
        assert_eq!(r.best_epoch, 1);
        assert_eq!(r.best_miou, 70.0);
        assert_eq!(r.best_f1, 60.0);
    }

    #[test]
    fn comparison_table_aggregates_by_seed() {
        let mk = |method: &str, ratio, seed, miou| EvalReport {
            method: method.into(),
            ratio,
            seed,
            per_epoch: vec![EpochMetrics {
                miou,
                f1: miou - 5.0,
            }],
            best_epoch: 0,
            best_miou: miou,
            best_f1: miou - 5.0,
        };
        let single = compare_methods(&[mk("original", None, 1, 70.0)]).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert_eq!(single.rows[0].mean_best_miou, 70.0);
        assert_eq!(single.rows[0].std_best_miou, 0.0);

        let table = compare_methods(&[
            mk("scp", Some(5), 1, 70.0),
            mk("scp", Some(5), 2, 74.0),
            mk("scp", Some(5), 3, 72.0),
        ])
        .unwrap();
        assert_eq!(table.rows.len(), 1);
        assert!((table.rows[0].mean_best_miou - 72.0).abs() < 1e-12);

        let md = table.to_markdown();
        assert!(md.contains("crack500-published-original"));
        assert!(md.contains("73.2"));
        assert!(md.contains("78.4"));
    }
}
