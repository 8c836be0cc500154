//! Six-field caption records, their validator, the per-dataset feature
//! pool, and caption composition.
//!
//! Records come in two kinds: `image` captions describe a photograph-like
//! sample (and carry a background field), `segmap` captions describe its
//! semantic map (no background, and the overview must say so). Features
//! recombine only within one dataset; every sampled feature carries a
//! provenance tag so that constraint stays auditable.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::tokenize;
use crate::rng::Rng;

pub const SEGMENT_SEPARATOR: &str = "; ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Image,
    Segmap,
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordKind::Image => write!(f, "image"),
            RecordKind::Segmap => write!(f, "segmap"),
        }
    }
}

/// One caption: the six textual feature fields plus the record kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub overview: String,
    pub dataset: String,
    pub location: String,
    pub size: String,
    pub trend_shape: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
    pub kind: RecordKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Violation {
    /// A semantic-map record must not carry a background field.
    BackgroundOnSegmap,
    /// A semantic-map overview must identify itself as one.
    MissingSegmapMarker,
    /// A present field may not be empty.
    EmptyField(&'static str),
}

impl Violation {
    pub fn code(&self) -> String {
        match self {
            Violation::BackgroundOnSegmap => "background-on-segmap".into(),
            Violation::MissingSegmapMarker => "missing-segmap-marker".into(),
            Violation::EmptyField(f) => format!("empty-field:{f}"),
        }
    }
}

/// Check every record invariant; an empty list means the record is valid.
pub fn validate_record(record: &CaptionRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.kind == RecordKind::Segmap {
        if record.background.is_some() {
            out.push(Violation::BackgroundOnSegmap);
        }
        let o = &record.overview;
        if !(o.contains("ground truth (GT)") || o.contains("semantic map")) {
            out.push(Violation::MissingSegmapMarker);
        }
    }
    let fields: [(&'static str, &str); 5] = [
        ("overview", &record.overview),
        ("dataset", &record.dataset),
        ("location", &record.location),
        ("size", &record.size),
        ("trend_shape", &record.trend_shape),
    ];
    for (name, value) in fields {
        if value.trim().is_empty() {
            out.push(Violation::EmptyField(name));
        }
    }
    if let Some(bg) = &record.background {
        if bg.trim().is_empty() {
            out.push(Violation::EmptyField("background"));
        }
    }
    out
}

/// Identifies the record a feature came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRef {
    pub dataset: String,
    pub pair_id: String,
    pub kind: RecordKind,
}

/// A segmap caption paired with its image caption.
#[derive(Clone, Debug)]
pub struct CaptionPair {
    pub pair_id: String,
    pub segmap: CaptionRecord,
    pub image: CaptionRecord,
}

/// Paired caption records grouped by source dataset.
#[derive(Clone, Debug, Default)]
pub struct FeaturePool {
    by_dataset: BTreeMap<String, Vec<CaptionPair>>,
}

#[derive(Serialize, Deserialize)]
struct CaptionLine {
    #[serde(flatten)]
    record: CaptionRecord,
    pair_id: String,
}

impl FeaturePool {
    /// Build a pool from (pair_id, record) entries; every segmap record
    /// must pair with exactly one image record under the same id.
    pub fn from_records(entries: Vec<(String, CaptionRecord)>) -> Result<FeaturePool> {
        let mut staging: BTreeMap<
            (String, String),
            (Option<CaptionRecord>, Option<CaptionRecord>),
        > = BTreeMap::new();
        for (pair_id, record) in entries {
            for v in validate_record(&record) {
                return Err(Error::Data(format!(
                    "record {pair_id} invalid: {}",
                    v.code()
                )));
            }
            let slot = staging
                .entry((record.dataset.clone(), pair_id.clone()))
                .or_insert((None, None));
            let target = match record.kind {
                RecordKind::Segmap => &mut slot.0,
                RecordKind::Image => &mut slot.1,
            };
            if target.is_some() {
                return Err(Error::Data(format!(
                    "duplicate {} record for pair {pair_id}",
                    record.kind
                )));
            }
            *target = Some(record);
        }
        let mut pool = FeaturePool::default();
        for ((dataset, pair_id), (segmap, image)) in staging {
            let (Some(segmap), Some(image)) = (segmap, image) else {
                return Err(Error::Data(format!(
                    "pair {pair_id} in {dataset} is missing its counterpart record"
                )));
            };
            pool.by_dataset
                .entry(dataset)
                .or_default()
                .push(CaptionPair {
                    pair_id,
                    segmap,
                    image,
                });
        }
        Ok(pool)
    }

    pub fn load_jsonl(path: &Path) -> Result<FeaturePool> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CaptionLine = serde_json::from_str(&line)?;
            entries.push((parsed.pair_id, parsed.record));
        }
        FeaturePool::from_records(entries)
    }

    pub fn dataset_names(&self) -> impl Iterator<Item = &str> {
        self.by_dataset.keys().map(String::as_str)
    }

    pub fn pairs(&self, dataset: &str) -> Option<&[CaptionPair]> {
        self.by_dataset.get(dataset).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_dataset.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_dataset.is_empty()
    }
}

/// Write records as one JSON object per line.
pub fn write_jsonl(path: &Path, entries: &[(String, CaptionRecord)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (pair_id, record) in entries {
        let line = serde_json::to_string(&CaptionLine {
            record: record.clone(),
            pair_id: pair_id.clone(),
        })?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Caption text of a single record: its own fields joined in composition
/// order, background last when present. Used for training captions.
pub fn record_caption(record: &CaptionRecord) -> String {
    let mut parts = vec![
        record.overview.as_str(),
        record.dataset.as_str(),
        record.location.as_str(),
        record.size.as_str(),
        record.trend_shape.as_str(),
    ];
    if let Some(bg) = &record.background {
        parts.push(bg);
    }
    parts.join(SEGMENT_SEPARATOR)
}

/// Whether location/size/shape come from independent records or one
/// coherent record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Each feature drawn independently (recombination).
    Mixed,
    /// Location, size, and shape come from a single record.
    Coherent,
}

/// One recombined feature set, ready for caption composition.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampledFeatures {
    pub overview_segmap: String,
    pub overview_image: String,
    pub dataset: String,
    pub location: String,
    pub size: String,
    pub trend_shape: String,
    pub background: String,
    pub provenance: FeatureProvenance,
}

/// Source record of every sampled feature.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureProvenance {
    pub overview: RecordRef,
    pub location: RecordRef,
    pub size: RecordRef,
    pub trend_shape: RecordRef,
    pub background: RecordRef,
}

impl FeatureProvenance {
    pub fn refs(&self) -> [&RecordRef; 5] {
        [
            &self.overview,
            &self.location,
            &self.size,
            &self.trend_shape,
            &self.background,
        ]
    }
}

/// Draw a feature set for `dataset_name`, sampling exclusively from that
/// dataset's records: the overview pair from the segmap/image pairing,
/// location/size/shape from the union of both kinds, the background from
/// image records.
pub fn sample_features(
    pool: &FeaturePool,
    dataset_name: &str,
    mode: SamplingMode,
    rng: &mut Rng,
) -> Result<SampledFeatures> {
    let pairs = pool
        .pairs(dataset_name)
        .ok_or_else(|| Error::Config(format!("unknown dataset {dataset_name:?}")))?;
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "dataset {dataset_name:?} has no records"
        )));
    }
    let pick_pair = |rng: &mut Rng| &pairs[rng.gen_range(0..pairs.len())];

    let overview_pair = pick_pair(rng);
    // union draw: a random pair, then one of its two records
    let union_draw = |rng: &mut Rng| -> (&CaptionPair, RecordKind) {
        let pair = &pairs[rng.gen_range(0..pairs.len())];
        let kind = if rng.gen_range(0..2) == 0 {
            RecordKind::Segmap
        } else {
            RecordKind::Image
        };
        (pair, kind)
    };
    let field_of =
        |pair: &CaptionPair, kind: RecordKind, f: fn(&CaptionRecord) -> &String| match kind {
            RecordKind::Segmap => f(&pair.segmap).clone(),
            RecordKind::Image => f(&pair.image).clone(),
        };
    let make_ref = |pair: &CaptionPair, kind: RecordKind| RecordRef {
        dataset: dataset_name.to_string(),
        pair_id: pair.pair_id.clone(),
        kind,
    };

    let (location, size, trend_shape, loc_ref, size_ref, shape_ref) = match mode {
        SamplingMode::Mixed => {
            let (lp, lk) = union_draw(rng);
            let (sp, sk) = union_draw(rng);
            let (tp, tk) = union_draw(rng);
            (
                field_of(lp, lk, |r| &r.location),
                field_of(sp, sk, |r| &r.size),
                field_of(tp, tk, |r| &r.trend_shape),
                make_ref(lp, lk),
                make_ref(sp, sk),
                make_ref(tp, tk),
            )
        }
        SamplingMode::Coherent => {
            let (p, k) = union_draw(rng);
            (
                field_of(p, k, |r| &r.location),
                field_of(p, k, |r| &r.size),
                field_of(p, k, |r| &r.trend_shape),
                make_ref(p, k),
                make_ref(p, k),
                make_ref(p, k),
            )
        }
    };
    let bg_pair = pick_pair(rng);
    let background =
        bg_pair.image.background.clone().ok_or_else(|| {
            Error::Data(format!("image record {} lacks background", bg_pair.pair_id))
        })?;

    Ok(SampledFeatures {
        overview_segmap: overview_pair.segmap.overview.clone(),
        overview_image: overview_pair.image.overview.clone(),
        dataset: dataset_name.to_string(),
        location,
        size,
        trend_shape,
        background,
        provenance: FeatureProvenance {
            overview: make_ref(overview_pair, RecordKind::Segmap),
            location: loc_ref,
            size: size_ref,
            trend_shape: shape_ref,
            background: make_ref(bg_pair, RecordKind::Image),
        },
    })
}

fn require(value: &str, what: &str) -> Result<()> {
    if value.trim().is_empty() {
        Err(Error::Data(format!("missing caption component: {what}")))
    } else {
        Ok(())
    }
}

/// Caption for semantic-map generation: five segments in fixed order.
pub fn compose_sem_caption(features: &SampledFeatures) -> Result<String> {
    require(&features.overview_segmap, "overview")?;
    require(&features.dataset, "dataset")?;
    require(&features.location, "location")?;
    require(&features.size, "size")?;
    require(&features.trend_shape, "trend_shape")?;
    Ok([
        features.overview_segmap.as_str(),
        features.dataset.as_str(),
        features.location.as_str(),
        features.size.as_str(),
        features.trend_shape.as_str(),
    ]
    .join(SEGMENT_SEPARATOR))
}

/// Caption for image generation: the segmap overview swapped for the
/// paired image overview, plus the background as a sixth segment.
pub fn compose_img_caption(features: &SampledFeatures) -> Result<String> {
    require(&features.overview_image, "overview")?;
    require(&features.dataset, "dataset")?;
    require(&features.location, "location")?;
    require(&features.size, "size")?;
    require(&features.trend_shape, "trend_shape")?;
    require(&features.background, "background")?;
    Ok([
        features.overview_image.as_str(),
        features.dataset.as_str(),
        features.location.as_str(),
        features.size.as_str(),
        features.trend_shape.as_str(),
        features.background.as_str(),
    ]
    .join(SEGMENT_SEPARATOR))
}

/// Enforce the token budget: drop the background segment (the sixth)
/// first, then trailing segments whole, and only then cut within the
/// remaining text. Token counting matches the text encoder.
pub fn truncate_caption(caption: &str, max_tokens: usize) -> String {
    let count = |s: &str| tokenize(s).len();
    if count(caption) <= max_tokens {
        return caption.to_string();
    }
    let mut segments: Vec<&str> = caption.split(SEGMENT_SEPARATOR).collect();
    if segments.len() >= 6 {
        segments.remove(5);
    }
    let mut joined = segments.join(SEGMENT_SEPARATOR);
    while count(&joined) > max_tokens && segments.len() > 1 {
        segments.pop();
        joined = segments.join(SEGMENT_SEPARATOR);
    }
    if count(&joined) > max_tokens {
        let toks: Vec<&str> = tokenize(&joined).into_iter().take(max_tokens).collect();
        joined = toks.join(" ");
    }
    joined
}
