//! Run configuration: one TOML file with sections, every field
//! defaulted, command-line flags winning over file values. Seeds are
//! always explicit so runs replay bit-identically.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use curvex::captions::SamplingMode;
use curvex::data::ToyGenParams;
use curvex::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use curvex::error::{Error, Result};
use curvex::graph::PadMode;
use curvex::nets::{Hyperparams, ModelConfig, SpadeStages, TextConfig};
use curvex::segeval::{SegConfig, SegHyperparams};

pub const OUT_ROOT_ENV: &str = "CURVEX_OUT_ROOT";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub out_root: PathBuf,
    /// Directory of the (toy or ingested) source dataset.
    pub dataset_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_root: PathBuf::from("runs/default"),
            dataset_dir: PathBuf::from("runs/default/toy"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub n: usize,
    pub train_fraction: f64,
    pub size: usize,
    pub curve_count: (usize, usize),
    pub width_px: (f64, f64),
    pub waviness: (f64, f64),
    pub texture_level: f64,
    pub contrast: (f64, f64),
    pub dataset_name: String,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let p = ToyGenParams::default();
        ToyConfig {
            n: 96,
            train_fraction: 2.0 / 3.0,
            size: p.size,
            curve_count: p.curve_count,
            width_px: (2.0, 3.0),
            waviness: (0.15, 0.5),
            texture_level: 0.22,
            contrast: (0.30, 0.50),
            dataset_name: p.dataset_name,
        }
    }
}

impl ToyConfig {
    pub fn gen_params(&self) -> ToyGenParams {
        ToyGenParams {
            size: self.size,
            curve_count: self.curve_count,
            width_px: self.width_px,
            waviness: self.waviness,
            texture_level: self.texture_level,
            contrast: self.contrast,
            dataset_name: self.dataset_name.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub canonical: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub attn_stages: BTreeSet<usize>,
    pub spade_stages: String,
    pub time_dim: usize,
    pub vocab_size: usize,
    pub text_dim: usize,
    pub max_tokens: usize,
    pub cond_channels: usize,
    pub pad_mode: PadMode,
    pub middle_dedicated_level: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            canonical: m.canonical,
            in_channels: m.in_channels,
            base_channels: m.base_channels,
            channel_mults: m.channel_mults.clone(),
            attn_stages: m.attn_stages.clone(),
            spade_stages: m.spade_stages.to_string(),
            time_dim: m.time_dim,
            vocab_size: m.text.vocab_size,
            text_dim: m.text.dim,
            max_tokens: m.text.max_tokens,
            cond_channels: m.cond_channels,
            pad_mode: m.pad_mode,
            middle_dedicated_level: m.middle_dedicated_level,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            canonical: self.canonical,
            in_channels: self.in_channels,
            base_channels: self.base_channels,
            channel_mults: self.channel_mults.clone(),
            attn_stages: self.attn_stages.clone(),
            spade_stages: SpadeStages::parse(&self.spade_stages)?,
            time_dim: self.time_dim,
            text: TextConfig {
                vocab_size: self.vocab_size,
                dim: self.text_dim,
                max_tokens: self.max_tokens,
            },
            cond_channels: self.cond_channels,
            pad_mode: self.pad_mode,
            middle_dedicated_level: self.middle_dedicated_level,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleKind::Linear,
            t_max: 80,
            beta_min: 0.002,
            beta_max: 0.12,
        }
    }
}

impl ScheduleSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.t_max, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_interval: usize,
    /// Images sampled per evaluation for the feature-distance log.
    pub eval_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 2200,
            batch_size: 8,
            lr: 2e-3,
            eval_interval: 500,
            eval_samples: 8,
        }
    }
}

impl TrainSection {
    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            eval_interval: self.eval_interval,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionSection {
    pub ratio: usize,
    pub gen_steps: usize,
    pub rejection_limit: usize,
    pub min_fg_fraction: f64,
    pub max_fg_fraction: f64,
    pub sampling_mode: SamplingMode,
    /// Side-by-side (segmap | image) panels written per expansion.
    pub panels: usize,
}

impl Default for ExpansionSection {
    fn default() -> Self {
        ExpansionSection {
            ratio: 5,
            gen_steps: 80,
            rejection_limit: 40,
            min_fg_fraction: 0.01,
            max_fg_fraction: 0.5,
            sampling_mode: SamplingMode::Mixed,
            panels: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterSection {
    pub base_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dice_weight: f64,
}

impl Default for SegmenterSection {
    fn default() -> Self {
        let h = SegHyperparams::default();
        SegmenterSection {
            base_channels: 6,
            epochs: h.epochs,
            batch_size: h.batch_size,
            lr: h.lr,
            dice_weight: h.dice_weight,
        }
    }
}

impl SegmenterSection {
    pub fn seg_config(&self, canonical: usize) -> SegConfig {
        SegConfig {
            canonical,
            base_channels: self.base_channels,
        }
    }

    pub fn hyperparams(&self) -> SegHyperparams {
        SegHyperparams {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            dice_weight: self.dice_weight,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub methods: Vec<String>,
    pub ratios: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            methods: vec!["original".into(), "scp".into()],
            ratios: vec![5],
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedsSection {
    pub toygen: u64,
    pub split: u64,
    pub train_base: u64,
    pub train_control: u64,
    pub expand: u64,
    pub oracle: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection {
            toygen: 7,
            split: 7,
            train_base: 21,
            train_control: 22,
            expand: 77,
            oracle: 31,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub toy: ToyConfig,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub train_base: TrainSection,
    pub train_control: TrainSection,
    pub expansion: ExpansionSection,
    pub segmenter: SegmenterSection,
    pub eval: EvalSection,
    pub seeds: SeedsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: PathsConfig::default(),
            toy: ToyConfig::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            train_base: TrainSection::default(),
            train_control: TrainSection {
                steps: 2400,
                lr: 3e-3,
                eval_interval: 0,
                ..TrainSection::default()
            },
            expansion: ExpansionSection::default(),
            segmenter: SegmenterSection::default(),
            eval: EvalSection::default(),
            seeds: SeedsSection::default(),
        }
    }
}

impl RunConfig {
    /// Load from TOML (or defaults when no file is given) and apply the
    /// output-root environment override.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
            cfg.paths.out_root = PathBuf::from(root);
        }
        Ok(cfg)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths.out_root.join("checkpoints")
    }

    pub fn synth_dir(&self, ratio: usize) -> PathBuf {
        self.paths.out_root.join(format!("synth_r{ratio}"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.paths.out_root.join("reports")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.paths.out_root.join("plots")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = RunConfig::default();
        cfg.model.model_config().unwrap();
        cfg.schedule.schedule().unwrap();
        cfg.toy.gen_params().validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_with_overrides() {
        let text = r#"
[toy]
n = 12
size = 16

[model]
canonical = 16
base_channels = 4
channel_mults = [1, 2]
attn_stages = [1]
spade_stages = "down1,down2,middle"
cond_channels = 4

[expansion]
ratio = 3
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.toy.n, 12);
        assert_eq!(cfg.expansion.ratio, 3);
        let m = cfg.model.model_config().unwrap();
        assert_eq!(m.stages(), 2);
        assert!(m.spade_stages.middle);
        // untouched sections keep defaults
        assert_eq!(cfg.eval.seeds, vec![1, 2, 3]);
    }
}
