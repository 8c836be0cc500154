//! The denoising network family: a conditional UNet-style noise predictor
//! with cross-attention text conditioning, and a control branch that copies
//! the encoder, swaps its residual-block normalization for
//! spatially-adaptive normalization fed by multi-scale semantic-map
//! features, and feeds the base decoder through zero-initialized bridges.

mod checkpoint;
mod extractor;
mod model;
mod spade;
mod text;
mod train;

pub use checkpoint::{load_weights, save_weights, CheckpointMeta};
pub use extractor::{condition_feature_extractor, SegmapPyramid};
pub use model::{base_predict, scp_predict, BasePredictor, ScpPredictor};
pub use spade::{spade_gradient_check, spade_graph, spade_normalize, SpadeParams};
pub use text::{text_encode, tokenize, TextEmbedding, TextVocab};
pub use train::{train_base, train_control, ControlItem, Hyperparams, TrainItem, TrainLog};

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PadMode;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{graph::ParamKey, rng};

/// Parameter-store ids used in `ParamKey.set`.
pub const SET_BASE: usize = 0;
pub const SET_CONTROL: usize = 1;

#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, name-addressable collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamTensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamTensor {
            name: name.clone(),
            value,
        });
        let slot = self.entries.len() - 1;
        self.index.insert(name, slot);
        slot
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let slot = self
            .slot(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[slot].value
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|s| &self.entries[s].value)
    }

    pub fn by_slot(&self, slot: usize) -> &ParamTensor {
        &self.entries[slot]
    }

    pub fn set_slot(&mut self, slot: usize, value: Tensor) {
        assert_eq!(
            self.entries[slot].value.shape(),
            value.shape(),
            "parameter shape change for {}",
            self.entries[slot].name
        );
        self.entries[slot].value = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.entries.iter()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self.entries.iter().zip(other.entries.iter()).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Which encoder stages (and optionally the middle block) replace their
/// residual-block normalization with spatially-adaptive normalization.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpadeStages {
    pub down: BTreeSet<usize>,
    pub middle: bool,
}

impl SpadeStages {
    pub fn all(stages: usize) -> Self {
        SpadeStages {
            down: (1..=stages).collect(),
            middle: true,
        }
    }

    pub fn none() -> Self {
        SpadeStages::default()
    }

    pub fn has_down(&self, stage: usize) -> bool {
        self.down.contains(&stage)
    }

    /// Parse a spec like `down1,down3,middle` (or `none`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = SpadeStages::none();
        let trimmed = text.trim();
        if trimmed.is_empty() || trimmed == "none" {
            return Ok(out);
        }
        for tok in trimmed.split(',') {
            let tok = tok.trim().to_ascii_lowercase();
            if tok == "middle" {
                out.middle = true;
            } else if let Some(n) = tok.strip_prefix("down") {
                let stage: usize = n
                    .parse()
                    .map_err(|_| Error::Config(format!("bad stage token {tok:?}")))?;
                if stage == 0 {
                    return Err(Error::Config("stages are 1-based".into()));
                }
                out.down.insert(stage);
            } else {
                return Err(Error::Config(format!("bad stage token {tok:?}")));
            }
        }
        Ok(out)
    }
}

impl std::fmt::Display for SpadeStages {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts: Vec<String> = self.down.iter().map(|s| format!("down{s}")).collect();
        if self.middle {
            parts.push("middle".into());
        }
        if parts.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", parts.join(","))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub max_tokens: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab_size: 192,
            dim: 16,
            max_tokens: 77,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Canonical spatial resolution (input and output).
    pub canonical: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    /// One multiplier per encoder stage.
    pub channel_mults: Vec<usize>,
    /// 1-based encoder stages with a cross-attention block. The final
    /// stage may never appear here.
    pub attn_stages: BTreeSet<usize>,
    pub spade_stages: SpadeStages,
    /// Sinusoidal time-feature width; the embedding MLP doubles it.
    pub time_dim: usize,
    pub text: TextConfig,
    /// Channel width of the condition feature extractor pyramid.
    pub cond_channels: usize,
    pub pad_mode: PadMode,
    /// Give the middle block its own pyramid level at half the deepest
    /// stage resolution instead of reusing the deepest stage level.
    pub middle_dedicated_level: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            canonical: 32,
            in_channels: 1,
            base_channels: 8,
            channel_mults: vec![1, 2, 2, 4],
            attn_stages: [2, 3].into_iter().collect(),
            spade_stages: SpadeStages::all(4),
            time_dim: 16,
            text: TextConfig::default(),
            cond_channels: 8,
            pad_mode: PadMode::Zeros,
            middle_dedicated_level: true,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.channel_mults.len()
    }

    /// Channels of 1-based stage `i`.
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels * self.channel_mults[stage - 1]
    }

    /// Resolution of 1-based stage `i`.
    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.canonical >> (stage - 1)
    }

    pub fn middle_resolution(&self) -> usize {
        self.canonical >> self.stages()
    }

    /// Group count for parameter-free normalization over `channels`.
    pub fn norm_groups(&self, channels: usize) -> usize {
        channels.min(8)
    }

    /// Pyramid levels required from the condition feature extractor.
    pub fn pyramid_levels(&self) -> usize {
        if self.middle_dedicated_level {
            self.stages() + 1
        } else {
            self.stages()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.stages();
        if k < 2 {
            return Err(Error::Config("at least 2 encoder stages required".into()));
        }
        if !self.canonical.is_power_of_two() || self.canonical < (1 << k) {
            return Err(Error::Config(format!(
                "canonical resolution {} must be a power of two >= 2^{k}",
                self.canonical
            )));
        }
        if self.attn_stages.iter().any(|&s| s == 0 || s >= k) {
            return Err(Error::Config(format!(
                "cross-attention stages must lie in 1..{k}; the final encoder stage carries none"
            )));
        }
        if self.spade_stages.down.iter().any(|&s| s == 0 || s > k) {
            return Err(Error::Config(format!(
                "spade stages reference a nonexistent encoder stage (have 1..={k})"
            )));
        }
        for stage in 1..=k {
            let c = self.stage_channels(stage);
            if c % self.norm_groups(c) != 0 {
                return Err(Error::Config(format!(
                    "stage {stage} channels {c} not divisible by normalization groups"
                )));
            }
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        if self.text.max_tokens == 0 || self.text.vocab_size == 0 {
            return Err(Error::Config("text config must be non-trivial".into()));
        }
        Ok(())
    }
}

/// Base-model parameters plus (optionally) the control branch: the
/// trainable encoder copy, the condition feature extractor, the
/// spatially-adaptive normalization blocks, and the zero bridges.
#[derive(Clone, Debug)]
pub struct Weights {
    pub config: ModelConfig,
    pub base: ParamSet,
    pub control: Option<ParamSet>,
}

impl Weights {
    pub fn key(&self, set: usize, name: &str) -> ParamKey {
        let params = match set {
            SET_BASE => &self.base,
            SET_CONTROL => self.control.as_ref().expect("no control branch"),
            _ => panic!("unknown parameter set {set}"),
        };
        ParamKey {
            set,
            slot: params
                .slot(name)
                .unwrap_or_else(|| panic!("unknown parameter {name}")),
        }
    }
}

fn conv_init(rng: &mut Rng, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let n = c_out * c_in * k * k;
    Tensor::new(
        vec![c_out, c_in, k, k],
        (0..n).map(|_| rng::normal(rng) * std).collect(),
    )
}

fn linear_init(rng: &mut Rng, d_in: usize, d_out: usize) -> Tensor {
    let std = (1.0 / d_in as f64).sqrt();
    Tensor::new(
        vec![d_in, d_out],
        (0..d_in * d_out).map(|_| rng::normal(rng) * std).collect(),
    )
}

fn insert_conv(set: &mut ParamSet, rng: &mut Rng, name: &str, c_out: usize, c_in: usize, k: usize) {
    set.insert(format!("{name}.w"), conv_init(rng, c_out, c_in, k));
    set.insert(format!("{name}.b"), Tensor::zeros(vec![c_out]));
}

fn insert_zero_conv(set: &mut ParamSet, name: &str, c_out: usize, c_in: usize, k: usize) {
    set.insert(format!("{name}.w"), Tensor::zeros(vec![c_out, c_in, k, k]));
    set.insert(format!("{name}.b"), Tensor::zeros(vec![c_out]));
}

fn insert_resblock(set: &mut ParamSet, rng: &mut Rng, prefix: &str, c: usize, time_hidden: usize) {
    insert_conv(set, rng, &format!("{prefix}.conv1"), c, c, 3);
    insert_conv(set, rng, &format!("{prefix}.conv2"), c, c, 3);
    set.insert(format!("{prefix}.temb.w"), linear_init(rng, time_hidden, c));
    set.insert(format!("{prefix}.temb.b"), Tensor::zeros(vec![c]));
}

fn insert_attention(set: &mut ParamSet, rng: &mut Rng, prefix: &str, c: usize, text_dim: usize) {
    set.insert(format!("{prefix}.q.w"), linear_init(rng, c, c));
    set.insert(format!("{prefix}.k.w"), linear_init(rng, text_dim, c));
    set.insert(format!("{prefix}.v.w"), linear_init(rng, text_dim, c));
    set.insert(format!("{prefix}.out.w"), linear_init(rng, c, c));
    set.insert(format!("{prefix}.out.b"), Tensor::zeros(vec![c]));
}

fn insert_spade(set: &mut ParamSet, rng: &mut Rng, prefix: &str, c: usize, cond_ch: usize) {
    // gamma/beta heads start at zero: modulation is the identity at init
    insert_conv(set, rng, &format!("{prefix}.shared"), cond_ch, cond_ch, 3);
    insert_zero_conv(set, &format!("{prefix}.gamma"), c, cond_ch, 3);
    insert_zero_conv(set, &format!("{prefix}.beta"), c, cond_ch, 3);
}

/// Fresh base-model parameters.
pub fn init_base(config: &ModelConfig, seed: u64) -> Result<Weights> {
    config.validate()?;
    let mut rng = rng::seed_rng(seed);
    let rng = &mut rng;
    let mut set = ParamSet::new();
    let k = config.stages();
    let th = 2 * config.time_dim;

    set.insert(
        "text.embed",
        Tensor::new(
            vec![config.text.vocab_size, config.text.dim],
            (0..config.text.vocab_size * config.text.dim)
                .map(|_| rng::normal(rng) * (1.0 / config.text.dim as f64).sqrt())
                .collect(),
        ),
    );
    set.insert("time.fc1.w", linear_init(rng, config.time_dim, th));
    set.insert("time.fc1.b", Tensor::zeros(vec![th]));
    set.insert("time.fc2.w", linear_init(rng, th, th));
    set.insert("time.fc2.b", Tensor::zeros(vec![th]));

    insert_conv(
        &mut set,
        rng,
        "in_conv",
        config.stage_channels(1),
        config.in_channels,
        3,
    );
    for stage in 1..=k {
        let c = config.stage_channels(stage);
        insert_resblock(&mut set, rng, &format!("enc{stage}.rb"), c, th);
        if config.attn_stages.contains(&stage) {
            insert_attention(
                &mut set,
                rng,
                &format!("enc{stage}.attn"),
                c,
                config.text.dim,
            );
        }
        let c_next = if stage < k {
            config.stage_channels(stage + 1)
        } else {
            c
        };
        insert_conv(&mut set, rng, &format!("enc{stage}.down"), c_next, c, 3);
    }
    let c_mid = config.stage_channels(k);
    insert_resblock(&mut set, rng, "mid.rb", c_mid, th);
    for stage in (1..=k).rev() {
        let c = config.stage_channels(stage);
        let c_below = if stage == k {
            c_mid
        } else {
            config.stage_channels(stage + 1)
        };
        insert_conv(&mut set, rng, &format!("dec{stage}.up"), c, c_below, 3);
        // after skip concatenation the block sees 2c channels
        insert_conv(&mut set, rng, &format!("dec{stage}.rb.conv1"), c, 2 * c, 3);
        insert_conv(&mut set, rng, &format!("dec{stage}.rb.conv2"), c, c, 3);
        set.insert(format!("dec{stage}.rb.temb.w"), linear_init(rng, th, c));
        set.insert(format!("dec{stage}.rb.temb.b"), Tensor::zeros(vec![c]));
        // 1x1 shortcut to carry the concatenated features across the block
        insert_conv(&mut set, rng, &format!("dec{stage}.rb.skip"), c, 2 * c, 1);
    }
    // zero-initialized head: the untrained model predicts zero noise
    insert_zero_conv(
        &mut set,
        "out_conv",
        config.in_channels,
        config.stage_channels(1),
        3,
    );

    Ok(Weights {
        config: config.clone(),
        base: set,
        control: None,
    })
}

/// Attach a control branch: a trainable copy of the encoder and middle
/// block, a fresh condition feature extractor, spatially-adaptive
/// normalization parameters for the configured stages, and zero bridges.
pub fn init_control(weights: &Weights, seed: u64) -> Result<Weights> {
    let config = &weights.config;
    config.validate()?;
    let mut rng = rng::seed_rng(seed);
    let rng = &mut rng;
    let mut set = ParamSet::new();
    let k = config.stages();
    let ce = config.cond_channels;

    // condition feature extractor: one level per encoder stage, plus a
    // dedicated deepest level for the middle block when configured
    insert_conv(&mut set, rng, "cond.level0", ce, config.in_channels, 3);
    for level in 1..config.pyramid_levels() {
        insert_conv(&mut set, rng, &format!("cond.level{level}"), ce, ce, 3);
    }

    // encoder input takes the channel-concatenation of extractor features
    // and the latent state
    insert_conv(
        &mut set,
        rng,
        "in_conv",
        config.stage_channels(1),
        ce + config.in_channels,
        3,
    );

    // trainable copy of the base encoder and middle block
    let copy = |set: &mut ParamSet, name: &str| {
        set.insert(name.to_string(), weights.base.get(name).clone());
    };
    for stage in 1..=k {
        let c = config.stage_channels(stage);
        for p in [
            "conv1.w", "conv1.b", "conv2.w", "conv2.b", "temb.w", "temb.b",
        ] {
            copy(&mut set, &format!("enc{stage}.rb.{p}"));
        }
        if config.attn_stages.contains(&stage) {
            for p in ["q.w", "k.w", "v.w", "out.w", "out.b"] {
                copy(&mut set, &format!("enc{stage}.attn.{p}"));
            }
        }
        for p in ["w", "b"] {
            copy(&mut set, &format!("enc{stage}.down.{p}"));
        }
        if config.spade_stages.has_down(stage) {
            insert_spade(&mut set, rng, &format!("enc{stage}.rb.spade1"), c, ce);
            insert_spade(&mut set, rng, &format!("enc{stage}.rb.spade2"), c, ce);
        }
    }
    for p in [
        "conv1.w", "conv1.b", "conv2.w", "conv2.b", "temb.w", "temb.b",
    ] {
        copy(&mut set, &format!("mid.rb.{p}"));
    }
    if config.spade_stages.middle {
        let c_mid = config.stage_channels(k);
        insert_spade(&mut set, rng, "mid.rb.spade1", c_mid, ce);
        insert_spade(&mut set, rng, "mid.rb.spade2", c_mid, ce);
    }

    // zero bridges into the base decoder skip pathway
    for stage in 1..=k {
        let c = config.stage_channels(stage);
        insert_zero_conv(&mut set, &format!("bridge.enc{stage}"), c, c, 1);
    }
    insert_zero_conv(
        &mut set,
        "bridge.mid",
        config.stage_channels(k),
        config.stage_channels(k),
        1,
    );

    Ok(Weights {
        config: config.clone(),
        base: weights.base.clone(),
        control: Some(set),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spade_stage_parsing_roundtrip() {
        let s = SpadeStages::parse("down1,down3,middle").unwrap();
        assert!(s.has_down(1) && s.has_down(3) && !s.has_down(2) && s.middle);
        assert_eq!(s.to_string(), "down1,down3,middle");
        assert_eq!(SpadeStages::parse("none").unwrap(), SpadeStages::none());
        assert!(SpadeStages::parse("down0").is_err());
        assert!(SpadeStages::parse("sideways2").is_err());
    }

    #[test]
    fn config_rejects_final_stage_attention() {
        let cfg = ModelConfig {
            attn_stages: [4].into_iter().collect(),
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_rejects_out_of_range_spade_stage() {
        let cfg = ModelConfig {
            spade_stages: SpadeStages::parse("down5").unwrap(),
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn control_bridges_start_at_zero() {
        let cfg = ModelConfig::default();
        let base = init_base(&cfg, 1).unwrap();
        let w = init_control(&base, 2).unwrap();
        let control = w.control.as_ref().unwrap();
        for stage in 1..=4 {
            let t = control.get(&format!("bridge.enc{stage}.w"));
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        assert!(control.get("bridge.mid.w").data().iter().all(|&v| v == 0.0));
        // spade heads are zero too: identity modulation at init
        assert!(control
            .get("enc1.rb.spade1.gamma.w")
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(control
            .get("enc1.rb.spade1.beta.w")
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn control_encoder_is_a_copy_of_base() {
        let cfg = ModelConfig::default();
        let base = init_base(&cfg, 1).unwrap();
        let w = init_control(&base, 2).unwrap();
        let control = w.control.as_ref().unwrap();
        assert_eq!(
            control.get("enc2.rb.conv1.w").data(),
            w.base.get("enc2.rb.conv1.w").data()
        );
        assert_eq!(
            control.get("mid.rb.conv2.b").data(),
            w.base.get("mid.rb.conv2.b").data()
        );
    }
}
