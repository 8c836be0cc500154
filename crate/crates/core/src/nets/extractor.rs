//! Condition feature extractor: turns a semantic map into a pyramid of
//! feature maps, one per encoder resolution, by a chain of 3x3
//! convolutions with stride-2 downsampling and a nonlinearity between
//! levels.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

use super::model::Bind;
use super::{ModelConfig, Weights, SET_CONTROL};

/// Multi-scale semantic-map features; `levels[l]` has spatial size
/// `canonical / 2^l` and feeds the matching encoder stage (the deepest
/// level feeds the middle block when a dedicated level is configured).
#[derive(Clone, Debug)]
pub struct SegmapPyramid {
    pub levels: Vec<Tensor>,
}

impl SegmapPyramid {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }
}

pub(super) fn build_pyramid(
    g: &mut Graph,
    bind: &mut Bind<'_>,
    config: &ModelConfig,
    segmap: NodeId,
) -> Result<Vec<NodeId>> {
    let mut levels = Vec::with_capacity(config.pyramid_levels());
    let mut cur = segmap;
    for level in 0..config.pyramid_levels() {
        let w = bind.node(g, &format!("cond.level{level}.w"));
        let b = bind.node(g, &format!("cond.level{level}.b"));
        let stride = if level == 0 { 1 } else { 2 };
        let conv = g.conv2d(cur, w, Some(b), stride, config.pad_mode);
        cur = g.silu(conv);
        levels.push(cur);
    }
    Ok(levels)
}

/// Run the extractor over a semantic map at the canonical resolution with
/// values in [0, 1].
pub fn condition_feature_extractor(segmap: &Tensor, weights: &Weights) -> Result<SegmapPyramid> {
    let config = &weights.config;
    let control = weights
        .control
        .as_ref()
        .ok_or_else(|| Error::Config("weights carry no control branch".into()))?;
    let (c, h, w) = segmap.chw();
    if c != config.in_channels || h != config.canonical || w != config.canonical {
        return Err(Error::Data(format!(
            "segmap shape {:?} does not match canonical {}x{}",
            segmap.shape(),
            config.canonical,
            config.canonical
        )));
    }
    let mut g = Graph::new();
    let mut bind = Bind::new(SET_CONTROL, control);
    let seg = g.input(segmap.clone());
    let nodes = build_pyramid(&mut g, &mut bind, config, seg)?;
    Ok(SegmapPyramid {
        levels: nodes.into_iter().map(|n| g.value(n).clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::PadMode;
    use crate::nets::{init_base, init_control, ModelConfig, SpadeStages};
    use crate::rng::{seed_rng, uniform};
    use crate::tensor::Tensor;

    fn config3() -> ModelConfig {
        ModelConfig {
            canonical: 32,
            channel_mults: vec![1, 2, 2],
            attn_stages: [2].into_iter().collect(),
            spade_stages: SpadeStages::all(3),
            ..ModelConfig::default()
        }
    }

    fn weights(cfg: &ModelConfig) -> Weights {
        let base = init_base(cfg, 1).unwrap();
        init_control(&base, 2).unwrap()
    }

    #[test]
    fn zero_segmap_fresh_extractor_gives_zero_pyramid() {
        let cfg = config3();
        let w = weights(&cfg);
        let seg = Tensor::zeros(vec![1, 32, 32]);
        let pyr = condition_feature_extractor(&seg, &w).unwrap();
        for level in &pyr.levels {
            assert!(level.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn level_sizes_halve_per_stage() {
        let cfg = config3();
        let w = weights(&cfg);
        let seg = Tensor::full(vec![1, 32, 32], 0.5);
        let pyr = condition_feature_extractor(&seg, &w).unwrap();
        // 3 stages + dedicated middle level
        assert_eq!(pyr.level_count(), 4);
        let sizes: Vec<usize> = pyr.levels.iter().map(|l| l.shape()[1]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4]);
        for level in &pyr.levels {
            assert_eq!(level.shape()[0], cfg.cond_channels);
        }
    }

    #[test]
    fn non_canonical_input_rejected() {
        let cfg = config3();
        let w = weights(&cfg);
        let seg = Tensor::zeros(vec![1, 16, 16]);
        assert!(condition_feature_extractor(&seg, &w).is_err());
    }

    /// Without a dedicated middle level the pyramid stops at the deepest
    /// encoder stage and the middle block reuses (and resizes) it.
    #[test]
    fn reuse_mode_drops_the_extra_level() {
        let mut cfg = config3();
        cfg.middle_dedicated_level = false;
        let w = weights(&cfg);
        let seg = Tensor::full(vec![1, 32, 32], 0.25);
        let pyr = condition_feature_extractor(&seg, &w).unwrap();
        assert_eq!(pyr.level_count(), 3);
        // the full model still runs end to end in this mode
        let vocab = crate::nets::TextVocab::new(cfg.text.clone());
        let text = crate::nets::text_encode("reuse mode probe", &vocab, &w.base).unwrap();
        let mut rng = seed_rng(3);
        let z = Tensor::new(
            vec![1, 32, 32],
            (0..1024).map(|_| uniform(&mut rng, -1.0, 1.0)).collect(),
        );
        let out = crate::nets::scp_predict(&z, 2, &text, &seg, &w).unwrap();
        assert_eq!(out.shape(), z.shape());
    }

    /// Under circular padding a circular shift of the input shifts every
    /// pyramid level by the stride-scaled amount.
    #[test]
    fn circular_shift_equivariance() {
        let mut cfg = config3();
        cfg.pad_mode = PadMode::Circular;
        let w = weights(&cfg);
        let mut rng = seed_rng(77);
        let n = 32 * 32;
        let base: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
        let (dy, dx) = (8usize, 8usize);
        let mut shifted = vec![0.0; n];
        for y in 0..32 {
            for x in 0..32 {
                shifted[((y + dy) % 32) * 32 + (x + dx) % 32] = base[y * 32 + x];
            }
        }
        let pyr_a = condition_feature_extractor(&Tensor::new(vec![1, 32, 32], base), &w).unwrap();
        let pyr_b =
            condition_feature_extractor(&Tensor::new(vec![1, 32, 32], shifted), &w).unwrap();
        for (level, (a, b)) in pyr_a.levels.iter().zip(&pyr_b.levels).enumerate() {
            let (c, h, wd) = a.chw();
            let (sy, sx) = (dy >> level, dx >> level);
            let mut worst: f64 = 0.0;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..wd {
                        let av = a.data()[(ch * h + y) * wd + x];
                        let bv = b.data()[(ch * h + (y + sy) % h) * wd + (x + sx) % wd];
                        worst = worst.max((av - bv).abs());
                    }
                }
            }
            assert!(worst < 1e-10, "level {level}: worst {worst}");
        }
    }
}
