//! Small encoder-decoder segmenter trained from scratch: three stages
//! with skip connections, sigmoid head, BCE + soft-dice loss. Evaluated on
//! the validation set after every epoch; the best epoch is picked by mean
//! IoU.

use rand::seq::SliceRandom as _;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{accumulate_grads, Graph, NodeId, PadMode, ParamKey};
use crate::nets::ParamSet;
use crate::rng::{self, Rng};
use crate::segmap_post::BinaryMask;
use crate::tensor::Tensor;

use super::{confusion, ConfusionCounts, EpochMetrics, EvalReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub canonical: usize,
    pub base_channels: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            canonical: 32,
            base_channels: 6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dice_weight: f64,
}

impl Default for SegHyperparams {
    fn default() -> Self {
        SegHyperparams {
            epochs: 100,
            batch_size: 8,
            lr: 3e-3,
            dice_weight: 1.0,
        }
    }
}

/// Trained segmenter; `predict` thresholds the sigmoid output at 0.5.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub config: SegConfig,
    pub params: ParamSet,
}

fn init_params(config: &SegConfig, seed: u64) -> ParamSet {
    let mut rng = rng::seed_rng(seed);
    let rng = &mut rng;
    let c = config.base_channels;
    let mut set = ParamSet::new();
    let conv = |set: &mut ParamSet, rng: &mut Rng, name: &str, co: usize, ci: usize, k: usize| {
        let fan_in = (ci * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        set.insert(
            format!("{name}.w"),
            Tensor::new(
                vec![co, ci, k, k],
                (0..co * ci * k * k)
                    .map(|_| rng::normal(rng) * std)
                    .collect(),
            ),
        );
        set.insert(format!("{name}.b"), Tensor::zeros(vec![co]));
    };
    conv(&mut set, rng, "e1", c, 1, 3);
    conv(&mut set, rng, "e2", 2 * c, c, 3);
    conv(&mut set, rng, "e3", 3 * c, 2 * c, 3);
    conv(&mut set, rng, "d2a", 2 * c, 3 * c, 3);
    conv(&mut set, rng, "d2b", 2 * c, 4 * c, 3);
    conv(&mut set, rng, "d1a", c, 2 * c, 3);
    conv(&mut set, rng, "d1b", c, 2 * c, 3);
    conv(&mut set, rng, "out", 1, c, 3);
    set
}

/// Forward pass to logits [1, R, R].
fn forward(g: &mut Graph, params: &ParamSet, image: NodeId) -> NodeId {
    let bind = |g: &mut Graph, name: &str| -> NodeId {
        let slot = params.slot(name).expect("segmenter param");
        g.param(
            ParamKey { set: 0, slot },
            params.by_slot(slot).value.clone(),
        )
    };
    let pad = PadMode::Zeros;
    let w = bind(g, "e1.w");
    let b = bind(g, "e1.b");
    let e1 = g.conv2d(image, w, Some(b), 1, pad);
    let e1 = g.relu(e1);
    let w = bind(g, "e2.w");
    let b = bind(g, "e2.b");
    let e2 = g.conv2d(e1, w, Some(b), 2, pad);
    let e2 = g.relu(e2);
    let w = bind(g, "e3.w");
    let b = bind(g, "e3.b");
    let e3 = g.conv2d(e2, w, Some(b), 2, pad);
    let e3 = g.relu(e3);

    let u2 = g.upsample_nearest2(e3);
    let w = bind(g, "d2a.w");
    let b = bind(g, "d2a.b");
    let d2 = g.conv2d(u2, w, Some(b), 1, pad);
    let d2 = g.relu(d2);
    let d2 = g.concat_chan(d2, e2);
    let w = bind(g, "d2b.w");
    let b = bind(g, "d2b.b");
    let d2 = g.conv2d(d2, w, Some(b), 1, pad);
    let d2 = g.relu(d2);

    let u1 = g.upsample_nearest2(d2);
    let w = bind(g, "d1a.w");
    let b = bind(g, "d1a.b");
    let d1 = g.conv2d(u1, w, Some(b), 1, pad);
    let d1 = g.relu(d1);
    let d1 = g.concat_chan(d1, e1);
    let w = bind(g, "d1b.w");
    let b = bind(g, "d1b.b");
    let d1 = g.conv2d(d1, w, Some(b), 1, pad);
    let d1 = g.relu(d1);

    let w = bind(g, "out.w");
    let b = bind(g, "out.b");
    g.conv2d(d1, w, Some(b), 1, pad)
}

impl Segmenter {
    pub fn predict(&self, image: &Tensor) -> Result<BinaryMask> {
        let (c, h, w) = image.chw();
        if c != 1 || h != self.config.canonical || w != self.config.canonical {
            return Err(Error::Shape(format!(
                "segmenter input {:?}, canonical {}",
                image.shape(),
                self.config.canonical
            )));
        }
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let logits = forward(&mut g, &self.params, x);
        let pixels = g
            .value(logits)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { 255 } else { 0 })
            .collect();
        BinaryMask::new(w, h, pixels)
    }
}

/// A (image, ground-truth mask) pair in the model domain.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub image: Tensor,
    pub mask: BinaryMask,
}

fn epoch_metrics(seg: &Segmenter, val: &[SegSample]) -> Result<EpochMetrics> {
    let counts: Vec<Result<ConfusionCounts>> = val
        .par_iter()
        .map(|s| {
            let pred = seg.predict(&s.image)?;
            confusion(&pred, &s.mask)
        })
        .collect();
    let mut miou_sum = 0.0;
    let mut f1_sum = 0.0;
    let n = val.len() as f64;
    for c in counts {
        let c = c?;
        miou_sum += super::miou_from_counts(&c);
        f1_sum += super::f1_from_counts(&c);
    }
    Ok(EpochMetrics {
        miou: miou_sum / n,
        f1: f1_sum / n,
    })
}

/// Train from random init for a fixed number of epochs, evaluating on
/// `val` after each; returns the trajectory report and the weights of the
/// best epoch (by mean IoU). Deterministic given the rng state.
pub fn train_segmenter(
    train: &[SegSample],
    val: &[SegSample],
    config: &SegConfig,
    hyper: &SegHyperparams,
    rng: &mut Rng,
) -> Result<(EvalReport, Segmenter)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("empty train or val set".into()));
    }
    for s in train.iter().chain(val) {
        let (c, h, w) = s.image.chw();
        if c != 1 || h != config.canonical || w != config.canonical {
            return Err(Error::Data(format!(
                "sample shape {:?} vs canonical {}",
                s.image.shape(),
                config.canonical
            )));
        }
    }
    let init_seed: u64 = rng.gen();
    let mut seg = Segmenter {
        config: config.clone(),
        params: init_params(config, init_seed),
    };
    let targets: Vec<Tensor> = train.iter().map(|s| s.mask.to_unit_tensor()).collect();

    // plain Adam state over the parameter slots
    let mut m: Vec<Vec<f64>> = seg
        .params
        .iter()
        .map(|p| vec![0.0; p.value.numel()])
        .collect();
    let mut v: Vec<Vec<f64>> = m.clone();
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut t_step = 0usize;

    let mut trajectory = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(f64, ParamSet)> = None;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for _epoch in 0..hyper.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(hyper.batch_size) {
            let results: Vec<Result<(f64, std::collections::HashMap<ParamKey, Vec<f64>>)>> = chunk
                .par_iter()
                .map(|&idx| {
                    let mut g = Graph::new();
                    let x = g.input(train[idx].image.clone());
                    let logits = forward(&mut g, &seg.params, x);
                    let target = g.input(targets[idx].clone());
                    let bce = g.bce_with_logits(logits, target);
                    let dice = g.dice_loss(logits, target, 1.0);
                    let dice_w = g.scale(dice, hyper.dice_weight);
                    let loss = g.add(bce, dice_w);
                    let lv = g.value(loss).data()[0];
                    let grads = g.backward(loss);
                    Ok((lv, grads.into_param_map()))
                })
                .collect();
            let mut merged: std::collections::HashMap<ParamKey, Vec<f64>> = Default::default();
            let mut loss_sum = 0.0;
            for r in results {
                let (lv, grads) = r?;
                loss_sum += lv;
                accumulate_grads(&mut merged, grads);
            }
            let mean_loss = loss_sum / chunk.len() as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged {
                    step: t_step,
                    loss: mean_loss,
                });
            }
            let inv = 1.0 / chunk.len() as f64;
            t_step += 1;
            let bc1 = 1.0 - b1.powi(t_step as i32);
            let bc2 = 1.0 - b2.powi(t_step as i32);
            for slot in 0..seg.params.len() {
                let Some(grad) = merged.get(&ParamKey { set: 0, slot }) else {
                    continue;
                };
                let ms = &mut m[slot];
                let vs = &mut v[slot];
                let old = seg.params.by_slot(slot).value.clone();
                let data: Vec<f64> = old
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &wv)| {
                        let gval = grad[i] * inv;
                        ms[i] = b1 * ms[i] + (1.0 - b1) * gval;
                        vs[i] = b2 * vs[i] + (1.0 - b2) * gval * gval;
                        if hyper.lr == 0.0 {
                            wv
                        } else {
                            wv - hyper.lr * (ms[i] / bc1) / ((vs[i] / bc2).sqrt() + eps)
                        }
                    })
                    .collect();
                seg.params
                    .set_slot(slot, Tensor::new(old.shape().to_vec(), data));
            }
        }
        let metrics = epoch_metrics(&seg, val)?;
        let improved = match &best {
            Some((best_miou, _)) => metrics.miou > *best_miou,
            None => true,
        };
        if improved {
            best = Some((metrics.miou, seg.params.clone()));
        }
        trajectory.push(metrics);
    }
    let report = EvalReport::from_trajectory("segmenter", None, 0, trajectory)?;
    let (_, best_params) = best.expect("at least one epoch");
    Ok((
        report,
        Segmenter {
            config: config.clone(),
            params: best_params,
        },
    ))
}

/// Serialize a segmenter next to the run outputs.
pub fn save_segmenter(path: &std::path::Path, seg: &Segmenter) -> Result<()> {
    let entries: Vec<(String, Vec<usize>, Vec<f64>)> = seg
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.to_vec()))
        .collect();
    let blob = serde_json::to_vec(&(seg.config.clone(), entries))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, blob).map_err(|e| Error::io(path, e))
}

pub fn load_segmenter(path: &std::path::Path) -> Result<Segmenter> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, entries): (SegConfig, Vec<(String, Vec<usize>, Vec<f64>)>) =
        serde_json::from_slice(&bytes)?;
    let mut params = ParamSet::new();
    for (name, shape, data) in entries {
        params.insert(name, Tensor::new(shape, data));
    }
    Ok(Segmenter { config, params })
}
