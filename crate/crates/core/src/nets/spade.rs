//! Spatially-adaptive normalization: parameter-free group normalization
//! followed by a per-location, per-channel scale and shift predicted from
//! semantic-map features. Keeps spatial semantic structure alive through
//! the normalization that would otherwise wash it out.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, PadMode};
use crate::tensor::Tensor;

/// Standalone parameter bundle for one normalization site.
#[derive(Clone, Debug)]
pub struct SpadeParams {
    /// 3x3 conv mapping (resized) segmap features to a hidden feature map.
    pub shared_w: Tensor,
    pub shared_b: Tensor,
    /// 3x3 conv from hidden features to the per-location scale offset; the
    /// applied scale is `1 + gamma`.
    pub gamma_w: Tensor,
    pub gamma_b: Tensor,
    /// 3x3 conv from hidden features to the per-location shift.
    pub beta_w: Tensor,
    pub beta_b: Tensor,
    pub groups: usize,
    pub pad_mode: PadMode,
}

impl SpadeParams {
    /// Identity modulation over `channels`, driven by `cond_channels`
    /// segmap features: gamma/beta heads start at zero.
    pub fn init(
        channels: usize,
        cond_channels: usize,
        groups: usize,
        rng: &mut crate::rng::Rng,
    ) -> Self {
        SpadeParams {
            shared_w: super::conv_init(rng, cond_channels, cond_channels, 3),
            shared_b: Tensor::zeros(vec![cond_channels]),
            gamma_w: Tensor::zeros(vec![channels, cond_channels, 3, 3]),
            gamma_b: Tensor::zeros(vec![channels]),
            beta_w: Tensor::zeros(vec![channels, cond_channels, 3, 3]),
            beta_b: Tensor::zeros(vec![channels]),
            groups,
            pad_mode: PadMode::Zeros,
        }
    }
}

/// Graph-level core shared by the standalone op and the in-model blocks:
/// `out = normalize(h) * (1 + gamma(seg)) + beta(seg)` with parameter-free
/// group normalization. `seg` is resized to `h`'s spatial size if needed.
#[allow(clippy::too_many_arguments)]
pub(super) fn spade_apply(
    g: &mut Graph,
    h: NodeId,
    seg: NodeId,
    shared: (NodeId, NodeId),
    gamma: (NodeId, NodeId),
    beta: (NodeId, NodeId),
    groups: usize,
    pad_mode: PadMode,
) -> Result<NodeId> {
    let (_, hh, hw) = g.value(h).chw();
    let (_, sh, sw) = g.value(seg).chw();
    let seg = if (sh, sw) != (hh, hw) {
        g.resize_nearest(seg, hh, hw)
    } else {
        seg
    };
    let hid = g.conv2d(seg, shared.0, Some(shared.1), 1, pad_mode);
    let hid = g.relu(hid);
    let gam = g.conv2d(hid, gamma.0, Some(gamma.1), 1, pad_mode);
    let bet = g.conv2d(hid, beta.0, Some(beta.1), 1, pad_mode);
    let norm = g.group_norm_pf(h, groups)?;
    // norm * (1 + gamma) + beta
    let scaled = g.mul(norm, gam);
    let with_scale = g.add(norm, scaled);
    Ok(g.add(with_scale, bet))
}

/// Normalize `h_in` and re-modulate it from `segmap_feat`. Returns a
/// tensor of `h_in`'s shape. The gradient path through every input is
/// exercised by the finite-difference suite.
pub fn spade_normalize(
    h_in: &Tensor,
    segmap_feat: &Tensor,
    params: &SpadeParams,
) -> Result<Tensor> {
    let (c, _, _) = h_in.chw();
    if params.gamma_w.shape()[0] != c || params.beta_w.shape()[0] != c {
        return Err(Error::Config(format!(
            "scale/shift heads produce {} channels, input has {c}",
            params.gamma_w.shape()[0]
        )));
    }
    let mut g = Graph::new();
    let h = g.input(h_in.clone());
    let s = g.input(segmap_feat.clone());
    let sh = (
        g.input(params.shared_w.clone()),
        g.input(params.shared_b.clone()),
    );
    let ga = (
        g.input(params.gamma_w.clone()),
        g.input(params.gamma_b.clone()),
    );
    let be = (
        g.input(params.beta_w.clone()),
        g.input(params.beta_b.clone()),
    );
    let out = spade_apply(&mut g, h, s, sh, ga, be, params.groups, params.pad_mode)?;
    Ok(g.value(out).clone())
}

/// Build the standalone op inside a caller-owned graph, returning handles
/// to every input so gradients can be inspected. Used by the
/// finite-difference checks.
pub fn spade_graph(
    g: &mut Graph,
    h_in: Tensor,
    segmap_feat: Tensor,
    params: &SpadeParams,
) -> Result<(NodeId, Vec<NodeId>)> {
    let h = g.input(h_in);
    let s = g.input(segmap_feat);
    let sw = g.input(params.shared_w.clone());
    let sb = g.input(params.shared_b.clone());
    let gw = g.input(params.gamma_w.clone());
    let gb = g.input(params.gamma_b.clone());
    let bw = g.input(params.beta_w.clone());
    let bb = g.input(params.beta_b.clone());
    let out = spade_apply(
        g,
        h,
        s,
        (sw, sb),
        (gw, gb),
        (bw, bb),
        params.groups,
        params.pad_mode,
    )?;
    Ok((out, vec![h, s, sw, sb, gw, gb, bw, bb]))
}

/// In-model block reading its parameters from a bound set.
pub(super) fn spade_block(
    g: &mut Graph,
    bind: &mut super::model::Bind<'_>,
    prefix: &str,
    h: NodeId,
    seg: NodeId,
    groups: usize,
    pad_mode: PadMode,
) -> Result<NodeId> {
    let sw = bind.node(g, &format!("{prefix}.shared.w"));
    let sb = bind.node(g, &format!("{prefix}.shared.b"));
    let gw = bind.node(g, &format!("{prefix}.gamma.w"));
    let gb = bind.node(g, &format!("{prefix}.gamma.b"));
    let bw = bind.node(g, &format!("{prefix}.beta.w"));
    let bb = bind.node(g, &format!("{prefix}.beta.b"));
    spade_apply(g, h, seg, (sw, sb), (gw, gb), (bw, bb), groups, pad_mode)
}

/// One finite-difference check of `spade_normalize` gradients on random
/// shapes; returns the worst relative error over all inputs. Kept here so
/// unit tests and the acceptance suite share one oracle.
pub fn spade_gradient_check(seed: u64) -> Result<f64> {
    use crate::rng::{normal_vec, seed_rng, uniform_usize};

    let mut rng = seed_rng(seed);
    let c_choices = [4usize, 6, 8];
    let c = c_choices[uniform_usize(&mut rng, 0, c_choices.len() - 1)];
    let ce = [2usize, 4][uniform_usize(&mut rng, 0, 1)];
    let hw = [3usize, 4, 5][uniform_usize(&mut rng, 0, 2)];
    let seg_hw = [hw, 2 * hw][uniform_usize(&mut rng, 0, 1)];
    let groups = if c % 4 == 0 {
        [1, 2, 4][uniform_usize(&mut rng, 0, 2)]
    } else {
        2
    };

    let mut params = SpadeParams::init(c, ce, groups, &mut rng);
    // non-trivial heads so all paths carry signal
    params.gamma_w = Tensor::new(
        vec![c, ce, 3, 3],
        normal_vec(&mut rng, c * ce * 9)
            .iter()
            .map(|v| v * 0.3)
            .collect(),
    );
    params.gamma_b = Tensor::new(
        vec![c],
        normal_vec(&mut rng, c).iter().map(|v| v * 0.1).collect(),
    );
    params.beta_w = Tensor::new(
        vec![c, ce, 3, 3],
        normal_vec(&mut rng, c * ce * 9)
            .iter()
            .map(|v| v * 0.3)
            .collect(),
    );
    params.beta_b = Tensor::new(
        vec![c],
        normal_vec(&mut rng, c).iter().map(|v| v * 0.1).collect(),
    );

    let h = Tensor::new(vec![c, hw, hw], normal_vec(&mut rng, c * hw * hw));
    let s = Tensor::new(
        vec![ce, seg_hw, seg_hw],
        normal_vec(&mut rng, ce * seg_hw * seg_hw),
    );
    // random projection to a scalar so every output element matters
    let proj = Tensor::new(vec![c, hw, hw], normal_vec(&mut rng, c * hw * hw));

    let eval_with = |h: &Tensor, s: &Tensor, p: &SpadeParams| -> f64 {
        let mut g = Graph::new();
        let (out, _) = spade_graph(&mut g, h.clone(), s.clone(), p).unwrap();
        let pj = g.input(proj.clone());
        let prod = g.mul(out, pj);
        let m = g.mean_all(prod);
        g.value(m).data()[0]
    };

    let mut g = Graph::new();
    let (out, inputs) = spade_graph(&mut g, h.clone(), s.clone(), &params)?;
    let pj = g.input(proj.clone());
    let prod = g.mul(out, pj);
    let m = g.mean_all(prod);
    let grads = g.backward(m);

    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let tensors: Vec<Tensor> = vec![
        h.clone(),
        s.clone(),
        params.shared_w.clone(),
        params.shared_b.clone(),
        params.gamma_w.clone(),
        params.gamma_b.clone(),
        params.beta_w.clone(),
        params.beta_b.clone(),
    ];
    for (which, t) in tensors.iter().enumerate() {
        let analytic = grads.node_grad(inputs[which]).expect("grad");
        // probe a bounded number of coordinates per tensor
        let stride = (t.numel() / 12).max(1);
        for e in (0..t.numel()).step_by(stride) {
            let perturb = |delta: f64| -> f64 {
                let mut data = t.to_vec();
                data[e] += delta;
                let pt = Tensor::new(t.shape().to_vec(), data);
                let mut hh = h.clone();
                let mut ss = s.clone();
                let mut pp = params.clone();
                match which {
                    0 => hh = pt,
                    1 => ss = pt,
                    2 => pp.shared_w = pt,
                    3 => pp.shared_b = pt,
                    4 => pp.gamma_w = pt,
                    5 => pp.gamma_b = pt,
                    6 => pp.beta_w = pt,
                    7 => pp.beta_b = pt,
                    _ => unreachable!(),
                }
                eval_with(&hh, &ss, &pp)
            };
            let fd = (perturb(step) - perturb(-step)) / (2.0 * step);
            let a = analytic[e];
            let denom = fd.abs().max(a.abs()).max(1e-8);
            worst = worst.max((fd - a).abs() / denom);
        }
    }
    Ok(worst)
}
