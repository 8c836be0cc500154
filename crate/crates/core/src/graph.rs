//! Reverse-mode autodiff over a per-sample tape.
//!
//! Networks are built by pushing ops onto a `Graph`; `backward` walks the
//! tape in reverse and accumulates gradients for every `param` leaf (keyed
//! by the caller's `ParamKey`) and every node. Graphs are cheap, built per
//! sample, and never shared between threads; parallel training builds one
//! graph per batch item and folds the gradient maps in index order so the
//! result does not depend on thread count.
//!
//! Convolutions lower to im2col + dgemm. Everything runs in f64.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifies a trainable tensor: `set` distinguishes parameter stores
/// (e.g. base vs control), `slot` is the index within the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub set: usize,
    pub slot: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Spatial padding behaviour for convolutions and resampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PadMode {
    Zeros,
    Circular,
}

#[derive(Clone, Debug)]
struct ConvCtx {
    stride: usize,
    pad: usize,
    pad_mode: PadMode,
    kh: usize,
    kw: usize,
    in_hw: (usize, usize),
    // im2col matrix saved from the forward pass; reused for the weight grad.
    cols: Arc<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct GnCtx {
    groups: usize,
    // per-group 1/sqrt(var + eps)
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamKey),
    Add,
    Sub,
    Mul,
    Scale(f64),
    Silu,
    Relu,
    Sigmoid,
    /// a[m,k] x b[k,n] -> [m,n]
    Matmul,
    /// [m,n] -> [n,m]
    Transpose2,
    /// row-wise softmax on [m,n]
    SoftmaxRows,
    /// parents: x[Cin,H,W], w[Cout,Cin,kh,kw], optional bias[Cout]
    Conv2d(ConvCtx),
    /// parameter-free group normalization over (group channels x space)
    GroupNormPf(GnCtx),
    /// x[C,H,W] + v[C] broadcast over space
    ChanBias,
    /// channel concatenation of two CHW tensors
    ConcatChan,
    /// [C,H,W] -> [C,2H,2W]
    UpsampleNearest2,
    /// nearest resize to (oh, ow)
    ResizeNearest,
    /// rows of an embedding table [V,D] selected by token id
    Embed(Vec<usize>),
    Reshape,
    MeanAll,
    /// mean squared difference of two same-shape tensors -> scalar
    Mse,
    /// mean of stable binary cross entropy(logits, targets) -> scalar
    BceWithLogits,
    /// soft dice loss on sigmoid(logits) vs targets -> scalar
    DiceLoss(f64),
}

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    node: Vec<Option<Vec<f64>>>,
    param: HashMap<ParamKey, Vec<f64>>,
}

impl Grads {
    pub fn param_grad(&self, key: ParamKey) -> Option<&[f64]> {
        self.param.get(&key).map(|v| v.as_slice())
    }

    pub fn node_grad(&self, id: NodeId) -> Option<&[f64]> {
        self.node[id.0].as_deref()
    }

    pub fn into_param_map(self) -> HashMap<ParamKey, Vec<f64>> {
        self.param
    }
}

/// Fold `src` into `acc`, adding overlapping entries elementwise.
pub fn accumulate_grads(acc: &mut HashMap<ParamKey, Vec<f64>>, src: HashMap<ParamKey, Vec<f64>>) {
    for (k, v) in src {
        match acc.entry(k) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                let dst = e.get_mut();
                for (d, s) in dst.iter_mut().zip(v) {
                    *d += s;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(v);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dgemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// dgemm with `a` used transposed: a is [k,m] row-major, result [m,n].
fn dgemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), k * m);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// dgemm with `b` used transposed: b is [n,k] row-major, result [m,n].
fn dgemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(b.len(), n * k);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_out_dim(h: usize, pad: usize, k: usize, stride: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Gather input patches into a [Cin*kh*kw, oh*ow] column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> (Vec<f64>, usize, usize) {
    let oh = conv_out_dim(h, pad, kh, stride);
    let ow = conv_out_dim(w, pad, kw, stride);
    let rows = c_in * kh * kw;
    let cols_n = oh * ow;
    let mut cols = vec![0.0; rows * cols_n];
    for c in 0..c_in {
        let x_c = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let out_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let v = match mode {
                            PadMode::Zeros => {
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    0.0
                                } else {
                                    x_c[iy as usize * w + ix as usize]
                                }
                            }
                            PadMode::Circular => {
                                let wy = iy.rem_euclid(h as isize) as usize;
                                let wx = ix.rem_euclid(w as isize) as usize;
                                x_c[wy * w + wx]
                            }
                        };
                        out_row[oy * ow + ox] = v;
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Scatter column-matrix gradients back onto the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    dx: &mut [f64],
) {
    let oh = conv_out_dim(h, pad, kh, stride);
    let ow = conv_out_dim(w, pad, kw, stride);
    let cols_n = oh * ow;
    for c in 0..c_in {
        let dx_c = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &dcols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let g = src[oy * ow + ox];
                        match mode {
                            PadMode::Zeros => {
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    dx_c[iy as usize * w + ix as usize] += g;
                                }
                            }
                            PadMode::Circular => {
                                let wy = iy.rem_euclid(h as isize) as usize;
                                let wx = ix.rem_euclid(w as isize) as usize;
                                dx_c[wy * w + wx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<NodeId>, op: Op) -> NodeId {
        self.nodes.push(Node { value, parents, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, vec![], Op::Input)
    }

    /// Trainable leaf; gradient lands in the map under `key`.
    pub fn param(&mut self, key: ParamKey, value: Tensor) -> NodeId {
        self.push(value, vec![], Op::Param(key))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = crate::tensor::zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(t, vec![a, b], Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = crate::tensor::zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(t, vec![a, b], Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let t = crate::tensor::zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(t, vec![a, b], Op::Mul)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a).map(|x| x * c);
        self.push(t, vec![a], Op::Scale(c))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push(t, vec![a], Op::Silu)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, vec![a], Op::Relu)
    }

    pub fn sigmoid_node(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(sigmoid);
        self.push(t, vec![a], Op::Sigmoid)
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> NodeId {
        let t = self.value(a).reshaped(shape);
        self.push(t, vec![a], Op::Reshape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        dgemm(m, k, n, av.data(), bv.data(), &mut out, 0.0);
        self.push(Tensor::new(vec![m, n], out), vec![a, b], Op::Matmul)
    }

    pub fn transpose2(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out), vec![a], Op::Transpose2)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av.data()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                s += e;
            }
            for j in 0..n {
                out[i * n + j] /= s;
            }
        }
        self.push(Tensor::new(vec![m, n], out), vec![a], Op::SoftmaxRows)
    }

    /// 2-D convolution with "same"-style padding `pad = k/2`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad_mode: PadMode,
    ) -> NodeId {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let (c_in, h, w_dim) = xv.chw();
        let ws = wv.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [Cout,Cin,kh,kw]");
        let (c_out, wc_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(c_in, wc_in, "conv channel mismatch");
        let pad = kh / 2;
        let (cols, oh, ow) = im2col(xv.data(), c_in, h, w_dim, kh, kw, stride, pad, pad_mode);
        let rows = c_in * kh * kw;
        let n = oh * ow;
        let mut out = vec![0.0; c_out * n];
        dgemm(c_out, rows, n, wv.data(), &cols, &mut out, 0.0);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            let bv = self.value(b).clone();
            assert_eq!(bv.numel(), c_out, "conv bias len");
            for c in 0..c_out {
                let bias = bv.data()[c];
                for v in &mut out[c * n..(c + 1) * n] {
                    *v += bias;
                }
            }
            parents.push(b);
        }
        let ctx = ConvCtx {
            stride,
            pad,
            pad_mode,
            kh,
            kw,
            in_hw: (h, w_dim),
            cols: Arc::new(cols),
        };
        self.push(
            Tensor::new(vec![c_out, oh, ow], out),
            parents,
            Op::Conv2d(ctx),
        )
    }

    /// Parameter-free group normalization: statistics per (group x space),
    /// no learned affine. Errors when `groups` does not divide the channel
    /// count.
    pub fn group_norm_pf(&mut self, x: NodeId, groups: usize) -> Result<NodeId> {
        let xv = self.value(x).clone();
        let (c, h, w) = xv.chw();
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group count {groups} does not divide {c} channels"
            )));
        }
        let gs = c / groups * h * w;
        let mut out = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; groups];
        for g in 0..groups {
            let xs = &xv.data()[g * gs..(g + 1) * gs];
            let mean = xs.iter().sum::<f64>() / gs as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gs as f64;
            let is = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            inv_std[g] = is;
            for (o, v) in out[g * gs..(g + 1) * gs].iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
        }
        Ok(self.push(
            Tensor::new(xv.shape().to_vec(), out),
            vec![x],
            Op::GroupNormPf(GnCtx { groups, inv_std }),
        ))
    }

    pub fn chan_bias(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xv = self.value(x).clone();
        let vv = self.value(v).clone();
        let (c, h, w) = xv.chw();
        assert_eq!(vv.numel(), c, "chan_bias len");
        let hw = h * w;
        let mut out = xv.to_vec();
        for ch in 0..c {
            let b = vv.data()[ch];
            for o in &mut out[ch * hw..(ch + 1) * hw] {
                *o += b;
            }
        }
        self.push(
            Tensor::new(xv.shape().to_vec(), out),
            vec![x, v],
            Op::ChanBias,
        )
    }

    pub fn concat_chan(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let (ca, h, w) = av.chw();
        let (cb, hb, wb) = bv.chw();
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut out = Vec::with_capacity((ca + cb) * h * w);
        out.extend_from_slice(av.data());
        out.extend_from_slice(bv.data());
        self.push(
            Tensor::new(vec![ca + cb, h, w], out),
            vec![a, b],
            Op::ConcatChan,
        )
    }

    pub fn upsample_nearest2(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let (c, h, w) = av.chw();
        let mut out = vec![0.0; c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(ch * oh + y) * ow + x] = av.data()[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        self.push(
            Tensor::new(vec![c, oh, ow], out),
            vec![a],
            Op::UpsampleNearest2,
        )
    }

    pub fn resize_nearest(&mut self, a: NodeId, oh: usize, ow: usize) -> NodeId {
        let av = self.value(a).clone();
        let (c, h, w) = av.chw();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let sy = y * h / oh;
                for x in 0..ow {
                    let sx = x * w / ow;
                    out[(ch * oh + y) * ow + x] = av.data()[(ch * h + sy) * w + sx];
                }
            }
        }
        self.push(
            Tensor::new(vec![c, oh, ow], out),
            vec![a],
            Op::ResizeNearest,
        )
    }

    /// Select rows of an embedding table [V,D] by token id -> [n,D].
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = self.value(table).clone();
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "token id {id} out of vocabulary {v}");
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out),
            vec![table],
            Op::Embed(ids.to_vec()),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let m = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.push(Tensor::scalar(m), vec![a], Op::MeanAll)
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let n = av.numel() as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s / n), vec![a, b], Op::Mse)
    }

    /// Numerically stable mean BCE on raw logits; targets carry no gradient.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        let (lv, tv) = (self.value(logits), self.value(targets));
        assert_eq!(lv.shape(), tv.shape());
        let n = lv.numel() as f64;
        let s: f64 = lv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (1.0 + (-x.abs()).exp()).ln())
            .sum();
        self.push(
            Tensor::scalar(s / n),
            vec![logits, targets],
            Op::BceWithLogits,
        )
    }

    /// Soft dice loss `1 - (2*sum(p*y)+s)/(sum(p)+sum(y)+s)` with
    /// `p = sigmoid(logits)`.
    pub fn dice_loss(&mut self, logits: NodeId, targets: NodeId, smooth: f64) -> NodeId {
        let (lv, tv) = (self.value(logits), self.value(targets));
        assert_eq!(lv.shape(), tv.shape());
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut ysum = 0.0;
        for (&x, &y) in lv.data().iter().zip(tv.data()) {
            let p = sigmoid(x);
            inter += p * y;
            psum += p;
            ysum += y;
        }
        let d = 1.0 - (2.0 * inter + smooth) / (psum + ysum + smooth);
        self.push(
            Tensor::scalar(d),
            vec![logits, targets],
            Op::DiceLoss(smooth),
        )
    }

    /// Reverse pass from a scalar node; returns gradients for all nodes and
    /// parameters that influence it.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward needs a scalar loss"
        );
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        node_grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backprop_one(node, &gy, idx, &mut node_grads);
            node_grads[idx] = Some(gy);
        }

        let mut param = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(key) = node.op {
                if let Some(g) = &node_grads[idx] {
                    match param.entry(key) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            let dst: &mut Vec<f64> = e.get_mut();
                            for (d, s) in dst.iter_mut().zip(g) {
                                *d += s;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(g.clone());
                        }
                    }
                }
            }
        }
        Grads {
            node: node_grads,
            param,
        }
    }

    fn backprop_one(
        &self,
        node: &Node,
        gy: &[f64],
        _idx: usize,
        node_grads: &mut [Option<Vec<f64>>],
    ) {
        let mut add_to = |id: NodeId, contrib: Vec<f64>| {
            let slot = &mut node_grads[id.0];
            match slot {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c;
                    }
                }
                None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add => {
                add_to(node.parents[0], gy.to_vec());
                add_to(node.parents[1], gy.to_vec());
            }
            Op::Sub => {
                add_to(node.parents[0], gy.to_vec());
                add_to(node.parents[1], gy.iter().map(|g| -g).collect());
            }
            Op::Mul => {
                let a = self.value(node.parents[0]).data();
                let b = self.value(node.parents[1]).data();
                add_to(
                    node.parents[0],
                    gy.iter().zip(b).map(|(g, y)| g * y).collect(),
                );
                add_to(
                    node.parents[1],
                    gy.iter().zip(a).map(|(g, x)| g * x).collect(),
                );
            }
            Op::Scale(c) => {
                add_to(node.parents[0], gy.iter().map(|g| g * c).collect());
            }
            Op::Silu => {
                let x = self.value(node.parents[0]).data();
                add_to(
                    node.parents[0],
                    gy.iter()
                        .zip(x)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::Relu => {
                let x = self.value(node.parents[0]).data();
                add_to(
                    node.parents[0],
                    gy.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid => {
                let y = node.value.data();
                add_to(
                    node.parents[0],
                    gy.iter().zip(y).map(|(g, &y)| g * y * (1.0 - y)).collect(),
                );
            }
            Op::Matmul => {
                let a = self.value(node.parents[0]);
                let b = self.value(node.parents[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut da = vec![0.0; m * k];
                dgemm_bt(m, n, k, gy, b.data(), &mut da, 0.0);
                add_to(node.parents[0], da);
                let mut db = vec![0.0; k * n];
                dgemm_at(k, m, n, a.data(), gy, &mut db, 0.0);
                add_to(node.parents[1], db);
            }
            Op::Transpose2 => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] = gy[i * m + j];
                    }
                }
                add_to(node.parents[0], dx);
            }
            Op::SoftmaxRows => {
                let y = node.value.data();
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gy[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_to(node.parents[0], dx);
            }
            Op::Conv2d(ctx) => {
                let x = self.value(node.parents[0]);
                let w = self.value(node.parents[1]);
                let (c_in, h, wd) = x.chw();
                let ws = w.shape();
                let c_out = ws[0];
                let rows = c_in * ctx.kh * ctx.kw;
                let n = node.value.shape()[1] * node.value.shape()[2];
                // dW = gy [Cout,n] x cols^T [n,rows]
                let mut dw = vec![0.0; c_out * rows];
                dgemm_bt(c_out, n, rows, gy, &ctx.cols, &mut dw, 0.0);
                // dcols = W^T [rows,Cout] x gy [Cout,n]
                let mut dcols = vec![0.0; rows * n];
                dgemm_at(rows, c_out, n, w.data(), gy, &mut dcols, 0.0);
                let mut dx = vec![0.0; c_in * h * wd];
                col2im(
                    &dcols,
                    c_in,
                    h,
                    wd,
                    ctx.kh,
                    ctx.kw,
                    ctx.stride,
                    ctx.pad,
                    ctx.pad_mode,
                    &mut dx,
                );
                debug_assert_eq!(ctx.in_hw, (h, wd));
                add_to(node.parents[0], dx);
                add_to(node.parents[1], dw);
                if node.parents.len() == 3 {
                    let mut db = vec![0.0; c_out];
                    for c in 0..c_out {
                        db[c] = gy[c * n..(c + 1) * n].iter().sum();
                    }
                    add_to(node.parents[2], db);
                }
            }
            Op::GroupNormPf(ctx) => {
                let y = node.value.data();
                let total = node.value.numel();
                let gs = total / ctx.groups;
                let mut dx = vec![0.0; total];
                for g in 0..ctx.groups {
                    let yr = &y[g * gs..(g + 1) * gs];
                    let gr = &gy[g * gs..(g + 1) * gs];
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gy: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    let inv_n = 1.0 / gs as f64;
                    for i in 0..gs {
                        dx[g * gs + i] =
                            ctx.inv_std[g] * (gr[i] - inv_n * sum_g - yr[i] * inv_n * sum_gy);
                    }
                }
                add_to(node.parents[0], dx);
            }
            Op::ChanBias => {
                let (c, h, w) = node.value.chw();
                let hw = h * w;
                add_to(node.parents[0], gy.to_vec());
                let mut dv = vec![0.0; c];
                for ch in 0..c {
                    dv[ch] = gy[ch * hw..(ch + 1) * hw].iter().sum();
                }
                add_to(node.parents[1], dv);
            }
            Op::ConcatChan => {
                let na = self.value(node.parents[0]).numel();
                add_to(node.parents[0], gy[..na].to_vec());
                add_to(node.parents[1], gy[na..].to_vec());
            }
            Op::UpsampleNearest2 => {
                let (c, oh, ow) = node.value.chw();
                let (h, w) = (oh / 2, ow / 2);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            dx[(ch * h + y / 2) * w + x / 2] += gy[(ch * oh + y) * ow + x];
                        }
                    }
                }
                add_to(node.parents[0], dx);
            }
            Op::ResizeNearest => {
                let (c, oh, ow) = node.value.chw();
                let (_, h, w) = self.value(node.parents[0]).chw();
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        let sy = y * h / oh;
                        for x in 0..ow {
                            let sx = x * w / ow;
                            dx[(ch * h + sy) * w + sx] += gy[(ch * oh + y) * ow + x];
                        }
                    }
                }
                add_to(node.parents[0], dx);
            }
            Op::Embed(ids) => {
                let tv = self.value(node.parents[0]);
                let d = tv.shape()[1];
                let mut dt = vec![0.0; tv.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gy[row * d + j];
                    }
                }
                add_to(node.parents[0], dt);
            }
            Op::Reshape => {
                add_to(node.parents[0], gy.to_vec());
            }
            Op::MeanAll => {
                let n = self.value(node.parents[0]).numel();
                add_to(node.parents[0], vec![gy[0] / n as f64; n]);
            }
            Op::Mse => {
                let a = self.value(node.parents[0]).data();
                let b = self.value(node.parents[1]).data();
                let n = a.len() as f64;
                let scale = 2.0 * gy[0] / n;
                add_to(
                    node.parents[0],
                    a.iter().zip(b).map(|(x, y)| scale * (x - y)).collect(),
                );
                add_to(
                    node.parents[1],
                    a.iter().zip(b).map(|(x, y)| -scale * (x - y)).collect(),
                );
            }
            Op::BceWithLogits => {
                let x = self.value(node.parents[0]).data();
                let y = self.value(node.parents[1]).data();
                let n = x.len() as f64;
                add_to(
                    node.parents[0],
                    x.iter()
                        .zip(y)
                        .map(|(&x, &y)| gy[0] * (sigmoid(x) - y) / n)
                        .collect(),
                );
            }
            Op::DiceLoss(smooth) => {
                let x = self.value(node.parents[0]).data();
                let y = self.value(node.parents[1]).data();
                let mut inter = 0.0;
                let mut psum = 0.0;
                let mut ysum = 0.0;
                let ps: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
                for (p, &t) in ps.iter().zip(y) {
                    inter += p * t;
                    psum += p;
                    ysum += t;
                }
                let num = 2.0 * inter + smooth;
                let den = psum + ysum + smooth;
                add_to(
                    node.parents[0],
                    ps.iter()
                        .zip(y)
                        .map(|(&p, &t)| {
                            let dd_dp = -(2.0 * t * den - num) / (den * den);
                            gy[0] * dd_dp * p * (1.0 - p)
                        })
                        .collect(),
                );
            }
        }
    }
}
