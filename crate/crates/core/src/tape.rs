//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Values are computed eagerly as ops are pushed; [`Tape::backward`] then
//! walks the tape in reverse and returns gradients for a selected subset of
//! parameters. Sub-graphs that cannot influence the seed, or that do not
//! depend on any selected parameter, are pruned before propagation, so one
//! shared forward graph supports several loss/parameter-group pairs.

use std::collections::HashMap;

use crate::kernels::{
    conv_item_forward, conv_item_grad_w, conv_item_grad_x, convt_item_forward, convt_item_grad_w,
    convt_item_grad_x, gemm_acc, transpose, ConvGeom,
};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to one node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param { idx: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// `a·x + b` with scalar constants (`b` is not needed for the gradient).
    Affine { x: NodeId, a: f64 },
    Exp { x: NodeId },
    Ln { x: NodeId },
    Sin { x: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    LeakyRelu { x: NodeId, slope: f64 },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    MeanAll { x: NodeId },
    MeanAxis { x: NodeId, axis: usize },
    /// `[N, C]` to `[N, C, *dims]`.
    BroadcastSpatial { x: NodeId, dims: Vec<usize> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    Reshape { x: NodeId },
    /// `y = x·wᵀ + b`; `x: [N, in]`, `w: [out, in]`.
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    /// Per-channel batch statistics (population variance, eps 1e-5).
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        frozen: bool,
    },
    /// Per-channel outer product of two `[N, C, M]` embeddings.
    BatchOuter { a: NodeId, b: NodeId },
    /// Plane waves `sin(Σ_ax f[n, ax·d_p + k]·coord_ax + xi[n, k])` on a grid.
    Waves { freqs: NodeId, xi: Vec<f64>, d_p: usize, dims: Vec<usize> },
    /// `w/σ(w)` with σ from stored power-iteration vectors.
    SpecNorm { w: NodeId, u: Vec<f64>, v: Vec<f64>, sigma: f64 },
    /// Mean negative log-softmax over a batch of `[N, C]` logits.
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Flat computation graph with eager forward values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const BN_EPS: f64 = 1e-5;
const SN_EPS: f64 = 1e-12;

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Per-channel mean and biased variance of `[N, C, *dims]`, reduced over the
/// batch and spatial axes.
#[must_use]
pub fn channel_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let shape = t.shape();
    assert!(shape.len() >= 2);
    let (n, c) = (shape[0], shape[1]);
    let sp: usize = shape[2..].iter().product();
    let m = (n * sp) as f64;
    let src = t.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for item in 0..n {
        for ch in 0..c {
            let base = (item * c + ch) * sp;
            mean[ch] += src[base..base + sp].iter().sum::<f64>();
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for item in 0..n {
        for ch in 0..c {
            let base = (item * c + ch) * sp;
            var[ch] += src[base..base + sp].iter().map(|&v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= m;
    }
    (mean, var)
}

impl Tape {
    #[must_use]
    pub fn new() -> Self {
        Tape::default()
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    #[must_use]
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Shape of a node's value.
    #[must_use]
    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const, t)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Const, Tensor::scalar_tensor(v))
    }

    /// Leaf referencing `params[idx]`; its current value is copied in.
    pub fn param(&mut self, params: &ParamSet, idx: usize) -> NodeId {
        self.push(Op::Param { idx }, params.get(idx).clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b));
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data);
        self.push(Op::Add { a, b }, t)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b));
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data);
        self.push(Op::Sub { a, b }, t)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b));
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data);
        self.push(Op::Mul { a, b }, t)
    }

    /// Elementwise `a·x + b` for scalar constants.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let t = self.nodes[x.0].value.map(|v| a * v + b);
        self.push(Op::Affine { x, a }, t)
    }

    pub fn scale(&mut self, x: NodeId, a: f64) -> NodeId {
        self.affine(x, a, 0.0)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x.0].value.map(f64::exp);
        self.push(Op::Exp { x }, t)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x.0].value.map(f64::ln);
        self.push(Op::Ln { x }, t)
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x.0].value.map(f64::sin);
        self.push(Op::Sin { x }, t)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x.0].value.map(f64::tanh);
        self.push(Op::Tanh { x }, t)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.nodes[x.0].value.map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(Op::Sigmoid { x }, t)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let t = self.nodes[x.0].value.map(|v| if v > 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu { x, slope }, t)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let t = self.nodes[x.0].value.map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp { x, lo, hi }, t)
    }

    /// Mean over every element, yielding a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Op::MeanAll { x }, Tensor::scalar_tensor(m))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let scale = 1.0 / len as f64;
        for v in &mut out {
            *v *= scale;
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        self.push(Op::MeanAxis { x, axis }, Tensor::new(new_shape, out))
    }

    /// Repeats `[N, C]` values over a spatial grid: result `[N, C, *dims]`.
    pub fn broadcast_spatial(&mut self, x: NodeId, dims: &[usize]) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2);
        let sp: usize = dims.iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len() * sp];
        for (nc, &v) in src.iter().enumerate() {
            out[nc * sp..(nc + 1) * sp].fill(v);
        }
        let mut new_shape = shape;
        new_shape.extend_from_slice(dims);
        self.push(
            Op::BroadcastSpatial { x, dims: dims.to_vec() },
            Tensor::new(new_shape, out),
        )
    }

    /// Concatenates along `axis`; other axes must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> NodeId {
        assert!(!inputs.is_empty());
        let first = self.shape(inputs[0]).to_vec();
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            assert_eq!(s.len(), first.len());
            for (ax, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(ax == axis || a == b, "concat shape mismatch on axis {ax}");
            }
            axis_total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = vec![0.0; outer * axis_total * inner];
        for o in 0..outer {
            let mut offset = 0;
            for &id in inputs {
                let len = self.shape(id)[axis];
                let src = self.data(id);
                let chunk = len * inner;
                out[(o * axis_total + offset) * inner..(o * axis_total + offset) * inner + chunk]
                    .copy_from_slice(&src[o * chunk..(o + 1) * chunk]);
                offset += len;
            }
        }
        let mut new_shape = first;
        new_shape[axis] = axis_total;
        self.push(Op::Concat { inputs: inputs.to_vec(), axis }, Tensor::new(new_shape, out))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = axis_split(&shape, axis);
        assert!(start + len <= full);
        let src = self.data(x);
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(&src[s..s + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.push(Op::Slice { x, axis, start, len }, Tensor::new(new_shape, out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let t = self.nodes[x.0].value.clone().reshape(shape);
        self.push(Op::Reshape { x }, t)
    }

    /// Fully connected layer `x·wᵀ + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert_eq!(xs.len(), 2);
        assert_eq!(ws.len(), 2);
        assert_eq!(xs[1], ws[1], "linear input width mismatch");
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        let mut w_t = vec![0.0; d_in * d_out];
        transpose(&mut w_t, self.data(w), d_out, d_in);
        let mut out = vec![0.0; n * d_out];
        gemm_acc(&mut out, self.data(x), &w_t, n, d_in, d_out);
        if let Some(b) = b {
            let bd = self.data(b);
            assert_eq!(bd.len(), d_out);
            for row in out.chunks_mut(d_out) {
                for (v, &bv) in row.iter_mut().zip(bd) {
                    *v += bv;
                }
            }
        }
        self.push(Op::Linear { x, w, b }, Tensor::new(vec![n, d_out], out))
    }

    /// Batched convolution; `x: [N, c_in, *in_dims]`, `w: [c_out, c_in, k…]`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: &ConvGeom) -> NodeId {
        assert!(!geom.transposed);
        self.conv_common(x, w, b, geom)
    }

    /// Batched transposed convolution; `w: [c_in, c_out, k…]`.
    pub fn conv_transposed(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: &ConvGeom,
    ) -> NodeId {
        assert!(geom.transposed);
        self.conv_common(x, w, b, geom)
    }

    fn conv_common(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: &ConvGeom) -> NodeId {
        let xs = self.shape(x);
        let n = xs[0];
        assert_eq!(xs[1], geom.c_in);
        assert_eq!(&xs[2..], geom.in_dims.as_slice());
        let (in_len, out_len) = (geom.in_len(), geom.out_len());
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = b.map(|b| self.data(b));
        let mut out = vec![0.0; n * out_len];
        for item in 0..n {
            let xi = &xd[item * in_len..(item + 1) * in_len];
            let yi = &mut out[item * out_len..(item + 1) * out_len];
            if geom.transposed {
                convt_item_forward(xi, wd, bd, geom, yi);
            } else {
                conv_item_forward(xi, wd, bd, geom, yi);
            }
        }
        let mut shape = vec![n, geom.c_out];
        shape.extend_from_slice(&geom.out_dims);
        self.push(Op::Conv { x, w, b, geom: geom.clone() }, Tensor::new(shape, out))
    }

    /// Batch normalization using the batch's own statistics.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (mean, var) = channel_stats(self.value(x));
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.normalize_with(x, gamma, beta, mean, inv_std, false)
    }

    /// Batch normalization with fixed per-channel statistics (running
    /// estimates); the statistics receive no gradient.
    pub fn batch_norm_frozen(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
    ) -> NodeId {
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.normalize_with(x, gamma, beta, mean.to_vec(), inv_std, true)
    }

    fn normalize_with(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        frozen: bool,
    ) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 2);
        let (n, c) = (shape[0], shape[1]);
        let sp: usize = shape[2..].iter().product();
        let src = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        assert_eq!(gd.len(), c);
        assert_eq!(bd.len(), c);
        assert_eq!(mean.len(), c);
        assert_eq!(inv_std.len(), c);
        let mut out = vec![0.0; src.len()];
        for item in 0..n {
            for ch in 0..c {
                let base = (item * c + ch) * sp;
                let (mu, is, g, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in 0..sp {
                    out[base + i] = g * (src[base + i] - mu) * is + be;
                }
            }
        }
        self.push(
            Op::BatchNorm { x, gamma, beta, mean, inv_std, frozen },
            Tensor::new(shape, out),
        )
    }

    /// Per-channel outer product: `[N, C, M] × [N, C, M] → [N, C, M, M]`.
    pub fn batch_outer(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 3);
        assert_eq!(self.shape(b), shape.as_slice());
        let (n, c, m) = (shape[0], shape[1], shape[2]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; n * c * m * m];
        for nc in 0..n * c {
            let av = &ad[nc * m..(nc + 1) * m];
            let bv = &bd[nc * m..(nc + 1) * m];
            let dst = &mut out[nc * m * m..(nc + 1) * m * m];
            for (i, &x) in av.iter().enumerate() {
                for (j, &y) in bv.iter().enumerate() {
                    dst[i * m + j] = x * y;
                }
            }
        }
        self.push(Op::BatchOuter { a, b }, Tensor::new(vec![n, c, m, m], out))
    }

    /// Periodic plane waves over an integer grid with 0-based coordinates.
    ///
    /// `freqs: [N, rank·d_p]` (axis-major: all first-axis coefficients, then
    /// all second-axis, …); `xi: [N·d_p]` phase offsets. Output
    /// `[N, d_p, *dims]` with value `sin(Σ_ax freq·coord + ξ)`.
    pub fn waves(&mut self, freqs: NodeId, xi: &[f64], d_p: usize, dims: &[usize]) -> NodeId {
        let fs = self.shape(freqs).to_vec();
        let rank = dims.len();
        assert_eq!(fs.len(), 2);
        assert_eq!(fs[1], rank * d_p, "frequency width must be rank·d_p");
        let n = fs[0];
        assert_eq!(xi.len(), n * d_p);
        let sp: usize = dims.iter().product();
        let fd = self.data(freqs);
        let mut out = vec![0.0; n * d_p * sp];
        let mut coord = vec![0usize; rank];
        for item in 0..n {
            for k in 0..d_p {
                let dst = &mut out[(item * d_p + k) * sp..(item * d_p + k + 1) * sp];
                let phase = xi[item * d_p + k];
                coord.iter_mut().for_each(|c| *c = 0);
                for slot in dst.iter_mut() {
                    let mut arg = phase;
                    for (ax, &cv) in coord.iter().enumerate() {
                        arg += fd[item * rank * d_p + ax * d_p + k] * cv as f64;
                    }
                    *slot = arg.sin();
                    for ax in (0..rank).rev() {
                        coord[ax] += 1;
                        if coord[ax] < dims[ax] {
                            break;
                        }
                        coord[ax] = 0;
                    }
                }
            }
        }
        let mut shape = vec![n, d_p];
        shape.extend_from_slice(dims);
        self.push(
            Op::Waves { freqs, xi: xi.to_vec(), d_p, dims: dims.to_vec() },
            Tensor::new(shape, out),
        )
    }

    /// Spectrally normalized weight `w/σ(w)`.
    ///
    /// With `training` set, runs one power-iteration step and writes the
    /// updated vectors back into their buffer entries; otherwise the stored
    /// vectors are used as-is. `w` is treated as a matrix `[rows, cols]` by
    /// flattening all trailing axes.
    pub fn spec_norm(
        &mut self,
        params: &mut ParamSet,
        w: NodeId,
        u_idx: usize,
        v_idx: usize,
        training: bool,
    ) -> NodeId {
        let wshape = self.shape(w).to_vec();
        let rows = wshape[0];
        let cols: usize = wshape[1..].iter().product();
        let wd = self.data(w);
        let mut u = params.get(u_idx).data().to_vec();
        let mut v = params.get(v_idx).data().to_vec();
        assert_eq!(u.len(), rows);
        assert_eq!(v.len(), cols);
        if training {
            // v ← normalize(Wᵀu), u ← normalize(Wv)
            for j in 0..cols {
                v[j] = 0.0;
            }
            for i in 0..rows {
                let ui = u[i];
                for j in 0..cols {
                    v[j] += wd[i * cols + j] * ui;
                }
            }
            normalize(&mut v);
            for (i, slot) in u.iter_mut().enumerate() {
                *slot = wd[i * cols..(i + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            normalize(&mut u);
            params.set_value(u_idx, Tensor::new(vec![rows], u.clone()));
            params.set_value(v_idx, Tensor::new(vec![cols], v.clone()));
        }
        let mut sigma = 0.0;
        for i in 0..rows {
            let dot: f64 = wd[i * cols..(i + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum();
            sigma += u[i] * dot;
        }
        let data = wd.iter().map(|&x| x / sigma).collect();
        self.push(Op::SpecNorm { w, u, v, sigma }, Tensor::new(wshape, data))
    }

    /// Mean cross-entropy of `[N, C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let shape = self.shape(logits).to_vec();
        assert_eq!(shape.len(), 2);
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(labels.len(), n);
        let ld = self.data(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for item in 0..n {
            let row = &ld[item * c..(item + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &l) in row.iter().enumerate() {
                let e = (l - max).exp();
                probs[item * c + j] = e;
                z += e;
            }
            for p in &mut probs[item * c..(item + 1) * c] {
                *p /= z;
            }
            loss -= probs[item * c + labels[item]].ln();
        }
        loss /= n as f64;
        self.push(
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            Tensor::scalar_tensor(loss),
        )
    }

    fn op_inputs(op: &Op) -> Vec<NodeId> {
        match op {
            Op::Const | Op::Param { .. } => vec![],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::BatchOuter { a, b } => {
                vec![*a, *b]
            }
            Op::Affine { x, .. }
            | Op::Exp { x }
            | Op::Ln { x }
            | Op::Sin { x }
            | Op::Tanh { x }
            | Op::Sigmoid { x }
            | Op::LeakyRelu { x, .. }
            | Op::Clamp { x, .. }
            | Op::MeanAll { x }
            | Op::MeanAxis { x, .. }
            | Op::BroadcastSpatial { x, .. }
            | Op::Slice { x, .. }
            | Op::Reshape { x } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                if let Some(b) = b {
                    v.push(*b);
                }
                v
            }
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                if let Some(b) = b {
                    v.push(*b);
                }
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Waves { freqs, .. } => vec![*freqs],
            Op::SpecNorm { w, .. } => vec![*w],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Gradients of scalar node `seed` with respect to every [`Op::Param`]
    /// whose arena index satisfies `wanted`. Contributions from repeated
    /// references to one parameter are summed.
    #[must_use]
    pub fn backward(
        &self,
        seed: NodeId,
        wanted: &dyn Fn(usize) -> bool,
    ) -> HashMap<usize, Tensor> {
        assert_eq!(self.nodes[seed.0].value.numel(), 1, "backward seed must be scalar");
        let n = seed.0 + 1;
        // Nodes that transitively depend on a selected parameter.
        let mut interesting = vec![false; n];
        for i in 0..n {
            interesting[i] = match &self.nodes[i].op {
                Op::Param { idx } => wanted(*idx),
                op => Tape::op_inputs(op).iter().any(|id| interesting[id.0]),
            };
        }
        // Nodes the seed depends on.
        let mut live = vec![false; n];
        live[seed.0] = true;
        for i in (0..n).rev() {
            if live[i] && interesting[i] {
                for id in Tape::op_inputs(&self.nodes[i].op) {
                    live[id.0] = true;
                }
            }
        }
        let active: Vec<bool> = (0..n).map(|i| live[i] && interesting[i]).collect();

        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[seed.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !active[i] {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &active, &mut grads);
        }
        // grads were consumed during propagation except for leaves; collect
        // parameter gradients left in the leaf slots, summing repeated uses.
        let mut out: HashMap<usize, Tensor> = HashMap::new();
        for i in 0..n {
            let Op::Param { idx } = self.nodes[i].op else { continue };
            let Some(g) = grads[i].take() else { continue };
            match out.get_mut(&idx) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(idx, Tensor::new(self.nodes[i].value.shape().to_vec(), g));
                }
            }
        }
        out
    }

    fn propagate(&self, i: usize, g: &[f64], active: &[bool], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !active[id.0] {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
            f(slot);
        };
        match &self.nodes[i].op {
            Op::Const => {}
            Op::Param { .. } => {
                // Leaves keep their gradient; it is taken back out of the
                // grads table after the sweep. Re-store it.
                grads[i] = Some(g.to_vec());
            }
            Op::Add { a, b } => {
                acc(grads, *a, &mut |d| add_into(d, g, 1.0));
                acc(grads, *b, &mut |d| add_into(d, g, 1.0));
            }
            Op::Sub { a, b } => {
                acc(grads, *a, &mut |d| add_into(d, g, 1.0));
                acc(grads, *b, &mut |d| add_into(d, g, -1.0));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(grads, *a, &mut |d| mul_add_into(d, g, bv));
                acc(grads, *b, &mut |d| mul_add_into(d, g, av));
            }
            Op::Affine { x, a, .. } => acc(grads, *x, &mut |d| add_into(d, g, *a)),
            Op::Exp { x } => {
                let y = self.nodes[i].value.data();
                acc(grads, *x, &mut |d| mul_add_into(d, g, y));
            }
            Op::Ln { x } => {
                let xv = self.data(*x);
                acc(grads, *x, &mut |d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(xv) {
                        *d += gv / x;
                    }
                });
            }
            Op::Sin { x } => {
                let xv = self.data(*x);
                acc(grads, *x, &mut |d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(xv) {
                        *d += gv * x.cos();
                    }
                });
            }
            Op::Tanh { x } => {
                let y = self.nodes[i].value.data();
                acc(grads, *x, &mut |d| {
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                acc(grads, *x, &mut |d| {
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += gv * y * (1.0 - y);
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.data(*x);
                acc(grads, *x, &mut |d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(xv) {
                        *d += gv * if x > 0.0 { 1.0 } else { *slope };
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.data(*x);
                acc(grads, *x, &mut |d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(xv) {
                        if x > *lo && x < *hi {
                            *d += gv;
                        }
                    }
                });
            }
            Op::MeanAll { x } => {
                let scale = g[0] / self.nodes[x.0].value.numel() as f64;
                acc(grads, *x, &mut |d| {
                    for d in d.iter_mut() {
                        *d += scale;
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis);
                let scale = 1.0 / len as f64;
                acc(grads, *x, &mut |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for idx in 0..inner {
                                d[base + idx] += g[o * inner + idx] * scale;
                            }
                        }
                    }
                });
            }
            Op::BroadcastSpatial { x, dims } => {
                let sp: usize = dims.iter().product();
                acc(grads, *x, &mut |d| {
                    for (nc, slot) in d.iter_mut().enumerate() {
                        *slot += g[nc * sp..(nc + 1) * sp].iter().sum::<f64>();
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &id in inputs {
                    let len = self.shape(id)[*axis];
                    let off = offset;
                    acc(grads, id, &mut |d| {
                        for o in 0..outer {
                            let src = (o * total + off) * inner;
                            let dst = o * len * inner;
                            add_into(&mut d[dst..dst + len * inner], &g[src..src + len * inner], 1.0);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let shape = self.shape(*x);
                let (outer, full, inner) = axis_split(shape, *axis);
                acc(grads, *x, &mut |d| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut d[dst..dst + len * inner], &g[src..src + len * inner], 1.0);
                    }
                });
            }
            Op::Reshape { x } => acc(grads, *x, &mut |d| add_into(d, g, 1.0)),
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, d_in) = (xs[0], xs[1]);
                let d_out = self.shape(*w)[0];
                let (xv, wv) = (self.data(*x), self.data(*w));
                acc(grads, *x, &mut |d| gemm_acc(d, g, wv, n, d_out, d_in));
                acc(grads, *w, &mut |d| {
                    let mut g_t = vec![0.0; n * d_out];
                    transpose(&mut g_t, g, n, d_out);
                    gemm_acc(d, &g_t, xv, d_out, n, d_in);
                });
                if let Some(b) = b {
                    acc(grads, *b, &mut |d| {
                        for row in g.chunks(d_out) {
                            for (slot, &gv) in d.iter_mut().zip(row) {
                                *slot += gv;
                            }
                        }
                    });
                }
            }
            Op::Conv { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let (in_len, out_len) = (geom.in_len(), geom.out_len());
                let (xv, wv) = (self.data(*x), self.data(*w));
                acc(grads, *x, &mut |d| {
                    for item in 0..n {
                        let gy = &g[item * out_len..(item + 1) * out_len];
                        let dx = &mut d[item * in_len..(item + 1) * in_len];
                        if geom.transposed {
                            convt_item_grad_x(gy, wv, geom, dx);
                        } else {
                            conv_item_grad_x(gy, wv, geom, dx);
                        }
                    }
                });
                acc(grads, *w, &mut |d| {
                    for item in 0..n {
                        let gy = &g[item * out_len..(item + 1) * out_len];
                        let xi = &xv[item * in_len..(item + 1) * in_len];
                        if geom.transposed {
                            convt_item_grad_w(xi, gy, geom, d, None);
                        } else {
                            conv_item_grad_w(xi, gy, geom, d, None);
                        }
                    }
                });
                if let Some(b) = b {
                    let sp: usize = geom.out_dims.iter().product();
                    acc(grads, *b, &mut |d| {
                        for item in 0..n {
                            for c in 0..geom.c_out {
                                let base = (item * geom.c_out + c) * sp;
                                d[c] += g[base..base + sp].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, frozen } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let sp: usize = shape[2..].iter().product();
                let m = (n * sp) as f64;
                let xv = self.data(*x);
                let gv = self.data(*gamma);
                // Per-channel reductions of dy and dy·x̂.
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for item in 0..n {
                    for ch in 0..c {
                        let base = (item * c + ch) * sp;
                        for idx in 0..sp {
                            let xhat = (xv[base + idx] - mean[ch]) * inv_std[ch];
                            sum_dy[ch] += g[base + idx];
                            sum_dy_xhat[ch] += g[base + idx] * xhat;
                        }
                    }
                }
                acc(grads, *gamma, &mut |d| add_into(d, &sum_dy_xhat, 1.0));
                acc(grads, *beta, &mut |d| add_into(d, &sum_dy, 1.0));
                acc(grads, *x, &mut |d| {
                    for item in 0..n {
                        for ch in 0..c {
                            let base = (item * c + ch) * sp;
                            let scale = gv[ch] * inv_std[ch];
                            for idx in 0..sp {
                                // Fixed statistics are constants; batch
                                // statistics carry their own gradient terms.
                                if *frozen {
                                    d[base + idx] += scale * g[base + idx];
                                } else {
                                    let xhat = (xv[base + idx] - mean[ch]) * inv_std[ch];
                                    d[base + idx] += scale
                                        * (g[base + idx]
                                            - sum_dy[ch] / m
                                            - xhat * sum_dy_xhat[ch] / m);
                                }
                            }
                        }
                    }
                });
            }
            Op::BatchOuter { a, b } => {
                let shape = self.shape(*a);
                let (n, c, m) = (shape[0], shape[1], shape[2]);
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(grads, *a, &mut |d| {
                    for nc in 0..n * c {
                        for i2 in 0..m {
                            let row = &g[(nc * m + i2) * m..(nc * m + i2 + 1) * m];
                            d[nc * m + i2] +=
                                row.iter().zip(&bv[nc * m..(nc + 1) * m]).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(grads, *b, &mut |d| {
                    for nc in 0..n * c {
                        for i2 in 0..m {
                            let avi = av[nc * m + i2];
                            let row = &g[(nc * m + i2) * m..(nc * m + i2 + 1) * m];
                            for (slot, &gv2) in d[nc * m..(nc + 1) * m].iter_mut().zip(row) {
                                *slot += avi * gv2;
                            }
                        }
                    }
                });
            }
            Op::Waves { freqs, xi, d_p, dims } => {
                let rank = dims.len();
                let n = self.shape(*freqs)[0];
                let sp: usize = dims.iter().product();
                let fv = self.data(*freqs);
                acc(grads, *freqs, &mut |d| {
                    let mut coord = vec![0usize; rank];
                    for item in 0..n {
                        for k in 0..*d_p {
                            let gslice = &g[(item * d_p + k) * sp..(item * d_p + k + 1) * sp];
                            let phase = xi[item * d_p + k];
                            coord.iter_mut().for_each(|c2| *c2 = 0);
                            for &gv in gslice {
                                let mut arg = phase;
                                for (ax, &cv) in coord.iter().enumerate() {
                                    arg += fv[item * rank * d_p + ax * d_p + k] * cv as f64;
                                }
                                let c = arg.cos();
                                for (ax, &cv) in coord.iter().enumerate() {
                                    d[item * rank * d_p + ax * d_p + k] += gv * c * cv as f64;
                                }
                                for ax in (0..rank).rev() {
                                    coord[ax] += 1;
                                    if coord[ax] < dims[ax] {
                                        break;
                                    }
                                    coord[ax] = 0;
                                }
                            }
                        }
                    }
                });
            }
            Op::SpecNorm { w, u, v, sigma } => {
                let what = self.nodes[i].value.data();
                let inner: f64 = g.iter().zip(what).map(|(a, b)| a * b).sum();
                let cols = v.len();
                acc(grads, *w, &mut |d| {
                    for (r, &uv) in u.iter().enumerate() {
                        for (c2, &vv) in v.iter().enumerate() {
                            d[r * cols + c2] += (g[r * cols + c2] - inner * uv * vv) / sigma;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g[0] / n as f64;
                acc(grads, *logits, &mut |d| {
                    for (item, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == label { 1.0 } else { 0.0 };
                            d[item * c + j] += scale * (probs[item * c + j] - ind);
                        }
                    }
                });
            }
        }
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(SN_EPS);
    for x in v {
        *x /= norm;
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn mul_add_into(dst: &mut [f64], g: &[f64], other: &[f64]) {
    for ((d, &gv), &o) in dst.iter_mut().zip(g).zip(other) {
        *d += gv * o;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of `backward` against perturbing every
    /// trainable parameter element. `build` must construct the loss from the
    /// current parameter values.
    fn fd_check(params: &mut ParamSet, build: &dyn Fn(&mut Tape, &mut ParamSet) -> NodeId) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params);
        let grads = tape.backward(loss, &|_| true);
        let h = 1e-5;
        for idx in 0..params.len() {
            if !params.is_trainable(idx) {
                continue;
            }
            let n = params.get(idx).numel();
            for e in 0..n {
                let orig = params.get(idx).data()[e];
                params.get_mut(idx).data_mut()[e] = orig + h;
                let mut tp = Tape::new();
                let lp = build(&mut tp, params);
                let fp = tp.value(lp).scalar();
                params.get_mut(idx).data_mut()[e] = orig - h;
                let mut tm = Tape::new();
                let lm = build(&mut tm, params);
                let fm = tm.value(lm).scalar();
                params.get_mut(idx).data_mut()[e] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.get(&idx).map_or(0.0, |t| t.data()[e]);
                let denom = 1.0_f64.max(fd.abs()).max(an.abs());
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "param {} elem {e}: fd {fd} vs analytic {an}",
                    params.name(idx)
                );
            }
        }
    }

    #[test]
    fn elementwise_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        ps.add_randn("a", &[6], 0.7, &mut rng);
        ps.add_randn("b", &[6], 0.7, &mut rng);
        fd_check(&mut ps, &|t, ps| {
            let a = t.param(ps, 0);
            let b = t.param(ps, 1);
            let s = t.sin(a);
            let e = t.exp(b);
            let m = t.mul(s, e);
            let th = t.tanh(m);
            let sg = t.sigmoid(th);
            let lr = t.leaky_relu(sg, 0.2);
            let af = t.affine(lr, 1.5, 0.25);
            let ln = t.ln(af);
            t.mean_all(ln)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        ps.add_randn("a", &[2, 3], 0.8, &mut rng);
        ps.add_randn("b", &[2, 2], 0.8, &mut rng);
        fd_check(&mut ps, &|t, ps| {
            let a = t.param(ps, 0);
            let b = t.param(ps, 1);
            let cat = t.concat(&[a, b], 1);
            let sl = t.slice(cat, 1, 1, 3);
            let bc = t.broadcast_spatial(sl, &[2, 2]);
            let m = t.mean_axis(bc, 3);
            let r = t.reshape(m, vec![2, 6]);
            let tanh = t.tanh(r);
            t.mean_all(tanh)
        });
    }

    #[test]
    fn linear_and_reparameterization_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        ps.add_randn("w", &[3, 4], 0.5, &mut rng);
        ps.add_randn("b", &[3], 0.5, &mut rng);
        ps.add_randn("mu", &[2, 3], 0.5, &mut rng);
        ps.add_randn("logsig", &[2, 3], 0.3, &mut rng);
        let x = Tensor::randn(vec![2, 4], &mut rng);
        let eps = Tensor::randn(vec![2, 3], &mut rng);
        fd_check(&mut ps, &|t, ps| {
            let w = t.param(ps, 0);
            let b = t.param(ps, 1);
            let xn = t.constant(x.clone());
            let y = t.linear(xn, w, Some(b));
            // z = μ + exp(logσ)·ε with ε fixed: the sampling path used by the
            // encoder.
            let mu = t.param(ps, 2);
            let ls = t.param(ps, 3);
            let sig = t.exp(ls);
            let en = t.constant(eps.clone());
            let noise = t.mul(sig, en);
            let z = t.add(mu, noise);
            let zy = t.mul(z, y);
            let s = t.sin(zy);
            t.mean_all(s)
        });
    }

    #[test]
    fn conv_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeom::conv(2, 3, 3, 2, 1, &[5, 5]);
        let gt = ConvGeom::convt(3, 1, 4, 2, 1, 0, &[3, 3]);
        let mut ps = ParamSet::new();
        ps.add_randn("cw", &[3, 2, 3, 3], 0.3, &mut rng);
        ps.add_randn("cb", &[3], 0.3, &mut rng);
        ps.add_randn("tw", &[3, 1, 4, 4], 0.3, &mut rng);
        let x = Tensor::randn(vec![2, 2, 5, 5], &mut rng);
        fd_check(&mut ps, &|t, ps| {
            let w = t.param(ps, 0);
            let b = t.param(ps, 1);
            let tw = t.param(ps, 2);
            let xn = t.constant(x.clone());
            let y = t.conv(xn, w, Some(b), &g);
            let a = t.tanh(y);
            let z = t.conv_transposed(a, tw, None, &gt);
            let s = t.sigmoid(z);
            t.mean_all(s)
        });
    }

    #[test]
    fn batch_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        ps.add_randn("x", &[3, 2, 2, 2], 0.9, &mut rng);
        ps.add_randn("gamma", &[2], 0.4, &mut rng);
        ps.add_randn("beta", &[2], 0.4, &mut rng);
        fd_check(&mut ps, &|t, ps| {
            let x = t.param(ps, 0);
            let g = t.param(ps, 1);
            let b = t.param(ps, 2);
            let y = t.batch_norm(x, g, b);
            let s = t.tanh(y);
            t.mean_all(s)
        });
    }

    #[test]
    fn outer_product_and_waves_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamSet::new();
        ps.add_randn("ea", &[2, 3, 4], 0.6, &mut rng);
        ps.add_randn("eb", &[2, 3, 4], 0.6, &mut rng);
        ps.add_randn("freqs", &[2, 4], 0.8, &mut rng);
        let xi = vec![0.3, 1.1, 2.0, 0.7];
        fd_check(&mut ps, &|t, ps| {
            let a = t.param(ps, 0);
            let b = t.param(ps, 1);
            let o = t.batch_outer(a, b);
            let om = t.mean_all(o);
            let f = t.param(ps, 2);
            let w = t.waves(f, &xi, 2, &[3, 3]);
            let wm = t.mean_all(w);
            let wm2 = t.scale(wm, 0.5);
            t.add(om, wm2)
        });
    }

    #[test]
    fn spectral_norm_matches_finite_differences_with_frozen_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        ps.add_randn("w", &[3, 4], 0.7, &mut rng);
        let mut u = Tensor::randn(vec![3], &mut rng);
        let mut v = Tensor::randn(vec![4], &mut rng);
        for t in [&mut u, &mut v] {
            let n = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in t.data_mut() {
                *x /= n;
            }
        }
        ps.add("u", u, false);
        ps.add("v", v, false);
        // Run a few power iterations so the stored vectors are converged, then
        // freeze them (training = false) for the finite-difference check.
        for _ in 0..30 {
            let mut warm = Tape::new();
            let w = warm.param(&ps, 0);
            warm.spec_norm(&mut ps, w, 1, 2, true);
        }
        fd_check(&mut ps, &|t, ps| {
            let w = t.param(ps, 0);
            let wn = t.spec_norm(ps, w, 1, 2, false);
            let s = t.tanh(wn);
            t.mean_all(s)
        });
    }

    #[test]
    fn spectral_norm_power_iteration_approaches_top_singular_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        ps.add_randn("w", &[6, 5], 1.0, &mut rng);
        ps.add("u", Tensor::full(vec![6], 1.0), false);
        ps.add("v", Tensor::zeros(vec![5]), false);
        let mut sigma = 0.0;
        for _ in 0..200 {
            let mut t = Tape::new();
            let w = t.param(&ps, 0);
            let wn = t.spec_norm(&mut ps, w, 1, 2, true);
            // Recover σ from the scaling of the first weight element.
            let w0 = ps.get(0).data()[0];
            sigma = w0 / t.value(wn).data()[0];
        }
        // σ must dominate the norm of W·x/|x| for random probes.
        for _ in 0..20 {
            let x = Tensor::randn(vec![5], &mut rng);
            let xd = x.data();
            let nx = xd.iter().map(|v| v * v).sum::<f64>().sqrt();
            let w = ps.get(0).data();
            let mut ny = 0.0;
            for r in 0..6 {
                let y: f64 = (0..5).map(|c| w[r * 5 + c] * xd[c]).sum();
                ny += y * y;
            }
            assert!(ny.sqrt() / nx <= sigma * (1.0 + 1e-6));
        }
    }

    #[test]
    fn cross_entropy_matches_finite_differences_and_hand_value() {
        let mut ps = ParamSet::new();
        ps.add("logits", Tensor::new(vec![2, 3], vec![0.2, -0.1, 0.7, 1.0, 0.0, -1.0]), true);
        let labels = vec![2usize, 0];
        // Hand value: mean of -log softmax at the labels.
        let mut expect = 0.0;
        let rows: [[f64; 3]; 2] = [[0.2, -0.1, 0.7], [1.0, 0.0, -1.0]];
        for (row, &lab) in rows.iter().zip(&labels) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[lab].exp() / z).ln();
        }
        expect /= 2.0;
        let mut t = Tape::new();
        let l = t.param(&ps, 0);
        let ce = t.cross_entropy(l, &labels);
        assert!((t.value(ce).scalar() - expect).abs() < 1e-12);
        fd_check(&mut ps, &|t, ps| {
            let l = t.param(ps, 0);
            t.cross_entropy(l, &labels)
        });
    }

    #[test]
    fn backward_sums_repeated_parameter_uses() {
        // f = mean(w) + mean(w·w): two separate Param nodes for one parameter.
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(vec![2], vec![3.0, -1.0]), true);
        let mut t = Tape::new();
        let w1 = t.param(&ps, 0);
        let w2 = t.param(&ps, 0);
        let sq = t.mul(w1, w2);
        let m1 = t.mean_all(w1);
        let m2 = t.mean_all(sq);
        let f = t.add(m1, m2);
        let g = t.backward(f, &|_| true);
        // df/dw_i = 1/2 + 2·w_i/2 = 0.5 + w_i.
        let gd = g[&0].data();
        assert!((gd[0] - 3.5).abs() < 1e-12);
        assert!((gd[1] - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn backward_filter_prunes_unselected_parameters() {
        let mut ps = ParamSet::new();
        ps.add("gen.w", Tensor::new(vec![1], vec![2.0]), true);
        ps.add("dx.w", Tensor::new(vec![1], vec![5.0]), true);
        let mut t = Tape::new();
        let a = t.param(&ps, 0);
        let b = t.param(&ps, 1);
        let p = t.mul(a, b);
        let f = t.mean_all(p);
        let g = t.backward(f, &|i| ps.name(i).starts_with("gen."));
        assert_eq!(g.len(), 1);
        assert!((g[&0].data()[0] - 5.0).abs() < 1e-12);
        assert!(!g.contains_key(&1));
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(vec![3], vec![0.5, 2.0, -2.0]), true);
        let mut t = Tape::new();
        let w = t.param(&ps, 0);
        let c = t.clamp(w, 0.0, 1.0);
        let m = t.mean_all(c);
        let g = t.backward(m, &|_| true);
        let gd = g[&0].data();
        assert_eq!(gd, &[1.0 / 3.0, 0.0, 0.0]);
    }
}
