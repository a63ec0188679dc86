//! Generator, encoder, and the three discriminators, for 2-D textures and
//! 3-D volumes.
//!
//! Architectures are data: a spec lists every convolution with its geometry,
//! normalization, and activation, and builders register parameters in a
//! [`ParamSet`] under fixed name prefixes (`gen.`, `enc.`, `dx.`, `dxx.`,
//! `dz.`). Forward passes run on a [`Tape`] so gradients are available to the
//! training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::kernels::ConvGeom;
use crate::latent::{self, LatentSpec};
use crate::params::ParamSet;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Initial standard deviation for conv and linear weights.
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    None,
    LeakyRelu(f64),
    Tanh,
}

/// One convolution layer: geometry, normalization, activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub out_pad: usize,
    pub bias: bool,
    pub bn: bool,
    pub sn: bool,
    pub act: Activation,
    pub transposed: bool,
}

impl ConvLayerSpec {
    #[must_use]
    pub fn conv(c_in: usize, c_out: usize, k: usize, s: usize, p: usize) -> Self {
        ConvLayerSpec {
            c_in,
            c_out,
            k,
            s,
            p,
            out_pad: 0,
            bias: true,
            bn: false,
            sn: false,
            act: Activation::None,
            transposed: false,
        }
    }

    #[must_use]
    pub fn convt(c_in: usize, c_out: usize, k: usize, s: usize, p: usize, out_pad: usize) -> Self {
        ConvLayerSpec { out_pad, transposed: true, ..ConvLayerSpec::conv(c_in, c_out, k, s, p) }
    }

    #[must_use]
    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    #[must_use]
    pub fn with_bn(mut self) -> Self {
        self.bn = true;
        self
    }

    #[must_use]
    pub fn with_sn(mut self, sn: bool) -> Self {
        self.sn = sn;
        self
    }

    #[must_use]
    pub fn with_act(mut self, act: Activation) -> Self {
        self.act = act;
        self
    }

    fn geom(&self, in_dims: &[usize]) -> ConvGeom {
        if self.transposed {
            ConvGeom::convt(self.c_in, self.c_out, self.k, self.s, self.p, self.out_pad, in_dims)
        } else {
            ConvGeom::conv(self.c_in, self.c_out, self.k, self.s, self.p, in_dims)
        }
    }
}

/// Full model architecture: layer tables for all five networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub ndim: usize,
    pub image_channels: usize,
    /// Training crop side; must equal the generator output for the latent
    /// extent used in training.
    pub crop: usize,
    /// Leaky-rectifier slope of the latent discriminator.
    pub slope: f64,
    pub gen: Vec<ConvLayerSpec>,
    pub enc: Vec<ConvLayerSpec>,
    pub disc_tex: Vec<ConvLayerSpec>,
    pub pair_tower: Vec<ConvLayerSpec>,
    pub pair_head: Vec<ConvLayerSpec>,
    /// Hidden widths of the latent discriminator MLP.
    pub disc_latent: Vec<usize>,
}

/// Side length of the generator output for a latent grid of extent `l`.
///
/// 2-D stacks double five times from `l`; 3-D stacks first grow `l` to `l+3`
/// and then double four times.
#[must_use]
pub fn generator_output_side(ndim: usize, l: usize) -> usize {
    assert!(l >= 1);
    match ndim {
        2 => 32 * l,
        3 => 16 * (l + 3),
        _ => panic!("ndim must be 2 or 3"),
    }
}

/// Closed-form parameter estimate of this model family at latent width `d`.
#[must_use]
pub fn ours_param_estimate(d: usize) -> usize {
    25600 * (d + 336)
}

/// Closed-form parameter estimate of a direct-template baseline with `n`
/// stored exemplars.
#[must_use]
pub fn dts_param_estimate(n: usize) -> usize {
    34816 * (n + 71)
}

/// Total trainable scalars registered under `prefix`.
#[must_use]
pub fn count_parameters(params: &ParamSet, prefix: &str) -> usize {
    params.count_trainable(prefix)
}

impl ArchitectureSpec {
    /// 2-D architecture with configurable channel ladders.
    ///
    /// Geometry is fixed: kernel 5, stride 2, pad 2 everywhere (output pad 1
    /// on transposed layers), so every generator layer doubles and every
    /// encoder/discriminator layer halves the spatial side.
    #[allow(clippy::too_many_arguments)]
    #[must_use]
    pub fn custom_2d(
        l: &LatentSpec,
        crop: usize,
        gen_ch: &[usize],
        enc_ch: &[usize],
        disc_ch: &[usize],
        tower_ch: &[usize],
        tower_embed: usize,
        head_ch: &[usize],
        disc_latent: &[usize],
        sn: bool,
    ) -> Self {
        let slope = 0.2;
        let lrelu = Activation::LeakyRelu(slope);
        let img = 3;
        let mut gen = Vec::new();
        let gchain: Vec<usize> =
            std::iter::once(l.channels()).chain(gen_ch.iter().copied()).chain([img]).collect();
        for (i, w) in gchain.windows(2).enumerate() {
            let last = i + 1 == gchain.len() - 1;
            let mut layer = ConvLayerSpec::convt(w[0], w[1], 5, 2, 2, 1).with_bias(false);
            layer = if last { layer.with_act(Activation::Tanh) } else { layer.with_bn().with_act(lrelu) };
            gen.push(layer);
        }
        let mut enc = Vec::new();
        let echain: Vec<usize> =
            std::iter::once(img).chain(enc_ch.iter().copied()).chain([2 * l.d_global]).collect();
        for (i, w) in echain.windows(2).enumerate() {
            let last = i + 1 == echain.len() - 1;
            let layer = ConvLayerSpec::conv(w[0], w[1], 5, 2, 2);
            enc.push(match (i, last) {
                (0, _) => layer.with_act(lrelu),
                (_, false) => layer.with_bias(false).with_bn().with_act(lrelu),
                (_, true) => layer,
            });
        }
        let disc_tex = disc_stack_2d(img, disc_ch, 1, sn, lrelu);
        let pair_tower = disc_stack_2d(img, tower_ch, tower_embed, sn, lrelu);
        let pair_head = head_stack(tower_embed, head_ch, sn, lrelu);
        ArchitectureSpec {
            ndim: 2,
            image_channels: img,
            crop,
            slope,
            gen,
            enc,
            disc_tex,
            pair_tower,
            pair_head,
            disc_latent: disc_latent.to_vec(),
        }
    }

    /// 3-D architecture with configurable channel ladders.
    ///
    /// Geometry is fixed: the first generator layer grows `l` to `l+3`
    /// (kernel 4, stride 1), all other strided layers use kernel 4, stride 2,
    /// pad 1; discriminator stacks end with a kernel-4 stride-1 valid layer.
    /// The encoder ends with a 1×1 projection before pooling.
    #[allow(clippy::too_many_arguments)]
    #[must_use]
    pub fn custom_3d(
        l: &LatentSpec,
        crop: usize,
        gen_ch: &[usize],
        enc_ch: &[usize],
        disc_ch: &[usize],
        tower_ch: &[usize],
        tower_embed: usize,
        head_ch: &[usize],
        disc_latent: &[usize],
        sn: bool,
    ) -> Self {
        let slope = 0.01;
        let lrelu = Activation::LeakyRelu(slope);
        let img = 1;
        let mut gen = Vec::new();
        let gchain: Vec<usize> =
            std::iter::once(l.channels()).chain(gen_ch.iter().copied()).chain([img]).collect();
        for (i, w) in gchain.windows(2).enumerate() {
            let last = i + 1 == gchain.len() - 1;
            let mut layer = if i == 0 {
                ConvLayerSpec::convt(w[0], w[1], 4, 1, 0, 0)
            } else {
                ConvLayerSpec::convt(w[0], w[1], 4, 2, 1, 0)
            }
            .with_bias(false);
            layer = if last { layer.with_act(Activation::Tanh) } else { layer.with_bn().with_act(lrelu) };
            gen.push(layer);
        }
        let mut enc = Vec::new();
        let mut prev = img;
        for (i, &c) in enc_ch.iter().enumerate() {
            let layer = ConvLayerSpec::conv(prev, c, 4, 2, 1);
            enc.push(if i == 0 {
                layer.with_act(lrelu)
            } else {
                layer.with_bias(false).with_bn().with_act(lrelu)
            });
            prev = c;
        }
        enc.push(ConvLayerSpec::conv(prev, 2 * l.d_global, 1, 1, 0));
        let disc_tex = disc_stack_3d(img, disc_ch, 1, sn, lrelu);
        let pair_tower = disc_stack_3d(img, tower_ch, tower_embed, sn, lrelu);
        let pair_head = head_stack(tower_embed, head_ch, sn, lrelu);
        ArchitectureSpec {
            ndim: 3,
            image_channels: img,
            crop,
            slope,
            gen,
            enc,
            disc_tex,
            pair_tower,
            pair_head,
            disc_latent: disc_latent.to_vec(),
        }
    }

    /// Full-size 2-D texture architecture (crop 160, latent extent 5).
    #[must_use]
    pub fn paper_2d(l: &LatentSpec) -> Self {
        ArchitectureSpec::custom_2d(
            l,
            160,
            &[512, 256, 128, 64],
            &[64, 128, 256, 512],
            &[64, 128, 256, 512],
            &[64, 128, 256, 512],
            96,
            &[48],
            &[512, 256],
            true,
        )
    }

    /// Full-size 3-D porous-structure architecture (crop 160, latent extent 7).
    #[must_use]
    pub fn paper_3d(l: &LatentSpec) -> Self {
        ArchitectureSpec::custom_3d(
            l,
            160,
            &[512, 256, 128, 64],
            &[16, 32, 64, 72, 128],
            &[64, 128, 256, 512],
            &[16, 32, 64, 73],
            128,
            &[128, 64],
            &[512, 256],
            true,
        )
    }

    /// Small 2-D architecture sized for CPU training runs (crop 64).
    #[must_use]
    pub fn desk_2d(l: &LatentSpec) -> Self {
        ArchitectureSpec::custom_2d(
            l,
            64,
            &[32, 22, 14, 8],
            &[8, 12, 16, 24],
            &[8, 12, 16, 24],
            &[8, 12, 16, 24],
            16,
            &[8],
            &[512, 256],
            true,
        )
    }

    /// Small 3-D architecture for CPU smoke runs (crop 64).
    #[must_use]
    pub fn desk_3d(l: &LatentSpec) -> Self {
        ArchitectureSpec::custom_3d(
            l,
            64,
            &[16, 12, 8, 6],
            &[6, 8, 10, 12, 16],
            &[6, 8, 10, 12],
            &[4, 6, 8, 10],
            12,
            &[8],
            &[256, 128],
            true,
        )
    }

    /// Structural consistency checks against a latent spec.
    pub fn validate(&self, l: &LatentSpec) -> Result<(), CoreError> {
        if self.ndim != l.ndim {
            return Err(CoreError::config("architecture/latent rank mismatch"));
        }
        for (name, stack) in [
            ("generator", &self.gen),
            ("encoder", &self.enc),
            ("texture discriminator", &self.disc_tex),
            ("pair tower", &self.pair_tower),
            ("pair head", &self.pair_head),
        ] {
            if stack.is_empty() {
                return Err(CoreError::config(format!("{name} has no layers")));
            }
            for w in stack.windows(2) {
                if w[0].c_out != w[1].c_in {
                    return Err(CoreError::config(format!(
                        "{name}: channel chain broken ({} out vs {} in)",
                        w[0].c_out, w[1].c_in
                    )));
                }
            }
        }
        if self.gen[0].c_in != l.channels() {
            return Err(CoreError::config("generator input must accept d^g+d^l+d^p channels"));
        }
        if self.gen.last().unwrap().c_out != self.image_channels {
            return Err(CoreError::config("generator must emit image channels"));
        }
        if self.enc[0].c_in != self.image_channels {
            return Err(CoreError::config("encoder must accept image channels"));
        }
        if self.enc.last().unwrap().c_out != 2 * l.d_global {
            return Err(CoreError::config("encoder must emit 2·d^g channels before pooling"));
        }
        if self.disc_tex.last().unwrap().c_out != 1 || self.pair_head.last().unwrap().c_out != 1 {
            return Err(CoreError::config("discriminator stacks must end in one channel"));
        }
        if self.pair_head[0].c_in != self.pair_tower.last().unwrap().c_out {
            return Err(CoreError::config("pair head input must match tower embedding width"));
        }
        let mut dims = vec![l.spatial; self.ndim];
        for layer in &self.gen {
            dims = layer.geom(&dims).out_dims;
        }
        if dims.iter().any(|&d| d != self.crop) {
            return Err(CoreError::config(format!(
                "crop {} does not match generator output {dims:?} for latent extent {}",
                self.crop, l.spatial
            )));
        }
        Ok(())
    }
}

fn disc_stack_2d(
    img: usize,
    ladder: &[usize],
    final_out: usize,
    sn: bool,
    lrelu: Activation,
) -> Vec<ConvLayerSpec> {
    let chain: Vec<usize> =
        std::iter::once(img).chain(ladder.iter().copied()).chain([final_out]).collect();
    chain
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let last = i + 1 == chain.len() - 1;
            ConvLayerSpec::conv(w[0], w[1], 5, 2, 2)
                // The ladder's third layer runs unnormalized in the reference
                // tables; all others carry spectral normalization.
                .with_sn(sn && i != 2)
                .with_act(if last { Activation::None } else { lrelu })
        })
        .collect()
}

fn disc_stack_3d(
    img: usize,
    ladder: &[usize],
    final_out: usize,
    sn: bool,
    lrelu: Activation,
) -> Vec<ConvLayerSpec> {
    let chain: Vec<usize> =
        std::iter::once(img).chain(ladder.iter().copied()).chain([final_out]).collect();
    chain
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let last = i + 1 == chain.len() - 1;
            let layer = if last {
                ConvLayerSpec::conv(w[0], w[1], 4, 1, 0)
            } else {
                ConvLayerSpec::conv(w[0], w[1], 4, 2, 1)
            };
            layer.with_sn(sn && i != 2).with_act(if last { Activation::None } else { lrelu })
        })
        .collect()
}

fn head_stack(embed: usize, ladder: &[usize], sn: bool, lrelu: Activation) -> Vec<ConvLayerSpec> {
    let chain: Vec<usize> =
        std::iter::once(embed).chain(ladder.iter().copied()).chain([1]).collect();
    chain
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let last = i + 1 == chain.len() - 1;
            ConvLayerSpec::conv(w[0], w[1], 1, 1, 0)
                .with_sn(sn)
                .with_act(if last { Activation::None } else { lrelu })
        })
        .collect()
}

/// A built convolution layer: parameter indices plus the layer spec.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub spec: ConvLayerSpec,
    w: usize,
    b: Option<usize>,
    bn: Option<(usize, usize)>,
    /// Running normalization statistics (mean, variance), fully replaced by
    /// each training batch and used verbatim outside training.
    bn_stats: Option<(usize, usize)>,
    sn: Option<(usize, usize)>,
}

impl ConvLayer {
    /// Registers this layer's parameters under `prefix` and returns the
    /// layer. Weight shape is `[c_out, c_in, k…]` for convolution and
    /// `[c_in, c_out, k…]` for transposed convolution; `rank` is the number
    /// of spatial axes (the kernel is hypercubic).
    pub fn build_with_rank(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        prefix: &str,
        spec: &ConvLayerSpec,
        rank: usize,
    ) -> Self {
        let mut wshape = if spec.transposed {
            vec![spec.c_in, spec.c_out]
        } else {
            vec![spec.c_out, spec.c_in]
        };
        wshape.extend(std::iter::repeat(spec.k).take(rank));
        let w = params.add_randn(&format!("{prefix}weight"), &wshape, INIT_STD, rng);
        let b = spec
            .bias
            .then(|| params.add_full(&format!("{prefix}bias"), &[spec.c_out], 0.0));
        let bn = spec.bn.then(|| {
            let g = params.add_full(&format!("{prefix}bn_gamma"), &[spec.c_out], 1.0);
            let be = params.add_full(&format!("{prefix}bn_beta"), &[spec.c_out], 0.0);
            (g, be)
        });
        let bn_stats = spec.bn.then(|| {
            let m = params.add(&format!("{prefix}bn_mean"), Tensor::zeros(vec![spec.c_out]), false);
            let v =
                params.add(&format!("{prefix}bn_var"), Tensor::full(vec![spec.c_out], 1.0), false);
            (m, v)
        });
        let sn = spec.sn.then(|| {
            let rows = wshape[0];
            let cols: usize = wshape[1..].iter().product();
            let mut u = Tensor::randn(vec![rows], rng);
            // One warm-up power iteration so σ > 0 from the first forward.
            let wd = params.get(w).data();
            let mut v = vec![0.0; cols];
            for (r, &uv) in u.data().iter().enumerate() {
                for (c, slot) in v.iter_mut().enumerate() {
                    *slot += wd[r * cols + c] * uv;
                }
            }
            normalize_slice(&mut v);
            let unew: Vec<f64> = (0..rows)
                .map(|r| wd[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum())
                .collect();
            u = Tensor::new(vec![rows], unew);
            normalize_slice(u.data_mut());
            let ui = params.add(&format!("{prefix}sn_u"), u, false);
            let vi = params.add(&format!("{prefix}sn_v"), Tensor::new(vec![cols], v), false);
            (ui, vi)
        });
        ConvLayer { spec: spec.clone(), w, b, bn, bn_stats, sn }
    }

    /// Runs the layer on `x` (`[N, c_in, *dims]`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut ParamSet,
        x: NodeId,
        training: bool,
    ) -> NodeId {
        let in_dims: Vec<usize> = tape.value(x).shape()[2..].to_vec();
        let geom = self.spec.geom(&in_dims);
        let mut w = tape.param(params, self.w);
        if let Some((u, v)) = self.sn {
            w = tape.spec_norm(params, w, u, v, training);
        }
        let b = self.b.map(|b| tape.param(params, b));
        let mut y = if self.spec.transposed {
            tape.conv_transposed(x, w, b, &geom)
        } else {
            tape.conv(x, w, b, &geom)
        };
        if let Some((g, be)) = self.bn {
            let gn = tape.param(params, g);
            let bn = tape.param(params, be);
            let (mi, vi) = self.bn_stats.expect("normalized layers track running statistics");
            if training {
                let (mean, var) = crate::tape::channel_stats(tape.value(y));
                y = tape.batch_norm(y, gn, bn);
                params.get_mut(mi).data_mut().copy_from_slice(&mean);
                params.get_mut(vi).data_mut().copy_from_slice(&var);
            } else {
                let mean = params.get(mi).data().to_vec();
                let var = params.get(vi).data().to_vec();
                y = tape.batch_norm_frozen(y, gn, bn, &mean, &var);
            }
        }
        match self.spec.act {
            Activation::None => y,
            Activation::LeakyRelu(s) => tape.leaky_relu(y, s),
            Activation::Tanh => tape.tanh(y),
        }
    }
}

fn normalize_slice(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v {
        *x /= n;
    }
}

/// A fully connected layer with bias.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    w: usize,
    b: usize,
}

impl LinearLayer {
    pub fn build(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = params.add_randn(&format!("{prefix}weight"), &[d_out, d_in], INIT_STD, rng);
        let b = params.add_full(&format!("{prefix}bias"), &[d_out], 0.0);
        LinearLayer { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> NodeId {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        tape.linear(x, w, Some(b))
    }

    fn weight_matrix<'p>(&self, params: &'p ParamSet) -> &'p Tensor {
        params.get(self.w)
    }

    fn bias_vector<'p>(&self, params: &'p ParamSet) -> &'p Tensor {
        params.get(self.b)
    }
}

/// Upsampling generator with the optional period-coefficient head.
#[derive(Clone, Debug)]
pub struct Generator {
    pub latent: LatentSpec,
    layers: Vec<ConvLayer>,
    head: Option<(LinearLayer, LinearLayer)>,
}

impl Generator {
    pub fn build(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        l: &LatentSpec,
        arch: &ArchitectureSpec,
    ) -> Self {
        let layers = arch
            .gen
            .iter()
            .enumerate()
            .map(|(i, s)| ConvLayer::build_with_rank(params, rng, &format!("gen.{i}."), s, arch.ndim))
            .collect();
        let head = (l.d_periodic > 0).then(|| {
            let h1 = LinearLayer::build(params, rng, "gen.head.0.", l.d_global, 40);
            let h2 =
                LinearLayer::build(params, rng, "gen.head.1.", 40, l.ndim * l.d_periodic);
            (h1, h2)
        });
        Generator { latent: l.clone(), layers, head }
    }

    /// Wave coefficients `[N, ndim·d_p]` from global codes `[N, d_g]`.
    pub fn period_coefs(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        zg: NodeId,
    ) -> Option<NodeId> {
        self.head.as_ref().map(|(h1, h2)| {
            let a = h1.forward(tape, params, zg);
            let r = tape.relu(a);
            h2.forward(tape, params, r)
        })
    }

    /// Runs the upsampling stack on an assembled noise tensor.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut ParamSet,
        noise: NodeId,
        training: bool,
    ) -> NodeId {
        let mut x = noise;
        for layer in &self.layers {
            x = layer.forward(tape, params, x, training);
        }
        x
    }

    /// Assembles noise from explicit draws and synthesizes images.
    ///
    /// `spec` may differ from the training spec only in its spatial extent;
    /// `local` must be `[N, d_l, *dims]` and `xi` of length `N·d_p`.
    pub fn synthesize(
        &self,
        tape: &mut Tape,
        params: &mut ParamSet,
        spec: &LatentSpec,
        zg: NodeId,
        local: Option<NodeId>,
        xi: &[f64],
        training: bool,
    ) -> NodeId {
        assert_eq!(
            (spec.d_global, spec.d_local, spec.d_periodic),
            (self.latent.d_global, self.latent.d_local, self.latent.d_periodic),
            "latent widths must match the trained model"
        );
        let periodic = self.period_coefs(tape, params, zg).map(|freqs| {
            latent::periodic_part(tape, freqs, xi, spec).expect("periodic part")
        });
        let z = latent::assemble_noise(tape, spec, zg, local, periodic);
        self.forward(tape, params, z, training)
    }
}

/// Encoder output as tape nodes, each `[N, d_g]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub mu: NodeId,
    pub log_sigma: NodeId,
}

/// Strided conv stack ending in global average pooling.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub d_global: usize,
    pub ndim: usize,
    layers: Vec<ConvLayer>,
}

impl Encoder {
    pub fn build(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        l: &LatentSpec,
        arch: &ArchitectureSpec,
    ) -> Self {
        let layers = arch
            .enc
            .iter()
            .enumerate()
            .map(|(i, s)| ConvLayer::build_with_rank(params, rng, &format!("enc.{i}."), s, arch.ndim))
            .collect();
        Encoder { d_global: l.d_global, ndim: arch.ndim, layers }
    }

    /// Batched forward (batch statistics shared across the batch, as used in
    /// training).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut ParamSet,
        images: NodeId,
        training: bool,
    ) -> EncoderOutput {
        let mut x = images;
        for layer in &self.layers {
            x = layer.forward(tape, params, x, training);
        }
        // Global average pooling: collapse spatial axes one at a time.
        while tape.value(x).ndim() > 2 {
            x = tape.mean_axis(x, 2);
        }
        let mu = tape.slice(x, 1, 0, self.d_global);
        let log_sigma = tape.slice(x, 1, self.d_global, self.d_global);
        EncoderOutput { mu, log_sigma }
    }

    /// Encodes each image independently (batch statistics per element), so
    /// the result does not depend on batch composition. Returns
    /// `(mu, log_sigma)`, each `[N, d_g]`.
    pub fn encode(&self, params: &mut ParamSet, images: &Tensor) -> (Tensor, Tensor) {
        let n = images.shape()[0];
        let item = images.numel() / n;
        let mut mu = Tensor::zeros(vec![n, self.d_global]);
        let mut ls = Tensor::zeros(vec![n, self.d_global]);
        let mut single_shape = images.shape().to_vec();
        single_shape[0] = 1;
        for i in 0..n {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(
                single_shape.clone(),
                images.data()[i * item..(i + 1) * item].to_vec(),
            ));
            let out = self.forward(&mut tape, params, x, false);
            mu.data_mut()[i * self.d_global..(i + 1) * self.d_global]
                .copy_from_slice(tape.value(out.mu).data());
            ls.data_mut()[i * self.d_global..(i + 1) * self.d_global]
                .copy_from_slice(tape.value(out.log_sigma).data());
        }
        (mu, ls)
    }

    /// Spatially resolved encoding of one image `[C, *dims]`: global pooling
    /// is replaced by stride-1 average pooling with the given kernel
    /// (clamped to the feature-map side). Returns `(mu, log_sigma)` grids,
    /// each `[d_g, *grid]`.
    pub fn spatial_encode(
        &self,
        params: &mut ParamSet,
        image: &Tensor,
        pool_kernel: usize,
    ) -> (Tensor, Tensor) {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let mut tape = Tape::new();
        let mut x = tape.constant(image.clone().reshape(shape));
        for layer in &self.layers {
            x = layer.forward(&mut tape, params, x, false);
        }
        let feat = tape.value(x);
        let spatial = feat.shape()[2..].to_vec();
        let channels = feat.shape()[1];
        let map = Tensor::new(
            std::iter::once(channels).chain(spatial.iter().copied()).collect(),
            feat.data().to_vec(),
        );
        let k = pool_kernel.max(1).min(spatial.iter().copied().min().unwrap());
        let pooled = avg_pool(&map, k);
        let grid: Vec<usize> = pooled.shape()[1..].to_vec();
        let grid_len: usize = grid.iter().product();
        let d = self.d_global;
        let mut mu = Tensor::zeros(std::iter::once(d).chain(grid.iter().copied()).collect());
        let mut ls = Tensor::zeros(std::iter::once(d).chain(grid.iter().copied()).collect());
        mu.data_mut().copy_from_slice(&pooled.data()[..d * grid_len]);
        ls.data_mut().copy_from_slice(&pooled.data()[d * grid_len..2 * d * grid_len]);
        (mu, ls)
    }
}

/// Stride-1 valid average pooling with a hypercubic kernel over `[C, *dims]`.
#[must_use]
pub fn avg_pool(t: &Tensor, k: usize) -> Tensor {
    let shape = t.shape();
    let c = shape[0];
    let dims = &shape[1..];
    assert!(dims.iter().all(|&d| d >= k), "pool kernel larger than map");
    let out_dims: Vec<usize> = dims.iter().map(|&d| d - k + 1).collect();
    let geom = ConvGeom::conv(1, 1, k, 1, 0, dims);
    let volume = k.pow(dims.len() as u32) as f64;
    let spatial_in: usize = dims.iter().product();
    let spatial_out: usize = out_dims.iter().product();
    let w = vec![1.0 / volume; geom.patch_len()];
    let mut out = vec![0.0; c * spatial_out];
    for ch in 0..c {
        crate::kernels::conv_item_forward(
            &t.data()[ch * spatial_in..(ch + 1) * spatial_in],
            &w,
            None,
            &geom,
            &mut out[ch * spatial_out..(ch + 1) * spatial_out],
        );
    }
    Tensor::new(std::iter::once(c).chain(out_dims).collect(), out)
}

/// Patch-level texture discriminator; outputs a probability grid.
#[derive(Clone, Debug)]
pub struct DiscTexture {
    layers: Vec<ConvLayer>,
}

impl DiscTexture {
    pub fn build(params: &mut ParamSet, rng: &mut impl Rng, arch: &ArchitectureSpec) -> Self {
        let layers = arch
            .disc_tex
            .iter()
            .enumerate()
            .map(|(i, s)| ConvLayer::build_with_rank(params, rng, &format!("dx.{i}."), s, arch.ndim))
            .collect();
        DiscTexture { layers }
    }

    /// Probability grid `[N, *grid]`, entries strictly inside (0, 1).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut ParamSet,
        x: NodeId,
        training: bool,
    ) -> NodeId {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, params, h, training);
        }
        let shape = tape.value(h).shape().to_vec();
        assert_eq!(shape[1], 1);
        let mut squeezed = vec![shape[0]];
        squeezed.extend_from_slice(&shape[2..]);
        let flat = tape.reshape(h, squeezed);
        tape.sigmoid(flat)
    }
}

/// Pair discriminator: shared tower, per-channel similarity, 1×1 head,
/// twin probability grids.
#[derive(Clone, Debug)]
pub struct DiscPair {
    ndim: usize,
    tower: Vec<ConvLayer>,
    head: Vec<ConvLayer>,
}

impl DiscPair {
    pub fn build(params: &mut ParamSet, rng: &mut impl Rng, arch: &ArchitectureSpec) -> Self {
        let tower = arch
            .pair_tower
            .iter()
            .enumerate()
            .map(|(i, s)| {
                ConvLayer::build_with_rank(params, rng, &format!("dxx.tower.{i}."), s, arch.ndim)
            })
            .collect();
        let head = arch
            .pair_head
            .iter()
            .enumerate()
            .map(|(i, s)| {
                // The head mixes channels of the 2-axis similarity matrix, so
                // its convolutions are rank-2 regardless of image rank.
                ConvLayer::build_with_rank(params, rng, &format!("dxx.head.{i}."), s, 2)
            })
            .collect();
        DiscPair { ndim: arch.ndim, tower, head }
    }

    fn embed(
        &self,
        tape: &mut Tape,
        params: &mut ParamSet,
        x: NodeId,
        training: bool,
    ) -> NodeId {
        let mut h = x;
        for layer in &self.tower {
            h = layer.forward(tape, params, h, training);
        }
        h
    }

    /// Twin probability grids: `[N, h, 2w]` in 2-D (x-half then y-half along
    /// the last axis), `[N, 2, s, s, s]` in 3-D. Swapping the inputs swaps
    /// the halves exactly.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut ParamSet,
        x: NodeId,
        y: NodeId,
        training: bool,
    ) -> NodeId {
        assert_eq!(tape.value(x).shape(), tape.value(y).shape(), "pair spatial mismatch");
        let e1 = self.embed(tape, params, x, training);
        let e2 = self.embed(tape, params, y, training);
        let eshape = tape.value(e1).shape().to_vec();
        let (n, c) = (eshape[0], eshape[1]);
        let grid: Vec<usize> = eshape[2..].to_vec();
        let m: usize = grid.iter().product();
        let f1 = tape.reshape(e1, vec![n, c, m]);
        let f2 = tape.reshape(e2, vec![n, c, m]);
        // [N, C, M, M]: per-channel outer products of the two embeddings.
        let mut h = tape.batch_outer(f1, f2);
        for layer in &self.head {
            h = layer.forward(tape, params, h, training);
        }
        // h: [N, 1, M, M]; averaging over the second site index scores x,
        // over the first scores y.
        let rows = tape.mean_axis(h, 3);
        let cols = tape.mean_axis(h, 2);
        let out = if self.ndim == 2 {
            let rx = tape.reshape(rows, vec![n, grid[0], grid[1]]);
            let ry = tape.reshape(cols, vec![n, grid[0], grid[1]]);
            tape.concat(&[rx, ry], 2)
        } else {
            let mut shape = vec![n, 1];
            shape.extend_from_slice(&grid);
            let rx = tape.reshape(rows, shape.clone());
            let ry = tape.reshape(cols, shape);
            tape.concat(&[rx, ry], 1)
        };
        tape.sigmoid(out)
    }
}

/// MLP discriminator on global latent codes.
#[derive(Clone, Debug)]
pub struct DiscLatent {
    slope: f64,
    layers: Vec<LinearLayer>,
}

impl DiscLatent {
    pub fn build(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        d_global: usize,
        arch: &ArchitectureSpec,
    ) -> Self {
        let chain: Vec<usize> =
            std::iter::once(d_global).chain(arch.disc_latent.iter().copied()).chain([1]).collect();
        let layers = chain
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearLayer::build(params, rng, &format!("dz.{i}."), w[0], w[1]))
            .collect();
        DiscLatent { slope: arch.slope, layers }
    }

    /// Probability per code, shape `[N]`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, z: NodeId) -> NodeId {
        let mut h = z;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, params, h);
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, self.slope);
            }
        }
        let n = tape.value(h).shape()[0];
        let flat = tape.reshape(h, vec![n]);
        tape.sigmoid(flat)
    }
}

/// All five networks plus their specs.
pub struct ModelBundle {
    pub latent: LatentSpec,
    pub arch: ArchitectureSpec,
    pub generator: Generator,
    pub encoder: Encoder,
    pub disc_texture: DiscTexture,
    pub disc_pair: DiscPair,
    pub disc_latent: DiscLatent,
}

impl ModelBundle {
    /// Builds and initializes every network in a fixed order so parameter
    /// layout is deterministic under a seeded RNG.
    pub fn build(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        l: &LatentSpec,
        arch: &ArchitectureSpec,
    ) -> Result<Self, CoreError> {
        arch.validate(l)?;
        let generator = Generator::build(params, rng, l, arch);
        let encoder = Encoder::build(params, rng, l, arch);
        let disc_texture = DiscTexture::build(params, rng, arch);
        let disc_pair = DiscPair::build(params, rng, arch);
        let disc_latent = DiscLatent::build(params, rng, l.d_global, arch);
        Ok(ModelBundle {
            latent: l.clone(),
            arch: arch.clone(),
            generator,
            encoder,
            disc_texture,
            disc_pair,
            disc_latent,
        })
    }
}

/// Synthesizes one large image from a spatial grid of global codes.
///
/// `z_grid` is `[d_g, H, W]`. Wave coefficients are computed per site by the
/// period head (weight sharing identical to a 1×1 convolution), phases are
/// zero, the wave argument uses global 0-based grid coordinates, and local
/// noise is drawn fresh from `rng`. Returns `[3, 32·H, 32·W]`.
pub fn tiled_generate(
    generator: &Generator,
    params: &mut ParamSet,
    z_grid: &Tensor,
    rng: &mut impl Rng,
) -> Result<Tensor, CoreError> {
    let l = &generator.latent;
    if l.ndim != 2 {
        return Err(CoreError::config("tiled generation is defined for 2-D models"));
    }
    let shape = z_grid.shape();
    assert_eq!(shape[0], l.d_global, "z grid channel mismatch");
    let (h, w) = (shape[1], shape[2]);
    let mut parts: Vec<f64> = Vec::with_capacity(l.channels() * h * w);
    parts.extend_from_slice(z_grid.data());
    let local = Tensor::randn(vec![1, l.d_local, h, w], rng);
    parts.extend_from_slice(local.data());
    if l.d_periodic > 0 {
        let (h1, h2) = generator.head.as_ref().expect("period head");
        let w1 = h1.weight_matrix(params).clone();
        let b1 = h1.bias_vector(params).clone();
        let w2 = h2.weight_matrix(params).clone();
        let b2 = h2.bias_vector(params).clone();
        let d = l.d_global;
        let dp = l.d_periodic;
        let hidden = b1.numel();
        let mut waves = vec![0.0; dp * h * w];
        for i in 0..h {
            for j in 0..w {
                // Per-site perceptron relu(W1·code + b1), then W2·(…) + b2;
                // summation order mirrors the tape's linear op (products in
                // input order, bias added last) so a constant grid reproduces
                // ordinary synthesis bit for bit.
                let code: Vec<f64> = (0..d).map(|c| z_grid.at(&[c, i, j])).collect();
                let mut hid = vec![0.0; hidden];
                for (o, slot) in hid.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (ci, &cv) in code.iter().enumerate() {
                        acc += cv * w1.data()[o * d + ci];
                    }
                    acc += b1.data()[o];
                    *slot = if acc > 0.0 { acc } else { 0.0 * acc };
                }
                for k in 0..dp {
                    let mut a = 0.0;
                    let mut b = 0.0;
                    for (hi, &hv) in hid.iter().enumerate() {
                        a += hv * w2.data()[k * hidden + hi];
                        b += hv * w2.data()[(dp + k) * hidden + hi];
                    }
                    a += b2.data()[k];
                    b += b2.data()[dp + k];
                    let mut arg = 0.0;
                    arg += a * i as f64;
                    arg += b * j as f64;
                    waves[(k * h + i) * w + j] = arg.sin();
                }
            }
        }
        parts.extend_from_slice(&waves);
    }
    let noise = Tensor::new(vec![1, l.channels(), h, w], parts);
    let mut tape = Tape::new();
    let z = tape.constant(noise);
    let out = generator.forward(&mut tape, params, z, false);
    let out_shape = tape.value(out).shape().to_vec();
    Ok(tape
        .value(out)
        .clone()
        .reshape(out_shape[1..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk() -> (ParamSet, ModelBundle) {
        let l = LatentSpec::new(2, 6, 2, 2, 2).unwrap();
        let arch = ArchitectureSpec::desk_2d(&l);
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bundle = ModelBundle::build(&mut params, &mut rng, &l, &arch).unwrap();
        (params, bundle)
    }

    #[test]
    fn output_side_arithmetic_matches_reference_points() {
        assert_eq!(generator_output_side(2, 5), 160);
        assert_eq!(generator_output_side(2, 10), 320);
        assert_eq!(generator_output_side(3, 7), 160);
        assert_eq!(generator_output_side(3, 25), 448);
    }

    #[test]
    fn full_2d_generator_realizes_declared_output() {
        let l = LatentSpec::new(2, 20, 4, 5, 2).unwrap();
        let arch = ArchitectureSpec::paper_2d(&l);
        arch.validate(&l).unwrap();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = Generator::build(&mut params, &mut rng, &l, &arch);
        let mut tape = Tape::new();
        let zg = tape.constant(latent::sample_prior_global(&l, 1, &mut rng));
        let local = tape.constant(latent::sample_local(&l, 1, &mut rng));
        let xi = latent::sample_phases(&l, 1, &mut rng);
        let out = gen.synthesize(&mut tape, &mut params, &l, zg, Some(local), &xi, true);
        assert_eq!(tape.value(out).shape(), &[1, 3, 160, 160]);
        // Final tanh keeps values inside (-1, 1).
        assert!(tape.value(out).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn parameter_count_matches_structural_sum_and_estimate() {
        let l = LatentSpec::new(2, 20, 4, 5, 2).unwrap();
        let arch = ArchitectureSpec::paper_2d(&l);
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let _ = ModelBundle::build(&mut params, &mut rng, &l, &arch).unwrap();
        let gen = count_parameters(&params, "gen.");
        let enc = count_parameters(&params, "enc.");
        // Layer-by-layer sums over the architecture tables.
        assert_eq!(gen, 4_640_768);
        assert_eq!(enc, 4_358_660);
        let estimate = ours_param_estimate(26);
        assert_eq!(estimate, 9_267_200);
        let total = (gen + enc) as f64;
        assert!((total - estimate as f64).abs() / estimate as f64 <= 0.05);
        assert_eq!(dts_param_estimate(5000), 176_551_936);
    }

    #[test]
    fn count_is_structure_only() {
        let (mut params, _) = desk();
        let before = count_parameters(&params, "");
        for i in 0..params.len() {
            if params.is_trainable(i) {
                for v in params.get_mut(i).data_mut() {
                    *v += 1.0;
                }
            }
        }
        assert_eq!(count_parameters(&params, ""), before);
    }

    #[test]
    fn encoder_shapes_and_zero_network_behaviour() {
        let (mut params, bundle) = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs = Tensor::randn(vec![4, 3, 64, 64], &mut rng);
        let (mu, ls) = bundle.encoder.encode(&mut params, &imgs);
        assert_eq!(mu.shape(), &[4, 2]);
        assert_eq!(ls.shape(), &[4, 2]);
        // Zeroing all encoder parameters collapses outputs to exactly zero.
        for i in params.trainable_with_prefix("enc.") {
            for v in params.get_mut(i).data_mut() {
                *v = 0.0;
            }
        }
        let (mu0, ls0) = bundle.encoder.encode(&mut params, &imgs);
        assert!(mu0.data().iter().all(|&v| v == 0.0));
        assert!(ls0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_independent_of_batch_composition() {
        let (mut params, bundle) = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let imgs = Tensor::randn(vec![3, 3, 64, 64], &mut rng);
        let (mu, _) = bundle.encoder.encode(&mut params, &imgs);
        for i in 0..3 {
            let one = Tensor::new(
                vec![1, 3, 64, 64],
                imgs.data()[i * 3 * 64 * 64..(i + 1) * 3 * 64 * 64].to_vec(),
            );
            let (mi, _) = bundle.encoder.encode(&mut params, &one);
            for c in 0..2 {
                assert_eq!(mi.at(&[0, c]).to_bits(), mu.at(&[i, c]).to_bits());
            }
        }
    }

    #[test]
    fn spatial_encode_with_full_kernel_matches_global_encode() {
        let (mut params, bundle) = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::randn(vec![3, 64, 64], &mut rng);
        let batch = Tensor::new(vec![1, 3, 64, 64], img.data().to_vec());
        let (mu, ls) = bundle.encoder.encode(&mut params, &batch);
        // Desk encoder's final feature map on a 64² input is 2×2; pooling with
        // a kernel larger than the map clamps to the full extent.
        let (smu, sls) = bundle.encoder.spatial_encode(&mut params, &img, 99);
        assert_eq!(smu.shape(), &[2, 1, 1]);
        for c in 0..2 {
            assert!((smu.at(&[c, 0, 0]) - mu.at(&[0, c])).abs() < 1e-12);
            assert!((sls.at(&[c, 0, 0]) - ls.at(&[0, c])).abs() < 1e-12);
        }
    }

    #[test]
    fn texture_disc_grid_and_zero_layer_value() {
        let (mut params, bundle) = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(vec![2, 3, 64, 64], &mut rng));
        let p = bundle.disc_texture.forward(&mut tape, &mut params, x, false);
        assert_eq!(tape.value(p).shape(), &[2, 2, 2]);
        assert!(tape.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
        // Zero final layer means sigmoid(0) = 1/2 exactly; checked on an
        // unnormalized variant (spectral norm is undefined at σ = 0).
        let l = LatentSpec::new(2, 6, 2, 2, 2).unwrap();
        let arch = ArchitectureSpec::custom_2d(
            &l,
            64,
            &[32, 22, 14, 8],
            &[8, 12, 16, 24],
            &[8, 12, 16, 24],
            &[8, 12, 16, 24],
            16,
            &[8],
            &[512, 256],
            false,
        );
        let mut p2s = ParamSet::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(60);
        let plain = ModelBundle::build(&mut p2s, &mut rng2, &l, &arch).unwrap();
        for name in ["dx.4.weight", "dx.4.bias"] {
            let i = p2s.idx(name);
            for v in p2s.get_mut(i).data_mut() {
                *v = 0.0;
            }
        }
        let mut t2 = Tape::new();
        let x2 = t2.constant(Tensor::randn(vec![1, 3, 64, 64], &mut rng));
        let p2 = plain.disc_texture.forward(&mut t2, &mut p2s, x2, false);
        assert!(t2.value(p2).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn pair_disc_swap_exchanges_halves_exactly() {
        let (mut params, bundle) = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let xv = Tensor::randn(vec![2, 3, 64, 64], &mut rng);
            let yv = Tensor::randn(vec![2, 3, 64, 64], &mut rng);
            let mut tape = Tape::new();
            let x = tape.constant(xv.clone());
            let y = tape.constant(yv.clone());
            let fwd = bundle.disc_pair.forward(&mut tape, &mut params, x, y, false);
            let a = tape.value(fwd).clone();
            let mut t2 = Tape::new();
            let x2 = t2.constant(xv);
            let y2 = t2.constant(yv);
            let swapped = bundle.disc_pair.forward(&mut t2, &mut params, y2, x2, false);
            let b = t2.value(swapped).clone();
            // [N, h, 2w]: columns w.. of one equal columns ..w of the other.
            let (n, h, w2) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let w = w2 / 2;
            for item in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        assert_eq!(
                            a.at(&[item, i, j]).to_bits(),
                            b.at(&[item, i, j + w]).to_bits()
                        );
                        assert_eq!(
                            a.at(&[item, i, j + w]).to_bits(),
                            b.at(&[item, i, j]).to_bits()
                        );
                    }
                }
            }
            assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn pair_disc_identical_inputs_give_identical_halves() {
        let (mut params, bundle) = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xv = Tensor::randn(vec![1, 3, 64, 64], &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let y = tape.constant(xv);
        let out = bundle.disc_pair.forward(&mut tape, &mut params, x, y, false);
        let v = tape.value(out);
        let (h, w2) = (v.shape()[1], v.shape()[2]);
        let w = w2 / 2;
        for i in 0..h {
            for j in 0..w {
                assert_eq!(v.at(&[0, i, j]).to_bits(), v.at(&[0, i, j + w]).to_bits());
            }
        }
    }

    #[test]
    fn latent_disc_shapes_and_zero_layer() {
        let (mut params, bundle) = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::randn(vec![7, 2], &mut rng));
        let p = bundle.disc_latent.forward(&mut tape, &params, z);
        assert_eq!(tape.value(p).shape(), &[7]);
        assert!(tape.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
        for name in ["dz.2.weight", "dz.2.bias"] {
            let i = params.idx(name);
            for v in params.get_mut(i).data_mut() {
                *v = 0.0;
            }
        }
        let mut t2 = Tape::new();
        let z2 = t2.constant(Tensor::randn(vec![3, 2], &mut rng));
        let p2 = bundle.disc_latent.forward(&mut t2, &params, z2);
        assert!(t2.value(p2).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn three_d_shapes_with_reduced_channels() {
        let l = LatentSpec::new(4, 4, 0, 1, 3).unwrap();
        let arch = ArchitectureSpec::desk_3d(&l);
        arch.validate(&l).unwrap();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bundle = ModelBundle::build(&mut params, &mut rng, &l, &arch).unwrap();
        let mut tape = Tape::new();
        let zg = tape.constant(latent::sample_prior_global(&l, 1, &mut rng));
        let local = tape.constant(latent::sample_local(&l, 1, &mut rng));
        let out =
            bundle.generator.synthesize(&mut tape, &mut params, &l, zg, Some(local), &[], true);
        assert_eq!(tape.value(out).shape(), &[1, 1, 64, 64, 64]);
        let p = bundle.disc_texture.forward(&mut tape, &mut params, out, false);
        assert_eq!(tape.value(p).shape(), &[1, 1, 1, 1]);
        let pair = bundle.disc_pair.forward(&mut tape, &mut params, out, out, false);
        assert_eq!(tape.value(pair).shape(), &[1, 2, 1, 1, 1]);
        let enc = bundle.encoder.forward(&mut tape, &mut params, out, false);
        assert_eq!(tape.value(enc.mu).shape(), &[1, 4]);
    }

    #[test]
    fn tiled_generation_matches_direct_synthesis_for_constant_code() {
        let (mut params, bundle) = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = &bundle.generator.latent.clone();
        // Constant grid of one code, extent equal to the training latent.
        let code = [0.3, -0.7];
        let mut grid = Tensor::zeros(vec![2, 2, 2]);
        for c in 0..2 {
            for s in 0..4 {
                grid.data_mut()[c * 4 + s] = code[c];
            }
        }
        let tiled = tiled_generate(&bundle.generator, &mut params, &grid, &mut rng).unwrap();
        assert_eq!(tiled.shape(), &[3, 64, 64]);
        // Ordinary synthesis with the same local noise and ξ = 0 must agree
        // bit for bit: re-draw the local noise the same way.
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let local = Tensor::randn(vec![1, l.d_local, 2, 2], &mut rng2);
        let mut tape = Tape::new();
        let zg = tape.constant(Tensor::new(vec![1, 2], code.to_vec()));
        let ln = tape.constant(local);
        let xi = vec![0.0; l.d_periodic];
        let direct = bundle.generator.synthesize(&mut tape, &mut params, l, zg, Some(ln), &xi, false);
        let d = tape.value(direct);
        assert_eq!(d.shape(), &[1, 3, 64, 64]);
        for (a, b) in tiled.data().iter().zip(d.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn validate_rejects_inconsistent_architectures() {
        let l = LatentSpec::new(2, 6, 2, 2, 2).unwrap();
        let mut arch = ArchitectureSpec::desk_2d(&l);
        arch.gen[0].c_in = 5;
        assert!(arch.validate(&l).is_err());
        let mut arch2 = ArchitectureSpec::desk_2d(&l);
        arch2.crop = 128;
        assert!(arch2.validate(&l).is_err());
        let arch3 = ArchitectureSpec::desk_2d(&l);
        let l3 = LatentSpec::new(2, 6, 0, 2, 2).unwrap();
        assert!(arch3.validate(&l3).is_err());
    }
}
