//! Texture sources, random-crop pair sampling, and procedural desk-scale
//! datasets.
//!
//! A dataset holds whole source images (or volumes) in the tanh range
//! `[-1, 1]`; training consumes random crops. Labeled mode pairs two crops of
//! one texture; raw mode pairs two crops drawn inside a shared window of a
//! single photograph.

use std::path::Path;

use rand::Rng;

use crate::error::CoreError;
use crate::io;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetMode {
    Labeled,
    Raw,
}

/// Source images with optional labels and a crop size.
pub struct TextureDataset {
    sources: Vec<Tensor>,
    labels: Vec<usize>,
    label_names: Vec<String>,
    crop: usize,
    window: usize,
    mode: DatasetMode,
}

/// A batch of same-texture crop pairs.
pub struct PairBatch {
    pub x: Tensor,
    pub x_bar: Tensor,
    /// Texture label per element; empty in raw mode.
    pub labels: Vec<usize>,
}

/// Pair-sampling window for crop side `s`: `round(1.1·s)`.
#[must_use]
pub fn default_window(s: usize) -> usize {
    (s as f64 * 1.1).round() as usize
}

impl TextureDataset {
    /// Labeled dataset from `(source, label)` pairs. Every source must be at
    /// least `crop` wide per spatial axis and share rank and channel count.
    pub fn labeled(
        sources: Vec<(Tensor, usize)>,
        label_names: Vec<String>,
        crop: usize,
    ) -> Result<Self, CoreError> {
        let (tensors, labels): (Vec<_>, Vec<_>) = sources.into_iter().unzip();
        if let Some(&bad) = labels.iter().find(|&&l| l >= label_names.len()) {
            return Err(CoreError::data(format!("label {bad} has no name")));
        }
        let ds = TextureDataset {
            sources: tensors,
            labels,
            label_names,
            crop,
            window: crop,
            mode: DatasetMode::Labeled,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Raw dataset: unlabeled photographs paired through a window of side
    /// `round(1.1·crop)`.
    pub fn raw(sources: Vec<Tensor>, crop: usize) -> Result<Self, CoreError> {
        let ds = TextureDataset {
            labels: vec![0; sources.len()],
            sources,
            label_names: Vec::new(),
            crop,
            window: default_window(crop),
            mode: DatasetMode::Raw,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Loads a dataset from a plain-text manifest: one `path label` line per
    /// labeled source, or one bare `path` per raw source (no mixing).
    /// Paths are resolved relative to the manifest; `.png` files load as RGB
    /// images, `.vx` files as binary volumes mapped to `{-1, 1}`.
    pub fn from_manifest(manifest: &Path, crop: usize) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(manifest)?;
        let base = manifest.parent().unwrap_or_else(|| Path::new("."));
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let path = parts.next().unwrap().to_string();
            entries.push((path, parts.next().map(str::to_string)));
        }
        if entries.is_empty() {
            return Err(CoreError::data("manifest lists no sources"));
        }
        let labeled = entries[0].1.is_some();
        if entries.iter().any(|(_, l)| l.is_some() != labeled) {
            return Err(CoreError::data("manifest mixes labeled and unlabeled lines"));
        }
        let mut tensors = Vec::new();
        let mut names: Vec<String> = Vec::new();
        let mut labels = Vec::new();
        for (path, label) in entries {
            let full = base.join(&path);
            let t = match full.extension().and_then(|e| e.to_str()) {
                Some("vx") => {
                    let v = io::read_voxels(&full)?;
                    let mut shape = vec![1];
                    shape.extend_from_slice(v.shape());
                    io::binary_to_signed(&v).reshape(shape)
                }
                _ => io::read_image(&full)?,
            };
            tensors.push(t);
            if let Some(name) = label {
                let idx = names.iter().position(|n| n == &name).unwrap_or_else(|| {
                    names.push(name);
                    names.len() - 1
                });
                labels.push(idx);
            }
        }
        if labeled {
            TextureDataset::labeled(tensors.into_iter().zip(labels).collect(), names, crop)
        } else {
            TextureDataset::raw(tensors, crop)
        }
    }

    /// Replaces the crop size, revalidating source extents.
    pub fn with_crop(mut self, crop: usize) -> Result<Self, CoreError> {
        self.crop = crop;
        if self.mode == DatasetMode::Raw {
            self.window = default_window(crop);
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CoreError> {
        if self.sources.is_empty() {
            return Err(CoreError::data("dataset has no sources"));
        }
        let rank = self.sources[0].ndim();
        let channels = self.sources[0].shape()[0];
        if !(rank == 3 || rank == 4) {
            return Err(CoreError::data("sources must be [C, H, W] or [C, D, H, W]"));
        }
        let need = self.window.max(self.crop);
        for (i, s) in self.sources.iter().enumerate() {
            if s.ndim() != rank || s.shape()[0] != channels {
                return Err(CoreError::data(format!("source {i} has inconsistent shape")));
            }
            if s.shape()[1..].iter().any(|&d| d < need) {
                return Err(CoreError::data(format!(
                    "source {i} is smaller than the sampling window {need}"
                )));
            }
        }
        Ok(())
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    #[must_use]
    pub fn mode(&self) -> DatasetMode {
        self.mode
    }

    #[must_use]
    pub fn crop(&self) -> usize {
        self.crop
    }

    /// Number of spatial axes (2 for images, 3 for volumes).
    #[must_use]
    pub fn ndim(&self) -> usize {
        self.sources[0].ndim() - 1
    }

    #[must_use]
    pub fn channels(&self) -> usize {
        self.sources[0].shape()[0]
    }

    #[must_use]
    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    #[must_use]
    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    #[must_use]
    pub fn source(&self, i: usize) -> &Tensor {
        &self.sources[i]
    }

    #[must_use]
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// One random crop from source `i`.
    pub fn sample_crop(&self, i: usize, rng: &mut impl Rng) -> Tensor {
        let src = &self.sources[i];
        let corner = random_corner(&src.shape()[1..], self.crop, rng);
        crop_at(src, &corner, self.crop)
    }

    /// Independent single crops with their texture labels.
    pub fn sample_batch(&self, batch: usize, rng: &mut impl Rng) -> (Tensor, Vec<usize>) {
        let mut crops = Vec::with_capacity(batch);
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.gen_range(0..self.sources.len());
            crops.push(self.sample_crop(i, rng));
            labels.push(self.labels[i]);
        }
        (stack(&crops), labels)
    }

    /// Same-texture crop pairs per the dataset mode.
    pub fn sample_pairs(&self, batch: usize, rng: &mut impl Rng) -> PairBatch {
        let mut xs = Vec::with_capacity(batch);
        let mut bars = Vec::with_capacity(batch);
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.gen_range(0..self.sources.len());
            match self.mode {
                DatasetMode::Labeled => {
                    xs.push(self.sample_crop(i, rng));
                    bars.push(self.sample_crop(i, rng));
                    labels.push(self.labels[i]);
                }
                DatasetMode::Raw => {
                    let (a, b) =
                        sample_pair_raw(&self.sources[i], self.crop, self.window, rng).expect(
                            "validated dataset sources admit the sampling window",
                        );
                    xs.push(a);
                    bars.push(b);
                }
            }
        }
        PairBatch { x: stack(&xs), x_bar: stack(&bars), labels }
    }
}

/// Two crops of side `s` drawn uniformly inside one uniformly placed window
/// of side `w ≥ s`. With `w == s` the two crops coincide.
pub fn sample_pair_raw(
    image: &Tensor,
    s: usize,
    w: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor), CoreError> {
    if w < s {
        return Err(CoreError::data("window must be at least the crop side"));
    }
    let dims = &image.shape()[1..];
    if dims.iter().any(|&d| d < w) {
        return Err(CoreError::data(format!("image smaller than window {w}")));
    }
    let win = random_corner(dims, w, rng);
    let mut first = random_corner(&vec![w; dims.len()], s, rng);
    let mut second = random_corner(&vec![w; dims.len()], s, rng);
    for (o, &wc) in first.iter_mut().zip(&win) {
        *o += wc;
    }
    for (o, &wc) in second.iter_mut().zip(&win) {
        *o += wc;
    }
    Ok((crop_at(image, &first, s), crop_at(image, &second, s)))
}

/// Uniform crop corner: per axis in `[0, dim − s]`.
fn random_corner(dims: &[usize], s: usize, rng: &mut impl Rng) -> Vec<usize> {
    dims.iter().map(|&d| rng.gen_range(0..=d - s)).collect()
}

/// Extracts the crop of side `s` at `corner` from `[C, *dims]`.
fn crop_at(src: &Tensor, corner: &[usize], s: usize) -> Tensor {
    let shape = src.shape();
    let c = shape[0];
    let dims = &shape[1..];
    let mut out_shape = vec![c];
    out_shape.extend(std::iter::repeat(s).take(dims.len()));
    let mut out = Tensor::zeros(out_shape);
    match dims.len() {
        2 => {
            let (h, w) = (dims[0], dims[1]);
            for ch in 0..c {
                for y in 0..s {
                    let row = ((ch * h) + corner[0] + y) * w + corner[1];
                    out.data_mut()[(ch * s + y) * s..(ch * s + y) * s + s]
                        .copy_from_slice(&src.data()[row..row + s]);
                }
            }
        }
        3 => {
            let (d, h, w) = (dims[0], dims[1], dims[2]);
            for ch in 0..c {
                for z in 0..s {
                    for y in 0..s {
                        let row = (((ch * d) + corner[0] + z) * h + corner[1] + y) * w + corner[2];
                        let dst = ((ch * s + z) * s + y) * s;
                        out.data_mut()[dst..dst + s].copy_from_slice(&src.data()[row..row + s]);
                    }
                }
            }
        }
        _ => unreachable!("validated rank"),
    }
    out
}

/// Stacks equally shaped `[C, *dims]` tensors into `[N, C, *dims]`.
#[must_use]
pub fn stack(items: &[Tensor]) -> Tensor {
    assert!(!items.is_empty());
    let item_shape = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        assert_eq!(t.shape(), item_shape.as_slice());
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend(item_shape);
    Tensor::new(shape, data)
}

/// Stripe orientation; `Rows` varies along the first image axis, `Cols`
/// along the second, `Diagonal` along their sum, so `Rows` and `Cols`
/// patterns of equal period are exact transposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StripeAngle {
    Rows,
    Cols,
    Diagonal,
}

/// Procedural texture families for CPU-scale experiments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TextureKind {
    Stripes { angle: StripeAngle, period: f64 },
    Checker { period: usize, bright: f64, dark: f64 },
    Dots { spacing: usize, radius: f64 },
    Noise { blur: usize },
}

impl TextureKind {
    #[must_use]
    pub fn name(&self) -> String {
        match self {
            TextureKind::Stripes { angle, period } => {
                let deg = match angle {
                    StripeAngle::Rows => 0,
                    StripeAngle::Cols => 90,
                    StripeAngle::Diagonal => 45,
                };
                format!("stripes{deg}_p{period}")
            }
            TextureKind::Checker { period, .. } => format!("checker_p{period}"),
            TextureKind::Dots { spacing, radius } => format!("dots_s{spacing}_r{radius}"),
            TextureKind::Noise { blur } => format!("noise_b{blur}"),
        }
    }

    /// Renders instance `instance` of this kind at `size`². Deterministic
    /// kinds shift by the instance index along both axes (preserving
    /// transpose symmetry); noise kinds consume `rng`.
    fn render(&self, size: usize, instance: usize, rng: &mut impl Rng) -> Tensor {
        let mut t = Tensor::zeros(vec![3, size, size]);
        let shift = instance * 7;
        match *self {
            TextureKind::Stripes { angle, period } => {
                for c in 0..3 {
                    let phase = c as f64 * 0.25;
                    for i in 0..size {
                        for j in 0..size {
                            let coord = match angle {
                                StripeAngle::Rows => i + shift,
                                StripeAngle::Cols => j + shift,
                                StripeAngle::Diagonal => i + j + shift,
                            } as f64;
                            let v = (std::f64::consts::TAU * (coord / period + phase)).sin() * 0.9;
                            t.data_mut()[(c * size + i) * size + j] = v;
                        }
                    }
                }
            }
            TextureKind::Checker { period, bright, dark } => {
                for c in 0..3 {
                    // Channel-dependent attenuation keeps the two checker
                    // classes colorful yet mutually distinguishable.
                    let gain = 1.0 - 0.15 * c as f64;
                    for i in 0..size {
                        for j in 0..size {
                            let cell = ((i + shift) / period + (j + shift) / period) % 2;
                            let v = if cell == 0 { bright } else { dark };
                            t.data_mut()[(c * size + i) * size + j] = v * gain;
                        }
                    }
                }
            }
            TextureKind::Dots { spacing, radius } => {
                let palette = [0.9, 0.6, 0.3];
                for c in 0..3 {
                    for i in 0..size {
                        for j in 0..size {
                            let di = (i + shift) % spacing;
                            let dj = (j + shift) % spacing;
                            let cy = spacing as f64 / 2.0;
                            let dist2 = (di as f64 - cy).powi(2) + (dj as f64 - cy).powi(2);
                            let v = if dist2 <= radius * radius { palette[c] } else { -0.8 };
                            t.data_mut()[(c * size + i) * size + j] = v;
                        }
                    }
                }
            }
            TextureKind::Noise { blur } => {
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.9..0.9);
                }
                for _ in 0..blur {
                    t = box_blur(&t);
                }
                if blur > 0 {
                    // Blur shrinks the range; rescale each channel to ±0.9.
                    let n = size * size;
                    for c in 0..3 {
                        let ch = &mut t.data_mut()[c * n..(c + 1) * n];
                        let peak =
                            ch.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-12);
                        for v in ch {
                            *v *= 0.9 / peak;
                        }
                    }
                }
            }
        }
        t
    }
}

/// 3×3 box blur with clamped borders, per channel.
fn box_blur(t: &Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(shape);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let y = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                        let x = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                        acc += t.at(&[ch, y, x]);
                    }
                }
                out.data_mut()[(ch * h + i) * w + j] = acc / 9.0;
            }
        }
    }
    out
}

/// Renders `count_per_kind` instances of each kind at `size`² into a labeled
/// dataset (crop = `size`; shrink with [`TextureDataset::with_crop`]).
pub fn procedural_textures(
    kinds: &[TextureKind],
    size: usize,
    count_per_kind: usize,
    rng: &mut impl Rng,
) -> Result<TextureDataset, CoreError> {
    let mut sources = Vec::with_capacity(kinds.len() * count_per_kind);
    for (label, kind) in kinds.iter().enumerate() {
        for instance in 0..count_per_kind {
            sources.push((kind.render(size, instance, rng), label));
        }
    }
    let names = kinds.iter().map(TextureKind::name).collect();
    TextureDataset::labeled(sources, names, size)
}

/// The eight standard desk-scale texture families.
#[must_use]
pub fn desk_kinds() -> Vec<TextureKind> {
    vec![
        TextureKind::Stripes { angle: StripeAngle::Rows, period: 8.0 },
        TextureKind::Stripes { angle: StripeAngle::Cols, period: 8.0 },
        TextureKind::Stripes { angle: StripeAngle::Diagonal, period: 12.0 },
        TextureKind::Checker { period: 4, bright: 0.85, dark: -0.85 },
        TextureKind::Checker { period: 8, bright: 0.5, dark: -0.3 },
        TextureKind::Dots { spacing: 12, radius: 3.5 },
        TextureKind::Noise { blur: 0 },
        TextureKind::Noise { blur: 3 },
    ]
}

/// Eight-texture labeled dataset for CPU-scale training: 160² sources,
/// 64-pixel crops.
pub fn desk_textures(rng: &mut impl Rng) -> Result<TextureDataset, CoreError> {
    procedural_textures(&desk_kinds(), 160, 1, rng)?.with_crop(64)
}

/// Synthetic binary porous volumes: coarse noise upsampled trilinearly and
/// thresholded at 0, mapped to `{-1, 1}`. One label per volume.
pub fn procedural_volumes(
    count: usize,
    size: usize,
    crop: usize,
    rng: &mut impl Rng,
) -> Result<TextureDataset, CoreError> {
    let coarse_side = (size / 8).max(2);
    let mut sources = Vec::with_capacity(count);
    for label in 0..count {
        let coarse = Tensor::randn(vec![coarse_side; 3], rng);
        let fine = trilinear_upsample(&coarse, size);
        let signed = fine.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        sources.push((signed.reshape(vec![1, size, size, size]), label));
    }
    let names = (0..count).map(|i| format!("volume{i}")).collect();
    TextureDataset::labeled(sources, names, size)?.with_crop(crop)
}

fn trilinear_upsample(coarse: &Tensor, size: usize) -> Tensor {
    let c = coarse.shape()[0];
    let scale = c as f64 / size as f64;
    let mut out = Tensor::zeros(vec![size, size, size]);
    let sample_axis = |p: usize| -> (usize, usize, f64) {
        let pos = ((p as f64 + 0.5) * scale - 0.5).clamp(0.0, c as f64 - 1.0);
        let lo = pos.floor() as usize;
        (lo, (lo + 1).min(c - 1), pos - lo as f64)
    };
    for z in 0..size {
        let (z0, z1, fz) = sample_axis(z);
        for y in 0..size {
            let (y0, y1, fy) = sample_axis(y);
            for x in 0..size {
                let (x0, x1, fx) = sample_axis(x);
                let at = |a: usize, b: usize, d: usize| coarse.at(&[a, b, d]);
                let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
                let v00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let v01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let v10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let v11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                let v0 = lerp(v00, v01, fy);
                let v1 = lerp(v10, v11, fy);
                out.data_mut()[(z * size + y) * size + x] = lerp(v0, v1, fz);
            }
        }
    }
    out
}
