//! Model-driven analysis: prior sampling, reconstruction, global-code
//! manifold grids, guided texture maps, and texture detection heatmaps.

use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::io;
use crate::latent::{self, LatentSpec};
use crate::networks::{tiled_generate, ModelBundle};
use crate::params::ParamSet;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Synthesizes `n` prior samples one at a time (so sample `i` does not
/// depend on how many others were requested). `spec` may widen the spatial
/// extent relative to training.
pub fn sample_prior(
    bundle: &ModelBundle,
    params: &mut ParamSet,
    spec: &LatentSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, CoreError> {
    if n == 0 {
        return Err(CoreError::config("sample count must be at least 1"));
    }
    let mut out: Option<Tensor> = None;
    for i in 0..n {
        let zg = latent::sample_prior_global(spec, 1, rng);
        let local = latent::sample_local(spec, 1, rng);
        let xi = latent::sample_phases(spec, 1, rng);
        let mut tape = Tape::new();
        let zg_node = tape.constant(zg);
        let local_node = tape.constant(local);
        let image =
            bundle.generator.synthesize(&mut tape, params, spec, zg_node, Some(local_node), &xi, false);
        let tile = tape.value(image);
        let item = tile.numel();
        let slot = out.get_or_insert_with(|| {
            let mut shape = tile.shape().to_vec();
            shape[0] = n;
            Tensor::zeros(shape)
        });
        slot.data_mut()[i * item..(i + 1) * item].copy_from_slice(tile.data());
    }
    Ok(out.expect("n >= 1"))
}

/// Encodes images and regenerates them. With `sigma_zero` the posterior mean
/// is used directly, making the global code deterministic; local noise and
/// phases are drawn fresh either way.
pub fn reconstruct(
    bundle: &ModelBundle,
    params: &mut ParamSet,
    images: &Tensor,
    sigma_zero: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, CoreError> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(CoreError::data("no images to reconstruct"));
    }
    let spec = &bundle.latent;
    let (mu, log_sigma) = bundle.encoder.encode(params, images);
    // Fixed draw order: local fields, phases, then posterior noise.
    let local = latent::sample_local(spec, n, rng);
    let xi = latent::sample_phases(spec, n, rng);
    let eps = Tensor::randn(vec![n, spec.d_global], rng);
    let d = spec.d_global;
    let mut out: Option<Tensor> = None;
    for i in 0..n {
        let z: Vec<f64> = (0..d)
            .map(|c| {
                let m = mu.data()[i * d + c];
                if sigma_zero {
                    m
                } else {
                    m + log_sigma.data()[i * d + c].exp() * eps.data()[i * d + c]
                }
            })
            .collect();
        let local_i = Tensor::new(
            {
                let mut s = local.shape().to_vec();
                s[0] = 1;
                s
            },
            local.data()[i * local.numel() / n..(i + 1) * local.numel() / n].to_vec(),
        );
        let xi_i = &xi[i * spec.d_periodic..(i + 1) * spec.d_periodic];
        let mut tape = Tape::new();
        let zg = tape.constant(Tensor::new(vec![1, d], z));
        let local_node = tape.constant(local_i);
        let image =
            bundle.generator.synthesize(&mut tape, params, spec, zg, Some(local_node), xi_i, false);
        let tile = tape.value(image);
        let item = tile.numel();
        let slot = out.get_or_insert_with(|| {
            let mut shape = tile.shape().to_vec();
            shape[0] = n;
            Tensor::zeros(shape)
        });
        slot.data_mut()[i * item..(i + 1) * item].copy_from_slice(tile.data());
    }
    Ok(out.expect("n >= 1"))
}

/// A sweep over a 2-dimensional global code.
pub struct ManifoldGrid {
    /// Row-major `[C, crop, crop]` tiles; tile `(i, j)` uses code
    /// `(value[i], value[j])`.
    pub tiles: Vec<Tensor>,
    /// The swept coordinate values.
    pub values: Vec<f64>,
    /// Annotated composite image.
    pub image: Tensor,
}

/// Sweeps both coordinates of a 2-dimensional global code over
/// `lo, lo+step, …, hi`, synthesizing every tile with one shared draw of
/// local noise and phases so only the global code varies.
pub fn manifold_grid(
    bundle: &ModelBundle,
    params: &mut ParamSet,
    lo: f64,
    hi: f64,
    step: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ManifoldGrid, CoreError> {
    let spec = &bundle.latent;
    if spec.d_global != 2 {
        return Err(CoreError::config(format!(
            "manifold grids need a 2-dimensional global code, model has {}",
            spec.d_global
        )));
    }
    if !(hi > lo) || step <= 0.0 {
        return Err(CoreError::config("manifold range needs hi > lo and step > 0"));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    let values: Vec<f64> = (0..count).map(|k| lo + k as f64 * step).collect();
    let local = latent::sample_local(spec, 1, rng);
    let xi = latent::sample_phases(spec, 1, rng);
    let mut tiles = Vec::with_capacity(count * count);
    for &zi in &values {
        for &zj in &values {
            let mut tape = Tape::new();
            let zg = tape.constant(Tensor::new(vec![1, 2], vec![zi, zj]));
            let local_node = tape.constant(local.clone());
            let node =
                bundle.generator.synthesize(&mut tape, params, spec, zg, Some(local_node), &xi, false);
            let t = tape.value(node);
            let mut shape = t.shape()[1..].to_vec();
            if shape.is_empty() {
                shape = vec![1];
            }
            tiles.push(t.clone().reshape(shape));
        }
    }
    let pad = 2;
    let grid = io::assemble_grid(&tiles, count, pad, -1.0);
    // Margins for the axis annotations: first code down the rows, second
    // along the columns.
    let (top, left) = (8, 22);
    let gs = grid.shape().to_vec();
    let (c, gh, gw) = (gs[0], gs[1], gs[2]);
    let mut image = Tensor::full(vec![c, gh + top, gw + left], -1.0);
    for ch in 0..c {
        for y in 0..gh {
            for x in 0..gw {
                image.data_mut()[(ch * (gh + top) + top + y) * (gw + left) + left + x] =
                    grid.at(&[ch, y, x]);
            }
        }
    }
    let cell = tiles[0].shape()[1] + pad;
    for (k, v) in values.iter().enumerate() {
        let label = format!("{v:.2}");
        io::draw_text(&mut image, top + pad + k * cell + 1, 1, &label, 1.0);
        io::draw_text(&mut image, 1, left + pad + k * cell + 1, &label, 1.0);
    }
    Ok(ManifoldGrid { tiles, values, image })
}

/// Synthesizes a texture map whose local appearance follows a guide image:
/// the guide is spatially encoded to a grid of global codes, which drives
/// seamless tiled generation.
pub fn texture_map(
    bundle: &ModelBundle,
    params: &mut ParamSet,
    guide: &Tensor,
    pool_kernel: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, CoreError> {
    if bundle.latent.ndim != 2 {
        return Err(CoreError::config("texture maps are defined for 2-D models"));
    }
    let (mu_grid, _) = bundle.encoder.spatial_encode(params, guide, pool_kernel);
    tiled_generate(&bundle.generator, params, &mu_grid, rng)
}

/// Texture detection settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionConfig {
    /// Sharpness of the similarity kernel.
    pub alpha: f64,
    /// Average-pooling kernel applied to the encoder's feature grid.
    pub pool_kernel: usize,
    /// Upsample the similarity grid to the image resolution.
    pub upsample: bool,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig { alpha: 3.0, pool_kernel: 5, upsample: true }
    }
}

/// Rectangle in pixel coordinates: `x` is the column of the left edge, `y`
/// the row of the top edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Detection output: the raw similarity grid and the (optionally upsampled)
/// heatmap `[1, H, W]` with entries in `(0, 1]`.
pub struct DetectionResult {
    pub grid: Tensor,
    pub heatmap: Tensor,
}

/// Similarity kernel: squared-distance `d²` maps to `exp(−α·d²)`.
#[must_use]
pub fn similarity(dist_sq: f64, alpha: f64) -> f64 {
    (-alpha * dist_sq).exp()
}

/// Reflected (boundary-unduplicated) index for out-of-range coordinates,
/// folding as often as needed.
fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    let m = if m < n as i64 { m } else { period - m };
    m as usize
}

/// Center-embeds `[C, H, W]` into `[C, th, tw]` (each at least as large),
/// filling the border by reflection.
fn reflect_pad_center(t: &Tensor, th: usize, tw: usize) -> Tensor {
    let s = t.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    assert!(th >= h && tw >= w);
    let (oy, ox) = (((th - h) / 2) as i64, ((tw - w) / 2) as i64);
    let mut out = Tensor::zeros(vec![c, th, tw]);
    for ch in 0..c {
        for y in 0..th {
            let sy = reflect_index(y as i64 - oy, h);
            for x in 0..tw {
                let sx = reflect_index(x as i64 - ox, w);
                out.data_mut()[(ch * th + y) * tw + x] = t.at(&[ch, sy, sx]);
            }
        }
    }
    out
}

/// Bilinear resize of a `[gh, gw]` map to `[h, w]` (half-pixel centers).
fn bilinear_resize(map: &Tensor, h: usize, w: usize) -> Tensor {
    let s = map.shape().to_vec();
    let (gh, gw) = (s[0], s[1]);
    let mut out = Tensor::zeros(vec![h, w]);
    for y in 0..h {
        let sy = (((y as f64 + 0.5) * gh as f64 / h as f64) - 0.5).clamp(0.0, (gh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(gh - 1);
        let fy = sy - y0 as f64;
        for x in 0..w {
            let sx = (((x as f64 + 0.5) * gw as f64 / w as f64) - 0.5).clamp(0.0, (gw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(gw - 1);
            let fx = sx - x0 as f64;
            let top = map.at(&[y0, x0]) * (1.0 - fx) + map.at(&[y0, x1]) * fx;
            let bot = map.at(&[y1, x0]) * (1.0 - fx) + map.at(&[y1, x1]) * fx;
            out.data_mut()[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Locates where `patch`'s texture appears in `image`: the image is encoded
/// to a grid of codes, the patch (reflection-padded to the training crop if
/// smaller) to a single code, and their squared distances pass through the
/// similarity kernel.
pub fn detect(
    bundle: &ModelBundle,
    params: &mut ParamSet,
    image: &Tensor,
    patch: &PatchRect,
    config: &DetectionConfig,
) -> Result<DetectionResult, CoreError> {
    if bundle.latent.ndim != 2 {
        return Err(CoreError::config("detection is defined for 2-D models"));
    }
    let s = image.shape().to_vec();
    if s.len() != 3 {
        return Err(CoreError::data(format!("detection image must be [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if patch.w == 0 || patch.h == 0 || patch.x + patch.w > w || patch.y + patch.h > h {
        return Err(CoreError::data(format!(
            "patch {patch:?} exceeds the {w}x{h} image"
        )));
    }
    if config.alpha <= 0.0 || config.pool_kernel == 0 {
        return Err(CoreError::config("detection needs alpha > 0 and a nonzero pool kernel"));
    }
    let mut patch_data = Vec::with_capacity(c * patch.h * patch.w);
    for ch in 0..c {
        for y in patch.y..patch.y + patch.h {
            for x in patch.x..patch.x + patch.w {
                patch_data.push(image.at(&[ch, y, x]));
            }
        }
    }
    let mut patch_img = Tensor::new(vec![c, patch.h, patch.w], patch_data);
    let crop = bundle.arch.crop;
    if patch.h < crop || patch.w < crop {
        patch_img = reflect_pad_center(&patch_img, patch.h.max(crop), patch.w.max(crop));
    }
    let ps = patch_img.shape().to_vec();
    let batched = patch_img.reshape(vec![1, ps[0], ps[1], ps[2]]);
    let (mu_p, _) = bundle.encoder.encode(params, &batched);
    let (mu_grid, _) = bundle.encoder.spatial_encode(params, image, config.pool_kernel);
    let gs = mu_grid.shape().to_vec();
    let (d, gh, gw) = (gs[0], gs[1], gs[2]);
    let mut grid = Tensor::zeros(vec![gh, gw]);
    for y in 0..gh {
        for x in 0..gw {
            let mut dist_sq = 0.0;
            for ch in 0..d {
                let diff = mu_grid.at(&[ch, y, x]) - mu_p.data()[ch];
                dist_sq += diff * diff;
            }
            grid.data_mut()[y * gw + x] = similarity(dist_sq, config.alpha);
        }
    }
    let map = if config.upsample { bilinear_resize(&grid, h, w) } else { grid.clone() };
    let ms = map.shape().to_vec();
    let heatmap = map.reshape(vec![1, ms[0], ms[1]]);
    Ok(DetectionResult { grid, heatmap })
}
