//! Structured latent noise: global, local, and periodic components.
//!
//! A noise tensor stacks, along the channel axis, a spatially constant global
//! code, i.i.d. normal local noise, and sinusoidal plane waves whose
//! frequencies are predicted from the global code. The encoder side provides
//! the reparameterized posterior sample and its divergence penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Dimensions of the structured latent space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    /// Channels of the spatially constant global code (d^g).
    pub d_global: usize,
    /// Channels of i.i.d. normal local noise (d^l).
    pub d_local: usize,
    /// Channels of sinusoidal waves (d^p).
    pub d_periodic: usize,
    /// Latent grid extent per spatial axis (L).
    pub spatial: usize,
    /// Spatial rank: 2 for images, 3 for voxel volumes.
    pub ndim: usize,
}

impl LatentSpec {
    pub fn new(
        d_global: usize,
        d_local: usize,
        d_periodic: usize,
        spatial: usize,
        ndim: usize,
    ) -> Result<Self, CoreError> {
        if d_global == 0 {
            return Err(CoreError::config("d_global must be at least 1"));
        }
        if spatial == 0 {
            return Err(CoreError::config("latent spatial extent must be at least 1"));
        }
        if ndim != 2 && ndim != 3 {
            return Err(CoreError::config(format!("ndim must be 2 or 3, got {ndim}")));
        }
        if ndim == 3 && d_periodic > 0 {
            return Err(CoreError::config(
                "periodic latent channels are not supported for 3-D volumes",
            ));
        }
        Ok(LatentSpec { d_global, d_local, d_periodic, spatial, ndim })
    }

    /// Total channel count d^g + d^l + d^p.
    #[must_use]
    pub fn channels(&self) -> usize {
        self.d_global + self.d_local + self.d_periodic
    }

    /// Spatial dims of the latent grid, `[L; ndim]`.
    #[must_use]
    pub fn dims(&self) -> Vec<usize> {
        vec![self.spatial; self.ndim]
    }

    /// Same spec with a different grid extent (for larger synthesis).
    #[must_use]
    pub fn with_spatial(&self, spatial: usize) -> Self {
        LatentSpec { spatial, ..self.clone() }
    }
}

/// Standard-normal global codes, shape `[batch, d_global]`.
#[must_use]
pub fn sample_prior_global(spec: &LatentSpec, batch: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(vec![batch, spec.d_global], rng)
}

/// I.i.d. standard-normal local noise, shape `[batch, d_local, *dims]`.
#[must_use]
pub fn sample_local(spec: &LatentSpec, batch: usize, rng: &mut impl Rng) -> Tensor {
    let mut shape = vec![batch, spec.d_local];
    shape.extend(spec.dims());
    Tensor::randn(shape, rng)
}

/// Per-element wave phases ξ drawn from U[0, 2π), length `batch·d_periodic`.
#[must_use]
pub fn sample_phases(spec: &LatentSpec, batch: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..batch * spec.d_periodic)
        .map(|_| rng.gen::<f64>() * std::f64::consts::TAU)
        .collect()
}

/// Periodic channels `sin(a_k·i + b_k·j + ξ_k)` on the latent grid.
///
/// `freqs` is `[batch, ndim·d_periodic]`, axis-major (all row coefficients
/// first, then all column coefficients); grid coordinates are 0-based.
/// Gradients flow into `freqs`.
pub fn periodic_part(
    tape: &mut Tape,
    freqs: NodeId,
    xi: &[f64],
    spec: &LatentSpec,
) -> Result<NodeId, CoreError> {
    if spec.ndim == 3 && spec.d_periodic > 0 {
        return Err(CoreError::config("periodic channels require ndim = 2"));
    }
    Ok(tape.waves(freqs, xi, spec.d_periodic, &spec.dims()))
}

/// Stacks `[global-broadcast | local | periodic]` along the channel axis.
///
/// `global` is `[batch, d_global]`; optional parts must already have shape
/// `[batch, d, *dims]`. Returns `[batch, channels(), *dims]`.
pub fn assemble_noise(
    tape: &mut Tape,
    spec: &LatentSpec,
    global: NodeId,
    local: Option<NodeId>,
    periodic: Option<NodeId>,
) -> NodeId {
    let dims = spec.dims();
    let g = tape.broadcast_spatial(global, &dims);
    let mut parts = vec![g];
    if let Some(l) = local {
        assert_eq!(tape.value(l).shape()[1], spec.d_local);
        parts.push(l);
    } else {
        assert_eq!(spec.d_local, 0, "local noise missing");
    }
    if let Some(p) = periodic {
        assert_eq!(tape.value(p).shape()[1], spec.d_periodic);
        parts.push(p);
    } else {
        assert_eq!(spec.d_periodic, 0, "periodic part missing");
    }
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 1)
    }
}

/// Reparameterized posterior sample `mu + exp(log_sigma)·eps`.
pub fn reparameterize(tape: &mut Tape, mu: NodeId, log_sigma: NodeId, eps: NodeId) -> NodeId {
    let sigma = tape.exp(log_sigma);
    let scaled = tape.mul(sigma, eps);
    tape.add(mu, scaled)
}

/// Divergence penalty `½·mean_batch Σ_ch (μ² + σ² − 1 − 2·log σ)`.
pub fn kl_regularizer(tape: &mut Tape, mu: NodeId, log_sigma: NodeId) -> NodeId {
    let d = tape.value(mu).shape()[1] as f64;
    let mu2 = tape.mul(mu, mu);
    let two_ls = tape.scale(log_sigma, 2.0);
    let sig2 = tape.exp(two_ls);
    let quad = tape.add(mu2, sig2);
    let lin = tape.affine(log_sigma, -2.0, -1.0);
    let term = tape.add(quad, lin);
    let m = tape.mean_all(term);
    tape.scale(m, 0.5 * d)
}
