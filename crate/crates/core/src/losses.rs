//! Scalar adversarial objectives for the five networks, plus prior-only
//! variants for the no-encoder ablation.
//!
//! Every loss is a tape node so gradients reach whichever parameters the
//! caller selects. Probabilities are clamped to `[PROB_EPS, 1−PROB_EPS]`
//! before logs, keeping all losses finite even on saturated discriminators.

use serde::{Deserialize, Serialize};

use crate::tape::{NodeId, Tape};

pub use crate::latent::kl_regularizer;

/// Numerical guard applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Mixing weights of the composite generator and encoder objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the reproduction realism term in the generator loss.
    pub alpha1: f64,
    /// Weight of the pair term in the generator loss.
    pub alpha2: f64,
    /// Weight of the latent-discriminator term in the encoder loss.
    pub beta1: f64,
    /// Weight of the pair term in the encoder loss.
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha1: 1.0, alpha2: 1.0, beta1: 1.0, beta2: 1.0 }
    }
}

/// Mean of log p over the whole grid and batch, with the probability clamp.
fn mean_log(tape: &mut Tape, p: NodeId) -> NodeId {
    let c = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let l = tape.ln(c);
    tape.mean_all(l)
}

/// Mean of log(1−p), clamped the same way.
fn mean_log_one_minus(tape: &mut Tape, p: NodeId) -> NodeId {
    let flipped = tape.affine(p, -1.0, 1.0);
    let c = tape.clamp(flipped, PROB_EPS, 1.0 - PROB_EPS);
    let l = tape.ln(c);
    tape.mean_all(l)
}

/// Texture-discriminator loss: real patches up, prior samples and
/// reproductions down.
///
/// `−mean log D(real) − mean log(1−D(prior)) − mean log(1−D(recon))`.
pub fn loss_disc_texture(
    tape: &mut Tape,
    p_real: NodeId,
    p_prior: NodeId,
    p_recon: NodeId,
) -> NodeId {
    let a = mean_log(tape, p_real);
    let b = mean_log_one_minus(tape, p_prior);
    let c = mean_log_one_minus(tape, p_recon);
    let ab = tape.add(a, b);
    let s = tape.add(ab, c);
    tape.scale(s, -1.0)
}

/// Latent-discriminator loss: prior codes up, encoded codes down.
///
/// `−mean log D(prior z) − mean log(1−D(encoded z))`.
pub fn loss_disc_latent(tape: &mut Tape, p_prior: NodeId, p_encoded: NodeId) -> NodeId {
    let a = mean_log(tape, p_prior);
    let b = mean_log_one_minus(tape, p_encoded);
    let s = tape.add(a, b);
    tape.scale(s, -1.0)
}

/// Pair-discriminator loss: same-texture pairs up, (image, reconstruction)
/// pairs down.
///
/// `−mean log D(real pair) − mean log(1−D(fake pair))`.
pub fn loss_disc_pair(tape: &mut Tape, p_real_pair: NodeId, p_fake_pair: NodeId) -> NodeId {
    let a = mean_log(tape, p_real_pair);
    let b = mean_log_one_minus(tape, p_fake_pair);
    let s = tape.add(a, b);
    tape.scale(s, -1.0)
}

/// Generator loss with the saturating term replaced by −log D throughout.
///
/// `−mean log D_tex(prior) − α₁·mean log D_tex(recon) − α₂·mean log D_pair(pair)`.
pub fn loss_generator(
    tape: &mut Tape,
    p_prior: NodeId,
    p_recon: NodeId,
    p_fake_pair: NodeId,
    w: &LossWeights,
) -> NodeId {
    let a = mean_log(tape, p_prior);
    let b = mean_log(tape, p_recon);
    let c = mean_log(tape, p_fake_pair);
    let bw = tape.scale(b, w.alpha1);
    let cw = tape.scale(c, w.alpha2);
    let ab = tape.add(a, bw);
    let s = tape.add(ab, cw);
    tape.scale(s, -1.0)
}

/// Encoder loss: fool the latent discriminator and the pair discriminator.
///
/// `−β₁·mean log D_lat(encoded z) − β₂·mean log D_pair(pair)`.
pub fn loss_encoder(
    tape: &mut Tape,
    p_encoded: NodeId,
    p_fake_pair: NodeId,
    w: &LossWeights,
) -> NodeId {
    let a = mean_log(tape, p_encoded);
    let b = mean_log(tape, p_fake_pair);
    let aw = tape.scale(a, w.beta1);
    let bw = tape.scale(b, w.beta2);
    let s = tape.add(aw, bw);
    tape.scale(s, -1.0)
}

/// Discriminator loss for the prior-only ablation (no encoder, no pairs):
/// `−mean log D(real) − mean log(1−D(prior))`.
pub fn loss_disc_prior_only(tape: &mut Tape, p_real: NodeId, p_prior: NodeId) -> NodeId {
    let a = mean_log(tape, p_real);
    let b = mean_log_one_minus(tape, p_prior);
    let s = tape.add(a, b);
    tape.scale(s, -1.0)
}

/// Generator loss for the prior-only ablation: `−mean log D(prior)`.
pub fn loss_generator_prior_only(tape: &mut Tape, p_prior: NodeId) -> NodeId {
    let a = mean_log(tape, p_prior);
    tape.scale(a, -1.0)
}
