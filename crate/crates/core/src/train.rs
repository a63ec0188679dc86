//! Adam optimizer and the joint adversarial training loop.
//!
//! One step draws a pair batch, builds every branch (prior samples,
//! reproductions reusing the prior draws' local noise and phases, all three
//! discriminators) on a single tape, computes the five losses from
//! pre-update parameters, and applies simultaneous updates: discriminators
//! from their combined loss, generator and encoder from theirs.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PairBatch, TextureDataset};
use crate::error::CoreError;
use crate::latent::{self, LatentSpec};
use crate::losses::{self, LossWeights};
use crate::networks::ModelBundle;
use crate::params::ParamSet;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Adam hyperparameters; decoupled weight decay is folded into the gradient
/// (`g ← g + wd·θ`) before the moment updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Per-parameter first/second moment state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with per-parameter step counters (a parameter's bias correction
/// advances only when it receives a gradient).
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    slots: HashMap<usize, AdamSlot>,
}

impl Adam {
    #[must_use]
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, slots: HashMap::new() }
    }

    /// Applies one update for every gradient in `grads` (in parameter-index
    /// order, so updates are reproducible).
    pub fn step(&mut self, params: &mut ParamSet, grads: &HashMap<usize, Tensor>) {
        let mut order: Vec<usize> = grads.keys().copied().collect();
        order.sort_unstable();
        let c = self.config;
        for idx in order {
            let g = &grads[&idx];
            let theta = params.get_mut(idx);
            assert_eq!(g.shape(), theta.shape(), "gradient shape mismatch");
            let slot = self.slots.entry(idx).or_insert_with(|| AdamSlot {
                t: 0,
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            slot.t += 1;
            let bc1 = 1.0 - c.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - c.beta2.powi(slot.t as i32);
            for (((th, &gv), m), v) in
                theta.data_mut().iter_mut().zip(g.data()).zip(&mut slot.m).zip(&mut slot.v)
            {
                let gd = gv + c.weight_decay * *th;
                *m = c.beta1 * *m + (1.0 - c.beta1) * gd;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gd * gd;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *th -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }

    /// Optimizer state snapshot as (param index, slot) pairs sorted by index.
    #[must_use]
    pub fn state(&self) -> Vec<(usize, AdamSlot)> {
        let mut v: Vec<(usize, AdamSlot)> = self.slots.iter().map(|(&i, s)| (i, s.clone())).collect();
        v.sort_unstable_by_key(|(i, _)| *i);
        v
    }

    /// Restores a snapshot taken by [`Adam::state`].
    pub fn restore(&mut self, state: Vec<(usize, AdamSlot)>) {
        self.slots = state.into_iter().collect();
    }
}

/// Which networks participate in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// The full five-network objective.
    Full,
    /// Prior-samples-only baseline: generator and texture discriminator,
    /// no encoder, pair, or latent networks.
    Psgan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch: usize,
    pub iterations: u64,
    pub disc_steps_per_gen: u32,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// 0 disables the encoder KL regularizer.
    pub kl_weight: f64,
    /// Clamp |log σ| ≤ 10 before reparameterization (overflow guard).
    pub clamp_log_sigma: bool,
    pub ablation: Ablation,
    /// Checkpoint every this many iterations (0 = only the final one).
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig::default_2d()
    }
}

impl TrainingConfig {
    /// Full-scale 2-D defaults: batch 64, lr 2e-4.
    #[must_use]
    pub fn default_2d() -> Self {
        TrainingConfig {
            batch: 64,
            iterations: 80_000,
            disc_steps_per_gen: 1,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            kl_weight: 0.0,
            clamp_log_sigma: false,
            ablation: Ablation::Full,
            checkpoint_every: 0,
        }
    }

    /// Full-scale 3-D defaults: batch 8, lr 1e-4, 25k iterations.
    #[must_use]
    pub fn default_3d() -> Self {
        TrainingConfig {
            batch: 8,
            iterations: 25_000,
            adam: AdamConfig { lr: 1e-4, ..AdamConfig::default() },
            ..TrainingConfig::default_2d()
        }
    }

    /// Suggested regularizer weight when the KL term is enabled: gentle for
    /// tiny global codes, full strength for wide ones.
    #[must_use]
    pub fn suggested_kl_weight(d_global: usize) -> f64 {
        if d_global > 5 {
            1.0
        } else {
            0.1
        }
    }
}

/// One metrics row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub l_dx: f64,
    pub l_dz: f64,
    pub l_dxx: f64,
    pub l_g: f64,
    pub l_e: f64,
    pub wall_ms: f64,
}

/// The latent draws of one step, shared between prior samples and
/// reproductions.
pub struct LatentDraws {
    pub zg: Tensor,
    pub local: Tensor,
    pub xi: Vec<f64>,
    pub eps: Tensor,
}

impl LatentDraws {
    /// Fixed draw order (global, local, phases, reparameterization noise) so
    /// runs are reproducible.
    pub fn draw(spec: &LatentSpec, batch: usize, rng: &mut ChaCha8Rng) -> Self {
        LatentDraws {
            zg: latent::sample_prior_global(spec, batch, rng),
            local: latent::sample_local(spec, batch, rng),
            xi: latent::sample_phases(spec, batch, rng),
            eps: Tensor::randn(vec![batch, spec.d_global], rng),
        }
    }
}

/// Tape nodes of the five losses.
pub struct LossNodes {
    pub l_dx: NodeId,
    pub l_dz: NodeId,
    pub l_dxx: NodeId,
    pub l_g: NodeId,
    pub l_e: NodeId,
    /// Sum of the three discriminator losses (one backward pass serves all).
    pub l_d_total: NodeId,
}

/// Builds every branch of the full objective on one tape.
pub fn build_losses(
    tape: &mut Tape,
    bundle: &ModelBundle,
    params: &mut ParamSet,
    batch: &PairBatch,
    draws: &LatentDraws,
    config: &TrainingConfig,
) -> LossNodes {
    let spec = &bundle.latent;
    let x = tape.constant(batch.x.clone());
    let x_bar = tape.constant(batch.x_bar.clone());
    let zg = tape.constant(draws.zg.clone());
    let local = tape.constant(draws.local.clone());
    // Prior samples.
    let x_prior =
        bundle.generator.synthesize(tape, params, spec, zg, Some(local), &draws.xi, true);
    // Reproductions: encode, reparameterize, regenerate with the same local
    // noise and phases as the prior samples of matching index.
    let enc = bundle.encoder.forward(tape, params, x, true);
    let log_sigma =
        if config.clamp_log_sigma { tape.clamp(enc.log_sigma, -10.0, 10.0) } else { enc.log_sigma };
    let eps = tape.constant(draws.eps.clone());
    let z_hat = latent::reparameterize(tape, enc.mu, log_sigma, eps);
    let x_rec =
        bundle.generator.synthesize(tape, params, spec, z_hat, Some(local), &draws.xi, true);
    // Discriminator heads.
    let p_real = bundle.disc_texture.forward(tape, params, x, true);
    let p_prior = bundle.disc_texture.forward(tape, params, x_prior, true);
    let p_rec = bundle.disc_texture.forward(tape, params, x_rec, true);
    let p_pair_real = bundle.disc_pair.forward(tape, params, x, x_bar, true);
    let p_pair_fake = bundle.disc_pair.forward(tape, params, x, x_rec, true);
    let p_z_prior = bundle.disc_latent.forward(tape, params, zg);
    let p_z_enc = bundle.disc_latent.forward(tape, params, z_hat);
    // Objectives.
    let l_dx = losses::loss_disc_texture(tape, p_real, p_prior, p_rec);
    let l_dz = losses::loss_disc_latent(tape, p_z_prior, p_z_enc);
    let l_dxx = losses::loss_disc_pair(tape, p_pair_real, p_pair_fake);
    let l_g = losses::loss_generator(tape, p_prior, p_rec, p_pair_fake, &config.weights);
    let mut l_e = losses::loss_encoder(tape, p_z_enc, p_pair_fake, &config.weights);
    if config.kl_weight > 0.0 {
        let kl = losses::kl_regularizer(tape, enc.mu, log_sigma);
        let weighted = tape.scale(kl, config.kl_weight);
        l_e = tape.add(l_e, weighted);
    }
    let dd = tape.add(l_dx, l_dz);
    let l_d_total = tape.add(dd, l_dxx);
    LossNodes { l_dx, l_dz, l_dxx, l_g, l_e, l_d_total }
}

/// Prior-only branch for the ablation: texture discriminator vs generator.
pub fn build_losses_prior_only(
    tape: &mut Tape,
    bundle: &ModelBundle,
    params: &mut ParamSet,
    batch: &PairBatch,
    draws: &LatentDraws,
) -> (NodeId, NodeId) {
    let spec = &bundle.latent;
    let x = tape.constant(batch.x.clone());
    let zg = tape.constant(draws.zg.clone());
    let local = tape.constant(draws.local.clone());
    let x_prior =
        bundle.generator.synthesize(tape, params, spec, zg, Some(local), &draws.xi, true);
    let p_real = bundle.disc_texture.forward(tape, params, x, true);
    let p_prior = bundle.disc_texture.forward(tape, params, x_prior, true);
    let l_d = losses::loss_disc_prior_only(tape, p_real, p_prior);
    let l_g = losses::loss_generator_prior_only(tape, p_prior);
    (l_d, l_g)
}

/// Model, parameters, and optimizer state of a training run.
pub struct Trainer {
    pub bundle: ModelBundle,
    pub params: ParamSet,
    pub adam: Adam,
    pub config: TrainingConfig,
    pub iteration: u64,
}

impl Trainer {
    #[must_use]
    pub fn new(bundle: ModelBundle, params: ParamSet, config: TrainingConfig) -> Self {
        let adam = Adam::new(config.adam);
        Trainer { bundle, params, adam, config, iteration: 0 }
    }

    fn wanted(&self, prefixes: &'static [&'static str]) -> impl Fn(usize) -> bool + '_ {
        move |idx| {
            self.params.is_trainable(idx)
                && prefixes.iter().any(|p| self.params.name(idx).starts_with(p))
        }
    }

    /// One joint update on a pair batch. Gradients of all phases are taken
    /// from pre-update parameters; the five losses are recorded.
    pub fn step(
        &mut self,
        batch: &PairBatch,
        latent_rng: &mut ChaCha8Rng,
    ) -> Result<LossRecord, CoreError> {
        self.step_inner(batch, latent_rng, true)
    }

    /// Extra discriminator-only update (used when `disc_steps_per_gen > 1`);
    /// generator and encoder parameters are untouched.
    pub fn disc_step(
        &mut self,
        batch: &PairBatch,
        latent_rng: &mut ChaCha8Rng,
    ) -> Result<LossRecord, CoreError> {
        self.step_inner(batch, latent_rng, false)
    }

    fn step_inner(
        &mut self,
        batch: &PairBatch,
        latent_rng: &mut ChaCha8Rng,
        update_gen_enc: bool,
    ) -> Result<LossRecord, CoreError> {
        let n = batch.x.shape()[0];
        if n == 0 {
            return Err(CoreError::data("empty batch"));
        }
        let draws = LatentDraws::draw(&self.bundle.latent, n, latent_rng);
        let mut tape = Tape::new();
        let record;
        let mut grads: HashMap<usize, Tensor>;
        match self.config.ablation {
            Ablation::Full => {
                let nodes = {
                    // Parameters are mutated only by normalization buffer
                    // updates during the forward pass.
                    let (bundle, params) = (&self.bundle, &mut self.params);
                    build_losses(&mut tape, bundle, params, batch, &draws, &self.config)
                };
                record = LossRecord {
                    iteration: self.iteration,
                    l_dx: tape.value(nodes.l_dx).scalar(),
                    l_dz: tape.value(nodes.l_dz).scalar(),
                    l_dxx: tape.value(nodes.l_dxx).scalar(),
                    l_g: tape.value(nodes.l_g).scalar(),
                    l_e: tape.value(nodes.l_e).scalar(),
                    wall_ms: 0.0,
                };
                for (name, v) in [
                    ("texture discriminator", record.l_dx),
                    ("latent discriminator", record.l_dz),
                    ("pair discriminator", record.l_dxx),
                    ("generator", record.l_g),
                    ("encoder", record.l_e),
                ] {
                    if !v.is_finite() {
                        return Err(CoreError::numerical(format!(
                            "{name} loss diverged at iteration {}: {v}",
                            self.iteration
                        )));
                    }
                }
                grads = tape.backward(nodes.l_d_total, &self.wanted(&["dx.", "dxx.", "dz."]));
                if update_gen_enc {
                    let g = tape.backward(nodes.l_g, &self.wanted(&["gen."]));
                    let e = tape.backward(nodes.l_e, &self.wanted(&["enc."]));
                    grads.extend(g);
                    grads.extend(e);
                }
            }
            Ablation::Psgan => {
                let (l_d, l_g) = {
                    let (bundle, params) = (&self.bundle, &mut self.params);
                    build_losses_prior_only(&mut tape, bundle, params, batch, &draws)
                };
                let (vd, vg) = (tape.value(l_d).scalar(), tape.value(l_g).scalar());
                if !vd.is_finite() || !vg.is_finite() {
                    return Err(CoreError::numerical(format!(
                        "loss diverged at iteration {}: d={vd} g={vg}",
                        self.iteration
                    )));
                }
                record = LossRecord {
                    iteration: self.iteration,
                    l_dx: vd,
                    l_dz: 0.0,
                    l_dxx: 0.0,
                    l_g: vg,
                    l_e: 0.0,
                    wall_ms: 0.0,
                };
                grads = tape.backward(l_d, &self.wanted(&["dx."]));
                if update_gen_enc {
                    grads.extend(tape.backward(l_g, &self.wanted(&["gen."])));
                }
            }
        }
        self.adam.step(&mut self.params, &grads);
        if update_gen_enc {
            self.iteration += 1;
        }
        Ok(record)
    }
}

/// Runs the loop: per iteration, `disc_steps_per_gen − 1` extra
/// discriminator updates, then one joint update; `on_checkpoint` fires every
/// `checkpoint_every` iterations and once after the loop (so
/// `iterations = 0` emits only the initial state).
pub fn train_loop(
    trainer: &mut Trainer,
    dataset: &TextureDataset,
    data_rng: &mut ChaCha8Rng,
    latent_rng: &mut ChaCha8Rng,
    records: &mut Vec<LossRecord>,
    mut on_checkpoint: impl FnMut(&Trainer, &ChaCha8Rng, &ChaCha8Rng) -> Result<(), CoreError>,
) -> Result<(), CoreError> {
    let total = trainer.config.iterations;
    let start = std::time::Instant::now();
    while trainer.iteration < total {
        for _ in 1..trainer.config.disc_steps_per_gen {
            let extra = dataset.sample_pairs(trainer.config.batch, data_rng);
            trainer.disc_step(&extra, latent_rng)?;
        }
        let batch = dataset.sample_pairs(trainer.config.batch, data_rng);
        let mut rec = trainer.step(&batch, latent_rng)?;
        rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        records.push(rec);
        let every = trainer.config.checkpoint_every;
        if every > 0 && trainer.iteration % every == 0 && trainer.iteration < total {
            on_checkpoint(trainer, data_rng, latent_rng)?;
        }
    }
    on_checkpoint(trainer, data_rng, latent_rng)
}

/// Writes metrics rows as CSV (iteration, the five losses, wall time).
pub fn write_metrics_csv(path: &Path, records: &[LossRecord]) -> Result<(), CoreError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::data(e.to_string()))?;
    w.write_record(["iteration", "l_dx", "l_dz", "l_dxx", "l_g", "l_e", "wall_ms"])
        .map_err(|e| CoreError::data(e.to_string()))?;
    for r in records {
        w.write_record([
            r.iteration.to_string(),
            r.l_dx.to_string(),
            r.l_dz.to_string(),
            r.l_dxx.to_string(),
            r.l_g.to_string(),
            r.l_e.to_string(),
            r.wall_ms.to_string(),
        ])
        .map_err(|e| CoreError::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of `values[range]`; the smoothing window used by training-dynamics
/// checks.
#[must_use]
pub fn window_mean(values: &[f64], range: std::ops::Range<usize>) -> f64 {
    let slice = &values[range];
    slice.iter().sum::<f64>() / slice.len() as f64
}
