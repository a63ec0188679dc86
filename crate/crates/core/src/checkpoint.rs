//! Checkpoint files: a JSON header (specs, config, metadata, RNG positions)
//! followed by a raw little-endian `f64` payload holding every parameter
//! tensor and the optimizer moments, so save → load → resume is bit-exact.
//!
//! Layout: 4-byte magic `TXCK`, `u64` header length, JSON header, payload.
//! The payload stores parameter values in registration order, then the Adam
//! first and second moments per recorded slot.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::latent::LatentSpec;
use crate::networks::{ArchitectureSpec, ModelBundle};
use crate::params::ParamSet;
use crate::rng::{self, RngState};
use crate::tensor::Tensor;
use crate::train::{Adam, AdamSlot, Trainer, TrainingConfig};

pub const MAGIC: [u8; 4] = *b"TXCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    idx: usize,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    iteration: u64,
    latent: LatentSpec,
    arch: ArchitectureSpec,
    config: TrainingConfig,
    params: Vec<ParamMeta>,
    adam: Vec<AdamMeta>,
    rng_data: RngState,
    rng_latent: RngState,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8], cursor: &mut usize, count: usize) -> Result<Vec<f64>, CoreError> {
    let need = count * 8;
    let end = *cursor + need;
    if end > bytes.len() {
        return Err(CoreError::data("checkpoint payload truncated"));
    }
    let values = bytes[*cursor..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    *cursor = end;
    Ok(values)
}

/// Serializes the trainer plus the positions of both RNG streams.
pub fn save_checkpoint(
    path: &Path,
    trainer: &Trainer,
    data_rng: &ChaCha8Rng,
    latent_rng: &ChaCha8Rng,
) -> Result<(), CoreError> {
    let seed = trainer.config.seed;
    let adam_state = trainer.adam.state();
    let header = Header {
        version: VERSION,
        iteration: trainer.iteration,
        latent: trainer.bundle.latent.clone(),
        arch: trainer.bundle.arch.clone(),
        config: trainer.config.clone(),
        params: trainer
            .params
            .entries()
            .iter()
            .map(|e| ParamMeta {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect(),
        adam: adam_state.iter().map(|(idx, s)| AdamMeta { idx: *idx, t: s.t }).collect(),
        rng_data: rng::save_state(data_rng, seed),
        rng_latent: rng::save_state(latent_rng, seed),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CoreError::data(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in trainer.params.entries() {
        push_f64s(&mut out, e.value.data());
    }
    for (_, slot) in &adam_state {
        push_f64s(&mut out, &slot.m);
        push_f64s(&mut out, &slot.v);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// A parsed checkpoint, ready to be turned back into a trainer.
pub struct LoadedCheckpoint {
    pub iteration: u64,
    pub latent: LatentSpec,
    pub arch: ArchitectureSpec,
    pub config: TrainingConfig,
    pub params: ParamSet,
    pub adam_state: Vec<(usize, AdamSlot)>,
    pub rng_data: RngState,
    pub rng_latent: RngState,
}

/// Reads and validates a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CoreError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || bytes[..4] != MAGIC {
        return Err(CoreError::data("not a checkpoint file (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    if 12 + hlen > bytes.len() {
        return Err(CoreError::data("checkpoint header truncated"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| CoreError::data(e.to_string()))?;
    if header.version != VERSION {
        return Err(CoreError::data(format!(
            "unsupported checkpoint version {} (expected {VERSION})",
            header.version
        )));
    }
    let mut cursor = 12 + hlen;
    let mut params = ParamSet::new();
    for meta in &header.params {
        let numel: usize = meta.shape.iter().product();
        let data = read_f64s(&bytes, &mut cursor, numel)?;
        params.add(&meta.name, Tensor::new(meta.shape.clone(), data), meta.trainable);
    }
    let mut adam_state = Vec::with_capacity(header.adam.len());
    for meta in &header.adam {
        if meta.idx >= params.len() {
            return Err(CoreError::data(format!(
                "optimizer slot refers to missing parameter {}",
                meta.idx
            )));
        }
        let numel = params.get(meta.idx).numel();
        let m = read_f64s(&bytes, &mut cursor, numel)?;
        let v = read_f64s(&bytes, &mut cursor, numel)?;
        adam_state.push((meta.idx, AdamSlot { t: meta.t, m, v }));
    }
    if cursor != bytes.len() {
        return Err(CoreError::data("checkpoint has trailing bytes"));
    }
    Ok(LoadedCheckpoint {
        iteration: header.iteration,
        latent: header.latent,
        arch: header.arch,
        config: header.config,
        params,
        adam_state,
        rng_data: header.rng_data,
        rng_latent: header.rng_latent,
    })
}

impl LoadedCheckpoint {
    /// Rebuilds the model wiring and returns the trainer together with both
    /// RNG streams at their saved positions.
    pub fn into_trainer(self) -> Result<(Trainer, ChaCha8Rng, ChaCha8Rng), CoreError> {
        // The bundle is rebuilt against a scratch set only to recover the
        // layer wiring; parameter indices follow registration order, which is
        // deterministic for a given latent/architecture pair.
        let mut scratch = ParamSet::new();
        let mut init = rng::stream_rng(0, rng::STREAM_INIT);
        let bundle = ModelBundle::build(&mut scratch, &mut init, &self.latent, &self.arch)?;
        if scratch.len() != self.params.len() {
            return Err(CoreError::data("checkpoint parameter table does not match architecture"));
        }
        for i in 0..scratch.len() {
            if scratch.name(i) != self.params.name(i)
                || scratch.get(i).shape() != self.params.get(i).shape()
            {
                return Err(CoreError::data(format!(
                    "checkpoint parameter {} does not match architecture",
                    self.params.name(i)
                )));
            }
        }
        let mut adam = Adam::new(self.config.adam);
        adam.restore(self.adam_state);
        let trainer = Trainer {
            bundle,
            params: self.params,
            adam,
            config: self.config,
            iteration: self.iteration,
        };
        let data_rng = rng::restore_state(&self.rng_data);
        let latent_rng = rng::restore_state(&self.rng_latent);
        Ok((trainer, data_rng, latent_rng))
    }
}
