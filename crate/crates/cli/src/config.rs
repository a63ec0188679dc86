//! TOML run configuration: dataset source, latent layout, architecture
//! preset, and training hyperparameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use texsyn_core::data::{self, TextureDataset};
use texsyn_core::latent::LatentSpec;
use texsyn_core::networks::ArchitectureSpec;
use texsyn_core::train::TrainingConfig;
use texsyn_core::{rng, CoreError};

/// RNG stream for rendering procedural dataset sources; disjoint from the
/// init/data/latent/bootstrap streams so regenerating the dataset never
/// perturbs training draws.
pub const STREAM_SOURCES: u64 = 4;

/// Where training and evaluation images come from. Exactly one of
/// `manifest` (a labeled image list on disk) or `procedural` (a built-in
/// synthetic family: `desk-textures` or `desk-volumes`) must be set.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub procedural: Option<String>,
    /// Crop side; required with `manifest`, optional override otherwise.
    pub crop: Option<usize>,
    /// Volume count for `desk-volumes`.
    #[serde(default = "default_count")]
    pub count: usize,
    /// Source side for `desk-volumes`.
    #[serde(default = "default_size")]
    pub size: usize,
}

fn default_count() -> usize {
    8
}

fn default_size() -> usize {
    64
}

/// Named channel-ladder preset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchChoice {
    pub preset: String,
}

/// One full run description as parsed from a TOML file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: DataConfig,
    pub latent: LatentSpec,
    pub arch: ArchChoice,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CoreError::config(format!("{}: {e}", path.display())))
    }

    /// Resolves the architecture preset against the latent layout.
    pub fn build_arch(&self) -> Result<ArchitectureSpec, CoreError> {
        let arch = match self.arch.preset.as_str() {
            "desk-2d" => ArchitectureSpec::desk_2d(&self.latent),
            "desk-3d" => ArchitectureSpec::desk_3d(&self.latent),
            "paper-2d" => ArchitectureSpec::paper_2d(&self.latent),
            "paper-3d" => ArchitectureSpec::paper_3d(&self.latent),
            other => {
                return Err(CoreError::config(format!(
                    "unknown architecture preset '{other}' (expected desk-2d, desk-3d, paper-2d, or paper-3d)"
                )))
            }
        };
        arch.validate(&self.latent)?;
        Ok(arch)
    }

    /// Loads or renders the dataset. Procedural sources draw from a
    /// dedicated stream of `seed`, so the same seed always yields the same
    /// sources (checkpoint resume sees identical data).
    pub fn build_dataset(&self, seed: u64) -> Result<TextureDataset, CoreError> {
        let mut source_rng = rng::stream_rng(seed, STREAM_SOURCES);
        let d = &self.data;
        match (&d.manifest, &d.procedural) {
            (Some(_), Some(_)) => {
                Err(CoreError::config("set either data.manifest or data.procedural, not both"))
            }
            (None, None) => {
                Err(CoreError::config("data section needs a manifest path or a procedural family"))
            }
            (Some(path), None) => {
                let crop = d.crop.ok_or_else(|| {
                    CoreError::config("data.crop is required with manifest datasets")
                })?;
                TextureDataset::from_manifest(path, crop)
            }
            (None, Some(family)) => match family.as_str() {
                "desk-textures" => {
                    let ds = data::desk_textures(&mut source_rng)?;
                    match d.crop {
                        Some(c) if c != ds.crop() => ds.with_crop(c),
                        _ => Ok(ds),
                    }
                }
                "desk-volumes" => {
                    let crop = d.crop.unwrap_or(d.size);
                    data::procedural_volumes(d.count, d.size, crop, &mut source_rng)
                }
                other => Err(CoreError::config(format!(
                    "unknown procedural family '{other}' (expected desk-textures or desk-volumes)"
                ))),
            },
        }
    }

    /// Dataset geometry must agree with the model before training starts.
    pub fn check_compatible(
        dataset: &TextureDataset,
        latent: &LatentSpec,
        arch: &ArchitectureSpec,
    ) -> Result<(), CoreError> {
        if dataset.ndim() != latent.ndim {
            return Err(CoreError::config(format!(
                "dataset rank {} does not match model rank {}",
                dataset.ndim(),
                latent.ndim
            )));
        }
        if dataset.crop() != arch.crop {
            return Err(CoreError::config(format!(
                "dataset crop {} does not match architecture crop {}",
                dataset.crop(),
                arch.crop
            )));
        }
        if dataset.channels() != arch.image_channels {
            return Err(CoreError::config(format!(
                "dataset channels {} do not match architecture channels {}",
                dataset.channels(),
                arch.image_channels
            )));
        }
        Ok(())
    }
}
