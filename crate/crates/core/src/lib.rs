//! Texture-synthesis core: structured latent noise, convolutional networks
//! with reverse-mode autodiff, adversarial training, analysis and evaluation
//! tools for 2-D textures and 3-D porous structures.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernels;
pub mod latent;
pub mod losses;
pub mod morphology;
pub mod networks;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::CoreError;
pub use tensor::Tensor;
