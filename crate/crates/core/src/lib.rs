//! Two-branch consistent image editing.
//!
//! During DDIM inversion the latent at one step is optimised so that the
//! object's cross-attention moves into a target box while the vacated area is
//! inpainted from its surroundings. The reverse branch then renders the edited
//! prompt, reading self-attention keys and values recorded during inversion.

pub mod attention;
pub mod backbone;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod objective;
pub mod pipeline;
pub mod regions;

pub use backbone::{Backbone, LatentTensor, ToyBackbone};
pub use config::Config;
pub use error::{Error, Result};
pub use image::RgbImage;
pub use pipeline::{edit, invert, run_edit, EditRequest, EditResult, InversionTrace};
pub use regions::{BinaryMask, BoundingBox, RegionMasks};
