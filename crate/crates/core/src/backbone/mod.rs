//! Latent-diffusion backbone abstraction.
//!
//! A backbone bundles the image autoencoder, the prompt encoder and an
//! instrumented denoiser. Instrumentation is opt-in per call: cross-attention
//! maps at a chosen resolution, self-attention keys/values of chosen layers,
//! named decoder feature taps, and a hook that may substitute the keys/values
//! a self-attention layer attends to.
//!
//! Every tensor flowing out of [`Backbone::denoise`] stays attached to the
//! autograd graph of its input latent, so a scalar built from the outputs can
//! be differentiated with respect to the latent by passing a
//! [`candle_core::Var`]-backed tensor.

mod schedule;
pub mod toy;

use std::collections::BTreeMap;
use std::fmt;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::config::{BackboneConfig, BackboneKind};
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub use schedule::{guided_noise, DiffusionSchedule};
pub use toy::ToyBackbone;

/// Identifier of an attention layer inside the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId(pub String);

impl LayerId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A latent code `(channels, H, W)` tagged with the scheduler timestep it belongs to.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    pub data: Tensor,
    pub step_tag: u32,
}

impl LatentTensor {
    pub fn new(data: Tensor, step_tag: u32) -> Self {
        Self { data, step_tag }
    }

    pub fn shape(&self) -> &[usize] {
        self.data.dims()
    }

    pub fn is_finite(&self) -> Result<bool> {
        all_finite(&self.data)
    }
}

pub(crate) fn all_finite(t: &Tensor) -> Result<bool> {
    let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(values.iter().all(|v| v.is_finite()))
}

/// Encoded prompt: token embeddings plus the token positions of every word.
#[derive(Debug, Clone)]
pub struct PromptEncoding {
    pub text: String,
    /// `(tokens, embed_dim)`.
    pub embeddings: Tensor,
    /// Normalised word → strictly increasing token indices.
    pub token_spans: BTreeMap<String, Vec<usize>>,
    pub is_unconditional: bool,
}

impl PromptEncoding {
    pub fn num_tokens(&self) -> usize {
        self.embeddings.dims()[0]
    }

    /// Token indices of `word` (matched case-insensitively, punctuation ignored).
    pub fn word_tokens(&self, word: &str) -> Result<&[usize]> {
        let key = normalize_word(word);
        self.token_spans
            .get(&key)
            .map(Vec::as_slice)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| {
                Error::invalid(
                    "object_word",
                    format!("`{word}` does not occur in prompt `{}`", self.text),
                )
            })
    }
}

/// Lower-cases and strips leading/trailing punctuation; falls back to the
/// lower-cased word when nothing alphanumeric remains.
pub fn normalize_word(word: &str) -> String {
    let lower = word.to_lowercase();
    let trimmed = lower.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() {
        lower
    } else {
        trimmed.to_string()
    }
}

/// True when `word` is one of the whitespace-separated words of `prompt`.
pub fn prompt_contains_word(prompt: &str, word: &str) -> bool {
    let key = normalize_word(word);
    !key.is_empty() && prompt.split_whitespace().any(|w| normalize_word(w) == key)
}

/// A decoder feature map `(channels, H, W)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub layer_name: String,
}

impl FeatureMap {
    pub fn resolution(&self) -> (usize, usize) {
        let d = self.data.dims();
        (d[1], d[2])
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    /// Same shape as the input latent.
    pub noise_prediction: Tensor,
    pub attention: Option<AttentionRecord>,
    pub feature_taps: BTreeMap<String, FeatureMap>,
}

/// Substitutes the keys/values a self-attention layer attends to.
///
/// Called once per self-attention layer per denoiser call with the layer's
/// queries `(heads, positions, head_dim)`. Returning `Some(out)` replaces the
/// layer's attention output (before the output projection); `None` lets the
/// layer attend to its own keys/values.
pub trait KvInjector {
    fn replace(&mut self, layer: &LayerId, query: &Tensor) -> Result<Option<Tensor>>;
}

/// What a denoiser call should record or alter.
#[derive(Default)]
pub struct Instrumentation<'a> {
    /// Record post-softmax cross-attention of every layer at this resolution.
    pub cross_attention_at: Option<(usize, usize)>,
    /// Record self-attention `(K, V)` for these layers.
    pub self_kv_layers: Vec<LayerId>,
    /// Return these decoder-block outputs.
    pub feature_taps: Vec<String>,
    pub kv_injector: Option<&'a mut dyn KvInjector>,
}

impl<'a> Instrumentation<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    fn records_attention(&self) -> bool {
        self.cross_attention_at.is_some() || !self.self_kv_layers.is_empty()
    }
}

/// Self-attention layers partitioned by UNet stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPartition {
    pub encoder: Vec<LayerId>,
    pub middle: Vec<LayerId>,
    pub decoder: Vec<LayerId>,
}

impl LayerPartition {
    pub fn all(&self) -> Vec<LayerId> {
        self.encoder
            .iter()
            .chain(&self.middle)
            .chain(&self.decoder)
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneCapabilities {
    pub name: String,
    /// Native square input size in pixels.
    pub image_size: usize,
    pub downsample_factor: usize,
    /// `(channels, H_lat, W_lat)`.
    pub latent_shape: [usize; 3],
    pub semantic_resolution: (usize, usize),
    pub self_attention: LayerPartition,
    pub cross_attention: Vec<(LayerId, (usize, usize))>,
    pub feature_taps: Vec<(String, (usize, usize))>,
    /// Tap used for the inpainting and background losses.
    pub semantic_feature_tap: String,
    /// Mean absolute per-pixel round-trip error bound of the autoencoder.
    pub autoencoder_tolerance: f64,
}

impl BackboneCapabilities {
    pub fn feature_resolution(&self, tap: &str) -> Option<(usize, usize)> {
        self.feature_taps
            .iter()
            .find(|(name, _)| name == tap)
            .map(|(_, r)| *r)
    }
}

/// A backbone session. One in-flight `denoise` call at a time (`&mut self`).
pub trait Backbone {
    fn capabilities(&self) -> BackboneCapabilities;

    fn schedule(&self) -> &DiffusionSchedule;

    /// Replaces the timestep grid (same training schedule, new step count).
    fn set_num_steps(&mut self, num_steps: usize) -> Result<()>;

    fn device(&self) -> &Device;

    fn dtype(&self) -> DType;

    fn encode_image(&self, image: &RgbImage) -> Result<LatentTensor>;

    fn decode_latent(&self, z: &LatentTensor) -> Result<RgbImage>;

    /// Encodes `text`; the empty string yields the unconditional encoding.
    fn encode_prompt(&self, text: &str) -> Result<PromptEncoding>;

    fn denoise(
        &mut self,
        z: &Tensor,
        t: u32,
        cond: &PromptEncoding,
        instrument: &mut Instrumentation<'_>,
    ) -> Result<DenoiserOutput>;

    /// Number of `denoise` calls served by this session.
    fn call_count(&self) -> usize;
}

/// Opens a backbone session as configured.
pub fn open(config: &BackboneConfig) -> Result<Box<dyn Backbone + Send>> {
    match config.kind {
        BackboneKind::Toy => Ok(Box::new(ToyBackbone::new(
            config.toy_seed,
            config.num_steps,
            config.guidance_scale,
        )?)),
        BackboneKind::Real => Err(Error::BackboneUnavailable(match &config.checkpoint_path {
            Some(p) => format!(
                "checkpoint backbone at {} cannot be loaded: only the toy backbone is built in",
                p.display()
            ),
            None => "backbone.checkpoint_path is not set".to_string(),
        })),
    }
}
