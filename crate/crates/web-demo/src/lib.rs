//! Browser demo on the toy backbone.
//!
//! Exports three operations: region masks from the scene's object heatmap
//! and a target box, the DDIM timestep schedule, and a full toy edit that
//! returns the loss curve and both images as RGBA bytes.

use moveact_core::image::sample_scene;
use moveact_core::regions::build_region_masks;
use moveact_core::{edit, invert, BoundingBox, Config, EditRequest, Result, ToyBackbone};
use wasm_bindgen::prelude::*;

pub const IMAGE_SIZE: usize = 64;
pub const INVERSION_PROMPT: &str = "A photo of cat";
pub const EDITING_PROMPT: &str = "A running cat";
pub const OBJECT_WORD: &str = "cat";

fn bbox(b: &[f64]) -> Result<BoundingBox> {
    match b {
        [x0, y0, x1, y1] => BoundingBox::new(*x0, *y0, *x1, *y1),
        _ => Err(moveact_core::Error::invalid("bbox", "expected four numbers")),
    }
}

fn backbone(config: &Config) -> Result<ToyBackbone> {
    let b = &config.backbone;
    ToyBackbone::new(b.toy_seed, b.num_steps, b.guidance_scale)
}

fn request(object: &[f64], target: &[f64]) -> Result<EditRequest> {
    Ok(EditRequest::new(
        sample_scene(IMAGE_SIZE, bbox(object)?.into()),
        INVERSION_PROMPT,
        EDITING_PROMPT,
        OBJECT_WORD,
        bbox(target)?,
    ))
}

fn preset(iterations: usize, alpha0: f64) -> Result<Config> {
    Config::toy_preset().with_overlay(&serde_json::json!({
        "objective": {"iterations": iterations, "alpha0": alpha0}
    }))
}

/// Region masks for a target box over the scene with the object at `object`.
#[derive(Debug, Clone)]
pub struct MaskView {
    pub size: usize,
    pub heatmap: Vec<f64>,
    /// 0 background, 1 source, 2 edge, 3 target.
    pub labels: Vec<u8>,
}

pub fn masks_for(object: &[f64], target: &[f64], threshold: f64) -> Result<MaskView> {
    let mut config = preset(0, Config::toy_preset().objective.alpha0)?;
    config.regions.threshold = threshold;
    config.validate()?;
    let req = request(object, target)?;
    let mut bb = backbone(&config)?;
    let trace = invert(&req, &config, &mut bb)?;
    let masks = build_region_masks(&trace.heatmap_at_update, &req.fields.target_box, &config.regions)?;
    Ok(MaskView {
        size: trace.heatmap_at_update.resolution.0,
        heatmap: trace.heatmap_at_update.data.clone(),
        labels: masks.label_map(),
    })
}

pub fn timesteps(num_steps: usize) -> Result<Vec<u32>> {
    Ok(moveact_core::backbone::DiffusionSchedule::new(num_steps, 7.5)?
        .inversion_timesteps()
        .to_vec())
}

#[derive(Debug, Clone)]
pub struct EditView {
    pub size: usize,
    pub loss_total: Vec<f64>,
    pub loss_in: Vec<f64>,
    pub input_rgba: Vec<u8>,
    pub edited_rgba: Vec<u8>,
}

pub fn run_toy_edit(object: &[f64], target: &[f64], iterations: usize, alpha0: f64) -> Result<EditView> {
    let config = preset(iterations, alpha0)?;
    config.validate()?;
    let req = request(object, target)?;
    let mut bb = backbone(&config)?;
    let trace = invert(&req, &config, &mut bb)?;
    let outcome = edit(&trace, &req, &config, &mut bb)?;
    Ok(EditView {
        size: IMAGE_SIZE,
        loss_total: trace.loss_log.iter().map(|r| r.losses.l_total).collect(),
        loss_in: trace.loss_log.iter().map(|r| r.losses.l_in).collect(),
        input_rgba: req.image.to_rgba8_bytes(),
        edited_rgba: outcome.edited_image.to_rgba8_bytes(),
    })
}

fn js_err(e: moveact_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Masks(MaskView);

#[wasm_bindgen]
impl Masks {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.0.size
    }
    #[wasm_bindgen(getter)]
    pub fn heatmap(&self) -> Vec<f64> {
        self.0.heatmap.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn labels(&self) -> Vec<u8> {
        self.0.labels.clone()
    }
}

#[wasm_bindgen]
pub struct EditRun(EditView);

#[wasm_bindgen]
impl EditRun {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.0.size
    }
    #[wasm_bindgen(getter, js_name = lossTotal)]
    pub fn loss_total(&self) -> Vec<f64> {
        self.0.loss_total.clone()
    }
    #[wasm_bindgen(getter, js_name = lossIn)]
    pub fn loss_in(&self) -> Vec<f64> {
        self.0.loss_in.clone()
    }
    #[wasm_bindgen(getter, js_name = inputRgba)]
    pub fn input_rgba(&self) -> Vec<u8> {
        self.0.input_rgba.clone()
    }
    #[wasm_bindgen(getter, js_name = editedRgba)]
    pub fn edited_rgba(&self) -> Vec<u8> {
        self.0.edited_rgba.clone()
    }
}

/// `object` and `target` are `[x0, y0, x1, y1]` in unit coordinates.
#[wasm_bindgen(js_name = regionMasks)]
pub fn region_masks(object: &[f64], target: &[f64], threshold: f64) -> std::result::Result<Masks, JsError> {
    masks_for(object, target, threshold).map(Masks).map_err(js_err)
}

#[wasm_bindgen(js_name = scheduleTimesteps)]
pub fn schedule_timesteps(num_steps: usize) -> std::result::Result<Vec<u32>, JsError> {
    timesteps(num_steps).map_err(js_err)
}

#[wasm_bindgen(js_name = toyEdit)]
pub fn toy_edit(object: &[f64], target: &[f64], iterations: usize, alpha0: f64) -> std::result::Result<EditRun, JsError> {
    run_toy_edit(object, target, iterations, alpha0).map(EditRun).map_err(js_err)
}

#[wasm_bindgen(js_name = defaultAlpha0)]
pub fn default_alpha0() -> f64 {
    Config::toy_preset().objective.alpha0
}
