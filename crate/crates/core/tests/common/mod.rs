#![allow(dead_code)]

use moveact_core::image::sample_scene;
use moveact_core::{BoundingBox, Config, EditRequest, RgbImage, ToyBackbone};

pub const OBJECT: [f64; 4] = [0.125, 0.5, 0.375, 0.75];
pub const TARGET: [f64; 4] = [0.5, 0.5, 0.875, 0.875];

pub fn scene() -> RgbImage {
    sample_scene(64, OBJECT)
}

pub fn bbox(b: [f64; 4]) -> BoundingBox {
    BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap()
}

pub fn request() -> EditRequest {
    EditRequest::new(scene(), "A photo of cat", "A running cat", "cat", bbox(TARGET))
}

pub fn config(overlay: serde_json::Value) -> Config {
    Config::toy_preset().with_overlay(&overlay).unwrap()
}

pub fn backbone(config: &Config) -> ToyBackbone {
    let b = &config.backbone;
    ToyBackbone::new(b.toy_seed, b.num_steps, b.guidance_scale).unwrap()
}
