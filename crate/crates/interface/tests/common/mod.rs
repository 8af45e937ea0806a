#![allow(dead_code)]

use std::path::Path;

use moveact_core::image::sample_scene;
use moveact_core::RgbImage;

pub const BOUNDARY: &str = "moveact-test-boundary";

pub fn scene() -> RgbImage {
    sample_scene(64, [0.125, 0.5, 0.375, 0.75])
}

pub fn write_scene(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("scene.png");
    scene().save_png(&path).unwrap();
    path
}

pub fn request_json(inv: &str, edit: &str, object: &str, bbox: [f64; 4]) -> String {
    serde_json::json!({
        "inversion_prompt": inv,
        "editing_prompt": edit,
        "object_word": object,
        "target_box": bbox,
    })
    .to_string()
}

/// Multipart body with an `image` part (PNG bytes) and a `request` part.
pub fn multipart(image: Option<&[u8]>, request: Option<&str>) -> Vec<u8> {
    let mut body = Vec::new();
    if let Some(png) = image {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"scene.png\"\r\nContent-Type: image/png\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(png);
        body.extend_from_slice(b"\r\n");
    }
    if let Some(json) = request {
        body.extend_from_slice(
            format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"request\"\r\nContent-Type: application/json\r\n\r\n{json}\r\n")
                .as_bytes(),
        );
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}
