mod common;

use moveact_core::{edit, invert, EditRequest};

const TOLERANCE: f64 = 0.10;

fn reconstruction_error(num_steps: usize, replace: bool) -> f64 {
    let cfg = common::config(serde_json::json!({
        "backbone": {"num_steps": num_steps},
        "objective": {"iterations": 0, "update_step_index": 1},
        "edit": {"S": 0, "replace_kv": replace},
    }));
    let image = common::scene();
    let req = EditRequest::new(image.clone(), "A photo of cat", "A photo of cat", "cat", common::bbox(common::TARGET));
    let mut bb = common::backbone(&cfg);
    let trace = invert(&req, &cfg, &mut bb).unwrap();
    let out = edit(&trace, &req, &cfg, &mut bb).unwrap();
    out.edited_image.relative_l2(&image).unwrap()
}

#[test]
fn identical_prompts_reconstruct_the_input() {
    let e50 = reconstruction_error(50, true);
    let e10 = reconstruction_error(10, true);
    let e5 = reconstruction_error(5, true);
    assert!(e50 <= TOLERANCE, "50-step error {e50}");
    assert!(e50 < e10 && e10 < e5, "{e5} {e10} {e50}");
    assert!(e50 < reconstruction_error(50, false));
}

#[test]
fn autoencoder_round_trips_patch_constant_images() {
    use moveact_core::Backbone;
    let cfg = common::config(serde_json::json!({}));
    let bb = common::backbone(&cfg);
    let image = common::scene();
    let z = bb.encode_image(&image).unwrap();
    let back = bb.decode_latent(&z).unwrap();
    assert!(back.relative_l2(&image).unwrap() < 1e-5);
}
