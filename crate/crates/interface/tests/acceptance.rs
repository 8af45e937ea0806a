//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p moveact-interface --test acceptance`

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use candle_core::{Device, Tensor};
use http_body_util::BodyExt;
use moveact_core::attention::TokenHeatmap;
use moveact_core::backbone::FeatureMap;
use moveact_core::config::RegionParams;
use moveact_core::evaluation::{ap50, ApItem, Detection, ItemMetrics, MetricReport};
use moveact_core::objective::{
    latent_gradient_step, loss_bg, loss_in, loss_oii, loss_out, loss_sai, rat_align, step_size, LossBreakdown,
    LossTerm, LossWeights, UpdateSchedule,
};
use moveact_core::pipeline::LatentUpdate;
use moveact_core::regions::{build_region_masks, dilate, edge_ring, resample_mask, threshold_source_mask, BinaryMask};
use moveact_core::{edit, invert, run_edit, Backbone, BoundingBox, Config, EditRequest, LatentTensor, ToyBackbone};
use moveact_interface::http::{router, AppState};
use moveact_interface::jobs::{JobState, JobStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tower::ServiceExt;

type Check = Result<String, String>;

const TARGET: [f64; 4] = [0.5, 0.5, 0.875, 0.875];

fn ensure(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{name}: got {got}, want {want} ± {tol:e}"))
}

fn bbox(b: [f64; 4]) -> BoundingBox {
    BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap()
}

fn request(target: [f64; 4]) -> EditRequest {
    EditRequest::new(common::scene(), "A photo of cat", "A running cat", "cat", bbox(target))
}

fn toy_config(overlay: serde_json::Value) -> Config {
    Config::toy_preset().with_overlay(&overlay).unwrap()
}

fn toy(config: &Config) -> ToyBackbone {
    let b = &config.backbone;
    ToyBackbone::new(b.toy_seed, b.num_steps, b.guidance_scale).unwrap()
}

fn grid(values: Vec<f64>, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(values, (h, w), &Device::Cpu).unwrap()
}

fn fmap(values: Vec<f64>, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap {
        data: Tensor::from_vec(values, (c, h, w), &Device::Cpu).unwrap(),
        layer_name: "probe".into(),
    }
}

fn cells(res: (usize, usize), on: &[(usize, usize)]) -> BinaryMask {
    BinaryMask::from_fn(res, |r, c| on.contains(&(r, c)))
}

fn val(t: &Tensor) -> f64 {
    t.to_dtype(candle_core::DType::F64).unwrap().to_scalar().unwrap()
}

fn loss_exactness() -> Check {
    let tol = 1e-6;
    let mut n = 0;
    let mut check = |name: &str, got: f64, want: f64| -> Result<(), String> {
        n += 1;
        close(name, got, want, tol)
    };
    let target = cells((4, 4), &[(0, 0), (0, 1)]);
    check("loss_in all ones", val(&loss_in(&grid(vec![1.0; 16], 4, 4), &target, 2).unwrap()), 0.0)?;
    let mut h = vec![0.0; 16];
    h[0] = 0.8;
    h[1] = 0.6;
    check("loss_in 0.3", val(&loss_in(&grid(h, 4, 4), &target, 2).unwrap()), 0.3)?;
    check("loss_in uniform", val(&loss_in(&grid(vec![0.35; 16], 4, 4), &target, 1).unwrap()), 0.65)?;

    let four = cells((4, 4), &[(0, 0), (0, 1), (1, 0), (1, 1)]);
    let mut h = vec![0.0; 16];
    for i in [0, 1, 4, 5] {
        h[i] = 1.0;
    }
    check("loss_out zero outside", val(&loss_out(&grid(h.clone(), 4, 4), &four).unwrap()), 0.0)?;
    let h2: Vec<f64> = (0..16).map(|i| if [0, 1, 4, 5].contains(&i) { 0.9 } else { 0.5 }).collect();
    check("loss_out 0.5", val(&loss_out(&grid(h2, 4, 4), &four).unwrap()), 0.5)?;
    ensure(loss_out(&grid(vec![0.5; 16], 4, 4), &BinaryMask::ones((4, 4))).is_err(), || {
        "loss_out accepted an all-ones target".into()
    })?;

    let (oii, li, lo) = loss_oii(&grid(h, 4, 4), &four, 2).unwrap();
    check("oii perfect", val(&oii), 0.0)?;
    check("oii components", val(&oii), val(&li) + val(&lo))?;
    let (oii, li, lo) = loss_oii(&grid(vec![0.3; 16], 4, 4), &four, 3).unwrap();
    check("oii uniform", val(&oii), 1.0)?;
    check("oii uniform components", val(&oii), val(&li) + val(&lo))?;

    let e = [0, 1, 2];
    ensure(rat_align(&e, 5).unwrap() == vec![0, 1, 2, 0, 1], || "rat 5".into())?;
    ensure(rat_align(&e, 2).unwrap() == vec![0, 1], || "rat 2".into())?;
    ensure(rat_align(&e, 3).unwrap() == vec![0, 1, 2], || "rat 3".into())?;
    ensure(rat_align::<i32>(&[], 3).is_err(), || "rat on empty edge".into())?;

    let updated = fmap(vec![2.0, 5.0, 2.0, 5.0], 2, 1, 2);
    let original = fmap(vec![9.0, 1.0, 9.0, 0.0], 2, 1, 2);
    let source = cells((1, 2), &[(0, 0)]);
    let edge = cells((1, 2), &[(0, 1)]);
    check("sai 1.5", val(&loss_sai(&updated, &original, &source, &edge).unwrap()), 1.5)?;
    check(
        "sai empty source",
        val(&loss_sai(&updated, &original, &BinaryMask::zeros((1, 2)), &edge).unwrap()),
        0.0,
    )?;
    let aligned = fmap(vec![1.0, 1.0, 0.0, 0.0], 2, 1, 2);
    check("sai minimum", val(&loss_sai(&aligned, &aligned, &source, &edge).unwrap()), 0.0)?;

    let a = fmap(vec![1.0, 1.0], 2, 1, 1);
    let b = fmap(vec![0.0, 3.0], 2, 1, 1);
    let one = BinaryMask::ones((1, 1));
    check("bg 1.5", val(&loss_bg(&a, &b, &one).unwrap()), 1.5)?;
    check("bg identity", val(&loss_bg(&a, &a, &one).unwrap()), 0.0)?;
    check("bg empty", val(&loss_bg(&a, &b, &BinaryMask::zeros((1, 1))).unwrap()), 0.0)?;

    let w = LossWeights::default();
    check("total zero", LossBreakdown::from_components(0.0, 0.0, 0.0, 0.0, &w).l_total, 0.0)?;
    let total = LossBreakdown::from_components(0.6, 0.4, 2.0, 4.0, &w).l_total;
    check("total 2.0", total, 2.0)?;
    let doubled = LossWeights::new(2.0 * w.lambda_oii, 2.0 * w.lambda_sai, 2.0 * w.lambda_bg).unwrap();
    check("doubled", LossBreakdown::from_components(0.6, 0.4, 2.0, 4.0, &doubled).l_total, 2.0 * total)?;

    let s = UpdateSchedule::new(150.0, 50, 35, 50).unwrap();
    check("alpha 0", step_size(0, &s).unwrap(), 150.0)?;
    check("alpha 25", step_size(25, &s).unwrap(), 75.0)?;
    check("alpha 49", step_size(49, &s).unwrap(), 3.0)?;
    ensure(step_size(50, &s).is_err(), || "step_size accepted i = I".into())?;

    let z = LatentTensor::new(Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.25], (1, 2, 2), &Device::Cpu).unwrap(), 681);
    let same = latent_gradient_step(&z, &z.data.zeros_like().unwrap(), 3.0).unwrap();
    check("zero gradient", (&same.data - &z.data).unwrap().abs().unwrap().max_all().map(|t| val(&t)).unwrap(), 0.0)?;
    let zero = latent_gradient_step(&z, &(&z.data / 3.0).unwrap(), 3.0).unwrap();
    check("z/alpha gradient", zero.data.abs().unwrap().max_all().map(|t| val(&t)).unwrap(), 0.0)?;
    ensure(zero.step_tag == 681, || "step tag".into())?;

    // descent on the toy backbone with a small step
    let cfg = toy_config(serde_json::json!({}));
    let mut bb = toy(&cfg);
    let req = request(TARGET);
    let z = bb.encode_image(&req.image).unwrap();
    let t = bb.schedule().inversion_timesteps()[cfg.objective.update_step_index - 1];
    let update = LatentUpdate::prepare(&mut bb, &req, &cfg, &z, t).unwrap();
    let (before, grad) = update.gradient(&mut bb, &z.data, LossTerm::Total).unwrap();
    let stepped = latent_gradient_step(&z, &grad, 1e-2).unwrap();
    let after = update.losses(&mut bb, &stepped.data).unwrap();
    ensure(after.breakdown.l_total < before.breakdown.l_total, || {
        format!("no descent: {} -> {}", before.breakdown.l_total, after.breakdown.l_total)
    })?;
    n += 1;
    Ok(format!("{n} examples within {tol:e}"))
}

fn gradient_oracle() -> Check {
    let eps = 1e-3;
    let cfg = toy_config(serde_json::json!({"objective": {"iterations": 0}}));
    let req = request(TARGET);
    let mut bb = toy(&cfg);
    let trace = invert(&req, &cfg, &mut bb).map_err(|e| e.to_string())?;
    let idx = cfg.objective.update_step_index - 1;
    let t = bb.schedule().inversion_timesteps()[idx];
    let z0 = trace.latents[idx].clone();
    let update = LatentUpdate::prepare(&mut bb, &req, &cfg, &z0, t).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = z0.data.dims().to_vec();
    let mut z: Vec<f64> = z0.data.flatten_all().unwrap().to_vec1().unwrap();
    for v in z.iter_mut() {
        *v += 0.5 * rng.sample::<f64, _>(StandardNormal);
    }
    let coords: Vec<usize> = (0..20).map(|_| rng.random_range(0..z.len())).collect();
    let tensor = |v: &[f64]| Tensor::from_vec(v.to_vec(), shape.as_slice(), &Device::Cpu).unwrap();
    let mut worst = 0.0f64;
    let mut report = Vec::new();
    for term in LossTerm::ALL {
        let (_, grad) = update.gradient(&mut bb, &tensor(&z), term).map_err(|e| e.to_string())?;
        let grad: Vec<f64> = grad.flatten_all().unwrap().to_vec1().unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for &i in &coords {
            let mut p = z.clone();
            p[i] += eps;
            let mut m = z.clone();
            m[i] -= eps;
            let fp = val(update.losses(&mut bb, &tensor(&p)).unwrap().get(term));
            let fm = val(update.losses(&mut bb, &tensor(&m)).unwrap().get(term));
            let fd = (fp - fm) / (2.0 * eps);
            num += (fd - grad[i]).powi(2);
            den += fd.powi(2).max(grad[i].powi(2));
        }
        let rel = (num / den).sqrt();
        worst = worst.max(rel);
        report.push(format!("{term:?} {rel:.1e}"));
    }
    ensure(worst < 1e-3, || format!("relative error {worst:e}: {}", report.join(", ")))?;
    Ok(format!("eps 1e-3, 20 coordinates, relative error < 1e-3 ({})", report.join(", ")))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_vec((h, w), (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap()
}

fn mask_algebra() -> Check {
    let cases = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..cases {
        let m = random_mask(&mut rng, 8, 8, 0.3);
        let k = 2 * rng.random_range(1..4usize) + 1;
        let d = dilate(&m, k).unwrap();
        ensure(m.is_subset_of(&d) && d.is_subset_of(&dilate(&m, k + 2).unwrap()), || "dilation monotonicity".into())?;
    }
    for _ in 0..cases {
        let values: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let heat = TokenHeatmap::from_values(&values, (8, 8)).unwrap();
        let x0 = rng.random_range(0.0..0.9);
        let y0 = rng.random_range(0.0..0.9);
        let b = BoundingBox::new(x0, y0, rng.random_range(x0 + 0.05..=1.0), rng.random_range(y0 + 0.05..=1.0)).unwrap();
        let params = RegionParams {
            threshold: rng.random_range(0.1..0.9),
            dilate_kernel: 3,
        };
        let masks = build_region_masks(&heat, &b, &params).unwrap();
        for i in 0..64 {
            let labels = [masks.target.as_slice()[i], masks.source.as_slice()[i], masks.background.as_slice()[i]];
            ensure(labels.iter().filter(|x| **x).count() == 1, || format!("cell {i} not covered exactly once"))?;
        }
    }
    for _ in 0..cases {
        let m = random_mask(&mut rng, 8, 8, 0.3);
        let ring = edge_ring(&m, 3).unwrap();
        ensure(ring.is_disjoint(&m), || "edge ring overlaps its source".into())?;
    }
    for _ in 0..cases {
        let m = random_mask(&mut rng, 8, 8, 0.5);
        let f = rng.random_range(2..5usize);
        let up = resample_mask(&m, (8 * f, 8 * f)).unwrap();
        ensure(resample_mask(&up, (8, 8)).unwrap() == m, || "resample round trip".into())?;
    }
    Ok(format!("{cases} cases for each of 4 properties"))
}

fn optimization_sanity() -> Check {
    let cfg = toy_config(serde_json::json!({"objective": {"iterations": 10}}));
    let trace = invert(&request(TARGET), &cfg, &mut toy(&cfg)).map_err(|e| e.to_string())?;
    let log = &trace.loss_log;
    let (first, last) = (log[0].losses.l_total, log[log.len() - 1].losses.l_total);
    let l_in: Vec<f64> = log.iter().take(5).map(|r| r.losses.l_in).collect();
    ensure(last <= 0.5 * first, || format!("l_total {first:.4} -> {last:.4}"))?;
    ensure(l_in.windows(2).all(|w| w[1] < w[0]), || format!("l_in not strictly decreasing: {l_in:?}"))?;
    Ok(format!(
        "alpha0 {}, l_total {first:.4} -> {last:.4} (ratio {:.3}); l_in {:?}",
        cfg.objective.alpha0,
        last / first,
        l_in.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
    ))
}

fn accounting() -> Check {
    let iterations = 10;
    let cfg = toy_config(serde_json::json!({"objective": {"iterations": iterations}}));
    let mut bb = toy(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let r = run_edit(&request(TARGET), &cfg, &mut bb, dir.path()).map_err(|e| e.to_string())?;
    let layers = bb.capabilities().self_attention.decoder.len();
    let calls = 2 * 50 * 2 + iterations + 1;
    let replaced = (50 - 7) * layers * 2;
    ensure(r.denoiser_calls == calls, || format!("{} denoiser calls, want {calls}", r.denoiser_calls))?;
    ensure(r.replaced_call_count == replaced, || format!("{} replaced, want {replaced}", r.replaced_call_count))?;
    ensure(r.cache_misses == 0, || format!("{} cache misses", r.cache_misses))?;
    Ok(format!("{calls} denoiser calls, {replaced} replaced (|L| = {layers}), 0 misses"))
}

fn reconstruction_error(steps: usize) -> f64 {
    let cfg = toy_config(serde_json::json!({
        "backbone": {"num_steps": steps},
        "objective": {"iterations": 0, "update_step_index": 1},
        "edit": {"S": 0, "replace_kv": true},
    }));
    let image = common::scene();
    let req = EditRequest::new(image.clone(), "A photo of cat", "A photo of cat", "cat", bbox(TARGET));
    let mut bb = toy(&cfg);
    let trace = invert(&req, &cfg, &mut bb).unwrap();
    edit(&trace, &req, &cfg, &mut bb).unwrap().edited_image.relative_l2(&image).unwrap()
}

fn reconstruction() -> Check {
    let (e10, e50) = (reconstruction_error(10), reconstruction_error(50));
    ensure(e50 <= 0.10, || format!("50-step relative L2 {e50:.4} > 0.10"))?;
    ensure(e50 < e10, || format!("50-step {e50:.4} not below 10-step {e10:.4}"))?;
    Ok(format!("relative L2 50 steps {e50:.4} <= 0.10, 10 steps {e10:.4}"))
}

fn edit_in_place() -> Check {
    let probe_cfg = toy_config(serde_json::json!({"objective": {"iterations": 0}}));
    let trace = invert(&request(TARGET), &probe_cfg, &mut toy(&probe_cfg)).map_err(|e| e.to_string())?;
    let raw = threshold_source_mask(&trace.heatmap_at_update, probe_cfg.regions.threshold).unwrap();
    let b = BoundingBox::enclosing(&raw).ok_or("empty thresholded source")?;
    let cfg = toy_config(serde_json::json!({"objective": {"iterations": 10}}));
    let req = EditRequest::new(common::scene(), "A photo of cat", "A running cat", "cat", b);
    let trace = invert(&req, &cfg, &mut toy(&cfg)).map_err(|e| e.to_string())?;
    ensure(trace.masks.source.is_empty(), || "source mask not empty".into())?;
    ensure(trace.loss_log.iter().all(|r| r.losses.l_sai == 0.0), || "l_sai nonzero".into())?;
    Ok(format!("box {b}, source empty, l_sai = 0 in all {} rows", trace.loss_log.len()))
}

fn metric_correctness() -> Check {
    let gt = bbox([0.2, 0.2, 0.6, 0.6]);
    let det = |b: BoundingBox, c: f64| Detection {
        bbox: b,
        class: "cat".into(),
        confidence: c,
    };
    let item = |p: Vec<Detection>| ApItem {
        predictions: p,
        ground_truth: gt,
        class: "cat".into(),
    };
    let hit = bbox([0.2, 0.2, 0.6, 0.44]);
    ensure((hit.iou(&gt) - 0.6).abs() < 1e-9, || "hit box IoU".into())?;
    let perfect = ap50(&[item(vec![det(gt, 0.9)]), item(vec![det(gt, 0.8)])]).unwrap();
    let none = ap50(&[item(vec![]), item(vec![])]).unwrap();
    let half = ap50(&[item(vec![det(hit, 0.9)]), item(vec![det(bbox([0.7, 0.7, 0.9, 0.9]), 0.5)])]).unwrap();
    ensure(perfect == 100.0 && none == 0.0 && half == 50.0, || format!("AP50 {perfect} / {none} / {half}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let per_item: Vec<ItemMetrics> = (0..25)
        .map(|i| ItemMetrics {
            id: format!("item{i}"),
            clip: Some(rng.random::<f64>()),
            detected_box: Some(gt),
            iou: Some(1.0),
            detections: vec![det(if rng.random_bool(0.5) { gt } else { bbox([0.7, 0.7, 0.9, 0.9]) }, rng.random())],
            run_id: None,
            error: None,
            ground_truth: gt,
            class: "cat".into(),
        })
        .collect();
    let report = MetricReport::from_items(per_item, Some("probe".into()), Some("probe".into())).unwrap();
    let stored: MetricReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    stored.verify().map_err(|e| e.to_string())?;
    let mean = stored.per_item.iter().filter_map(|i| i.clip).sum::<f64>() / stored.n as f64;
    close("stored CLIP mean", stored.clip_score_mean.unwrap_or(f64::NAN), mean, 1e-12)?;
    Ok("AP50 100 / 0 / 50 exact; report means recompute exactly".into())
}

fn cli(args: &[&str], cwd: &Path) -> (Option<i32>, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_moveact"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MOVEACT_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (
        out.status.code(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

async fn send(app: &axum::Router, req: Request<Body>) -> StatusCode {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let _ = resp.into_body().collect().await;
    status
}

fn post(png: &[u8], json: &str) -> Request<Body> {
    Request::post("/jobs")
        .header("content-type", format!("multipart/form-data; boundary={}", common::BOUNDARY))
        .body(Body::from(common::multipart(Some(png), Some(json))))
        .unwrap()
}

fn interface_contract() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    common::write_scene(cwd);
    let edit = |object: &str, bbox: &str| {
        let mut a = vec![
            "edit", "--backbone", "toy", "--image", "scene.png", "--inv-prompt", "A photo of cat", "--edit-prompt",
            "A running cat", "--bbox", bbox, "--out", "runs",
        ];
        if !object.is_empty() {
            a.extend(["--object", object]);
        }
        a.into_iter().map(String::from).collect::<Vec<_>>()
    };
    let run = |a: Vec<String>| cli(&a.iter().map(String::as_str).collect::<Vec<_>>(), cwd);

    let start = Instant::now();
    let (code, stdout, stderr) = run(edit("cat", "0.5,0.5,0.875,0.875"));
    let edit_time = start.elapsed();
    ensure(code == Some(0), || format!("toy edit exit {code:?}: {stderr}"))?;
    ensure(cwd.join(stdout.trim()).join("edited.png").is_file(), || "no edited.png".into())?;
    ensure(edit_time < Duration::from_secs(60), || format!("toy edit took {edit_time:?}"))?;

    let (code, _, stderr) = run(edit("", "0.1,0.1,0.5,0.5"));
    ensure(code == Some(2) && stderr.contains("Usage"), || format!("missing --object: exit {code:?}"))?;
    let (code, _, _) = run(edit("cat", "0.5,0.1,0.4,0.5"));
    ensure(code == Some(2), || format!("bad bbox: exit {code:?}"))?;
    let (code, _, _) = run(edit("dog", "0.1,0.1,0.5,0.5"));
    ensure(code == Some(2), || format!("object not in prompt: exit {code:?}"))?;
    let mut real = edit("cat", "0.1,0.1,0.5,0.5");
    real[2] = "real".into();
    let (code, _, _) = run(real);
    ensure(code == Some(1), || format!("unavailable backbone: exit {code:?}"))?;
    let (code, _, _) = cli(&["ablate", "--dataset", "d.jsonl", "--out", "o", "--kind", "shape", "--values", "1"], cwd);
    ensure(code == Some(2), || format!("unknown kind: exit {code:?}"))?;
    std::fs::write(cwd.join("bad.jsonl"), "{not json}\n").unwrap();
    let (code, _, _) = cli(&["eval", "--dataset", "bad.jsonl", "--out", "o", "--backbone", "toy"], cwd);
    ensure(code == Some(2), || format!("dataset schema error: exit {code:?}"))?;

    let config = {
        let mut c = toy_config(serde_json::json!({"objective": {"iterations": 2}}));
        c.service.artifact_root = cwd.join("service");
        c
    };
    let store = JobStore::open(&config.service.artifact_root).unwrap();
    let app = router(AppState {
        store: store.clone(),
        config: Arc::new(config.clone()),
    });
    let png = common::scene().encode_png().unwrap();
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    rt.block_on(async {
        let ok = common::request_json("A photo of cat", "A running cat", "cat", [0.0, 0.0, 1.0, 1.0]);
        let status = send(&app, post(&png, &ok)).await;
        ensure(status == StatusCode::ACCEPTED, || format!("valid POST: {status}"))?;
        let id = store.list()[0].id.clone();
        let status = send(&app, Request::get(format!("/jobs/{id}/artifacts/edited.png")).body(Body::empty()).unwrap()).await;
        ensure(status == StatusCode::CONFLICT, || format!("artifact before done: {status}"))?;
        let bad = common::request_json("A photo of a dog", "A running cat", "cat", [0.1, 0.1, 0.5, 0.5]);
        let status = send(&app, post(&png, &bad)).await;
        ensure(status == StatusCode::BAD_REQUEST, || format!("object word absent: {status}"))?;
        let out_of_range = common::request_json("A photo of cat", "A running cat", "cat", [0.1, 0.1, 1.2, 0.5]);
        let status = send(&app, post(&png, &out_of_range)).await;
        ensure(status == StatusCode::BAD_REQUEST, || format!("bbox out of range: {status}"))?;
        let status = send(&app, Request::get("/jobs/nope").body(Body::empty()).unwrap()).await;
        ensure(status == StatusCode::NOT_FOUND, || format!("unknown job: {status}"))?;

        let mut session = toy(&config);
        store.drain(&config, &mut session);
        let job = store.get(&id).unwrap();
        ensure(job.state == JobState::Done, || format!("job ended {:?}: {:?}", job.state, job.error))?;
        let status = send(&app, Request::get(format!("/jobs/{id}/artifacts/edited.png")).body(Body::empty()).unwrap()).await;
        ensure(status == StatusCode::OK, || format!("artifact after done: {status}"))?;
        let status = send(&app, Request::get(format!("/jobs/{id}/artifacts/missing.png")).body(Body::empty()).unwrap()).await;
        ensure(status == StatusCode::NOT_FOUND, || format!("unknown artifact: {status}"))?;
        for path in ["/presets", "/healthz"] {
            let status = send(&app, Request::get(path).body(Body::empty()).unwrap()).await;
            ensure(status == StatusCode::OK, || format!("{path}: {status}"))?;
        }
        Ok::<(), String>(())
    })?;
    Ok(format!("CLI exit codes 0/1/2 and HTTP 202/400/404/409/200 as specified; toy CLI edit {:.1} s < 60 s", edit_time.as_secs_f64()))
}

fn main() {
    let criteria: Vec<(&str, Duration, fn() -> Check)> = vec![
        ("Loss exactness", Duration::from_secs(1), loss_exactness),
        ("Gradient oracle", Duration::from_secs(120), gradient_oracle),
        ("Mask algebra", Duration::from_secs(30), mask_algebra),
        ("Optimization sanity", Duration::from_secs(180), optimization_sanity),
        ("Two-branch accounting", Duration::from_secs(120), accounting),
        ("Reconstruction property", Duration::from_secs(600), reconstruction),
        ("Edit-in-place reduction", Duration::from_secs(600), edit_in_place),
        ("Metric correctness", Duration::from_secs(600), metric_correctness),
        ("Interface contract", Duration::from_secs(600), interface_contract),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed <= budget {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}"))
            }
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{:.2} s]", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{:.2} s]", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
