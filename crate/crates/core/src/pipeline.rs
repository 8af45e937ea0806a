//! Inversion branch with the latent update, editing branch with key/value
//! replacement, and the on-disk run bundle.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::{
    aggregate_token_map, record_inversion_kv, GuidanceBranch, InversionKvInjector, KvCache,
    ReplacementPolicy, TokenHeatmap,
};
use crate::backbone::{
    guided_noise, prompt_contains_word, Backbone, FeatureMap, Instrumentation, LatentTensor, LayerId,
    PromptEncoding,
};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::{save_gray_png, RgbImage};
use crate::objective::{
    default_k, latent_gradient_step, loss_inv, step_size, write_loss_log, LossBreakdown, LossInputs,
    LossLogRow, LossTerm, LossTerms, LossWeights, UpdateSchedule,
};
use crate::regions::{build_region_masks, BoundingBox, RegionMasks};

/// Request fields that travel as JSON (everything except the image).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequestFields {
    pub inversion_prompt: String,
    pub editing_prompt: String,
    pub object_word: String,
    pub target_box: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<Value>,
    #[serde(default)]
    pub seed: u64,
}

impl EditRequestFields {
    pub fn validate(&self) -> Result<()> {
        if self.inversion_prompt.trim().is_empty() {
            return Err(Error::invalid("inversion_prompt", "must not be empty"));
        }
        if self.editing_prompt.trim().is_empty() {
            return Err(Error::invalid("editing_prompt", "must not be empty"));
        }
        if self.object_word.trim().is_empty() {
            return Err(Error::invalid("object_word", "must not be empty"));
        }
        if !prompt_contains_word(&self.inversion_prompt, &self.object_word) {
            return Err(Error::invalid(
                "object_word",
                format!(
                    "`{}` does not occur in the inversion prompt `{}`",
                    self.object_word, self.inversion_prompt
                ),
            ));
        }
        BoundingBox::new(
            self.target_box.x0,
            self.target_box.y0,
            self.target_box.x1,
            self.target_box.y1,
        )?;
        if let Some(o) = &self.overrides {
            if !o.is_object() {
                return Err(Error::invalid("overrides", "must be a JSON object"));
            }
        }
        Ok(())
    }

    /// `base` with the request overrides applied.
    pub fn resolve_config(&self, base: &Config) -> Result<Config> {
        match &self.overrides {
            Some(o) => base.with_overlay(o),
            None => Ok(base.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub image: RgbImage,
    pub fields: EditRequestFields,
}

impl EditRequest {
    pub fn new(
        image: RgbImage,
        inversion_prompt: impl Into<String>,
        editing_prompt: impl Into<String>,
        object_word: impl Into<String>,
        target_box: BoundingBox,
    ) -> Self {
        Self {
            image,
            fields: EditRequestFields {
                inversion_prompt: inversion_prompt.into(),
                editing_prompt: editing_prompt.into(),
                object_word: object_word.into(),
                target_box,
                overrides: None,
                seed: 0,
            },
        }
    }

    pub fn with_overrides(mut self, overrides: Value) -> Self {
        self.fields.overrides = Some(overrides);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.fields.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.width() == 0 || self.image.height() == 0 {
            return Err(Error::invalid("image", "must not be empty"));
        }
        self.fields.validate()
    }
}

/// Output of the inversion branch.
#[derive(Debug)]
pub struct InversionTrace {
    /// `z_0 … z_T`.
    pub latents: Vec<LatentTensor>,
    /// Frozen.
    pub kv_cache: KvCache,
    pub recorded_layers: Vec<LayerId>,
    pub heatmap_at_update: TokenHeatmap,
    /// At attention resolution.
    pub masks: RegionMasks,
    pub loss_log: Vec<LossLogRow>,
    /// 1-based inversion step at which the update block ran.
    pub update_step: usize,
    /// Instrumented calls made by the update block (mask building plus one per iteration).
    pub update_calls: usize,
    /// Input image at the backbone's native size.
    pub input_image: RgbImage,
}

impl InversionTrace {
    /// Checks length, freeze state and cache coverage.
    pub fn check(&self, backbone: &dyn Backbone) -> Result<()> {
        let steps = backbone.schedule().inversion_timesteps();
        if self.latents.len() != steps.len() + 1 {
            return Err(Error::invalid(
                "trace",
                format!("{} latents for {} steps", self.latents.len(), steps.len()),
            ));
        }
        if !self.kv_cache.is_frozen() {
            return Err(Error::KvCache("trace cache is not frozen".into()));
        }
        for &t in steps {
            for branch in [GuidanceBranch::Cond, GuidanceBranch::Uncond] {
                for layer in &self.recorded_layers {
                    if self.kv_cache.get(t, layer, branch).is_none() {
                        return Err(Error::ScheduleMismatch {
                            timestep: t,
                            layer: layer.to_string(),
                            branch: branch.to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Output of the editing branch.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub edited_image: RgbImage,
    pub final_latent: LatentTensor,
    pub replaced_call_count: usize,
    pub cache_misses: usize,
}

/// Metadata written to `result.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditResult {
    pub run_id: String,
    /// Run directory.
    pub trace_ref: PathBuf,
    pub replaced_call_count: usize,
    pub cache_misses: usize,
    pub denoiser_calls: usize,
    pub update_step: usize,
    pub iterations: usize,
    pub initial_loss: Option<LossBreakdown>,
    pub final_loss: Option<LossBreakdown>,
    pub request: EditRequestFields,
    pub config_snapshot: Config,
    pub artifacts: BTreeMap<String, PathBuf>,
    #[serde(skip)]
    pub edited_image: Option<RgbImage>,
}

/// Names of the files in a run bundle, relative to the run directory.
pub const BUNDLE_FILES: [&str; 11] = [
    "input.png",
    "edited.png",
    "masks/target.png",
    "masks/source.png",
    "masks/edge.png",
    "masks/background.png",
    "heatmap.png",
    "loss_log.csv",
    "config.json",
    "trace.kv",
    "result.json",
];

fn cfg_noise(
    backbone: &mut dyn Backbone,
    cond: &PromptEncoding,
    uncond: &PromptEncoding,
    scale: f64,
    mut per_branch: impl FnMut(GuidanceBranch, &mut dyn Backbone, &PromptEncoding) -> Result<Tensor>,
) -> Result<Tensor> {
    let u = per_branch(GuidanceBranch::Uncond, backbone, uncond)?;
    let c = per_branch(GuidanceBranch::Cond, backbone, cond)?;
    guided_noise(&u, &c, scale)
}

/// Prepares the backbone for `config` (step count).
fn prepare(backbone: &mut dyn Backbone, config: &Config) -> Result<()> {
    if backbone.schedule().num_steps() != config.backbone.num_steps {
        backbone.set_num_steps(config.backbone.num_steps)?;
    }
    Ok(())
}

/// One instrumented call recording the object heatmap and semantic features.
struct Probe {
    cond: PromptEncoding,
    object_tokens: Vec<usize>,
    timestep: u32,
    semantic_res: (usize, usize),
    tap: String,
}

impl Probe {
    fn observe(&self, backbone: &mut dyn Backbone, z: &Tensor) -> Result<(TokenHeatmap, FeatureMap)> {
        let mut inst = Instrumentation {
            cross_attention_at: Some(self.semantic_res),
            feature_taps: vec![self.tap.clone()],
            ..Instrumentation::none()
        };
        let out = backbone.denoise(z, self.timestep, &self.cond, &mut inst)?;
        let record = out
            .attention
            .ok_or_else(|| Error::invalid("backbone", "no attention record returned"))?;
        let heatmap = aggregate_token_map(&record, &self.object_tokens, self.semantic_res)?;
        let features = out
            .feature_taps
            .get(&self.tap)
            .cloned()
            .ok_or_else(|| Error::UnknownLayer(self.tap.clone()))?;
        Ok((heatmap, features))
    }
}

/// The latent-update problem at one inversion timestep.
///
/// Built by one instrumented call on the pre-update latent, which fixes the
/// region masks and the original features; every later evaluation re-records
/// the object heatmap and features of the current latent.
pub struct LatentUpdate {
    probe: Probe,
    pub heatmap: TokenHeatmap,
    /// At attention resolution.
    pub masks: RegionMasks,
    /// At feature resolution.
    pub feature_masks: RegionMasks,
    pub features_original: FeatureMap,
    pub k: usize,
    pub weights: LossWeights,
}

impl LatentUpdate {
    /// Makes the mask-building call on `z` at timestep `t`.
    pub fn prepare(
        backbone: &mut dyn Backbone,
        request: &EditRequest,
        config: &Config,
        z: &LatentTensor,
        t: u32,
    ) -> Result<Self> {
        let caps = backbone.capabilities();
        let cond = backbone.encode_prompt(&request.fields.inversion_prompt)?;
        let object_tokens = cond.word_tokens(&request.fields.object_word)?.to_vec();
        let tap = caps.semantic_feature_tap.clone();
        let feature_res = caps
            .feature_resolution(&tap)
            .ok_or_else(|| Error::UnknownLayer(tap.clone()))?;
        let probe = Probe {
            cond,
            object_tokens,
            timestep: t,
            semantic_res: caps.semantic_resolution,
            tap,
        };
        let (heatmap, features) = probe.observe(backbone, &z.data.detach())?;
        let masks = build_region_masks(&heatmap, &request.fields.target_box, &config.regions)?;
        let k = config
            .objective
            .k
            .unwrap_or_else(|| default_k(masks.target.count()));
        if k > masks.target.count() {
            return Err(Error::invalid(
                "objective.k",
                format!("k = {k} exceeds the {} target cells", masks.target.count()),
            ));
        }
        Ok(Self {
            probe,
            feature_masks: masks.resample(feature_res)?,
            heatmap,
            masks,
            features_original: FeatureMap {
                data: features.data.detach(),
                layer_name: features.layer_name,
            },
            k,
            weights: LossWeights::from_config(&config.objective)?,
        })
    }

    pub fn timestep(&self) -> u32 {
        self.probe.timestep
    }

    /// All loss terms at `z` (one instrumented denoiser call).
    pub fn losses(&self, backbone: &mut dyn Backbone, z: &Tensor) -> Result<LossTerms> {
        let (heat, feat) = self.probe.observe(backbone, z)?;
        let inputs = LossInputs {
            heatmap_raw: &heat.raw,
            masks: &self.masks,
            feature_masks: &self.feature_masks,
            k: self.k,
            feat_updated: &feat,
            feat_original: &self.features_original,
        };
        loss_inv(&inputs, &self.weights)
    }

    /// Value and latent gradient of one term at `z`.
    pub fn gradient(&self, backbone: &mut dyn Backbone, z: &Tensor, term: LossTerm) -> Result<(LossTerms, Tensor)> {
        let var = Var::from_tensor(&z.detach())?;
        let terms = self.losses(backbone, var.as_tensor())?;
        let grads = terms.get(term).backward()?;
        let grad = match grads.get(var.as_tensor()) {
            Some(g) => g.clone(),
            None => var.as_tensor().zeros_like()?,
        };
        Ok((terms, grad))
    }

    /// The gradient loop. Returns the updated latent and one log row per iteration.
    pub fn optimize(
        &self,
        backbone: &mut dyn Backbone,
        z: &LatentTensor,
        schedule: &UpdateSchedule,
    ) -> Result<(LatentTensor, Vec<LossLogRow>)> {
        let mut current = z.clone();
        let mut log = Vec::with_capacity(schedule.iterations);
        for i in 0..schedule.iterations {
            let (terms, grad) = self.gradient(backbone, &current.data, LossTerm::Total)?;
            let alpha = step_size(i, schedule)?;
            current = latent_gradient_step(&current, &grad, alpha).map_err(|e| match e {
                Error::NonFiniteGradient { detail, .. } => Error::NonFiniteGradient { iteration: i, detail },
                other => other,
            })?;
            log::debug!("update iteration {i}: l_total {:.6} alpha {alpha}", terms.breakdown.l_total);
            log.push(LossLogRow {
                iteration: i,
                losses: terms.breakdown,
                alpha_i: alpha,
            });
        }
        Ok((current, log))
    }
}

/// Runs the update block on `z` at timestep `t`.
fn update_latent(
    backbone: &mut dyn Backbone,
    request: &EditRequest,
    config: &Config,
    z: &LatentTensor,
    t: u32,
) -> Result<(LatentTensor, LatentUpdate, Vec<LossLogRow>)> {
    let problem = LatentUpdate::prepare(backbone, request, config, z, t)?;
    let obj = &config.objective;
    if obj.iterations == 0 {
        return Ok((z.clone(), problem, Vec::new()));
    }
    let schedule = UpdateSchedule::new(
        obj.alpha0,
        obj.iterations,
        obj.update_step_index,
        config.backbone.num_steps,
    )?;
    let (updated, log) = problem.optimize(backbone, z, &schedule)?;
    Ok((updated, problem, log))
}

/// DDIM inversion under the inversion prompt with the latent update at the
/// configured step and key/value recording at every step.
pub fn invert(request: &EditRequest, config: &Config, backbone: &mut dyn Backbone) -> Result<InversionTrace> {
    request.validate()?;
    config.validate()?;
    prepare(backbone, config)?;
    let caps = backbone.capabilities();
    let input_image = if request.image.width() == caps.image_size && request.image.height() == caps.image_size {
        request.image.clone()
    } else {
        request.image.resized_square(caps.image_size)
    };
    let cond = backbone.encode_prompt(&request.fields.inversion_prompt)?;
    let uncond = backbone.encode_prompt("")?;
    cond.word_tokens(&request.fields.object_word)?;
    let layers = config.edit.layer_set.resolve(&caps.self_attention);
    let timesteps = backbone.schedule().inversion_timesteps().to_vec();
    let update_step = config.objective.update_step_index;
    let scale = config.backbone.inversion_guidance_scale;

    let mut z = backbone.encode_image(&input_image)?;
    let mut latents = vec![z.clone()];
    let mut cache = KvCache::new();
    let mut update = None;
    for (i, &t) in timesteps.iter().enumerate() {
        let step = i + 1;
        if step == update_step {
            let (updated, problem, log) = update_latent(backbone, request, config, &z, t)?;
            z = updated;
            *latents.last_mut().expect("z_0 present") = z.clone();
            let calls = log.len() + 1;
            update = Some((problem.heatmap, problem.masks, log, calls));
        }
        let eps = cfg_noise(backbone, &cond, &uncond, scale, |branch, bb, prompt| {
            let mut inst = Instrumentation {
                self_kv_layers: layers.clone(),
                ..Instrumentation::none()
            };
            let out = bb.denoise(&z.data, t, prompt, &mut inst)?;
            if let Some(record) = &out.attention {
                record_inversion_kv(record, t, branch, &mut cache)?;
            }
            Ok(out.noise_prediction)
        })?;
        z = LatentTensor::new(backbone.schedule().inversion_step(&z.data, &eps, t)?, t);
        if !z.is_finite()? {
            return Err(Error::invalid("latent", format!("non-finite latent after inversion step {step}")));
        }
        latents.push(z.clone());
    }
    cache.freeze();
    let (heatmap_at_update, masks, loss_log, update_calls) =
        update.ok_or_else(|| Error::invalid("objective.update_step_index", "update step never reached"))?;
    let trace = InversionTrace {
        latents,
        kv_cache: cache,
        recorded_layers: layers,
        heatmap_at_update,
        masks,
        loss_log,
        update_step,
        update_calls,
        input_image,
    };
    trace.check(backbone)?;
    Ok(trace)
}

/// DDIM reverse from `z_T` under the editing prompt, attending to cached
/// inversion keys/values where the replacement policy says so.
pub fn edit(
    trace: &InversionTrace,
    request: &EditRequest,
    config: &Config,
    backbone: &mut dyn Backbone,
) -> Result<EditOutcome> {
    request.validate()?;
    prepare(backbone, config)?;
    trace.check(backbone)?;
    let caps = backbone.capabilities();
    let policy = if config.edit.replace_kv {
        ReplacementPolicy::new(
            config.edit.start_step,
            config.edit.layer_set.resolve(&caps.self_attention),
        )
    } else {
        ReplacementPolicy::disabled()
    };
    let cond = backbone.encode_prompt(&request.fields.editing_prompt)?;
    let uncond = backbone.encode_prompt("")?;
    let scale = config.backbone.guidance_scale;
    let timesteps = backbone.schedule().reverse_timesteps();
    let mut z = trace.latents.last().expect("non-empty trace").clone();
    let mut replaced = 0;
    for (j, &t) in timesteps.iter().enumerate() {
        let step = j + 1;
        let eps = cfg_noise(backbone, &cond, &uncond, scale, |branch, bb, prompt| {
            let mut injector = InversionKvInjector::new(&trace.kv_cache, &policy, t, step, branch);
            let out = {
                let mut inst = Instrumentation {
                    kv_injector: Some(&mut injector),
                    ..Instrumentation::none()
                };
                bb.denoise(&z.data, t, prompt, &mut inst)?
            };
            replaced += injector.replaced_layers().len();
            Ok(out.noise_prediction)
        })?;
        let prev_tag = timesteps.get(j + 1).copied().unwrap_or(0);
        z = LatentTensor::new(backbone.schedule().reverse_step(&z.data, &eps, t)?, prev_tag);
    }
    let edited_image = backbone.decode_latent(&z)?;
    Ok(EditOutcome {
        edited_image,
        final_latent: z,
        replaced_call_count: replaced,
        cache_misses: 0,
    })
}

/// Fresh run identifier.
pub fn new_run_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

/// Inversion, editing and the run bundle under `artifact_root/<run_id>/`.
pub fn run_edit(
    request: &EditRequest,
    base_config: &Config,
    backbone: &mut dyn Backbone,
    artifact_root: &Path,
) -> Result<EditResult> {
    run_edit_with_id(request, base_config, backbone, artifact_root, &new_run_id())
}

/// As [`run_edit`] with a caller-chosen run id.
pub fn run_edit_with_id(
    request: &EditRequest,
    base_config: &Config,
    backbone: &mut dyn Backbone,
    artifact_root: &Path,
    run_id: &str,
) -> Result<EditResult> {
    request.validate()?;
    let config = request.fields.resolve_config(base_config)?;
    let calls_before = backbone.call_count();
    let trace = invert(request, &config, backbone)?;
    let outcome = edit(&trace, request, &config, backbone)?;
    let denoiser_calls = backbone.call_count() - calls_before;

    let dir = artifact_root.join(run_id);
    std::fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(&dir, e))?;
    trace.input_image.save_png(&dir.join("input.png"))?;
    outcome.edited_image.save_png(&dir.join("edited.png"))?;
    trace.masks.save_pngs(&dir.join("masks"))?;
    let (hh, hw) = trace.heatmap_at_update.resolution;
    save_gray_png(&dir.join("heatmap.png"), hw, hh, &trace.heatmap_at_update.data)?;
    let log_path = dir.join("loss_log.csv");
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    write_loss_log(std::io::BufWriter::new(file), &trace.loss_log).map_err(|e| Error::io(&log_path, e))?;
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, config.to_json_pretty()).map_err(|e| Error::io(&config_path, e))?;
    trace.kv_cache.save(&dir.join("trace.kv"))?;

    let artifacts = BUNDLE_FILES
        .iter()
        .map(|name| (name.to_string(), dir.join(name)))
        .collect();
    let result = EditResult {
        run_id: run_id.to_string(),
        trace_ref: dir.clone(),
        replaced_call_count: outcome.replaced_call_count,
        cache_misses: outcome.cache_misses,
        denoiser_calls,
        update_step: trace.update_step,
        iterations: trace.loss_log.len(),
        initial_loss: trace.loss_log.first().map(|r| r.losses),
        final_loss: trace.loss_log.last().map(|r| r.losses),
        request: request.fields.clone(),
        config_snapshot: config,
        artifacts,
        edited_image: Some(outcome.edited_image),
    };
    let result_path = dir.join("result.json");
    std::fs::write(&result_path, serde_json::to_string_pretty(&result)?).map_err(|e| Error::io(&result_path, e))?;
    Ok(result)
}

/// Expected replaced self-attention calls: `(steps − S) · |L| · 2`.
pub fn expected_replaced_calls(num_steps: usize, start_step: usize, layers: usize) -> usize {
    num_steps.saturating_sub(start_step) * layers * 2
}

/// Expected denoiser calls of a full run.
pub fn expected_denoiser_calls(num_steps: usize, iterations: usize) -> usize {
    2 * num_steps * 2 + iterations + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fields() -> EditRequestFields {
        EditRequestFields {
            inversion_prompt: "A photo of cat".into(),
            editing_prompt: "A running cat".into(),
            object_word: "cat".into(),
            target_box: BoundingBox::new(0.1, 0.1, 0.5, 0.5).unwrap(),
            overrides: None,
            seed: 0,
        }
    }

    #[test]
    fn request_validation() {
        fields().validate().unwrap();
        let mut f = fields();
        f.object_word = "dog".into();
        match f.validate() {
            Err(Error::InvalidArgument { field, .. }) => assert_eq!(field, "object_word"),
            other => panic!("unexpected {other:?}"),
        }
        let mut f = fields();
        f.editing_prompt = "  ".into();
        assert!(f.validate().is_err());
        let mut f = fields();
        f.overrides = Some(Value::from(3));
        assert!(f.validate().is_err());
    }

    #[test]
    fn request_fields_json_round_trip() {
        let f = fields();
        let text = serde_json::to_string(&f).unwrap();
        assert!(text.contains("\"target_box\":[0.1,0.1,0.5,0.5]"));
        let back: EditRequestFields = serde_json::from_str(&text).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn overrides_resolve() {
        let mut f = fields();
        f.overrides = Some(serde_json::json!({"edit": {"S": 12}}));
        let c = f.resolve_config(&Config::default()).unwrap();
        assert_eq!(c.edit.start_step, 12);
        f.overrides = Some(serde_json::json!({"edit": {"S": 99}}));
        assert!(f.resolve_config(&Config::default()).is_err());
    }

    #[test]
    fn counting_formulas() {
        assert_eq!(expected_replaced_calls(50, 7, 4), 344);
        assert_eq!(expected_replaced_calls(50, 50, 4), 0);
        assert_eq!(expected_denoiser_calls(50, 50), 251);
    }
}
