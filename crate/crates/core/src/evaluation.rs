//! Condition-pair datasets, CLIP-style text-image scores, AP50 and ablation sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::LayerSet;
use crate::backbone::{normalize_word, prompt_contains_word, Backbone};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::pipeline::{run_edit, EditRequest, EditRequestFields};
use crate::regions::BoundingBox;

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const AP_IOU_THRESHOLD: f64 = 0.5;
const BOOTSTRAP_RESAMPLES: usize = 200;
const BOOTSTRAP_SEED: u64 = 0x5eed;

/// One annotated editing condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionPair {
    pub id: String,
    pub image_path: PathBuf,
    pub inversion_prompt: String,
    pub editing_prompt: String,
    pub object_word: String,
    pub action_word: String,
    pub bbox: BoundingBox,
}

#[derive(Serialize, Deserialize)]
struct DatasetRow {
    schema_version: u32,
    #[serde(flatten)]
    pair: ConditionPair,
}

impl ConditionPair {
    /// Builds a pair from the `A photo of <object>` / `A <action> <object>` templates.
    pub fn from_templates(
        id: impl Into<String>,
        image_path: impl Into<PathBuf>,
        object: &str,
        action: &str,
        bbox: BoundingBox,
    ) -> Self {
        Self {
            id: id.into(),
            image_path: image_path.into(),
            inversion_prompt: format!("A photo of {object}"),
            editing_prompt: format!("A {action} {object}"),
            object_word: object.to_string(),
            action_word: action.to_string(),
            bbox,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::invalid("id", "must not be empty"));
        }
        if self.object_word.trim().is_empty() || self.action_word.trim().is_empty() {
            return Err(Error::invalid("object_word", "object and action words must not be empty"));
        }
        if !prompt_contains_word(&self.inversion_prompt, &self.object_word) {
            return Err(Error::invalid(
                "inversion_prompt",
                format!("does not mention the object `{}`", self.object_word),
            ));
        }
        for word in [&self.object_word, &self.action_word] {
            if !prompt_contains_word(&self.editing_prompt, word) {
                return Err(Error::invalid(
                    "editing_prompt",
                    format!("does not mention `{word}`"),
                ));
            }
        }
        BoundingBox::new(self.bbox.x0, self.bbox.y0, self.bbox.x1, self.bbox.y1)?;
        Ok(())
    }

    pub fn request_fields(&self) -> EditRequestFields {
        EditRequestFields {
            inversion_prompt: self.inversion_prompt.clone(),
            editing_prompt: self.editing_prompt.clone(),
            object_word: self.object_word.clone(),
            target_box: self.bbox,
            overrides: None,
            seed: 0,
        }
    }

    pub fn to_jsonl_row(&self) -> String {
        serde_json::to_string(&DatasetRow {
            schema_version: DATASET_SCHEMA_VERSION,
            pair: self.clone(),
        })
        .expect("pair serializes")
    }
}

/// Parses dataset text; relative image paths are resolved against `base_dir`.
pub fn parse_dataset(text: &str, base_dir: Option<&Path>) -> Result<Vec<ConditionPair>> {
    let mut pairs = Vec::new();
    let mut ids = std::collections::BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Dataset {
            line: line_no,
            message,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| err(format!("invalid JSON: {e}")))?;
        match value.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == DATASET_SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(err(format!("schema_version {v} is not supported (expected {DATASET_SCHEMA_VERSION})"))),
            None => return Err(err("missing schema_version".into())),
        }
        let row: DatasetRow = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
        let mut pair = row.pair;
        pair.validate().map_err(|e| err(e.to_string()))?;
        if !ids.insert(pair.id.clone()) {
            return Err(err(format!("duplicate id `{}`", pair.id)));
        }
        if let Some(base) = base_dir {
            if pair.image_path.is_relative() {
                pair.image_path = base.join(&pair.image_path);
            }
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Reads a `dataset.jsonl` file. An empty file yields an empty list and a warning.
pub fn load_dataset(path: &Path) -> Result<Vec<ConditionPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pairs = parse_dataset(&text, path.parent())?;
    if pairs.is_empty() {
        log::warn!("dataset {} contains no condition pairs", path.display());
    }
    Ok(pairs)
}

pub fn write_dataset(path: &Path, pairs: &[ConditionPair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.to_jsonl_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Pluggable text-image similarity.
pub trait TextImageScorer {
    /// Identity recorded in every report.
    fn name(&self) -> String;
    fn score(&self, image: &RgbImage, text: &str) -> Result<f64>;
}

/// Pluggable object detector.
pub trait ObjectDetector {
    fn name(&self) -> String;
    /// Detections for `class` (other classes may be returned too).
    fn detect(&self, image: &RgbImage, class: &str) -> Result<Vec<Detection>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class: String,
    pub confidence: f64,
}

/// FNV-1a fingerprint of an image's 8-bit pixels.
pub fn image_fingerprint(image: &RgbImage) -> u64 {
    image
        .to_rgb8()
        .as_raw()
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
}

fn word_set(text: &str) -> std::collections::BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '-')
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect()
}

/// Fraction of the words of `text` that also occur in `caption`.
pub fn token_overlap(caption: &str, text: &str) -> f64 {
    let t = word_set(text);
    if t.is_empty() {
        return 0.0;
    }
    let c = word_set(caption);
    t.iter().filter(|w| c.contains(*w)).count() as f64 / t.len() as f64
}

/// Scores registered images by word overlap between their caption and the text.
#[derive(Debug, Clone, Default)]
pub struct MockScorer {
    captions: BTreeMap<u64, String>,
}

impl MockScorer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, image: &RgbImage, caption: impl Into<String>) {
        self.captions.insert(image_fingerprint(image), caption.into());
    }

    pub fn caption(&self, image: &RgbImage) -> Option<&str> {
        self.captions.get(&image_fingerprint(image)).map(String::as_str)
    }
}

impl TextImageScorer for MockScorer {
    fn name(&self) -> String {
        "mock-token-overlap".into()
    }

    fn score(&self, image: &RgbImage, text: &str) -> Result<f64> {
        let caption = self.caption(image).unwrap_or("");
        Ok(token_overlap(caption, text))
    }
}

/// Returns registered detections per image; nothing for unknown images.
#[derive(Debug, Clone, Default)]
pub struct MockDetector {
    responses: BTreeMap<u64, Vec<Detection>>,
}

impl MockDetector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, image: &RgbImage, detections: Vec<Detection>) {
        self.responses.insert(image_fingerprint(image), detections);
    }
}

impl ObjectDetector for MockDetector {
    fn name(&self) -> String {
        "mock-registry".into()
    }

    fn detect(&self, image: &RgbImage, _class: &str) -> Result<Vec<Detection>> {
        Ok(self
            .responses
            .get(&image_fingerprint(image))
            .cloned()
            .unwrap_or_default())
    }
}

/// Box around the pixels whose colour is rare in the image.
///
/// Meant for synthetic scenes with a single salient object. Colours are
/// quantised to 4 bits per channel; the detection carries the requested class.
#[derive(Debug, Clone)]
pub struct SaliencyDetector {
    /// Colours covering at most this share of the image count as salient.
    pub max_share: f64,
}

impl Default for SaliencyDetector {
    fn default() -> Self {
        Self { max_share: 0.2 }
    }
}

impl ObjectDetector for SaliencyDetector {
    fn name(&self) -> String {
        format!("saliency(max_share={})", self.max_share)
    }

    fn detect(&self, image: &RgbImage, class: &str) -> Result<Vec<Detection>> {
        let (w, h) = (image.width(), image.height());
        if w == 0 || h == 0 {
            return Ok(Vec::new());
        }
        let rgb = image.to_rgb8();
        let bin = |x: usize, y: usize| {
            let p = rgb.get_pixel(x as u32, y as u32).0;
            ((p[0] as usize >> 4) << 8) | ((p[1] as usize >> 4) << 4) | (p[2] as usize >> 4)
        };
        let mut hist = vec![0usize; 4096];
        for y in 0..h {
            for x in 0..w {
                hist[bin(x, y)] += 1;
            }
        }
        let limit = self.max_share * (w * h) as f64;
        let (mut x0, mut y0, mut x1, mut y1, mut count) = (w, h, 0, 0, 0usize);
        for y in 0..h {
            for x in 0..w {
                if hist[bin(x, y)] as f64 <= limit {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Ok(Vec::new());
        }
        let bbox = BoundingBox::new(
            x0 as f64 / w as f64,
            y0 as f64 / h as f64,
            x1 as f64 / w as f64,
            y1 as f64 / h as f64,
        )?;
        let confidence = count as f64 / ((x1 - x0) * (y1 - y0)) as f64;
        Ok(vec![Detection {
            bbox,
            class: class.to_string(),
            confidence,
        }])
    }
}

fn write_temp_png(image: &RgbImage) -> Result<tempfile::NamedTempFile> {
    let file = tempfile::Builder::new()
        .suffix(".png")
        .tempfile()
        .map_err(|e| Error::io(Path::new("<tempfile>"), e))?;
    image.save_png(file.path())?;
    Ok(file)
}

fn run_command(program: &str, args: &[String], image: &Path, text: &str) -> Result<String> {
    let out = Command::new(program)
        .args(args)
        .arg(image)
        .arg(text)
        .output()
        .map_err(|e| Error::MetricUnavailable(format!("cannot run `{program}`: {e}")))?;
    if !out.status.success() {
        return Err(Error::MetricUnavailable(format!(
            "`{program}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Runs `program [args…] <image.png> <text>`; stdout must be one number.
#[derive(Debug, Clone)]
pub struct CommandScorer {
    pub program: String,
    pub args: Vec<String>,
}

impl TextImageScorer for CommandScorer {
    fn name(&self) -> String {
        std::iter::once(self.program.as_str())
            .chain(self.args.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn score(&self, image: &RgbImage, text: &str) -> Result<f64> {
        let file = write_temp_png(image)?;
        let stdout = run_command(&self.program, &self.args, file.path(), text)?;
        stdout
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::MetricUnavailable(format!("scorer printed `{}`", stdout.trim())))
    }
}

/// Runs `program [args…] <image.png> <class>`; stdout must be a JSON array of detections.
#[derive(Debug, Clone)]
pub struct CommandDetector {
    pub program: String,
    pub args: Vec<String>,
}

impl ObjectDetector for CommandDetector {
    fn name(&self) -> String {
        std::iter::once(self.program.as_str())
            .chain(self.args.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn detect(&self, image: &RgbImage, class: &str) -> Result<Vec<Detection>> {
        let file = write_temp_png(image)?;
        let stdout = run_command(&self.program, &self.args, file.path(), class)?;
        serde_json::from_str(stdout.trim())
            .map_err(|e| Error::MetricUnavailable(format!("detector output is not a detection list: {e}")))
    }
}

/// Score of `image` against `text`; unavailable scorers surface as errors.
pub fn clip_score(image: &RgbImage, text: &str, scorer: &dyn TextImageScorer) -> Result<f64> {
    scorer.score(image, text)
}

/// Detections of one item plus its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApItem {
    pub predictions: Vec<Detection>,
    pub ground_truth: BoundingBox,
    pub class: String,
}

/// Average precision at IoU 0.5 with all-point interpolation, in `[0, 100]`.
///
/// Predictions of the item's class from all items are ranked by confidence
/// (ties keep item order); each ground truth is matched at most once.
pub fn ap50(items: &[ApItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::invalid("items", "must not be empty"));
    }
    let mut ranked: Vec<(f64, usize, &BoundingBox)> = items
        .iter()
        .enumerate()
        .flat_map(|(i, item)| {
            item.predictions
                .iter()
                .filter(move |p| normalize_word(&p.class) == normalize_word(&item.class))
                .map(move |p| (p.confidence, i, &p.bbox))
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut matched = vec![false; items.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(ranked.len());
    for (_, i, bbox) in ranked {
        if !matched[i] && bbox.iou(&items[i].ground_truth) >= AP_IOU_THRESHOLD {
            matched[i] = true;
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / items.len() as f64, tp as f64 / (tp + fp) as f64));
    }
    // precision envelope from the right
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in curve {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(100.0 * ap)
}

/// Metrics of one evaluated item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub id: String,
    pub clip: Option<f64>,
    pub detected_box: Option<BoundingBox>,
    pub iou: Option<f64>,
    #[serde(default)]
    pub detections: Vec<Detection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub ground_truth: BoundingBox,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scorer: Option<String>,
    pub detector: Option<String>,
    /// `None` when no scorer was available.
    pub clip_score_mean: Option<f64>,
    pub clip_score_stderr: Option<f64>,
    pub ap50: Option<f64>,
    pub ap50_stderr: Option<f64>,
    pub n: usize,
    pub per_item: Vec<ItemMetrics>,
}

fn mean_stderr(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Some((mean, stderr))
}

impl MetricReport {
    /// Aggregates per-item metrics. Items that failed count towards `n` but not the means.
    pub fn from_items(per_item: Vec<ItemMetrics>, scorer: Option<String>, detector: Option<String>) -> Result<Self> {
        let clips: Vec<f64> = per_item.iter().filter_map(|i| i.clip).collect();
        let clip = if scorer.is_some() { mean_stderr(&clips) } else { None };
        let ap_items: Vec<ApItem> = per_item
            .iter()
            .filter(|i| i.error.is_none())
            .map(|i| ApItem {
                predictions: i.detections.clone(),
                ground_truth: i.ground_truth,
                class: i.class.clone(),
            })
            .collect();
        let (ap, ap_se) = if detector.is_some() && !ap_items.is_empty() {
            let ap = ap50(&ap_items)?;
            (Some(ap), Some(bootstrap_stderr(&ap_items)?))
        } else {
            (None, None)
        };
        Ok(Self {
            scorer,
            detector,
            clip_score_mean: clip.map(|c| c.0),
            clip_score_stderr: clip.map(|c| c.1),
            ap50: ap,
            ap50_stderr: ap_se,
            n: per_item.len(),
            per_item,
        })
    }

    /// Recomputes every aggregate from `per_item` and compares exactly.
    pub fn verify(&self) -> Result<()> {
        if self.n != self.per_item.len() {
            return Err(Error::invalid("report", "n differs from the item count"));
        }
        let again = Self::from_items(self.per_item.clone(), self.scorer.clone(), self.detector.clone())?;
        if again != *self {
            return Err(Error::invalid("report", "aggregates do not match per-item values"));
        }
        Ok(())
    }

    pub fn failures(&self) -> usize {
        self.per_item.iter().filter(|i| i.error.is_some()).count()
    }
}

fn bootstrap_stderr(items: &[ApItem]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let mut values = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let sample: Vec<ApItem> = (0..items.len())
            .map(|_| items[rng.random_range(0..items.len())].clone())
            .collect();
        values.push(ap50(&sample)?);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Scores one edited image against its condition.
pub fn score_item(
    pair: &ConditionPair,
    edited: &RgbImage,
    scorer: Option<&dyn TextImageScorer>,
    detector: Option<&dyn ObjectDetector>,
) -> ItemMetrics {
    let mut item = ItemMetrics {
        id: pair.id.clone(),
        clip: None,
        detected_box: None,
        iou: None,
        detections: Vec::new(),
        run_id: None,
        error: None,
        ground_truth: pair.bbox,
        class: pair.object_word.clone(),
    };
    let mut errors = Vec::new();
    if let Some(s) = scorer {
        match clip_score(edited, &pair.editing_prompt, s) {
            Ok(v) => item.clip = Some(v),
            Err(e) => errors.push(format!("scorer: {e}")),
        }
    }
    if let Some(d) = detector {
        match d.detect(edited, &pair.object_word) {
            Ok(dets) => {
                let best = dets
                    .iter()
                    .filter(|p| normalize_word(&p.class) == normalize_word(&pair.object_word))
                    .max_by(|a, b| a.confidence.total_cmp(&b.confidence));
                item.detected_box = best.map(|b| b.bbox);
                item.iou = best.map(|b| b.bbox.iou(&pair.bbox));
                item.detections = dets;
            }
            Err(e) => errors.push(format!("detector: {e}")),
        }
    }
    if !errors.is_empty() {
        item.error = Some(errors.join("; "));
    }
    item
}

/// Scores pre-computed images `<images_dir>/<id>.png` (for example, outputs of another method).
pub fn evaluate_images(
    pairs: &[ConditionPair],
    images_dir: &Path,
    scorer: Option<&dyn TextImageScorer>,
    detector: Option<&dyn ObjectDetector>,
) -> Result<MetricReport> {
    let per_item = pairs
        .iter()
        .map(|pair| {
            let path = images_dir.join(format!("{}.png", pair.id));
            match RgbImage::load(&path) {
                Ok(img) => score_item(pair, &img, scorer, detector),
                Err(e) => failed_item(pair, e.to_string()),
            }
        })
        .collect();
    MetricReport::from_items(per_item, scorer.map(|s| s.name()), detector.map(|d| d.name()))
}

fn failed_item(pair: &ConditionPair, error: String) -> ItemMetrics {
    ItemMetrics {
        id: pair.id.clone(),
        clip: None,
        detected_box: None,
        iou: None,
        detections: Vec::new(),
        run_id: None,
        error: Some(error),
        ground_truth: pair.bbox,
        class: pair.object_word.clone(),
    }
}

/// Runs the pipeline on every pair and scores the edited images.
pub fn evaluate_pipeline(
    pairs: &[ConditionPair],
    config: &Config,
    backbone: &mut dyn Backbone,
    artifact_root: &Path,
    scorer: Option<&dyn TextImageScorer>,
    detector: Option<&dyn ObjectDetector>,
) -> Result<MetricReport> {
    let mut per_item = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let outcome = RgbImage::load(&pair.image_path).and_then(|image| {
            let request = EditRequest {
                image,
                fields: pair.request_fields(),
            };
            run_edit(&request, config, backbone, artifact_root)
        });
        let item = match outcome {
            Ok(result) => {
                let edited = result.edited_image.as_ref().expect("run_edit returns the image");
                let mut item = score_item(pair, edited, scorer, detector);
                item.run_id = Some(result.run_id.clone());
                item
            }
            Err(e) => {
                log::warn!("item {} failed: {e}", pair.id);
                failed_item(pair, e.to_string())
            }
        };
        per_item.push(item);
    }
    MetricReport::from_items(per_item, scorer.map(|s| s.name()), detector.map(|d| d.name()))
}

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    UpdateStep,
    Iterations,
    StartS,
    LayerSet,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::UpdateStep => "update_step",
            AblationKind::Iterations => "iterations",
            AblationKind::StartS => "start_S",
            AblationKind::LayerSet => "layer_set",
        }
    }

    /// The default setting for this knob.
    pub fn default_value(self) -> &'static str {
        match self {
            AblationKind::UpdateStep => "35",
            AblationKind::Iterations => "50",
            AblationKind::StartS => "7",
            AblationKind::LayerSet => "decoder",
        }
    }

    /// Values of the standard sweep.
    pub fn standard_values(self) -> &'static [&'static str] {
        match self {
            AblationKind::UpdateStep => &["25", "35", "45"],
            AblationKind::Iterations => &["25", "50", "75"],
            AblationKind::StartS => &["0", "7", "15", "30", "45"],
            AblationKind::LayerSet => &["decoder", "encoder", "all"],
        }
    }

    /// Config overlay setting this knob to `value`, validated against `base`.
    pub fn overlay(self, value: &str, base: &Config) -> Result<Value> {
        let steps = base.backbone.num_steps;
        let int = |lo: usize, hi: usize| -> Result<usize> {
            let v: usize = value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(self.name(), format!("`{value}` is not an integer")))?;
            if v < lo || v > hi {
                return Err(Error::invalid(self.name(), format!("{v} outside [{lo}, {hi}]")));
            }
            Ok(v)
        };
        Ok(match self {
            AblationKind::UpdateStep => serde_json::json!({"objective": {"update_step_index": int(1, steps)?}}),
            AblationKind::Iterations => serde_json::json!({"objective": {"iterations": int(0, 10_000)?}}),
            AblationKind::StartS => serde_json::json!({"edit": {"S": int(0, steps)?}}),
            AblationKind::LayerSet => {
                let set: LayerSet = value.parse()?;
                serde_json::json!({"edit": {"layer_set": set.name()}})
            }
        })
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "update_step" => Ok(AblationKind::UpdateStep),
            "iterations" => Ok(AblationKind::Iterations),
            "start_S" | "start_s" | "S" => Ok(AblationKind::StartS),
            "layer_set" => Ok(AblationKind::LayerSet),
            other => Err(Error::invalid(
                "kind",
                format!("unknown ablation `{other}` (expected update_step, iterations, start_S or layer_set)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepGroup {
    pub value: String,
    pub is_default: bool,
    pub overlay: Value,
    pub artifact_dir: PathBuf,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: AblationKind,
    pub groups: Vec<SweepGroup>,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.groups.iter().map(|g| g.report.failures()).sum()
    }
}

/// Checks every sweep value before any run starts.
pub fn validate_sweep(kind: AblationKind, values: &[String], base: &Config) -> Result<Vec<Value>> {
    if values.is_empty() {
        return Err(Error::invalid("values", "at least one value is required"));
    }
    values
        .iter()
        .map(|v| {
            let overlay = kind.overlay(v, base)?;
            base.with_overlay(&overlay)?;
            Ok(overlay)
        })
        .collect()
}

/// One pipeline run per `(value, pair)`; artifacts go to `out/<kind>=<value>/`.
pub fn run_ablation(
    kind: AblationKind,
    values: &[String],
    pairs: &[ConditionPair],
    base: &Config,
    backbone: &mut dyn Backbone,
    out: &Path,
    scorer: Option<&dyn TextImageScorer>,
    detector: Option<&dyn ObjectDetector>,
) -> Result<SweepReport> {
    let overlays = validate_sweep(kind, values, base)?;
    let mut groups = Vec::with_capacity(values.len());
    for (value, overlay) in values.iter().zip(overlays) {
        let config = base.with_overlay(&overlay)?;
        let dir = out.join(format!("{}={}", kind.name(), value.trim()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        log::info!("sweep {kind} = {value}: {} items", pairs.len());
        let report = evaluate_pipeline(pairs, &config, backbone, &dir, scorer, detector)?;
        groups.push(SweepGroup {
            is_default: value.trim() == kind.default_value(),
            value: value.trim().to_string(),
            overlay,
            artifact_dir: dir,
            report,
        });
    }
    Ok(SweepReport { kind, groups })
}

fn fmt_metric(mean: Option<f64>, se: Option<f64>, digits: usize) -> String {
    match (mean, se) {
        (Some(m), Some(s)) => format!("{m:.digits$} ± {s:.digits$}"),
        (Some(m), None) => format!("{m:.digits$}"),
        _ => "unavailable".into(),
    }
}

/// Markdown table with the CLIP-Score and AP50 columns.
pub fn report_markdown(rows: &[(String, &MetricReport)]) -> String {
    let mut md = String::from("| Method | CLIP-Score | AP50 | n | failed |\n|---|---|---|---|---|\n");
    for (label, r) in rows {
        md.push_str(&format!(
            "| {label} | {} | {} | {} | {} |\n",
            fmt_metric(r.clip_score_mean, r.clip_score_stderr, 4),
            fmt_metric(r.ap50, r.ap50_stderr, 2),
            r.n,
            r.failures()
        ));
    }
    if let Some((_, r)) = rows.first() {
        md.push_str(&format!(
            "\nScorer: {}. Detector: {}.\n",
            r.scorer.as_deref().unwrap_or("none"),
            r.detector.as_deref().unwrap_or("none")
        ));
    }
    md
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `report.json` and `report.md` for a single evaluation.
pub fn write_metric_report(dir: &Path, label: &str, report: &MetricReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("report.json"), &serde_json::to_string_pretty(report)?)?;
    write_file(&dir.join("report.md"), &report_markdown(&[(label.to_string(), report)]))
}

/// Writes `report.json` and `report.md` for a sweep; the default value is starred.
pub fn write_sweep_report(dir: &Path, sweep: &SweepReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("report.json"), &serde_json::to_string_pretty(sweep)?)?;
    let rows: Vec<(String, &MetricReport)> = sweep
        .groups
        .iter()
        .map(|g| {
            let star = if g.is_default { " (default)" } else { "" };
            (format!("{} = {}{star}", sweep.kind, g.value), &g.report)
        })
        .collect();
    write_file(&dir.join("report.md"), &report_markdown(&rows))
}
