//! Run configuration.
//!
//! A [`Config`] is a JSON document with the sections `backbone`, `regions`,
//! `objective`, `edit` and `service`. Partial documents are accepted: every
//! missing key falls back to its default. Overlays (per-request overrides,
//! ablation sweep values) are merged key by key on top of a base config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::LayerSet;
use crate::error::{Error, Result};

/// Environment variable naming a config file that overrides the default one.
pub const CONFIG_ENV: &str = "MOVEACT_CONFIG";

/// Initial step size of [`Config::toy_preset`].
pub const TOY_ALPHA0: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Toy,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub checkpoint_path: Option<PathBuf>,
    pub toy_seed: u64,
    pub num_steps: usize,
    /// Guidance scale of the editing (reverse) branch.
    pub guidance_scale: f64,
    /// Guidance scale of the inversion branch.
    pub inversion_guidance_scale: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Toy,
            checkpoint_path: None,
            toy_seed: 17,
            num_steps: 50,
            guidance_scale: 7.5,
            inversion_guidance_scale: 7.5,
        }
    }
}

/// Source localisation parameters (`regions.*`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionParams {
    pub threshold: f64,
    pub dilate_kernel: usize,
}

impl Default for RegionParams {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            dilate_kernel: 3,
        }
    }
}

/// Latent update parameters (`objective.*`).
///
/// `iterations = 0` skips the gradient loop; the heatmap and masks are still built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub lambda_oii: f64,
    pub lambda_sai: f64,
    pub lambda_bg: f64,
    /// Top-k size for the in-box attention term; `None` derives it from the box area.
    pub k: Option<usize>,
    pub alpha0: f64,
    pub iterations: usize,
    pub update_step_index: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_oii: 0.5,
            lambda_sai: 0.25,
            lambda_bg: 0.25,
            k: None,
            alpha0: 150.0,
            iterations: 50,
            update_step_index: 35,
        }
    }
}

/// Editing-branch parameters (`edit.*`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    /// Key/value replacement starts strictly after this reverse step.
    #[serde(rename = "S")]
    pub start_step: usize,
    pub layer_set: LayerSet,
    pub replace_kv: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            start_step: 7,
            layer_set: LayerSet::Decoder,
            replace_kv: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub port: u16,
    pub artifact_root: PathBuf,
    pub pool_size: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            artifact_root: PathBuf::from("runs"),
            pool_size: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub regions: RegionParams,
    pub objective: ObjectiveConfig,
    pub edit: EditConfig,
    pub service: ServiceConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let config: Config = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Loads `explicit` if given, else the file named by `MOVEACT_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        if let Some(path) = explicit {
            return Self::load(path);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(path) if !path.is_empty() => Self::load(Path::new(&path)),
            _ => Ok(Self::default()),
        }
    }

    /// Returns a copy with `overlay` merged on top.
    pub fn with_overlay(&self, overlay: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge_json(&mut base, overlay);
        Self::from_value(base)
    }

    /// Sets a single dotted key such as `objective.update_step_index`.
    pub fn with_key(&self, dotted: &str, value: Value) -> Result<Self> {
        let mut overlay = value;
        for part in dotted.rsplit('.') {
            let mut map = serde_json::Map::new();
            map.insert(part.to_string(), overlay);
            overlay = Value::Object(map);
        }
        self.with_overlay(&overlay)
    }

    /// Defaults with a step size suited to the toy backbone's small latent.
    pub fn toy_preset() -> Self {
        let mut c = Self::default();
        c.backbone.kind = BackboneKind::Toy;
        c.objective.alpha0 = TOY_ALPHA0;
        c
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.num_steps == 0 {
            return Err(Error::invalid("backbone.num_steps", "must be at least 1"));
        }
        if !(b.guidance_scale.is_finite() && b.inversion_guidance_scale.is_finite()) {
            return Err(Error::invalid("backbone.guidance_scale", "must be finite"));
        }
        let r = &self.regions;
        if !(r.threshold > 0.0 && r.threshold < 1.0) {
            return Err(Error::invalid("regions.threshold", "must lie in (0, 1)"));
        }
        if r.dilate_kernel < 3 || r.dilate_kernel % 2 == 0 {
            return Err(Error::invalid("regions.dilate_kernel", "must be odd and >= 3"));
        }
        let o = &self.objective;
        for (name, v) in [
            ("objective.lambda_oii", o.lambda_oii),
            ("objective.lambda_sai", o.lambda_sai),
            ("objective.lambda_bg", o.lambda_bg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, "must be finite and >= 0"));
            }
        }
        if o.lambda_oii + o.lambda_sai + o.lambda_bg <= 0.0 {
            return Err(Error::invalid("objective", "loss weights must not all be zero"));
        }
        if !(o.alpha0.is_finite() && o.alpha0 > 0.0) {
            return Err(Error::invalid("objective.alpha0", "must be > 0"));
        }
        if o.k == Some(0) {
            return Err(Error::invalid("objective.k", "must be >= 1"));
        }
        if o.update_step_index < 1 || o.update_step_index > b.num_steps {
            return Err(Error::invalid(
                "objective.update_step_index",
                format!("must lie in [1, {}]", b.num_steps),
            ));
        }
        if self.edit.start_step > b.num_steps {
            return Err(Error::invalid(
                "edit.S",
                format!("must lie in [0, {}]", b.num_steps),
            ));
        }
        if self.service.pool_size == 0 {
            return Err(Error::invalid("service.pool_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Recursive JSON merge: objects merge key-wise, everything else replaces.
pub fn merge_json(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge_json(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}
