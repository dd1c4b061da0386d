use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::losses::LossConfig;
use crate::network::{BackboneConfig, Task};
use crate::nn::AdamConfig;
use crate::sampling::DEFAULT_SMOOTHING;
use crate::thresholding::DEFAULT_WINDOW;

/// Geometric and photometric augmentation. Magnitudes are symmetric ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub mirror: bool,
    pub rotation_deg: f64,
    /// Fraction of the patch size.
    pub translate: f64,
    pub scale: f64,
    /// Reflect padding before the random crop, in pixels.
    pub pad_reflect: usize,
    /// Brightness, contrast and saturation factor range `1 ± jitter`.
    pub color_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mirror: true,
            rotation_deg: 5.0,
            translate: 0.02,
            scale: 0.05,
            pad_reflect: 16,
            color_jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub backbone: BackboneConfig,
    pub base_lr: f32,
    pub fine_lr: f32,
    /// Stage-2 steps with the backbone frozen.
    pub freeze_steps: usize,
    /// `None` applies the default rule: 4 for the 21- and 24-month ranges,
    /// 16 otherwise.
    pub batch_size: Option<usize>,
    pub max_steps: usize,
    pub seed: u64,
    /// Side of the square training crop; `None` trains on whole patches.
    pub crop_size: Option<usize>,
    pub sampler_smoothing: f64,
    pub threshold_window: usize,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub checkpoint_every: usize,
    /// Validate every this many steps (0: only at the end).
    pub val_every: usize,
    pub val: EvalOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_task(Task::Detect)
    }
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            backbone: BackboneConfig::default(),
            base_lr: 1e-4,
            fine_lr: 1e-5,
            freeze_steps: 5000,
            batch_size: None,
            max_steps: if task == Task::Detect { 20_000 } else { 10_000 },
            seed: 0,
            crop_size: None,
            sampler_smoothing: DEFAULT_SMOOTHING,
            threshold_window: DEFAULT_WINDOW,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            checkpoint_every: 1000,
            val_every: 1000,
            val: EvalOptions {
                pr_points: 0,
                ..EvalOptions::default()
            },
        }
    }

    pub fn stage(&self) -> u8 {
        if self.task == Task::Detect {
            1
        } else {
            2
        }
    }

    pub fn effective_batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.task {
            Task::Forecast { range: 21 | 24 } => 4,
            _ => 16,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.fine_lr > 0.0 && self.fine_lr.is_finite()) {
            return bad("learning rates must be positive".into());
        }
        if self.effective_batch_size() == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.threshold_window == 0 {
            return bad("threshold_window must be at least 1".into());
        }
        if self.sampler_smoothing.is_nan() || self.sampler_smoothing < 0.0 {
            return bad("sampler_smoothing must be non-negative".into());
        }
        if let Task::Forecast { range } = self.task {
            if range == 0 {
                return bad("forecast range must be at least 1 month".into());
            }
        }
        if let Some(c) = self.crop_size {
            let f = self.backbone.downsampling_factor();
            if c == 0 || c % f != 0 || c > crate::dataset::PATCH_SIZE {
                return bad(format!(
                    "crop_size {c} must be a positive multiple of {f} no larger than {}",
                    crate::dataset::PATCH_SIZE
                ));
            }
        }
        Ok(())
    }
}

/// Parse an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Apply `a.b.c=value` overrides to a serializable config. Every path must
/// name an existing key.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(base: &T, overrides: &[String]) -> Result<T> {
    let mut root = serde_json::to_value(base)?;
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{item}' is not of the form key=value")))?;
        let mut cur = &mut root;
        let keys: Vec<&str> = path.split('.').collect();
        for (depth, key) in keys.iter().enumerate() {
            let obj = cur
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("'{}' is not a section", keys[..depth].join("."))))?;
            cur = obj
                .get_mut(*key)
                .ok_or_else(|| Error::Config(format!("unknown config key '{path}'")))?;
        }
        *cur = parse_value(raw);
    }
    serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
}

/// Recursively merge `patch` into `target`. Objects merge key by key; a
/// tagged object (one with a `kind` key) or any other value replaces wholesale.
fn merge(target: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (target, patch) {
        (Value::Object(dst), Value::Object(src)) if !src.contains_key("kind") => {
            for (key, value) in src {
                let sub = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                let slot = dst
                    .get_mut(key)
                    .ok_or_else(|| Error::Config(format!("unknown config key '{sub}'")))?;
                merge(slot, value, &sub)?;
            }
            Ok(())
        }
        (slot, value) => {
            *slot = value.clone();
            Ok(())
        }
    }
}

/// Apply a (possibly partial) JSON document on top of `base`. Keys absent
/// from `base` are rejected.
pub fn apply_json<T: Serialize + DeserializeOwned>(base: &T, patch: &Value) -> Result<T> {
    if !patch.is_object() {
        return Err(Error::Config("config file must hold a JSON object".into()));
    }
    let mut root = serde_json::to_value(base)?;
    merge(&mut root, patch, "")?;
    serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
}
