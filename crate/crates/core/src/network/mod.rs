//! Shared U-Net backbone, task heads and the logit-to-probability maps.

mod arch;
mod checkpoint;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, Tensor};
use crate::thresholding::ThresholdTracker;

pub use arch::{Backbone, Head};
pub use checkpoint::{load_checkpoint, load_external_backbone, save_checkpoint, CheckpointSidecar, Conventions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderScale {
    /// 50-layer residual bottleneck encoder, 5 downsampling steps.
    Full,
    /// 3 downsampling stages of widths 8/16/32.
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub encoder_scale: EncoderScale,
    pub feature_dim: usize,
    pub input_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            encoder_scale: EncoderScale::Full,
            feature_dim: 16,
            input_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self {
            encoder_scale: EncoderScale::Tiny,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be at least 1".into()));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn downsampling_factor(&self) -> usize {
        match self.encoder_scale {
            EncoderScale::Full => 32,
            EncoderScale::Tiny => 8,
        }
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let f = self.downsampling_factor();
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::shape(format!(
                "input {h}x{w} is not compatible with the encoder: height and width must be positive multiples of {f}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_layers: usize,
    pub kernel: usize,
    pub hidden_depth: usize,
    pub out_logits: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            kernel: 3,
            hidden_depth: 16,
            out_logits: 1,
        }
    }
}

impl HeadConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            out_logits: task.out_logits(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.out_logits, 1 | 3) {
            return Err(Error::Config(format!("head out_logits must be 1 or 3, got {}", self.out_logits)));
        }
        if !matches!(self.kernel, 1 | 3) {
            return Err(Error::Config(format!("head kernel must be 1 or 3, got {}", self.kernel)));
        }
        if self.hidden_layers > 0 && self.hidden_depth == 0 {
            return Err(Error::Config("head hidden_depth must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    Detect,
    Forecast { range: u32 },
    Timerange,
}

impl Task {
    pub fn out_logits(&self) -> usize {
        match self {
            Task::Timerange => 3,
            _ => 1,
        }
    }

    /// Channels the head consumes given the backbone feature size.
    pub fn head_inputs(&self, feature_dim: usize) -> usize {
        match self {
            Task::Detect => 2 * feature_dim,
            _ => feature_dim,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Detect => write!(f, "detect"),
            Task::Forecast { range } => write!(f, "forecast-r{range}"),
            Task::Timerange => write!(f, "timerange"),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detect" => Ok(Task::Detect),
            "timerange" => Ok(Task::Timerange),
            _ => s
                .strip_prefix("forecast-r")
                .and_then(|r| r.parse().ok())
                .map(|range| Task::Forecast { range })
                .ok_or_else(|| Error::invalid(format!("unknown task '{s}' (detect, forecast-r<months>, timerange)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Scratch,
    Stage1,
    External,
}

/// Backbone + head + task metadata; the unit that is trained and checkpointed.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub backbone: Backbone,
    pub head: Head,
    pub task: Task,
    pub provenance: Provenance,
    pub step: u64,
    pub tracker: ThresholdTracker,
}

/// Network inputs, `(N, C, H, W)` each.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'t> {
    Pair(&'t Tensor, &'t Tensor),
    Single(&'t Tensor),
}

pub const BACKBONE_GROUP: usize = 0;
pub const HEAD_GROUP: usize = 1;

impl ModelBundle {
    /// Fresh bundle with a new head; the backbone is either given or newly
    /// initialized.
    pub fn new<R: Rng>(
        task: Task,
        backbone: Option<(Backbone, Provenance)>,
        backbone_config: BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (backbone, provenance) = match backbone {
            Some((b, p)) => {
                if *b.config() != backbone_config {
                    return Err(Error::Config(format!(
                        "initial backbone config {:?} differs from requested {:?}",
                        b.config(),
                        backbone_config
                    )));
                }
                (b, p)
            }
            None => (Backbone::new(backbone_config, rng)?, Provenance::Scratch),
        };
        let head = Head::new(HeadConfig::for_task(task), task.head_inputs(backbone_config.feature_dim), rng)?;
        let tracker = match task {
            Task::Timerange => ThresholdTracker::three_class(),
            _ => ThresholdTracker::binary(),
        };
        Ok(Self {
            backbone,
            head,
            task,
            provenance,
            step: 0,
            tracker,
        })
    }

    /// Record a forward pass. Gradients flow only into the groups marked
    /// trainable.
    pub fn forward_graph(&self, input: ModelInput<'_>, train_backbone: bool, train_head: bool) -> Result<(Graph<'_>, NodeId)> {
        let mut g = Graph::new(vec![self.backbone.store(), self.head.store()], vec![train_backbone, train_head]);
        let features = match (self.task, input) {
            (Task::Detect, ModelInput::Pair(a, b)) => {
                if a.dim() != b.dim() {
                    return Err(Error::shape(format!("image pair shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
                }
                let fa = self.backbone.forward(&mut g, BACKBONE_GROUP, a)?;
                let fb = self.backbone.forward(&mut g, BACKBONE_GROUP, b)?;
                g.concat(&[fa, fb])
            }
            (Task::Detect, ModelInput::Single(_)) => {
                return Err(Error::invalid("detection needs an image pair"));
            }
            (_, ModelInput::Single(x)) => self.backbone.forward(&mut g, BACKBONE_GROUP, x)?,
            (task, ModelInput::Pair(..)) => {
                return Err(Error::invalid(format!("{task} bundle takes a single image, not a pair")));
            }
        };
        let out = self.head.forward(&mut g, HEAD_GROUP, features);
        Ok((g, out))
    }

    fn infer(&self, input: ModelInput<'_>) -> Result<Tensor> {
        let (g, out) = self.forward_graph(input, false, false)?;
        Ok(g.value(out).clone())
    }
}

fn batch_of_one(image: &Array3<f32>) -> Tensor {
    image.clone().insert_axis(Axis(0))
}

/// Backbone features for a batch `(N, 3, H, W)` → `(N, feature_dim, H, W)`.
pub fn extract_features_batch(backbone: &Backbone, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(vec![backbone.store()]);
    let out = backbone.forward(&mut g, 0, images)?;
    Ok(g.value(out).clone())
}

/// Backbone features of one `(3, H, W)` image.
pub fn extract_features(backbone: &Backbone, image: &Array3<f32>) -> Result<Array3<f32>> {
    Ok(extract_features_batch(backbone, &batch_of_one(image))?.index_axis_move(Axis(0), 0))
}

pub fn detect_forward_batch(bundle: &ModelBundle, t0: &Tensor, t1: &Tensor) -> Result<Tensor> {
    if bundle.task != Task::Detect {
        return Err(Error::invalid(format!("detect_forward needs a detect bundle, got {}", bundle.task)));
    }
    bundle.infer(ModelInput::Pair(t0, t1))
}

/// Change logits `(1, H, W)` for an ordered image pair.
pub fn detect_forward(bundle: &ModelBundle, t0: &Array3<f32>, t1: &Array3<f32>) -> Result<Array3<f32>> {
    Ok(detect_forward_batch(bundle, &batch_of_one(t0), &batch_of_one(t1))?.index_axis_move(Axis(0), 0))
}

pub fn forecast_forward_batch(bundle: &ModelBundle, images: &Tensor) -> Result<Tensor> {
    if bundle.task == Task::Detect {
        return Err(Error::invalid("forecast_forward needs a forecast or timerange bundle, got detect"));
    }
    bundle.infer(ModelInput::Single(images))
}

/// Logits `(1, H, W)` for forecasting or `(3, H, W)` ordered early, late,
/// no-change for the time-range task.
pub fn forecast_forward(bundle: &ModelBundle, image: &Array3<f32>) -> Result<Array3<f32>> {
    Ok(forecast_forward_batch(bundle, &batch_of_one(image))?.index_axis_move(Axis(0), 0))
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(p_e, p_c)` from the three time-range logits.
///
/// `p_e = e^{q_e} / (e^{q_e} + e^{q_l})` and
/// `p_c = e^{q_e + q_l} / (e^{q_e + q_l} + e^{q_0})`, both evaluated as
/// sigmoids of logit differences.
pub fn timerange_probs(q_e: f64, q_l: f64, q_0: f64) -> (f64, f64) {
    (stable_sigmoid(q_e - q_l), stable_sigmoid(q_e + q_l - q_0))
}

/// Gradients of `p_e` and `p_c` with respect to `(q_e, q_l, q_0)`.
pub fn timerange_probs_grad(q_e: f64, q_l: f64, q_0: f64) -> ([f64; 3], [f64; 3]) {
    let (p_e, p_c) = timerange_probs(q_e, q_l, q_0);
    let de = p_e * (1.0 - p_e);
    let dc = p_c * (1.0 - p_c);
    ([de, -de, 0.0], [dc, dc, -dc])
}
