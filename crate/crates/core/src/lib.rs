//! Forecasting building-footprint change from satellite image time series.
//!
//! A shared U-Net backbone is pretrained on Siamese change detection and then
//! reused for single-image change forecasting, both over fixed horizons and as
//! an early/late time-range classifier.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod network;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod thresholding;
pub mod training;

pub use dataset::split::{make_split, Split, SplitManifest};
pub use dataset::{LocationSeries, PatchMeta, PatchSample, YearMonth};
pub use error::{Error, Result};
pub use network::{BackboneConfig, EncoderScale, ModelBundle, Provenance, Task};
pub use evaluation::{EvalOptions, EvalReport};
pub use thresholding::ThresholdTracker;
pub use training::{BackboneInit, TrainConfig};
