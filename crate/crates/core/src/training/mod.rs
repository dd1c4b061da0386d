//! Stage-1 Siamese detection and Stage-2 forecasting / time-range training.

mod augment;
mod config;
mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};
use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};

use crate::dataset::{PatchSample, PatchSource, PATCH_SIZE, TIME_RANGE_HORIZON};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalSet};
use crate::losses::{combined_loss_grad, forecast_loss_grad, TimeRangeLogits};
use crate::network::{save_checkpoint, stable_sigmoid, timerange_probs, Backbone, ModelBundle, ModelInput, Provenance, Task};
use crate::nn::{Adam, Tensor};
use crate::rng::{stream_rng, sub_seed};
use crate::sampling::SamplerState;
use crate::thresholding::{batch_optimal_threshold, subsample_stratified, ThresholdTracker, SWEEP_PIXEL_CAP};

pub use augment::augment;
pub use config::{apply_json, apply_overrides, AugmentConfig, TrainConfig};
pub use manifest::{RunManifest, RunMetrics, RunSeeds};

/// Where a Stage-2 backbone comes from. The head is always new.
#[derive(Debug, Clone)]
pub enum BackboneInit {
    Scratch,
    Stage1(ModelBundle),
    External(Backbone),
}

/// Training and validation patches. `val_range` labels the validation set.
pub struct TrainData<'a> {
    pub train: &'a dyn PatchSource,
    pub val: Option<&'a dyn PatchSource>,
    pub val_range: u32,
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_time: Option<f64>,
    pub loss_binary: Option<f64>,
    pub lr: f32,
    pub tracked_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub bundle: ModelBundle,
    /// Parameters with the best validation F1, if validation ran.
    pub best: Option<ModelBundle>,
    pub best_val: Option<ValPoint>,
    pub final_val_f1: Option<f64>,
    pub history: Vec<LogRecord>,
    pub validations: Vec<ValPoint>,
    pub checkpoints: Vec<PathBuf>,
    pub manifest: RunManifest,
}

/// Output locations of a run; `None` keeps everything in memory.
fn prepare_out(out: Option<&Path>) -> Result<Option<(PathBuf, BufWriter<File>)>> {
    match out {
        None => Ok(None),
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints"))?;
            let log = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
            Ok(Some((dir.to_path_buf(), log)))
        }
    }
}

struct Batch {
    t0: Tensor,
    t1: Option<Tensor>,
    /// Flattened `(N, H, W)` change labels.
    change: Vec<u8>,
    /// Flattened `(N, H, W)` first-change months.
    months: Vec<u16>,
}

fn stack(samples: &[PatchSample], crop: usize, pair: bool) -> Batch {
    let n = samples.len();
    let mut t0 = Array4::<f32>::zeros((n, 3, crop, crop));
    let mut t1 = pair.then(|| Array4::<f32>::zeros((n, 3, crop, crop)));
    let mut change = Vec::with_capacity(n * crop * crop);
    let mut months = Vec::with_capacity(n * crop * crop);
    for (i, smp) in samples.iter().enumerate() {
        t0.slice_mut(s![i, .., .., ..]).assign(&smp.image_t0);
        if let (Some(t), Some(img)) = (t1.as_mut(), smp.image_t1.as_ref()) {
            t.slice_mut(s![i, .., .., ..]).assign(img);
        }
        change.extend(smp.change_mask.iter().copied());
        months.extend(smp.first_change_month.iter().copied());
    }
    Batch { t0, t1, change, months }
}

struct StepLoss {
    total: f64,
    time: Option<f64>,
    binary: Option<f64>,
    /// Gradient of the loss w.r.t. the head output.
    grad: Tensor,
    /// Change probabilities and labels for the threshold sweep.
    scores: Vec<f64>,
    labels: Vec<u8>,
}

fn loss_and_grad(task: Task, logits: &Tensor, batch: &Batch, cfg: &TrainConfig) -> Result<StepLoss> {
    let (n, c, h, w) = logits.dim();
    let plane = h * w;
    match task {
        Task::Detect | Task::Forecast { .. } => {
            let q: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
            let (loss, g) = forecast_loss_grad(&q, &batch.change)?;
            let grad = Array4::from_shape_vec((n, c, h, w), g.iter().map(|&v| v as f32).collect())
                .map_err(|e| Error::shape(e.to_string()))?;
            Ok(StepLoss {
                total: loss,
                time: None,
                binary: Some(loss),
                grad,
                scores: q.iter().map(|&v| stable_sigmoid(v)).collect(),
                labels: batch.change.clone(),
            })
        }
        Task::Timerange => {
            let mut early = Vec::with_capacity(n * plane);
            let mut late = Vec::with_capacity(n * plane);
            let mut none = Vec::with_capacity(n * plane);
            for i in 0..n {
                early.extend(logits.slice(s![i, 0, .., ..]).iter().map(|&v| f64::from(v)));
                late.extend(logits.slice(s![i, 1, .., ..]).iter().map(|&v| f64::from(v)));
                none.extend(logits.slice(s![i, 2, .., ..]).iter().map(|&v| f64::from(v)));
            }
            let horizon = TIME_RANGE_HORIZON as u16;
            let y_c: Vec<u8> = batch.months.iter().map(|&m| u8::from(m >= 1 && m <= horizon)).collect();
            let y_e: Vec<u8> = batch.months.iter().map(|&m| u8::from(m >= 1 && m <= horizon / 2)).collect();
            let q = TimeRangeLogits {
                early: &early,
                late: &late,
                none: &none,
            };
            let (loss, g) = combined_loss_grad(q, &y_e, &y_c, &cfg.loss)?;
            let mut grad = Array4::<f32>::zeros((n, c, h, w));
            for i in 0..n {
                for (k, part) in [&g.early, &g.late, &g.none].iter().enumerate() {
                    let src = &part[i * plane..(i + 1) * plane];
                    for (dst, &v) in grad.slice_mut(s![i, k, .., ..]).iter_mut().zip(src) {
                        *dst = v as f32;
                    }
                }
            }
            let scores = (0..early.len()).map(|j| timerange_probs(early[j], late[j], none[j]).1).collect();
            Ok(StepLoss {
                total: loss.total,
                time: Some(loss.time),
                binary: Some(loss.binary),
                grad,
                scores,
                labels: y_c,
            })
        }
    }
}

fn val_f1(bundle: &ModelBundle, data: &TrainData<'_>, cfg: &TrainConfig) -> Result<Option<f64>> {
    let Some(val) = data.val else { return Ok(None) };
    if val.is_empty() {
        return Ok(None);
    }
    let report = evaluate(
        bundle,
        &[EvalSet {
            range_months: data.val_range,
            source: val,
        }],
        &cfg.val,
        "val",
    )?;
    Ok(Some(report.pooled().f1))
}

/// Train `cfg.task`. Detection (Stage 1) always starts from scratch;
/// Stage 2 takes its backbone from `init`.
///
/// Every Stage-2 run, whatever its backbone source, first trains only the
/// new head for `freeze_steps` at `base_lr`, then everything at `fine_lr`,
/// so that runs differ only in their initialization.
pub fn train(cfg: &TrainConfig, data: &TrainData<'_>, init: BackboneInit, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::MissingData("training set is empty".into()));
    }
    let stage = cfg.stage();
    if stage == 1 && !matches!(init, BackboneInit::Scratch) {
        return Err(Error::Config("detection pretraining starts from scratch".into()));
    }
    let seeds = RunSeeds::derive(cfg.seed);
    let mut init_rng = stream_rng(cfg.seed, "init");
    let mut aug_rng = stream_rng(cfg.seed, "augment");
    let mut sweep_rng = stream_rng(cfg.seed, "threshold-sweep");
    let (backbone, provenance) = match init {
        BackboneInit::Scratch => (None, Provenance::Scratch),
        BackboneInit::Stage1(b) => (Some((b.backbone, Provenance::Stage1)), Provenance::Stage1),
        BackboneInit::External(b) => (Some((b, Provenance::External)), Provenance::External),
    };
    let mut bundle = ModelBundle::new(cfg.task, backbone, cfg.backbone, &mut init_rng)?;
    bundle.provenance = provenance;
    bundle.tracker = ThresholdTracker::new(cfg.threshold_window, bundle.tracker.default_threshold())?;

    let mut sampler = SamplerState::new(&data.train.n_change_counts(), cfg.sampler_smoothing, sub_seed(cfg.seed, "sampler"))?;
    let mut opt_backbone = Adam::new(bundle.backbone.store(), cfg.adam);
    let mut opt_head = Adam::new(bundle.head.store(), cfg.adam);
    let frozen_steps = if stage == 2 { cfg.freeze_steps.min(cfg.max_steps) } else { 0 };
    let crop = cfg.crop_size.unwrap_or(PATCH_SIZE);
    let batch_size = cfg.effective_batch_size();
    let pair = cfg.task == Task::Detect;

    let mut out = prepare_out(out)?;
    let mut history = Vec::with_capacity(cfg.max_steps);
    let mut validations = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let mut best: Option<(ValPoint, ModelBundle)> = None;
    let mut final_val = None;

    info!(
        "training {} for {} steps (batch {batch_size}, crop {crop}, {frozen_steps} frozen steps, provenance {provenance:?})",
        cfg.task, cfg.max_steps
    );
    for step in 0..cfg.max_steps {
        let frozen = step < frozen_steps;
        if step == frozen_steps && step > 0 {
            // thresholds learnt with a frozen backbone do not describe the new phase
            bundle.tracker.reset();
        }
        let lr = if stage == 2 && !frozen {
            cfg.fine_lr
        } else {
            cfg.base_lr
        };

        let indices = sampler.draw_batch(batch_size)?;
        let mut samples = Vec::with_capacity(batch_size);
        for i in indices {
            let smp = data.train.load(i)?;
            samples.push(augment(&smp, &cfg.augment, crop, &mut aug_rng));
        }
        let batch = stack(&samples, crop, pair);
        let input = match &batch.t1 {
            Some(t1) => ModelInput::Pair(&batch.t0, t1),
            None => ModelInput::Single(&batch.t0),
        };

        let (graph, output) = bundle.forward_graph(input, !frozen, true)?;
        let loss = loss_and_grad(cfg.task, graph.value(output), &batch, cfg)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {}", loss.total),
                last_good,
            });
        }
        let grads = graph.backward(output, loss.grad);
        let mut grads = grads.into_iter();
        if let Some(g) = grads.next().flatten() {
            opt_backbone.step(bundle.backbone.store_mut(), &g, lr);
        }
        if let Some(g) = grads.next().flatten() {
            opt_head.step(bundle.head.store_mut(), &g, lr);
        }
        bundle.step = (step + 1) as u64;

        let (scores, labels) = subsample_stratified(&loss.scores, &loss.labels, SWEEP_PIXEL_CAP, &mut sweep_rng);
        if let Some(best_t) = batch_optimal_threshold(&scores, &labels)? {
            bundle.tracker.update(best_t.threshold)?;
        }
        let record = LogRecord {
            step,
            loss: loss.total,
            loss_time: loss.time,
            loss_binary: loss.binary,
            lr,
            tracked_threshold: bundle.tracker.current(),
        };
        if let Some((_, log)) = out.as_mut() {
            writeln!(log, "{}", serde_json::to_string(&record)?)?;
        }
        debug!("step {step}: loss {:.5} threshold {:.3}", record.loss, record.tracked_threshold);
        history.push(record);

        let done = step + 1 == cfg.max_steps;
        if let Some((dir, log)) = out.as_mut() {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                log.flush()?;
                let path = dir.join("checkpoints").join(format!("step_{:06}.npz", step + 1));
                save_checkpoint(&bundle, &path)?;
                last_good = Some(path.clone());
                checkpoints.push(path);
            }
        }
        if (cfg.val_every > 0 && (step + 1) % cfg.val_every == 0) || done {
            if let Some(f1) = val_f1(&bundle, data, cfg)? {
                let point = ValPoint { step: step + 1, f1 };
                info!("step {}: val F1 {f1:.4} at threshold {:.3}", step + 1, bundle.tracker.current());
                validations.push(point);
                if done {
                    final_val = Some(f1);
                }
                if best.as_ref().is_none_or(|(b, _)| f1 > b.f1) {
                    if let Some((dir, _)) = out.as_ref() {
                        save_checkpoint(&bundle, &dir.join("best.npz"))?;
                    }
                    best = Some((point, bundle.clone()));
                }
            }
        }
    }

    let mut manifest = RunManifest {
        config: cfg.clone(),
        seeds,
        provenance,
        train_data_hash: data.train.data_hash()?,
        val_data_hash: data.val.map(|v| v.data_hash()).transpose()?,
        metrics: RunMetrics {
            final_loss: history.last().map(|r| r.loss),
            final_val_f1: final_val,
            best_val_f1: best.as_ref().map(|(p, _)| p.f1),
            best_step: best.as_ref().map(|(p, _)| p.step),
            tracked_threshold: bundle.tracker.current(),
        },
        checkpoints: Vec::new(),
    };
    if let Some((dir, mut log)) = out {
        log.flush()?;
        let final_path = dir.join("final.npz");
        save_checkpoint(&bundle, &final_path)?;
        checkpoints.push(final_path);
        if best.is_some() {
            checkpoints.push(dir.join("best.npz"));
        }
        manifest.checkpoints = checkpoints.clone();
        manifest.write(&dir.join("manifest.json"))?;
    }
    let (best_val, best) = match best {
        Some((p, b)) => (Some(p), Some(b)),
        None => (None, None),
    };
    Ok(TrainOutcome {
        bundle,
        best,
        best_val,
        final_val_f1: final_val,
        history,
        validations,
        checkpoints,
        manifest,
    })
}

/// Siamese change detection on pairs of all intervals.
pub fn train_stage1(cfg: &TrainConfig, data: &TrainData<'_>, out: Option<&Path>) -> Result<TrainOutcome> {
    if cfg.task != Task::Detect {
        return Err(Error::Config(format!("stage 1 trains detection, not {}", cfg.task)));
    }
    train(cfg, data, BackboneInit::Scratch, out)
}

/// Forecasting or time-range training on top of `init`'s backbone.
pub fn train_stage2(cfg: &TrainConfig, data: &TrainData<'_>, init: BackboneInit, out: Option<&Path>) -> Result<TrainOutcome> {
    if cfg.task == Task::Detect {
        return Err(Error::Config("stage 2 trains forecast or timerange tasks".into()));
    }
    if let BackboneInit::Stage1(b) = &init {
        if b.task != Task::Detect {
            return Err(Error::Config(format!("stage-1 initialization must be a detect bundle, got {}", b.task)));
        }
    }
    train(cfg, data, init, out)
}
