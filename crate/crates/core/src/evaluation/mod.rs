//! Metrics, evaluation runs over patch sources, and report plots.

mod metrics;
pub mod plots;

use std::fs;
use std::path::Path;

use ndarray::Axis;
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::dataset::{PatchSample, PatchSource, TIME_RANGE_HORIZON};
use crate::error::{Error, Result};
use crate::network::{detect_forward, forecast_forward, stable_sigmoid, timerange_probs, ModelBundle, Task};
use crate::rng::indexed_rng;
use crate::thresholding::batch_optimal_threshold;

pub use metrics::{
    accumulate_timerange, binary_metrics, metrics_from_counts, pr_curve, timerange_eval, BinaryMetrics, Counts, PrPoint,
    TimerangeMetrics,
};
pub use plots::emit_plots;

/// Test-set F1-maximizing threshold, for comparison with the tracked one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleThreshold {
    pub threshold: f64,
    pub f1: f64,
    /// F1 at the tracked threshold on the same pixels the oracle saw.
    pub tracked_f1: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeMetrics {
    pub range_months: u32,
    pub n_patches: usize,
    pub threshold_used: f64,
    pub metrics: BinaryMetrics,
    pub oracle: Option<OracleThreshold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub task: Task,
    pub ranges: Vec<RangeMetrics>,
    pub pr_curve: Vec<PrPoint>,
    /// Early/late metrics over changed pixels; `None` when not applicable.
    pub timerange: Option<TimerangeMetrics>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Foreground F1 pooled over all ranges.
    pub fn pooled(&self) -> BinaryMetrics {
        let mut c = Counts::default();
        for r in &self.ranges {
            c.add(&r.metrics.counts);
        }
        metrics_from_counts(c)
    }
}

/// One evaluation set: patches of a single forecasting range.
pub struct EvalSet<'a> {
    pub range_months: u32,
    pub source: &'a dyn PatchSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Also report the threshold that maximizes F1 on this data.
    pub oracle_threshold: bool,
    /// PR curve resolution; 0 disables the curve.
    pub pr_points: usize,
    /// Evaluate at most this many evenly spaced patches per set.
    pub max_patches: Option<usize>,
    /// Per-set pixel budget for the oracle sweep and PR curve.
    pub pixel_cap: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            oracle_threshold: false,
            pr_points: 256,
            max_patches: None,
            pixel_cap: 8_000_000,
            seed: 0,
        }
    }
}

/// Per-pixel probabilities for one patch.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Binary(Vec<f64>),
    Timerange { p_e: Vec<f64>, p_c: Vec<f64> },
}

impl Prediction {
    /// Change probability per pixel.
    pub fn change_scores(&self) -> &[f64] {
        match self {
            Prediction::Binary(p) => p,
            Prediction::Timerange { p_c, .. } => p_c,
        }
    }
}

pub fn predict(bundle: &ModelBundle, sample: &PatchSample) -> Result<Prediction> {
    match bundle.task {
        Task::Detect => {
            let t1 = sample
                .image_t1
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("patch {} has no second image", sample.meta.stem())))?;
            let logits = detect_forward(bundle, &sample.image_t0, t1)?;
            Ok(Prediction::Binary(logits.iter().map(|&v| stable_sigmoid(f64::from(v))).collect()))
        }
        Task::Forecast { .. } => {
            let logits = forecast_forward(bundle, &sample.image_t0)?;
            Ok(Prediction::Binary(logits.iter().map(|&v| stable_sigmoid(f64::from(v))).collect()))
        }
        Task::Timerange => {
            let logits = forecast_forward(bundle, &sample.image_t0)?;
            let q = |k: usize| logits.index_axis(Axis(0), k);
            let (qe, ql, q0) = (q(0), q(1), q(2));
            let n = qe.len();
            let mut p_e = Vec::with_capacity(n);
            let mut p_c = Vec::with_capacity(n);
            for ((&e, &l), &z) in qe.iter().zip(ql.iter()).zip(q0.iter()) {
                let (a, b) = timerange_probs(f64::from(e), f64::from(l), f64::from(z));
                p_e.push(a);
                p_c.push(b);
            }
            Ok(Prediction::Timerange { p_e, p_c })
        }
    }
}

/// Binary change target the task is scored against.
pub fn change_labels(task: Task, sample: &PatchSample) -> Vec<u8> {
    match task {
        Task::Timerange => {
            let h = TIME_RANGE_HORIZON as u16;
            sample.first_change_month.iter().map(|&m| u8::from(m >= 1 && m <= h)).collect()
        }
        _ => sample.change_mask.iter().copied().collect(),
    }
}

fn check_set(task: Task, set: &EvalSet<'_>) -> Result<()> {
    match task {
        Task::Forecast { range } if range != set.range_months => Err(Error::invalid(format!(
            "forecast model for {range} months cannot be scored on {}-month data",
            set.range_months
        ))),
        Task::Timerange if set.range_months != TIME_RANGE_HORIZON => Err(Error::invalid(format!(
            "time-range model needs {TIME_RANGE_HORIZON}-month pairs, got {}-month data",
            set.range_months
        ))),
        _ => Ok(()),
    }
}

fn pick_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|k| k * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Score `bundle` on each set at its tracked threshold (`score > t`).
pub fn evaluate(bundle: &ModelBundle, sets: &[EvalSet<'_>], opts: &EvalOptions, label: &str) -> Result<EvalReport> {
    if sets.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let threshold = bundle.tracker.current();
    let keep_scores = opts.oracle_threshold || opts.pr_points > 0;
    let mut ranges = Vec::new();
    let mut pooled_scores = Vec::new();
    let mut pooled_labels = Vec::new();
    let mut confusion = [[0u64; 2]; 2];
    let mut notes = Vec::new();

    for (set_index, set) in sets.iter().enumerate() {
        check_set(bundle.task, set)?;
        let indices = pick_indices(set.source.len(), opts.max_patches);
        if indices.is_empty() {
            notes.push(format!("{}-month set is empty", set.range_months));
            continue;
        }
        let per_patch_cap = (opts.pixel_cap / indices.len()).max(1);
        let mut counts = Counts::default();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (k, &i) in indices.iter().enumerate() {
            let sample = set.source.load(i)?;
            let pred = predict(bundle, &sample)?;
            let y = change_labels(bundle.task, &sample);
            let p = pred.change_scores();
            let decided: Vec<u8> = p.iter().map(|&s| u8::from(s > threshold)).collect();
            counts.accumulate(&decided, &y)?;
            if let Prediction::Timerange { p_e, .. } = &pred {
                let months: Vec<u16> = sample.first_change_month.iter().copied().collect();
                accumulate_timerange(&mut confusion, p_e, &months, TIME_RANGE_HORIZON as u16)?;
            }
            if keep_scores {
                if p.len() <= per_patch_cap {
                    scores.extend_from_slice(p);
                    labels.extend_from_slice(&y);
                } else {
                    let mut rng = indexed_rng(opts.seed, "eval-pixels", (set_index * 1_000_003 + k) as u64);
                    let mut chosen = sample_indices(&mut rng, p.len(), per_patch_cap).into_vec();
                    chosen.sort_unstable();
                    scores.extend(chosen.iter().map(|&j| p[j]));
                    labels.extend(chosen.iter().map(|&j| y[j]));
                }
            }
        }
        let oracle = if opts.oracle_threshold {
            batch_optimal_threshold(&scores, &labels)?.map(|best| {
                let decided: Vec<u8> = scores.iter().map(|&s| u8::from(s > threshold)).collect();
                OracleThreshold {
                    threshold: best.threshold,
                    f1: best.f1,
                    tracked_f1: Counts::from_masks(&decided, &labels).map(metrics_from_counts).map(|m| m.f1).unwrap_or(0.0),
                    pixels: scores.len(),
                }
            })
        } else {
            None
        };
        ranges.push(RangeMetrics {
            range_months: set.range_months,
            n_patches: indices.len(),
            threshold_used: threshold,
            metrics: metrics_from_counts(counts),
            oracle,
        });
        if opts.pr_points > 0 {
            pooled_scores.extend(scores);
            pooled_labels.extend(labels);
        }
    }

    let pr = if opts.pr_points > 0 && pooled_labels.contains(&1) {
        pr_curve(&pooled_scores, &pooled_labels, opts.pr_points)?
    } else {
        if opts.pr_points > 0 {
            notes.push("no positive pixels; PR curve omitted".into());
        }
        Vec::new()
    };
    let timerange = if bundle.task == Task::Timerange {
        let m = TimerangeMetrics::from_confusion(confusion);
        if m.is_none() {
            notes.push("no changed pixels within the horizon; early/late metrics not applicable".into());
        }
        m
    } else {
        None
    };
    Ok(EvalReport {
        label: label.to_string(),
        task: bundle.task,
        ranges,
        pr_curve: pr,
        timerange,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, MemorySource, SynthConfig};
    use crate::network::BackboneConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn small_world() -> Vec<Arc<crate::dataset::LocationSeries>> {
        let cfg = SynthConfig {
            n_locations: 1,
            height: 224,
            width: 224,
            n_months: 26,
            ..SynthConfig::default()
        };
        synth_generate(&cfg, 3).unwrap().into_iter().map(Arc::new).collect()
    }

    #[test]
    fn evaluates_each_task_on_matching_data() {
        let world = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = EvalOptions {
            oracle_threshold: true,
            max_patches: Some(2),
            ..EvalOptions::default()
        };

        let r3 = MemorySource::bucket(&world, 3);
        let detect = ModelBundle::new(Task::Detect, None, BackboneConfig::tiny(), &mut rng).unwrap();
        let report = evaluate(&detect, &[EvalSet { range_months: 3, source: &r3 }], &opts, "detect").unwrap();
        assert_eq!(report.ranges.len(), 1);
        assert_eq!(report.ranges[0].n_patches, 2);
        assert_eq!(report.ranges[0].metrics.counts.total(), 2 * 224 * 224);
        assert!(report.timerange.is_none());

        let fc = ModelBundle::new(Task::Forecast { range: 6 }, None, BackboneConfig::tiny(), &mut rng).unwrap();
        assert!(evaluate(&fc, &[EvalSet { range_months: 3, source: &r3 }], &opts, "fc").is_err());

        let r24 = MemorySource::bucket(&world, 24);
        let tr = ModelBundle::new(Task::Timerange, None, BackboneConfig::tiny(), &mut rng).unwrap();
        let report = evaluate(&tr, &[EvalSet { range_months: 24, source: &r24 }], &opts, "tr").unwrap();
        let m = report.timerange.as_ref().expect("synthetic world has changes within 24 months");
        // zero logits: p_e = 0.5 is never early
        assert_eq!(m.confusion[0][0] + m.confusion[1][0], 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval_report.json");
        report.write_json(&path).unwrap();
        let back: EvalReport = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn plots_from_reports() {
        let report = EvalReport {
            label: "fc".into(),
            task: Task::Timerange,
            ranges: vec![
                RangeMetrics {
                    range_months: 6,
                    n_patches: 1,
                    threshold_used: 0.4,
                    metrics: metrics_from_counts(Counts { tp: 3, fp: 1, fn_: 2, tn: 10 }),
                    oracle: None,
                },
                RangeMetrics {
                    range_months: 12,
                    n_patches: 1,
                    threshold_used: 0.4,
                    metrics: metrics_from_counts(Counts { tp: 4, fp: 1, fn_: 1, tn: 10 }),
                    oracle: None,
                },
            ],
            pr_curve: vec![PrPoint {
                recall: 1.0,
                precision: 0.3,
                threshold: 0.1,
            }],
            timerange: TimerangeMetrics::from_confusion([[30, 20], [15, 35]]),
            notes: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&[report], dir.path()).unwrap();
        assert_eq!(files.len(), 8);
        let rows: Vec<plots::F1Row> = plots::read_csv(&dir.path().join("f1_by_range.csv")).unwrap();
        assert_eq!(rows.len(), 2);
        let confusion: Vec<plots::ConfusionRow> = plots::read_csv(&dir.path().join("timerange_confusion.csv")).unwrap();
        assert_eq!(confusion.iter().map(|r| r.count).sum::<u64>(), 100);
        let before = fs::read(dir.path().join("f1_by_range.svg")).unwrap();
        plots::render_dir(dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("f1_by_range.svg")).unwrap(), before);
    }
}
