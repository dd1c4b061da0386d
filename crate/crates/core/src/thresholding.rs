//! Data-driven decision thresholds.
//!
//! Each training batch contributes the threshold that maximizes its
//! foreground F1; the threshold in use is the mean of the last `window`
//! such values.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 500;
pub const DEFAULT_BINARY_THRESHOLD: f64 = 0.5;
pub const DEFAULT_THREE_CLASS_THRESHOLD: f64 = 0.33;
/// Upper bound on pixels fed to one sweep.
pub const SWEEP_PIXEL_CAP: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub threshold: f64,
    pub f1: f64,
}

fn f1_of(tp: usize, fp: usize, fneg: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    }
}

/// Midpoint of `lo < hi` that is strictly below `hi`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m >= hi {
        lo
    } else {
        m
    }
}

/// F1-maximizing threshold for the rule `score > threshold`.
///
/// Candidates are 1, the midpoints between adjacent distinct scores and 0.
/// Ties go to the larger threshold. Returns `None` when there is no positive
/// label, since F1 is then undefined for every threshold.
pub fn batch_optimal_threshold(scores: &[f64], labels: &[u8]) -> Result<Option<SweepResult>> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // Sweep from the highest threshold down; predicted positives grow one
    // group of equal scores at a time.
    let mut best = SweepResult { threshold: 1.0, f1: 0.0 };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = match order.get(i) {
            Some(&next) => midpoint(scores[next], s),
            None if s > 0.0 => 0.0,
            // a group at score 0 can never be predicted positive
            None => break,
        };
        let f1 = f1_of(tp, fp, positives - tp);
        if f1 > best.f1 {
            best = SweepResult { threshold, f1 };
        }
    }
    Ok(Some(best))
}

/// Keep at most `cap` entries, sampling the same fraction from each label.
pub fn subsample_stratified<R: Rng>(scores: &[f64], labels: &[u8], cap: usize, rng: &mut R) -> (Vec<f64>, Vec<u8>) {
    if scores.len() <= cap {
        return (scores.to_vec(), labels.to_vec());
    }
    let frac = cap as f64 / scores.len() as f64;
    let mut out_s = Vec::with_capacity(cap);
    let mut out_l = Vec::with_capacity(cap);
    for class in [0u8, 1] {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let keep = ((idx.len() as f64 * frac).round() as usize).clamp(usize::from(!idx.is_empty()), idx.len());
        let mut chosen: Vec<usize> = sample(rng, idx.len(), keep).into_iter().map(|k| idx[k]).collect();
        chosen.sort_unstable();
        for i in chosen {
            out_s.push(scores[i]);
            out_l.push(labels[i]);
        }
    }
    (out_s, out_l)
}

/// Moving average over the most recent per-batch optimal thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTracker {
    window: usize,
    values: VecDeque<f64>,
    default: f64,
}

impl ThresholdTracker {
    pub fn new(window: usize, default: f64) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("threshold window must be at least 1"));
        }
        if !(0.0..=1.0).contains(&default) {
            return Err(Error::invalid(format!("default threshold {default} outside [0, 1]")));
        }
        Ok(Self {
            window,
            values: VecDeque::with_capacity(window),
            default,
        })
    }

    pub fn binary() -> Self {
        Self::new(DEFAULT_WINDOW, DEFAULT_BINARY_THRESHOLD).expect("valid defaults")
    }

    pub fn three_class() -> Self {
        Self::new(DEFAULT_WINDOW, DEFAULT_THREE_CLASS_THRESHOLD).expect("valid defaults")
    }

    pub fn update(&mut self, batch_threshold: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&batch_threshold) {
            return Err(Error::invalid(format!("threshold {batch_threshold} outside [0, 1]")));
        }
        if self.values.len() == self.window {
            self.values.pop_front();
        }
        self.values.push_back(batch_threshold);
        Ok(())
    }

    pub fn current(&self) -> f64 {
        if self.values.is_empty() {
            self.default
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn default_threshold(&self) -> f64 {
        self.default
    }

    /// Drop buffered values, keeping window and default.
    pub fn reset(&mut self) {
        self.values.clear();
    }
}

/// Binary decision `score > threshold`.
pub fn apply_threshold(scores: &[f64], tracker: &ThresholdTracker) -> Vec<u8> {
    let t = tracker.current();
    scores.iter().map(|&s| u8::from(s > t)).collect()
}
