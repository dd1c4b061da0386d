use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Foreground confusion counters, pooled over every evaluated pixel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn from_masks(pred: &[u8], label: &[u8]) -> Result<Self> {
        let mut c = Counts::default();
        c.accumulate(pred, label)?;
        Ok(c)
    }

    pub fn accumulate(&mut self, pred: &[u8], label: &[u8]) -> Result<()> {
        if pred.len() != label.len() {
            return Err(Error::shape(format!("{} predictions vs {} labels", pred.len(), label.len())));
        }
        for (&p, &l) in pred.iter().zip(label) {
            if p > 1 || l > 1 {
                return Err(Error::invalid(format!("non-binary value (pred {p}, label {l})")));
            }
            match (p, l) {
                (1, 1) => self.tp += 1,
                (1, 0) => self.fp += 1,
                (0, 1) => self.fn_ += 1,
                _ => self.tn += 1,
            }
        }
        Ok(())
    }

    pub fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: Counts,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 of the foreground class. With no positives in
/// either prediction or label everything is 1; otherwise 0/0 counts as 0.
pub fn metrics_from_counts(counts: Counts) -> BinaryMetrics {
    let Counts { tp, fp, fn_, .. } = counts;
    if tp == 0 && fp == 0 && fn_ == 0 {
        return BinaryMetrics {
            f1: 1.0,
            precision: 1.0,
            recall: 1.0,
            counts,
        };
    }
    BinaryMetrics {
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        counts,
    }
}

pub fn binary_metrics(pred: &[u8], label: &[u8]) -> Result<BinaryMetrics> {
    Ok(metrics_from_counts(Counts::from_masks(pred, label)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub threshold: f64,
}

/// Precision-recall points for the rule `score >= threshold`, ordered by
/// increasing threshold.
///
/// Thresholds are the distinct scores when there are at most `n_thresholds`
/// of them, otherwise scores at evenly spaced ranks of the distinct values
/// (always including the smallest, which yields recall 1).
pub fn pr_curve(scores: &[f64], labels: &[u8], n_thresholds: usize) -> Result<Vec<PrPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if n_thresholds < 2 {
        return Err(Error::invalid("a PR curve needs at least 2 thresholds"));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
    if positives == 0 {
        return Err(Error::invalid("PR curve needs at least one positive label"));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::invalid(format!("score {s} is not a number")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // (threshold, tp, fp) for every distinct score, descending
    let mut levels = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
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
        levels.push((s, tp, fp));
    }
    levels.reverse();

    let picked: Vec<usize> = if levels.len() <= n_thresholds {
        (0..levels.len()).collect()
    } else {
        let last = levels.len() - 1;
        let mut idx: Vec<usize> = (0..n_thresholds)
            .map(|k| (k as f64 * last as f64 / (n_thresholds - 1) as f64).round() as usize)
            .collect();
        idx.dedup();
        idx
    };
    Ok(picked
        .into_iter()
        .map(|k| {
            let (threshold, tp, fp) = levels[k];
            PrPoint {
                recall: tp as f64 / positives as f64,
                precision: ratio(tp, tp + fp),
                threshold,
            }
        })
        .collect())
}

/// Early/late classification of changed pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimerangeMetrics {
    /// Rows: ground truth early, late. Columns: predicted early, late.
    pub confusion: [[u64; 2]; 2],
    pub accuracy: f64,
    /// Indexed early, late.
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
    /// Mean of the early and late F1.
    pub af1: f64,
    pub n_pixels: u64,
}

impl TimerangeMetrics {
    pub fn from_confusion(confusion: [[u64; 2]; 2]) -> Option<Self> {
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return None;
        }
        let mut precision = [0.0; 2];
        let mut recall = [0.0; 2];
        let mut f1 = [0.0; 2];
        for k in 0..2 {
            let tp = confusion[k][k];
            let predicted = confusion[0][k] + confusion[1][k];
            let actual = confusion[k][0] + confusion[k][1];
            precision[k] = ratio(tp, predicted);
            recall[k] = ratio(tp, actual);
            f1[k] = ratio(2 * tp, predicted + actual);
        }
        Some(Self {
            confusion,
            accuracy: (confusion[0][0] + confusion[1][1]) as f64 / total as f64,
            precision,
            recall,
            f1,
            af1: (f1[0] + f1[1]) / 2.0,
            n_pixels: total,
        })
    }
}

/// Adds changed pixels to an early/late confusion matrix. Months `1..=h/2`
/// are early and `h/2+1..=h` late; other pixels are skipped. A pixel is
/// predicted early iff `p_e > 0.5`.
pub fn accumulate_timerange(confusion: &mut [[u64; 2]; 2], p_e: &[f64], first_change_month: &[u16], horizon: u16) -> Result<()> {
    if p_e.len() != first_change_month.len() {
        return Err(Error::shape(format!("{} probabilities vs {} labels", p_e.len(), first_change_month.len())));
    }
    let half = horizon / 2;
    for (&p, &m) in p_e.iter().zip(first_change_month) {
        if m == 0 || m > horizon {
            continue;
        }
        let truth = usize::from(m > half);
        let pred = usize::from(p <= 0.5);
        confusion[truth][pred] += 1;
    }
    Ok(())
}

/// Early/late metrics over pixels that change within `horizon` months;
/// `None` if there are none.
pub fn timerange_eval(p_e: &[f64], first_change_month: &[u16], horizon: u16) -> Result<Option<TimerangeMetrics>> {
    let mut confusion = [[0u64; 2]; 2];
    accumulate_timerange(&mut confusion, p_e, first_change_month, horizon)?;
    Ok(TimerangeMetrics::from_confusion(confusion))
}
