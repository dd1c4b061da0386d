//! Change-forecasting objectives.
//!
//! All reductions are means over the participating pixels. Probability-space
//! losses clamp their argument to `[eps, 1 - eps]`; the single-logit forecast
//! loss is evaluated directly in logit space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{stable_sigmoid, timerange_probs};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the change/no-change term in the time-range objective.
    pub lambda_mix: f64,
    /// Clamp applied to probabilities before taking logs.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_mix: 1000.0,
            eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mix > 0.0 && self.lambda_mix.is_finite()) {
            return Err(Error::Config(format!("lambda_mix must be > 0, got {}", self.lambda_mix)));
        }
        if !(self.eps > 0.0 && self.eps < 1e-3) {
            return Err(Error::Config(format!("eps must be in (0, 1e-3), got {}", self.eps)));
        }
        Ok(())
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a} vs {b} elements")));
    }
    Ok(())
}

fn check_labels(labels: &[u8]) -> Result<()> {
    if let Some(v) = labels.iter().find(|&&v| v > 1) {
        return Err(Error::invalid(format!("label value {v} is not binary")));
    }
    Ok(())
}

#[inline]
fn clamped_bce(p: f64, y: u8, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[inline]
fn in_clamp_range(p: f64, eps: f64) -> bool {
    p >= eps && p <= 1.0 - eps
}

/// Mean binary cross-entropy of probabilities against binary labels.
pub fn bce(p: &[f64], y: &[u8], eps: f64) -> Result<f64> {
    check_len("bce", p.len(), y.len())?;
    check_labels(y)?;
    if p.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = p.iter().zip(y).map(|(&p, &y)| clamped_bce(p, y, eps)).sum();
    Ok(sum / p.len() as f64)
}

/// Early/late BCE restricted to change pixels (`y_c = 1`); 0 when there are none.
pub fn time_loss(p_e: &[f64], y_e: &[u8], y_c: &[u8], eps: f64) -> Result<f64> {
    check_len("time_loss p_e/y_e", p_e.len(), y_e.len())?;
    check_len("time_loss p_e/y_c", p_e.len(), y_c.len())?;
    check_labels(y_e)?;
    check_labels(y_c)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&p, &ye), &yc) in p_e.iter().zip(y_e).zip(y_c) {
        if yc == 1 {
            sum += clamped_bce(p, ye, eps);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Numerically stable `BCE(sigmoid(x), y)` averaged over pixels.
pub fn forecast_loss(logits: &[f64], y: &[u8]) -> Result<f64> {
    Ok(forecast_loss_grad(logits, y)?.0)
}

/// [`forecast_loss`] and its gradient with respect to the logits.
pub fn forecast_loss_grad(logits: &[f64], y: &[u8]) -> Result<(f64, Vec<f64>)> {
    check_len("forecast_loss", logits.len(), y.len())?;
    check_labels(y)?;
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.iter().zip(y) {
        let y = f64::from(y);
        // max(x, 0) - x*y + log(1 + exp(-|x|))
        sum += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        grad.push((stable_sigmoid(x) - y) / n);
    }
    Ok((sum / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinedLoss {
    pub total: f64,
    pub time: f64,
    pub binary: f64,
}

/// Per-pixel logits of the three-output head: early, late, no-change.
#[derive(Debug, Clone, Copy)]
pub struct TimeRangeLogits<'a> {
    pub early: &'a [f64],
    pub late: &'a [f64],
    pub none: &'a [f64],
}

impl TimeRangeLogits<'_> {
    fn check(&self) -> Result<usize> {
        check_len("q_e/q_l", self.early.len(), self.late.len())?;
        check_len("q_e/q_0", self.early.len(), self.none.len())?;
        Ok(self.early.len())
    }
}

/// `L_time + λ · L_binary` with probabilities from [`timerange_probs`].
pub fn combined_loss(q: TimeRangeLogits<'_>, y_e: &[u8], y_c: &[u8], cfg: &LossConfig) -> Result<CombinedLoss> {
    let n = q.check()?;
    let mut p_e = Vec::with_capacity(n);
    let mut p_c = Vec::with_capacity(n);
    for i in 0..n {
        let (e, c) = timerange_probs(q.early[i], q.late[i], q.none[i]);
        p_e.push(e);
        p_c.push(c);
    }
    let time = time_loss(&p_e, y_e, y_c, cfg.eps)?;
    let binary = bce(&p_c, y_c, cfg.eps)?;
    Ok(CombinedLoss {
        total: time + cfg.lambda_mix * binary,
        time,
        binary,
    })
}

/// Gradients of [`combined_loss`] with respect to `(q_e, q_l, q_0)`.
pub struct TimeRangeGrad {
    pub early: Vec<f64>,
    pub late: Vec<f64>,
    pub none: Vec<f64>,
}

pub fn combined_loss_grad(
    q: TimeRangeLogits<'_>,
    y_e: &[u8],
    y_c: &[u8],
    cfg: &LossConfig,
) -> Result<(CombinedLoss, TimeRangeGrad)> {
    let loss = combined_loss(q, y_e, y_c, cfg)?;
    let n = q.early.len();
    let changed = y_c.iter().filter(|&&v| v == 1).count();
    let w_time = if changed == 0 { 0.0 } else { 1.0 / changed as f64 };
    let w_bin = if n == 0 { 0.0 } else { cfg.lambda_mix / n as f64 };
    let mut grad = TimeRangeGrad {
        early: vec![0.0; n],
        late: vec![0.0; n],
        none: vec![0.0; n],
    };
    for i in 0..n {
        let (p_e, p_c) = timerange_probs(q.early[i], q.late[i], q.none[i]);
        // d BCE(sigmoid(z), y) / dz = sigmoid(z) - y inside the clamp range
        if y_c[i] == 1 && in_clamp_range(p_e, cfg.eps) {
            let g = w_time * (p_e - f64::from(y_e[i]));
            grad.early[i] += g;
            grad.late[i] -= g;
        }
        if in_clamp_range(p_c, cfg.eps) {
            let g = w_bin * (p_c - f64::from(y_c[i]));
            grad.early[i] += g;
            grad.late[i] += g;
            grad.none[i] -= g;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    #[test]
    fn bce_reference_values() {
        let eps = 1e-7;
        let y = [1u8, 0, 1, 0];
        let p: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
        let perfect = bce(&p, &y, eps).unwrap();
        assert!(perfect <= -(1.0 - eps).ln() + 1e-15);
        assert_abs_diff_eq!(bce(&[0.5; 4], &y, eps).unwrap(), LN_2, epsilon = 1e-12);
        assert!(bce(&[0.5; 3], &y, eps).is_err());
        assert!(bce(&[0.5], &[2], eps).is_err());
    }

    #[test]
    fn time_loss_reference_values() {
        assert_eq!(time_loss(&[0.3, 0.9], &[1, 0], &[0, 0], 1e-7).unwrap(), 0.0);
        assert_abs_diff_eq!(
            time_loss(&[0.5, 0.1], &[1, 0], &[1, 0], 1e-7).unwrap(),
            LN_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn forecast_loss_reference_values() {
        assert_abs_diff_eq!(forecast_loss(&[0.0; 3], &[0, 1, 1]).unwrap(), LN_2, epsilon = 1e-12);
        let l = forecast_loss(&[-100.0], &[0]).unwrap();
        assert!(l.is_finite() && l < 1e-40);
        let l = forecast_loss(&[1e4, -1e4], &[0, 1]).unwrap();
        assert!(l.is_finite() && (l - 1e4).abs() < 1e-6);
    }

    #[test]
    fn combined_loss_untrained_level() {
        let z = [0.0; 16];
        let y = [0u8; 16];
        let l = combined_loss(TimeRangeLogits { early: &z, late: &z, none: &z }, &y, &y, &LossConfig::default()).unwrap();
        assert_eq!(l.time, 0.0);
        assert_abs_diff_eq!(l.total, 1000.0 * LN_2, epsilon = 1e-9);
    }

    #[test]
    fn combined_loss_perfect_prediction() {
        // change pixels: early (y_e=1) and late (y_e=0); last pixel no change
        let y_c = [1u8, 1, 0];
        let y_e = [1u8, 0, 0];
        let early = [30.0, -30.0, -30.0];
        let late = [10.0, 50.0, -30.0];
        let none = [-30.0, -30.0, 30.0];
        let l = combined_loss(TimeRangeLogits { early: &early, late: &late, none: &none }, &y_e, &y_c, &LossConfig::default()).unwrap();
        assert!(l.total <= 1e-3, "{l:?}");
    }

    #[test]
    fn losses_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = 20;
            let p: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            assert!(bce(&p, &y, 1e-7).unwrap() >= 0.0);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
            assert!(forecast_loss(&x, &y).unwrap() >= 0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { lambda_mix: 0.0, eps: 1e-7 }.validate().is_err());
        assert!(LossConfig { lambda_mix: 1.0, eps: 0.1 }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
