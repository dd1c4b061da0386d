//! Change-aware patch oversampling.
//!
//! Patch `i` with `N_i` changed pixels is drawn with probability
//! `(a + N_i) / Σ_k (a + N_k)`. The smoothing constant `a` keeps patches
//! without change reachable; as `a` grows the distribution tends to uniform.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub const DEFAULT_SMOOTHING: f64 = 50.0;

pub fn sample_probabilities(n_change_counts: &[u64], a: f64) -> Result<Vec<f64>> {
    if !a.is_finite() || a < 0.0 {
        return Err(Error::invalid(format!("smoothing constant must be finite and >= 0, got {a}")));
    }
    let weights: Vec<f64> = n_change_counts.iter().map(|&n| a + n as f64).collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("all sampling weights are zero"));
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Sampling state: per-patch weights and a seeded stream.
#[derive(Debug, Clone)]
pub struct SamplerState {
    weights: Vec<f64>,
    a: f64,
    seed: u64,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    draws: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SamplerSummary {
    pub a: f64,
    pub seed: u64,
    pub draws: u64,
    pub n_samples: usize,
}

impl SamplerState {
    pub fn new(n_change_counts: &[u64], a: f64, seed: u64) -> Result<Self> {
        if n_change_counts.is_empty() {
            return Err(Error::invalid("cannot sample from an empty dataset"));
        }
        // validates a and the denominator
        sample_probabilities(n_change_counts, a)?;
        let weights: Vec<f64> = n_change_counts.iter().map(|&n| a + n as f64).collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Self {
            weights,
            a,
            seed,
            dist,
            rng: stream_rng(seed, "sampler"),
            draws: 0,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    /// Draw `batch_size` indices i.i.d. (with replacement).
    pub fn draw_batch(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        self.draws += batch_size as u64;
        Ok((0..batch_size).map(|_| self.dist.sample(&mut self.rng)).collect())
    }

    pub fn summary(&self) -> SamplerSummary {
        SamplerSummary {
            a: self.a,
            seed: self.seed,
            draws: self.draws,
            n_samples: self.weights.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn worked_example() {
        let p = sample_probabilities(&[0, 50, 150], 50.0).unwrap();
        for (got, want) in p.iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn equal_counts_are_uniform() {
        let p = sample_probabilities(&[7; 5], 3.0).unwrap();
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn degenerate_inputs() {
        assert!(sample_probabilities(&[0, 0], 0.0).is_err());
        assert!(sample_probabilities(&[1], -1.0).is_err());
        assert!(SamplerState::new(&[], 50.0, 0).is_err());
        let mut s = SamplerState::new(&[3], DEFAULT_SMOOTHING, 0).unwrap();
        assert_eq!(s.draw_batch(4).unwrap(), vec![0; 4]);
        assert!(s.draw_batch(0).is_err());
    }

    #[test]
    fn replay_is_identical() {
        let counts = [0, 5, 9, 100, 2];
        let mut a = SamplerState::new(&counts, 50.0, 42).unwrap();
        let mut b = SamplerState::new(&counts, 50.0, 42).unwrap();
        for _ in 0..10 {
            assert_eq!(a.draw_batch(16).unwrap(), b.draw_batch(16).unwrap());
        }
    }

    #[test]
    fn large_smoothing_tends_to_uniform() {
        let counts = [0, 10, 1000, 50_000];
        let p = sample_probabilities(&counts, 1e12).unwrap();
        for x in p {
            assert!((x - 0.25).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn sums_to_one_and_monotone(counts in proptest::collection::vec(0u64..10_000, 1..64), a in 0.0f64..500.0) {
            prop_assume!(a > 0.0 || counts.iter().any(|&n| n > 0));
            let p = sample_probabilities(&counts, a).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..counts.len() {
                for j in 0..counts.len() {
                    if counts[i] > counts[j] {
                        prop_assert!(p[i] > p[j]);
                    }
                }
            }
        }
    }
}
