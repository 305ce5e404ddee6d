//! Entropy-aware gating.
//!
//! Every active token receives a weight `sigmoid(gamma * z)` where `z` is its
//! entropy z-scored against the entropies of its own prompt group. Tokens that
//! are more uncertain than their peers get weights above one half.

use crate::error::{Error, Result};
use crate::rollout::PromptGroup;
use crate::stats::{mean_and_std, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub population_count: usize,
}

/// Statistics of a flat set of entropies.
pub fn entropy_stats(entropies: &[f64]) -> Result<EntropyStats> {
    if entropies.is_empty() {
        return Err(Error::Validation("no active tokens to compute entropy statistics".into()));
    }
    let (mean, std) = mean_and_std(entropies);
    Ok(EntropyStats { mean, std, population_count: entropies.len() })
}

/// Mean and population std of the recorded entropy over all active tokens of
/// the group.
pub fn group_entropy_stats(group: &PromptGroup) -> Result<EntropyStats> {
    entropy_stats(&group.gather_active(|i, t| group.rollouts[i].entropy[t]))
}

/// `sigmoid(gamma * (h - mean) / (std + delta))` for each entropy.
pub fn gate_weights(entropies: &[f64], stats: &EntropyStats, gating_scale: f64, delta: f64) -> Vec<f64> {
    let denom = stats.std + delta;
    entropies.iter().map(|h| sigmoid(gating_scale * (h - stats.mean) / denom)).collect()
}

/// Exponential moving average of entropy moments across training steps.
///
/// Off by default; the trainer only routes statistics through it when a decay
/// is configured. With `decay = 0` the output equals the batch statistics.
#[derive(Debug, Clone)]
pub struct MovingEntropyStats {
    decay: f64,
    mean: f64,
    second_moment: f64,
    initialized: bool,
}

impl MovingEntropyStats {
    pub fn new(decay: f64) -> Self {
        Self { decay, mean: 0.0, second_moment: 0.0, initialized: false }
    }

    /// Folds one group's statistics in and returns the smoothed statistics to
    /// gate that group with.
    pub fn update(&mut self, batch: &EntropyStats) -> EntropyStats {
        let batch_second = batch.std * batch.std + batch.mean * batch.mean;
        if self.initialized {
            self.mean = self.decay * self.mean + (1.0 - self.decay) * batch.mean;
            self.second_moment = self.decay * self.second_moment + (1.0 - self.decay) * batch_second;
        } else {
            self.mean = batch.mean;
            self.second_moment = batch_second;
            self.initialized = true;
        }
        let var = (self.second_moment - self.mean * self.mean).max(0.0);
        EntropyStats { mean: self.mean, std: var.sqrt(), population_count: batch.population_count }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stats_reference_values() {
        let s = entropy_stats(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 0.0));
        let s = entropy_stats(&[0.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 1.0));
        let s = entropy_stats(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 1.5);
        assert!((s.std - 1.118034).abs() < 1e-6);
        assert_eq!(s.population_count, 4);
        assert!(entropy_stats(&[]).is_err());
    }

    #[test]
    fn gate_reference_values() {
        let s = EntropyStats { mean: 1.0, std: 0.5, population_count: 4 };
        assert_eq!(gate_weights(&[1.0], &s, 1.0, 1e-8), vec![0.5]);
        assert_eq!(gate_weights(&[0.0, 3.0, 9.0], &s, 0.0, 1e-8), vec![0.5; 3]);
        let w = gate_weights(&[1.5], &s, 1.0, 1e-12)[0];
        assert!((w - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn constant_group_gives_half_everywhere() {
        let s = entropy_stats(&[0.7; 5]).unwrap();
        assert_eq!(gate_weights(&[0.7; 5], &s, 3.0, 1e-8), vec![0.5; 5]);
    }

    #[test]
    fn zero_decay_moving_stats_match_batch() {
        let mut m = MovingEntropyStats::new(0.0);
        let a = entropy_stats(&[0.0, 2.0]).unwrap();
        let b = entropy_stats(&[1.0, 5.0, 6.0]).unwrap();
        m.update(&a);
        let out = m.update(&b);
        assert!((out.mean - b.mean).abs() < 1e-12);
        assert!((out.std - b.std).abs() < 1e-12);
    }

    #[test]
    fn moving_stats_blend_toward_history() {
        let mut m = MovingEntropyStats::new(0.5);
        m.update(&entropy_stats(&[0.0, 0.0]).unwrap());
        let out = m.update(&entropy_stats(&[2.0, 2.0]).unwrap());
        assert!((out.mean - 1.0).abs() < 1e-12);
        // second moment 0.5 * 0 + 0.5 * 4 = 2, so var = 2 - 1 = 1
        assert!((out.std - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn gates_are_open_interval_and_monotone(h in prop::collection::vec(0.0f64..3.0, 2..40), gamma in 0.01f64..4.0) {
            let s = entropy_stats(&h).unwrap();
            let w = gate_weights(&h, &s, gamma, 1e-8);
            for (i, &wi) in w.iter().enumerate() {
                prop_assert!(wi > 0.0 && wi < 1.0);
                for (j, &wj) in w.iter().enumerate() {
                    if h[i] > h[j] {
                        prop_assert!(wi >= wj);
                    }
                }
            }
        }

        #[test]
        fn gates_ignore_a_common_entropy_shift(h in prop::collection::vec(0.0f64..3.0, 2..40), shift in 0.0f64..5.0) {
            let s = entropy_stats(&h).unwrap();
            prop_assume!(s.std > 1e-3);
            let shifted: Vec<f64> = h.iter().map(|x| x + shift).collect();
            let s2 = entropy_stats(&shifted).unwrap();
            let a = gate_weights(&h, &s, 1.0, 1e-8);
            let b = gate_weights(&shifted, &s2, 1.0, 1e-8);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
