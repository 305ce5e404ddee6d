//! Group advantages, outcome-anchored process rewards and the final
//! token-level advantage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::PromptGroup;
use crate::stats::{mean_and_std, sgn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Sequence-level advantage broadcast to every token.
    Grpo,
    /// Entropy-gated, bucket-normalized, outcome-anchored token advantages.
    Erpo,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Grpo => "grpo",
            Mode::Erpo => "erpo",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "grpo" => Ok(Mode::Grpo),
            "erpo" => Ok(Mode::Erpo),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected grpo or erpo)"))),
        }
    }
}

/// Per-token advantages of one group. `values[i][t]` is zero wherever the mask
/// of rollout `i` is off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTensor {
    pub mode: Mode,
    pub values: Vec<Vec<f64>>,
    pub group_advantages: Vec<f64>,
}

impl AdvantageTensor {
    /// Values at active positions, rollout-major.
    pub fn active_values(&self, group: &PromptGroup) -> Vec<f64> {
        group.gather_active(|i, t| self.values[i][t])
    }

    /// Checks that the tensor has one value per token of every rollout.
    pub fn check_alignment(&self, group: &PromptGroup) -> Result<()> {
        if self.values.len() != group.size() {
            return Err(Error::Misaligned(format!(
                "{} advantage rows for {} rollouts",
                self.values.len(),
                group.size()
            )));
        }
        for (i, (row, r)) in self.values.iter().zip(&group.rollouts).enumerate() {
            if row.len() != r.len() {
                return Err(Error::Misaligned(format!(
                    "rollout {i}: {} advantages for {} tokens",
                    row.len(),
                    r.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Misaligned(format!("rollout {i}: non-finite advantage")));
            }
        }
        Ok(())
    }
}

/// `(r_i - mean(r)) / (std(r) + delta)` with the population std.
pub fn group_advantage(rewards: &[f64], delta: f64) -> Vec<f64> {
    let (m, s) = mean_and_std(rewards);
    rewards.iter().map(|r| (r - m) / (s + delta)).collect()
}

/// Broadcasts per-rollout advantages onto active tokens.
pub fn broadcast(group: &PromptGroup, per_rollout: &[f64]) -> Vec<Vec<f64>> {
    group
        .rollouts
        .iter()
        .zip(per_rollout)
        .map(|(r, &a)| r.active_mask.iter().map(|&m| if m { a } else { 0.0 }).collect())
        .collect()
}

/// Process reward with its rescaling factor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredPsi {
    /// `gate * sgn(group advantage) * normalized progress`, before rescaling.
    pub raw: Vec<Vec<f64>>,
    /// Population std of `raw` over active positions.
    pub raw_std: f64,
    /// `target_std * raw / (raw_std + delta)`.
    pub psi: Vec<Vec<f64>>,
}

/// Outcome-anchored process reward: the sign of the rollout's group advantage
/// decides whether a confident token is credited or penalized, and the result
/// is rescaled to a target standard deviation over the group's active tokens.
pub fn anchored_psi(
    group: &PromptGroup,
    gates: &[Vec<f64>],
    group_advantages: &[f64],
    normalized_progress: &[Vec<f64>],
    target_std: f64,
    delta: f64,
) -> AnchoredPsi {
    let raw: Vec<Vec<f64>> = group
        .rollouts
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let sign = sgn(group_advantages[i]);
            (0..r.len())
                .map(|t| if r.active_mask[t] { gates[i][t] * sign * normalized_progress[i][t] } else { 0.0 })
                .collect()
        })
        .collect();
    let active = group.gather_active(|i, t| raw[i][t]);
    let (_, raw_std) = mean_and_std(&active);
    let scale = target_std / (raw_std + delta);
    let psi = raw.iter().map(|row| row.iter().map(|v| v * scale).collect()).collect();
    AnchoredPsi { raw, raw_std, psi }
}

/// `group_advantage_i + mix_weight * psi_{i,t}` at active tokens.
pub fn combine(group: &PromptGroup, group_advantages: &[f64], psi: &[Vec<f64>], mix_weight: f64) -> Vec<Vec<f64>> {
    group
        .rollouts
        .iter()
        .enumerate()
        .map(|(i, r)| {
            (0..r.len())
                .map(|t| if r.active_mask[t] { group_advantages[i] + mix_weight * psi[i][t] } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Token-level z-score over all active positions of the group. Returns the
/// normalized values with the mean and std that were divided out.
pub fn normalize_tokens(group: &PromptGroup, values: &[Vec<f64>], delta: f64) -> (Vec<Vec<f64>>, f64, f64) {
    let active = group.gather_active(|i, t| values[i][t]);
    let (m, s) = mean_and_std(&active);
    let out = group
        .rollouts
        .iter()
        .zip(values)
        .map(|(r, row)| {
            row.iter()
                .zip(&r.active_mask)
                .map(|(v, &on)| if on { (v - m) / (s + delta) } else { 0.0 })
                .collect()
        })
        .collect();
    (out, m, s)
}

/// Final ERPO advantage: token-level z-score of the combined advantage.
pub fn final_advantage(
    group: &PromptGroup,
    group_advantages: &[f64],
    psi: &[Vec<f64>],
    mix_weight: f64,
    delta: f64,
) -> AdvantageTensor {
    let combined = combine(group, group_advantages, psi, mix_weight);
    let (values, _, _) = normalize_tokens(group, &combined, delta);
    AdvantageTensor { mode: Mode::Erpo, values, group_advantages: group_advantages.to_vec() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::fixtures::{rollout_of_len, rollout_with_mask};

    fn group(lens: &[usize], rewards: &[f64]) -> PromptGroup {
        PromptGroup {
            prompt_id: 0,
            rollouts: lens.iter().map(|&n| rollout_of_len(0, n)).collect(),
            rewards: rewards.to_vec(),
        }
    }

    #[test]
    fn group_advantage_reference_values() {
        let a = group_advantage(&[1.0, 1.0, 0.0, 0.0], 1e-8);
        for (x, e) in a.iter().zip([1.0, 1.0, -1.0, -1.0]) {
            assert!((x - e).abs() < 1e-7);
        }
        assert_eq!(group_advantage(&[1.0; 4], 1e-8), vec![0.0; 4]);
        let a = group_advantage(&[1.0, 0.0, 0.0, 0.0], 1e-12);
        let expected = [1.732051, -0.577350, -0.577350, -0.577350];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 1e-6, "{x} vs {e}");
        }
    }

    #[test]
    fn tied_group_has_zero_psi() {
        let g = group(&[3, 2], &[1.0, 1.0]);
        let gates = vec![vec![0.7; 3], vec![0.2; 2]];
        let s = vec![vec![1.0, -1.0, 0.5], vec![2.0, -2.0]];
        let p = anchored_psi(&g, &gates, &[0.0, 0.0], &s, 1.0, 1e-8);
        assert!(p.psi.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn psi_rescales_to_target_std() {
        let g = group(&[1, 1], &[1.0, 0.0]);
        let gates = vec![vec![1.0], vec![1.0]];
        // sgn(+), sgn(-) applied to s = +1, +1 gives raw {+1, -1}
        let s = vec![vec![1.0], vec![1.0]];
        let p = anchored_psi(&g, &gates, &[1.0, -1.0], &s, 1.0, 1e-8);
        assert!((p.psi[0][0] - 1.0).abs() < 1e-7 && (p.psi[1][0] + 1.0).abs() < 1e-7);

        let s = vec![vec![2.0], vec![2.0]];
        let p = anchored_psi(&g, &gates, &[1.0, -1.0], &s, 0.5, 1e-8);
        assert_eq!(p.raw_std, 2.0);
        assert!((p.psi[0][0] - 0.5).abs() < 1e-8 && (p.psi[1][0] + 0.5).abs() < 1e-8);
    }

    #[test]
    fn failing_rollouts_flip_process_credit() {
        let g = group(&[2, 2], &[1.0, 0.0]);
        let gates = vec![vec![0.6, 0.4]; 2];
        let s = vec![vec![1.0, -0.5], vec![1.0, -0.5]];
        let p = anchored_psi(&g, &gates, &[1.0, -1.0], &s, 1.0, 1e-8);
        for t in 0..2 {
            assert_eq!(p.psi[0][t].signum(), (s[0][t]).signum());
            assert_eq!(p.psi[1][t].signum(), -(s[1][t]).signum());
        }
    }

    #[test]
    fn zero_mix_weight_is_affine_in_group_advantage() {
        let g = group(&[4, 4], &[1.0, 0.0]);
        let ga = group_advantage(&g.rewards, 1e-8);
        let psi = vec![vec![0.3, -1.0, 2.0, 0.1], vec![-0.2, 0.0, 0.4, 1.0]];
        let adv = final_advantage(&g, &ga, &psi, 0.0, 1e-8);
        assert!(adv.values[0].iter().all(|&v| (v - adv.values[0][0]).abs() < 1e-12));
        assert!(adv.values[0][0] > adv.values[1][0]);
    }

    #[test]
    fn mix_weight_reorders_tied_tokens() {
        let g = group(&[2, 2], &[1.0, 1.0]);
        let ga = group_advantage(&g.rewards, 1e-8);
        let psi = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
        let adv = final_advantage(&g, &ga, &psi, 0.1, 1e-8);
        // combined = [0.1, 0, 0, -0.1]; mean 0, std sqrt(0.005)
        let sd = 0.005f64.sqrt();
        assert!((adv.values[0][0] - 0.1 / (sd + 1e-8)).abs() < 1e-9);
        assert!(adv.values[0][0] > adv.values[1][1]);
    }

    #[test]
    fn final_advantage_is_zero_sum_unit_variance() {
        let g = group(&[3, 5, 2], &[1.0, 0.0, 0.0]);
        let ga = group_advantage(&g.rewards, 1e-8);
        let psi = vec![vec![0.1, -0.3, 0.7], vec![1.0, 0.5, -1.0, 0.0, 0.2], vec![-0.4, 0.9]];
        let adv = final_advantage(&g, &ga, &psi, 0.3, 1e-8);
        let active = adv.active_values(&g);
        let (m, s) = mean_and_std(&active);
        assert!(m.abs() < 1e-12);
        assert!((s * s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_combined_advantage_maps_to_zero() {
        let g = group(&[2, 2], &[0.0, 0.0]);
        let adv = final_advantage(&g, &[0.0, 0.0], &[vec![0.0; 2], vec![0.0; 2]], 0.1, 1e-8);
        assert!(adv.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn inactive_positions_stay_zero() {
        let g = PromptGroup {
            prompt_id: 0,
            rollouts: vec![rollout_with_mask(0, &[true, false, true]), rollout_with_mask(0, &[true])],
            rewards: vec![1.0, 0.0],
        };
        let ga = group_advantage(&g.rewards, 1e-8);
        let psi = vec![vec![0.5, 9.0, -0.5], vec![0.2]];
        let adv = final_advantage(&g, &ga, &psi, 0.5, 1e-8);
        assert_eq!(adv.values[0][1], 0.0);
        adv.check_alignment(&g).unwrap();
        assert_eq!(adv.active_values(&g).len(), 3);
    }

    #[test]
    fn mode_parses_case_insensitively() {
        assert_eq!("ERPO".parse::<Mode>().unwrap(), Mode::Erpo);
        assert_eq!(Mode::Grpo.to_string(), "grpo");
        assert!("ppo".parse::<Mode>().is_err());
    }
}
