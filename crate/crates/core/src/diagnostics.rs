//! Token-level diagnostics: predictive entropy and the implicit progress
//! signal relative to the frozen reference policy.

use crate::error::{Error, Result};
use crate::rollout::{PromptGroup, Rollout};

/// Entropy and progress signal of every token of one rollout. Inactive
/// positions hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSignals {
    pub entropy: Vec<f64>,
    pub progress: Vec<f64>,
}

const NORMALIZATION_TOL: f64 = 1e-9;

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn token_entropy(dist: &[f64]) -> Result<f64> {
    if dist.is_empty() {
        return Err(Error::Validation("empty distribution".into()));
    }
    if dist.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Validation("probabilities must be finite and >= 0".into()));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Validation(format!("distribution sums to {total}, not 1")));
    }
    Ok(entropy_unchecked(dist))
}

pub(crate) fn entropy_unchecked(dist: &[f64]) -> f64 {
    let h: f64 = dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

/// `beta * (logp_current - logp_ref)`.
pub fn progress_signal(logp_current: f64, logp_ref: f64, progress_scale: f64) -> Result<f64> {
    if !(logp_current <= 0.0) || !(logp_ref <= 0.0) {
        return Err(Error::Validation("log-probabilities must be <= 0".into()));
    }
    if !(progress_scale > 0.0) {
        return Err(Error::Validation("progress scale must be > 0".into()));
    }
    Ok(progress_scale * (logp_current - logp_ref))
}

/// Computes both signals for one rollout from the sampling distributions.
pub fn annotate_rollout(
    rollout: &Rollout,
    distributions: &[Vec<f64>],
    logp_ref: &[f64],
    progress_scale: f64,
) -> Result<TokenSignals> {
    let n = rollout.len();
    if distributions.len() != n || logp_ref.len() != n {
        return Err(Error::Structural(format!(
            "{n} tokens but {} distributions and {} reference log-probs",
            distributions.len(),
            logp_ref.len()
        )));
    }
    let mut entropy = vec![0.0; n];
    let mut progress = vec![0.0; n];
    for t in 0..n {
        if !rollout.active_mask[t] {
            continue;
        }
        entropy[t] = token_entropy(&distributions[t])?;
        progress[t] = progress_signal(rollout.logp_current[t], logp_ref[t], progress_scale)?;
    }
    Ok(TokenSignals { entropy, progress })
}

/// Signals for every rollout of a group, read from the quantities recorded on
/// the rollouts themselves (sampling-time entropy, current and reference
/// log-probs).
pub fn group_signals(group: &PromptGroup, progress_scale: f64) -> Result<Vec<TokenSignals>> {
    group
        .rollouts
        .iter()
        .map(|r| {
            let mut entropy = vec![0.0; r.len()];
            let mut progress = vec![0.0; r.len()];
            for t in 0..r.len() {
                if r.active_mask[t] {
                    entropy[t] = r.entropy[t];
                    progress[t] = progress_signal(r.logp_current[t], r.logp_ref[t], progress_scale)?;
                }
            }
            Ok(TokenSignals { entropy, progress })
        })
        .collect()
}
