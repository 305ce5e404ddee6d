//! Rollouts, prompt groups and the hyperparameters shared by the pipeline.
//!
//! A [`PromptGroup`] is the unit over which every normalization runs: the
//! group advantage, entropy gating, bucket statistics and the final z-score
//! all pool tokens of the `G` rollouts sampled for a single prompt and never
//! look across groups.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = usize;

/// One sampled response together with the per-token quantities recorded at
/// sampling time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt_id: usize,
    pub tokens: Vec<Token>,
    /// Log-probability of each token under the policy being optimized.
    pub logp_current: Vec<f64>,
    /// Log-probability under the policy that generated the rollout.
    pub logp_old: Vec<f64>,
    /// Log-probability under the frozen reference policy.
    pub logp_ref: Vec<f64>,
    /// Entropy (nats) of the sampling distribution at each step.
    pub entropy: Vec<f64>,
    /// `true` for generated, non-padding tokens.
    pub active_mask: Vec<bool>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of active tokens.
    pub fn active_len(&self) -> usize {
        self.active_mask.iter().filter(|&&m| m).count()
    }

    /// Checks the per-rollout invariants. `index` is only used for error
    /// messages.
    pub fn validate(&self, index: usize) -> Result<()> {
        let n = self.tokens.len();
        let lens = [
            ("logp_current", self.logp_current.len()),
            ("logp_old", self.logp_old.len()),
            ("logp_ref", self.logp_ref.len()),
            ("entropy", self.entropy.len()),
            ("active_mask", self.active_mask.len()),
        ];
        for (name, len) in lens {
            if len != n {
                return Err(Error::Structural(format!(
                    "rollout {index}: {name} has {len} entries, tokens has {n}"
                )));
            }
        }
        let logps = self.logp_current.iter().chain(&self.logp_old).chain(&self.logp_ref);
        if logps.clone().any(|&l| !(l <= 0.0)) {
            return Err(Error::Validation(format!(
                "rollout {index}: log-probabilities must be finite and <= 0"
            )));
        }
        if self.entropy.iter().any(|&h| !(h >= 0.0) || !h.is_finite()) {
            return Err(Error::Validation(format!(
                "rollout {index}: entropies must be finite and >= 0"
            )));
        }
        if !self.active_mask.iter().any(|&m| m) {
            return Err(Error::EmptyRollout { index });
        }
        Ok(())
    }
}

/// The `G` rollouts sampled for one prompt plus their verifiable rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptGroup {
    pub prompt_id: usize,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
}

impl PromptGroup {
    pub fn size(&self) -> usize {
        self.rollouts.len()
    }

    /// Total number of active tokens across the group.
    pub fn active_count(&self) -> usize {
        self.rollouts.iter().map(Rollout::active_len).sum()
    }

    /// Gathers `field(rollout, token)` over active positions, in
    /// [`active_positions`] order.
    pub fn gather_active(&self, field: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.active_count());
        for (i, r) in self.rollouts.iter().enumerate() {
            for t in 0..r.len() {
                if r.active_mask[t] {
                    out.push(field(i, t));
                }
            }
        }
        out
    }
}

/// Validates and assembles a group. No padding is applied: rollouts keep their
/// own lengths.
pub fn build_group(prompt_id: usize, rollouts: Vec<Rollout>, rewards: Vec<f64>) -> Result<PromptGroup> {
    if rollouts.len() != rewards.len() {
        return Err(Error::Structural(format!(
            "{} rollouts but {} rewards",
            rollouts.len(),
            rewards.len()
        )));
    }
    if rollouts.len() < 2 {
        return Err(Error::DegenerateGroup { size: rollouts.len() });
    }
    for (i, r) in rollouts.iter().enumerate() {
        if r.prompt_id != prompt_id {
            return Err(Error::Structural(format!(
                "rollout {i} belongs to prompt {} not {prompt_id}",
                r.prompt_id
            )));
        }
        r.validate(i)?;
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Validation("rewards must be finite".into()));
    }
    Ok(PromptGroup { prompt_id, rollouts, rewards })
}

/// Enumerates `(rollout, token)` positions whose mask is set, rollout-major.
pub fn active_positions(group: &PromptGroup) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (i, r) in group.rollouts.iter().enumerate() {
        let before = out.len();
        out.extend(r.active_mask.iter().enumerate().filter(|(_, &m)| m).map(|(t, _)| (i, t)));
        if out.len() == before {
            return Err(Error::EmptyRollout { index: i });
        }
    }
    Ok(out)
}

/// Hyperparameters of the advantage pipeline and the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub group_size: usize,
    pub buckets: usize,
    /// Sharpness of the entropy gate.
    pub gating_scale: f64,
    pub progress_scale: f64,
    /// Weight of the process term in the combined advantage.
    pub mix_weight: f64,
    pub target_std: f64,
    /// Stability constant added to every standard deviation.
    pub stability_const: f64,
    pub clip: f64,
    pub kl_coeff: f64,
    /// Decay of the cross-step entropy moving average. `None` uses plain
    /// per-group statistics.
    pub entropy_ema_decay: Option<f64>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            group_size: 8,
            buckets: 8,
            gating_scale: 1.0,
            progress_scale: 0.1,
            mix_weight: 0.1,
            target_std: 1.0,
            stability_const: 1e-8,
            clip: 0.2,
            kl_coeff: 0.0,
            entropy_ema_decay: None,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.buckets < 1 {
            return bad("buckets must be >= 1");
        }
        if !(self.stability_const > 0.0) {
            return bad("stability_const must be > 0");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(self.target_std > 0.0) {
            return bad("target_std must be > 0");
        }
        if !(self.progress_scale > 0.0) {
            return bad("progress_scale must be > 0");
        }
        if !(self.kl_coeff >= 0.0) {
            return bad("kl_coeff must be >= 0");
        }
        if let Some(d) = self.entropy_ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad("entropy_ema_decay must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

/// One line of the replay format: a rollout, its reward and optionally the
/// advantages computed for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub prompt_id: usize,
    pub tokens: Vec<Token>,
    pub logp_current: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub entropy: Vec<f64>,
    pub mask: Vec<bool>,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantages: Option<Vec<f64>>,
}

impl RolloutRecord {
    fn new(r: &Rollout, reward: f64, advantages: Option<Vec<f64>>) -> Self {
        Self {
            prompt_id: r.prompt_id,
            tokens: r.tokens.clone(),
            logp_current: r.logp_current.clone(),
            logp_old: r.logp_old.clone(),
            logp_ref: r.logp_ref.clone(),
            entropy: r.entropy.clone(),
            mask: r.active_mask.clone(),
            reward,
            advantages,
        }
    }

    fn into_rollout(self) -> (Rollout, f64, Option<Vec<f64>>) {
        let rollout = Rollout {
            prompt_id: self.prompt_id,
            tokens: self.tokens,
            logp_current: self.logp_current,
            logp_old: self.logp_old,
            logp_ref: self.logp_ref,
            entropy: self.entropy,
            active_mask: self.mask,
        };
        (rollout, self.reward, self.advantages)
    }
}

/// Writes groups one rollout per line. `advantages`, when given, must hold one
/// dense per-token vector per rollout of every group (inactive slots ignored).
pub fn write_groups<W: Write>(
    mut out: W,
    groups: &[PromptGroup],
    advantages: Option<&[Vec<Vec<f64>>]>,
) -> Result<()> {
    for (g, group) in groups.iter().enumerate() {
        for (i, r) in group.rollouts.iter().enumerate() {
            let adv = advantages.map(|a| a[g][i].clone());
            let line = serde_json::to_string(&RolloutRecord::new(r, group.rewards[i], adv))
                .map_err(|e| Error::Validation(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

/// Groups read back from the replay format, with any attached advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayGroup {
    pub group: PromptGroup,
    pub advantages: Option<Vec<Vec<f64>>>,
}

/// Reads the replay format. Consecutive lines sharing a `prompt_id` form one
/// group.
pub fn read_groups<R: BufRead>(input: R) -> Result<Vec<ReplayGroup>> {
    let mut pending: Vec<(Rollout, f64, Option<Vec<f64>>)> = Vec::new();
    let mut out = Vec::new();

    fn flush(pending: &mut Vec<(Rollout, f64, Option<Vec<f64>>)>, out: &mut Vec<ReplayGroup>) -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let prompt_id = pending[0].0.prompt_id;
        let with_adv = pending.iter().all(|p| p.2.is_some());
        let mut rollouts = Vec::new();
        let mut rewards = Vec::new();
        let mut advs = Vec::new();
        for (r, w, a) in pending.drain(..) {
            rollouts.push(r);
            rewards.push(w);
            advs.push(a.unwrap_or_default());
        }
        let group = build_group(prompt_id, rollouts, rewards)?;
        out.push(ReplayGroup { group, advantages: with_adv.then_some(advs) });
        Ok(())
    }

    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RolloutRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno + 1, message: e.to_string() })?;
        if pending.first().is_some_and(|p| p.0.prompt_id != rec.prompt_id) {
            flush(&mut pending, &mut out)?;
        }
        pending.push(rec.into_rollout());
    }
    flush(&mut pending, &mut out)?;
    Ok(out)
}
