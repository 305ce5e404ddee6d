//! Numerical checks of the theoretical properties of the ERPO advantage.
//!
//! **Potential view.** With every normalization statistic frozen, the process
//! term is a weighted squared log-ratio. Write `d = log pi_theta - log pi_ref`
//! at a sampled token, `beta` for the progress scale, `(m_k, s_k)` for the
//! moments of its progress bucket and
//!
//! ```text
//! Lambda   = target_std * W * sgn(A_group) / (std(psi) + delta)
//! Lambda~  = Lambda / (s_k + delta)
//! c        = m_k / beta
//! F(theta) = (eta * beta / 2) * sum Lambda~ * (d - c)^2
//! ```
//!
//! Then `eta * Psi = eta * Lambda~ * (beta * d - m_k)` is exactly the
//! derivative of `F` with respect to `log pi_theta`. The on-policy surrogate
//! gradient of the combined advantage therefore splits as
//! `grad J_erpo = grad J_grpo + grad F`. The centre `c` and the bucket scale
//! come from bucket normalization; with `c = 0` and unit scale `F` reduces to
//! [`potential_value`].
//!
//! **Conservation.** The final z-score makes the advantages of each group sum
//! to zero with unit variance.
//!
//! **Causality.** Entropy and progress at position `t` depend only on the
//! prefix up to `t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::loss_and_grad;
use crate::policy::{accumulate_logprob_grad, forward, FeatureLayout, PolicyParams, SampleOptions};
use crate::rollout::{build_group, HyperParams, PromptGroup, Rollout, Token};
use crate::stats::{mean_and_std, sgn};
use crate::synthesis::{broadcast, AdvantageTensor, Mode};
use crate::trainer::{erpo_breakdown, AdvantageBreakdown};

/// `target_std * W * sgn(A_i) / (std_psi + delta)` per token.
pub fn lambda_coefficients(
    gates: &[Vec<f64>],
    group_advantages: &[f64],
    std_psi: f64,
    target_std: f64,
    delta: f64,
) -> Vec<Vec<f64>> {
    gates
        .iter()
        .zip(group_advantages)
        .map(|(row, &a)| row.iter().map(|w| target_std * w * sgn(a) / (std_psi + delta)).collect())
        .collect()
}

fn active_logps(params: &PolicyParams, group: &PromptGroup) -> Result<Vec<Vec<f64>>> {
    group.rollouts.iter().map(|r| Ok(forward(params, group.prompt_id, &r.tokens)?.logp)).collect()
}

/// `(eta * beta / 2) * sum Lambda * (log pi_theta - log pi_ref)^2` over active
/// tokens.
pub fn potential_value(
    params: &PolicyParams,
    reference_logp: &[Vec<f64>],
    group: &PromptGroup,
    lambda: &[Vec<f64>],
    mix_weight: f64,
    progress_scale: f64,
) -> Result<f64> {
    let logp = active_logps(params, group)?;
    let mut total = 0.0;
    for (i, r) in group.rollouts.iter().enumerate() {
        for t in 0..r.len() {
            if r.active_mask[t] {
                let d = logp[i][t] - reference_logp[i][t];
                total += lambda[i][t] * d * d;
            }
        }
    }
    Ok(0.5 * mix_weight * progress_scale * total)
}

/// Analytic gradient of [`potential_value`] with `Lambda` held fixed.
pub fn potential_gradient(
    params: &PolicyParams,
    reference_logp: &[Vec<f64>],
    group: &PromptGroup,
    lambda: &[Vec<f64>],
    mix_weight: f64,
    progress_scale: f64,
) -> Result<Vec<f64>> {
    let frozen = FrozenPotential {
        weight: lambda.to_vec(),
        centre: lambda.iter().map(|row| vec![0.0; row.len()]).collect(),
        reference_logp: reference_logp.to_vec(),
        mix_weight,
        progress_scale,
    };
    frozen.gradient(params, group)
}

/// Frozen coefficients of the potential, including bucket normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPotential {
    /// `Lambda / (s_k + delta)`.
    pub weight: Vec<Vec<f64>>,
    /// `m_k / beta`.
    pub centre: Vec<Vec<f64>>,
    pub reference_logp: Vec<Vec<f64>>,
    pub mix_weight: f64,
    pub progress_scale: f64,
}

/// How [`freeze_potential`] treats the bucket statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Freezing {
    #[default]
    Exact,
    /// Drops the bucket scale and centre; used to show the check catches a
    /// wrongly frozen coefficient.
    IgnoreBuckets,
}

pub fn freeze_potential(
    group: &PromptGroup,
    breakdown: &AdvantageBreakdown,
    hyper: &HyperParams,
    freezing: Freezing,
) -> FrozenPotential {
    let delta = hyper.stability_const;
    let lambda = lambda_coefficients(
        &breakdown.gates,
        &breakdown.group_advantages,
        breakdown.psi.raw_std,
        hyper.target_std,
        delta,
    );
    let mut weight = lambda.clone();
    let mut centre: Vec<Vec<f64>> = lambda.iter().map(|row| vec![0.0; row.len()]).collect();
    if freezing == Freezing::Exact {
        for (i, r) in group.rollouts.iter().enumerate() {
            for t in 0..r.len() {
                if let Some(cell) = breakdown.buckets.cells[breakdown.buckets.index[i][t]] {
                    weight[i][t] = lambda[i][t] / (cell.std + delta);
                    centre[i][t] = cell.mean / hyper.progress_scale;
                }
            }
        }
    }
    FrozenPotential {
        weight,
        centre,
        reference_logp: group.rollouts.iter().map(|r| r.logp_ref.clone()).collect(),
        mix_weight: hyper.mix_weight,
        progress_scale: hyper.progress_scale,
    }
}

impl FrozenPotential {
    pub fn value(&self, params: &PolicyParams, group: &PromptGroup) -> Result<f64> {
        let logp = active_logps(params, group)?;
        let mut total = 0.0;
        for (i, r) in group.rollouts.iter().enumerate() {
            for t in 0..r.len() {
                if r.active_mask[t] {
                    let d = logp[i][t] - self.reference_logp[i][t] - self.centre[i][t];
                    total += self.weight[i][t] * d * d;
                }
            }
        }
        Ok(0.5 * self.mix_weight * self.progress_scale * total)
    }

    pub fn gradient(&self, params: &PolicyParams, group: &PromptGroup) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; params.param_count()];
        let k = self.mix_weight * self.progress_scale;
        for (i, r) in group.rollouts.iter().enumerate() {
            let fwd = forward(params, group.prompt_id, &r.tokens)?;
            let coeffs: Vec<f64> = (0..r.len())
                .map(|t| {
                    if r.active_mask[t] {
                        k * self.weight[i][t] * (fwd.logp[t] - self.reference_logp[i][t] - self.centre[i][t])
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate_logprob_grad(params, group.prompt_id, &r.tokens, &fwd, &coeffs, &mut grad);
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_abs_deviation: f64,
    pub relative_deviation: f64,
    /// Relative deviation of the normalized-advantage gradient from the
    /// affine rescaling of the combined-advantage gradient.
    pub normalized_relative_deviation: f64,
    pub param_count: usize,
    pub trials: usize,
}

impl EquivalenceReport {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn passes(&self) -> bool {
        self.relative_deviation <= Self::TOLERANCE && self.normalized_relative_deviation <= Self::TOLERANCE
    }

    /// Worst case over both reports.
    pub fn merge(self, other: Self) -> Self {
        Self {
            max_abs_deviation: self.max_abs_deviation.max(other.max_abs_deviation),
            relative_deviation: self.relative_deviation.max(other.relative_deviation),
            normalized_relative_deviation: self.normalized_relative_deviation.max(other.normalized_relative_deviation),
            param_count: self.param_count.max(other.param_count),
            trials: self.trials + other.trials,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative(a: &[f64], b: &[f64]) -> (f64, f64) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let max_abs = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let scale = norm(a).max(norm(b));
    let rel = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
    (max_abs, rel)
}

/// Gradient of the summed (unnormalized) surrogate for a fixed advantage
/// tensor, read back from the loss.
fn surrogate_sum_grad(params: &PolicyParams, group: &PromptGroup, values: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let adv = AdvantageTensor { mode: Mode::Erpo, values, group_advantages: vec![0.0; group.size()] };
    let (b, grad) = loss_and_grad(params, group, &adv, 0.2, 0.0)?;
    let n = b.normalizer as f64;
    Ok(grad.into_iter().map(|g| -g * n).collect())
}

/// Compares the gradient of the combined ERPO advantage with the GRPO
/// gradient plus the gradient of the frozen potential, and the gradient of the
/// final z-scored advantage with its affine form.
pub fn gradient_equivalence_check(
    params: &PolicyParams,
    group: &PromptGroup,
    hyper: &HyperParams,
    freezing: Freezing,
) -> Result<EquivalenceReport> {
    if hyper.kl_coeff != 0.0 {
        return Err(Error::InvalidRegime("the identity holds without the KL penalty".into()));
    }
    for (i, r) in group.rollouts.iter().enumerate() {
        let logp = forward(params, group.prompt_id, &r.tokens)?.logp;
        let off = logp
            .iter()
            .zip(&r.logp_old)
            .zip(&r.logp_current)
            .any(|((&now, &old), &cur)| (now - old).abs() > 1e-12 || (now - cur).abs() > 1e-12);
        if off {
            return Err(Error::InvalidRegime(format!("rollout {i} is not on-policy at these parameters")));
        }
    }
    let breakdown = erpo_breakdown(group, hyper, None)?;
    let lhs = surrogate_sum_grad(params, group, breakdown.combined.clone())?;
    let grpo = surrogate_sum_grad(params, group, broadcast(group, &breakdown.group_advantages))?;
    let frozen = freeze_potential(group, &breakdown, hyper, freezing);
    let potential = frozen.gradient(params, group)?;
    let rhs: Vec<f64> = grpo.iter().zip(&potential).map(|(a, b)| a + b).collect();
    let (max_abs, rel) = relative(&lhs, &rhs);

    let normalized = surrogate_sum_grad(params, group, breakdown.advantages.values.clone())?;
    let mask_sum = surrogate_sum_grad(params, group, broadcast(group, &vec![1.0; group.size()]))?;
    let scale = breakdown.combined_std + hyper.stability_const;
    let affine: Vec<f64> =
        lhs.iter().zip(&mask_sum).map(|(l, s)| (l - breakdown.combined_mean * s) / scale).collect();
    let (_, norm_rel) = relative(&normalized, &affine);

    Ok(EquivalenceReport {
        max_abs_deviation: max_abs,
        relative_deviation: rel,
        normalized_relative_deviation: norm_rel,
        param_count: params.param_count(),
        trials: 1,
    })
}

/// Realized sum and population variance of the advantages over active
/// positions.
pub fn zero_sum_check(group: &PromptGroup, advantages: &AdvantageTensor) -> (f64, f64) {
    let active = advantages.active_values(group);
    let sum: f64 = active.iter().sum();
    let (_, sd) = mean_and_std(&active);
    (sum, sd * sd)
}

/// Entropy and progress at every position of `tokens`, computed from scratch.
pub fn prefix_signals(
    params: &PolicyParams,
    reference: &PolicyParams,
    prompt: usize,
    tokens: &[Token],
    progress_scale: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cur = forward(params, prompt, tokens)?;
    let refp = forward(reference, prompt, tokens)?;
    let progress = cur.logp.iter().zip(&refp.logp).map(|(a, b)| progress_scale * (a - b)).collect();
    Ok((cur.entropies(), progress))
}

/// `true` iff, for every rollout and position `t`, replacing all tokens after
/// `t` leaves the entropy and progress at `t` bitwise unchanged.
pub fn causality_probe<R: Rng + ?Sized>(
    params: &PolicyParams,
    reference: &PolicyParams,
    group: &PromptGroup,
    progress_scale: f64,
    rng: &mut R,
) -> Result<bool> {
    let vocab = params.layout.vocab;
    for r in &group.rollouts {
        let (h, s) = prefix_signals(params, reference, group.prompt_id, &r.tokens, progress_scale)?;
        for t in 0..r.len().saturating_sub(1) {
            let mut alt = r.tokens.clone();
            for tok in &mut alt[t + 1..] {
                let x = rng.gen_range(0..vocab - 1);
                *tok = if x >= *tok { x + 1 } else { x };
            }
            let (h2, s2) = prefix_signals(params, reference, group.prompt_id, &alt, progress_scale)?;
            if h2[t].to_bits() != h[t].to_bits() || s2[t].to_bits() != s[t].to_bits() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// A random small policy, a nearby reference and one on-policy group.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub group: PromptGroup,
}

/// Draws an instance with at most 500 parameters. Lengths vary within the
/// group, some tokens are masked out and rewards are never all equal.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, group_size: usize) -> Instance {
    let layout = FeatureLayout::new(rng.gen_range(1..=3), rng.gen_range(3..=6), rng.gen_range(4..=8));
    let mut reference = PolicyParams::zeros(layout);
    reference.weights.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
    let mut params = reference.clone();
    params.weights.iter_mut().for_each(|w| *w += rng.gen_range(-0.6..0.6));
    let prompt = rng.gen_range(0..layout.prompts);
    let rollouts: Vec<Rollout> = (0..group_size)
        .map(|_| {
            let opts = SampleOptions { max_len: rng.gen_range(2..=layout.max_len), stop: None };
            let mut r = crate::policy::sample_rollout(&params, &reference, prompt, rng, opts);
            for t in 0..r.len() {
                r.active_mask[t] = rng.gen_bool(0.85);
            }
            let keep = rng.gen_range(0..r.len());
            r.active_mask[keep] = true;
            r
        })
        .collect();
    let mut rewards: Vec<f64> = (0..group_size).map(|_| rng.gen_range(0..2) as f64).collect();
    if rewards.iter().all(|&x| x == rewards[0]) {
        rewards[0] = 1.0 - rewards[0];
    }
    let group = build_group(prompt, rollouts, rewards).expect("sampled rollouts are well formed");
    Instance { params, reference, group }
}

/// Options of the full suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub trials: usize,
    pub zero_sum_groups: usize,
    pub hyper: HyperParams,
    pub freezing: Freezing,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { trials: 100, zero_sum_groups: 1000, hyper: HyperParams::default(), freezing: Freezing::Exact }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub equivalence: EquivalenceReport,
    pub zero_sum_groups: usize,
    /// Worst `|sum| / N` over the groups.
    pub max_sum_per_token: f64,
    pub max_variance_deviation: f64,
    pub causality_ok: bool,
}

impl SuiteReport {
    pub fn equivalence_ok(&self) -> bool {
        self.equivalence.passes()
    }

    pub fn zero_sum_ok(&self) -> bool {
        self.max_sum_per_token <= 1e-9 && self.max_variance_deviation <= 1e-6
    }

    pub fn passes(&self) -> bool {
        self.equivalence_ok() && self.zero_sum_ok() && self.causality_ok
    }

    pub fn lines(&self) -> Vec<String> {
        let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let e = &self.equivalence;
        vec![
            format!(
                "{} gradient_equivalence trials={} params<={} max_abs={:.3e} relative={:.3e} normalized_relative={:.3e}",
                verdict(self.equivalence_ok()),
                e.trials,
                e.param_count,
                e.max_abs_deviation,
                e.relative_deviation,
                e.normalized_relative_deviation
            ),
            format!(
                "{} zero_sum groups={} max_sum_per_token={:.3e} max_variance_deviation={:.3e}",
                verdict(self.zero_sum_ok()),
                self.zero_sum_groups,
                self.max_sum_per_token,
                self.max_variance_deviation
            ),
            format!("{} causality", verdict(self.causality_ok)),
        ]
    }
}

/// Runs every check on freshly drawn instances.
pub fn run_suite<R: Rng + ?Sized>(options: &SuiteOptions, rng: &mut R) -> Result<SuiteReport> {
    let hyper = &options.hyper;
    hyper.validate()?;
    let mut equivalence: Option<EquivalenceReport> = None;
    let mut causality_ok = true;
    for _ in 0..options.trials {
        let size = rng.gen_range(2..=8);
        let inst = random_instance(rng, size);
        let rep = gradient_equivalence_check(&inst.params, &inst.group, hyper, options.freezing)?;
        equivalence = Some(match equivalence {
            Some(acc) => acc.merge(rep),
            None => rep,
        });
        causality_ok &= causality_probe(&inst.params, &inst.reference, &inst.group, hyper.progress_scale, rng)?;
    }
    let mut max_sum = 0.0f64;
    let mut max_var = 0.0f64;
    for _ in 0..options.zero_sum_groups {
        let size = rng.gen_range(2..=8);
        let inst = random_instance(rng, size);
        let adv = erpo_breakdown(&inst.group, hyper, None)?.advantages;
        let (sum, var) = zero_sum_check(&inst.group, &adv);
        max_sum = max_sum.max(sum.abs() / inst.group.active_count() as f64);
        max_var = max_var.max((var - 1.0).abs());
    }
    Ok(SuiteReport {
        equivalence: equivalence.unwrap_or(EquivalenceReport {
            max_abs_deviation: 0.0,
            relative_deviation: 0.0,
            normalized_relative_deviation: 0.0,
            param_count: 0,
            trials: 0,
        }),
        zero_sum_groups: options.zero_sum_groups,
        max_sum_per_token: max_sum,
        max_variance_deviation: max_var,
        causality_ok,
    })
}
