//! Training loop: sample groups, annotate, synthesize advantages, take a
//! gradient step, log metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bucketing::{assign_buckets, bucket_normalize, BucketAssignment};
use crate::diagnostics::{group_signals, TokenSignals};
use crate::env::{self, EnvConfig, PivotChainSpec};
use crate::error::{Error, Result};
use crate::gating::{entropy_stats, gate_weights, EntropyStats, MovingEntropyStats};
use crate::loss::{batch_loss_and_grad, kl_estimate};
use crate::policy::{greedy_tokens, sample_rollout, PolicyParams};
use crate::rollout::{build_group, HyperParams, PromptGroup};
use crate::stats::mean_and_std;
use crate::synthesis::{anchored_psi, broadcast, combine, group_advantage, normalize_tokens, AdvantageTensor, AnchoredPsi, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub hyper: HyperParams,
    pub learning_rate: f64,
    pub iterations: usize,
    pub prompts_per_step: usize,
    pub seed: u64,
    pub env: EnvConfig,
    /// Gradient steps per sampled batch; above one the ratio leaves 1 and
    /// clipping can engage.
    pub updates_per_batch: usize,
    /// Heavy-ball momentum; zero is plain gradient ascent.
    pub momentum: f64,
    /// Abort when the gradient norm exceeds this value.
    pub divergence_ceiling: f64,
    /// Fresh prompts sampled per step for held-out accuracy.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Erpo,
            hyper: HyperParams::default(),
            learning_rate: 1.0,
            iterations: 2000,
            prompts_per_step: 4,
            seed: 0,
            env: EnvConfig::default(),
            updates_per_batch: 1,
            momentum: 0.0,
            divergence_ceiling: 1e6,
            eval_samples: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.prompts_per_step == 0 || self.updates_per_batch == 0 {
            return Err(Error::Config("prompts_per_step and updates_per_batch must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.divergence_ceiling > 0.0) {
            return Err(Error::Config("divergence_ceiling must be > 0".into()));
        }
        self.env.build()?;
        Ok(())
    }

    pub fn spec(&self) -> Result<PivotChainSpec> {
        self.env.build()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean sampling entropy over all generated tokens of the batch.
    pub mean_entropy: f64,
    pub grad_norm: f64,
    pub mean_kl: f64,
    pub mean_length: f64,
    /// Sampled accuracy on fresh prompts after the update.
    pub accuracy: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "step,mean_reward,mean_entropy,grad_norm,mean_kl,mean_length,accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.mean_reward, self.mean_entropy, self.grad_norm, self.mean_kl, self.mean_length, self.accuracy
        )
    }
}

/// Every intermediate tensor of the advantage pipeline for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBreakdown {
    pub group_advantages: Vec<f64>,
    pub signals: Vec<TokenSignals>,
    pub entropy_stats: EntropyStats,
    pub gates: Vec<Vec<f64>>,
    pub buckets: BucketAssignment,
    pub normalized_progress: Vec<Vec<f64>>,
    pub psi: AnchoredPsi,
    pub combined: Vec<Vec<f64>>,
    pub combined_mean: f64,
    pub combined_std: f64,
    pub advantages: AdvantageTensor,
}

/// Full ERPO pipeline with its intermediates. `gating_stats` replaces the
/// group's own entropy statistics when given.
pub fn erpo_breakdown(
    group: &PromptGroup,
    hyper: &HyperParams,
    gating_stats: Option<EntropyStats>,
) -> Result<AdvantageBreakdown> {
    let delta = hyper.stability_const;
    let group_advantages = group_advantage(&group.rewards, delta);
    let signals = group_signals(group, hyper.progress_scale)?;
    let entropy: Vec<Vec<f64>> = signals.iter().map(|s| s.entropy.clone()).collect();
    let progress: Vec<Vec<f64>> = signals.iter().map(|s| s.progress.clone()).collect();
    let stats = match gating_stats {
        Some(s) => s,
        None => entropy_stats(&group.gather_active(|i, t| entropy[i][t]))?,
    };
    let gates: Vec<Vec<f64>> = group
        .rollouts
        .iter()
        .zip(&entropy)
        .map(|(r, h)| {
            gate_weights(h, &stats, hyper.gating_scale, delta)
                .into_iter()
                .zip(&r.active_mask)
                .map(|(w, &on)| if on { w } else { 0.0 })
                .collect()
        })
        .collect();
    let buckets = assign_buckets(group, &progress, hyper.buckets);
    let normalized_progress = bucket_normalize(group, &progress, &buckets, delta);
    let psi = anchored_psi(group, &gates, &group_advantages, &normalized_progress, hyper.target_std, delta);
    let combined = combine(group, &group_advantages, &psi.psi, hyper.mix_weight);
    let (values, combined_mean, combined_std) = normalize_tokens(group, &combined, delta);
    let advantages = AdvantageTensor { mode: Mode::Erpo, values, group_advantages: group_advantages.clone() };
    Ok(AdvantageBreakdown {
        group_advantages,
        signals,
        entropy_stats: stats,
        gates,
        buckets,
        normalized_progress,
        psi,
        combined,
        combined_mean,
        combined_std,
        advantages,
    })
}

/// Token advantages of one group in the requested mode.
pub fn compute_advantages(mode: Mode, group: &PromptGroup, hyper: &HyperParams) -> Result<AdvantageTensor> {
    match mode {
        Mode::Grpo => {
            let ga = group_advantage(&group.rewards, hyper.stability_const);
            Ok(AdvantageTensor { mode, values: broadcast(group, &ga), group_advantages: ga })
        }
        Mode::Erpo => Ok(erpo_breakdown(group, hyper, None)?.advantages),
    }
}

/// Rng stream for `(seed, step, slot)`; `domain` separates training samples
/// from evaluation samples.
pub fn stream_rng(seed: u64, domain: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 56) ^ ((step as u64) << 24) ^ slot as u64);
    rng
}

const TRAIN_DOMAIN: u64 = 1;
const EVAL_DOMAIN: u64 = 2;

/// Samples one group per slot in parallel; slot `j` uses its own stream.
pub fn sample_batch(
    params: &PolicyParams,
    reference: &PolicyParams,
    spec: &PivotChainSpec,
    group_size: usize,
    prompts: usize,
    seed: u64,
    step: usize,
) -> Result<Vec<PromptGroup>> {
    let opts = spec.sample_options();
    (0..prompts)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, TRAIN_DOMAIN, step, j);
            let prompt = env::generate_prompt(spec, &mut rng);
            let rollouts: Vec<_> =
                (0..group_size).map(|_| sample_rollout(params, reference, prompt, &mut rng, opts)).collect();
            let rewards = rollouts.iter().map(|r| env::reward(spec, prompt, &r.tokens)).collect();
            build_group(prompt, rollouts, rewards)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub params: PolicyParams,
}

/// Runs training, invoking `observe` after every step with the record and the
/// updated parameters.
pub fn train_with<F>(config: &TrainConfig, mut observe: F) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsRecord, &PolicyParams) -> Result<()>,
{
    config.validate()?;
    let spec = config.spec()?;
    let reference = env::base_policy(&spec);
    let mut params = reference.clone();
    let mut velocity = vec![0.0; params.param_count()];
    let mut moving = config.hyper.entropy_ema_decay.map(MovingEntropyStats::new);
    let hyper = &config.hyper;
    let mut metrics = Vec::with_capacity(config.iterations);

    for step in 0..config.iterations {
        let groups =
            sample_batch(&params, &reference, &spec, hyper.group_size, config.prompts_per_step, config.seed, step)?;
        let mut advantages = Vec::with_capacity(groups.len());
        for g in &groups {
            let adv = match (config.mode, moving.as_mut()) {
                (Mode::Erpo, Some(m)) => {
                    let own = entropy_stats(&g.gather_active(|i, t| g.rollouts[i].entropy[t]))?;
                    erpo_breakdown(g, hyper, Some(m.update(&own)))?.advantages
                }
                (mode, _) => compute_advantages(mode, g, hyper)?,
            };
            advantages.push(adv);
        }

        let mut grad_norm = 0.0;
        for update in 0..config.updates_per_batch {
            let (_, grad) = batch_loss_and_grad(&params, &groups, &advantages, hyper.clip, hyper.kl_coeff)?;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() || norm > config.divergence_ceiling {
                return Err(Error::Divergence { step, norm, ceiling: config.divergence_ceiling });
            }
            if update == 0 {
                grad_norm = norm;
            }
            for ((w, v), g) in params.weights.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = config.momentum * *v + g;
                *w -= config.learning_rate * *v;
            }
        }

        let (mut reward, mut entropy, mut kl, mut length, mut tokens, mut rollouts) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for g in &groups {
            reward += g.rewards.iter().sum::<f64>();
            for r in &g.rollouts {
                entropy += r.entropy.iter().sum::<f64>();
                kl += r.logp_current.iter().zip(&r.logp_ref).map(|(&c, &f)| kl_estimate(c, f)).sum::<f64>();
                length += r.len() as f64;
                tokens += r.len() as f64;
                rollouts += 1.0;
            }
        }
        let accuracy = if config.eval_samples == 0 {
            f64::NAN
        } else {
            let mut rng = stream_rng(config.seed, EVAL_DOMAIN, step, 0);
            sampled_accuracy(&params, &spec, config.eval_samples, &mut rng)
        };
        let record = MetricsRecord {
            step,
            mean_reward: reward / rollouts,
            mean_entropy: entropy / tokens,
            grad_norm,
            mean_kl: kl / tokens,
            mean_length: length / rollouts,
            accuracy,
        };
        observe(&record, &params)?;
        metrics.push(record);
    }
    Ok(TrainOutcome { metrics, params })
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(config, |_, _| Ok(()))
}

fn sampled_accuracy<R: rand::Rng>(params: &PolicyParams, spec: &PivotChainSpec, n: usize, rng: &mut R) -> f64 {
    let opts = spec.sample_options();
    let hits = (0..n)
        .filter(|_| {
            let p = env::generate_prompt(spec, rng);
            env::is_correct(spec, p, &sample_rollout(params, params, p, rng, opts).tokens)
        })
        .count();
    hits as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub sampled_accuracy: f64,
    pub greedy_accuracy: f64,
    /// Fraction of prompts solved by at least one of `k` samples.
    pub pass_at_k: f64,
    pub k: usize,
    pub mean_length: f64,
    pub mean_entropy: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "samples,sampled_accuracy,greedy_accuracy,k,pass_at_k,mean_length,mean_entropy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.samples,
            self.sampled_accuracy,
            self.greedy_accuracy,
            self.k,
            self.pass_at_k,
            self.mean_length,
            self.mean_entropy
        )
    }
}

/// Greedy and sampled accuracy over `n` fresh prompts, plus pass@k from `k`
/// samples per prompt (the first of which is the sampled-accuracy draw).
pub fn evaluate<R: rand::Rng>(
    params: &PolicyParams,
    spec: &PivotChainSpec,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if n == 0 || k == 0 {
        return Err(Error::Validation("evaluation needs n >= 1 and k >= 1".into()));
    }
    let opts = spec.sample_options();
    let (mut sampled, mut greedy, mut pass, mut length, mut entropy, mut tokens) = (0, 0, 0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let p = env::generate_prompt(spec, rng);
        greedy += env::is_correct(spec, p, &greedy_tokens(params, p, opts)) as usize;
        let mut solved = false;
        for j in 0..k {
            let r = sample_rollout(params, params, p, rng, opts);
            let ok = env::is_correct(spec, p, &r.tokens);
            if j == 0 {
                sampled += ok as usize;
                length += r.len() as f64;
                entropy += r.entropy.iter().sum::<f64>();
                tokens += r.len() as f64;
            }
            solved |= ok;
        }
        pass += solved as usize;
    }
    let nf = n as f64;
    Ok(EvalReport {
        samples: n,
        sampled_accuracy: sampled as f64 / nf,
        greedy_accuracy: greedy as f64 / nf,
        pass_at_k: pass as f64 / nf,
        k,
        mean_length: length / nf,
        mean_entropy: entropy / tokens,
    })
}

/// Mean over the last `window` records of a metric.
pub fn window_mean(metrics: &[MetricsRecord], window: usize, field: impl Fn(&MetricsRecord) -> f64) -> f64 {
    let tail = &metrics[metrics.len().saturating_sub(window)..];
    mean_and_std(&tail.iter().map(field).collect::<Vec<_>>()).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::fixtures::rollout_of_len;

    fn quick(mode: Mode, iterations: usize) -> TrainConfig {
        TrainConfig { mode, iterations, eval_samples: 8, ..TrainConfig::default() }
    }

    fn hand_group(rewards: &[f64]) -> PromptGroup {
        let rollouts = (0..rewards.len())
            .map(|i| {
                let mut r = rollout_of_len(0, 3 + i);
                for (t, h) in r.entropy.iter_mut().enumerate() {
                    *h = 0.1 * (t + i) as f64;
                }
                for (t, lp) in r.logp_current.iter_mut().enumerate() {
                    *lp = -0.2 - 0.3 * ((t * 7 + i * 3) % 5) as f64;
                }
                r
            })
            .collect();
        PromptGroup { prompt_id: 0, rollouts, rewards: rewards.to_vec() }
    }

    #[test]
    fn zero_iterations_leave_params_untouched() {
        let cfg = quick(Mode::Erpo, 0);
        let out = train(&cfg).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.params, env::base_policy(&cfg.spec().unwrap()));
    }

    #[test]
    fn zero_learning_rate_logs_without_moving() {
        let cfg = TrainConfig { learning_rate: 0.0, ..quick(Mode::Grpo, 3) };
        let out = train(&cfg).unwrap();
        assert_eq!(out.metrics.len(), 3);
        assert_eq!(out.params, env::base_policy(&cfg.spec().unwrap()));
        for m in &out.metrics {
            assert!(m.mean_entropy >= 0.0 && m.mean_length >= 1.0);
        }
    }

    #[test]
    fn training_is_deterministic() {
        for mode in [Mode::Grpo, Mode::Erpo] {
            let a = train(&quick(mode, 5)).unwrap();
            let b = train(&quick(mode, 5)).unwrap();
            assert_eq!(a.metrics, b.metrics);
            assert_eq!(a.params, b.params);
        }
    }

    #[test]
    fn divergence_guard_aborts() {
        let cfg = TrainConfig { divergence_ceiling: 1e-12, ..quick(Mode::Grpo, 50) };
        assert!(matches!(train(&cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn erpo_without_mixing_orders_like_grpo() {
        let g = hand_group(&[1.0, 0.0, 0.0, 1.0]);
        let hyper = HyperParams { mix_weight: 0.0, ..HyperParams::default() };
        let e = compute_advantages(Mode::Erpo, &g, &hyper).unwrap();
        let r = compute_advantages(Mode::Grpo, &g, &hyper).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(e.values[i][0] > e.values[j][0], r.values[i][0] > r.values[j][0]);
            }
        }
    }

    #[test]
    fn tied_rewards_give_zero_advantages() {
        let g = hand_group(&[1.0, 1.0, 1.0]);
        let e = compute_advantages(Mode::Erpo, &g, &HyperParams::default()).unwrap();
        assert!(e.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn ema_gating_trains() {
        let cfg = TrainConfig {
            hyper: HyperParams { entropy_ema_decay: Some(0.9), ..HyperParams::default() },
            ..quick(Mode::Erpo, 3)
        };
        assert_eq!(train(&cfg).unwrap().metrics.len(), 3);
    }

    #[test]
    fn multi_update_with_momentum_runs() {
        let cfg = TrainConfig { updates_per_batch: 3, momentum: 0.5, ..quick(Mode::Erpo, 3) };
        let out = train(&cfg).unwrap();
        assert!(out.metrics.iter().all(|m| m.grad_norm.is_finite()));
    }

    #[test]
    fn optimal_policy_scores_one() {
        let spec = PivotChainSpec::default();
        let layout = spec.feature_layout();
        let mut p = PolicyParams::zeros(layout);
        for prompt in 0..spec.prompts {
            let good = spec.reference_response(prompt);
            for t in 0..spec.max_len {
                let tok = good.get(t).copied().unwrap_or(spec.terminator);
                *p.weight_mut(layout.prompt_position_feature(prompt, t), tok) = 60.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rep = evaluate(&p, &spec, 200, 1, &mut rng).unwrap();
        assert_eq!((rep.sampled_accuracy, rep.greedy_accuracy, rep.pass_at_k), (1.0, 1.0, 1.0));
        assert_eq!(rep.mean_length, 17.0);
    }

    #[test]
    fn pass_at_k_grows_toward_one() {
        let spec = PivotChainSpec::default();
        let p = env::base_policy(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let one = evaluate(&p, &spec, 300, 1, &mut rng).unwrap().pass_at_k;
        let many = evaluate(&p, &spec, 300, 200, &mut rng).unwrap().pass_at_k;
        assert!(many > 0.99 && many > one);
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { prompts_per_step: 0, ..TrainConfig::default() }.validate().is_err());
        let mut c = TrainConfig::default();
        c.hyper.group_size = 1;
        assert!(c.validate().is_err());
    }
}
