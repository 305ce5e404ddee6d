//! Flat key-value run configuration and run manifests.
//!
//! Config files are TOML documents with top-level keys only. Every key is
//! optional; missing keys take the defaults below. A manifest is the resolved
//! config of a run followed by `manifest_*` keys, so it can be fed back as a
//! config to reproduce the run.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `mode` | `"erpo"` | `grpo` or `erpo` |
//! | `seed` | `0` | seed of every random stream |
//! | `iterations` | `2000` | training steps |
//! | `learning_rate` | `1.0` | step size of gradient ascent |
//! | `prompts_per_step` | `4` | groups per batch |
//! | `group_size` | `8` | rollouts per prompt |
//! | `buckets` | `8` | relative-position buckets |
//! | `gamma` | `1.0` | gate sharpness |
//! | `beta_progress` | `0.1` | progress-signal scale |
//! | `eta` | `0.1` | process-term weight |
//! | `sigma_target` | `1.0` | target std of the process term |
//! | `delta` | `1e-8` | stability constant |
//! | `clip` | `0.2` | ratio clip range |
//! | `kl_coeff` | `0.0` | KL penalty weight |
//! | `entropy_ema_decay` | unset | cross-step gating statistics |
//! | `updates_per_batch` | `1` | gradient steps per batch |
//! | `momentum` | `0.0` | heavy-ball momentum |
//! | `divergence_ceiling` | `1e6` | gradient-norm abort threshold |
//! | `eval_samples` | `32` | held-out samples per step |
//! | `checkpoint_every` | `0` | checkpoint interval, 0 disables |
//! | `ema_alpha` | `0.12` | smoothing of comparison tables |
//! | `env_*` | | environment fields, see [`EnvConfig`] |

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{AnswerRule, EnvConfig};
use crate::error::{Error, Result};
use crate::policy::{write_params, PolicyParams};
use crate::rollout::HyperParams;
use crate::synthesis::Mode;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub prompts_per_step: usize,
    pub group_size: usize,
    pub buckets: usize,
    pub gamma: f64,
    pub beta_progress: f64,
    pub eta: f64,
    pub sigma_target: f64,
    pub delta: f64,
    pub clip: f64,
    pub kl_coeff: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_ema_decay: Option<f64>,
    pub updates_per_batch: usize,
    pub momentum: f64,
    pub divergence_ceiling: f64,
    pub eval_samples: usize,
    pub checkpoint_every: usize,
    pub ema_alpha: f64,
    pub env_prompts: usize,
    pub env_pivots: usize,
    pub env_fillers_per_segment: usize,
    pub env_branches: usize,
    pub env_answers: usize,
    pub env_filler_count: usize,
    pub env_filler_classes: Vec<Vec<usize>>,
    pub env_slot_classes: Vec<usize>,
    pub env_answer_rule: AnswerRule,
    pub env_length_penalty: f64,
    pub env_slack: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_train(t: &TrainConfig) -> Self {
        let h = &t.hyper;
        let e = &t.env;
        Self {
            mode: t.mode,
            seed: t.seed,
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            prompts_per_step: t.prompts_per_step,
            group_size: h.group_size,
            buckets: h.buckets,
            gamma: h.gating_scale,
            beta_progress: h.progress_scale,
            eta: h.mix_weight,
            sigma_target: h.target_std,
            delta: h.stability_const,
            clip: h.clip,
            kl_coeff: h.kl_coeff,
            entropy_ema_decay: h.entropy_ema_decay,
            updates_per_batch: t.updates_per_batch,
            momentum: t.momentum,
            divergence_ceiling: t.divergence_ceiling,
            eval_samples: t.eval_samples,
            checkpoint_every: 0,
            ema_alpha: 0.12,
            env_prompts: e.prompts,
            env_pivots: e.pivots,
            env_fillers_per_segment: e.fillers_per_segment,
            env_branches: e.branches,
            env_answers: e.answers,
            env_filler_count: e.filler_count,
            env_filler_classes: e.filler_classes.clone(),
            env_slot_classes: e.slot_classes.clone(),
            env_answer_rule: e.answer_rule,
            env_length_penalty: e.length_penalty,
            env_slack: e.slack,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            hyper: HyperParams {
                group_size: self.group_size,
                buckets: self.buckets,
                gating_scale: self.gamma,
                progress_scale: self.beta_progress,
                mix_weight: self.eta,
                target_std: self.sigma_target,
                stability_const: self.delta,
                clip: self.clip,
                kl_coeff: self.kl_coeff,
                entropy_ema_decay: self.entropy_ema_decay,
            },
            learning_rate: self.learning_rate,
            iterations: self.iterations,
            prompts_per_step: self.prompts_per_step,
            seed: self.seed,
            env: self.env_config(),
            updates_per_batch: self.updates_per_batch,
            momentum: self.momentum,
            divergence_ceiling: self.divergence_ceiling,
            eval_samples: self.eval_samples,
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            prompts: self.env_prompts,
            pivots: self.env_pivots,
            fillers_per_segment: self.env_fillers_per_segment,
            branches: self.env_branches,
            answers: self.env_answers,
            filler_count: self.env_filler_count,
            filler_classes: self.env_filler_classes.clone(),
            slot_classes: self.env_slot_classes.clone(),
            answer_rule: self.env_answer_rule,
            length_penalty: self.env_length_penalty,
            slack: self.env_slack,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(Error::Config("ema_alpha must lie in (0, 1]".into()));
        }
        self.train_config().validate()
    }

    /// Parses a config or manifest document; `manifest_*` keys are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        table.retain(|k, _| !k.starts_with("manifest_"));
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::Config(format!("`{k}`: config files are flat, tables are not allowed")));
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}

/// Git-style content hash of a checkpoint: SHA-256 over `blob <len>\0` and
/// the checkpoint text.
pub fn params_hash(params: &PolicyParams) -> String {
    let body = write_params(params);
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: RunConfig,
    pub params_hash: String,
    pub out_dir: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut out = self.config.to_toml();
        out.push_str(&format!(
            "manifest_params_hash = {:?}\nmanifest_out_dir = {:?}\nmanifest_started_unix = {}\nmanifest_finished_unix = {}\n",
            self.params_hash, self.out_dir, self.started_unix, self.finished_unix
        ));
        out
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::base_policy;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().train_config(), TrainConfig::default());
    }

    #[test]
    fn keys_override_defaults() {
        let c = RunConfig::parse("mode = \"grpo\"\neta = 0.3\nenv_length_penalty = 0.2\nentropy_ema_decay = 0.5\n").unwrap();
        assert_eq!(c.mode, Mode::Grpo);
        let t = c.train_config();
        assert_eq!(t.hyper.mix_weight, 0.3);
        assert_eq!(t.hyper.entropy_ema_decay, Some(0.5));
        assert_eq!(t.env.length_penalty, 0.2);
    }

    #[test]
    fn unknown_keys_and_tables_are_rejected() {
        assert!(RunConfig::parse("etaa = 1.0").is_err());
        assert!(RunConfig::parse("[env]\nprompts = 2").is_err());
        assert!(RunConfig::parse("mode = \"ppo\"").is_err());
        assert!(RunConfig::parse("seed = ").is_err());
    }

    #[test]
    fn manifest_round_trips_to_config() {
        let mut config = RunConfig::default();
        config.seed = 7;
        config.env_filler_classes = vec![vec![6, 7], vec![8, 9]];
        config.env_slot_classes = vec![0, 1];
        let m = RunManifest {
            config: config.clone(),
            params_hash: params_hash(&base_policy(&config.env_config().build().unwrap())),
            out_dir: "runs/x".into(),
            started_unix: 1,
            finished_unix: 2,
        };
        assert_eq!(RunConfig::parse(&m.render()).unwrap(), config);
    }

    #[test]
    fn hash_tracks_parameters() {
        let spec = crate::env::PivotChainSpec::default();
        let mut p = base_policy(&spec);
        let a = params_hash(&p);
        assert_eq!(a.len(), 64);
        assert_eq!(a, params_hash(&p));
        p.weights[0] += 1e-3;
        assert_ne!(a, params_hash(&p));
    }
}
