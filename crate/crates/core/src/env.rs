//! Pivot-chain environment: a synthetic task with a verifiable binary reward.
//!
//! A response is `pivots` segments followed by an answer token and a
//! terminator. Each segment is `fillers_per_segment` filler slots and then one
//! pivot slot:
//!
//! ```text
//! [f f f f P] [f f f f P] [f f f f P] A <end>
//! ```
//!
//! Every pivot has exactly one correct branch token, fixed by the prompt and
//! the pivot index. The answer token is a deterministic function of the
//! branches chosen. Filler slots accept any token of their equivalence class.
//! Only pivots (and the answer they imply) decide the reward, so they are the
//! positions where a single token choice changes the outcome.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_rollout, FeatureLayout, PolicyParams, SampleOptions};
use crate::rollout::Token;

/// How the answer token depends on the chosen branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerRule {
    /// Answer index equals the index of the last branch chosen.
    LastBranch,
    /// Answer index is the sum of all branch indices modulo the answer count.
    BranchSum,
}

/// What occupies a position of a well-formed response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Filler slot `slot` of a segment, checked against filler class `class`.
    Filler { slot: usize, class: usize },
    Pivot { index: usize },
    Answer,
    Terminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotChainSpec {
    pub prompts: usize,
    pub pivots: usize,
    pub fillers_per_segment: usize,
    pub branch_tokens: Vec<Token>,
    pub answer_tokens: Vec<Token>,
    pub filler_tokens: Vec<Token>,
    pub terminator: Token,
    pub vocab: usize,
    /// Filler equivalence classes.
    pub filler_classes: Vec<Vec<Token>>,
    /// Class of each filler slot within a segment, cycled if shorter.
    pub slot_classes: Vec<usize>,
    /// `answer_map[prompt][pivot]` is the index of the correct branch.
    pub answer_map: Vec<Vec<usize>>,
    pub answer_rule: AnswerRule,
    /// Reward subtracted per unit of `len / max_len`. Zero disables it.
    pub length_penalty: f64,
    pub max_len: usize,
}

impl Default for PivotChainSpec {
    fn default() -> Self {
        EnvConfig::default().build().expect("default environment is valid")
    }
}

/// Declarative environment description; every field is optional in config
/// files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub prompts: usize,
    pub pivots: usize,
    pub fillers_per_segment: usize,
    pub branches: usize,
    pub answers: usize,
    pub filler_count: usize,
    /// Explicit filler classes. Empty means one class spanning the whole
    /// vocabulary, i.e. filler slots accept any token.
    pub filler_classes: Vec<Vec<Token>>,
    pub slot_classes: Vec<usize>,
    pub answer_rule: AnswerRule,
    pub length_penalty: f64,
    /// Extra positions allowed beyond a well-formed response.
    pub slack: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            prompts: 3,
            pivots: 3,
            fillers_per_segment: 4,
            branches: 3,
            answers: 3,
            filler_count: 5,
            filler_classes: Vec::new(),
            slot_classes: Vec::new(),
            answer_rule: AnswerRule::LastBranch,
            length_penalty: 0.0,
            slack: 3,
        }
    }
}

impl EnvConfig {
    /// Token ids are laid out as branches, answers, fillers, terminator.
    pub fn build(&self) -> Result<PivotChainSpec> {
        let b = self.branches;
        let a = self.answers;
        let f = self.filler_count;
        let branch_tokens: Vec<Token> = (0..b).collect();
        let answer_tokens: Vec<Token> = (b..b + a).collect();
        let filler_tokens: Vec<Token> = (b + a..b + a + f).collect();
        let terminator = b + a + f;
        let vocab = terminator + 1;
        let filler_classes =
            if self.filler_classes.is_empty() { vec![(0..vocab).collect()] } else { self.filler_classes.clone() };
        let slot_classes = if self.slot_classes.is_empty() { vec![0] } else { self.slot_classes.clone() };
        let answer_map = (0..self.prompts)
            .map(|p| (0..self.pivots).map(|k| (p + k) % b.max(1)).collect())
            .collect();
        let structure = self.pivots * (self.fillers_per_segment + 1) + 2;
        let spec = PivotChainSpec {
            prompts: self.prompts,
            pivots: self.pivots,
            fillers_per_segment: self.fillers_per_segment,
            branch_tokens,
            answer_tokens,
            filler_tokens,
            terminator,
            vocab,
            filler_classes,
            slot_classes,
            answer_map,
            answer_rule: self.answer_rule,
            length_penalty: self.length_penalty,
            max_len: structure + self.slack,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl PivotChainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.prompts == 0 || self.pivots == 0 {
            return bad("prompts and pivots must be >= 1".into());
        }
        if self.branch_tokens.len() < 2 {
            return bad("at least two branch tokens are required".into());
        }
        if self.answer_tokens.is_empty() {
            return bad("at least one answer token is required".into());
        }
        if self.fillers_per_segment > 0 && self.filler_tokens.is_empty() {
            return bad("filler slots need filler tokens".into());
        }
        for (c, class) in self.filler_classes.iter().enumerate() {
            if class.len() < 2 {
                return bad(format!("filler class {c} must hold at least 2 tokens"));
            }
            if class.iter().any(|&t| t >= self.vocab) {
                return bad(format!("filler class {c} has a token outside the vocabulary"));
            }
        }
        if self.slot_classes.is_empty() || self.slot_classes.iter().any(|&c| c >= self.filler_classes.len()) {
            return bad("slot_classes must name existing filler classes".into());
        }
        if self.answer_map.len() != self.prompts
            || self.answer_map.iter().any(|row| row.len() != self.pivots || row.iter().any(|&b| b >= self.branch_tokens.len()))
        {
            return bad("answer_map must be prompts x pivots with valid branch indices".into());
        }
        if self.max_len < self.response_len() {
            return bad("max_len is shorter than a well-formed response".into());
        }
        Ok(())
    }

    /// Length of a well-formed response.
    pub fn response_len(&self) -> usize {
        self.pivots * (self.fillers_per_segment + 1) + 2
    }

    pub fn slot(&self, t: usize) -> Option<Slot> {
        let seg = self.fillers_per_segment + 1;
        let body = self.pivots * seg;
        if t < body {
            let j = t % seg;
            if j == self.fillers_per_segment {
                Some(Slot::Pivot { index: t / seg })
            } else {
                Some(Slot::Filler { slot: j, class: self.slot_classes[j % self.slot_classes.len()] })
            }
        } else if t == body {
            Some(Slot::Answer)
        } else if t == body + 1 {
            Some(Slot::Terminator)
        } else {
            None
        }
    }

    pub fn pivot_positions(&self) -> Vec<usize> {
        (0..self.pivots).map(|k| k * (self.fillers_per_segment + 1) + self.fillers_per_segment).collect()
    }

    pub fn correct_branch(&self, prompt: usize, pivot: usize) -> Token {
        self.branch_tokens[self.answer_map[prompt][pivot]]
    }

    /// Answer token implied by a sequence of branch indices.
    pub fn answer_for(&self, branch_indices: &[usize]) -> Token {
        let n = self.answer_tokens.len();
        let idx = match self.answer_rule {
            AnswerRule::LastBranch => branch_indices.last().copied().unwrap_or(0) % n,
            AnswerRule::BranchSum => branch_indices.iter().sum::<usize>() % n,
        };
        self.answer_tokens[idx]
    }

    /// The unique correct response with the first token of each filler class.
    pub fn reference_response(&self, prompt: usize) -> Vec<Token> {
        let branches: Vec<usize> = (0..self.pivots).map(|k| self.answer_map[prompt][k]).collect();
        (0..self.response_len())
            .map(|t| match self.slot(t).unwrap() {
                Slot::Filler { class, .. } => self.filler_classes[class][0],
                Slot::Pivot { index } => self.branch_tokens[branches[index]],
                Slot::Answer => self.answer_for(&branches),
                Slot::Terminator => self.terminator,
            })
            .collect()
    }

    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions { max_len: self.max_len, stop: Some(self.terminator) }
    }

    pub fn feature_layout(&self) -> FeatureLayout {
        FeatureLayout::new(self.prompts, self.vocab, self.max_len)
    }
}

/// Uniform draw from the prompt alphabet.
pub fn generate_prompt<R: Rng + ?Sized>(spec: &PivotChainSpec, rng: &mut R) -> usize {
    rng.gen_range(0..spec.prompts)
}

/// `true` iff the response is well formed, every pivot carries its correct
/// branch and the answer matches the branches.
pub fn is_correct(spec: &PivotChainSpec, prompt: usize, response: &[Token]) -> bool {
    if prompt >= spec.prompts || response.len() != spec.response_len() {
        return false;
    }
    let mut chosen = Vec::with_capacity(spec.pivots);
    for (t, &tok) in response.iter().enumerate() {
        let ok = match spec.slot(t).unwrap() {
            Slot::Filler { class, .. } => spec.filler_classes[class].contains(&tok),
            Slot::Pivot { index } => {
                if tok != spec.correct_branch(prompt, index) {
                    return false;
                }
                chosen.push(spec.answer_map[prompt][index]);
                true
            }
            Slot::Answer => tok == spec.answer_for(&chosen),
            Slot::Terminator => tok == spec.terminator,
        };
        if !ok {
            return false;
        }
    }
    true
}

/// Binary verifiable reward.
pub fn verify(spec: &PivotChainSpec, prompt: usize, response: &[Token]) -> f64 {
    if is_correct(spec, prompt, response) {
        1.0
    } else {
        0.0
    }
}

/// Training reward: the verifiable reward minus the optional length penalty.
pub fn reward(spec: &PivotChainSpec, prompt: usize, response: &[Token]) -> f64 {
    verify(spec, prompt, response) - spec.length_penalty * response.len() as f64 / spec.max_len as f64
}

/// Replaces each listed position with a uniformly drawn different token.
pub fn perturb<R: Rng + ?Sized>(response: &[Token], positions: &[usize], vocab: usize, rng: &mut R) -> Vec<Token> {
    let mut out = response.to_vec();
    for &t in positions {
        let r = rng.gen_range(0..vocab - 1);
        out[t] = if r >= out[t] { r + 1 } else { r };
    }
    out
}

/// Initial policy that already produces the response format.
///
/// Filler and structural slots are near-deterministic while every pivot is
/// uniform over the branch tokens, so the pivots are the only high-entropy
/// positions. The answer follows the last branch through the previous-token
/// features, which makes the policy correct exactly when all pivots are.
/// The frozen reference policy is a copy of this one.
pub fn base_policy(spec: &PivotChainSpec) -> PolicyParams {
    let layout = spec.feature_layout();
    let mut p = PolicyParams::zeros(layout);
    const FILLER: f64 = 20.0;
    const STRUCTURE: f64 = 10.0;
    const LINK: f64 = 10.0;
    for prompt in 0..spec.prompts {
        for t in 0..spec.max_len {
            let f = layout.prompt_position_feature(prompt, t);
            match spec.slot(t) {
                Some(Slot::Filler { slot, .. }) => {
                    *p.weight_mut(f, spec.filler_tokens[slot % spec.filler_tokens.len()]) = FILLER;
                }
                Some(Slot::Pivot { .. }) => {
                    for &b in &spec.branch_tokens {
                        *p.weight_mut(f, b) = FILLER;
                    }
                }
                Some(Slot::Answer) => {
                    for &a in &spec.answer_tokens {
                        *p.weight_mut(f, a) = STRUCTURE;
                    }
                }
                Some(Slot::Terminator) | None => *p.weight_mut(f, spec.terminator) = STRUCTURE,
            }
        }
    }
    if spec.answer_rule == AnswerRule::LastBranch {
        for (i, &b) in spec.branch_tokens.iter().enumerate() {
            *p.weight_mut(layout.prev_feature(Some(b)), spec.answer_for(&[i])) = LINK;
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    /// Accuracy of the unperturbed samples.
    pub baseline_accuracy: f64,
    /// Accuracy after perturbing the highest-entropy tokens of correct samples.
    pub high_entropy_accuracy: f64,
    /// Accuracy after perturbing the lowest-entropy tokens of correct samples.
    pub low_entropy_accuracy: f64,
    pub samples: usize,
    pub perturbed_fraction: f64,
}

impl PerturbationReport {
    pub fn high_entropy_drop(&self) -> f64 {
        self.baseline_accuracy - self.high_entropy_accuracy
    }

    pub fn low_entropy_drop(&self) -> f64 {
        self.baseline_accuracy - self.low_entropy_accuracy
    }

    pub const CSV_HEADER: &'static str = "samples,perturbed_fraction,baseline,high_entropy,low_entropy,high_drop,low_drop";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.samples,
            self.perturbed_fraction,
            self.baseline_accuracy,
            self.high_entropy_accuracy,
            self.low_entropy_accuracy,
            self.high_entropy_drop(),
            self.low_entropy_drop()
        )
    }
}

/// Positions of the `count` highest (or lowest) entropies; ties keep position
/// order.
pub fn entropy_ranked_positions(entropy: &[f64], count: usize, highest: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..entropy.len()).collect();
    if highest {
        idx.sort_by(|&a, &b| entropy[b].total_cmp(&entropy[a]));
    } else {
        idx.sort_by(|&a, &b| entropy[a].total_cmp(&entropy[b]));
    }
    idx.truncate(count);
    idx
}

/// Samples `n_samples` responses, then perturbs the top and (separately) the
/// bottom `top_frac` of tokens by recorded entropy in every correct response
/// and re-verifies. Incorrect samples stay incorrect in all three accuracies.
///
/// Fails when the sampled accuracy is below `min_accuracy`, since the protocol
/// needs responses the policy gets right.
pub fn perturbation_study<R: Rng + ?Sized>(
    policy: &PolicyParams,
    spec: &PivotChainSpec,
    n_samples: usize,
    top_frac: f64,
    min_accuracy: f64,
    rng: &mut R,
) -> Result<PerturbationReport> {
    if !(0.0..=1.0).contains(&top_frac) {
        return Err(Error::Validation("top_frac must lie in [0, 1]".into()));
    }
    let opts = spec.sample_options();
    let mut correct = 0usize;
    let mut high_ok = 0usize;
    let mut low_ok = 0usize;
    for _ in 0..n_samples {
        let prompt = generate_prompt(spec, rng);
        let r = sample_rollout(policy, policy, prompt, rng, opts);
        if !is_correct(spec, prompt, &r.tokens) {
            continue;
        }
        correct += 1;
        let count = (top_frac * r.len() as f64).ceil() as usize;
        let top = entropy_ranked_positions(&r.entropy, count, true);
        let bottom = entropy_ranked_positions(&r.entropy, count, false);
        if is_correct(spec, prompt, &perturb(&r.tokens, &top, spec.vocab, rng)) {
            high_ok += 1;
        }
        if is_correct(spec, prompt, &perturb(&r.tokens, &bottom, spec.vocab, rng)) {
            low_ok += 1;
        }
    }
    let n = n_samples.max(1) as f64;
    let baseline = correct as f64 / n;
    if correct == 0 || baseline < min_accuracy {
        return Err(Error::InsufficientCorrect { found: correct, needed: (min_accuracy * n).ceil() as usize });
    }
    Ok(PerturbationReport {
        baseline_accuracy: baseline,
        high_entropy_accuracy: high_ok as f64 / n,
        low_entropy_accuracy: low_ok as f64 / n,
        samples: n_samples,
        perturbed_fraction: top_frac,
    })
}
