//! Linear-softmax autoregressive policy.
//!
//! The logits of step `t` are the sum of two weight rows: one selected by the
//! previous token (or a begin-of-sequence marker at `t = 0`) and one selected
//! by the pair (prompt symbol, position bucket). Log-likelihood gradients are
//! exact and cheap, and entropies come from the full distribution.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::entropy_unchecked;
use crate::error::{Error, Result};
use crate::rollout::{Rollout, Token};

pub const FEATURE_EXTRACTOR_ID: &str = "prev-token+prompt-position/v1";

/// Shape of the feature space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub prompts: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// Number of position buckets; equal to `max_len` means exact positions.
    pub position_buckets: usize,
}

impl FeatureLayout {
    pub fn new(prompts: usize, vocab: usize, max_len: usize) -> Self {
        Self { prompts, vocab, max_len, position_buckets: max_len }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("vocabulary must hold at least 2 tokens".into()));
        }
        if self.prompts == 0 || self.max_len == 0 || self.position_buckets == 0 {
            return Err(Error::Config("prompts, max_len and position_buckets must be >= 1".into()));
        }
        if self.position_buckets > self.max_len {
            return Err(Error::Config("position_buckets cannot exceed max_len".into()));
        }
        Ok(())
    }

    /// Previous-token rows (`vocab` tokens plus the begin marker) followed by
    /// the prompt-position rows.
    pub fn feature_count(&self) -> usize {
        self.vocab + 1 + self.prompts * self.position_buckets
    }

    pub fn param_count(&self) -> usize {
        self.feature_count() * self.vocab
    }

    pub fn prev_feature(&self, prev: Option<Token>) -> usize {
        prev.unwrap_or(self.vocab)
    }

    pub fn position_bucket(&self, t: usize) -> usize {
        (t * self.position_buckets / self.max_len).min(self.position_buckets - 1)
    }

    pub fn prompt_position_feature(&self, prompt: usize, t: usize) -> usize {
        self.vocab + 1 + prompt * self.position_buckets + self.position_bucket(t)
    }

    /// The two feature rows active at step `t` given the prefix.
    pub fn active_features(&self, prompt: usize, prefix: &[Token]) -> [usize; 2] {
        let t = prefix.len();
        [self.prev_feature(prefix.last().copied()), self.prompt_position_feature(prompt, t)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub layout: FeatureLayout,
    /// Row-major `feature_count x vocab` weight table.
    pub weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(layout: FeatureLayout) -> Self {
        Self { layout, weights: vec![0.0; layout.param_count()] }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, feature: usize, token: Token) -> f64 {
        self.weights[feature * self.layout.vocab + token]
    }

    pub fn weight_mut(&mut self, feature: usize, token: Token) -> &mut f64 {
        &mut self.weights[feature * self.layout.vocab + token]
    }

    pub fn logits(&self, prompt: usize, prefix: &[Token]) -> Vec<f64> {
        let v = self.layout.vocab;
        let [a, b] = self.layout.active_features(prompt, prefix);
        let ra = &self.weights[a * v..(a + 1) * v];
        let rb = &self.weights[b * v..(b + 1) * v];
        ra.iter().zip(rb).map(|(x, y)| x + y).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.weights.len() != self.layout.param_count() {
            return Err(Error::Structural(format!(
                "{} weights for a layout of {} parameters",
                self.weights.len(),
                self.layout.param_count()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Validation("policy weights must be finite".into()));
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], token: Token) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    (logits[token] - lse).min(0.0)
}

/// Next-token distribution after `prefix`.
pub fn step_distribution(params: &PolicyParams, prompt: usize, prefix: &[Token]) -> Vec<f64> {
    debug_assert!(prefix.len() < params.layout.max_len);
    softmax(&params.logits(prompt, prefix))
}

/// Sampling controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub max_len: usize,
    /// Token that ends the response; it is kept as the last token.
    pub stop: Option<Token>,
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Token {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum: take the last token with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Samples one response autoregressively. The log-probabilities under `params`
/// are stored as both current and old; `reference` supplies `logp_ref`.
pub fn sample_rollout<R: Rng + ?Sized>(
    params: &PolicyParams,
    reference: &PolicyParams,
    prompt: usize,
    rng: &mut R,
    opts: SampleOptions,
) -> Rollout {
    let max_len = opts.max_len.min(params.layout.max_len);
    let mut tokens = Vec::with_capacity(max_len);
    let mut logp = Vec::with_capacity(max_len);
    let mut logp_ref = Vec::with_capacity(max_len);
    let mut entropy = Vec::with_capacity(max_len);
    while tokens.len() < max_len {
        let logits = params.logits(prompt, &tokens);
        let probs = softmax(&logits);
        let tok = sample_index(&probs, rng);
        logp.push(log_softmax_at(&logits, tok));
        logp_ref.push(log_softmax_at(&reference.logits(prompt, &tokens), tok));
        entropy.push(entropy_unchecked(&probs));
        tokens.push(tok);
        if Some(tok) == opts.stop {
            break;
        }
    }
    let n = tokens.len();
    Rollout {
        prompt_id: prompt,
        tokens,
        logp_current: logp.clone(),
        logp_old: logp,
        logp_ref,
        entropy,
        active_mask: vec![true; n],
    }
}

/// Decodes the most probable token at every step.
pub fn greedy_tokens(params: &PolicyParams, prompt: usize, opts: SampleOptions) -> Vec<Token> {
    let max_len = opts.max_len.min(params.layout.max_len);
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        let logits = params.logits(prompt, &tokens);
        let tok = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &z)| if z > best.1 { (i, z) } else { best })
            .0;
        tokens.push(tok);
        if Some(tok) == opts.stop {
            break;
        }
    }
    tokens
}

/// Per-step distributions and token log-probabilities of a fixed response.
#[derive(Debug, Clone)]
pub struct Forward {
    pub probs: Vec<Vec<f64>>,
    pub logp: Vec<f64>,
}

impl Forward {
    pub fn entropies(&self) -> Vec<f64> {
        self.probs.iter().map(|p| entropy_unchecked(p)).collect()
    }
}

fn check_tokens(params: &PolicyParams, tokens: &[Token]) -> Result<()> {
    if tokens.len() > params.layout.max_len {
        return Err(Error::Structural(format!(
            "response of {} tokens exceeds max_len {}",
            tokens.len(),
            params.layout.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= params.layout.vocab) {
        return Err(Error::TokenOutOfVocab { token: bad, vocab: params.layout.vocab });
    }
    Ok(())
}

pub fn forward(params: &PolicyParams, prompt: usize, tokens: &[Token]) -> Result<Forward> {
    check_tokens(params, tokens)?;
    if prompt >= params.layout.prompts {
        return Err(Error::Validation(format!("prompt {prompt} outside the prompt alphabet")));
    }
    let mut probs = Vec::with_capacity(tokens.len());
    let mut logp = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        let logits = params.logits(prompt, &tokens[..t]);
        logp.push(log_softmax_at(&logits, tokens[t]));
        probs.push(softmax(&logits));
    }
    Ok(Forward { probs, logp })
}

/// Adds `sum_t coeffs[t] * grad log pi(tokens[t])` into `grad`.
pub fn accumulate_logprob_grad(
    params: &PolicyParams,
    prompt: usize,
    tokens: &[Token],
    fwd: &Forward,
    coeffs: &[f64],
    grad: &mut [f64],
) {
    let v = params.layout.vocab;
    for t in 0..tokens.len() {
        let c = coeffs[t];
        if c == 0.0 {
            continue;
        }
        for f in params.layout.active_features(prompt, &tokens[..t]) {
            let row = &mut grad[f * v..(f + 1) * v];
            for (u, g) in row.iter_mut().enumerate() {
                *g -= c * fwd.probs[t][u];
            }
            row[tokens[t]] += c;
        }
    }
}

/// Token log-probabilities and the gradient of their sum.
pub fn logprob_and_grad(params: &PolicyParams, prompt: usize, tokens: &[Token]) -> Result<(Vec<f64>, Vec<f64>)> {
    let fwd = forward(params, prompt, tokens)?;
    let mut grad = vec![0.0; params.param_count()];
    accumulate_logprob_grad(params, prompt, tokens, &fwd, &vec![1.0; tokens.len()], &mut grad);
    Ok((fwd.logp, grad))
}

/// Writes the checkpoint text format: a header line followed by one
/// `feature token weight` line per parameter.
pub fn write_params(params: &PolicyParams) -> String {
    let l = params.layout;
    let mut out = format!(
        "# {FEATURE_EXTRACTOR_ID} prompts={} vocab={} max_len={} position_buckets={}\n",
        l.prompts, l.vocab, l.max_len, l.position_buckets
    );
    for f in 0..l.feature_count() {
        for v in 0..l.vocab {
            let _ = writeln!(out, "{f} {v} {}", params.weight(f, v));
        }
    }
    out
}

pub fn read_params<R: BufRead>(input: R) -> Result<PolicyParams> {
    let mut lines = input.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, message: "empty checkpoint".into() })?;
    let header = header?;
    let mut fields = header.trim_start_matches('#').split_whitespace();
    if fields.next() != Some(FEATURE_EXTRACTOR_ID) {
        return Err(Error::Parse { line: 1, message: format!("unknown feature extractor in `{header}`") });
    }
    let mut get = |key: &str| -> Result<usize> {
        let kv = fields.next().unwrap_or_default();
        kv.strip_prefix(key)
            .and_then(|s| s.strip_prefix('='))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse { line: 1, message: format!("expected `{key}=<n>`, found `{kv}`") })
    };
    let layout = FeatureLayout {
        prompts: get("prompts")?,
        vocab: get("vocab")?,
        max_len: get("max_len")?,
        position_buckets: get("position_buckets")?,
    };
    layout.validate()?;
    let mut params = PolicyParams::zeros(layout);
    for (i, line) in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| Error::Parse { line: i + 1, message: m };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", parts.len())));
        }
        let f: usize = parts[0].parse().map_err(|_| bad("bad feature id".into()))?;
        let v: usize = parts[1].parse().map_err(|_| bad("bad token id".into()))?;
        let w: f64 = parts[2].parse().map_err(|_| bad("bad weight".into()))?;
        if f >= layout.feature_count() || v >= layout.vocab {
            return Err(bad(format!("entry ({f}, {v}) outside the layout")));
        }
        *params.weight_mut(f, v) = w;
    }
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::token_entropy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(layout: FeatureLayout, seed: u64, scale: f64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyParams::zeros(layout);
        p.weights.iter_mut().for_each(|w| *w = rng.gen_range(-scale..scale));
        p
    }

    #[test]
    fn zero_weights_are_uniform() {
        let p = PolicyParams::zeros(FeatureLayout::new(2, 4, 6));
        let d = step_distribution(&p, 1, &[0, 3]);
        assert!(d.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn large_logit_saturates() {
        let l = FeatureLayout::new(1, 5, 4);
        let mut p = PolicyParams::zeros(l);
        *p.weight_mut(l.prev_feature(None), 2) = 700.0;
        let d = step_distribution(&p, 0, &[]);
        assert!(d[2] > 1.0 - 1e-12);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn row_shift_leaves_distribution_unchanged() {
        let l = FeatureLayout::new(2, 6, 5);
        let p = random_params(l, 3, 2.0);
        let mut q = p.clone();
        let f = l.prompt_position_feature(1, 2);
        for v in 0..l.vocab {
            *q.weight_mut(f, v) += 3.7;
        }
        let a = step_distribution(&p, 1, &[4, 0]);
        let b = step_distribution(&q, 1, &[4, 0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn distributions_normalize_and_entropy_matches_diagnostics() {
        let l = FeatureLayout::new(3, 12, 20);
        let p = random_params(l, 9, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = sample_rollout(&p, &p, 2, &mut rng, SampleOptions { max_len: 20, stop: None });
        for t in 0..r.len() {
            let d = step_distribution(&p, 2, &r.tokens[..t]);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(token_entropy(&d).unwrap(), r.entropy[t]);
        }
        assert_eq!(r.logp_current, r.logp_old);
        assert_eq!(r.logp_current, r.logp_ref);
    }

    #[test]
    fn deterministic_policy_ignores_seed() {
        let l = FeatureLayout::new(1, 4, 5);
        let mut p = PolicyParams::zeros(l);
        for t in 0..5 {
            *p.weight_mut(l.prompt_position_feature(0, t), t % 4) = 800.0;
        }
        let opts = SampleOptions { max_len: 5, stop: None };
        let a = sample_rollout(&p, &p, 0, &mut ChaCha8Rng::seed_from_u64(1), opts);
        let b = sample_rollout(&p, &p, 0, &mut ChaCha8Rng::seed_from_u64(2), opts);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.tokens, vec![0, 1, 2, 3, 0]);
    }

    #[test]
    fn fixed_seed_reproduces_rollout() {
        let l = FeatureLayout::new(2, 8, 10);
        let p = random_params(l, 4, 1.0);
        let opts = SampleOptions { max_len: 10, stop: Some(7) };
        let a = sample_rollout(&p, &p, 1, &mut ChaCha8Rng::seed_from_u64(42), opts);
        let b = sample_rollout(&p, &p, 1, &mut ChaCha8Rng::seed_from_u64(42), opts);
        assert_eq!(a, b);
        if a.len() < 10 {
            assert_eq!(*a.tokens.last().unwrap(), 7);
        }
    }

    #[test]
    fn uniform_policy_trajectory_probability() {
        let p = PolicyParams::zeros(FeatureLayout::new(1, 4, 3));
        let (logp, _) = logprob_and_grad(&p, 0, &[1, 3, 0]).unwrap();
        assert!(logp.iter().all(|&l| (l + 4f64.ln()).abs() < 1e-15));
        let total: f64 = logp.iter().sum();
        assert!((total.exp() - 0.25f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // central differences on sum log pi, 50 random instances
        let h = 1e-5;
        for seed in 0..50u64 {
            let l = FeatureLayout::new(2, 5, 6);
            let p = random_params(l, seed, 1.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let tokens: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
            let prompt = (seed % 2) as usize;
            let (_, grad) = logprob_and_grad(&p, prompt, &tokens).unwrap();
            let f = |q: &PolicyParams| -> f64 { forward(q, prompt, &tokens).unwrap().logp.iter().sum() };
            let mut q = p.clone();
            for k in 0..p.param_count() {
                q.weights[k] = p.weights[k] + h;
                let up = f(&q);
                q.weights[k] = p.weights[k] - h;
                let down = f(&q);
                q.weights[k] = p.weights[k];
                let numeric = (up - down) / (2.0 * h);
                let scale = grad[k].abs().max(numeric.abs()).max(1e-3);
                assert!((grad[k] - numeric).abs() / scale < 1e-6, "seed {seed} param {k}: {} vs {numeric}", grad[k]);
            }
        }
    }

    #[test]
    fn duplicate_response_doubles_gradient() {
        let l = FeatureLayout::new(1, 4, 4);
        let p = random_params(l, 11, 1.0);
        let tokens = [2, 1, 1, 3];
        let (_, g) = logprob_and_grad(&p, 0, &tokens).unwrap();
        let fwd = forward(&p, 0, &tokens).unwrap();
        let mut acc = vec![0.0; p.param_count()];
        accumulate_logprob_grad(&p, 0, &tokens, &fwd, &[1.0; 4], &mut acc);
        accumulate_logprob_grad(&p, 0, &tokens, &fwd, &[1.0; 4], &mut acc);
        for (a, b) in acc.iter().zip(&g) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn rejects_out_of_vocabulary_tokens() {
        let p = PolicyParams::zeros(FeatureLayout::new(1, 4, 4));
        assert!(matches!(logprob_and_grad(&p, 0, &[1, 4]), Err(Error::TokenOutOfVocab { token: 4, vocab: 4 })));
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let l = FeatureLayout { prompts: 2, vocab: 5, max_len: 8, position_buckets: 4 };
        let p = random_params(l, 5, 3.0);
        let text = write_params(&p);
        let back = read_params(text.as_bytes()).unwrap();
        assert_eq!(back, p);
        assert!(read_params("# other 1".as_bytes()).is_err());
    }

    #[test]
    fn position_buckets_coarsen_positions() {
        let l = FeatureLayout { prompts: 1, vocab: 4, max_len: 20, position_buckets: 10 };
        assert_eq!(l.position_bucket(0), 0);
        assert_eq!(l.position_bucket(1), 0);
        assert_eq!(l.position_bucket(19), 9);
        assert_eq!(FeatureLayout::new(1, 4, 20).position_bucket(7), 7);
    }
}
