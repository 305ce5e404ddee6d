use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Per-token arrays or group-level arrays disagree in length.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("degenerate group: {size} rollout(s), at least 2 required")]
    DegenerateGroup { size: usize },

    #[error("rollout {index} has no active tokens")]
    EmptyRollout { index: usize },

    #[error("invalid input: {0}")]
    Validation(String),

    /// Advantage tensor does not line up with the rollouts it is applied to.
    #[error("misaligned advantages: {0}")]
    Misaligned(String),

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },

    /// The check was asked to run in a regime its identity does not cover.
    #[error("invalid regime: {0}")]
    InvalidRegime(String),

    #[error("only {found} correct rollouts found, {needed} required")]
    InsufficientCorrect { found: usize, needed: usize },

    #[error("gradient norm {norm} exceeded the ceiling {ceiling} at step {step}")]
    Divergence { step: usize, norm: f64, ceiling: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
