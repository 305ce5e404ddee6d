//! Entropy-gated, position-aware token advantages for group-relative policy
//! optimization, with a toy policy and task to run them on.
//!
//! - [`synthesis`] turns group rewards into per-token advantages in either
//!   [`synthesis::Mode`].
//! - [`gating`] and [`bucketing`] hold the entropy gate and the
//!   relative-position buckets.
//! - [`loss`] is the clipped surrogate with a KL penalty.
//! - [`policy`] is a linear-softmax policy with exact gradients.
//! - [`env`] is the pivot-chain task, its verifier and the perturbation study.
//! - [`trainer`] runs deterministic training. [`metrics`] and [`config`] cover
//!   logging and run files.
//! - [`theory`] has numerical checks of the pipeline's invariants.
//!
//! The guide in `book/` walks through each piece; its snippets run as doctests.
//!
//! ```
//! use erpo::synthesis::Mode;
//! use erpo::trainer::{train, TrainConfig};
//!
//! let out = train(&TrainConfig { mode: Mode::Erpo, iterations: 3, ..TrainConfig::default() }).unwrap();
//! assert_eq!(out.metrics.len(), 3);
//! ```

pub mod bucketing;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod gating;
pub mod loss;
pub mod policy;
pub mod rollout;
pub mod stats;
pub mod synthesis;
pub mod trainer;
pub mod theory;
pub mod config;
pub mod metrics;
pub mod cli;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/advantages.md")]
    mod advantages {}
    #[doc = include_str!("../../../book/src/environment.md")]
    mod environment {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/theory.md")]
    mod theory {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
