//! Blind joint channel estimation and symbol detection on linear ISI channels.
//!
//! The receiver interleaves expectation-maximization (EM) parameter updates
//! with belief propagation (BP) iterations on the Ungerboeck factor graph of
//! one received block. Around that core the crate provides:
//!
//! - [`channel`]: constellations, block-fading ISI channels, matched-filter statistics.
//! - [`graph`]: the factor graph and (momentum-weighted) log-domain BP.
//! - [`em`]: closed-form M-step updates and the interleaved EM/BP detector.
//! - [`vae_init`]: a variational linear-equalizer initializer.
//! - [`baselines`]: BCJR MAP detection, pilot least squares and decision-directed refinement.
//! - [`metrics`]: squared error, BER, bit-metric LLRs, BMI and ELBO/KL diagnostics.
//! - [`learn`]: offline tuning of momentum weights and EM schedules.
//! - [`experiments`]: Monte-Carlo drivers that produce CSV tables.

pub mod baselines;
pub mod channel;
pub mod em;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod learn;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod vae_init;

pub use error::{Error, Result};
pub use num_complex::Complex64;
