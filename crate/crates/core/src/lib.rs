//! Likelihood-informed core-set selection on closed-form Gaussian-mixture
//! worlds.
//!
//! The pipeline: sample a labeled mixture world, pick a class-wise
//! reconstruction timestep inside an SNR window by maximizing the drop rate
//! of the diffusion classifier's log-probability, score every sample by its
//! DDIM reconstruction deviation at that timestep, build subsets (windows,
//! strata, best-window search), and train a proxy classifier on the result.
//! Because the world's densities, scores, and posteriors are exact, every
//! step can be audited against brute-force oracles ([`oracle`]).

pub mod coreset;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod harness;
pub mod linalg;
pub mod mlp;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod scoring;
pub mod selector;

pub use error::{Error, Result};
