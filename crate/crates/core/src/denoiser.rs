//! The noise-predictor contract shared by the analytic (closed-form) and
//! learned (MLP) implementations.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    Analytic,
    Learned,
}

/// An epsilon-predictor eps_hat = predict(x_t, t, c).
///
/// Implementations must be deterministic functions of their inputs and
/// return a vector of the same dimension as `x_t`; both properties are
/// load-bearing for every reconstruction and classifier evaluation built
/// on top.
pub trait Denoiser: Send + Sync {
    /// Writes the noise prediction for `x_t` at training timestep `t`
    /// conditioned on `class` into `out`.
    fn predict_into(&self, x_t: &[f64], t: usize, class: usize, out: &mut [f64]);

    fn dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    fn kind(&self) -> DenoiserKind;

    fn predict(&self, x_t: &[f64], t: usize, class: usize) -> Vec<f64> {
        let mut out = vec![0.0; x_t.len()];
        self.predict_into(x_t, t, class, &mut out);
        out
    }
}
