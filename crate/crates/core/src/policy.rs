//! Abstract differentiable token-sequence policies.
//!
//! Parameters are passed explicitly to every query so that the same model can
//! be evaluated at the current, frozen-old and reference parameter vectors.

use crate::model::{EditContext, Quadruple, SampleRef};
use crate::trace::RawTraceText;
use rand::RngCore;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("no features for sample `{0}`")]
    UnknownSample(String),
    #[error("token {token} at position {position} has zero probability")]
    ImpossibleToken { position: usize, token: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// A stochastic token-sequence generator conditioned on `C`.
pub trait PolicyModel<C: ?Sized>: Send + Sync {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Samples one token sequence under `params`.
    fn sample(&self, params: &[f64], cond: &C, rng: &mut dyn RngCore) -> Result<Vec<u32>, PolicyError>;

    /// Per-token log-probabilities of `tokens` under `params`.
    fn log_probs(&self, params: &[f64], cond: &C, tokens: &[u32]) -> Result<Vec<f64>, PolicyError>;

    /// Adds `Σ_t weights[t] · ∇ log π(tokens[t] | prefix)` to `grad`.
    fn accumulate_log_prob_grad(
        &self,
        params: &[f64],
        cond: &C,
        tokens: &[u32],
        weights: &[f64],
        grad: &mut [f64],
    ) -> Result<(), PolicyError>;
}

/// A reward model acting as a policy: token sequences render to Think+Score text.
pub trait ReasoningPolicy: PolicyModel<Quadruple> {
    fn render(&self, quad: &Quadruple, tokens: &[u32]) -> RawTraceText;
}

/// A generation policy whose token sequences are realized as opaque samples.
pub trait GenerationPolicy: PolicyModel<EditContext> {
    fn realize(&self, ctx: &EditContext, tokens: &[u32]) -> SampleRef;
}

/// Plain gradient-ascent update `θ ← θ + lr·g`.
pub fn ascend(params: &mut [f64], grad: &[f64], learning_rate: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p += learning_rate * g;
    }
}
