use super::SamplingParams;
use crate::model::{EditContext, PrincipleSet, PrincipleVerdict, Quadruple, ReasoningTrace};
use crate::trace::RawTraceText;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("service unavailable: {0}")]
    Unavailable(String),
    #[error("timed out after {0} s")]
    Timeout(u64),
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// Decomposes instructions into principles and supplies gold verdicts.
pub trait JudgeClient: Send + Sync {
    fn name(&self) -> &str;

    fn decompose(&self, ctx: &EditContext) -> Result<PrincipleSet, ClientError>;

    /// Gold verdicts for `quad`, aligned with its principle set. Called once
    /// per quadruple; the result is shared by every candidate.
    fn verify(&self, quad: &Quadruple, candidates: &[ReasoningTrace]) -> Result<Vec<PrincipleVerdict>, ClientError>;
}

/// One member of the scorer pool.
pub trait ScorerClient: Send + Sync {
    fn id(&self) -> &str;

    fn score(&self, quad: &Quadruple, params: &SamplingParams) -> Result<RawTraceText, ClientError>;
}

/// Flags contexts that belong in the hard split.
pub trait ComplexityFilter: Send + Sync {
    fn is_complex(&self, ctx: &EditContext) -> Result<bool, ClientError>;
}
