//! Shared domain types.
//!
//! Everything here is plain data: constructors validate, nothing computes.
//! Samples (images) are opaque ids with an optional blob path; no pixel data
//! ever passes through this crate.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use thiserror::Error;

/// Tolerance used when checking a stored average against its verdicts.
const AVERAGE_TOLERANCE: f64 = 1e-12;

/// Inclusive range of the holistic final score.
pub const FINAL_SCORE_MIN: f64 = 0.0;
pub const FINAL_SCORE_MAX: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invariant violated on `{field}`: {reason}")]
    InvariantViolation { field: String, reason: String },
}

impl ModelError {
    pub fn violation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::InvariantViolation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn violation(field: impl Into<String>, reason: impl Into<String>) -> ModelError {
    ModelError::violation(field, reason)
}

fn require_finite(field: &str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(violation(field, format!("non-finite value {value}")))
    }
}

fn require_non_empty(field: &str, value: &str) -> Result<(), ModelError> {
    if value.trim().is_empty() {
        Err(violation(field, "must be non-empty"))
    } else {
        Ok(())
    }
}

/// Opaque reference to an image (or any other scored artifact).
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<String>,
}

impl SampleRef {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            blob: None,
        }
    }

    pub fn with_blob(id: impl Into<String>, blob: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            blob: Some(blob.into()),
        }
    }

    fn validate(&self, field: &str) -> Result<(), ModelError> {
        require_non_empty(field, &self.id)
    }
}

/// Aspect a principle checks. The appendix labels Feature Preservation,
/// Instruction Following and Image Quality map onto these one-to-one.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrincipleCategory {
    Keep,
    Follow,
    Quality,
}

impl PrincipleCategory {
    pub const ALL: [PrincipleCategory; 3] = [Self::Keep, Self::Follow, Self::Quality];
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct Principle {
    pub id: String,
    pub text: String,
    pub category: PrincipleCategory,
}

impl Principle {
    pub fn new(id: impl Into<String>, text: impl Into<String>, category: PrincipleCategory) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            category,
        }
    }
}

/// Ordered principle list for one edit context. Verdict lists align by index.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct PrincipleSet {
    pub principles: Vec<Principle>,
    pub context_id: String,
}

impl PrincipleSet {
    pub fn new(context_id: impl Into<String>, principles: Vec<Principle>) -> Result<Self, ModelError> {
        let set = Self {
            principles,
            context_id: context_id.into(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.principles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.principles.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Principle> {
        self.principles.iter()
    }

    pub fn count_category(&self, category: PrincipleCategory) -> usize {
        self.principles.iter().filter(|p| p.category == category).count()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        require_non_empty("principles.context_id", &self.context_id)?;
        if self.principles.is_empty() {
            return Err(violation("principles", "principle set must contain K >= 1 principles"));
        }
        let mut seen = HashSet::with_capacity(self.principles.len());
        for (k, p) in self.principles.iter().enumerate() {
            require_non_empty(&format!("principles[{k}].id"), &p.id)?;
            require_non_empty(&format!("principles[{k}].text"), &p.text)?;
            if !seen.insert(p.id.as_str()) {
                return Err(violation(
                    format!("principles[{k}].id"),
                    format!("duplicate principle id `{}`", p.id),
                ));
            }
        }
        Ok(())
    }
}

/// The conditioning context c = (reference sample, instruction).
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq, Hash)]
pub struct EditContext {
    pub reference_sample: SampleRef,
    pub instruction: String,
}

impl EditContext {
    pub fn new(reference_sample: SampleRef, instruction: impl Into<String>) -> Result<Self, ModelError> {
        let ctx = Self {
            reference_sample,
            instruction: instruction.into(),
        };
        ctx.validate()?;
        Ok(ctx)
    }

    /// Stable content-derived identifier (16 hex chars).
    pub fn id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.reference_sample.id.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.instruction.as_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.reference_sample.validate("context.reference_sample.id")?;
        require_non_empty("context.instruction", &self.instruction)
    }
}

/// The unit the reward model scores: (edited, reference, instruction, principles).
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct Quadruple {
    pub edited_sample: SampleRef,
    pub context: EditContext,
    pub principles: PrincipleSet,
}

impl Quadruple {
    pub fn new(
        edited_sample: SampleRef,
        context: EditContext,
        principles: PrincipleSet,
    ) -> Result<Self, ModelError> {
        validate_quadruple(Self {
            edited_sample,
            context,
            principles,
        })
    }

    /// Key used to deduplicate pipeline records.
    pub fn key(&self) -> String {
        format!("{}/{}", self.principles.context_id, self.edited_sample.id)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.edited_sample.validate("edited_sample.id")?;
        self.context.validate()?;
        self.principles.validate()?;
        let expected = self.context.id();
        if self.principles.context_id != expected {
            return Err(violation(
                "principles.context_id",
                format!(
                    "`{}` does not refer to this context (expected `{expected}`)",
                    self.principles.context_id
                ),
            ));
        }
        Ok(())
    }
}

/// Returns `q` unchanged if all of its invariants hold.
pub fn validate_quadruple(q: Quadruple) -> Result<Quadruple, ModelError> {
    q.validate()?;
    Ok(q)
}

/// Validates a quadruple together with a trace scored against it.
pub fn validate_scored_quadruple(
    q: Quadruple,
    trace: &ReasoningTrace,
) -> Result<Quadruple, ModelError> {
    q.validate()?;
    trace.validate_against(&q.principles)?;
    Ok(q)
}

mod binary_flag {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*value))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(D::Error::custom(format!("verdict must be 0 or 1, got {other}"))),
        }
    }
}

/// Binary per-principle judgment; serialized as `0`/`1`.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct PrincipleVerdict {
    pub principle_id: String,
    #[serde(with = "binary_flag")]
    pub met: bool,
    #[serde(default)]
    pub reason: String,
}

impl PrincipleVerdict {
    pub fn new(principle_id: impl Into<String>, met: bool) -> Self {
        Self {
            principle_id: principle_id.into(),
            met,
            reason: String::new(),
        }
    }

    pub fn with_reason(mut self, reason: impl Into<String>) -> Self {
        self.reason = reason.into();
        self
    }
}

/// Uniform mean of verdicts, `None` for an empty list.
pub fn verdict_average(verdicts: &[PrincipleVerdict]) -> Option<f64> {
    if verdicts.is_empty() {
        return None;
    }
    let met = verdicts.iter().filter(|v| v.met).count();
    Some(met as f64 / verdicts.len() as f64)
}

/// One Think+Score output of the reward model.
///
/// `token_logprobs_current` and `token_logprobs_old` are either both empty
/// (traces that arrived as plain text from an external scorer) or both of
/// length `length`.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ReasoningTrace {
    pub think_text: String,
    pub verdicts: Vec<PrincipleVerdict>,
    pub average_score: f64,
    pub final_score: f64,
    #[serde(default)]
    pub score_clamped: bool,
    pub token_ids: Vec<u32>,
    pub token_logprobs_current: Vec<f64>,
    pub token_logprobs_old: Vec<f64>,
    pub length: usize,
}

impl ReasoningTrace {
    pub fn has_logprobs(&self) -> bool {
        !self.token_logprobs_current.is_empty()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.length == 0 {
            return Err(violation("trace.length", "must be positive"));
        }
        if self.token_ids.len() != self.length {
            return Err(violation(
                "trace.token_ids",
                format!("{} ids for length {}", self.token_ids.len(), self.length),
            ));
        }
        let (cur, old) = (self.token_logprobs_current.len(), self.token_logprobs_old.len());
        if cur != old || (cur != 0 && cur != self.length) {
            return Err(violation(
                "trace.token_logprobs",
                format!("current/old lengths {cur}/{old} do not match length {}", self.length),
            ));
        }
        for (i, lp) in self
            .token_logprobs_current
            .iter()
            .chain(&self.token_logprobs_old)
            .enumerate()
        {
            require_finite(&format!("trace.token_logprobs[{i}]"), *lp)?;
            if *lp > 0.0 {
                return Err(violation(
                    format!("trace.token_logprobs[{i}]"),
                    format!("log-probability {lp} is positive"),
                ));
            }
        }
        require_finite("trace.average_score", self.average_score)?;
        if !(0.0..=1.0).contains(&self.average_score) {
            return Err(violation("trace.average_score", "must lie in [0, 1]"));
        }
        require_finite("trace.final_score", self.final_score)?;
        if !(FINAL_SCORE_MIN..=FINAL_SCORE_MAX).contains(&self.final_score) {
            return Err(violation("trace.final_score", "must lie in [0, 10]"));
        }
        if let Some(avg) = verdict_average(&self.verdicts) {
            if (avg - self.average_score).abs() > AVERAGE_TOLERANCE {
                return Err(violation(
                    "trace.average_score",
                    format!("{} disagrees with verdict mean {avg}", self.average_score),
                ));
            }
        }
        Ok(())
    }

    /// Checks that the verdicts are complete and aligned with `principles`.
    pub fn validate_against(&self, principles: &PrincipleSet) -> Result<(), ModelError> {
        self.validate()?;
        if self.verdicts.len() != principles.len() {
            return Err(violation(
                "trace.verdicts",
                format!("{} verdicts for K = {}", self.verdicts.len(), principles.len()),
            ));
        }
        for (k, (v, p)) in self.verdicts.iter().zip(principles.iter()).enumerate() {
            if v.principle_id != p.id {
                return Err(violation(
                    format!("trace.verdicts[{k}].principle_id"),
                    format!("`{}` does not align with principle `{}`", v.principle_id, p.id),
                ));
            }
        }
        Ok(())
    }
}

/// Annotator decision. `WinnerLeft`/`WinnerRight` record which presentation
/// slot was preferred; the pair's `winner`/`loser` fields are already ordered.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PreferenceLabel {
    WinnerLeft,
    WinnerRight,
    Same,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct PreferencePair {
    pub context: EditContext,
    pub winner: Quadruple,
    pub loser: Quadruple,
    pub label: PreferenceLabel,
}

impl PreferencePair {
    pub fn new(
        context: EditContext,
        winner: Quadruple,
        loser: Quadruple,
        label: PreferenceLabel,
    ) -> Result<Self, ModelError> {
        let pair = Self {
            context,
            winner,
            loser,
            label,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn is_same(&self) -> bool {
        self.label == PreferenceLabel::Same
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.context.validate()?;
        self.winner.validate()?;
        self.loser.validate()?;
        if self.winner.context != self.context {
            return Err(violation("pair.winner.context", "differs from the pair context"));
        }
        if self.loser.context != self.context {
            return Err(violation("pair.loser.context", "differs from the pair context"));
        }
        Ok(())
    }
}

/// N traces for one quadruple with their scores, rewards and advantages.
/// Unpopulated lists are empty; populated ones share one length.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub sample: Quadruple,
    pub traces: Vec<ReasoningTrace>,
    #[serde(default)]
    pub scores: Vec<f64>,
    #[serde(default)]
    pub rewards: Vec<f64>,
    #[serde(default)]
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(sample: Quadruple, traces: Vec<ReasoningTrace>) -> Self {
        Self {
            sample,
            traces,
            scores: Vec::new(),
            rewards: Vec::new(),
            advantages: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.sample.validate()?;
        let n = self.traces.len();
        for (name, list) in [
            ("scores", &self.scores),
            ("rewards", &self.rewards),
            ("advantages", &self.advantages),
        ] {
            if !list.is_empty() && list.len() != n {
                return Err(violation(
                    format!("group.{name}"),
                    format!("{} entries for {n} traces", list.len()),
                ));
            }
            for (i, x) in list.iter().enumerate() {
                require_finite(&format!("group.{name}[{i}]"), *x)?;
            }
        }
        for t in &self.traces {
            t.validate()?;
        }
        Ok(())
    }
}

/// Optimizer hyper-parameters shared by GCPO and GRPO.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// N for GCPO, G for GRPO.
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub std_epsilon: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            group_size: 24,
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            std_epsilon: 1e-8,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.group_size == 0 {
            return Err(violation("optimizer.group_size", "must be positive"));
        }
        require_finite("optimizer.clip_epsilon", self.clip_epsilon)?;
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(violation("optimizer.clip_epsilon", "must lie in (0, 1)"));
        }
        require_finite("optimizer.kl_beta", self.kl_beta)?;
        if self.kl_beta < 0.0 {
            return Err(violation("optimizer.kl_beta", "must be nonnegative"));
        }
        require_finite("optimizer.std_epsilon", self.std_epsilon)?;
        if self.std_epsilon <= 0.0 {
            return Err(violation("optimizer.std_epsilon", "must be positive"));
        }
        require_finite("optimizer.learning_rate", self.learning_rate)?;
        if self.learning_rate <= 0.0 {
            return Err(violation("optimizer.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn context(reference: &str, instruction: &str) -> EditContext {
        EditContext::new(SampleRef::new(reference), instruction).unwrap()
    }

    pub fn principle_set(ctx: &EditContext, k: usize) -> PrincipleSet {
        let principles = (0..k)
            .map(|i| {
                Principle::new(
                    format!("p{i}"),
                    format!("Is point {i} satisfied?"),
                    PrincipleCategory::ALL[i % 3],
                )
            })
            .collect();
        PrincipleSet::new(ctx.id(), principles).unwrap()
    }

    pub fn quadruple(edited: &str, k: usize) -> Quadruple {
        let ctx = context("ref-0", "make the sky purple");
        let principles = principle_set(&ctx, k);
        Quadruple::new(SampleRef::new(edited), ctx, principles).unwrap()
    }

    pub fn trace_for(principles: &PrincipleSet, met: &[bool], final_score: f64) -> ReasoningTrace {
        let verdicts: Vec<_> = principles
            .iter()
            .zip(met)
            .map(|(p, m)| PrincipleVerdict::new(p.id.clone(), *m))
            .collect();
        let average_score = verdict_average(&verdicts).unwrap_or(0.0);
        ReasoningTrace {
            think_text: "looked at it".into(),
            verdicts,
            average_score,
            final_score,
            score_clamped: false,
            token_ids: vec![1, 2, 3],
            token_logprobs_current: vec![-0.1, -0.2, -0.3],
            token_logprobs_old: vec![-0.1, -0.2, -0.3],
            length: 3,
        }
    }
}
