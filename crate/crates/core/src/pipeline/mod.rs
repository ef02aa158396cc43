//! Cold-start data curation: principle decomposition, candidate trace
//! sampling from a scorer pool, external verification and selection of SFT
//! records.

mod adapters;
mod clients;
mod store;
mod stubs;
pub mod templates;

pub use adapters::{run_command, AdapterKind, AdapterSpec, CommandFilter, CommandJudge, CommandScorer, ExternalCmdReward};
pub use clients::{ClientError, ComplexityFilter, JudgeClient, ScorerClient};
pub use store::{read_inputs, run_pipeline, GoldRecord, PipelineReport, PipelineRun, PipelineStep, PipelineStore, StoredPrinciples};
pub use stubs::{template_principles, StubJudge, StubScorer, TwoVerbFilter};

use crate::exec::{self, Execution};
use crate::jsonl::JsonlError;
use crate::model::{EditContext, ModelError, PrincipleCategory, PrincipleSet, PrincipleVerdict, Quadruple, ReasoningTrace, SampleRef};
use crate::seed;
use crate::trace::{parse_trace, TraceError};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("judge returned no principles for context `{0}`")]
    EmptyDecomposition(String),
    #[error("principles for context `{0}` contain no Follow principle")]
    MissingFollow(String),
    #[error("no candidate trace parsed for `{key}` ({failures} failures)")]
    AllCandidatesFailed { key: String, failures: usize },
    #[error("{trace} trace verdicts vs {gold} gold verdicts")]
    LengthMismatch { trace: usize, gold: usize },
    #[error("no candidates to select from")]
    NoCandidates,
    #[error("scorer pool is empty")]
    EmptyPool,
    #[error("hard split requested without a complexity filter")]
    FilterUnavailable,
    #[error("split ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),
    #[error("client error: {0}")]
    Client(#[from] ClientError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One way of querying a scorer (system prompt, temperature, ...).
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    pub name: String,
    pub temperature: f64,
    #[serde(default)]
    pub system_prompt: String,
}

impl SamplingParams {
    pub fn new(name: impl Into<String>, temperature: f64) -> Self {
        Self {
            name: name.into(),
            temperature,
            system_prompt: String::new(),
        }
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::new("cool", 0.2), Self::new("warm", 0.7), Self::new("hot", 1.0)]
    }
}

/// A context together with the candidate edits to be scored.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct PipelineInput {
    pub context: EditContext,
    pub edited_samples: Vec<SampleRef>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Candidate {
    pub quad_key: String,
    pub scorer_id: String,
    pub variant: String,
    pub trace: ReasoningTrace,
}

impl Candidate {
    pub fn record_key(&self) -> String {
        record_key(&self.quad_key, &self.scorer_id, &self.variant)
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct CandidateFailure {
    pub quad_key: String,
    pub scorer_id: String,
    pub variant: String,
    pub error: String,
}

impl CandidateFailure {
    pub fn record_key(&self) -> String {
        record_key(&self.quad_key, &self.scorer_id, &self.variant)
    }
}

pub fn record_key(quad_key: &str, scorer_id: &str, variant: &str) -> String {
    format!("{quad_key}|{scorer_id}|{variant}")
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
pub struct CandidateBatch {
    pub candidates: Vec<Candidate>,
    pub failures: Vec<CandidateFailure>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Provenance {
    pub scorer_id: String,
    pub sampling_params: String,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SftRecord {
    pub quadruple: Quadruple,
    pub trace: ReasoningTrace,
    pub verification_accuracy: f64,
    pub provenance: Provenance,
}

/// Asks the judge for principles and checks the result.
pub fn decompose_principles(ctx: &EditContext, judge: &dyn JudgeClient) -> Result<PrincipleSet, PipelineError> {
    let set = judge.decompose(ctx).map_err(|e| match e {
        ClientError::Unavailable(m) => PipelineError::JudgeUnavailable(m),
        other => PipelineError::Client(other),
    })?;
    if set.is_empty() {
        return Err(PipelineError::EmptyDecomposition(ctx.id()));
    }
    let set = PrincipleSet::new(ctx.id(), set.principles)?;
    if set.count_category(PrincipleCategory::Follow) == 0 {
        return Err(PipelineError::MissingFollow(ctx.id()));
    }
    Ok(set)
}

/// Queries every (scorer, variant) combination; outputs that fail to parse
/// are logged and returned as failures.
pub fn sample_candidates(
    quad: &Quadruple,
    pool: &[&dyn ScorerClient],
    variants: &[SamplingParams],
    execution: Execution,
) -> Result<CandidateBatch, PipelineError> {
    if pool.is_empty() {
        return Err(PipelineError::EmptyPool);
    }
    let combos: Vec<(&dyn ScorerClient, &SamplingParams)> =
        pool.iter().flat_map(|s| variants.iter().map(move |v| (*s, v))).collect();
    let key = quad.key();
    let results = exec::map(execution, &combos, |_, (scorer, variant)| score_candidate(quad, *scorer, variant));
    let mut batch = CandidateBatch::default();
    for outcome in results {
        match outcome {
            Ok(c) => batch.candidates.push(c),
            Err(f) => batch.failures.push(f),
        }
    }
    if batch.candidates.is_empty() {
        return Err(PipelineError::AllCandidatesFailed {
            key,
            failures: batch.failures.len(),
        });
    }
    Ok(batch)
}

/// Queries one scorer with one variant and parses the output.
pub fn score_candidate(
    quad: &Quadruple,
    scorer: &dyn ScorerClient,
    variant: &SamplingParams,
) -> Result<Candidate, CandidateFailure> {
    let outcome = scorer
        .score(quad, variant)
        .map_err(|e| e.to_string())
        .and_then(|raw| {
            parse_trace(&raw, &quad.principles)
                .map(|p| p.into_text_trace(&raw))
                .map_err(|e: TraceError| e.to_string())
        });
    match outcome {
        Ok(trace) => Ok(Candidate {
            quad_key: quad.key(),
            scorer_id: scorer.id().to_string(),
            variant: variant.name.clone(),
            trace,
        }),
        Err(error) => {
            log::warn!("candidate {}/{} for {} dropped: {error}", scorer.id(), variant.name, quad.key());
            Err(CandidateFailure {
                quad_key: quad.key(),
                scorer_id: scorer.id().to_string(),
                variant: variant.name.clone(),
                error,
            })
        }
    }
}

/// Fraction of verdicts agreeing with the gold verdicts, by position.
pub fn verification_accuracy(trace: &ReasoningTrace, gold: &[PrincipleVerdict]) -> Result<f64, PipelineError> {
    if trace.verdicts.len() != gold.len() || gold.is_empty() {
        return Err(PipelineError::LengthMismatch {
            trace: trace.verdicts.len(),
            gold: gold.len(),
        });
    }
    let agree = trace.verdicts.iter().zip(gold).filter(|(a, b)| a.met == b.met).count();
    Ok(agree as f64 / gold.len() as f64)
}

/// Index of the best candidate: highest accuracy, then shorter length, then
/// lower index.
pub fn select_best(accuracies: &[f64], lengths: &[usize]) -> Option<usize> {
    (0..accuracies.len().min(lengths.len())).reduce(|best, i| {
        let better = accuracies[i] > accuracies[best]
            || (accuracies[i] == accuracies[best] && lengths[i] < lengths[best]);
        if better {
            i
        } else {
            best
        }
    })
}

/// Selects the SFT record for `quad` against precomputed gold verdicts.
pub fn select_with_gold(
    candidates: &[Candidate],
    quad: &Quadruple,
    gold: &[PrincipleVerdict],
) -> Result<SftRecord, PipelineError> {
    if candidates.is_empty() {
        return Err(PipelineError::NoCandidates);
    }
    let accuracies = candidates
        .iter()
        .map(|c| verification_accuracy(&c.trace, gold))
        .collect::<Result<Vec<_>, _>>()?;
    let lengths: Vec<usize> = candidates.iter().map(|c| c.trace.length).collect();
    let best = select_best(&accuracies, &lengths).ok_or(PipelineError::NoCandidates)?;
    let chosen = &candidates[best];
    Ok(SftRecord {
        quadruple: quad.clone(),
        trace: chosen.trace.clone(),
        verification_accuracy: accuracies[best],
        provenance: Provenance {
            scorer_id: chosen.scorer_id.clone(),
            sampling_params: chosen.variant.clone(),
        },
    })
}

/// Verifies once with `judge` and selects the best candidate.
pub fn select_sft_record(
    candidates: &[Candidate],
    quad: &Quadruple,
    judge: &dyn JudgeClient,
) -> Result<SftRecord, PipelineError> {
    if candidates.is_empty() {
        return Err(PipelineError::NoCandidates);
    }
    let traces: Vec<ReasoningTrace> = candidates.iter().map(|c| c.trace.clone()).collect();
    let gold = judge.verify(quad, &traces)?;
    select_with_gold(candidates, quad, &gold)
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Random,
    Hard,
}

/// Random mode keeps exactly `round(ratio·n)` contexts chosen by a seeded
/// sampler, in input order. Hard mode keeps contexts the filter flags.
pub fn curate_split(
    contexts: &[EditContext],
    mode: SplitMode,
    ratio: f64,
    seed: u64,
    filter: Option<&dyn ComplexityFilter>,
) -> Result<Vec<EditContext>, PipelineError> {
    match mode {
        SplitMode::Random => {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(PipelineError::InvalidRatio(ratio));
            }
            let keep = (ratio * contexts.len() as f64).round() as usize;
            let mut chosen = index::sample(&mut seed::rng(seed), contexts.len(), keep).into_vec();
            chosen.sort_unstable();
            Ok(chosen.into_iter().map(|i| contexts[i].clone()).collect())
        }
        SplitMode::Hard => {
            let filter = filter.ok_or(PipelineError::FilterUnavailable)?;
            let mut out = Vec::new();
            for ctx in contexts {
                if filter.is_complex(ctx)? {
                    out.push(ctx.clone());
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::{principle_set, quadruple};

    fn verdicts(bits: &[u8]) -> Vec<PrincipleVerdict> {
        bits.iter().enumerate().map(|(i, b)| PrincipleVerdict::new(format!("p{i}"), *b == 1)).collect()
    }

    fn trace_with(bits: &[u8], length: usize) -> ReasoningTrace {
        ReasoningTrace {
            think_text: String::new(),
            verdicts: verdicts(bits),
            average_score: 0.0,
            final_score: 5.0,
            score_clamped: false,
            token_ids: vec![0; length],
            token_logprobs_current: Vec::new(),
            token_logprobs_old: Vec::new(),
            length,
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(verification_accuracy(&trace_with(&[1, 1, 0], 1), &verdicts(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(verification_accuracy(&trace_with(&[1, 0], 1), &verdicts(&[0, 1])).unwrap(), 0.0);
        let a = verification_accuracy(
            &trace_with(&[1, 1, 1, 1, 1, 0, 0, 1, 1, 1], 1),
            &verdicts(&[1, 1, 1, 1, 1, 0, 1, 1, 1, 1]),
        )
        .unwrap();
        assert!((a - 0.9).abs() < 1e-12);
        assert!(matches!(
            verification_accuracy(&trace_with(&[1], 1), &verdicts(&[1, 0])),
            Err(PipelineError::LengthMismatch { trace: 1, gold: 2 })
        ));
    }

    #[test]
    fn selection_tie_breaks() {
        assert_eq!(select_best(&[0.7, 0.9, 0.9], &[50, 80, 40]), Some(2));
        assert_eq!(select_best(&[0.3], &[9]), Some(0));
        assert_eq!(select_best(&[0.5, 0.5, 0.5], &[7, 7, 7]), Some(0));
        assert_eq!(select_best(&[], &[]), None);
    }

    #[test]
    fn stub_decomposition_has_expected_shape() {
        let q = quadruple("e", 1);
        let set = decompose_principles(&q.context, &StubJudge::default()).unwrap();
        assert_eq!(set.len(), 10);
        assert_eq!(set.count_category(PrincipleCategory::Keep), 3);
        assert_eq!(set.count_category(PrincipleCategory::Follow), 4);
        assert_eq!(set.count_category(PrincipleCategory::Quality), 3);
        assert_eq!(set, decompose_principles(&q.context, &StubJudge::default()).unwrap());
    }

    #[test]
    fn empty_decomposition_is_rejected() {
        struct Empty;
        impl JudgeClient for Empty {
            fn name(&self) -> &str {
                "empty"
            }
            fn decompose(&self, ctx: &EditContext) -> Result<PrincipleSet, ClientError> {
                Ok(PrincipleSet {
                    principles: Vec::new(),
                    context_id: ctx.id(),
                })
            }
            fn verify(&self, _: &Quadruple, _: &[ReasoningTrace]) -> Result<Vec<PrincipleVerdict>, ClientError> {
                Ok(Vec::new())
            }
        }
        let q = quadruple("e", 1);
        assert!(matches!(decompose_principles(&q.context, &Empty), Err(PipelineError::EmptyDecomposition(_))));
    }

    #[test]
    fn candidate_cardinality_and_failures() {
        let ctx = crate::model::fixtures::context("ref-0", "make the sky purple");
        let q = Quadruple::new(SampleRef::new("e"), ctx.clone(), template_principles(&ctx)).unwrap();
        let a = StubScorer::new("a");
        let b = StubScorer::new("b");
        let batch = sample_candidates(&q, &[&a, &b], &SamplingParams::defaults(), Execution::Sequential).unwrap();
        assert_eq!(batch.candidates.len(), 6);
        assert!(batch.failures.is_empty());

        let broken = StubScorer::new("x").with_malformed_rate(1.0);
        let err = sample_candidates(&q, &[&broken], &SamplingParams::defaults(), Execution::Sequential).unwrap_err();
        assert!(matches!(err, PipelineError::AllCandidatesFailed { failures: 3, .. }));
    }

    #[test]
    fn random_split_is_exact_and_seeded() {
        let ctxs: Vec<EditContext> = (0..100)
            .map(|i| crate::model::fixtures::context(&format!("r{i}"), "make it blue"))
            .collect();
        let a = curate_split(&ctxs, SplitMode::Random, 0.5, 3, None).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, curate_split(&ctxs, SplitMode::Random, 0.5, 3, None).unwrap());
        assert!(matches!(
            curate_split(&ctxs, SplitMode::Hard, 0.5, 3, None),
            Err(PipelineError::FilterUnavailable)
        ));
    }

    #[test]
    fn hard_split_keeps_two_verb_instructions() {
        let ctxs = vec![
            crate::model::fixtures::context("a", "make the sky purple"),
            crate::model::fixtures::context("b", "remove the lamp and add a cat"),
        ];
        let out = curate_split(&ctxs, SplitMode::Hard, 1.0, 0, Some(&TwoVerbFilter)).unwrap();
        assert_eq!(out, vec![ctxs[1].clone()]);
        let _ = principle_set;
    }
}
