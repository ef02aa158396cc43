use super::{ClientError, ComplexityFilter, JudgeClient, SamplingParams, ScorerClient};
use crate::model::{
    verdict_average, EditContext, Principle, PrincipleCategory, PrincipleSet, PrincipleVerdict, Quadruple,
    ReasoningTrace,
};
use crate::seed::unit_hash;
use crate::trace::{emit_trace, format_number, RawTraceText};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Ten fixed principles (3 Keep, 4 Follow, 3 Quality) for `ctx`.
pub fn template_principles(ctx: &EditContext) -> PrincipleSet {
    use PrincipleCategory::*;
    let instruction = &ctx.instruction;
    let rows = [
        ("k1", Keep, "Is the background unchanged outside the edited region?".to_string()),
        ("k2", Keep, "Are objects unrelated to the edit preserved?".to_string()),
        ("k3", Keep, "Is the original composition and viewpoint kept?".to_string()),
        ("f1", Follow, format!("Is the instruction \"{instruction}\" carried out?")),
        ("f2", Follow, "Does the change happen on the object the instruction names?".to_string()),
        ("f3", Follow, "Is every part of the instruction addressed?".to_string()),
        ("f4", Follow, "Is nothing added beyond what was asked?".to_string()),
        ("q1", Quality, "Is the result free of visible artifacts?".to_string()),
        ("q2", Quality, "Are lighting and shadows consistent?".to_string()),
        ("q3", Quality, "Does the edited image look natural?".to_string()),
    ];
    PrincipleSet {
        principles: rows.into_iter().map(|(id, cat, text)| Principle::new(id, text, cat)).collect(),
        context_id: ctx.id(),
    }
}

type QualityTable = Arc<BTreeMap<String, f64>>;

fn met_probability(quality: Option<&QualityTable>, sample_id: &str) -> f64 {
    quality
        .and_then(|q| q.get(sample_id))
        .map(|q| (q / 10.0).clamp(0.0, 1.0))
        .unwrap_or(0.7)
}

fn gold_verdicts(quality: Option<&QualityTable>, seed: u64, quad: &Quadruple) -> Vec<PrincipleVerdict> {
    let p = met_probability(quality, &quad.edited_sample.id);
    quad.principles
        .iter()
        .map(|pr| PrincipleVerdict::new(pr.id.clone(), unit_hash(seed, &format!("{}#{}", quad.key(), pr.id)) < p))
        .collect()
}

/// Deterministic judge. With a quality table, principles are met more often
/// for better samples; otherwise verdicts are hash-derived.
#[derive(Clone, Debug, Default)]
pub struct StubJudge {
    pub quality: Option<QualityTable>,
    pub seed: u64,
}

impl StubJudge {
    pub fn with_quality(quality: BTreeMap<String, f64>) -> Self {
        Self {
            quality: Some(Arc::new(quality)),
            seed: 0,
        }
    }
}

impl JudgeClient for StubJudge {
    fn name(&self) -> &str {
        "stub"
    }

    fn decompose(&self, ctx: &EditContext) -> Result<PrincipleSet, ClientError> {
        Ok(template_principles(ctx))
    }

    fn verify(&self, quad: &Quadruple, _candidates: &[ReasoningTrace]) -> Result<Vec<PrincipleVerdict>, ClientError> {
        Ok(gold_verdicts(self.quality.as_ref(), self.seed, quad))
    }
}

/// Deterministic scorer: gold verdicts flipped with a temperature-dependent
/// rate, and a score near the latent quality (or the verdict average).
#[derive(Clone, Debug)]
pub struct StubScorer {
    pub id: String,
    pub quality: Option<QualityTable>,
    pub seed: u64,
    /// Fraction of outputs emitted without a score tag.
    pub malformed_rate: f64,
}

impl StubScorer {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            quality: None,
            seed: 0,
            malformed_rate: 0.0,
        }
    }

    pub fn with_quality(mut self, quality: Arc<BTreeMap<String, f64>>) -> Self {
        self.quality = Some(quality);
        self
    }

    pub fn with_malformed_rate(mut self, rate: f64) -> Self {
        self.malformed_rate = rate;
        self
    }
}

impl ScorerClient for StubScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, quad: &Quadruple, params: &SamplingParams) -> Result<RawTraceText, ClientError> {
        let salt = format!("{}|{}|{}", quad.key(), self.id, params.name);
        if unit_hash(self.seed, &format!("{salt}|malformed")) < self.malformed_rate {
            return Ok(RawTraceText::new(format!("{} could not finish the review", self.id)));
        }
        let flip_rate = 0.05 + 0.25 * params.temperature.clamp(0.0, 2.0);
        let verdicts: Vec<PrincipleVerdict> = gold_verdicts(self.quality.as_ref(), self.seed, quad)
            .into_iter()
            .map(|v| {
                let flip = unit_hash(self.seed, &format!("{salt}|{}", v.principle_id)) < flip_rate;
                PrincipleVerdict::new(v.principle_id, v.met != flip)
            })
            .collect();
        let average = verdict_average(&verdicts).unwrap_or(0.0);
        let base = match self.quality.as_ref().and_then(|q| q.get(&quad.edited_sample.id)) {
            Some(q) => *q,
            None => 10.0 * average,
        };
        let jitter = (unit_hash(self.seed, &format!("{salt}|score")) - 0.5) * 2.0 * params.temperature;
        let final_score = (base + jitter).round().clamp(0.0, 10.0);
        let met = verdicts.iter().filter(|v| v.met).count();
        let trace = ReasoningTrace {
            think_text: format!(
                "{} reviewed {} against {} points; {met} look satisfied, average {}.",
                self.id,
                quad.edited_sample.id,
                verdicts.len(),
                format_number(average)
            ),
            average_score: average,
            verdicts,
            final_score,
            score_clamped: false,
            token_ids: vec![0],
            token_logprobs_current: Vec::new(),
            token_logprobs_old: Vec::new(),
            length: 1,
        };
        Ok(emit_trace(&trace, &quad.principles))
    }
}

const VERBS: [&str; 18] = [
    "add", "blur", "brighten", "change", "darken", "delete", "insert", "make", "move", "paint", "put", "remove",
    "replace", "rotate", "swap", "turn", "resize", "recolor",
];

/// Flags instructions that contain at least two distinct edit verbs.
#[derive(Clone, Copy, Debug, Default)]
pub struct TwoVerbFilter;

impl ComplexityFilter for TwoVerbFilter {
    fn is_complex(&self, ctx: &EditContext) -> Result<bool, ClientError> {
        let mut seen: Vec<&str> = ctx
            .instruction
            .split(|c: char| !c.is_alphabetic())
            .filter_map(|w| VERBS.iter().copied().find(|v| v.eq_ignore_ascii_case(w)))
            .collect();
        seen.sort_unstable();
        seen.dedup();
        Ok(seen.len() >= 2)
    }
}
