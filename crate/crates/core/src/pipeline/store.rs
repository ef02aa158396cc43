use super::{
    decompose_principles, score_candidate, select_with_gold, Candidate, CandidateFailure, JudgeClient, PipelineError,
    PipelineInput, SamplingParams, ScorerClient, SftRecord,
};
use crate::exec::{self, Execution};
use crate::jsonl;
use crate::model::{EditContext, PrincipleSet, PrincipleVerdict, Quadruple};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum PipelineStep {
    Decompose,
    Score,
    Verify,
    Select,
    All,
}

impl FromStr for PipelineStep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "decompose" => Ok(Self::Decompose),
            "score" => Ok(Self::Score),
            "verify" => Ok(Self::Verify),
            "select" => Ok(Self::Select),
            "all" => Ok(Self::All),
            other => Err(format!("unknown step `{other}`")),
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct StoredPrinciples {
    pub context: EditContext,
    pub principles: PrincipleSet,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct GoldRecord {
    pub quad_key: String,
    pub verdicts: Vec<PrincipleVerdict>,
}

#[derive(Serialize, Deserialize, Clone, Debug, Default, PartialEq)]
pub struct PipelineReport {
    pub contexts: usize,
    pub quadruples: usize,
    pub candidates: usize,
    pub failures: usize,
    pub gold: usize,
    pub sft_records: usize,
    /// Work items skipped because the store already held their results.
    pub reused: usize,
    /// Quadruples for which no candidate parsed.
    pub unscored: usize,
}

/// Directory of JSONL files, one per pipeline stage. Every file is rewritten
/// in key order after each stage, so a completed run is byte-reproducible
/// and re-running never duplicates records.
#[derive(Clone, Debug)]
pub struct PipelineStore {
    pub dir: PathBuf,
}

impl PipelineStore {
    pub const PRINCIPLES: &'static str = "principles.jsonl";
    pub const QUADRUPLES: &'static str = "quadruples.jsonl";
    pub const CANDIDATES: &'static str = "candidates.jsonl";
    pub const FAILURES: &'static str = "failures.jsonl";
    pub const GOLD: &'static str = "gold.jsonl";
    pub const SFT: &'static str = "sft.jsonl";

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn load<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, PipelineError> {
        let path = self.path(name);
        if !path.exists() {
            return Ok(Vec::new());
        }
        Ok(jsonl::read_path(path)?)
    }

    fn save<T: Serialize>(&self, name: &str, records: &[T]) -> Result<(), PipelineError> {
        let tmp = self.path(&format!("{name}.tmp"));
        jsonl::write_path(&tmp, records)?;
        fs::rename(tmp, self.path(name))?;
        Ok(())
    }

    pub fn principles(&self) -> Result<Vec<StoredPrinciples>, PipelineError> {
        self.load(Self::PRINCIPLES)
    }

    pub fn quadruples(&self) -> Result<Vec<Quadruple>, PipelineError> {
        self.load(Self::QUADRUPLES)
    }

    pub fn candidates(&self) -> Result<Vec<Candidate>, PipelineError> {
        self.load(Self::CANDIDATES)
    }

    pub fn failures(&self) -> Result<Vec<CandidateFailure>, PipelineError> {
        self.load(Self::FAILURES)
    }

    pub fn gold(&self) -> Result<Vec<GoldRecord>, PipelineError> {
        self.load(Self::GOLD)
    }

    pub fn sft(&self) -> Result<Vec<SftRecord>, PipelineError> {
        self.load(Self::SFT)
    }
}

pub struct PipelineRun<'a> {
    pub inputs: &'a [PipelineInput],
    pub judge: &'a dyn JudgeClient,
    pub scorers: &'a [&'a dyn ScorerClient],
    pub variants: &'a [SamplingParams],
    pub execution: Execution,
}

/// Runs `step` (or every step) against `store`.
pub fn run_pipeline(store: &PipelineStore, step: PipelineStep, run: &PipelineRun<'_>) -> Result<PipelineReport, PipelineError> {
    let mut report = PipelineReport::default();
    let all = step == PipelineStep::All;
    if all || step == PipelineStep::Decompose {
        decompose_stage(store, run, &mut report)?;
    }
    if all || step == PipelineStep::Score {
        score_stage(store, run, &mut report)?;
    }
    if all || step == PipelineStep::Verify {
        verify_stage(store, run, &mut report)?;
    }
    if all || step == PipelineStep::Select {
        select_stage(store, &mut report)?;
    }
    Ok(report)
}

fn decompose_stage(store: &PipelineStore, run: &PipelineRun<'_>, report: &mut PipelineReport) -> Result<(), PipelineError> {
    let mut by_ctx: BTreeMap<String, StoredPrinciples> =
        store.principles()?.into_iter().map(|p| (p.context.id(), p)).collect();
    let mut pending: Vec<&EditContext> = Vec::new();
    for input in run.inputs {
        let id = input.context.id();
        if by_ctx.contains_key(&id) || pending.iter().any(|c| c.id() == id) {
            report.reused += usize::from(by_ctx.contains_key(&id));
            continue;
        }
        pending.push(&input.context);
    }
    let fresh = exec::try_map(run.execution, &pending, |_, ctx| {
        decompose_principles(ctx, run.judge).map(|principles| StoredPrinciples {
            context: (*ctx).clone(),
            principles,
        })
    })?;
    for p in fresh {
        by_ctx.insert(p.context.id(), p);
    }
    report.contexts = by_ctx.len();
    store.save(PipelineStore::PRINCIPLES, &by_ctx.values().cloned().collect::<Vec<_>>())?;

    let mut quads: BTreeMap<String, Quadruple> = store.quadruples()?.into_iter().map(|q| (q.key(), q)).collect();
    for input in run.inputs {
        let principles = &by_ctx[&input.context.id()].principles;
        for sample in &input.edited_samples {
            let quad = Quadruple::new(sample.clone(), input.context.clone(), principles.clone())?;
            quads.insert(quad.key(), quad);
        }
    }
    report.quadruples = quads.len();
    store.save(PipelineStore::QUADRUPLES, &quads.into_values().collect::<Vec<_>>())
}

fn score_stage(store: &PipelineStore, run: &PipelineRun<'_>, report: &mut PipelineReport) -> Result<(), PipelineError> {
    if run.scorers.is_empty() {
        return Err(PipelineError::EmptyPool);
    }
    let quads = store.quadruples()?;
    let mut candidates: BTreeMap<String, Candidate> =
        store.candidates()?.into_iter().map(|c| (c.record_key(), c)).collect();
    let mut failures: BTreeMap<String, CandidateFailure> =
        store.failures()?.into_iter().map(|f| (f.record_key(), f)).collect();

    let mut jobs: Vec<(&Quadruple, &dyn ScorerClient, &SamplingParams)> = Vec::new();
    for quad in &quads {
        let key = quad.key();
        for &scorer in run.scorers {
            for variant in run.variants {
                if candidates.contains_key(&super::record_key(&key, scorer.id(), &variant.name)) {
                    report.reused += 1;
                } else {
                    jobs.push((quad, scorer, variant));
                }
            }
        }
    }
    let results = exec::map(run.execution, &jobs, |_, (quad, scorer, variant)| score_candidate(quad, *scorer, variant));
    for outcome in results {
        match outcome {
            Ok(c) => {
                failures.remove(&c.record_key());
                candidates.insert(c.record_key(), c);
            }
            Err(f) => {
                failures.insert(f.record_key(), f);
            }
        }
    }
    let scored: std::collections::BTreeSet<&str> = candidates.values().map(|c| c.quad_key.as_str()).collect();
    for quad in &quads {
        if !scored.contains(quad.key().as_str()) {
            log::warn!("{}", PipelineError::AllCandidatesFailed {
                key: quad.key(),
                failures: failures.values().filter(|f| f.quad_key == quad.key()).count(),
            });
            report.unscored += 1;
        }
    }
    report.candidates = candidates.len();
    report.failures = failures.len();
    store.save(PipelineStore::CANDIDATES, &candidates.into_values().collect::<Vec<_>>())?;
    store.save(PipelineStore::FAILURES, &failures.into_values().collect::<Vec<_>>())
}

fn group_candidates(candidates: Vec<Candidate>) -> BTreeMap<String, Vec<Candidate>> {
    let mut grouped: BTreeMap<String, Vec<Candidate>> = BTreeMap::new();
    for c in candidates {
        grouped.entry(c.quad_key.clone()).or_default().push(c);
    }
    grouped
}

fn verify_stage(store: &PipelineStore, run: &PipelineRun<'_>, report: &mut PipelineReport) -> Result<(), PipelineError> {
    let quads: BTreeMap<String, Quadruple> = store.quadruples()?.into_iter().map(|q| (q.key(), q)).collect();
    let grouped = group_candidates(store.candidates()?);
    let mut gold: BTreeMap<String, GoldRecord> = store.gold()?.into_iter().map(|g| (g.quad_key.clone(), g)).collect();
    let mut jobs = Vec::new();
    for (key, cands) in &grouped {
        if gold.contains_key(key) {
            report.reused += 1;
        } else if let Some(quad) = quads.get(key) {
            jobs.push((quad, cands));
        }
    }
    let fresh = exec::try_map(run.execution, &jobs, |_, (quad, cands)| {
        let traces: Vec<_> = cands.iter().map(|c| c.trace.clone()).collect();
        let verdicts = run.judge.verify(quad, &traces)?;
        if verdicts.len() != quad.principles.len() {
            return Err(PipelineError::LengthMismatch {
                trace: quad.principles.len(),
                gold: verdicts.len(),
            });
        }
        Ok(GoldRecord {
            quad_key: quad.key(),
            verdicts,
        })
    })?;
    for g in fresh {
        gold.insert(g.quad_key.clone(), g);
    }
    report.gold = gold.len();
    store.save(PipelineStore::GOLD, &gold.into_values().collect::<Vec<_>>())
}

fn select_stage(store: &PipelineStore, report: &mut PipelineReport) -> Result<(), PipelineError> {
    let quads: BTreeMap<String, Quadruple> = store.quadruples()?.into_iter().map(|q| (q.key(), q)).collect();
    let gold: BTreeMap<String, GoldRecord> = store.gold()?.into_iter().map(|g| (g.quad_key.clone(), g)).collect();
    let mut records = Vec::new();
    for (key, mut cands) in group_candidates(store.candidates()?) {
        let (Some(quad), Some(g)) = (quads.get(&key), gold.get(&key)) else {
            continue;
        };
        cands.sort_by_key(Candidate::record_key);
        records.push(select_with_gold(&cands, quad, &g.verdicts)?);
    }
    report.sft_records = records.len();
    store.save(PipelineStore::SFT, &records)
}

/// Reads pipeline inputs from a JSONL file.
pub fn read_inputs(path: &Path) -> Result<Vec<PipelineInput>, PipelineError> {
    Ok(jsonl::read_path(path)?)
}
