use crate::common::{print_json, read_jsonl, read_samples, write_jsonl};
use anyhow::{bail, Context, Result};
use clap::Subcommand;
use pref_forge::pipeline::{
    curate_split, read_inputs, run_pipeline, AdapterKind, AdapterSpec, CommandFilter, CommandJudge, CommandScorer,
    ComplexityFilter, JudgeClient, PipelineInput, PipelineRun, PipelineStep, PipelineStore, ScorerClient, SplitMode,
    StubJudge, StubScorer, TwoVerbFilter,
};
use pref_forge::toy::quality_map;
use pref_forge::{EditContext, Settings};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Subcommand, Debug)]
pub enum PipelineCmd {
    /// Run one stage (or all) of the curation pipeline into a store directory.
    Run {
        #[arg(long, default_value = "all")]
        step: PipelineStep,
        /// Pipeline inputs (JSONL of context + edited samples).
        #[arg(long = "in")]
        input: PathBuf,
        /// Store directory.
        #[arg(long)]
        out: PathBuf,
        /// Judge adapter, `[name=]kind[:target][@timeout_secs]`.
        #[arg(long, default_value = "stub")]
        judge: String,
        /// Comma-separated scorer adapters.
        #[arg(long, default_value = "stub:a,stub:b")]
        scorers: String,
        /// World samples; lets stub clients follow latent quality.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Keep a random or hard subset of pipeline inputs.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: SplitMode,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        /// Complexity filter adapter for hard mode (`stub` or `cmd:...`).
        #[arg(long)]
        filter: Option<String>,
    },
}

fn parse_mode(s: &str) -> Result<SplitMode, String> {
    match s {
        "random" => Ok(SplitMode::Random),
        "hard" => Ok(SplitMode::Hard),
        other => Err(format!("unknown mode `{other}` (random or hard)")),
    }
}

fn quality(samples: Option<&Path>) -> Result<Option<Arc<BTreeMap<String, f64>>>> {
    samples.map(|p| Ok(Arc::new(quality_map(&read_samples(p)?)))).transpose()
}

fn judge_from(spec: &str, q: Option<Arc<BTreeMap<String, f64>>>) -> Result<Box<dyn JudgeClient>> {
    let spec: AdapterSpec = spec.parse()?;
    Ok(match spec.kind {
        AdapterKind::Stub => Box::new(StubJudge { quality: q, seed: 0 }),
        AdapterKind::Cmd => Box::new(CommandJudge { spec }),
    })
}

fn scorers_from(list: &str, q: Option<Arc<BTreeMap<String, f64>>>) -> Result<Vec<Box<dyn ScorerClient>>> {
    let mut out: Vec<Box<dyn ScorerClient>> = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let spec: AdapterSpec = item.parse()?;
        out.push(match spec.kind {
            AdapterKind::Stub => {
                let mut s = StubScorer::new(spec.name.clone());
                s.quality = q.clone();
                Box::new(s)
            }
            AdapterKind::Cmd => Box::new(CommandScorer { spec }),
        });
    }
    if out.is_empty() {
        bail!("no scorers given");
    }
    let mut ids: Vec<&str> = out.iter().map(|s| s.id()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        bail!("scorer names must be unique; name them with `name=kind:...`");
    }
    Ok(out)
}

pub fn run(cmd: PipelineCmd, settings: &Settings) -> Result<()> {
    match cmd {
        PipelineCmd::Run {
            step,
            input,
            out,
            judge,
            scorers,
            samples,
        } => {
            let inputs = read_inputs(&input).with_context(|| format!("reading {}", input.display()))?;
            let q = quality(samples.as_deref())?;
            let judge = judge_from(&judge, q.clone())?;
            let scorers = scorers_from(&scorers, q)?;
            let pool: Vec<&dyn ScorerClient> = scorers.iter().map(|s| s.as_ref()).collect();
            let store = PipelineStore::open(&out)?;
            let report = run_pipeline(
                &store,
                step,
                &PipelineRun {
                    inputs: &inputs,
                    judge: judge.as_ref(),
                    scorers: &pool,
                    variants: &settings.pipeline.variants,
                    execution: settings.execution(),
                },
            )?;
            print_json(&report)
        }
        PipelineCmd::Split {
            input,
            out,
            mode,
            ratio,
            filter,
        } => {
            let inputs: Vec<PipelineInput> = read_jsonl(&input)?;
            let contexts: Vec<EditContext> = inputs.iter().map(|i| i.context.clone()).collect();
            let filter: Option<Box<dyn ComplexityFilter>> = match filter {
                None => None,
                Some(s) => {
                    let spec: AdapterSpec = s.parse()?;
                    Some(match spec.kind {
                        AdapterKind::Stub => Box::new(TwoVerbFilter),
                        AdapterKind::Cmd => Box::new(CommandFilter { spec }),
                    })
                }
            };
            let kept = curate_split(&contexts, mode, ratio, settings.optimizer.seed, filter.as_deref())?;
            let kept_ids: Vec<String> = kept.iter().map(EditContext::id).collect();
            let selected: Vec<PipelineInput> =
                inputs.into_iter().filter(|i| kept_ids.contains(&i.context.id())).collect();
            write_jsonl(&out, &selected)?;
            print_json(&json!({ "kept": selected.len(), "total": contexts.len() }))
        }
    }
}
