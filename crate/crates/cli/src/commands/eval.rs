use crate::common::{load_features, print_json, read_jsonl, read_samples};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Subcommand, ValueEnum};
use pref_forge::eval::{best_of_n_score, pairwise_accuracy, TiePolicy};
use pref_forge::exec;
use pref_forge::pipeline::{AdapterKind, AdapterSpec, CommandScorer, SamplingParams, ScorerClient};
use pref_forge::policy::ReasoningPolicy;
use pref_forge::toy::{quality_map, ToyPolicy, ToyPolicyState};
use pref_forge::trace::score_or_floor;
use pref_forge::{seed, PolicyModel, PreferencePair, Quadruple, Settings};
use serde::Serialize;
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadoutMode {
    /// Expectation of the score distribution (toy models only).
    Expected,
    /// Sample `best_of` traces and aggregate their scores.
    Sampled,
}

#[derive(Subcommand, Debug)]
pub enum EvalCmd {
    /// Pairwise accuracy of a scorer on preference pairs.
    Accuracy {
        #[arg(long)]
        pairs: PathBuf,
        /// `oracle`, `toy-rrm:PARAMS.json` or `cmd:COMMAND`.
        #[arg(long)]
        scorer: String,
        /// World samples (quality for the oracle, features for toy-rrm).
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Draws per quadruple in sampled mode; defaults to `eval.best_of`.
        #[arg(long)]
        best_of: Option<usize>,
        #[arg(long, value_enum, default_value = "expected")]
        mode: ReadoutMode,
        /// Per-pair CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Count model ties as half a point.
        #[arg(long)]
        half_credit: bool,
    },
}

enum Scorer {
    Oracle(BTreeMap<String, f64>),
    Toy(ToyPolicy),
    Cmd(CommandScorer),
}

fn key_hash(key: &str) -> u64 {
    u64::from_str_radix(&pref_forge::config::sha256_hex(key.as_bytes())[..16], 16).unwrap_or(0)
}

fn build_scorer(spec: &str, samples: Option<&Path>) -> Result<Scorer> {
    let need_samples = || samples.ok_or_else(|| anyhow!("scorer `{spec}` needs --samples"));
    if spec == "oracle" {
        return Ok(Scorer::Oracle(quality_map(&read_samples(need_samples()?)?)));
    }
    if let Some(path) = spec.strip_prefix("toy-rrm:") {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        let state: ToyPolicyState = serde_json::from_str(&text).with_context(|| format!("parsing {path}"))?;
        let features = Arc::new(load_features(need_samples()?)?);
        return Ok(Scorer::Toy(ToyPolicy::from_state(features, state)?));
    }
    let adapter: AdapterSpec = spec.parse()?;
    match adapter.kind {
        AdapterKind::Cmd => Ok(Scorer::Cmd(CommandScorer { spec: adapter })),
        AdapterKind::Stub => bail!("unknown scorer `{spec}` (oracle, toy-rrm:PATH or cmd:COMMAND)"),
    }
}

struct Readout<'a> {
    scorer: &'a Scorer,
    mode: ReadoutMode,
    best_of: usize,
    settings: &'a Settings,
}

impl Readout<'_> {
    fn score(&self, quad: &Quadruple) -> Result<f64> {
        let s = self.settings;
        let quad_seed = seed::derive(s.optimizer.seed, &[key_hash(&quad.key())]);
        let floor = s.gcpo.floor_score;
        match (self.scorer, self.mode) {
            (Scorer::Oracle(q), _) => q
                .get(&quad.edited_sample.id)
                .copied()
                .ok_or_else(|| anyhow!("no quality for sample `{}`", quad.edited_sample.id)),
            (Scorer::Toy(p), ReadoutMode::Expected) => Ok(p.expected_score(quad)?),
            (Scorer::Toy(p), ReadoutMode::Sampled) => Ok(best_of_n_score(
                quad,
                |q, rng| match p.sample(p.params(), q, rng) {
                    Ok(tokens) => score_or_floor(&p.render(q, &tokens), floor).0,
                    Err(_) => floor,
                },
                self.best_of,
                s.eval.aggregate,
                quad_seed,
            )?),
            (Scorer::Cmd(c), _) => {
                let variant = s.pipeline.variants.first().cloned().unwrap_or_else(|| SamplingParams::defaults()[0].clone());
                let n = if self.mode == ReadoutMode::Sampled { self.best_of } else { 1 };
                let mut values = Vec::with_capacity(n);
                for _ in 0..n {
                    let raw = c.score(quad, &variant)?;
                    let (value, err) = score_or_floor(&raw, floor);
                    if let Some(e) = err {
                        log::warn!("scorer output for {} unreadable ({e}); using floor", quad.key());
                    }
                    values.push(value);
                }
                Ok(pref_forge::eval::aggregate(&mut values, s.eval.aggregate))
            }
        }
    }
}

#[derive(Serialize)]
struct PairRow {
    index: usize,
    winner: String,
    loser: String,
    label: String,
    winner_score: f64,
    loser_score: f64,
    credit: Option<f64>,
}

pub fn run(cmd: EvalCmd, settings: &Settings) -> Result<()> {
    let EvalCmd::Accuracy {
        pairs,
        scorer,
        samples,
        best_of,
        mode,
        csv,
        half_credit,
    } = cmd;
    let pairs: Vec<PreferencePair> = read_jsonl(&pairs)?;
    let built = build_scorer(&scorer, samples.as_deref())?;
    let best_of = best_of.unwrap_or(settings.eval.best_of);
    if best_of == 0 {
        bail!("--best-of must be at least 1");
    }
    let ties = if half_credit { TiePolicy::HalfCredit } else { settings.eval.ties };
    let readout = Readout {
        scorer: &built,
        mode,
        best_of,
        settings,
    };

    let mut quads: BTreeMap<String, &Quadruple> = BTreeMap::new();
    for p in &pairs {
        quads.insert(p.winner.key(), &p.winner);
        quads.insert(p.loser.key(), &p.loser);
    }
    let quads: Vec<(String, &Quadruple)> = quads.into_iter().collect();
    let execution = match built {
        Scorer::Cmd(_) => pref_forge::Execution::Sequential,
        _ => settings.execution(),
    };
    let scores: BTreeMap<String, f64> = exec::try_map(execution, &quads, |_, (k, q)| {
        readout.score(q).map(|s| (k.clone(), s))
    })?
    .into_iter()
    .collect();

    let report = pairwise_accuracy(&pairs, |q| scores[&q.key()], ties, settings.execution())?;

    if let Some(path) = &csv {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        for (index, p) in pairs.iter().enumerate() {
            let (ws, ls) = (scores[&p.winner.key()], scores[&p.loser.key()]);
            let credit = (!p.is_same()).then(|| {
                if ws > ls {
                    1.0
                } else if ws == ls && ties == TiePolicy::HalfCredit {
                    0.5
                } else {
                    0.0
                }
            });
            w.serialize(PairRow {
                index,
                winner: p.winner.edited_sample.id.clone(),
                loser: p.loser.edited_sample.id.clone(),
                label: serde_json::to_value(p.label)?.as_str().unwrap_or_default().to_string(),
                winner_score: ws,
                loser_score: ls,
                credit,
            })?;
        }
        w.flush()?;
    }

    print_json(&json!({
        "scorer": scorer,
        "mode": format!("{mode:?}").to_lowercase(),
        "best_of": best_of,
        "ties": ties,
        "accuracy": report.accuracy,
        "correct": report.correct,
        "evaluated": report.evaluated,
        "excluded": report.excluded,
    }))
}
