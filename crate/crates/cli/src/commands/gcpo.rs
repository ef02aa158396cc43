use crate::common::{load_features, print_json, read_jsonl, write_json, write_run_files};
use anyhow::{bail, Context, Result};
use clap::Subcommand;
use pref_forge::eval::{pairwise_accuracy, StepMetrics, METRICS_FILE};
use pref_forge::gcpo::{gcpo_step, GcpoOptions};
use pref_forge::jsonl;
use pref_forge::pipeline::SftRecord;
use pref_forge::toy::ToyPolicy;
use pref_forge::{seed, PreferencePair, Settings};
use rand::seq::SliceRandom;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Subcommand, Debug)]
pub enum GcpoCmd {
    /// Train the toy reasoning reward model on preference pairs.
    Train {
        /// Training pairs (JSONL).
        #[arg(long)]
        pairs: PathBuf,
        /// World samples with features.
        #[arg(long)]
        samples: PathBuf,
        /// Held-out pairs for periodic accuracy.
        #[arg(long)]
        heldout: Option<PathBuf>,
        /// SFT records from the pipeline for a supervised warm start.
        #[arg(long)]
        init_sft: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cmd: GcpoCmd, settings: &Settings) -> Result<()> {
    match cmd {
        GcpoCmd::Train {
            pairs,
            samples,
            heldout,
            init_sft,
            out,
        } => train(&pairs, &samples, heldout.as_deref(), init_sft.as_deref(), &out, settings),
    }
}

fn heldout_accuracy(policy: &ToyPolicy, pairs: &[PreferencePair], settings: &Settings) -> Result<f64> {
    let report = pairwise_accuracy(
        pairs,
        |q| policy.expected_score(q).unwrap_or(f64::NEG_INFINITY),
        settings.eval.ties,
        settings.execution(),
    )?;
    Ok(report.accuracy)
}

fn train(
    pairs_path: &Path,
    samples_path: &Path,
    heldout_path: Option<&Path>,
    sft_path: Option<&Path>,
    out: &Path,
    settings: &Settings,
) -> Result<()> {
    let mut inputs = vec![pairs_path, samples_path];
    inputs.extend(heldout_path);
    inputs.extend(sft_path);
    write_run_files(out, "gcpo train", settings, &inputs)?;

    let pairs: Vec<PreferencePair> = read_jsonl(pairs_path)?;
    let labeled: Vec<PreferencePair> = pairs.into_iter().filter(|p| !p.is_same()).collect();
    if labeled.is_empty() {
        bail!("{} has no labeled pairs", pairs_path.display());
    }
    let heldout: Vec<PreferencePair> = heldout_path.map(read_jsonl).transpose()?.unwrap_or_default();
    let features = Arc::new(load_features(samples_path)?);
    let cfg = &settings.optimizer;
    let mut policy =
        ToyPolicy::with_random_init(features, settings.gcpo.temperature, settings.gcpo.init_scale, cfg.seed);

    let mut sft_fit = None;
    if let Some(path) = sft_path {
        let records: Vec<SftRecord> = read_jsonl(path)?;
        let examples: Vec<_> = records
            .into_iter()
            .map(|r| (r.quadruple, r.trace.final_score))
            .collect();
        let ll = policy
            .fit_scores(&examples, settings.gcpo.sft_epochs, settings.gcpo.sft_learning_rate)
            .context("supervised warm start")?;
        log::info!("warm start on {} records, mean log-likelihood {ll:.4}", examples.len());
        sft_fit = Some(json!({ "records": examples.len(), "log_likelihood": ll }));
    }

    let opts = GcpoOptions {
        tie_tolerance: settings.gcpo.tie_tolerance,
        floor_score: settings.gcpo.floor_score,
        inner_epochs: settings.train.inner_epochs,
        execution: settings.execution(),
    };
    let metrics_path = out.join(METRICS_FILE);
    jsonl::write_path(&metrics_path, &Vec::<StepMetrics>::new())?;
    let has_eval = !heldout.is_empty();
    let initial = if has_eval { Some(heldout_accuracy(&policy, &heldout, settings)?) } else { None };
    jsonl::append_path(
        &metrics_path,
        &[StepMetrics {
            step: 0,
            eval_accuracy: initial,
            ..StepMetrics::default()
        }],
    )?;

    let batch_size = settings.train.batch_size.clamp(1, labeled.len());
    let per_epoch = labeled.len().div_ceil(batch_size);
    let mut order: Vec<usize> = Vec::new();
    let mut last = None;
    for step in 1..=settings.train.steps {
        let slot = ((step - 1) as usize) % per_epoch;
        if slot == 0 {
            let epoch = ((step - 1) as usize / per_epoch) as u64;
            order = (0..labeled.len()).collect();
            order.shuffle(&mut seed::rng_at(cfg.seed, &[0x5eed, epoch]));
        }
        let batch: Vec<PreferencePair> = order[slot * batch_size..((slot + 1) * batch_size).min(order.len())]
            .iter()
            .map(|&i| labeled[i].clone())
            .collect();
        let report = gcpo_step(&mut policy, &batch, cfg, &opts, step)?;
        let due = settings.train.eval_every > 0 && step % settings.train.eval_every == 0;
        let eval_accuracy = if has_eval && (due || step == settings.train.steps) {
            Some(heldout_accuracy(&policy, &heldout, settings)?)
        } else {
            None
        };
        jsonl::append_path(
            &metrics_path,
            &[StepMetrics {
                step,
                objective: Some(report.objective),
                mean_win_ratio: Some(report.mean_win_ratio),
                weighted_advantage: Some(report.weighted_advantage),
                eval_accuracy,
                ..StepMetrics::default()
            }],
        )?;
        log::info!("step {step} objective {:.4} win ratio {:.3}", report.objective, report.mean_win_ratio);
        last = Some((report, eval_accuracy));
    }

    write_json(&out.join("params.json"), &policy.state())?;
    let (report, final_accuracy) = last.map_or((None, None), |(r, a)| (Some(r), a));
    print_json(&json!({
        "steps": settings.train.steps,
        "train_pairs": labeled.len(),
        "initial_accuracy": initial,
        "final_accuracy": final_accuracy.or(initial),
        "last_step": report,
        "warm_start": sft_fit,
        "out": out.display().to_string(),
    }))
}
