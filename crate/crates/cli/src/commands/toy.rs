use crate::common::{print_json, sibling, write_jsonl};
use anyhow::Result;
use clap::Subcommand;
use pref_forge::toy::{SyntheticWorld, WorldSpec};
use pref_forge::Settings;
use serde_json::json;
use std::path::PathBuf;

#[derive(Subcommand, Debug)]
pub enum ToyCmd {
    /// Generate a synthetic preference world.
    ///
    /// Train pairs go to OUT; held-out pairs, samples, GRPO contexts and
    /// pipeline inputs go to sibling files `OUT.heldout.jsonl`,
    /// `OUT.samples.jsonl`, `OUT.contexts.jsonl` and `OUT.inputs.jsonl`.
    GenWorld {
        #[arg(long, default_value_t = 400)]
        samples: usize,
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        #[arg(long, default_value_t = 8)]
        contexts: usize,
        #[arg(long, default_value_t = 4)]
        feature_dim: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0.5)]
        same_margin: f64,
        #[arg(long, default_value_t = 0.2)]
        heldout_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cmd: ToyCmd, settings: &Settings) -> Result<()> {
    match cmd {
        ToyCmd::GenWorld {
            samples,
            pairs,
            contexts,
            feature_dim,
            noise_sigma,
            same_margin,
            heldout_fraction,
            out,
        } => {
            let spec = WorldSpec {
                samples,
                pairs,
                contexts,
                feature_dim,
                noise_sigma,
                same_margin,
                heldout_fraction,
                seed: settings.optimizer.seed,
            };
            let world = SyntheticWorld::generate(&spec)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let files = [
                ("train", out.clone()),
                ("heldout", sibling(&out, "heldout")),
                ("samples", sibling(&out, "samples")),
                ("contexts", sibling(&out, "contexts")),
                ("inputs", sibling(&out, "inputs")),
            ];
            write_jsonl(&files[0].1, &world.train)?;
            write_jsonl(&files[1].1, &world.heldout)?;
            write_jsonl(&files[2].1, &world.samples)?;
            write_jsonl(&files[3].1, &world.grpo_tasks())?;
            write_jsonl(&files[4].1, &world.pipeline_inputs())?;
            let same = world.train.iter().chain(&world.heldout).filter(|p| p.is_same()).count();
            let paths: serde_json::Map<String, serde_json::Value> = files
                .iter()
                .map(|(k, p)| (k.to_string(), json!(p.display().to_string())))
                .collect();
            print_json(&json!({
                "train_pairs": world.train.len(),
                "heldout_pairs": world.heldout.len(),
                "same_pairs": same,
                "samples": world.samples.len(),
                "contexts": world.contexts.len(),
                "files": paths,
            }))
        }
    }
}
