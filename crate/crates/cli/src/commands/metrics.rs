use crate::common::print_json;
use anyhow::{Context, Result};
use clap::Subcommand;
use pref_forge::eval::{metrics_series, write_series_csv};
use std::fs::File;
use std::path::PathBuf;

#[derive(Subcommand, Debug)]
pub enum MetricsCmd {
    /// Aligned per-step series of a run (reward, advantage, accuracy).
    Series {
        /// Run directory containing `metrics.jsonl`.
        #[arg(long)]
        run: PathBuf,
        /// Write CSV here instead of printing JSON.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

pub fn run(cmd: MetricsCmd) -> Result<()> {
    let MetricsCmd::Series { run, csv } = cmd;
    let rows = metrics_series(&run)?;
    match csv {
        Some(path) => {
            let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_series_csv(&rows, file)?;
            Ok(())
        }
        None => print_json(&rows),
    }
}
