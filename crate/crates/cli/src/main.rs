mod commands;
mod common;

use clap::{Args, Parser};
use pref_forge::config::{Overrides, Settings};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "pref-forge", version, about = "Preference optimization for reasoning reward models")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: commands::Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (1 = sequential, 0 = one per core).
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true)]
    clip_epsilon: Option<f64>,
    #[arg(long, global = true)]
    group_size: Option<usize>,
    #[arg(long, global = true)]
    kl_beta: Option<f64>,
    #[arg(long, global = true)]
    std_epsilon: Option<f64>,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            clip_epsilon: self.clip_epsilon,
            group_size: self.group_size,
            kl_beta: self.kl_beta,
            std_epsilon: self.std_epsilon,
            parallelism: self.parallelism,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let settings = Settings::resolve(cli.global.config.as_deref(), &cli.global.overrides())?;
    log::debug!("settings hash {}", settings.hash());
    let threads = settings.run.parallelism;
    if threads == 1 {
        return commands::dispatch(cli.command, &settings);
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(|| commands::dispatch(cli.command, &settings))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PREF_FORGE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let causes: Vec<String> = err.chain().skip(1).map(ToString::to_string).collect();
            let report = serde_json::json!({ "error": err.to_string(), "causes": causes });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
