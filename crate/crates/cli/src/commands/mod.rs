mod eval;
mod gcpo;
mod grpo;
mod metrics;
mod pipeline;
mod toy;

use anyhow::Result;
use clap::Subcommand;
use pref_forge::Settings;

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic worlds.
    Toy {
        #[command(subcommand)]
        cmd: toy::ToyCmd,
    },
    /// Cold-start data curation.
    Pipeline {
        #[command(subcommand)]
        cmd: pipeline::PipelineCmd,
    },
    /// Reward-model training on preference pairs.
    Gcpo {
        #[command(subcommand)]
        cmd: gcpo::GcpoCmd,
    },
    /// Generator training against a reward.
    Grpo {
        #[command(subcommand)]
        cmd: grpo::GrpoCmd,
    },
    /// Reward-model evaluation.
    Eval {
        #[command(subcommand)]
        cmd: eval::EvalCmd,
    },
    /// Run metrics.
    Metrics {
        #[command(subcommand)]
        cmd: metrics::MetricsCmd,
    },
}

pub fn dispatch(command: Command, settings: &Settings) -> Result<()> {
    match command {
        Command::Toy { cmd } => toy::run(cmd, settings),
        Command::Pipeline { cmd } => pipeline::run(cmd, settings),
        Command::Gcpo { cmd } => gcpo::run(cmd, settings),
        Command::Grpo { cmd } => grpo::run(cmd, settings),
        Command::Eval { cmd } => eval::run(cmd, settings),
        Command::Metrics { cmd } => metrics::run(cmd),
    }
}
