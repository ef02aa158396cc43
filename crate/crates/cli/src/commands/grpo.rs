use crate::common::{print_json, read_jsonl, write_json, write_run_files};
use anyhow::{bail, Result};
use clap::{Subcommand, ValueEnum};
use pref_forge::eval::{StepMetrics, METRICS_FILE};
use pref_forge::grpo::{grpo_eval_reward, grpo_step, GrpoOptions, GrpoTask, ReasoningModelReward, RewardFn};
use pref_forge::jsonl;
use pref_forge::pipeline::ExternalCmdReward;
use pref_forge::toy::{TargetTokenReward, ToyGenerator, ToyPolicy};
use pref_forge::{seed, PolicyModel, Settings};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::time::Duration;

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    /// Scaled fraction of the target token.
    Toy,
    /// A frozen toy reasoning reward model that favours the target token.
    RrmStub,
    /// An external command that prints a `<score>` tag.
    ExternalCmd,
}

#[derive(Subcommand, Debug)]
pub enum GrpoCmd {
    /// Train the toy generator against a reward.
    Train {
        /// GRPO tasks (JSONL of context + principles).
        #[arg(long)]
        contexts: PathBuf,
        #[arg(long, value_enum, default_value = "toy")]
        reward: RewardKind,
        /// Command for `--reward external-cmd`.
        #[arg(long)]
        reward_cmd: Option<String>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cmd: GrpoCmd, settings: &Settings) -> Result<()> {
    match cmd {
        GrpoCmd::Train {
            contexts,
            reward,
            reward_cmd,
            out,
        } => train(&contexts, reward, reward_cmd, &out, settings),
    }
}

fn reward_fn(kind: RewardKind, cmd: Option<String>, settings: &Settings) -> Result<Box<dyn RewardFn>> {
    let g = &settings.grpo;
    Ok(match kind {
        RewardKind::Toy => Box::new(TargetTokenReward {
            target: g.target_token,
            scale: g.reward_scale,
        }),
        RewardKind::RrmStub => Box::new(ReasoningModelReward::new(
            ToyPolicy::target_token_judge(g.vocab, g.target_token, g.judge_sharpness, 1.0),
            seed::derive(settings.optimizer.seed, &[0x7e3d]),
        )),
        RewardKind::ExternalCmd => {
            let Some(command) = cmd else {
                bail!("--reward external-cmd needs --reward-cmd");
            };
            Box::new(ExternalCmdReward {
                command,
                timeout: Duration::from_secs(g.reward_timeout_secs),
            })
        }
    })
}

fn train(contexts: &Path, kind: RewardKind, cmd: Option<String>, out: &Path, settings: &Settings) -> Result<()> {
    write_run_files(out, "grpo train", settings, &[contexts])?;
    let tasks: Vec<GrpoTask> = read_jsonl(contexts)?;
    if tasks.is_empty() {
        bail!("{} has no contexts", contexts.display());
    }
    let g = &settings.grpo;
    if (g.target_token as usize) >= g.vocab {
        bail!("grpo.target_token {} is outside vocab {}", g.target_token, g.vocab);
    }
    let reward = reward_fn(kind, cmd, settings)?;
    let cfg = &settings.optimizer;
    let mut policy = ToyGenerator::new(g.vocab, g.sample_length, g.temperature);
    let reference = policy.params().to_vec();
    let opts = GrpoOptions {
        floor_score: g.floor_score,
        std_mode: g.std_mode,
        kl_estimator: g.kl_estimator,
        inner_epochs: settings.train.inner_epochs,
        execution: settings.execution(),
    };
    let eval_seed = seed::derive(cfg.seed, &[0xe7a1]);
    let eval = |p: &ToyGenerator| {
        grpo_eval_reward(p, reward.as_ref(), &tasks, g.eval_samples, eval_seed, g.floor_score, opts.execution)
    };

    let metrics_path = out.join(METRICS_FILE);
    jsonl::write_path(&metrics_path, &Vec::<StepMetrics>::new())?;
    let initial = eval(&policy)?;
    jsonl::append_path(
        &metrics_path,
        &[StepMetrics {
            step: 0,
            eval_reward: Some(initial),
            ..StepMetrics::default()
        }],
    )?;

    let batch = settings.train.batch_size.clamp(1, tasks.len());
    let mut final_reward = initial;
    let mut failures = 0;
    for step in 1..=settings.train.steps {
        let start = ((step - 1) as usize * batch) % tasks.len();
        let chunk: Vec<GrpoTask> = tasks.iter().cycle().skip(start).take(batch).cloned().collect();
        let report = grpo_step(&mut policy, &reference, reward.as_ref(), &chunk, cfg, &opts, step)?;
        failures += report.reward_failures;
        let due = settings.train.eval_every > 0 && step % settings.train.eval_every == 0;
        let eval_reward = if due || step == settings.train.steps {
            let r = eval(&policy)?;
            final_reward = r;
            Some(r)
        } else {
            None
        };
        jsonl::append_path(
            &metrics_path,
            &[StepMetrics {
                step,
                objective: Some(report.objective),
                weighted_advantage: Some(report.weighted_advantage),
                train_reward: Some(report.train_reward),
                eval_reward,
                kl: Some(report.kl),
                ..StepMetrics::default()
            }],
        )?;
        log::info!("step {step} reward {:.3} kl {:.4}", report.train_reward, report.kl);
    }

    write_json(&out.join("params.json"), &policy)?;
    print_json(&json!({
        "steps": settings.train.steps,
        "contexts": tasks.len(),
        "initial_eval_reward": initial,
        "final_eval_reward": final_reward,
        "target_frequency": policy.target_frequency(policy.params(), g.target_token),
        "reward_failures": failures,
        "out": out.display().to_string(),
    }))
}
