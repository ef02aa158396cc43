//! Group Relative Policy Optimization for a downstream generation policy.
//!
//! For each context the policy generates G samples; a reward function (the
//! reasoning reward model or a stand-in) scores them; scores are normalized
//! within the group,
//!
//! ```text
//! A_i = (τ_i − mean(τ)) / (std(τ) + ε_std)
//! ```
//!
//! and the policy maximizes the mean clipped surrogate minus `β · KL(π_θ ‖ π_ref)`.
//! The reward function returns plain reals; no gradient ever flows through it.

use crate::eval::weighted_advantage;
use crate::exec::{self, Execution};
use crate::model::{EditContext, ModelError, OptimizerConfig, PrincipleSet, Quadruple, SampleRef};
use crate::policy::{ascend, GenerationPolicy, PolicyError, PolicyModel, ReasoningPolicy};
use crate::seed;
use crate::surrogate::{clipped_term, mean};
use crate::trace::{extract_score, RawTraceText, TraceError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("non-finite score {value} at index {index}")]
    NonFiniteScore { index: usize, value: f64 },
    #[error("empty group")]
    EmptyGroup,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no contexts to roll out")]
    NoContexts,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("reward backend failed: {0}")]
    Backend(String),
}

/// Which standard deviation normalizes the group.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    /// Divide by G.
    #[default]
    Population,
    /// Divide by G − 1.
    Sample,
}

/// Per-token estimator of `KL(π_θ ‖ π_ref)` from sampled tokens.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum KlEstimator {
    /// `log π_θ − log π_ref`.
    #[default]
    K1,
    /// `exp(log π_ref − log π_θ) − (log π_ref − log π_θ) − 1`; pointwise
    /// nonnegative with zero gradient at `π_θ = π_ref`.
    K3,
}

impl KlEstimator {
    /// Estimate and its derivative with respect to `log π_θ`.
    pub fn term(self, logp: f64, logp_ref: f64) -> (f64, f64) {
        match self {
            KlEstimator::K1 => (logp - logp_ref, 1.0),
            KlEstimator::K3 => {
                let d = logp_ref - logp;
                let e = d.exp();
                (e - d - 1.0, 1.0 - e)
            }
        }
    }
}

/// Group-normalized advantages with the population standard deviation.
pub fn grpo_advantages(scores: &[f64], std_epsilon: f64) -> Result<Vec<f64>, GrpoError> {
    grpo_advantages_with(scores, std_epsilon, StdMode::Population)
}

pub fn grpo_advantages_with(scores: &[f64], std_epsilon: f64, mode: StdMode) -> Result<Vec<f64>, GrpoError> {
    if scores.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(GrpoError::NonFiniteScore {
            index: i,
            value: scores[i],
        });
    }
    let g = scores.len() as f64;
    let m = mean(scores);
    let ss: f64 = scores.iter().map(|s| (s - m) * (s - m)).sum();
    let denom = match mode {
        StdMode::Population => g,
        StdMode::Sample if scores.len() > 1 => g - 1.0,
        StdMode::Sample => 1.0,
    };
    let std = (ss / denom).sqrt();
    Ok(scores.iter().map(|s| (s - m) / (std + std_epsilon)).collect())
}

/// One generated sample's token trajectory with log-probabilities under the
/// current, old and reference parameters.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<u32>,
    pub logprobs_current: Vec<f64>,
    pub logprobs_old: Vec<f64>,
    pub logprobs_ref: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn check(&self, i: usize) -> Result<(), GrpoError> {
        let n = self.tokens.len();
        if n == 0 || self.logprobs_current.len() != n || self.logprobs_old.len() != n || self.logprobs_ref.len() != n {
            return Err(GrpoError::ShapeMismatch(format!(
                "trajectory {i}: {n} tokens with {}/{}/{} current/old/ref log-probabilities",
                self.logprobs_current.len(),
                self.logprobs_old.len(),
                self.logprobs_ref.len()
            )));
        }
        Ok(())
    }
}

/// A group of G samples for one context.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct GenerationRollout {
    pub context: EditContext,
    pub outputs: Vec<SampleRef>,
    pub trajectories: Vec<Trajectory>,
}

impl GenerationRollout {
    pub fn group_size(&self) -> usize {
        self.outputs.len()
    }

    /// Recomputes `logprobs_current` under `params`.
    pub fn rescore<P: PolicyModel<EditContext> + ?Sized>(&mut self, policy: &P, params: &[f64]) -> Result<(), GrpoError> {
        for t in &mut self.trajectories {
            t.logprobs_current = policy.log_probs(params, &self.context, &t.tokens)?;
        }
        Ok(())
    }

    fn check(&self, advantages: &[f64]) -> Result<(), GrpoError> {
        let g = self.outputs.len();
        if g == 0 {
            return Err(GrpoError::EmptyGroup);
        }
        if self.trajectories.len() != g || advantages.len() != g {
            return Err(GrpoError::ShapeMismatch(format!(
                "{g} outputs, {} trajectories, {} advantages",
                self.trajectories.len(),
                advantages.len()
            )));
        }
        self.trajectories.iter().enumerate().try_for_each(|(i, t)| t.check(i))
    }
}

/// Mean clipped surrogate minus `β` times the mean per-token KL estimate,
/// using the default estimator.
pub fn grpo_objective(
    rollout: &GenerationRollout,
    advantages: &[f64],
    cfg: &OptimizerConfig,
) -> Result<f64, GrpoError> {
    grpo_objective_with(rollout, advantages, cfg, KlEstimator::default())
}

pub fn grpo_objective_with(
    rollout: &GenerationRollout,
    advantages: &[f64],
    cfg: &OptimizerConfig,
    estimator: KlEstimator,
) -> Result<f64, GrpoError> {
    rollout.check(advantages)?;
    let total: f64 = rollout
        .trajectories
        .iter()
        .zip(advantages)
        .map(|(t, &a)| {
            let sum: f64 = (0..t.len())
                .map(|s| {
                    let r = (t.logprobs_current[s] - t.logprobs_old[s]).exp();
                    let (kl, _) = estimator.term(t.logprobs_current[s], t.logprobs_ref[s]);
                    clipped_term(r, a, cfg.clip_epsilon).0 - cfg.kl_beta * kl
                })
                .sum();
            sum / t.len() as f64
        })
        .sum();
    Ok(total / rollout.group_size() as f64)
}

/// Mean per-token KL estimate over the rollout (current vs reference).
pub fn mean_kl(rollout: &GenerationRollout, estimator: KlEstimator) -> f64 {
    let per_traj: Vec<f64> = rollout
        .trajectories
        .iter()
        .map(|t| {
            let s: f64 = t
                .logprobs_current
                .iter()
                .zip(&t.logprobs_ref)
                .map(|(c, r)| estimator.term(*c, *r).0)
                .sum();
            s / t.len().max(1) as f64
        })
        .collect();
    mean(&per_traj)
}

/// Objective value at `params` and its analytic gradient.
pub fn grpo_objective_grad<P: PolicyModel<EditContext> + ?Sized>(
    policy: &P,
    params: &[f64],
    rollout: &GenerationRollout,
    advantages: &[f64],
    cfg: &OptimizerConfig,
    estimator: KlEstimator,
) -> Result<(f64, Vec<f64>), GrpoError> {
    rollout.check(advantages)?;
    let scale = 1.0 / rollout.group_size() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut value = 0.0;
    for (t, &a) in rollout.trajectories.iter().zip(advantages) {
        let current = policy.log_probs(params, &rollout.context, &t.tokens)?;
        let inv_len = 1.0 / t.len() as f64;
        let mut weights = Vec::with_capacity(t.len());
        for ((&cur, &old), &reference) in current.iter().zip(&t.logprobs_old).zip(&t.logprobs_ref) {
            let r = (cur - old).exp();
            let (v, dv_dr) = clipped_term(r, a, cfg.clip_epsilon);
            let (kl, dkl) = estimator.term(cur, reference);
            value += scale * inv_len * (v - cfg.kl_beta * kl);
            weights.push(scale * inv_len * (dv_dr * r - cfg.kl_beta * dkl));
        }
        policy.accumulate_log_prob_grad(params, &rollout.context, &t.tokens, &weights, &mut grad)?;
    }
    Ok((value, grad))
}

/// Scores one generated sample. Implementations must be total in the sense
/// that failures are reported, never panicked; the engine maps them to the
/// floor reward.
pub trait RewardFn: Send + Sync {
    fn reward(&self, sample: &SampleRef, ctx: &EditContext, principles: &PrincipleSet) -> Result<f64, RewardError>;
}

impl<F> RewardFn for F
where
    F: Fn(&SampleRef, &EditContext, &PrincipleSet) -> Result<f64, RewardError> + Send + Sync,
{
    fn reward(&self, sample: &SampleRef, ctx: &EditContext, principles: &PrincipleSet) -> Result<f64, RewardError> {
        self(sample, ctx, principles)
    }
}

/// Reward = score operator applied to one sampled trace of a frozen
/// reasoning reward model.
pub struct ReasoningModelReward<P> {
    pub model: P,
    pub seed: u64,
}

impl<P: ReasoningPolicy> ReasoningModelReward<P> {
    pub fn new(model: P, seed: u64) -> Self {
        Self { model, seed }
    }

    pub fn raw_output(&self, quad: &Quadruple) -> Result<RawTraceText, RewardError> {
        let mut rng = seed::rng_at(self.seed, &[hash_str(&quad.key())]);
        let tokens = self
            .model
            .sample(self.model.params(), quad, &mut rng)
            .map_err(|e| RewardError::Backend(e.to_string()))?;
        Ok(self.model.render(quad, &tokens))
    }
}

fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl<P: ReasoningPolicy> RewardFn for ReasoningModelReward<P> {
    fn reward(&self, sample: &SampleRef, ctx: &EditContext, principles: &PrincipleSet) -> Result<f64, RewardError> {
        let quad = Quadruple::new(sample.clone(), ctx.clone(), principles.clone())
            .map_err(|e| RewardError::Backend(e.to_string()))?;
        Ok(extract_score(&self.raw_output(&quad)?)?.value)
    }
}

/// A context together with the principles its samples are judged against.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct GrpoTask {
    pub context: EditContext,
    pub principles: PrincipleSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrpoOptions {
    pub floor_score: f64,
    pub std_mode: StdMode,
    pub kl_estimator: KlEstimator,
    pub inner_epochs: usize,
    pub execution: Execution,
}

impl Default for GrpoOptions {
    fn default() -> Self {
        Self {
            floor_score: 0.0,
            std_mode: StdMode::Population,
            kl_estimator: KlEstimator::K1,
            inner_epochs: 1,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct GrpoStepReport {
    pub step: u64,
    /// Objective after the update, averaged over contexts.
    pub objective: f64,
    /// Mean reward of this step's rollouts.
    pub train_reward: f64,
    pub kl: f64,
    pub weighted_advantage: f64,
    pub reward_failures: usize,
}

/// Samples a group for `task` and scores it.
#[allow(clippy::too_many_arguments)]
pub fn grpo_rollout<P: GenerationPolicy + ?Sized>(
    policy: &P,
    params: &[f64],
    reference: &[f64],
    reward_fn: &dyn RewardFn,
    task: &GrpoTask,
    group_size: usize,
    seed: u64,
    floor_score: f64,
) -> Result<(GenerationRollout, Vec<f64>, usize), GrpoError> {
    let mut outputs = Vec::with_capacity(group_size);
    let mut trajectories = Vec::with_capacity(group_size);
    let mut scores = Vec::with_capacity(group_size);
    let mut failures = 0;
    for i in 0..group_size {
        let mut rng = seed::rng_at(seed, &[i as u64]);
        let tokens = policy.sample(params, &task.context, &mut rng)?;
        let logprobs = policy.log_probs(params, &task.context, &tokens)?;
        let logprobs_ref = policy.log_probs(reference, &task.context, &tokens)?;
        let sample = policy.realize(&task.context, &tokens);
        let score = match reward_fn.reward(&sample, &task.context, &task.principles) {
            Ok(s) if s.is_finite() => s,
            Ok(s) => {
                log::warn!("non-finite reward {s} for {}; using floor", sample.id);
                failures += 1;
                floor_score
            }
            Err(e) => {
                log::warn!("reward failed for {}: {e}; using floor", sample.id);
                failures += 1;
                floor_score
            }
        };
        scores.push(score);
        outputs.push(sample);
        trajectories.push(Trajectory {
            tokens,
            logprobs_current: logprobs.clone(),
            logprobs_old: logprobs,
            logprobs_ref,
        });
    }
    Ok((
        GenerationRollout {
            context: task.context.clone(),
            outputs,
            trajectories,
        },
        scores,
        failures,
    ))
}

/// One GRPO update over `tasks`. `reference` holds the frozen reference
/// parameters for the KL penalty.
pub fn grpo_step<P: GenerationPolicy>(
    policy: &mut P,
    reference: &[f64],
    reward_fn: &dyn RewardFn,
    tasks: &[GrpoTask],
    cfg: &OptimizerConfig,
    opts: &GrpoOptions,
    step: u64,
) -> Result<GrpoStepReport, GrpoError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(GrpoError::NoContexts);
    }
    if reference.len() != policy.num_params() {
        return Err(GrpoError::ShapeMismatch(format!(
            "reference has {} parameters, policy {}",
            reference.len(),
            policy.num_params()
        )));
    }
    let old = policy.params().to_vec();
    let groups = {
        let frozen: &P = policy;
        exec::try_map(opts.execution, tasks, |i, task| {
            let group_seed = seed::derive(cfg.seed, &[step, i as u64]);
            let (rollout, scores, failures) =
                grpo_rollout(frozen, &old, reference, reward_fn, task, cfg.group_size, group_seed, opts.floor_score)?;
            let advantages = grpo_advantages_with(&scores, cfg.std_epsilon, opts.std_mode)?;
            Ok::<_, GrpoError>((rollout, scores, advantages, failures))
        })?
    };

    let batch_scale = 1.0 / groups.len() as f64;
    for _ in 0..opts.inner_epochs.max(1) {
        let params = policy.params().to_vec();
        let frozen: &P = policy;
        let grads = exec::try_map(opts.execution, &groups, |_, (rollout, _, adv, _)| {
            grpo_objective_grad(frozen, &params, rollout, adv, cfg, opts.kl_estimator).map(|(_, g)| g)
        })?;
        let mut grad = exec::sum_vectors(params.len(), grads);
        grad.iter_mut().for_each(|g| *g *= batch_scale);
        ascend(policy.params_mut(), &grad, cfg.learning_rate);
    }

    let params = policy.params().to_vec();
    let mut objectives = Vec::with_capacity(groups.len());
    let mut kls = Vec::with_capacity(groups.len());
    let mut advantages = Vec::new();
    let mut lengths = Vec::new();
    let mut train_rewards = Vec::new();
    let mut failures = 0;
    for (rollout, scores, adv, fails) in groups {
        let mut rollout = rollout;
        rollout.rescore(&*policy, &params)?;
        objectives.push(grpo_objective_with(&rollout, &adv, cfg, opts.kl_estimator)?);
        kls.push(mean_kl(&rollout, opts.kl_estimator));
        lengths.extend(rollout.trajectories.iter().map(Trajectory::len));
        advantages.extend(adv);
        train_rewards.extend(scores);
        failures += fails;
    }
    Ok(GrpoStepReport {
        step,
        objective: mean(&objectives),
        train_reward: mean(&train_rewards),
        kl: mean(&kls),
        weighted_advantage: weighted_advantage(&advantages, &lengths).unwrap_or(0.0),
        reward_failures: failures,
    })
}

/// Mean reward of `samples_per_task` fresh samples per task under the
/// current parameters. Failed rewards count as `floor_score`.
pub fn grpo_eval_reward<P: GenerationPolicy + ?Sized>(
    policy: &P,
    reward_fn: &dyn RewardFn,
    tasks: &[GrpoTask],
    samples_per_task: usize,
    seed: u64,
    floor_score: f64,
    execution: Execution,
) -> Result<f64, GrpoError> {
    if tasks.is_empty() {
        return Err(GrpoError::NoContexts);
    }
    let params = policy.params();
    let per_task = exec::try_map(execution, tasks, |i, task| {
        let (_, scores, _) = grpo_rollout(
            policy,
            params,
            params,
            reward_fn,
            task,
            samples_per_task,
            seed::derive(seed, &[i as u64]),
            floor_score,
        )?;
        Ok::<_, GrpoError>(mean(&scores))
    })?;
    Ok(mean(&per_task))
}
