//! Group Contrastive Preference Optimization.
//!
//! For a preference pair the reward model samples N traces for the winner and
//! N for the loser. Each trace is rewarded by its win (or loss) ratio against
//! the opposite group, advantages are centered within each group, and the
//! reward model is updated by maximizing the sum of the two groups' clipped
//! surrogates:
//!
//! ```text
//! J(φ) = 1/(2N) Σ_j [ 1/T_j Σ_t min(r^w_tj A^w_j, clip(r^w_tj, 1-ε, 1+ε) A^w_j)
//!                   + 1/T_j Σ_t min(r^l_tj A^l_j, clip(r^l_tj, 1-ε, 1+ε) A^l_j) ]
//! ```
//!
//! The expression is maximized (gradient ascent), there is no KL term, and
//! `T_j` is each trace's own length.

use crate::eval::weighted_advantage;
use crate::exec::{self, Execution};
use crate::model::{ModelError, OptimizerConfig, PreferencePair, Quadruple, ReasoningTrace, RolloutGroup};
use crate::policy::{ascend, PolicyError, PolicyModel, ReasoningPolicy};
use crate::seed;
use crate::surrogate::{clipped_term, mean};
use crate::trace::{extract_score, parse_verdicts};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GcpoError {
    #[error("group sizes differ or are empty: {winner} winner vs {loser} loser scores")]
    GroupSizeMismatch { winner: usize, loser: usize },
    #[error("non-finite score {value} at index {index}")]
    NonFiniteScore { index: usize, value: f64 },
    #[error("empty rollout group")]
    EmptyGroup,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("likelihood ratio {value} (trace {trace}, token {token}) is not positive and finite")]
    NonPositiveRatio { trace: usize, token: usize, value: f64 },
    #[error("batch has no labeled pairs once `Same` pairs are excluded")]
    EmptyBatch,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_scores(scores: &[f64], offset: usize) -> Result<(), GcpoError> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(GcpoError::NonFiniteScore {
            index: offset + i,
            value: scores[i],
        }),
        None => Ok(()),
    }
}

/// Win ratios for the preferred group and loss ratios for the other one.
///
/// `r^w_j` is the fraction of loser scores strictly below `τ^w_j`; `r^l_j` the
/// fraction of winner scores strictly above `τ^l_j`. Ties count for neither.
pub fn win_loss_ratios(winner: &[f64], loser: &[f64]) -> Result<(Vec<f64>, Vec<f64>), GcpoError> {
    win_loss_ratios_with_tolerance(winner, loser, 0.0)
}

/// As [`win_loss_ratios`], treating `|τ^w − τ^l| ≤ tolerance` as a tie.
pub fn win_loss_ratios_with_tolerance(
    winner: &[f64],
    loser: &[f64],
    tolerance: f64,
) -> Result<(Vec<f64>, Vec<f64>), GcpoError> {
    let n = winner.len();
    if n == 0 || loser.len() != n {
        return Err(GcpoError::GroupSizeMismatch {
            winner: n,
            loser: loser.len(),
        });
    }
    check_scores(winner, 0)?;
    check_scores(loser, n)?;

    let mut sorted_l = loser.to_vec();
    sorted_l.sort_by(f64::total_cmp);
    let mut sorted_w = winner.to_vec();
    sorted_w.sort_by(f64::total_cmp);
    let scale = n as f64;

    // `w - l > tolerance` is monotone in each argument (rounding is monotone),
    // so both counts are partition points of the sorted opposite group.
    let r_w = winner
        .iter()
        .map(|&w| sorted_l.partition_point(|&l| w - l > tolerance) as f64 / scale)
        .collect();
    let r_l = loser
        .iter()
        .map(|&l| (n - sorted_w.partition_point(|&w| w - l <= tolerance)) as f64 / scale)
        .collect();
    Ok((r_w, r_l))
}

/// `A_j = r_j − mean(r)`.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GcpoError> {
    if rewards.is_empty() {
        return Err(GcpoError::EmptyGroup);
    }
    check_scores(rewards, 0)?;
    let m = mean(rewards);
    Ok(rewards.iter().map(|r| r - m).collect())
}

/// Rollout groups for one preference pair.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct PairedRollouts {
    pub pair: PreferencePair,
    pub winner_group: RolloutGroup,
    pub loser_group: RolloutGroup,
}

impl PairedRollouts {
    pub fn group_size(&self) -> usize {
        self.winner_group.len()
    }

    pub fn validate(&self) -> Result<(), GcpoError> {
        let (w, l) = (self.winner_group.len(), self.loser_group.len());
        if w == 0 || w != l {
            return Err(GcpoError::GroupSizeMismatch { winner: w, loser: l });
        }
        Ok(())
    }
}

/// Per-token likelihood ratios `exp(logπ_current − logπ_old)` for each trace.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct TokenRatioRecord {
    pub ratios: Vec<Vec<f64>>,
}

impl TokenRatioRecord {
    pub fn from_logprobs(current: &[Vec<f64>], old: &[Vec<f64>]) -> Result<Self, GcpoError> {
        if current.len() != old.len() {
            return Err(GcpoError::ShapeMismatch(format!(
                "{} current vs {} old sequences",
                current.len(),
                old.len()
            )));
        }
        let ratios = current
            .iter()
            .zip(old)
            .enumerate()
            .map(|(j, (c, o))| {
                if c.len() != o.len() {
                    return Err(GcpoError::ShapeMismatch(format!(
                        "trace {j}: {} current vs {} old log-probabilities",
                        c.len(),
                        o.len()
                    )));
                }
                Ok(c.iter().zip(o).map(|(c, o)| (c - o).exp()).collect())
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { ratios })
    }

    /// Ratios of the traces' recorded current vs old log-probabilities.
    pub fn from_traces(traces: &[ReasoningTrace]) -> Result<Self, GcpoError> {
        let current: Vec<Vec<f64>> = traces.iter().map(|t| t.token_logprobs_current.clone()).collect();
        let old: Vec<Vec<f64>> = traces.iter().map(|t| t.token_logprobs_old.clone()).collect();
        Self::from_logprobs(&current, &old)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.ratios.iter().map(Vec::len).collect()
    }
}

fn check_group(
    name: &str,
    group: &RolloutGroup,
    ratios: &TokenRatioRecord,
    advantages: &[f64],
) -> Result<(), GcpoError> {
    let n = group.len();
    if advantages.len() != n || ratios.ratios.len() != n {
        return Err(GcpoError::ShapeMismatch(format!(
            "{name} group: {n} traces, {} advantages, {} ratio sequences",
            advantages.len(),
            ratios.ratios.len()
        )));
    }
    for (j, (trace, seq)) in group.traces.iter().zip(&ratios.ratios).enumerate() {
        if seq.len() != trace.length || seq.is_empty() {
            return Err(GcpoError::ShapeMismatch(format!(
                "{name} trace {j}: {} ratios for {} tokens",
                seq.len(),
                trace.length
            )));
        }
        if let Some(t) = seq.iter().position(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(GcpoError::NonPositiveRatio {
                trace: j,
                token: t,
                value: seq[t],
            });
        }
    }
    Ok(())
}

/// `Σ_j 1/T_j Σ_t min(r A_j, clip(r) A_j)` for one group.
fn group_surrogate(ratios: &TokenRatioRecord, advantages: &[f64], epsilon: f64) -> f64 {
    ratios
        .ratios
        .iter()
        .zip(advantages)
        .map(|(seq, &a)| {
            let sum: f64 = seq.iter().map(|&r| clipped_term(r, a, epsilon).0).sum();
            sum / seq.len() as f64
        })
        .sum()
}

/// The two-group clipped surrogate for one pair (to be maximized).
pub fn gcpo_objective(
    rollouts: &PairedRollouts,
    ratios_w: &TokenRatioRecord,
    ratios_l: &TokenRatioRecord,
    advantages_w: &[f64],
    advantages_l: &[f64],
    cfg: &OptimizerConfig,
) -> Result<f64, GcpoError> {
    rollouts.validate()?;
    check_group("winner", &rollouts.winner_group, ratios_w, advantages_w)?;
    check_group("loser", &rollouts.loser_group, ratios_l, advantages_l)?;
    let n = rollouts.group_size() as f64;
    let eps = cfg.clip_epsilon;
    Ok((group_surrogate(ratios_w, advantages_w, eps) + group_surrogate(ratios_l, advantages_l, eps)) / (2.0 * n))
}

/// Objective for one pair evaluated at `params`, via the recorded old
/// log-probabilities.
pub fn gcpo_objective_at<P: PolicyModel<Quadruple> + ?Sized>(
    policy: &P,
    params: &[f64],
    rollouts: &PairedRollouts,
    cfg: &OptimizerConfig,
) -> Result<f64, GcpoError> {
    let record = |group: &RolloutGroup| -> Result<TokenRatioRecord, GcpoError> {
        let current = group
            .traces
            .iter()
            .map(|t| policy.log_probs(params, &group.sample, &t.token_ids))
            .collect::<Result<Vec<_>, _>>()?;
        let old: Vec<Vec<f64>> = group.traces.iter().map(|t| t.token_logprobs_old.clone()).collect();
        TokenRatioRecord::from_logprobs(&current, &old)
    };
    gcpo_objective(
        rollouts,
        &record(&rollouts.winner_group)?,
        &record(&rollouts.loser_group)?,
        &rollouts.winner_group.advantages,
        &rollouts.loser_group.advantages,
        cfg,
    )
}

/// Objective value and its analytic gradient with respect to `params`, using
/// each group's stored advantages.
pub fn gcpo_objective_grad<P: PolicyModel<Quadruple> + ?Sized>(
    policy: &P,
    params: &[f64],
    rollouts: &PairedRollouts,
    cfg: &OptimizerConfig,
) -> Result<(f64, Vec<f64>), GcpoError> {
    rollouts.validate()?;
    let scale = 1.0 / (2.0 * rollouts.group_size() as f64);
    let mut grad = vec![0.0; params.len()];
    let mut value = 0.0;
    for group in [&rollouts.winner_group, &rollouts.loser_group] {
        if group.advantages.len() != group.len() {
            return Err(GcpoError::ShapeMismatch("advantages not populated".into()));
        }
        for (j, (trace, &adv)) in group.traces.iter().zip(&group.advantages).enumerate() {
            if trace.token_logprobs_old.len() != trace.length {
                return Err(GcpoError::ShapeMismatch(format!("trace {j} has no old log-probabilities")));
            }
            let current = policy.log_probs(params, &group.sample, &trace.token_ids)?;
            let inv_len = 1.0 / trace.length as f64;
            let mut weights = Vec::with_capacity(trace.length);
            let mut sum = 0.0;
            for (t, (c, o)) in current.iter().zip(&trace.token_logprobs_old).enumerate() {
                let r = (c - o).exp();
                if !(r.is_finite() && r > 0.0) {
                    return Err(GcpoError::NonPositiveRatio { trace: j, token: t, value: r });
                }
                let (v, dv_dr) = clipped_term(r, adv, cfg.clip_epsilon);
                sum += v;
                // d r / dθ = r ∇ log π
                weights.push(scale * inv_len * dv_dr * r);
            }
            value += scale * inv_len * sum;
            policy.accumulate_log_prob_grad(params, &group.sample, &trace.token_ids, &weights, &mut grad)?;
        }
    }
    Ok((value, grad))
}

/// Samples `n` traces for `quad` under `params` and scores them with the
/// score operator. Unparseable outputs receive `floor_score`.
pub fn rollout_traces<P: ReasoningPolicy + ?Sized>(
    policy: &P,
    params: &[f64],
    quad: &Quadruple,
    n: usize,
    seed: u64,
    floor_score: f64,
) -> Result<Vec<ReasoningTrace>, PolicyError> {
    (0..n)
        .map(|i| {
            let mut rng = seed::rng_at(seed, &[i as u64]);
            let tokens = policy.sample(params, quad, &mut rng)?;
            let logprobs = policy.log_probs(params, quad, &tokens)?;
            let raw = policy.render(quad, &tokens);
            let (final_score, score_clamped) = match extract_score(&raw) {
                Ok(r) => (r.value, r.clamped),
                Err(e) => {
                    log::debug!("rollout {i} for {}: {e}; using floor score", quad.key());
                    (floor_score, false)
                }
            };
            let verdicts = parse_verdicts(&raw, &quad.principles).unwrap_or_default();
            let average_score = crate::model::verdict_average(&verdicts).unwrap_or(0.0);
            Ok(ReasoningTrace {
                think_text: String::new(),
                verdicts,
                average_score,
                final_score,
                score_clamped,
                length: tokens.len(),
                token_ids: tokens,
                token_logprobs_current: logprobs.clone(),
                token_logprobs_old: logprobs,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcpoOptions {
    /// Score differences at or below this count as ties.
    pub tie_tolerance: f64,
    /// Score assigned to outputs without a parseable score tag.
    pub floor_score: f64,
    /// Gradient steps taken on each rollout batch.
    pub inner_epochs: usize,
    pub execution: Execution,
}

impl Default for GcpoOptions {
    fn default() -> Self {
        Self {
            tie_tolerance: 0.0,
            floor_score: 0.0,
            inner_epochs: 1,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct GcpoStepReport {
    pub step: u64,
    /// Surrogate objective after the update, averaged over pairs.
    pub objective: f64,
    pub mean_win_ratio: f64,
    pub mean_loss_ratio: f64,
    /// Mean of `A_j / L_j` over every rollout in the batch.
    pub weighted_advantage: f64,
    pub pairs: usize,
    pub clamped_scores: usize,
}

/// Rollouts, rewards and advantages for one labeled pair.
pub fn build_paired_rollouts<P: ReasoningPolicy + ?Sized>(
    policy: &P,
    params: &[f64],
    pair: &PreferencePair,
    n: usize,
    seed: u64,
    opts: &GcpoOptions,
) -> Result<PairedRollouts, GcpoError> {
    let winner_traces = rollout_traces(policy, params, &pair.winner, n, seed::derive(seed, &[0]), opts.floor_score)?;
    let loser_traces = rollout_traces(policy, params, &pair.loser, n, seed::derive(seed, &[1]), opts.floor_score)?;
    let mut winner_group = RolloutGroup::new(pair.winner.clone(), winner_traces);
    let mut loser_group = RolloutGroup::new(pair.loser.clone(), loser_traces);
    winner_group.scores = winner_group.traces.iter().map(|t| t.final_score).collect();
    loser_group.scores = loser_group.traces.iter().map(|t| t.final_score).collect();
    let (r_w, r_l) = win_loss_ratios_with_tolerance(&winner_group.scores, &loser_group.scores, opts.tie_tolerance)?;
    winner_group.advantages = group_advantages(&r_w)?;
    loser_group.advantages = group_advantages(&r_l)?;
    winner_group.rewards = r_w;
    loser_group.rewards = r_l;
    Ok(PairedRollouts {
        pair: pair.clone(),
        winner_group,
        loser_group,
    })
}

/// One GCPO update on `batch`. `Same` pairs are dropped; the old-policy
/// snapshot is taken once, before rollouts.
pub fn gcpo_step<P: ReasoningPolicy>(
    policy: &mut P,
    batch: &[PreferencePair],
    cfg: &OptimizerConfig,
    opts: &GcpoOptions,
    step: u64,
) -> Result<GcpoStepReport, GcpoError> {
    cfg.validate()?;
    let labeled: Vec<&PreferencePair> = batch.iter().filter(|p| !p.is_same()).collect();
    if labeled.is_empty() {
        return Err(GcpoError::EmptyBatch);
    }
    let old = policy.params().to_vec();
    let rollouts = {
        let frozen: &P = policy;
        exec::try_map(opts.execution, &labeled, |i, pair| {
            let pair_seed = seed::derive(cfg.seed, &[step, i as u64]);
            build_paired_rollouts(frozen, &old, pair, cfg.group_size, pair_seed, opts)
        })?
    };

    let batch_scale = 1.0 / rollouts.len() as f64;
    for _ in 0..opts.inner_epochs.max(1) {
        let params = policy.params().to_vec();
        let frozen: &P = policy;
        let grads = exec::try_map(opts.execution, &rollouts, |_, pr| {
            gcpo_objective_grad(frozen, &params, pr, cfg).map(|(_, g)| g)
        })?;
        let mut grad = exec::sum_vectors(params.len(), grads);
        grad.iter_mut().for_each(|g| *g *= batch_scale);
        ascend(policy.params_mut(), &grad, cfg.learning_rate);
    }

    let params = policy.params().to_vec();
    let frozen: &P = policy;
    let objectives = exec::try_map(opts.execution, &rollouts, |_, pr| gcpo_objective_at(frozen, &params, pr, cfg))?;

    let mut advantages = Vec::new();
    let mut lengths = Vec::new();
    let mut clamped = 0;
    for pr in &rollouts {
        for g in [&pr.winner_group, &pr.loser_group] {
            advantages.extend_from_slice(&g.advantages);
            lengths.extend(g.traces.iter().map(|t| t.length));
            clamped += g.traces.iter().filter(|t| t.score_clamped).count();
        }
    }
    Ok(GcpoStepReport {
        step,
        objective: mean(&objectives),
        mean_win_ratio: mean(&rollouts.iter().map(|r| mean(&r.winner_group.rewards)).collect::<Vec<_>>()),
        mean_loss_ratio: mean(&rollouts.iter().map(|r| mean(&r.loser_group.rewards)).collect::<Vec<_>>()),
        weighted_advantage: weighted_advantage(&advantages, &lengths).unwrap_or(0.0),
        pairs: rollouts.len(),
        clamped_scores: clamped,
    })
}
