//! Evaluation metrics: pairwise preference accuracy with tie exclusion,
//! best-of-n score aggregation, weighted advantage, and run metric series.

use crate::exec::{self, Execution};
use crate::jsonl::{self, JsonlError};
use crate::model::{PreferencePair, Quadruple};
use crate::seed;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no labeled pairs remain after excluding `Same` pairs")]
    EmptyAfterExclusion,
    #[error("trace {index} has zero length")]
    ZeroLengthTrace { index: usize },
    #[error("{advantages} advantages but {lengths} lengths")]
    LengthMismatch { advantages: usize, lengths: usize },
    #[error("best-of-n needs n >= 1")]
    InvalidSampleCount,
    #[error("no metrics found in run directory {0}")]
    MissingRun(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// How equal model scores on a labeled pair are counted.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TiePolicy {
    /// A tie is incorrect.
    #[default]
    Strict,
    /// A tie earns half a point. Not the default.
    HalfCredit,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub correct: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

/// Fraction of labeled pairs where `score(winner) > score(loser)`.
/// `Same` pairs are excluded from the denominator.
pub fn pairwise_accuracy<F>(
    pairs: &[PreferencePair],
    score_fn: F,
    ties: TiePolicy,
    execution: Execution,
) -> Result<AccuracyReport, EvalError>
where
    F: Fn(&Quadruple) -> f64 + Sync + Send,
{
    let labeled: Vec<&PreferencePair> = pairs.iter().filter(|p| !p.is_same()).collect();
    let excluded = pairs.len() - labeled.len();
    if labeled.is_empty() {
        return Err(EvalError::EmptyAfterExclusion);
    }
    let credits = exec::map(execution, &labeled, |_, pair| {
        let (w, l) = (score_fn(&pair.winner), score_fn(&pair.loser));
        if w > l {
            1.0
        } else if w == l && ties == TiePolicy::HalfCredit {
            0.5
        } else {
            0.0
        }
    });
    let correct: f64 = credits.iter().sum();
    Ok(AccuracyReport {
        accuracy: correct / labeled.len() as f64,
        correct,
        evaluated: labeled.len(),
        excluded,
    })
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
    #[default]
    Median,
}

pub fn aggregate(values: &mut [f64], how: Aggregate) -> f64 {
    match how {
        Aggregate::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregate::Median => {
            values.sort_by(f64::total_cmp);
            let n = values.len();
            if n % 2 == 1 {
                values[n / 2]
            } else {
                (values[n / 2 - 1] + values[n / 2]) / 2.0
            }
        }
    }
}

/// Calls a stochastic scorer `n` times and aggregates. Draw `i` uses its own
/// RNG stream derived from `seed`.
pub fn best_of_n_score<F>(quad: &Quadruple, score_fn: F, n: usize, how: Aggregate, seed: u64) -> Result<f64, EvalError>
where
    F: Fn(&Quadruple, &mut dyn RngCore) -> f64,
{
    if n == 0 {
        return Err(EvalError::InvalidSampleCount);
    }
    let mut values: Vec<f64> = (0..n)
        .map(|i| score_fn(quad, &mut seed::rng_at(seed, &[i as u64])))
        .collect();
    Ok(aggregate(&mut values, how))
}

/// `(1/G) Σ A_i / L_i`.
pub fn weighted_advantage(advantages: &[f64], lengths: &[usize]) -> Result<f64, EvalError> {
    if advantages.len() != lengths.len() {
        return Err(EvalError::LengthMismatch {
            advantages: advantages.len(),
            lengths: lengths.len(),
        });
    }
    if let Some(index) = lengths.iter().position(|&l| l == 0) {
        return Err(EvalError::ZeroLengthTrace { index });
    }
    if advantages.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = advantages.iter().zip(lengths).map(|(a, &l)| a / l as f64).sum();
    Ok(sum / advantages.len() as f64)
}

/// One line of a run's `metrics.jsonl`. Fields a trainer does not produce are null.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
pub struct StepMetrics {
    pub step: u64,
    pub objective: Option<f64>,
    pub mean_win_ratio: Option<f64>,
    pub weighted_advantage: Option<f64>,
    pub eval_accuracy: Option<f64>,
    #[serde(default)]
    pub train_reward: Option<f64>,
    #[serde(default)]
    pub eval_reward: Option<f64>,
    #[serde(default)]
    pub kl: Option<f64>,
}

/// Aligned row for plotting.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SeriesRow {
    pub step: u64,
    pub train_reward: Option<f64>,
    pub eval_reward: Option<f64>,
    pub weighted_advantage: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Reads `run_dir/metrics.jsonl`, keeps the last record for each step and
/// returns rows in ascending step order.
pub fn metrics_series(run_dir: impl AsRef<Path>) -> Result<Vec<SeriesRow>, EvalError> {
    let dir = run_dir.as_ref();
    let path = dir.join(METRICS_FILE);
    if !path.is_file() {
        return Err(EvalError::MissingRun(dir.display().to_string()));
    }
    let records: Vec<StepMetrics> = jsonl::read_path(&path)?;
    if records.is_empty() {
        return Err(EvalError::MissingRun(dir.display().to_string()));
    }
    let mut by_step = BTreeMap::new();
    for r in records {
        by_step.insert(r.step, r);
    }
    Ok(by_step
        .into_values()
        .map(|r| SeriesRow {
            step: r.step,
            train_reward: r.train_reward,
            eval_reward: r.eval_reward,
            weighted_advantage: r.weighted_advantage,
            accuracy: r.eval_accuracy,
        })
        .collect())
}

pub fn write_series_csv<W: Write>(rows: &[SeriesRow], writer: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
