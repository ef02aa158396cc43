use crate::gcpo::rollout_traces;
use crate::model::{verdict_average, PrincipleVerdict, Quadruple, ReasoningTrace, SampleRef};
use crate::policy::{PolicyError, PolicyModel, ReasoningPolicy};
use crate::seed;
use crate::trace::{emit_trace, RawTraceText};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

/// Score tokens are ids `0..SCORE_BINS`, carrying the score value itself.
pub const SCORE_BINS: usize = 11;
pub const VERDICT_NO: u32 = 11;
pub const VERDICT_YES: u32 = 12;
pub const VOCAB_SIZE: usize = 13;

/// Observable features of a sample.
pub trait Featurizer: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn features(&self, sample: &SampleRef) -> Option<Vec<f64>>;
}

/// Explicit per-sample feature rows.
#[derive(Serialize, Deserialize, Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl Featurizer for FeatureTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, sample: &SampleRef) -> Option<Vec<f64>> {
        self.rows.get(&sample.id).cloned()
    }
}

/// Normalized token histogram of a [`ToyGenerator`](super::ToyGenerator) sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedTokenFeatures {
    pub vocab: usize,
}

impl Featurizer for GeneratedTokenFeatures {
    fn dim(&self) -> usize {
        self.vocab
    }

    fn features(&self, sample: &SampleRef) -> Option<Vec<f64>> {
        let tokens = super::parse_generated(&sample.id)?;
        let mut hist = vec![0.0; self.vocab];
        for &t in &tokens {
            *hist.get_mut(t as usize)? += 1.0;
        }
        let n = tokens.len().max(1) as f64;
        hist.iter_mut().for_each(|h| *h /= n);
        Some(hist)
    }
}

/// Toy reasoning reward model.
///
/// A trace for a quadruple with K principles is K verdict tokens followed by
/// one score token. Verdicts are a fixed function of the sample features
/// (probability one); only the score token is learned, through a softmax over
/// `SCORE_BINS` with logits linear in `[features, 1]`.
#[derive(Clone, Debug)]
pub struct ToyPolicy {
    featurizer: Arc<dyn Featurizer>,
    temperature: f64,
    params: Vec<f64>,
}

/// Serializable part of a [`ToyPolicy`]; the featurizer is supplied on load.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ToyPolicyState {
    pub feature_dim: usize,
    pub temperature: f64,
    pub params: Vec<f64>,
}

impl ToyPolicy {
    pub fn new(featurizer: Arc<dyn Featurizer>, temperature: f64) -> Self {
        let n = SCORE_BINS * (featurizer.dim() + 1);
        Self {
            featurizer,
            temperature,
            params: vec![0.0; n],
        }
    }

    /// Parameters drawn from `N(0, scale²)`.
    pub fn with_random_init(featurizer: Arc<dyn Featurizer>, temperature: f64, scale: f64, seed: u64) -> Self {
        let mut policy = Self::new(featurizer, temperature);
        if scale > 0.0 {
            let normal = Normal::new(0.0, scale).expect("positive scale");
            let mut rng = seed::rng(seed);
            policy.params.iter_mut().for_each(|p| *p = normal.sample(&mut rng));
        }
        policy
    }

    pub fn from_state(featurizer: Arc<dyn Featurizer>, state: ToyPolicyState) -> Result<Self, PolicyError> {
        if state.feature_dim != featurizer.dim() || state.params.len() != SCORE_BINS * (state.feature_dim + 1) {
            return Err(PolicyError::Shape(format!(
                "state for dim {} with {} params does not fit featurizer dim {}",
                state.feature_dim,
                state.params.len(),
                featurizer.dim()
            )));
        }
        Ok(Self {
            featurizer,
            temperature: state.temperature,
            params: state.params,
        })
    }

    pub fn state(&self) -> ToyPolicyState {
        ToyPolicyState {
            feature_dim: self.featurizer.dim(),
            temperature: self.temperature,
            params: self.params.clone(),
        }
    }

    /// A frozen judge over generator samples: expected score rises with the
    /// fraction of `target` tokens.
    pub fn target_token_judge(vocab: usize, target: u32, sharpness: f64, temperature: f64) -> Self {
        let mut policy = Self::new(Arc::new(GeneratedTokenFeatures { vocab }), temperature);
        let width = vocab + 1;
        for b in 0..SCORE_BINS {
            let slope = sharpness * (b as f64 - 5.0);
            policy.params[b * width + target as usize] = slope;
            policy.params[b * width + vocab] = -0.5 * slope;
        }
        policy
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn featurizer(&self) -> &Arc<dyn Featurizer> {
        &self.featurizer
    }

    fn phi(&self, quad: &Quadruple) -> Result<Vec<f64>, PolicyError> {
        let mut x = self
            .featurizer
            .features(&quad.edited_sample)
            .ok_or_else(|| PolicyError::UnknownSample(quad.edited_sample.id.clone()))?;
        if x.len() != self.featurizer.dim() {
            return Err(PolicyError::Shape(format!(
                "sample `{}` has {} features, expected {}",
                quad.edited_sample.id,
                x.len(),
                self.featurizer.dim()
            )));
        }
        x.push(1.0);
        Ok(x)
    }

    /// Verdict k is met iff feature `k mod d` is nonnegative.
    fn verdict_pattern(phi: &[f64], k: usize) -> Vec<bool> {
        let d = (phi.len() - 1).max(1);
        (0..k).map(|i| phi[i % d] >= 0.0).collect()
    }

    fn logits(&self, params: &[f64], phi: &[f64]) -> Vec<f64> {
        params
            .chunks(phi.len())
            .take(SCORE_BINS)
            .map(|row| row.iter().zip(phi).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    /// Log-probabilities of the score bins; `None` entries are impossible
    /// (greedy decoding at temperature 0).
    fn score_log_probs(&self, params: &[f64], phi: &[f64]) -> Vec<f64> {
        let z = self.logits(params, phi);
        if self.temperature <= 0.0 {
            let best = (0..SCORE_BINS).fold(0, |b, i| if z[i] > z[b] { i } else { b });
            return (0..SCORE_BINS).map(|i| if i == best { 0.0 } else { f64::NEG_INFINITY }).collect();
        }
        let scaled: Vec<f64> = z.iter().map(|v| v / self.temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        scaled.iter().map(|v| v - lse).collect()
    }

    pub fn score_distribution(&self, params: &[f64], quad: &Quadruple) -> Result<Vec<f64>, PolicyError> {
        let phi = self.phi(quad)?;
        Ok(self.score_log_probs(params, &phi).iter().map(|l| l.exp()).collect())
    }

    /// `Σ_b b · p(b)` under the current parameters.
    pub fn expected_score(&self, quad: &Quadruple) -> Result<f64, PolicyError> {
        let p = self.score_distribution(&self.params, quad)?;
        Ok(p.iter().enumerate().map(|(b, p)| b as f64 * p).sum())
    }

    /// Full-vocabulary distribution at `position` of a trace for `quad`.
    pub fn position_distribution(&self, params: &[f64], quad: &Quadruple, position: usize) -> Result<Vec<f64>, PolicyError> {
        let phi = self.phi(quad)?;
        let k = quad.principles.len();
        let mut dist = vec![0.0; VOCAB_SIZE];
        if position < k {
            let met = Self::verdict_pattern(&phi, k)[position];
            dist[if met { VERDICT_YES } else { VERDICT_NO } as usize] = 1.0;
        } else if position == k {
            for (b, lp) in self.score_log_probs(params, &phi).into_iter().enumerate() {
                dist[b] = lp.exp();
            }
        } else {
            return Err(PolicyError::Shape(format!("position {position} beyond trace length {}", k + 1)));
        }
        Ok(dist)
    }

    /// Supervised warm start: maximizes the mean log-likelihood of the score
    /// token `round(score)` for each example. Returns the final mean
    /// log-likelihood.
    pub fn fit_scores(&mut self, examples: &[(Quadruple, f64)], epochs: usize, learning_rate: f64) -> Result<f64, PolicyError> {
        let mut last = 0.0;
        for _ in 0..epochs {
            let mut grad = vec![0.0; self.params.len()];
            let mut total = 0.0;
            for (quad, score) in examples {
                let tokens = self.tokens_for_score(quad, score.round().clamp(0.0, 10.0) as u32)?;
                let k = quad.principles.len();
                let lps = self.log_probs(&self.params, quad, &tokens)?;
                total += lps[k];
                let mut weights = vec![0.0; tokens.len()];
                weights[k] = 1.0 / examples.len().max(1) as f64;
                self.accumulate_log_prob_grad(&self.params, quad, &tokens, &weights, &mut grad)?;
            }
            crate::policy::ascend(&mut self.params, &grad, learning_rate);
            last = total / examples.len().max(1) as f64;
        }
        Ok(last)
    }

    /// The deterministic verdict prefix followed by `score_token`.
    pub fn tokens_for_score(&self, quad: &Quadruple, score_token: u32) -> Result<Vec<u32>, PolicyError> {
        let phi = self.phi(quad)?;
        let mut tokens: Vec<u32> = Self::verdict_pattern(&phi, quad.principles.len())
            .into_iter()
            .map(|m| if m { VERDICT_YES } else { VERDICT_NO })
            .collect();
        tokens.push(score_token);
        Ok(tokens)
    }
}

impl PolicyModel<Quadruple> for ToyPolicy {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn sample(&self, params: &[f64], quad: &Quadruple, rng: &mut dyn RngCore) -> Result<Vec<u32>, PolicyError> {
        let phi = self.phi(quad)?;
        let lps = self.score_log_probs(params, &phi);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut choice = None;
        for (b, lp) in lps.iter().enumerate() {
            let p = lp.exp();
            if p > 0.0 {
                choice = Some(b);
                acc += p;
                if u < acc {
                    break;
                }
            }
        }
        let score = choice.expect("score distribution has support") as u32;
        let mut tokens: Vec<u32> = Self::verdict_pattern(&phi, quad.principles.len())
            .into_iter()
            .map(|m| if m { VERDICT_YES } else { VERDICT_NO })
            .collect();
        tokens.push(score);
        Ok(tokens)
    }

    fn log_probs(&self, params: &[f64], quad: &Quadruple, tokens: &[u32]) -> Result<Vec<f64>, PolicyError> {
        let phi = self.phi(quad)?;
        let k = quad.principles.len();
        if tokens.len() != k + 1 {
            return Err(PolicyError::Shape(format!("{} tokens for a trace of length {}", tokens.len(), k + 1)));
        }
        let pattern = Self::verdict_pattern(&phi, k);
        let mut out = Vec::with_capacity(k + 1);
        for (position, (&tok, met)) in tokens.iter().zip(&pattern).enumerate() {
            let expected = if *met { VERDICT_YES } else { VERDICT_NO };
            if tok != expected {
                return Err(PolicyError::ImpossibleToken { position, token: tok });
            }
            out.push(0.0);
        }
        let score = tokens[k];
        let lp = self
            .score_log_probs(params, &phi)
            .get(score as usize)
            .copied()
            .unwrap_or(f64::NEG_INFINITY);
        if !lp.is_finite() {
            return Err(PolicyError::ImpossibleToken { position: k, token: score });
        }
        out.push(lp);
        Ok(out)
    }

    fn accumulate_log_prob_grad(
        &self,
        params: &[f64],
        quad: &Quadruple,
        tokens: &[u32],
        weights: &[f64],
        grad: &mut [f64],
    ) -> Result<(), PolicyError> {
        let k = quad.principles.len();
        if tokens.len() != k + 1 || weights.len() != tokens.len() || grad.len() != params.len() {
            return Err(PolicyError::Shape("token, weight and gradient sizes disagree".into()));
        }
        if self.temperature <= 0.0 {
            return Ok(());
        }
        let phi = self.phi(quad)?;
        let w = weights[k] / self.temperature;
        if w == 0.0 {
            return Ok(());
        }
        let probs: Vec<f64> = self.score_log_probs(params, &phi).iter().map(|l| l.exp()).collect();
        let score = tokens[k] as usize;
        let width = phi.len();
        for (b, p) in probs.iter().enumerate() {
            let coef = w * (f64::from(u8::from(b == score)) - p);
            for (i, x) in phi.iter().enumerate() {
                grad[b * width + i] += coef * x;
            }
        }
        Ok(())
    }
}

impl ReasoningPolicy for ToyPolicy {
    fn render(&self, quad: &Quadruple, tokens: &[u32]) -> RawTraceText {
        let k = quad.principles.len();
        let verdicts: Vec<PrincipleVerdict> = quad
            .principles
            .iter()
            .zip(tokens)
            .map(|(p, &t)| PrincipleVerdict::new(p.id.clone(), t == VERDICT_YES))
            .collect();
        let Some(&score) = tokens.get(k).filter(|&&s| (s as usize) < SCORE_BINS) else {
            return RawTraceText::new("toy review: incomplete output");
        };
        let met = verdicts.iter().filter(|v| v.met).count();
        let trace = ReasoningTrace {
            think_text: format!("toy review of {}: {met} of {k} points met", quad.edited_sample.id),
            average_score: verdict_average(&verdicts).unwrap_or(0.0),
            verdicts,
            final_score: f64::from(score),
            score_clamped: false,
            token_ids: tokens.to_vec(),
            token_logprobs_current: Vec::new(),
            token_logprobs_old: Vec::new(),
            length: tokens.len(),
        };
        emit_trace(&trace, &quad.principles)
    }
}

/// Samples `n` traces for `quad`; current and old log-probabilities are both
/// recorded under the policy's present parameters.
pub fn toy_rollout(policy: &ToyPolicy, quad: &Quadruple, n: usize, seed: u64) -> Result<Vec<ReasoningTrace>, PolicyError> {
    rollout_traces(policy, policy.params(), quad, n, seed, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::quadruple;

    fn table_policy(temperature: f64, seed: u64) -> (ToyPolicy, Quadruple) {
        let q = quadruple("s1", 3);
        let mut rows = BTreeMap::new();
        rows.insert("s1".to_string(), vec![0.5, -1.0]);
        let table = FeatureTable { dim: 2, rows };
        (ToyPolicy::with_random_init(Arc::new(table), temperature, 0.5, seed), q)
    }

    #[test]
    fn distributions_sum_to_one() {
        let (p, q) = table_policy(1.3, 1);
        for pos in 0..=q.principles.len() {
            let d = p.position_distribution(p.params(), &q, pos).unwrap();
            assert_eq!(d.len(), VOCAB_SIZE);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn greedy_rollouts_are_identical() {
        let (p, q) = table_policy(0.0, 2);
        let traces = toy_rollout(&p, &q, 8, 9).unwrap();
        assert!(traces.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn seeded_rollouts_reproduce() {
        let (p, q) = table_policy(1.0, 3);
        assert_eq!(toy_rollout(&p, &q, 6, 42).unwrap(), toy_rollout(&p, &q, 6, 42).unwrap());
    }

    #[test]
    fn rendered_traces_parse() {
        let (p, q) = table_policy(1.0, 4);
        for t in toy_rollout(&p, &q, 10, 5).unwrap() {
            t.validate_against(&q.principles).unwrap();
            let raw = p.render(&q, &t.token_ids);
            assert!(raw.text.ends_with("</score>"));
            assert_eq!(crate::trace::extract_score(&raw).unwrap().value, t.final_score);
        }
    }

    #[test]
    fn unknown_sample_is_an_error() {
        let (p, _) = table_policy(1.0, 0);
        let other = quadruple("missing", 2);
        assert_eq!(p.expected_score(&other), Err(PolicyError::UnknownSample("missing".into())));
    }

    #[test]
    fn fit_scores_moves_expected_score() {
        let (mut p, q) = table_policy(1.0, 0);
        let before = p.expected_score(&q).unwrap();
        p.fit_scores(&[(q.clone(), 9.0)], 200, 1.0).unwrap();
        assert!(p.expected_score(&q).unwrap() > before.max(8.0));
    }

    #[test]
    fn state_round_trips() {
        let (p, q) = table_policy(0.7, 8);
        let back = ToyPolicy::from_state(p.featurizer().clone(), p.state()).unwrap();
        assert_eq!(back.expected_score(&q).unwrap(), p.expected_score(&q).unwrap());
        let wrong = Arc::new(GeneratedTokenFeatures { vocab: 5 });
        assert!(ToyPolicy::from_state(wrong, p.state()).is_err());
    }
}
