use crate::grpo::{RewardError, RewardFn};
use crate::model::{EditContext, PrincipleSet, SampleRef};
use crate::policy::{GenerationPolicy, PolicyError, PolicyModel};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

/// Toy autoregressive generator: a fixed number of steps, each a softmax over
/// `vocab` tokens with logits indexed by `(step, previous token)`.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct ToyGenerator {
    pub vocab: usize,
    pub steps: usize,
    pub temperature: f64,
    pub params: Vec<f64>,
}

impl ToyGenerator {
    pub fn new(vocab: usize, steps: usize, temperature: f64) -> Self {
        Self {
            vocab,
            steps,
            temperature,
            params: vec![0.0; steps * (vocab + 1) * vocab],
        }
    }

    fn bos(&self) -> usize {
        self.vocab
    }

    fn offset(&self, step: usize, prev: usize) -> usize {
        (step * (self.vocab + 1) + prev) * self.vocab
    }

    fn step_log_probs(&self, params: &[f64], step: usize, prev: usize) -> Vec<f64> {
        let o = self.offset(step, prev);
        let z = &params[o..o + self.vocab];
        let t = self.temperature.max(f64::MIN_POSITIVE);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) / t;
        let lse = max + z.iter().map(|v| (v / t - max).exp()).sum::<f64>().ln();
        z.iter().map(|v| v / t - lse).collect()
    }

    fn check(&self, params: &[f64], tokens: &[u32]) -> Result<(), PolicyError> {
        if params.len() != self.params.len() {
            return Err(PolicyError::Shape(format!("{} params, expected {}", params.len(), self.params.len())));
        }
        if tokens.len() != self.steps {
            return Err(PolicyError::Shape(format!("{} tokens, expected {}", tokens.len(), self.steps)));
        }
        if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= self.vocab) {
            return Err(PolicyError::ImpossibleToken { position, token });
        }
        Ok(())
    }

    /// Probability that the token at every step equals `target`.
    pub fn target_frequency(&self, params: &[f64], target: u32) -> f64 {
        // Forward pass over the marginal of the previous token.
        let mut marginal = vec![0.0; self.vocab + 1];
        marginal[self.bos()] = 1.0;
        let mut total = 0.0;
        for s in 0..self.steps {
            let mut next = vec![0.0; self.vocab + 1];
            for (prev, &m) in marginal.iter().enumerate() {
                if m == 0.0 {
                    continue;
                }
                for (v, lp) in self.step_log_probs(params, s, prev).into_iter().enumerate() {
                    next[v] += m * lp.exp();
                }
            }
            total += next[target as usize];
            marginal = next;
        }
        total / self.steps.max(1) as f64
    }
}

impl PolicyModel<EditContext> for ToyGenerator {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn sample(&self, params: &[f64], _ctx: &EditContext, rng: &mut dyn RngCore) -> Result<Vec<u32>, PolicyError> {
        let mut prev = self.bos();
        let mut out = Vec::with_capacity(self.steps);
        for s in 0..self.steps {
            let u: f64 = rng.random();
            let lps = self.step_log_probs(params, s, prev);
            let mut acc = 0.0;
            let mut choice = self.vocab - 1;
            for (v, lp) in lps.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    choice = v;
                    break;
                }
            }
            out.push(choice as u32);
            prev = choice;
        }
        Ok(out)
    }

    fn log_probs(&self, params: &[f64], _ctx: &EditContext, tokens: &[u32]) -> Result<Vec<f64>, PolicyError> {
        self.check(params, tokens)?;
        let mut prev = self.bos();
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(s, &t)| {
                let lp = self.step_log_probs(params, s, prev)[t as usize];
                prev = t as usize;
                lp
            })
            .collect())
    }

    fn accumulate_log_prob_grad(
        &self,
        params: &[f64],
        _ctx: &EditContext,
        tokens: &[u32],
        weights: &[f64],
        grad: &mut [f64],
    ) -> Result<(), PolicyError> {
        self.check(params, tokens)?;
        if weights.len() != tokens.len() || grad.len() != params.len() {
            return Err(PolicyError::Shape("token, weight and gradient sizes disagree".into()));
        }
        let t = self.temperature.max(f64::MIN_POSITIVE);
        let mut prev = self.bos();
        for (s, (&tok, &w)) in tokens.iter().zip(weights).enumerate() {
            if w != 0.0 {
                let o = self.offset(s, prev);
                for (v, lp) in self.step_log_probs(params, s, prev).into_iter().enumerate() {
                    let indicator = if v == tok as usize { 1.0 } else { 0.0 };
                    grad[o + v] += w * (indicator - lp.exp()) / t;
                }
            }
            prev = tok as usize;
        }
        Ok(())
    }
}

impl GenerationPolicy for ToyGenerator {
    fn realize(&self, ctx: &EditContext, tokens: &[u32]) -> SampleRef {
        let body: Vec<String> = tokens.iter().map(u32::to_string).collect();
        SampleRef::new(format!("gen:{}:{}", ctx.id(), body.join("-")))
    }
}

/// Token ids of a sample id produced by [`ToyGenerator::realize`].
pub fn parse_generated(id: &str) -> Option<Vec<u32>> {
    let rest = id.strip_prefix("gen:")?;
    let (_, body) = rest.rsplit_once(':')?;
    if body.is_empty() {
        return Some(Vec::new());
    }
    body.split('-').map(|t| t.parse().ok()).collect()
}

/// Reward `scale × (fraction of target tokens)` on generator samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetTokenReward {
    pub target: u32,
    pub scale: f64,
}

impl RewardFn for TargetTokenReward {
    fn reward(&self, sample: &SampleRef, _ctx: &EditContext, _principles: &PrincipleSet) -> Result<f64, RewardError> {
        let tokens = parse_generated(&sample.id)
            .ok_or_else(|| RewardError::Backend(format!("`{}` is not a generated sample", sample.id)))?;
        if tokens.is_empty() {
            return Ok(0.0);
        }
        let hits = tokens.iter().filter(|&&t| t == self.target).count();
        Ok(self.scale * hits as f64 / tokens.len() as f64)
    }
}
