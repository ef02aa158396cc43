use super::policy::FeatureTable;
use crate::grpo::GrpoTask;
use crate::model::{EditContext, ModelError, PreferenceLabel, PreferencePair, PrincipleSet, Quadruple, SampleRef};
use crate::pipeline::{template_principles, PipelineInput};
use crate::seed;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub samples: usize,
    /// Total pairs, split between train and held-out.
    pub pairs: usize,
    pub contexts: usize,
    pub feature_dim: usize,
    /// Observation noise added to the features the model sees.
    pub noise_sigma: f64,
    /// Pairs closer than this in latent quality are labeled `Same`.
    pub same_margin: f64,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            samples: 400,
            pairs: 500,
            contexts: 8,
            feature_dim: 4,
            noise_sigma: 0.0,
            same_margin: 0.5,
            heldout_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct WorldSample {
    pub id: String,
    pub context_id: String,
    /// Observed features (latent features plus noise).
    pub features: Vec<f64>,
    /// Latent quality in [0, 10].
    pub quality: f64,
}

const INSTRUCTIONS: [&str; 8] = [
    "make the sky purple",
    "remove the lamp and add a cat",
    "turn the car red",
    "replace the sign text and brighten the street",
    "add a hat to the dog",
    "blur the background",
    "rotate the cup and change its color to green",
    "put snow on the roof",
];

/// A synthetic preference world with known latent quality.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub direction: Vec<f64>,
    pub contexts: Vec<(EditContext, PrincipleSet)>,
    pub samples: Vec<WorldSample>,
    pub train: Vec<PreferencePair>,
    pub heldout: Vec<PreferencePair>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SyntheticWorld {
    pub fn generate(spec: &WorldSpec) -> Result<Self, WorldError> {
        let invalid = |m: &str| Err(WorldError::InvalidSpec(m.to_string()));
        if spec.contexts == 0 || spec.feature_dim == 0 {
            return invalid("contexts and feature_dim must be positive");
        }
        let margin_ok = spec.same_margin.is_finite() && spec.same_margin >= 0.0;
        if !(spec.noise_sigma.is_finite() && spec.noise_sigma >= 0.0) || !margin_ok {
            return invalid("noise_sigma and same_margin must be nonnegative");
        }
        if !(0.0..1.0).contains(&spec.heldout_fraction) {
            return invalid("heldout_fraction must lie in [0, 1)");
        }
        let per_context = spec.samples / spec.contexts;
        let heldout_per_context = (per_context as f64 * spec.heldout_fraction).round() as usize;
        if per_context - heldout_per_context < 2 || (spec.heldout_fraction > 0.0 && heldout_per_context < 2) {
            return invalid("too few samples per context for train and held-out pairs");
        }

        let mut rng = seed::rng(spec.seed);
        let mut direction: Vec<f64> = (0..spec.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        direction.iter_mut().for_each(|v| *v /= norm);

        let mut contexts = Vec::with_capacity(spec.contexts);
        for c in 0..spec.contexts {
            let ctx = EditContext::new(SampleRef::new(format!("ref-{c}")), INSTRUCTIONS[c % INSTRUCTIONS.len()])?;
            let principles = template_principles(&ctx);
            contexts.push((ctx, principles));
        }

        let mut samples = Vec::with_capacity(per_context * spec.contexts);
        for i in 0..per_context * spec.contexts {
            let (ctx, _) = &contexts[i % spec.contexts];
            let latent: Vec<f64> = (0..spec.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let score = latent.iter().zip(&direction).map(|(x, w)| x * w).sum::<f64>();
            let features = latent
                .iter()
                .map(|x| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    x + spec.noise_sigma * eps
                })
                .collect();
            samples.push(WorldSample {
                id: format!("s{i:05}"),
                context_id: ctx.id(),
                features,
                quality: 10.0 * sigmoid(2.5 * score),
            });
        }

        let mut train_pool: Vec<Vec<usize>> = vec![Vec::new(); spec.contexts];
        let mut heldout_pool: Vec<Vec<usize>> = vec![Vec::new(); spec.contexts];
        for c in 0..spec.contexts {
            let mut members: Vec<usize> = (0..per_context).map(|j| j * spec.contexts + c).collect();
            members.shuffle(&mut rng);
            heldout_pool[c] = members.split_off(per_context - heldout_per_context);
            train_pool[c] = members;
        }

        let heldout_pairs = (spec.pairs as f64 * spec.heldout_fraction).round() as usize;
        let mut world = Self {
            spec: spec.clone(),
            direction,
            contexts,
            samples,
            train: Vec::new(),
            heldout: Vec::new(),
        };
        world.train = world.draw_pairs(&train_pool, spec.pairs - heldout_pairs, &mut rng)?;
        world.heldout = world.draw_pairs(&heldout_pool, heldout_pairs, &mut rng)?;
        Ok(world)
    }

    fn draw_pairs(&self, pools: &[Vec<usize>], n: usize, rng: &mut impl Rng) -> Result<Vec<PreferencePair>, WorldError> {
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.random_range(0..pools.len());
            let pool = &pools[c];
            let a = rng.random_range(0..pool.len());
            let mut b = rng.random_range(0..pool.len() - 1);
            if b >= a {
                b += 1;
            }
            let (sa, sb) = (&self.samples[pool[a]], &self.samples[pool[b]]);
            let (win, lose) = if sa.quality >= sb.quality { (sa, sb) } else { (sb, sa) };
            let label = if (sa.quality - sb.quality).abs() < self.spec.same_margin {
                PreferenceLabel::Same
            } else if rng.random_bool(0.5) {
                PreferenceLabel::WinnerLeft
            } else {
                PreferenceLabel::WinnerRight
            };
            let (ctx, principles) = &self.contexts[c];
            pairs.push(PreferencePair::new(
                ctx.clone(),
                Quadruple::new(SampleRef::new(&win.id), ctx.clone(), principles.clone())?,
                Quadruple::new(SampleRef::new(&lose.id), ctx.clone(), principles.clone())?,
                label,
            )?);
        }
        Ok(pairs)
    }

    pub fn feature_table(&self) -> FeatureTable {
        feature_table(&self.samples, self.spec.feature_dim)
    }

    pub fn quality_map(&self) -> BTreeMap<String, f64> {
        quality_map(&self.samples)
    }

    pub fn grpo_tasks(&self) -> Vec<GrpoTask> {
        self.contexts
            .iter()
            .map(|(context, principles)| GrpoTask {
                context: context.clone(),
                principles: principles.clone(),
            })
            .collect()
    }

    /// One pipeline input per context listing its samples as candidate edits.
    pub fn pipeline_inputs(&self) -> Vec<PipelineInput> {
        self.contexts
            .iter()
            .map(|(context, _)| {
                let id = context.id();
                PipelineInput {
                    context: context.clone(),
                    edited_samples: self
                        .samples
                        .iter()
                        .filter(|s| s.context_id == id)
                        .map(|s| SampleRef::new(&s.id))
                        .collect(),
                }
            })
            .collect()
    }
}

/// Feature rows keyed by sample id.
pub fn feature_table(samples: &[WorldSample], dim: usize) -> FeatureTable {
    FeatureTable {
        dim,
        rows: samples.iter().map(|s| (s.id.clone(), s.features.clone())).collect(),
    }
}

pub fn quality_map(samples: &[WorldSample]) -> BTreeMap<String, f64> {
    samples.iter().map(|s| (s.id.clone(), s.quality)).collect()
}
