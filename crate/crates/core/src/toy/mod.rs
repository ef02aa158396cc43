//! Synthetic stand-ins that make the optimization math checkable: a toy
//! reasoning reward model, a toy autoregressive generator, a synthetic
//! preference world with known ground truth, and brute-force oracles.

mod generator;
mod oracle;
mod policy;
mod world;

pub use generator::{parse_generated, TargetTokenReward, ToyGenerator};
pub use oracle::{brute_force_ratios, finite_difference_grad};
pub use policy::{
    toy_rollout, Featurizer, FeatureTable, GeneratedTokenFeatures, ToyPolicy, ToyPolicyState, SCORE_BINS,
    VERDICT_NO, VERDICT_YES, VOCAB_SIZE,
};
pub use world::{feature_table, quality_map, SyntheticWorld, WorldError, WorldSample, WorldSpec};
