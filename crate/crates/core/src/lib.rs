//! Preference-optimization stack for pointwise reasoning reward models.
//!
//! The crate is organised around the data flow of a reward-model training run:
//!
//! - [`model`]: shared domain types (principles, quadruples, traces, pairs).
//! - [`trace`]: the Think+Score text protocol and its score operator.
//! - [`gcpo`]: group-contrastive preference optimization for the reward model.
//! - [`grpo`]: group-relative policy optimization for a downstream generator.
//! - [`pipeline`]: cold-start data curation (decompose, score, verify, select).
//! - [`eval`]: pairwise accuracy, best-of-n aggregation and run metrics.
//! - [`toy`]: synthetic policies, worlds and brute-force oracles.
//! - [`config`]: layered configuration loading.
//!
//! Data-parallel work (rollouts, reward scoring, candidate fan-out) goes through
//! [`exec`], which uses rayon when the `parallel` feature is enabled and falls
//! back to a plain loop otherwise. Results are always assembled in input order.

pub mod config;
pub mod eval;
pub mod exec;
pub mod gcpo;
pub mod grpo;
pub mod jsonl;
pub mod model;
pub mod pipeline;
pub mod policy;
pub mod seed;
pub mod surrogate;
pub mod toy;
pub mod trace;

pub use config::{OptimizerConfig, Settings};
pub use exec::Execution;
pub use model::{
    EditContext, PreferenceLabel, PreferencePair, Principle, PrincipleCategory, PrincipleSet,
    PrincipleVerdict, Quadruple, ReasoningTrace, RolloutGroup, SampleRef,
};
pub use policy::PolicyModel;
