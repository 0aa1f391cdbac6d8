//! Orchestration engine for deep information-seeking agents: uncertainty-
//! guided partial rollout with prefix reuse, and compressed-report answer
//! aggregation.
//!
//! The pipeline runs in two stages. Stage one samples M from-scratch
//! trajectories, ranks step-level perplexity per functional region
//! (reasoning vs. exploration tokens), and spends the remaining N - M
//! budget on partial rollouts branched from the most uncertain steps,
//! reusing each branch's conversation prefix instead of regenerating it.
//! Stage two compresses every trajectory into a structured report and
//! synthesizes one final answer from all N reports in a single tool-free
//! model call, alongside majority/weighted/max-tool-call baselines.
//!
//! Everything runs against either live HTTP endpoints or a deterministic
//! scripted simulator ([`backends::sim`]); engine behaviour is identical
//! across the two.

pub mod aggregate;
pub mod backends;
pub mod engine;
pub mod harness;
pub mod model;
pub mod prompts;
pub mod uncertainty;

pub use aggregate::{FinalAnswer, Report};
pub use model::{RegionStrategy, RegionTag, RunConfig, Step, Token, Trajectory};
pub use uncertainty::{BranchPoint, StepPpl};
