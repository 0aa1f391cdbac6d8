//! Per-branch prefix/suffix token accounting and the closed-form speedup
//! estimates it feeds.

use super::EngineError;
use crate::backends::CostModel;
use serde::{Deserialize, Serialize};

/// Token accounting for one trajectory: `prefix_tokens` (p) were reused from
/// the parent, `suffix_tokens` (s) were newly generated. From-scratch
/// trajectories carry p = 0; a branch at step 0 also degenerates to p = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchCost {
    pub branch_id: String,
    pub prefix_tokens: usize,
    pub suffix_tokens: usize,
}

/// Cost ledger for one run: one row per trajectory plus the per-token cost
/// constants. Persisted as a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub branches: Vec<BranchCost>,
    /// Per-token cost under prefix reuse (c).
    pub hot_cost_per_token: f64,
    /// Per-token cost when regenerating from scratch (c_cold >= c).
    pub cold_cost_per_token: f64,
    pub prompt_tokens_total: usize,
    /// Mean wall time per branch. Left unset: the ledger makes token-level
    /// claims only, wall-clock behaviour belongs to the serving stack.
    pub wall_time_per_branch_secs: Option<f64>,
}

impl CostLedger {
    pub fn new(cost: CostModel) -> Self {
        Self {
            branches: Vec::new(),
            hot_cost_per_token: cost.hot_cost_per_token,
            cold_cost_per_token: cost.cold_cost_per_token,
            prompt_tokens_total: 0,
            wall_time_per_branch_secs: None,
        }
    }

    pub fn prefix_sum(&self) -> usize {
        self.branches.iter().map(|b| b.prefix_tokens).sum()
    }

    pub fn suffix_sum(&self) -> usize {
        self.branches.iter().map(|b| b.suffix_tokens).sum()
    }

    /// Tokens saved versus from-scratch resampling: every branch would
    /// otherwise regenerate its prefix.
    pub fn tokens_saved(&self) -> usize {
        self.prefix_sum()
    }
}

/// Cold-over-hot cost ratio of the run:
/// `(c_cold / c) * (1 + sum(p) / sum(s))`.
pub fn reuse_factor(ledger: &CostLedger) -> Result<f64, EngineError> {
    let suffix = ledger.suffix_sum();
    if suffix == 0 {
        return Err(EngineError::ZeroSuffix);
    }
    let ratio = ledger.prefix_sum() as f64 / suffix as f64;
    Ok(ledger.cold_cost_per_token / ledger.hot_cost_per_token * (1.0 + ratio))
}

/// Amdahl-type throughput bound for parallelizable ratio `alpha` across `p`
/// active branches: `1 / ((1 - alpha) + alpha / p)`.
pub fn para_factor_bound(alpha: f64, p: usize) -> f64 {
    assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0, 1]");
    assert!(p >= 1, "p must be at least 1");
    1.0 / ((1.0 - alpha) + alpha / p as f64)
}

/// Practical-regime total speedup (`c ~ c_cold`, `alpha ~ 1`):
/// `(1 + sum(p) / sum(s)) * p`. Report alongside
/// `reuse_factor * para_factor_bound` for comparison; in that regime the two
/// coincide exactly.
pub fn total_speedup_estimate(ledger: &CostLedger, p: usize) -> Result<f64, EngineError> {
    let suffix = ledger.suffix_sum();
    if suffix == 0 {
        return Err(EngineError::ZeroSuffix);
    }
    let ratio = ledger.prefix_sum() as f64 / suffix as f64;
    Ok((1.0 + ratio) * p as f64)
}
