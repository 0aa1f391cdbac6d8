//! Materializes branch budgets: every selected point gets its per-step
//! branch count, and the N - M budget is enforced exactly by residual
//! grants (descending PPL, one at a time) or truncation (lowest PPL first).

use crate::model::RunConfig;
use crate::uncertainty::BranchPoint;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// Extra branches granted to one point beyond `branches_per_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualGrant {
    pub trajectory_id: String,
    pub step_index: usize,
    pub extra: usize,
}

/// A fully allocated branching plan; `total_branches` always equals N - M.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPlan {
    pub branch_points: Vec<BranchPoint>,
    pub total_branches: usize,
    pub residual_allocation: Vec<ResidualGrant>,
}

fn rank(a: &BranchPoint, b: &BranchPoint) -> Ordering {
    b.ppl
        .partial_cmp(&a.ppl)
        .unwrap_or(Ordering::Equal)
        .then(a.step_index.cmp(&b.step_index))
        .then(a.trajectory_id.cmp(&b.trajectory_id))
}

/// Gives each point `branches_per_step` branches, then reconciles against
/// the N - M budget: a shortfall is distributed one branch at a time in
/// descending-PPL order; an excess is truncated from the lowest-PPL point
/// upward, dropping points whose allocation reaches zero. N = M yields an
/// empty plan with zero branches.
pub fn plan_branches(points: &[BranchPoint], config: &RunConfig) -> BranchPlan {
    let budget = config.sampling_budget_n - config.initial_rollouts_m;
    if budget == 0 || points.is_empty() {
        return BranchPlan { branch_points: Vec::new(), total_branches: 0, residual_allocation: Vec::new() };
    }

    let mut ordered: Vec<BranchPoint> = points.to_vec();
    ordered.sort_by(rank);
    for p in &mut ordered {
        p.allocated_branches = config.branches_per_step;
    }
    let base_total = ordered.len() * config.branches_per_step;
    let mut residual_allocation = Vec::new();

    match base_total.cmp(&budget) {
        Ordering::Less => {
            let mut residual = budget - base_total;
            let mut extras = vec![0usize; ordered.len()];
            let count = ordered.len();
            let mut i = 0;
            while residual > 0 {
                extras[i % count] += 1;
                ordered[i % count].allocated_branches += 1;
                residual -= 1;
                i += 1;
            }
            for (p, extra) in ordered.iter().zip(extras) {
                if extra > 0 {
                    residual_allocation.push(ResidualGrant {
                        trajectory_id: p.trajectory_id.clone(),
                        step_index: p.step_index,
                        extra,
                    });
                }
            }
        }
        Ordering::Greater => {
            let mut deficit = base_total - budget;
            for p in ordered.iter_mut().rev() {
                let cut = deficit.min(p.allocated_branches);
                p.allocated_branches -= cut;
                deficit -= cut;
                if deficit == 0 {
                    break;
                }
            }
            ordered.retain(|p| p.allocated_branches > 0);
        }
        Ordering::Equal => {}
    }

    let total: usize = ordered.iter().map(|p| p.allocated_branches).sum();
    debug_assert_eq!(total, budget);
    BranchPlan { branch_points: ordered, total_branches: total, residual_allocation }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RegionTag;

    fn point(id: &str, step: usize, ppl: f64) -> BranchPoint {
        BranchPoint {
            trajectory_id: id.into(),
            step_index: step,
            region: RegionTag::Exploration,
            ppl,
            allocated_branches: 0,
        }
    }

    fn config(n: usize, m: usize, k: usize, bps: usize) -> RunConfig {
        RunConfig {
            sampling_budget_n: n,
            initial_rollouts_m: m,
            branch_top_k: k,
            branches_per_step: bps,
            ..RunConfig::default()
        }
    }

    #[test]
    fn default_settings_give_residual_to_highest_ppl() {
        // N=8, M=1, k=2, 3 per step: 2x3 = 6 plus one residual branch.
        let plan = plan_branches(&[point("t", 1, 5.0), point("t", 3, 9.0)], &config(8, 1, 2, 3));
        assert_eq!(plan.total_branches, 7);
        assert_eq!(plan.branch_points[0].step_index, 3);
        assert_eq!(plan.branch_points[0].allocated_branches, 4);
        assert_eq!(plan.branch_points[1].allocated_branches, 3);
        assert_eq!(
            plan.residual_allocation,
            vec![ResidualGrant { trajectory_id: "t".into(), step_index: 3, extra: 1 }]
        );
    }

    #[test]
    fn equal_budget_needs_no_reconciliation() {
        let plan = plan_branches(&[point("t", 0, 2.0), point("t", 1, 1.5)], &config(7, 1, 2, 3));
        assert_eq!(plan.total_branches, 6);
        assert!(plan.residual_allocation.is_empty());
        assert!(plan.branch_points.iter().all(|p| p.allocated_branches == 3));
    }

    #[test]
    fn no_budget_is_a_legal_empty_plan() {
        let plan = plan_branches(&[point("t", 0, 2.0)], &config(4, 4, 1, 3));
        assert_eq!(plan.total_branches, 0);
        assert!(plan.branch_points.is_empty());
    }

    #[test]
    fn excess_is_truncated_from_the_lowest_ppl_point() {
        let plan = plan_branches(&[point("t", 0, 5.0), point("t", 2, 3.0)], &config(6, 1, 2, 3));
        assert_eq!(plan.total_branches, 5);
        assert_eq!(plan.branch_points[0].allocated_branches, 3);
        assert_eq!(plan.branch_points[1].allocated_branches, 2);
    }

    #[test]
    fn deep_truncation_drops_zeroed_points() {
        let points = [point("t", 0, 5.0), point("t", 1, 4.0), point("t", 2, 3.0)];
        let plan = plan_branches(&points, &config(3, 1, 3, 3));
        assert_eq!(plan.total_branches, 2);
        // 9 - 7 removed: the two lowest points drain first.
        assert_eq!(plan.branch_points.len(), 1);
        assert_eq!(plan.branch_points[0].step_index, 0);
        assert_eq!(plan.branch_points[0].allocated_branches, 2);
    }

    #[test]
    fn large_residual_round_robins_in_ppl_order() {
        let plan = plan_branches(&[point("t", 0, 5.0), point("t", 1, 4.0)], &config(8, 1, 2, 1));
        // base 2, residual 5: +3 to the top point, +2 to the next.
        assert_eq!(plan.branch_points[0].allocated_branches, 4);
        assert_eq!(plan.branch_points[1].allocated_branches, 3);
        assert_eq!(plan.total_branches, 7);
    }
}
