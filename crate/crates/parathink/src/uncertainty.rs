//! Step-level perplexity per functional region, branch-point selection, and
//! trajectory confidence.
//!
//! Step PPL is exp of the mean negative log-probability over one region's
//! tokens within a step; it is the engine's self-uncertainty proxy. Branch
//! points are the globally top-k most uncertain steps pooled across the
//! initial rollouts.

use crate::model::{RegionStrategy, RegionTag, Step, Token, Trajectory};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

/// Perplexity of one step's tokens within one functional region. `ppl` is
/// `None` exactly when the step has no tokens in that region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPpl {
    pub trajectory_id: String,
    pub step_index: usize,
    pub region: RegionTag,
    pub ppl: Option<f64>,
    pub token_count: usize,
}

/// A (trajectory, step) pair selected for partial rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPoint {
    pub trajectory_id: String,
    pub step_index: usize,
    pub region: RegionTag,
    pub ppl: f64,
    /// Filled by branch planning; zero until then.
    pub allocated_branches: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("only {available} steps with defined PPL available, {requested} requested")]
    InsufficientSteps { requested: usize, available: usize },
    #[error("trajectory has no model-generated tokens")]
    EmptyTrajectory,
}

fn region_ppl(tokens: &[Token]) -> Option<f64> {
    if tokens.is_empty() {
        return None;
    }
    let mean_neg = tokens.iter().map(|t| -t.logprob).sum::<f64>() / tokens.len() as f64;
    Some(mean_neg.exp())
}

/// Perplexity of `step`'s region-`region` tokens:
/// `exp(-(1/n) * sum(logprob))` over the n tokens of that region, undefined
/// when the region is empty.
pub fn step_ppl(trajectory_id: impl Into<String>, step: &Step, region: RegionTag) -> StepPpl {
    let tokens = step.region_tokens(region);
    StepPpl {
        trajectory_id: trajectory_id.into(),
        step_index: step.index,
        region,
        ppl: region_ppl(tokens),
        token_count: tokens.len(),
    }
}

/// One [`StepPpl`] per step in step order; undefined entries kept in place.
pub fn region_ppl_series(traj: &Trajectory, region: RegionTag) -> Vec<StepPpl> {
    traj.steps.iter().map(|s| step_ppl(&traj.id, s, region)).collect()
}

/// Indices of the `n` highest defined-PPL steps, descending PPL, ties broken
/// by lower step index. Fewer than `n` defined entries returns all of them.
pub fn top_uncertainty_steps(traj: &Trajectory, region: RegionTag, n: usize) -> Vec<usize> {
    let mut defined: Vec<(usize, f64)> = region_ppl_series(traj, region)
        .into_iter()
        .filter_map(|p| p.ppl.map(|v| (p.step_index, v)))
        .collect();
    defined.sort_by(|a, b| cmp_ppl_desc(a.1, b.1).then(a.0.cmp(&b.0)));
    defined.into_iter().take(n).map(|(i, _)| i).collect()
}

fn cmp_ppl_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// All defined step PPLs of one region pooled across the trajectories and
/// sorted by descending PPL, then ascending step index, then trajectory id.
fn pooled_ranking(trajectories: &[Trajectory], region: RegionTag) -> Vec<StepPpl> {
    let mut pool: Vec<StepPpl> = trajectories
        .iter()
        .flat_map(|t| region_ppl_series(t, region))
        .filter(|p| p.ppl.is_some())
        .collect();
    pool.sort_by(|a, b| {
        cmp_ppl_desc(a.ppl.unwrap(), b.ppl.unwrap())
            .then(a.step_index.cmp(&b.step_index))
            .then(a.trajectory_id.cmp(&b.trajectory_id))
    });
    pool
}

/// Selects the k globally most uncertain steps across the initial rollouts.
///
/// Single-region strategies rank by that region's PPL alone. Mixed
/// alternates picks between the two regional rankings starting with
/// Reasoning, so an odd k gives the extra pick to Reasoning; a (trajectory,
/// step) pair is used at most once. `allocated_branches` is left at zero for
/// branch planning to fill.
pub fn select_branch_points(
    initial_trajectories: &[Trajectory],
    strategy: RegionStrategy,
    k: usize,
) -> Result<Vec<BranchPoint>, UncertaintyError> {
    assert!(k >= 1, "k must be at least 1");
    let to_point = |p: &StepPpl| BranchPoint {
        trajectory_id: p.trajectory_id.clone(),
        step_index: p.step_index,
        region: p.region,
        ppl: p.ppl.unwrap(),
        allocated_branches: 0,
    };

    let points = match strategy {
        RegionStrategy::Reasoning | RegionStrategy::Exploration => {
            let region = match strategy {
                RegionStrategy::Reasoning => RegionTag::Reasoning,
                _ => RegionTag::Exploration,
            };
            let pool = pooled_ranking(initial_trajectories, region);
            if pool.len() < k {
                return Err(UncertaintyError::InsufficientSteps {
                    requested: k,
                    available: pool.len(),
                });
            }
            pool.iter().take(k).map(to_point).collect()
        }
        RegionStrategy::Mixed => {
            let rankings = [
                pooled_ranking(initial_trajectories, RegionTag::Reasoning),
                pooled_ranking(initial_trajectories, RegionTag::Exploration),
            ];
            let mut cursors = [0usize, 0usize];
            let mut picked: Vec<BranchPoint> = Vec::with_capacity(k);
            let used = |picked: &[BranchPoint], p: &StepPpl| {
                picked
                    .iter()
                    .any(|b| b.trajectory_id == p.trajectory_id && b.step_index == p.step_index)
            };
            let mut side = 0; // reasoning first
            while picked.len() < k {
                let mut advanced = false;
                for offset in 0..2 {
                    let r = (side + offset) % 2;
                    while cursors[r] < rankings[r].len() && used(&picked, &rankings[r][cursors[r]]) {
                        cursors[r] += 1;
                    }
                    if cursors[r] < rankings[r].len() {
                        picked.push(to_point(&rankings[r][cursors[r]]));
                        cursors[r] += 1;
                        side = (r + 1) % 2;
                        advanced = true;
                        break;
                    }
                }
                if !advanced {
                    return Err(UncertaintyError::InsufficientSteps {
                        requested: k,
                        available: picked.len(),
                    });
                }
            }
            picked
        }
    };
    Ok(points)
}

/// Geometric-mean token probability over the whole trajectory: the inverse
/// of whole-trajectory perplexity. Used as the weight by the weighted-vote
/// baseline; the metric is isolated here so it can be swapped.
pub fn trajectory_confidence(traj: &Trajectory) -> Result<f64, UncertaintyError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for tok in traj.generated_tokens() {
        sum += tok.logprob;
        n += 1;
    }
    if n == 0 {
        return Err(UncertaintyError::EmptyTrajectory);
    }
    Ok((sum / n as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Origin, Step, ToolCall, ToolResponse, TRAJECTORY_SCHEMA_VERSION};

    fn tokens(logprobs: &[f64], region: RegionTag) -> Vec<Token> {
        logprobs
            .iter()
            .enumerate()
            .map(|(i, lp)| Token::new(format!("w{i}"), *lp, region))
            .collect()
    }

    fn step_with(index: usize, reasoning: &[f64], call: Option<&[f64]>) -> Step {
        Step {
            index,
            reasoning_tokens: tokens(reasoning, RegionTag::Reasoning),
            tool_call: call.map(|lps| ToolCall {
                tool_name: "search".into(),
                arguments: serde_json::json!({}),
                raw_tokens: tokens(lps, RegionTag::Exploration),
            }),
            tool_response: call.map(|_| ToolResponse {
                content: "r".into(),
                token_count: 1,
                error_flag: false,
            }),
            is_terminal: call.is_none(),
        }
    }

    fn trajectory(id: &str, steps: Vec<Step>) -> Trajectory {
        let generated = steps.iter().map(|s| s.generated_token_count()).sum();
        Trajectory {
            schema: TRAJECTORY_SCHEMA_VERSION,
            id: id.into(),
            task_id: "t".into(),
            origin: Origin::FromScratch,
            steps,
            final_answer: Some("x".into()),
            generated_token_count: generated,
            prompt_token_count: 0,
            sampling_seed: 0,
        }
    }

    /// Trajectory whose exploration PPLs per step are exactly `ppls`
    /// (single call token with logprob -ln(ppl)).
    fn exploration_trajectory(id: &str, ppls: &[f64]) -> Trajectory {
        let mut steps: Vec<Step> = ppls
            .iter()
            .enumerate()
            .map(|(i, p)| step_with(i, &[-0.1], Some(&[-(p.ln())])))
            .collect();
        let n = steps.len();
        steps.push(step_with(n, &[-0.1], None));
        trajectory(id, steps)
    }

    #[test]
    fn certain_tokens_give_unit_ppl() {
        let step = step_with(0, &[0.0, 0.0, 0.0], None);
        let p = step_ppl("t", &step, RegionTag::Reasoning);
        assert_eq!(p.ppl, Some(1.0));
        assert_eq!(p.token_count, 3);
    }

    #[test]
    fn single_half_probability_token_gives_ppl_two() {
        let step = step_with(0, &[-(2.0f64.ln())], None);
        let p = step_ppl("t", &step, RegionTag::Reasoning);
        assert!((p.ppl.unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mean_of_negative_logprobs_exponentiated() {
        // mean(0.5, 1.0, 1.5) = 1.0, so PPL = e.
        let step = step_with(0, &[-0.5, -1.0, -1.5], None);
        let p = step_ppl("t", &step, RegionTag::Reasoning);
        // e = 2.718282 to six decimals.
        assert!((p.ppl.unwrap() - std::f64::consts::E).abs() < 1e-9);
    }

    #[test]
    fn empty_region_is_undefined() {
        let step = step_with(0, &[-0.5], None); // no tool call
        let p = step_ppl("t", &step, RegionTag::Exploration);
        assert_eq!(p.ppl, None);
        assert_eq!(p.token_count, 0);
    }

    #[test]
    fn series_matches_per_step_computation() {
        let traj = exploration_trajectory("t", &[1.5, 3.0, 2.0]);
        let series = region_ppl_series(&traj, RegionTag::Exploration);
        assert_eq!(series.len(), 4);
        for (i, entry) in series.iter().enumerate() {
            assert_eq!(*entry, step_ppl("t", &traj.steps[i], RegionTag::Exploration));
        }
        // Terminal step has no call.
        assert_eq!(series[3].ppl, None);
    }

    #[test]
    fn top_steps_sort_descending_with_index_ties() {
        // PPLs [1.2, 3.0, 2.0, undefined]
        let mut traj = exploration_trajectory("t", &[1.2, 3.0, 2.0]);
        assert_eq!(traj.steps[3].tool_call, None);
        assert_eq!(top_uncertainty_steps(&traj, RegionTag::Exploration, 2), vec![1, 2]);
        assert_eq!(
            top_uncertainty_steps(&traj, RegionTag::Exploration, 10),
            vec![1, 2, 0]
        );
        // Equal PPLs: lower index wins.
        traj = exploration_trajectory("t", &[2.0, 2.0]);
        assert_eq!(top_uncertainty_steps(&traj, RegionTag::Exploration, 1), vec![0]);
    }

    #[test]
    fn single_region_selection_is_global_top_k() {
        let traj = exploration_trajectory("t", &[5.0, 2.0, 7.0]);
        let points =
            select_branch_points(std::slice::from_ref(&traj), RegionStrategy::Exploration, 2)
                .unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(points[0].step_index, 2);
        assert_eq!(points[1].step_index, 0);
        assert!((points[0].ppl - 7.0).abs() < 1e-9);
    }

    #[test]
    fn mixed_alternates_regions_reasoning_first() {
        // Reasoning ranking: s3 > s1; exploration ranking: s0 > s2.
        let steps = vec![
            step_with(0, &[-0.1], Some(&[-2.0])),
            step_with(1, &[-1.5], Some(&[-0.2])),
            step_with(2, &[-0.2], Some(&[-1.0])),
            step_with(3, &[-2.5], Some(&[-0.1])),
            step_with(4, &[], None),
        ];
        let traj = trajectory("t", steps);
        let points =
            select_branch_points(std::slice::from_ref(&traj), RegionStrategy::Mixed, 2).unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!((points[0].step_index, points[0].region), (3, RegionTag::Reasoning));
        assert_eq!((points[1].step_index, points[1].region), (0, RegionTag::Exploration));
    }

    #[test]
    fn pooling_is_global_across_trajectories() {
        let a = exploration_trajectory("a", &[1.1, 1.2]);
        let b = exploration_trajectory("b", &[9.0, 8.0]);
        let points =
            select_branch_points(&[a, b], RegionStrategy::Exploration, 2).unwrap();
        assert!(points.iter().all(|p| p.trajectory_id == "b"));
    }

    #[test]
    fn selection_is_permutation_invariant() {
        let a = exploration_trajectory("a", &[2.0, 4.0]);
        let b = exploration_trajectory("b", &[4.0, 3.0]);
        let fwd = select_branch_points(&[a.clone(), b.clone()], RegionStrategy::Exploration, 3)
            .unwrap();
        let rev = select_branch_points(&[b, a], RegionStrategy::Exploration, 3).unwrap();
        assert_eq!(fwd, rev);
        // The 4.0 tie resolves to the lower step index (trajectory a, step 1
        // carries 4.0 at index 1; trajectory b carries it at index 0).
        assert_eq!(fwd[0].ppl, 4.0);
        assert_eq!((fwd[0].trajectory_id.as_str(), fwd[0].step_index), ("b", 0));
        assert_eq!((fwd[1].trajectory_id.as_str(), fwd[1].step_index), ("a", 1));
    }

    #[test]
    fn insufficient_defined_steps_is_an_error() {
        let traj = exploration_trajectory("t", &[2.0]);
        let err = select_branch_points(std::slice::from_ref(&traj), RegionStrategy::Exploration, 3)
            .unwrap_err();
        assert_eq!(err, UncertaintyError::InsufficientSteps { requested: 3, available: 1 });
    }

    #[test]
    fn confidence_is_geometric_mean_probability() {
        let traj = trajectory("t", vec![step_with(0, &[0.0, 0.0], None)]);
        assert_eq!(trajectory_confidence(&traj).unwrap(), 1.0);

        let traj = trajectory("t", vec![step_with(0, &[-1.0, -1.0], None)]);
        assert!((trajectory_confidence(&traj).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
        assert!((trajectory_confidence(&traj).unwrap() - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn confidence_errors_on_empty_trajectory() {
        let traj = trajectory("t", vec![step_with(0, &[], None)]);
        assert_eq!(trajectory_confidence(&traj), Err(UncertaintyError::EmptyTrajectory));
    }

    #[test]
    fn confidence_is_invariant_under_rechunking() {
        let lps = [-0.3, -0.7, -1.1, -0.2, -0.9];
        let one = trajectory("t", vec![step_with(0, &lps, None)]);
        let split = trajectory(
            "t",
            vec![
                step_with(0, &lps[..2], Some(&[])),
                step_with(1, &lps[2..], None),
            ],
        );
        // Note: step 0's call has zero tokens so all generated tokens match.
        let a = trajectory_confidence(&one).unwrap();
        let b = trajectory_confidence(&split).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
