//! The three answer-selection baselines: majority vote, confidence-weighted
//! vote, and most-tool-calls. All are pure functions; permuting inputs only
//! changes output through the documented first-seen tie-breaks.

use super::{AggregateError, FinalAnswer, SelectionMethod};
use crate::model::Trajectory;
use crate::uncertainty::trajectory_confidence;
use serde::{Deserialize, Serialize};

/// Answer equivalence for voting: trim, strip trailing punctuation, collapse
/// whitespace, casefold. A model-judged equivalence hook can replace this at
/// evaluation time; voting always uses the canonical rule.
pub fn canonicalize_answer(answer: &str) -> String {
    let trimmed = answer.trim().trim_end_matches(['.', ',', '!', '?', ';', ':']);
    trimmed
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

struct Group {
    /// First-seen original surface form, the group's representative.
    representative: String,
    count: usize,
    confidence_sum: f64,
    first_index: usize,
    member_indices: Vec<usize>,
}

fn group_answers(answers: &[String], confidences: &[f64]) -> Vec<Group> {
    let mut groups: Vec<(String, Group)> = Vec::new();
    for (i, answer) in answers.iter().enumerate() {
        let canon = canonicalize_answer(answer);
        let conf = confidences.get(i).copied().unwrap_or(0.0);
        match groups.iter_mut().find(|(c, _)| *c == canon) {
            Some((_, g)) => {
                g.count += 1;
                g.confidence_sum += conf;
                g.member_indices.push(i);
            }
            None => groups.push((
                canon,
                Group {
                    representative: answer.clone(),
                    count: 1,
                    confidence_sum: conf,
                    first_index: i,
                    member_indices: vec![i],
                },
            )),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

fn finish(
    winner: &Group,
    method: SelectionMethod,
    justification: String,
    ids: Option<&[String]>,
) -> FinalAnswer {
    let inputs_used = match ids {
        Some(ids) => winner.member_indices.iter().map(|i| ids[*i].clone()).collect(),
        None => winner.member_indices.iter().map(|i| i.to_string()).collect(),
    };
    FinalAnswer { answer: winner.representative.clone(), justification, method, inputs_used }
}

/// Most frequent canonical answer; ties go to the highest summed trajectory
/// confidence, then to the first-seen group. `confidences` may be empty when
/// no confidence signal exists; otherwise it must align with `answers`.
pub fn majority_vote(answers: &[String], confidences: &[f64]) -> Result<FinalAnswer, AggregateError> {
    majority_vote_with_ids(answers, confidences, None)
}

fn majority_vote_with_ids(
    answers: &[String],
    confidences: &[f64],
    ids: Option<&[String]>,
) -> Result<FinalAnswer, AggregateError> {
    if answers.is_empty() {
        return Err(AggregateError::NoAnswers);
    }
    if !confidences.is_empty() && confidences.len() != answers.len() {
        return Err(AggregateError::LengthMismatch {
            answers: answers.len(),
            confidences: confidences.len(),
        });
    }
    let groups = group_answers(answers, confidences);
    let winner = groups
        .iter()
        .max_by(|a, b| {
            a.count
                .cmp(&b.count)
                .then(a.confidence_sum.partial_cmp(&b.confidence_sum).unwrap())
                .then(b.first_index.cmp(&a.first_index))
        })
        .unwrap();
    let justification = format!(
        "most frequent answer: {} of {} votes",
        winner.count,
        answers.len()
    );
    Ok(finish(winner, SelectionMethod::MajorityVote, justification, ids))
}

/// Canonical groups scored by summed confidence; highest score wins, ties go
/// to the first-seen group. Confidences must align with answers.
pub fn weighted_vote(answers: &[String], confidences: &[f64]) -> Result<FinalAnswer, AggregateError> {
    weighted_vote_with_ids(answers, confidences, None)
}

fn weighted_vote_with_ids(
    answers: &[String],
    confidences: &[f64],
    ids: Option<&[String]>,
) -> Result<FinalAnswer, AggregateError> {
    if answers.is_empty() {
        return Err(AggregateError::NoAnswers);
    }
    if confidences.len() != answers.len() {
        return Err(AggregateError::LengthMismatch {
            answers: answers.len(),
            confidences: confidences.len(),
        });
    }
    let groups = group_answers(answers, confidences);
    let winner = groups
        .iter()
        .max_by(|a, b| {
            a.confidence_sum
                .partial_cmp(&b.confidence_sum)
                .unwrap()
                .then(b.first_index.cmp(&a.first_index))
        })
        .unwrap();
    let justification = format!("highest summed confidence: {:.6}", winner.confidence_sum);
    Ok(finish(winner, SelectionMethod::WeightedVote, justification, ids))
}

/// Answer of the trajectory with the most environment interactions (steps
/// carrying a tool call); ties go to the higher trajectory confidence, then
/// the lowest trajectory id. Unanswered trajectories cannot win.
pub fn max_tool_call_select(trajectories: &[Trajectory]) -> Result<FinalAnswer, AggregateError> {
    let mut candidates: Vec<(&Trajectory, usize, f64)> = trajectories
        .iter()
        .filter(|t| t.answered())
        .map(|t| {
            let conf = trajectory_confidence(t).unwrap_or(0.0);
            (t, t.tool_call_count(), conf)
        })
        .collect();
    if candidates.is_empty() {
        return Err(AggregateError::NoAnswers);
    }
    candidates.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(b.2.partial_cmp(&a.2).unwrap())
            .then(a.0.id.cmp(&b.0.id))
    });
    let (winner, calls, _) = &candidates[0];
    Ok(FinalAnswer {
        answer: winner.final_answer.clone().unwrap(),
        justification: format!("most environment interactions: {calls} tool calls"),
        method: SelectionMethod::MaxToolCall,
        inputs_used: vec![winner.id.clone()],
    })
}

/// Which baseline to run over a trajectory set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteMethod {
    Majority,
    Weighted,
    MaxTool,
}

/// Runs a baseline over full trajectories, using their ids and confidences.
/// Trajectories without a final answer do not vote.
pub fn vote_over_trajectories(
    method: VoteMethod,
    trajectories: &[Trajectory],
) -> Result<FinalAnswer, AggregateError> {
    if method == VoteMethod::MaxTool {
        return max_tool_call_select(trajectories);
    }
    let answered: Vec<&Trajectory> = trajectories.iter().filter(|t| t.answered()).collect();
    if answered.is_empty() {
        return Err(AggregateError::NoAnswers);
    }
    let answers: Vec<String> = answered.iter().map(|t| t.final_answer.clone().unwrap()).collect();
    let confidences: Vec<f64> = answered
        .iter()
        .map(|t| trajectory_confidence(t).unwrap_or(0.0))
        .collect();
    let ids: Vec<String> = answered.iter().map(|t| t.id.clone()).collect();
    match method {
        VoteMethod::Majority => majority_vote_with_ids(&answers, &confidences, Some(&ids)),
        VoteMethod::Weighted => weighted_vote_with_ids(&answers, &confidences, Some(&ids)),
        VoteMethod::MaxTool => unreachable!(),
    }
}
