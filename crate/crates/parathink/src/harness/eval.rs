//! Pass-rate evaluation with a pluggable judge.
//!
//! NoScaling scores each task as the fraction of its N trajectories whose
//! final answer the judge accepts; parallel-thinking methods produce one
//! final answer per task and are scored on that single output.

use super::{HarnessError, Task};
use crate::aggregate::{canonicalize_answer, FinalAnswer};
use crate::backends::{ChatMessage, ModelBackend, ModelRequest, Role};
use crate::model::Trajectory;
use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Average pass rate over the N independent rollouts of each task.
    NoScaling,
    /// Pass rate of the single final answer of each task.
    SingleAnswer,
}

#[async_trait]
pub trait Judge: Send + Sync {
    async fn accept(&self, task: &Task, answer: &str) -> Result<bool, HarnessError>;
}

/// Default judge: canonical exact match against the gold answer. Scripted
/// acceptance runs use only this, so CI needs no live model.
pub struct ExactMatchJudge;

#[async_trait]
impl Judge for ExactMatchJudge {
    async fn accept(&self, task: &Task, answer: &str) -> Result<bool, HarnessError> {
        let gold = task.gold_answer.as_ref().ok_or_else(|| {
            HarnessError::Config(format!("task {:?} has no gold answer to judge against", task.task_id))
        })?;
        Ok(canonicalize_answer(answer) == canonicalize_answer(gold))
    }
}

/// Model-backed judge. The prompt is supplied externally (benchmark-official
/// prompts are not shipped here); placeholders: {question}, {gold},
/// {answer}. The model must reply starting with YES or NO.
pub struct ModelJudge {
    pub backend: Arc<dyn ModelBackend>,
    pub prompt_template: String,
}

#[async_trait]
impl Judge for ModelJudge {
    async fn accept(&self, task: &Task, answer: &str) -> Result<bool, HarnessError> {
        let gold = task.gold_answer.clone().unwrap_or_default();
        let prompt = self
            .prompt_template
            .replace("{question}", &task.question)
            .replace("{gold}", &gold)
            .replace("{answer}", answer);
        let response = self
            .backend
            .chat_generate(ModelRequest {
                messages: vec![ChatMessage { role: Role::User, content: prompt }],
                tool_schemas: vec![],
                temperature: 0.0,
                seed: 0,
                logprobs_required: false,
                max_tokens: 16,
            })
            .await?;
        let verdict = response.stream.content().trim_start().to_uppercase();
        Ok(verdict.starts_with("YES"))
    }
}

/// Predictions under evaluation, keyed by task id.
#[derive(Debug, Clone)]
pub enum Predictions {
    Trajectories(BTreeMap<String, Vec<Trajectory>>),
    Answers(BTreeMap<String, FinalAnswer>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRateReport {
    pub mode: EvalMode,
    pub per_task: Vec<(String, f64)>,
    pub overall: f64,
}

/// Scores predictions against the gold-labeled tasks. NoScaling requires
/// trajectory sets, SingleAnswer requires final answers; ids must align
/// exactly with the task list.
pub async fn evaluate(
    predictions: &Predictions,
    tasks: &[Task],
    judge: &dyn Judge,
    mode: EvalMode,
) -> Result<PassRateReport, HarnessError> {
    let mut per_task = Vec::with_capacity(tasks.len());
    match (mode, predictions) {
        (EvalMode::NoScaling, Predictions::Trajectories(by_task)) => {
            check_ids(tasks, by_task.keys())?;
            for task in tasks {
                let trajectories = &by_task[&task.task_id];
                if trajectories.is_empty() {
                    return Err(HarnessError::IdMismatch(format!(
                        "task {:?} has an empty trajectory set",
                        task.task_id
                    )));
                }
                let mut accepted = 0usize;
                for t in trajectories {
                    if let Some(answer) = &t.final_answer {
                        if judge.accept(task, answer).await? {
                            accepted += 1;
                        }
                    }
                }
                per_task.push((task.task_id.clone(), accepted as f64 / trajectories.len() as f64));
            }
        }
        (EvalMode::SingleAnswer, Predictions::Answers(by_task)) => {
            check_ids(tasks, by_task.keys())?;
            for task in tasks {
                let pass = judge.accept(task, &by_task[&task.task_id].answer).await?;
                per_task.push((task.task_id.clone(), if pass { 1.0 } else { 0.0 }));
            }
        }
        (mode, _) => {
            return Err(HarnessError::Config(format!(
                "{mode:?} mode does not match the supplied prediction shape"
            )))
        }
    }
    let overall = per_task.iter().map(|(_, p)| p).sum::<f64>() / per_task.len().max(1) as f64;
    Ok(PassRateReport { mode, per_task, overall })
}

fn check_ids<'a>(
    tasks: &[Task],
    prediction_ids: impl Iterator<Item = &'a String>,
) -> Result<(), HarnessError> {
    let task_ids: std::collections::BTreeSet<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    let pred_ids: std::collections::BTreeSet<&str> = prediction_ids.map(String::as_str).collect();
    if task_ids != pred_ids {
        let missing: Vec<&&str> = task_ids.difference(&pred_ids).collect();
        let extra: Vec<&&str> = pred_ids.difference(&task_ids).collect();
        return Err(HarnessError::IdMismatch(format!("missing {missing:?}, extra {extra:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::SelectionMethod;
    use crate::model::{Origin, TRAJECTORY_SCHEMA_VERSION};

    fn task(id: &str, gold: &str) -> Task {
        Task { task_id: id.into(), question: "q".into(), gold_answer: Some(gold.into()), benchmark_tag: None }
    }

    fn answered(task_id: &str, id: &str, answer: Option<&str>) -> Trajectory {
        Trajectory {
            schema: TRAJECTORY_SCHEMA_VERSION,
            id: id.into(),
            task_id: task_id.into(),
            origin: Origin::FromScratch,
            steps: vec![],
            final_answer: answer.map(str::to_string),
            generated_token_count: 0,
            prompt_token_count: 0,
            sampling_seed: 0,
        }
    }

    #[tokio::test]
    async fn no_scaling_is_the_fraction_of_accepted_rollouts() {
        let tasks = vec![task("t1", "G")];
        let mut by_task = BTreeMap::new();
        by_task.insert(
            "t1".to_string(),
            vec![
                answered("t1", "a", Some("G")),
                answered("t1", "b", Some("g.")),
                answered("t1", "c", Some("wrong")),
                answered("t1", "d", None),
            ],
        );
        let report = evaluate(&Predictions::Trajectories(by_task), &tasks, &ExactMatchJudge, EvalMode::NoScaling)
            .await
            .unwrap();
        assert!((report.overall - 0.5).abs() < 1e-12);
    }

    #[tokio::test]
    async fn single_answer_counts_tasks() {
        let tasks = vec![task("t1", "A"), task("t2", "B"), task("t3", "C"), task("t4", "D")];
        let mut by_task = BTreeMap::new();
        for (id, answer) in [("t1", "A"), ("t2", "x"), ("t3", "C"), ("t4", "y")] {
            by_task.insert(
                id.to_string(),
                FinalAnswer {
                    answer: answer.into(),
                    justification: String::new(),
                    method: SelectionMethod::Aggregation,
                    inputs_used: vec![],
                },
            );
        }
        let report = evaluate(&Predictions::Answers(by_task), &tasks, &ExactMatchJudge, EvalMode::SingleAnswer)
            .await
            .unwrap();
        assert!((report.overall - 0.5).abs() < 1e-12);
    }

    #[tokio::test]
    async fn id_mismatch_is_reported() {
        let tasks = vec![task("t1", "A")];
        let by_task = BTreeMap::from([(
            "other".to_string(),
            vec![answered("other", "a", Some("A"))],
        )]);
        let err = evaluate(&Predictions::Trajectories(by_task), &tasks, &ExactMatchJudge, EvalMode::NoScaling)
            .await
            .unwrap_err();
        assert!(matches!(err, HarnessError::IdMismatch(_)));
    }
}
