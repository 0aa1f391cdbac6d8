//! Run harness: task files, persistence, the end-to-end pipeline,
//! evaluation, and metrics emission.

mod eval;
mod metrics;
mod pipeline;

pub use eval::{evaluate, EvalMode, ExactMatchJudge, Judge, ModelJudge, PassRateReport, Predictions};
pub use metrics::{
    emit_metrics, ppl_csv, render_tables, top_uncertainty_csv, CompressionRow, MetricsTables,
    SavingsRow, SavingsSummary, SpeedupReport,
};
pub use pipeline::{
    load_run_record, run_pipeline, task_dir, PipelineBackends, TaskArtifacts, ANSWER_FILE,
    CONFIG_FILE, LEDGER_FILE, REPORTS_FILE, RUN_RECORD_FILE, TRAJECTORIES_FILE,
};

use crate::aggregate::AggregateOptions;
use crate::model::RunConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("storage error: {0}")]
    Storage(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("prediction/task id mismatch: {0}")]
    IdMismatch(String),
    #[error("incomplete run directory: {0}")]
    IncompleteRun(String),
    #[error(transparent)]
    Backend(#[from] crate::backends::BackendError),
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark_tag: Option<String>,
}

/// Parses a JSONL task file, enforcing unique task ids.
pub fn tasks_from_jsonl(text: &str) -> Result<Vec<Task>, HarnessError> {
    let tasks: Vec<Task> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()?;
    let mut seen = std::collections::BTreeSet::new();
    for t in &tasks {
        if !seen.insert(&t.task_id) {
            return Err(HarnessError::Config(format!("duplicate task_id {:?}", t.task_id)));
        }
    }
    Ok(tasks)
}

pub fn tasks_to_jsonl(tasks: &[Task]) -> Result<String, serde_json::Error> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    Ok(out)
}

/// Harness-level knobs beyond the sampler configuration. Serialized as the
/// run's config snapshot, so a resumed run can verify it matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessSettings {
    pub run: RunConfig,
    /// Base seed; per-rollout seeds derive deterministically from it.
    pub seed: i64,
    pub tool_response_token_cap: usize,
    pub aggregate: AggregateOptions,
    /// Tasks in flight at once. The default of 1 keeps tasks sequential.
    pub task_parallelism: usize,
    /// Global in-flight backend-call cap across all tasks; defaults to
    /// task_parallelism x parallelism_p.
    pub global_backend_call_cap: Option<usize>,
}

impl Default for HarnessSettings {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            seed: 42,
            tool_response_token_cap: 4096,
            aggregate: AggregateOptions::default(),
            task_parallelism: 1,
            global_backend_call_cap: None,
        }
    }
}

/// Aggregate metrics of one run, recomputable from persisted artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Single-answer exact-match pass rate over tasks with gold answers.
    pub pass_rate: Option<f64>,
    pub tokens_generated: usize,
    pub tokens_saved: usize,
    pub reuse_factor: Option<f64>,
    /// Report tokens over trajectory context tokens, summed over the run.
    pub compression_ratio: Option<f64>,
}

/// Snapshot of one completed (or partially failed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: HarnessSettings,
    pub tasks: Vec<TaskArtifacts>,
    pub metrics: Metrics,
}
