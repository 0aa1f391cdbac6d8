//! The end-to-end pipeline and its append-only run directory.
//!
//! Layout: `config.json` (settings snapshot), `tasks/<task_id>/` holding
//! `trajectories.jsonl`, `ledger.json`, `reports.jsonl`, `answer.json`, and
//! a final `run_record.json`. Artifacts are written atomically (tmp +
//! rename) and never rewritten; a rerun skips whatever is already complete,
//! so a completed directory is reloaded without any backend call.

use super::{HarnessError, HarnessSettings, Metrics, RunRecord, Task};
use crate::aggregate::{
    aggregate_reports, compress_trajectory, reports_from_jsonl, reports_to_jsonl, FinalAnswer,
    Report,
};
use crate::backends::ModelBackend;
use crate::engine::{
    derive_rollout_seed, execute_parallel, plan_branches, rollout, BranchPlan, CostLedger,
    ExecutionOutput,
};
use crate::model::{from_jsonl, to_jsonl, Trajectory};
use crate::prompts::PromptSet;
use crate::uncertainty::select_branch_points;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use tokio::sync::Semaphore;

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const LEDGER_FILE: &str = "ledger.json";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const ANSWER_FILE: &str = "answer.json";

/// Rollout backends plus the (possibly different) aggregation model.
#[derive(Clone)]
pub struct PipelineBackends {
    pub rollout: crate::engine::Backends,
    pub aggregation_model: Arc<dyn ModelBackend>,
    pub prompts: PromptSet,
}

impl PipelineBackends {
    /// Wires one scripted simulator as model, tools, and aggregation
    /// backend, with the response cap the scenario was compiled for.
    pub fn scripted(sim: Arc<crate::backends::sim::ScriptedBackend>) -> Self {
        let tools = crate::backends::tools::ToolRegistry::standard(
            Arc::clone(&sim) as Arc<dyn crate::backends::SearchProvider>,
            Arc::clone(&sim) as Arc<dyn crate::backends::VisitProvider>,
        );
        let rollout = crate::engine::Backends::new(
            Arc::clone(&sim) as Arc<dyn ModelBackend>,
            tools,
        )
        .with_response_cap(sim.response_cap());
        Self { rollout, aggregation_model: sim, prompts: PromptSet::default() }
    }
}

/// Paths and outcome of one task's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskArtifacts {
    pub task_id: String,
    pub dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Directory holding one task's artifacts.
pub fn task_dir(run_dir: &Path, task_id: &str) -> PathBuf {
    run_dir.join("tasks").join(sanitize(task_id))
}

/// Atomic write: the final name either does not exist or holds a complete
/// artifact. Existing artifacts are left untouched.
fn write_artifact(path: &Path, content: &str) -> Result<(), HarnessError> {
    if path.exists() {
        return Ok(());
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn trajectories_complete(path: &Path, expected: usize) -> bool {
    match std::fs::read_to_string(path) {
        Ok(text) => text.lines().filter(|l| !l.trim().is_empty()).count() == expected,
        Err(_) => false,
    }
}

async fn acquire(
    permits: &Option<Arc<Semaphore>>,
) -> Option<tokio::sync::OwnedSemaphorePermit> {
    match permits {
        Some(sem) => Some(Arc::clone(sem).acquire_owned().await.expect("permit semaphore never closes")),
        None => None,
    }
}

async fn ensure_trajectories(
    task: &Task,
    dir: &Path,
    settings: &HarnessSettings,
    backends: &PipelineBackends,
    permits: &Option<Arc<Semaphore>>,
) -> Result<Vec<Trajectory>, HarnessError> {
    let path = dir.join(TRAJECTORIES_FILE);
    let n = settings.run.sampling_budget_n;
    if trajectories_complete(&path, n) {
        return Ok(from_jsonl(&std::fs::read_to_string(&path)?)?);
    }

    let rollout_backends = backends
        .rollout
        .clone()
        .with_response_cap(settings.tool_response_token_cap)
        .with_call_permits(permits.clone());
    let mut initial = Vec::with_capacity(settings.run.initial_rollouts_m);
    for ordinal in 0..settings.run.initial_rollouts_m {
        let id = format!("{}-r{ordinal:02}", task.task_id);
        let seed = derive_rollout_seed(settings.seed, &task.task_id, ordinal);
        let traj = rollout(&task.task_id, &task.question, id, &settings.run, &rollout_backends, seed)
            .await
            .map_err(|e| HarnessError::Config(format!("rollout failed: {e}")))?;
        initial.push(traj);
    }

    let plan: BranchPlan = if settings.run.sampling_budget_n == settings.run.initial_rollouts_m {
        plan_branches(&[], &settings.run)
    } else {
        let points = select_branch_points(&initial, settings.run.region_strategy, settings.run.branch_top_k)
            .map_err(|e| HarnessError::Config(format!("branch selection failed: {e}")))?;
        plan_branches(&points, &settings.run)
    };
    let ExecutionOutput { trajectories, ledger } =
        execute_parallel(&plan, &initial, &task.question, &settings.run, &rollout_backends)
            .await
            .map_err(|e| HarnessError::Config(format!("branch execution failed: {e}")))?;

    write_artifact(&path, &to_jsonl(&trajectories)?)?;
    write_artifact(&dir.join(LEDGER_FILE), &serde_json::to_string_pretty(&ledger)?)?;
    Ok(trajectories)
}

async fn ensure_reports(
    trajectories: &[Trajectory],
    dir: &Path,
    settings: &HarnessSettings,
    backends: &PipelineBackends,
    permits: &Option<Arc<Semaphore>>,
) -> Result<Vec<Report>, HarnessError> {
    let path = dir.join(REPORTS_FILE);
    if path.exists() {
        return Ok(reports_from_jsonl(&std::fs::read_to_string(&path)?)?);
    }
    // Compressions are independent backend calls; run them concurrently
    // under the same in-flight cap as branch execution.
    let semaphore = Arc::new(Semaphore::new(settings.run.parallelism_p.max(1)));
    let mut handles = Vec::new();
    for traj in trajectories.iter().map(Trajectory::clone) {
        let backend = Arc::clone(&backends.aggregation_model);
        let prompts = backends.prompts.clone();
        let opts = settings.aggregate;
        let semaphore = Arc::clone(&semaphore);
        let permits = permits.clone();
        handles.push(tokio::spawn(async move {
            let _permit = semaphore.acquire_owned().await.expect("semaphore never closes");
            let _call_permit = acquire(&permits).await;
            compress_trajectory(&traj, backend.as_ref(), &prompts, &opts).await
        }));
    }
    let mut reports = Vec::with_capacity(handles.len());
    for handle in handles {
        let report = handle
            .await
            .map_err(|e| HarnessError::Config(format!("compression task join: {e}")))?
            .map_err(|e| HarnessError::Config(format!("compression failed: {e}")))?;
        reports.push(report);
    }
    reports.sort_by(|a, b| a.trajectory_id.cmp(&b.trajectory_id));
    write_artifact(&path, &reports_to_jsonl(&reports)?)?;
    Ok(reports)
}

async fn ensure_answer(
    reports: &[Report],
    dir: &Path,
    settings: &HarnessSettings,
    backends: &PipelineBackends,
    permits: &Option<Arc<Semaphore>>,
) -> Result<FinalAnswer, HarnessError> {
    let path = dir.join(ANSWER_FILE);
    if path.exists() {
        return Ok(serde_json::from_str(&std::fs::read_to_string(&path)?)?);
    }
    let _call_permit = acquire(permits).await;
    let answer = aggregate_reports(
        reports,
        backends.aggregation_model.as_ref(),
        &backends.prompts,
        &settings.aggregate,
    )
    .await
    .map_err(|e| HarnessError::Config(format!("aggregation failed: {e}")))?;
    write_artifact(&path, &serde_json::to_string_pretty(&answer)?)?;
    Ok(answer)
}

fn task_complete(dir: &Path, n: usize) -> bool {
    trajectories_complete(&dir.join(TRAJECTORIES_FILE), n)
        && dir.join(LEDGER_FILE).exists()
        && dir.join(REPORTS_FILE).exists()
        && dir.join(ANSWER_FILE).exists()
}

/// Builds (or verifies) one task's artifacts end to end; failures are
/// captured in the returned record, never raised.
async fn process_task(
    task: Task,
    run_dir: PathBuf,
    settings: HarnessSettings,
    backends: PipelineBackends,
    permits: Option<Arc<Semaphore>>,
) -> TaskArtifacts {
    let dir = task_dir(&run_dir, &task.task_id);
    let rel_dir = dir.strip_prefix(&run_dir).unwrap_or(&dir).to_path_buf();
    if task_complete(&dir, settings.run.sampling_budget_n) {
        return TaskArtifacts { task_id: task.task_id, dir: rel_dir, error: None };
    }
    let outcome: Result<(), HarnessError> = async {
        let trajectories = ensure_trajectories(&task, &dir, &settings, &backends, &permits).await?;
        let reports = ensure_reports(&trajectories, &dir, &settings, &backends, &permits).await?;
        ensure_answer(&reports, &dir, &settings, &backends, &permits).await?;
        Ok(())
    }
    .await;
    match outcome {
        Ok(()) => TaskArtifacts { task_id: task.task_id, dir: rel_dir, error: None },
        Err(e) => {
            tracing::warn!(task = %task.task_id, error = %e, "task failed; recorded and skipped");
            TaskArtifacts { task_id: task.task_id, dir: rel_dir, error: Some(e.to_string()) }
        }
    }
}

/// Loads a previously written run record, if any.
pub fn load_run_record(run_dir: &Path) -> Result<Option<RunRecord>, HarnessError> {
    let path = run_dir.join(RUN_RECORD_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(path)?)?))
}

fn compute_metrics(run_dir: &Path, tasks: &[TaskArtifacts]) -> Result<Metrics, HarnessError> {
    let mut tokens_generated = 0usize;
    let mut prefix_sum = 0usize;
    let mut suffix_sum = 0usize;
    let mut cost: Option<(f64, f64)> = None;
    let mut report_tokens = 0usize;
    let mut context_tokens = 0usize;
    let mut judged = 0usize;
    let mut passed = 0usize;
    let mut golds_seen = false;

    for artifact in tasks {
        if artifact.error.is_some() {
            continue;
        }
        let dir = run_dir.join(&artifact.dir);
        let trajectories = from_jsonl(&std::fs::read_to_string(dir.join(TRAJECTORIES_FILE))?)?;
        let ledger: CostLedger = serde_json::from_str(&std::fs::read_to_string(dir.join(LEDGER_FILE))?)?;
        let reports = reports_from_jsonl(&std::fs::read_to_string(dir.join(REPORTS_FILE))?)?;
        for t in &trajectories {
            tokens_generated += t.generated_token_count;
            context_tokens += t.context_token_count();
        }
        prefix_sum += ledger.prefix_sum();
        suffix_sum += ledger.suffix_sum();
        cost.get_or_insert((ledger.hot_cost_per_token, ledger.cold_cost_per_token));
        report_tokens += reports.iter().map(|r| r.compressed_token_count).sum::<usize>();
    }

    // Pass rate over tasks with golds, judged by canonical exact match.
    let config_tasks: Vec<Task> = read_task_golds(run_dir)?;
    for task in &config_tasks {
        let Some(gold) = &task.gold_answer else { continue };
        golds_seen = true;
        judged += 1;
        let answer_path = task_dir(run_dir, &task.task_id).join(ANSWER_FILE);
        if let Ok(text) = std::fs::read_to_string(answer_path) {
            let answer: FinalAnswer = serde_json::from_str(&text)?;
            if crate::aggregate::canonicalize_answer(&answer.answer)
                == crate::aggregate::canonicalize_answer(gold)
            {
                passed += 1;
            }
        }
    }

    let reuse = if suffix_sum > 0 {
        cost.map(|(hot, cold)| cold / hot * (1.0 + prefix_sum as f64 / suffix_sum as f64))
    } else {
        None
    };
    Ok(Metrics {
        pass_rate: if golds_seen { Some(passed as f64 / judged as f64) } else { None },
        tokens_generated,
        tokens_saved: prefix_sum,
        reuse_factor: reuse,
        compression_ratio: if context_tokens > 0 && report_tokens > 0 {
            Some(report_tokens as f64 / context_tokens as f64)
        } else {
            None
        },
    })
}

const TASKS_SNAPSHOT_FILE: &str = "tasks.jsonl";

fn read_task_golds(run_dir: &Path) -> Result<Vec<Task>, HarnessError> {
    let path = run_dir.join(TASKS_SNAPSHOT_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    super::tasks_from_jsonl(&std::fs::read_to_string(path)?)
}

/// Runs the full pipeline over the task list into `run_dir`: per task, M
/// from-scratch rollouts, branch selection and planning, parallel partial
/// rollouts, per-trajectory compression, and report aggregation, persisting
/// every artifact. Per-task failures are recorded and skipped; rerunning
/// over the same directory and settings skips completed work.
pub async fn run_pipeline(
    tasks: &[Task],
    settings: &HarnessSettings,
    backends: &PipelineBackends,
    run_dir: &Path,
) -> Result<RunRecord, HarnessError> {
    settings.run.validate().map_err(HarnessError::Config)?;
    std::fs::create_dir_all(run_dir)?;

    // Settings snapshot: a resumed run must match it exactly.
    let snapshot_path = run_dir.join(CONFIG_FILE);
    let snapshot = serde_json::to_string_pretty(settings)?;
    if snapshot_path.exists() {
        let existing = std::fs::read_to_string(&snapshot_path)?;
        let existing_settings: HarnessSettings = serde_json::from_str(&existing)?;
        if existing_settings != *settings {
            return Err(HarnessError::Config(
                "run directory was created with different settings".into(),
            ));
        }
    } else {
        write_artifact(&snapshot_path, &snapshot)?;
    }
    write_artifact(&run_dir.join(TASKS_SNAPSHOT_FILE), &super::tasks_to_jsonl(tasks)?)?;

    if let Some(record) = load_run_record(run_dir)? {
        tracing::info!(run = %record.run_id, "run record already present; nothing to do");
        return Ok(record);
    }

    // Tasks run sequentially by default; an opt-in task parallelism
    // multiplies with parallelism_p under a global backend-call cap.
    let permits: Option<Arc<Semaphore>> =
        if settings.task_parallelism > 1 || settings.global_backend_call_cap.is_some() {
            let cap = settings
                .global_backend_call_cap
                .unwrap_or(settings.task_parallelism.max(1) * settings.run.parallelism_p)
                .max(1);
            Some(Arc::new(Semaphore::new(cap)))
        } else {
            None
        };

    let artifacts: Vec<TaskArtifacts> = if settings.task_parallelism <= 1 {
        let mut out = Vec::with_capacity(tasks.len());
        for task in tasks {
            out.push(process_task(task.clone(), run_dir.to_path_buf(), settings.clone(), backends.clone(), permits.clone()).await);
        }
        out
    } else {
        let gate = Arc::new(Semaphore::new(settings.task_parallelism));
        let handles: Vec<_> = tasks
            .iter()
            .map(|task| {
                let task = task.clone();
                let run_dir = run_dir.to_path_buf();
                let settings = settings.clone();
                let backends = backends.clone();
                let permits = permits.clone();
                let gate = Arc::clone(&gate);
                tokio::spawn(async move {
                    let _slot = gate.acquire_owned().await.expect("task gate never closes");
                    process_task(task, run_dir, settings, backends, permits).await
                })
            })
            .collect();
        let mut out = Vec::with_capacity(handles.len());
        for handle in handles {
            out.push(handle.await.map_err(|e| HarnessError::Config(format!("task join: {e}")))?);
        }
        out
    };

    let metrics = compute_metrics(run_dir, &artifacts)?;
    let record = RunRecord {
        run_id: run_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into()),
        config: settings.clone(),
        tasks: artifacts,
        metrics,
    };
    write_artifact(&run_dir.join(RUN_RECORD_FILE), &serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}
