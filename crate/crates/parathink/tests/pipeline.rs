//! Cross-module integration tests against the scripted scenarios: rollout
//! transcripts, branch execution, compression fixtures, pipeline runs, and
//! resume behaviour.

use parathink::aggregate::{compress_trajectory, extract_entity_graph, AggregateOptions};
use parathink::backends::sim::{scenarios, NodeAction, ScriptedBackend};
use parathink::backends::ModelBackend;
use parathink::engine::{
    derive_branch_seed, derive_rollout_seed, execute_parallel, partial_rollout, plan_branches,
    prefix_generated_tokens, rollout,
};
use parathink::harness::{
    run_pipeline, task_dir, HarnessSettings, PipelineBackends, Task, ANSWER_FILE, REPORTS_FILE,
    TRAJECTORIES_FILE,
};
use parathink::model::{from_jsonl, to_jsonl, validate_trajectory, Origin, RegionTag};
use parathink::prompts::PromptSet;
use parathink::uncertainty::{region_ppl_series, select_branch_points, trajectory_confidence};
use parathink::{RunConfig, Trajectory};
use std::path::Path;
use std::sync::Arc;

const BASE_SEED: i64 = scenarios::DEFAULT_BASE_SEED;

fn scripted(sim: ScriptedBackend) -> (Arc<ScriptedBackend>, PipelineBackends) {
    let sim = Arc::new(sim);
    let backends = PipelineBackends::scripted(Arc::clone(&sim));
    (sim, backends)
}

fn settings(run: RunConfig) -> HarnessSettings {
    HarnessSettings { run, seed: BASE_SEED, ..HarnessSettings::default() }
}

fn script_tasks(sim: &ScriptedBackend) -> Vec<Task> {
    sim.script()
        .tasks
        .iter()
        .map(|t| Task {
            task_id: t.task_id.clone(),
            question: t.question.clone(),
            gold_answer: t.gold_answer.clone(),
            benchmark_tag: None,
        })
        .collect()
}

async fn roll_basic() -> (Arc<ScriptedBackend>, Trajectory) {
    let (sim, backends) = scripted(scenarios::basic());
    let task = &sim.script().tasks[0];
    let traj = rollout(
        &task.task_id,
        &task.question,
        format!("{}-r00", task.task_id),
        &scenarios::config_for("basic").unwrap(),
        &backends.rollout,
        7,
    )
    .await
    .unwrap();
    (sim, traj)
}

#[tokio::test]
async fn basic_rollout_matches_the_scripted_transcript() {
    let (sim, traj) = roll_basic().await;
    assert_eq!(traj.steps.len(), 4);
    assert_eq!(traj.final_answer.as_deref(), Some("42"));
    assert!(validate_trajectory(&traj).is_empty());

    // Step-by-step against the fixture's own annotations.
    let task = &sim.script().tasks[0];
    for (step, node_id) in traj.steps.iter().zip(["n0", "n1", "n2", "n3"]) {
        let node = &task.nodes[node_id];
        let expected_think: Vec<(String, f64)> =
            node.think.iter().map(|t| (t.0.clone(), t.1)).collect();
        let think_prefix: Vec<(String, f64)> = step.reasoning_tokens
            [..expected_think.len()]
            .iter()
            .map(|t| (t.text.clone(), t.logprob))
            .collect();
        assert_eq!(think_prefix, expected_think, "think tokens of {node_id}");
        match &node.action {
            NodeAction::ToolCall { tool, arguments, payload_logprobs } => {
                let call = step.tool_call.as_ref().unwrap();
                assert_eq!(&call.tool_name, tool);
                assert_eq!(&call.arguments, arguments);
                assert_eq!(call.raw_tokens.len(), payload_logprobs.len());
                assert!(step.tool_response.is_some());
            }
            NodeAction::Final { .. } => assert!(step.is_terminal),
        }
    }
}

#[tokio::test]
async fn basic_step_zero_has_the_documented_shape() {
    let (_, traj) = roll_basic().await;
    let step = &traj.steps[0];
    assert_eq!(step.reasoning_tokens.len(), 7);
    assert_eq!(step.tool_call.as_ref().unwrap().raw_tokens.len(), 9);
    assert!(step.reasoning_tokens.iter().all(|t| t.region == RegionTag::Reasoning));
    assert!(step
        .tool_call
        .as_ref()
        .unwrap()
        .raw_tokens
        .iter()
        .all(|t| t.region == RegionTag::Exploration));
}

#[tokio::test]
async fn basic_series_and_confidence_match_jsonl_oracles() {
    let (_, traj) = roll_basic().await;
    // Serialize, reload, and recompute from the flat logprob stream.
    let text = to_jsonl(std::slice::from_ref(&traj)).unwrap();
    let reloaded = &from_jsonl(&text).unwrap()[0];

    let line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let mut logprobs = Vec::new();
    for step in line["steps"].as_array().unwrap() {
        for tok in step["reasoning_tokens"].as_array().unwrap() {
            logprobs.push(tok["logprob"].as_f64().unwrap());
        }
        if let Some(call) = step["tool_call"].as_object() {
            for tok in call["raw_tokens"].as_array().unwrap() {
                logprobs.push(tok["logprob"].as_f64().unwrap());
            }
        }
    }
    let oracle = (logprobs.iter().sum::<f64>() / logprobs.len() as f64).exp();
    let confidence = trajectory_confidence(reloaded).unwrap();
    assert!((confidence - oracle).abs() < 1e-12);

    // The series is the per-step computation, element-wise.
    let series = region_ppl_series(reloaded, RegionTag::Exploration);
    assert_eq!(series.len(), 4);
    assert_eq!(series[3].ppl, None); // terminal step has no call
    for (i, entry) in series.iter().enumerate() {
        let expected =
            parathink::uncertainty::step_ppl(&reloaded.id, &reloaded.steps[i], RegionTag::Exploration);
        assert_eq!(*entry, expected);
    }
}

#[tokio::test]
async fn branch_prefix_accounting_matches_the_parent() {
    let (sim, backends) = scripted(scenarios::branchy(BASE_SEED));
    let task = &sim.script().tasks[0];
    let config = scenarios::branchy_config();
    let seed = derive_rollout_seed(BASE_SEED, &task.task_id, 0);
    let parent = rollout(
        &task.task_id,
        &task.question,
        format!("{}-r00", task.task_id),
        &config,
        &backends.rollout,
        seed,
    )
    .await
    .unwrap();

    let per_step: Vec<usize> = parent.steps.iter().map(|s| s.generated_token_count()).collect();
    assert_eq!(prefix_generated_tokens(&parent, 2), per_step[0] + per_step[1]);

    let branch_seed = derive_branch_seed(parent.sampling_seed, 2, 0);
    let branch = partial_rollout(
        &parent,
        2,
        &task.question,
        format!("{}-s002-b00", parent.id),
        &config,
        &backends.rollout,
        branch_seed,
    )
    .await
    .unwrap();
    assert_eq!(branch.steps[..2], parent.steps[..2]);
    assert_eq!(
        branch.origin,
        Origin::Branch { parent_id: parent.id.clone(), branch_step_index: 2 }
    );
    // Token conservation: prefix + newly generated = branch total.
    let prefix = prefix_generated_tokens(&parent, 2);
    let suffix: usize = branch.steps[2..].iter().map(|s| s.generated_token_count()).sum();
    assert_eq!(prefix + suffix, branch.generated_token_count);

    // Same branch point, different seed: identical prefix, different suffix.
    let other = partial_rollout(
        &parent,
        2,
        &task.question,
        format!("{}-s002-b01", parent.id),
        &config,
        &backends.rollout,
        derive_branch_seed(parent.sampling_seed, 2, 1),
    )
    .await
    .unwrap();
    assert_eq!(other.steps[..2], branch.steps[..2]);
    assert_ne!(other.final_answer, branch.final_answer);
}

#[tokio::test]
async fn empty_plan_returns_the_initial_set() {
    let (sim, backends) = scripted(scenarios::basic());
    let task = &sim.script().tasks[0];
    let config = RunConfig { sampling_budget_n: 1, initial_rollouts_m: 1, ..RunConfig::default() };
    let traj = rollout(
        &task.task_id,
        &task.question,
        format!("{}-r00", task.task_id),
        &config,
        &backends.rollout,
        7,
    )
    .await
    .unwrap();
    let plan = plan_branches(&[], &config);
    let out = execute_parallel(&plan, std::slice::from_ref(&traj), &task.question, &config, &backends.rollout)
        .await
        .unwrap();
    assert_eq!(out.trajectories.len(), 1);
    assert_eq!(out.ledger.branches.len(), 1);
    assert_eq!(out.ledger.branches[0].prefix_tokens, 0);
}

async fn run_branchy_task(parallelism: usize) -> (Arc<ScriptedBackend>, parathink::engine::ExecutionOutput) {
    let (sim, backends) = scripted(scenarios::branchy(BASE_SEED));
    let task = &sim.script().tasks[0];
    let config = RunConfig { parallelism_p: parallelism, ..scenarios::branchy_config() };
    let seed = derive_rollout_seed(BASE_SEED, &task.task_id, 0);
    let parent = rollout(
        &task.task_id,
        &task.question,
        format!("{}-r00", task.task_id),
        &config,
        &backends.rollout,
        seed,
    )
    .await
    .unwrap();
    let points =
        select_branch_points(std::slice::from_ref(&parent), config.region_strategy, config.branch_top_k)
            .unwrap();
    let plan = plan_branches(&points, &config);
    assert_eq!(plan.total_branches, 7);
    let out = execute_parallel(&plan, &[parent], &task.question, &config, &backends.rollout)
        .await
        .unwrap();
    (sim, out)
}

#[tokio::test]
async fn branchy_run_fills_the_budget_exactly() {
    let (_, out) = run_branchy_task(4).await;
    assert_eq!(out.trajectories.len(), 8);
    let scratch = out
        .trajectories
        .iter()
        .filter(|t| t.origin == Origin::FromScratch)
        .count();
    assert_eq!(scratch, 1);
    for t in &out.trajectories {
        assert!(validate_trajectory(t).is_empty(), "{}: {:?}", t.id, validate_trajectory(t));
    }
}

#[tokio::test]
async fn scheduling_interleaving_does_not_change_results() {
    let (_, serial) = run_branchy_task(1).await;
    let (_, parallel) = run_branchy_task(4).await;
    let a = to_jsonl(&serial.trajectories).unwrap();
    let b = to_jsonl(&parallel.trajectories).unwrap();
    assert_eq!(a, b);
    assert_eq!(serial.ledger, parallel.ledger);
}

#[tokio::test]
async fn compression_fixture_round_trips_through_the_backend() {
    let (sim, traj) = roll_basic().await;
    let report = compress_trajectory(
        &traj,
        sim.as_ref() as &dyn ModelBackend,
        &PromptSet::default(),
        &AggregateOptions::default(),
    )
    .await
    .unwrap();
    assert!(!report.degraded);
    assert_eq!(report.candidate_answer, "42");
    assert_eq!(report.trajectory_id, traj.id);
    assert_eq!(report.solution_methods.len(), 3);
    assert!(report.compressed_token_count > 0);
    assert!(report.compressed_token_count < traj.context_token_count());
}

#[tokio::test]
async fn extraction_fixture_is_returned_exactly() {
    let (sim, traj) = roll_basic().await;
    let graph = extract_entity_graph(&traj, None, sim.as_ref() as &dyn ModelBackend, &PromptSet::default())
        .await
        .unwrap();
    let expected = sim.script().tasks[0].nodes["n3"].entity_graph.clone().unwrap();
    assert_eq!(graph, expected);
    // Gold-conditioned extraction is scripted too.
    let with_gold =
        extract_entity_graph(&traj, Some("42"), sim.as_ref() as &dyn ModelBackend, &PromptSet::default())
            .await
            .unwrap();
    assert_eq!(with_gold, expected);
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[tokio::test]
async fn two_task_pipeline_produces_the_expected_artifact_counts() {
    let (sim, backends) = scripted(scenarios::branchy(BASE_SEED));
    let tasks = script_tasks(&sim);
    assert_eq!(tasks.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let record = run_pipeline(&tasks, &settings(scenarios::branchy_config()), &backends, dir.path())
        .await
        .unwrap();
    assert!(record.tasks.iter().all(|t| t.error.is_none()));

    let mut trajectories = 0;
    let mut reports = 0;
    let mut answers = 0;
    for task in &tasks {
        let tdir = task_dir(dir.path(), &task.task_id);
        trajectories += read(&tdir.join(TRAJECTORIES_FILE)).lines().count();
        reports += read(&tdir.join(REPORTS_FILE)).lines().count();
        answers += usize::from(tdir.join(ANSWER_FILE).exists());
    }
    assert_eq!(trajectories, 16);
    assert_eq!(reports, 16);
    assert_eq!(answers, 2);
    assert!(record.metrics.tokens_saved > 0);

    // Resume: a completed directory triggers no new backend calls.
    let calls_before = sim.total_calls();
    let again = run_pipeline(&tasks, &settings(scenarios::branchy_config()), &backends, dir.path())
        .await
        .unwrap();
    assert_eq!(sim.total_calls(), calls_before);
    assert_eq!(again, record);
}

#[tokio::test]
async fn degenerate_single_rollout_pipeline() {
    let (sim, backends) = scripted(scenarios::basic());
    let tasks = script_tasks(&sim);
    let config = RunConfig { sampling_budget_n: 1, initial_rollouts_m: 1, ..RunConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let record = run_pipeline(&tasks, &settings(config), &backends, dir.path()).await.unwrap();
    assert!(record.tasks[0].error.is_none());
    let tdir = task_dir(dir.path(), &tasks[0].task_id);
    assert_eq!(read(&tdir.join(TRAJECTORIES_FILE)).lines().count(), 1);
    let answer: parathink::FinalAnswer = serde_json::from_str(&read(&tdir.join(ANSWER_FILE))).unwrap();
    assert_eq!(answer.answer, "42");
    assert_eq!(record.metrics.pass_rate, Some(1.0));
}

#[tokio::test]
async fn mismatched_settings_refuse_to_resume() {
    let (sim, backends) = scripted(scenarios::basic());
    let tasks = script_tasks(&sim);
    let config = RunConfig { sampling_budget_n: 1, initial_rollouts_m: 1, ..RunConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&tasks, &settings(config.clone()), &backends, dir.path()).await.unwrap();

    let other = HarnessSettings { seed: BASE_SEED + 1, ..settings(config) };
    let err = run_pipeline(&tasks, &other, &backends, dir.path()).await.unwrap_err();
    assert!(err.to_string().contains("different settings"));
}

mod compression_retry {
    use super::*;
    use parathink::aggregate::ReportBody;
    use parathink::backends::sim::{ChatFixture, FixtureMessage, ScenarioScript};
    use parathink::model::{Step, Token, ToolCall, ToolResponse, TRAJECTORY_SCHEMA_VERSION};
    use parathink::prompts::{compression_messages, compression_repair_messages};

    fn tiny_trajectory() -> Trajectory {
        let steps = vec![
            Step {
                index: 0,
                reasoning_tokens: vec![Token::new("probe", -0.2, RegionTag::Reasoning)],
                tool_call: Some(ToolCall {
                    tool_name: "search".into(),
                    arguments: serde_json::json!({"queries": ["q"]}),
                    raw_tokens: vec![Token::new("{}", -0.1, RegionTag::Exploration)],
                }),
                tool_response: Some(ToolResponse {
                    content: "hit".into(),
                    token_count: 1,
                    error_flag: false,
                }),
                is_terminal: false,
            },
            Step {
                index: 1,
                reasoning_tokens: vec![Token::new("done", -0.1, RegionTag::Reasoning)],
                tool_call: None,
                tool_response: None,
                is_terminal: true,
            },
        ];
        let generated = steps.iter().map(|s| s.generated_token_count()).sum();
        Trajectory {
            schema: TRAJECTORY_SCHEMA_VERSION,
            id: "tiny-r00".into(),
            task_id: "tiny".into(),
            origin: Origin::FromScratch,
            steps,
            final_answer: Some("42".into()),
            generated_token_count: generated,
            prompt_token_count: 3,
            sampling_seed: 1,
        }
    }

    fn fixture(messages: &[parathink::backends::ChatMessage], reply: &str) -> ChatFixture {
        ChatFixture {
            messages: messages
                .iter()
                .map(|m| FixtureMessage { role: m.role, content: m.content.clone() })
                .collect(),
            reply: reply.to_string(),
        }
    }

    fn parse_reason(text: &str) -> String {
        let err = serde_json::from_str::<ReportBody>(text.trim()).unwrap_err();
        format!("output is not a valid report object: {err}")
    }

    #[tokio::test]
    async fn malformed_twice_then_valid_is_not_degraded() {
        let prompts = PromptSet::default();
        let traj = tiny_trajectory();
        let original = compression_messages(&prompts, &traj.steps, traj.final_answer.as_deref());

        let bad_a = "not a report";
        let bad_b = "{\"still\": \"wrong\"}";
        let good = serde_json::to_string(&ReportBody {
            solution_planning: "one lookup".into(),
            solution_methods: vec![],
            final_reasoning: "the hit settles it".into(),
            candidate_answer: "42".into(),
        })
        .unwrap();

        let mut script = ScenarioScript::new("retry");
        script.chat.push(fixture(&original, bad_a));
        script.chat.push(fixture(
            &compression_repair_messages(&prompts, &original, bad_a, &parse_reason(bad_a)),
            bad_b,
        ));
        script.chat.push(fixture(
            &compression_repair_messages(&prompts, &original, bad_b, &parse_reason(bad_b)),
            &good,
        ));
        let sim = Arc::new(ScriptedBackend::from_script(script).unwrap());

        let report = compress_trajectory(
            &traj,
            sim.as_ref() as &dyn ModelBackend,
            &prompts,
            &AggregateOptions::default(),
        )
        .await
        .unwrap();
        assert!(!report.degraded);
        assert_eq!(report.candidate_answer, "42");
        assert_eq!(sim.chat_call_count(), 3);
    }

    #[tokio::test]
    async fn persistent_malformed_output_degrades_after_repairs() {
        let prompts = PromptSet::default();
        let traj = tiny_trajectory();
        let original = compression_messages(&prompts, &traj.steps, traj.final_answer.as_deref());
        let bad = "never json";

        let mut script = ScenarioScript::new("retry-degrade");
        script.chat.push(fixture(&original, bad));
        script.chat.push(fixture(
            &compression_repair_messages(&prompts, &original, bad, &parse_reason(bad)),
            bad,
        ));
        let sim = Arc::new(ScriptedBackend::from_script(script).unwrap());

        let report = compress_trajectory(
            &traj,
            sim.as_ref() as &dyn ModelBackend,
            &prompts,
            &AggregateOptions::default(),
        )
        .await
        .unwrap();
        assert!(report.degraded);
        assert_eq!(report.candidate_answer, "42");
        assert_eq!(report.final_reasoning, "done");
        // Initial attempt plus max_repairs further attempts.
        assert_eq!(sim.chat_call_count(), 1 + AggregateOptions::default().max_repairs);
    }

    #[tokio::test]
    async fn unanswered_trajectory_degrades_without_a_backend_call() {
        let mut traj = tiny_trajectory();
        traj.final_answer = None;
        traj.steps[1].is_terminal = false;
        traj.steps[1].tool_call = Some(ToolCall {
            tool_name: "search".into(),
            arguments: serde_json::json!({}),
            raw_tokens: vec![],
        });
        traj.steps[1].tool_response = Some(ToolResponse {
            content: "r".into(),
            token_count: 1,
            error_flag: false,
        });

        let sim = Arc::new(ScriptedBackend::from_script(ScenarioScript::new("empty")).unwrap());
        let report = compress_trajectory(
            &traj,
            sim.as_ref() as &dyn ModelBackend,
            &PromptSet::default(),
            &AggregateOptions::default(),
        )
        .await
        .unwrap();
        assert!(report.degraded);
        assert_eq!(report.candidate_answer, "");
        assert_eq!(sim.chat_call_count(), 0);
    }
}

mod metrics_tables {
    use super::*;
    use parathink::engine::{BranchCost, CostLedger};
    use parathink::harness::{emit_metrics, Metrics, RunRecord, TaskArtifacts};
    use parathink::model::TRAJECTORY_SCHEMA_VERSION;

    fn bare(id: &str, origin: Origin, generated: usize) -> Trajectory {
        Trajectory {
            schema: TRAJECTORY_SCHEMA_VERSION,
            id: id.into(),
            task_id: "t1".into(),
            origin,
            steps: vec![],
            final_answer: None,
            generated_token_count: generated,
            prompt_token_count: 0,
            sampling_seed: 0,
        }
    }

    fn write_run_dir(dir: &Path, rows: &[(&str, usize, usize)], trajectories: &[Trajectory]) {
        let task_dir = dir.join("tasks/t1");
        std::fs::create_dir_all(&task_dir).unwrap();
        std::fs::write(task_dir.join("trajectories.jsonl"), to_jsonl(trajectories).unwrap()).unwrap();
        let ledger = CostLedger {
            branches: rows
                .iter()
                .map(|(id, p, s)| BranchCost {
                    branch_id: id.to_string(),
                    prefix_tokens: *p,
                    suffix_tokens: *s,
                })
                .collect(),
            hot_cost_per_token: 1.0,
            cold_cost_per_token: 1.0,
            prompt_tokens_total: 0,
            wall_time_per_branch_secs: None,
        };
        std::fs::write(task_dir.join("ledger.json"), serde_json::to_string(&ledger).unwrap()).unwrap();
        std::fs::write(task_dir.join("reports.jsonl"), "").unwrap();
        let record = RunRecord {
            run_id: "fabricated".into(),
            config: HarnessSettings::default(),
            tasks: vec![TaskArtifacts { task_id: "t1".into(), dir: "tasks/t1".into(), error: None }],
            metrics: Metrics {
                pass_rate: None,
                tokens_generated: 0,
                tokens_saved: 0,
                reuse_factor: None,
                compression_ratio: None,
            },
        };
        std::fs::write(dir.join("run_record.json"), serde_json::to_string(&record).unwrap()).unwrap();
    }

    #[test]
    fn counterfactual_ratio_matches_hand_arithmetic() {
        // Ledger sums p = 300, s = 100: the table must show 100/400 = 0.25.
        let dir = tempfile::tempdir().unwrap();
        let trajectories = vec![
            bare("t1-r00", Origin::FromScratch, 40),
            bare(
                "t1-r00-s001-b00",
                Origin::Branch { parent_id: "t1-r00".into(), branch_step_index: 1 },
                130,
            ),
            bare(
                "t1-r00-s002-b00",
                Origin::Branch { parent_id: "t1-r00".into(), branch_step_index: 2 },
                230,
            ),
        ];
        write_run_dir(
            dir.path(),
            &[("t1-r00", 0, 40), ("t1-r00-s001-b00", 100, 30), ("t1-r00-s002-b00", 200, 30)],
            &trajectories,
        );
        let tables = emit_metrics(dir.path()).unwrap();
        assert_eq!(tables.savings_summary.actual_total, 100);
        assert_eq!(tables.savings_summary.counterfactual_total, 400);
        assert!((tables.savings_summary.ratio - 0.25).abs() < 1e-12);
        assert!((tables.savings_summary.reduction - 0.75).abs() < 1e-12);
        let speedup = tables.speedup.unwrap();
        assert!((speedup.reuse_factor - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_branches_means_ratio_one_and_no_savings() {
        let dir = tempfile::tempdir().unwrap();
        write_run_dir(dir.path(), &[("t1-r00", 0, 40)], &[bare("t1-r00", Origin::FromScratch, 40)]);
        let tables = emit_metrics(dir.path()).unwrap();
        assert_eq!(tables.savings_summary.ratio, 1.0);
        assert_eq!(tables.savings_summary.reduction, 0.0);
        assert!(tables.savings.iter().all(|r| r.prefix_tokens == 0));
    }
}

#[tokio::test]
async fn aggregation_backend_may_differ_from_rollout_backend() {
    // Two separate simulator instances stand in for a weak rollout model
    // and a stronger compression/aggregation model.
    let rollout_sim = Arc::new(scenarios::branchy(BASE_SEED));
    let agg_sim = Arc::new(scenarios::branchy(BASE_SEED));
    let mut backends = PipelineBackends::scripted(Arc::clone(&rollout_sim));
    backends.aggregation_model = Arc::clone(&agg_sim) as Arc<dyn ModelBackend>;

    let tasks = &script_tasks(&rollout_sim)[..1];
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(tasks, &settings(scenarios::branchy_config()), &backends, dir.path())
        .await
        .unwrap();

    // 8 compressions plus 1 aggregation landed on the aggregation model.
    assert_eq!(agg_sim.chat_call_count(), 9);
    assert!(agg_sim.captured_requests().iter().all(|r| r.tool_schemas.is_empty()));
    // The rollout model saw only tool-capable generation requests.
    assert!(rollout_sim.chat_call_count() > 0);
    assert!(rollout_sim.captured_requests().iter().all(|r| !r.tool_schemas.is_empty()));
}

#[tokio::test]
async fn task_parallelism_preserves_artifacts_bytes() {
    let mut outputs = Vec::new();
    for (task_parallelism, cap) in [(1usize, None), (3usize, Some(2))] {
        let (sim, backends) = scripted(scenarios::eval_suite(BASE_SEED));
        let tasks = script_tasks(&sim);
        let dir = tempfile::tempdir().unwrap();
        let settings = HarnessSettings {
            run: scenarios::eval_suite_config(),
            seed: BASE_SEED,
            task_parallelism,
            global_backend_call_cap: cap,
            ..HarnessSettings::default()
        };
        let record = run_pipeline(&tasks, &settings, &backends, dir.path()).await.unwrap();
        assert!(record.tasks.iter().all(|t| t.error.is_none()));
        let mut blob = String::new();
        for task in &tasks {
            let tdir = task_dir(dir.path(), &task.task_id);
            blob.push_str(&read(&tdir.join(TRAJECTORIES_FILE)));
            blob.push_str(&read(&tdir.join(REPORTS_FILE)));
            blob.push_str(&read(&tdir.join(ANSWER_FILE)));
        }
        outputs.push(blob);
    }
    assert_eq!(outputs[0], outputs[1]);
}
