//! Command-line surface for the orchestration engine: staged commands for
//! rollout, branching, compression, aggregation, and voting, plus the full
//! pipeline, analysis CSVs, metrics, and evaluation.
//!
//! Exit codes: 0 success, 1 run failure, 2 configuration error.

mod config;

use clap::{Parser, Subcommand, ValueEnum};
use config::{config_err, run_err, CliError, ResolvedBackends, RunOverrides};
use parathink::aggregate::{
    aggregate_reports, compress_trajectory, reports_from_jsonl, reports_to_jsonl,
    vote_over_trajectories, VoteMethod,
};
use parathink::engine::{
    derive_rollout_seed, execute_parallel, plan_branches, rollout as engine_rollout,
};
use parathink::harness::{
    emit_metrics, evaluate, load_run_record, ppl_csv, render_tables, run_pipeline, task_dir,
    tasks_from_jsonl, top_uncertainty_csv, EvalMode, ExactMatchJudge, HarnessSettings, Judge,
    ModelJudge, Predictions, Task, ANSWER_FILE, TRAJECTORIES_FILE,
};
use parathink::model::{from_jsonl, to_jsonl, RegionTag, Trajectory};
use parathink::uncertainty::select_branch_points;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "parathink", version, about = "Parallel-thinking orchestration for deep information-seeking agents")]
struct Cli {
    /// TOML run configuration; defaults to the scripted basic scenario.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Verbose logging.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegionArg {
    Reasoning,
    Exploration,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Noscaling,
    Single,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeArg {
    Exact,
    Model,
}

#[derive(Subcommand)]
enum Command {
    /// Run the M initial from-scratch rollouts per task.
    Rollout {
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Output trajectory JSONL.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Select branch points on existing rollouts and execute the partial
    /// rollouts, writing per-task trajectory sets and ledgers.
    Branch {
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Initial trajectories (from `rollout`).
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Full two-stage pipeline into a resumable run directory.
    Run {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Compress trajectories into structured reports.
    Compress {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate one task's reports into a single final answer.
    Aggregate {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer-selection baselines over trajectory sets, per task.
    Vote {
        #[arg(value_enum)]
        method: VoteArg,
        #[arg(long)]
        trajectories: PathBuf,
        /// Output JSONL: one {task_id, answer} object per task.
        #[arg(long)]
        out: PathBuf,
    },
    /// Step-PPL series CSV (and optionally per-trajectory top-N steps).
    Analyze {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        region: RegionArg,
        /// Also emit the top-N uncertainty steps per trajectory.
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Output for the top-N CSV (defaults alongside --out).
        #[arg(long)]
        top_out: Option<PathBuf>,
    },
    /// Token-savings, compression, and speedup tables from a run directory.
    Metrics {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Pass rates over a completed run directory.
    Evaluate {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Task file with gold answers; defaults to the run's snapshot.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "exact")]
        judge: JudgeArg,
        /// Prompt template for the model judge ({question}, {gold}, {answer}).
        #[arg(long)]
        judge_prompt: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VoteArg {
    Majority,
    Weighted,
    Maxtool,
}

fn write_out(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(run_err)?;
        }
    }
    std::fs::write(path, content).map_err(run_err)
}

fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    from_jsonl(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn group_by_task(trajectories: Vec<Trajectory>) -> BTreeMap<String, Vec<Trajectory>> {
    let mut grouped: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
    for t in trajectories {
        grouped.entry(t.task_id.clone()).or_default().push(t);
    }
    grouped
}

fn setup(
    config_path: Option<&Path>,
    overrides: &RunOverrides,
) -> Result<(HarnessSettings, ResolvedBackends), CliError> {
    let file = config::load_file(config_path)?;
    let settings = config::resolve_settings(&file, overrides)?;
    let backends = config::build_backends(&file, &settings)?;
    Ok((settings, backends))
}

async fn cmd_rollout(
    config_path: Option<&Path>,
    tasks_path: Option<&Path>,
    out: &Path,
    overrides: &RunOverrides,
) -> Result<(), CliError> {
    let (settings, backends) = setup(config_path, overrides)?;
    let tasks = config::resolve_tasks(tasks_path, &backends)?;
    let rollout_backends = backends
        .pipeline
        .rollout
        .clone()
        .with_response_cap(settings.tool_response_token_cap);
    let mut all = Vec::new();
    for task in &tasks {
        for ordinal in 0..settings.run.initial_rollouts_m {
            let id = format!("{}-r{ordinal:02}", task.task_id);
            let seed = derive_rollout_seed(settings.seed, &task.task_id, ordinal);
            let traj = engine_rollout(&task.task_id, &task.question, id, &settings.run, &rollout_backends, seed)
                .await
                .map_err(run_err)?;
            all.push(traj);
        }
    }
    write_out(out, &to_jsonl(&all).map_err(run_err)?)?;
    println!("wrote {} rollouts to {}", all.len(), out.display());
    Ok(())
}

async fn cmd_branch(
    config_path: Option<&Path>,
    tasks_path: Option<&Path>,
    trajectories: &Path,
    out_dir: &Path,
    overrides: &RunOverrides,
) -> Result<(), CliError> {
    let (settings, backends) = setup(config_path, overrides)?;
    let tasks = config::resolve_tasks(tasks_path, &backends)?;
    let rollout_backends = backends
        .pipeline
        .rollout
        .clone()
        .with_response_cap(settings.tool_response_token_cap);
    let grouped = group_by_task(read_trajectories(trajectories)?);
    for task in &tasks {
        let Some(initial) = grouped.get(&task.task_id) else {
            return Err(config_err(format!("no rollouts for task {:?}", task.task_id)));
        };
        let plan = if settings.run.sampling_budget_n == settings.run.initial_rollouts_m {
            plan_branches(&[], &settings.run)
        } else {
            let points =
                select_branch_points(initial, settings.run.region_strategy, settings.run.branch_top_k)
                    .map_err(run_err)?;
            plan_branches(&points, &settings.run)
        };
        let out = execute_parallel(&plan, initial, &task.question, &settings.run, &rollout_backends)
            .await
            .map_err(run_err)?;
        let dir = task_dir(out_dir, &task.task_id);
        std::fs::create_dir_all(&dir).map_err(run_err)?;
        write_out(&dir.join(TRAJECTORIES_FILE), &to_jsonl(&out.trajectories).map_err(run_err)?)?;
        write_out(
            &dir.join("ledger.json"),
            &serde_json::to_string_pretty(&out.ledger).map_err(run_err)?,
        )?;
        println!(
            "{}: {} trajectories ({} branches), {} tokens saved",
            task.task_id,
            out.trajectories.len(),
            plan.total_branches,
            out.ledger.tokens_saved()
        );
    }
    Ok(())
}

async fn cmd_run(
    config_path: Option<&Path>,
    tasks_path: Option<&Path>,
    run_dir: &Path,
    overrides: &RunOverrides,
) -> Result<(), CliError> {
    let (settings, backends) = setup(config_path, overrides)?;
    let tasks = config::resolve_tasks(tasks_path, &backends)?;
    let record = run_pipeline(&tasks, &settings, &backends.pipeline, run_dir)
        .await
        .map_err(run_err)?;
    println!("run {} complete: {} tasks", record.run_id, record.tasks.len());
    for t in &record.tasks {
        match &t.error {
            None => println!("  {}: ok", t.task_id),
            Some(e) => println!("  {}: FAILED ({e})", t.task_id),
        }
    }
    println!("metrics: {}", serde_json::to_string_pretty(&record.metrics).map_err(run_err)?);
    Ok(())
}

async fn cmd_compress(config_path: Option<&Path>, trajectories: &Path, out: &Path) -> Result<(), CliError> {
    let (settings, backends) = setup(config_path, &RunOverrides::default())?;
    let trajectories = read_trajectories(trajectories)?;
    let mut reports = Vec::new();
    for traj in &trajectories {
        let report = compress_trajectory(
            traj,
            backends.pipeline.aggregation_model.as_ref(),
            &backends.pipeline.prompts,
            &settings.aggregate,
        )
        .await
        .map_err(run_err)?;
        reports.push(report);
    }
    write_out(out, &reports_to_jsonl(&reports).map_err(run_err)?)?;
    println!("wrote {} reports to {}", reports.len(), out.display());
    Ok(())
}

async fn cmd_aggregate(config_path: Option<&Path>, reports: &Path, out: &Path) -> Result<(), CliError> {
    let (settings, backends) = setup(config_path, &RunOverrides::default())?;
    let text = std::fs::read_to_string(reports)
        .map_err(|e| config_err(format!("cannot read {}: {e}", reports.display())))?;
    let reports = reports_from_jsonl(&text).map_err(|e| config_err(e.to_string()))?;
    let answer = aggregate_reports(
        &reports,
        backends.pipeline.aggregation_model.as_ref(),
        &backends.pipeline.prompts,
        &settings.aggregate,
    )
    .await
    .map_err(run_err)?;
    write_out(out, &serde_json::to_string_pretty(&answer).map_err(run_err)?)?;
    println!("final answer: {}", answer.answer);
    Ok(())
}

fn cmd_vote(method: VoteArg, trajectories: &Path, out: &Path) -> Result<(), CliError> {
    let method = match method {
        VoteArg::Majority => VoteMethod::Majority,
        VoteArg::Weighted => VoteMethod::Weighted,
        VoteArg::Maxtool => VoteMethod::MaxTool,
    };
    let grouped = group_by_task(read_trajectories(trajectories)?);
    let mut lines = String::new();
    for (task_id, set) in &grouped {
        let answer = vote_over_trajectories(method, set).map_err(run_err)?;
        println!("{task_id}: {}", answer.answer);
        let row = serde_json::json!({"task_id": task_id, "final": answer});
        lines.push_str(&row.to_string());
        lines.push('\n');
    }
    write_out(out, &lines)?;
    Ok(())
}

fn cmd_analyze(
    trajectories: &Path,
    region: RegionArg,
    top: Option<usize>,
    out: &Path,
    top_out: Option<&Path>,
) -> Result<(), CliError> {
    let trajectories = read_trajectories(trajectories)?;
    let regions: &[RegionTag] = match region {
        RegionArg::Reasoning => &[RegionTag::Reasoning],
        RegionArg::Exploration => &[RegionTag::Exploration],
        RegionArg::Both => &[RegionTag::Reasoning, RegionTag::Exploration],
    };
    write_out(out, &ppl_csv(&trajectories, regions))?;
    println!("wrote PPL series for {} trajectories to {}", trajectories.len(), out.display());
    if let Some(n) = top {
        let single = match region {
            RegionArg::Reasoning => RegionTag::Reasoning,
            RegionArg::Exploration => RegionTag::Exploration,
            RegionArg::Both => {
                return Err(config_err("--top needs a single --region (reasoning or exploration)"))
            }
        };
        let csv = top_uncertainty_csv(&trajectories, single, n);
        let default_path = out.with_file_name(format!(
            "top{n}-{}.csv",
            match single {
                RegionTag::Reasoning => "reasoning",
                RegionTag::Exploration => "exploration",
            }
        ));
        let path = top_out.unwrap_or(&default_path);
        write_out(path, &csv)?;
        println!("wrote top-{n} steps to {}", path.display());
    }
    Ok(())
}

fn cmd_metrics(run_dir: &Path) -> Result<(), CliError> {
    let tables = emit_metrics(run_dir).map_err(run_err)?;
    print!("{}", render_tables(&tables));
    println!("CSV tables written under {}", run_dir.join("metrics").display());
    Ok(())
}

async fn cmd_evaluate(
    config_path: Option<&Path>,
    run_dir: &Path,
    mode: ModeArg,
    tasks_path: Option<&Path>,
    judge_arg: JudgeArg,
    judge_prompt: Option<&Path>,
) -> Result<(), CliError> {
    let record = load_run_record(run_dir)
        .map_err(run_err)?
        .ok_or_else(|| run_err(format!("{} holds no completed run", run_dir.display())))?;
    let tasks: Vec<Task> = match tasks_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(run_err)?;
            tasks_from_jsonl(&text).map_err(|e| config_err(e.to_string()))?
        }
        None => {
            let path = run_dir.join("tasks.jsonl");
            let text = std::fs::read_to_string(&path).map_err(|e| {
                config_err(format!("no --tasks given and {} missing: {e}", path.display()))
            })?;
            tasks_from_jsonl(&text).map_err(|e| config_err(e.to_string()))?
        }
    };
    let completed: Vec<Task> = tasks
        .into_iter()
        .filter(|t| record.tasks.iter().any(|a| a.task_id == t.task_id && a.error.is_none()))
        .collect();
    if completed.is_empty() {
        return Err(run_err("no completed tasks to evaluate"));
    }

    let judge: Box<dyn Judge> = match judge_arg {
        JudgeArg::Exact => Box::new(ExactMatchJudge),
        JudgeArg::Model => {
            let prompt_path =
                judge_prompt.ok_or_else(|| config_err("--judge model needs --judge-prompt"))?;
            let template = std::fs::read_to_string(prompt_path).map_err(run_err)?;
            let (_, backends) = setup(config_path, &RunOverrides::default())?;
            Box::new(ModelJudge { backend: backends.pipeline.aggregation_model, prompt_template: template })
        }
    };

    let predictions = match mode {
        ModeArg::Noscaling => {
            let mut by_task = BTreeMap::new();
            for task in &completed {
                let path = task_dir(run_dir, &task.task_id).join(TRAJECTORIES_FILE);
                by_task.insert(task.task_id.clone(), read_trajectories(&path)?);
            }
            Predictions::Trajectories(by_task)
        }
        ModeArg::Single => {
            let mut by_task = BTreeMap::new();
            for task in &completed {
                let path = task_dir(run_dir, &task.task_id).join(ANSWER_FILE);
                let text = std::fs::read_to_string(&path).map_err(run_err)?;
                by_task.insert(task.task_id.clone(), serde_json::from_str(&text).map_err(run_err)?);
            }
            Predictions::Answers(by_task)
        }
    };
    let eval_mode = match mode {
        ModeArg::Noscaling => EvalMode::NoScaling,
        ModeArg::Single => EvalMode::SingleAnswer,
    };
    let report = evaluate(&predictions, &completed, judge.as_ref(), eval_mode)
        .await
        .map_err(run_err)?;
    for (task_id, rate) in &report.per_task {
        println!("{task_id}: {rate:.4}");
    }
    println!("overall pass rate ({eval_mode:?}): {:.4}", report.overall);
    Ok(())
}

async fn dispatch(cli: Cli) -> Result<(), CliError> {
    let config_path = cli.config.as_deref();
    match cli.command {
        Command::Rollout { tasks, out, overrides } => {
            cmd_rollout(config_path, tasks.as_deref(), &out, &overrides).await
        }
        Command::Branch { tasks, trajectories, out_dir, overrides } => {
            cmd_branch(config_path, tasks.as_deref(), &trajectories, &out_dir, &overrides).await
        }
        Command::Run { tasks, run_dir, overrides } => {
            cmd_run(config_path, tasks.as_deref(), &run_dir, &overrides).await
        }
        Command::Compress { trajectories, out } => cmd_compress(config_path, &trajectories, &out).await,
        Command::Aggregate { reports, out } => cmd_aggregate(config_path, &reports, &out).await,
        Command::Vote { method, trajectories, out } => cmd_vote(method, &trajectories, &out),
        Command::Analyze { trajectories, region, top, out, top_out } => {
            cmd_analyze(&trajectories, region, top, &out, top_out.as_deref())
        }
        Command::Metrics { run_dir } => cmd_metrics(&run_dir),
        Command::Evaluate { run_dir, mode, tasks, judge, judge_prompt } => {
            cmd_evaluate(config_path, &run_dir, mode, tasks.as_deref(), judge, judge_prompt.as_deref())
                .await
        }
    }
}

#[tokio::main]
async fn main() {
    let cli = Cli::parse();
    let filter = if cli.verbose { "parathink=debug,info" } else { "parathink=info,warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(filter)),
        )
        .with_writer(std::io::stderr)
        .init();

    match dispatch(cli).await {
        Ok(()) => {}
        Err(e @ CliError::Config(_)) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
        Err(e @ CliError::Run(_)) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    }
}
