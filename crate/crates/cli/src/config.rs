//! TOML run configuration and backend construction. Precedence is CLI flags
//! over file values over defaults.

use parathink::aggregate::AggregateOptions;
use parathink::backends::live::{
    LiveModelBackend, LiveModelConfig, LiveSearchConfig, LiveSearchProvider, LiveVisitProvider,
};
use parathink::backends::sim::{scenarios, ScriptedBackend};
use parathink::backends::tools::ToolRegistry;
use parathink::backends::{CostModel, ModelBackend, SearchProvider, VisitProvider};
use parathink::engine::Backends;
use parathink::harness::{HarnessSettings, PipelineBackends, Task};
use parathink::model::RegionStrategy;
use parathink::prompts::PromptSet;
use serde::Deserialize;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    Config(String),
    /// Run-time failure; exit code 1.
    Run(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Run(m) => write!(f, "run failure: {m}"),
        }
    }
}

pub fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn run_err(msg: impl std::fmt::Display) -> CliError {
    CliError::Run(msg.to_string())
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub harness: HarnessSection,
    #[serde(default)]
    pub backend: BackendSection,
    /// Optional separate backend for compression and aggregation.
    #[serde(default)]
    pub aggregation_backend: Option<BackendSection>,
    #[serde(default)]
    pub search: Option<SearchSection>,
    #[serde(default)]
    pub prompts: Option<PromptsSection>,
}

/// `[run]`: every field optional so flags and defaults can fill the rest.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub sampling_budget_n: Option<usize>,
    pub initial_rollouts_m: Option<usize>,
    pub branch_top_k: Option<usize>,
    pub branches_per_step: Option<usize>,
    pub region_strategy: Option<RegionStrategy>,
    pub max_steps: Option<usize>,
    pub max_generated_tokens: Option<usize>,
    pub parallelism_p: Option<usize>,
    pub temperature: Option<f64>,
    pub aggregation_backend: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessSection {
    pub seed: Option<i64>,
    pub tool_response_token_cap: Option<usize>,
    pub snippet_token_cap: Option<usize>,
    pub max_repairs: Option<usize>,
    pub aggregation_context_budget: Option<usize>,
    pub task_parallelism: Option<usize>,
    pub global_backend_call_cap: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    /// "scripted" or "http".
    #[serde(default = "default_kind")]
    pub kind: String,
    /// Scripted: a scenario file path or `builtin:<name>`.
    pub scenario: Option<String>,
    /// Http: chat-completions endpoint and model name.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub hot_cost_per_token: Option<f64>,
    pub cold_cost_per_token: Option<f64>,
}

fn default_kind() -> String {
    "scripted".into()
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            scenario: Some("builtin:basic".into()),
            endpoint: None,
            model: None,
            api_key_env: None,
            hot_cost_per_token: None,
            cold_cost_per_token: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub endpoint: String,
    pub api_key_env: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptsSection {
    pub compress: Option<String>,
    pub compress_repair: Option<String>,
    pub aggregate: Option<String>,
    pub extract_entities: Option<String>,
    pub visit_extract: Option<String>,
}

/// Flag-level overrides applied on top of the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct RunOverrides {
    /// Sampling budget N
    #[arg(long)]
    pub n: Option<usize>,
    /// Initial from-scratch rollouts M
    #[arg(long)]
    pub m: Option<usize>,
    /// Branching PPL top-K
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Branches per selected step
    #[arg(long)]
    pub branches_per_step: Option<usize>,
    /// Region strategy: reasoning | exploration | mixed
    #[arg(long)]
    pub region: Option<String>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Base seed for deterministic sampling
    #[arg(long)]
    pub seed: Option<i64>,
}

pub fn load_file(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| config_err(format!("cannot parse {}: {e}", p.display())))
        }
    }
}

fn parse_region(name: &str) -> Result<RegionStrategy, CliError> {
    match name {
        "reasoning" => Ok(RegionStrategy::Reasoning),
        "exploration" => Ok(RegionStrategy::Exploration),
        "mixed" => Ok(RegionStrategy::Mixed),
        other => Err(config_err(format!("unknown region strategy {other:?}"))),
    }
}

/// File + flags over defaults. When the scripted backend names a builtin
/// scenario, that scenario's companion configuration seeds the defaults.
pub fn resolve_settings(
    file: &FileConfig,
    overrides: &RunOverrides,
) -> Result<HarnessSettings, CliError> {
    let mut run = builtin_name(&file.backend)
        .and_then(scenarios::config_for)
        .unwrap_or_default();

    let s = &file.run;
    macro_rules! take {
        ($field:ident) => {
            if let Some(v) = s.$field.clone() {
                run.$field = v;
            }
        };
    }
    take!(sampling_budget_n);
    take!(initial_rollouts_m);
    take!(branch_top_k);
    take!(branches_per_step);
    take!(region_strategy);
    take!(max_steps);
    take!(max_generated_tokens);
    take!(parallelism_p);
    take!(temperature);
    take!(aggregation_backend);

    if let Some(n) = overrides.n {
        run.sampling_budget_n = n;
    }
    if let Some(m) = overrides.m {
        run.initial_rollouts_m = m;
    }
    if let Some(k) = overrides.top_k {
        run.branch_top_k = k;
    }
    if let Some(b) = overrides.branches_per_step {
        run.branches_per_step = b;
    }
    if let Some(region) = &overrides.region {
        run.region_strategy = parse_region(region)?;
    }
    if let Some(v) = overrides.max_steps {
        run.max_steps = v;
    }
    if let Some(v) = overrides.parallelism {
        run.parallelism_p = v;
    }
    if let Some(v) = overrides.temperature {
        run.temperature = v;
    }
    // Record a non-default aggregation backend identifier when one is
    // configured but the [run] section left the field alone.
    if file.aggregation_backend.is_some() && s.aggregation_backend.is_none() {
        run.aggregation_backend = "aggregation".into();
    }
    run.validate().map_err(config_err)?;

    let h = &file.harness;
    let defaults = HarnessSettings::default();
    let aggregate = AggregateOptions {
        snippet_token_cap: h.snippet_token_cap.unwrap_or(defaults.aggregate.snippet_token_cap),
        max_repairs: h.max_repairs.unwrap_or(defaults.aggregate.max_repairs),
        aggregation_context_budget: h
            .aggregation_context_budget
            .unwrap_or(defaults.aggregate.aggregation_context_budget),
    };
    Ok(HarnessSettings {
        run,
        seed: overrides.seed.or(h.seed).unwrap_or(defaults.seed),
        tool_response_token_cap: h
            .tool_response_token_cap
            .unwrap_or(defaults.tool_response_token_cap),
        aggregate,
        task_parallelism: h.task_parallelism.unwrap_or(defaults.task_parallelism),
        global_backend_call_cap: h.global_backend_call_cap.or(defaults.global_backend_call_cap),
    })
}

fn builtin_name(section: &BackendSection) -> Option<&str> {
    if section.kind != "scripted" {
        return None;
    }
    section.scenario.as_deref()?.strip_prefix("builtin:")
}

pub fn load_prompts(section: &Option<PromptsSection>) -> Result<PromptSet, CliError> {
    let mut prompts = PromptSet::default();
    let Some(s) = section else { return Ok(prompts) };
    let read = |path: &str| {
        std::fs::read_to_string(path).map_err(|e| config_err(format!("prompt file {path}: {e}")))
    };
    if let Some(p) = &s.compress {
        prompts.compress = read(p)?;
    }
    if let Some(p) = &s.compress_repair {
        prompts.compress_repair = read(p)?;
    }
    if let Some(p) = &s.aggregate {
        prompts.aggregate = read(p)?;
    }
    if let Some(p) = &s.extract_entities {
        prompts.extract_entities = read(p)?;
    }
    if let Some(p) = &s.visit_extract {
        prompts.visit_extract = read(p)?;
    }
    Ok(prompts)
}

/// Constructed backends plus, in scripted mode, the scenario's task list
/// and the simulator handle.
pub struct ResolvedBackends {
    pub pipeline: PipelineBackends,
    pub scripted: Option<Arc<ScriptedBackend>>,
}

fn load_scripted(section: &BackendSection, seed: i64) -> Result<Arc<ScriptedBackend>, CliError> {
    let reference = section
        .scenario
        .as_deref()
        .ok_or_else(|| config_err("scripted backend needs a scenario"))?;
    let sim = if let Some(name) = reference.strip_prefix("builtin:") {
        scenarios::by_name(name, seed)
            .ok_or_else(|| config_err(format!("unknown builtin scenario {name:?}")))?
    } else {
        ScriptedBackend::from_file(reference).map_err(|e| config_err(e.to_string()))?
    };
    Ok(Arc::new(sim))
}

fn api_key(env_name: &Option<String>) -> Option<String> {
    env_name.as_ref().and_then(|name| std::env::var(name).ok())
}

fn live_model(section: &BackendSection) -> Result<Arc<LiveModelBackend>, CliError> {
    let endpoint = section
        .endpoint
        .clone()
        .ok_or_else(|| config_err("http backend needs an endpoint"))?;
    let model = section
        .model
        .clone()
        .ok_or_else(|| config_err("http backend needs a model name"))?;
    let hot = section.hot_cost_per_token.unwrap_or(1.0);
    let cold = section.cold_cost_per_token.unwrap_or(hot);
    if !(hot > 0.0 && cold >= hot) {
        return Err(config_err("costs must satisfy cold >= hot > 0"));
    }
    Ok(Arc::new(LiveModelBackend::new(LiveModelConfig {
        endpoint,
        model,
        api_key: api_key(&section.api_key_env),
        cost: CostModel { hot_cost_per_token: hot, cold_cost_per_token: cold },
    })))
}

pub fn build_backends(file: &FileConfig, settings: &HarnessSettings) -> Result<ResolvedBackends, CliError> {
    let prompts = load_prompts(&file.prompts)?;
    if settings.run.aggregation_backend != "default" && file.aggregation_backend.is_none() {
        return Err(config_err(format!(
            "run.aggregation_backend is {:?} but no [aggregation_backend] section is defined",
            settings.run.aggregation_backend
        )));
    }
    match file.backend.kind.as_str() {
        "scripted" => {
            let sim = load_scripted(&file.backend, settings.seed)?;
            let mut pipeline = PipelineBackends::scripted(Arc::clone(&sim));
            pipeline.prompts = prompts;
            if let Some(section) = &file.aggregation_backend {
                if section.kind == "scripted" {
                    // A different scripted scenario may stand in as the
                    // stronger aggregation model.
                    let agg = load_scripted(section, settings.seed)?;
                    pipeline.aggregation_model = agg;
                } else {
                    pipeline.aggregation_model = live_model(section)?;
                }
            }
            Ok(ResolvedBackends { pipeline, scripted: Some(sim) })
        }
        "http" => {
            let model = live_model(&file.backend)?;
            let search = file
                .search
                .as_ref()
                .ok_or_else(|| config_err("http backend needs a [search] section"))?;
            let search_provider = Arc::new(LiveSearchProvider::new(LiveSearchConfig {
                endpoint: search.endpoint.clone(),
                api_key: api_key(&search.api_key_env),
            }));
            let visit_provider = Arc::new(LiveVisitProvider::new(
                Arc::clone(&model) as Arc<dyn ModelBackend>,
                prompts.clone(),
            ));
            let tools = ToolRegistry::standard(
                search_provider as Arc<dyn SearchProvider>,
                visit_provider as Arc<dyn VisitProvider>,
            );
            let rollout = Backends::new(Arc::clone(&model) as Arc<dyn ModelBackend>, tools)
                .with_response_cap(settings.tool_response_token_cap);
            let aggregation_model: Arc<dyn ModelBackend> = match &file.aggregation_backend {
                Some(section) if section.kind == "http" => live_model(section)?,
                Some(section) => load_scripted(section, settings.seed)?,
                None => model,
            };
            Ok(ResolvedBackends {
                pipeline: PipelineBackends { rollout, aggregation_model, prompts },
                scripted: None,
            })
        }
        other => Err(config_err(format!("unknown backend kind {other:?}"))),
    }
}

/// Task list: the given file, or in scripted mode the scenario's own tasks.
pub fn resolve_tasks(
    tasks_path: Option<&Path>,
    backends: &ResolvedBackends,
) -> Result<Vec<Task>, CliError> {
    if let Some(path) = tasks_path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        return parathink::harness::tasks_from_jsonl(&text).map_err(|e| config_err(e.to_string()));
    }
    let Some(sim) = &backends.scripted else {
        return Err(config_err("--tasks is required for a live backend"));
    };
    Ok(sim
        .script()
        .tasks
        .iter()
        .map(|t| Task {
            task_id: t.task_id.clone(),
            question: t.question.clone(),
            gold_answer: t.gold_answer.clone(),
            benchmark_tag: Some(sim.scenario_id().to_string()),
        })
        .collect())
}
