//! Deterministic scripted backend.
//!
//! Compiles a [`ScenarioScript`] by self-play: the script is a closed world
//! (every continuation and tool result is scripted), so every conversation
//! the engine can produce against it is enumerable up front. Lookups are
//! keyed by conversation hash plus seed; a miss is a broken fixture and is
//! reported as [`BackendError::ScriptMiss`], never improvised.

pub mod scenarios;
pub mod script;

pub use script::{
    AggregationFixture, ChatFixture, FixtureMessage, NextSel, NodeAction, ScenarioScript,
    ScriptNode, ScriptTask, SearchFixture, TokenSpec, VisitFixture,
};

use super::conversation::{canonical_text, conversation_hash, messages_after_steps};
use super::tools::{truncate_response, ToolRegistry};
use super::{
    validate_search_batch, validate_visit_batch, BackendError, CostModel, ModelBackend,
    ModelRequest, ModelResponse, Role, SearchProvider, SearchResult, TokenCounter, VisitProvider,
    VisitResult,
};
use crate::aggregate::{canonicalize_answer, EntityGraph, ReportBody, SolutionMethod};
use crate::model::{extract_final_answer, segment_step, Step, ToolResponse};
use crate::prompts::{compression_messages, extraction_messages, PromptSet};
use async_trait::async_trait;
use script::{render_node, render_text_reply};
use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("broken fixture: {0}")]
    Fixture(String),
}

fn fixture_err(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Fixture(msg.into())
}

#[derive(Debug, Clone)]
enum ChatEntry {
    /// A rollout-tree position: the selector picks the node by seed.
    Rollout { task_idx: usize, sel: NextSel },
    /// A fully scripted reply (compression, extraction, raw chat fixtures).
    Fixed { reply: ModelResponse },
}

#[derive(Debug, Clone)]
struct AggregationEntry {
    /// Canonical candidate answers this task's leaves can produce.
    answers: BTreeSet<String>,
    reply: String,
}

/// Scripted search/visit fixtures shared by compile-time replay and runtime
/// serving.
struct FixtureTools {
    search: HashMap<String, Vec<SearchResult>>,
    visit: HashMap<(String, String), VisitFixture>,
}

impl FixtureTools {
    fn search_one(&self, query: &str) -> Vec<SearchResult> {
        self.search.get(&canonical_text(query)).cloned().unwrap_or_default()
    }

    fn visit_one(&self, url: &str, goal: &str) -> VisitResult {
        match self.visit.get(&(url.trim().to_string(), canonical_text(goal))) {
            Some(f) => VisitResult { url: url.to_string(), content: f.content.clone(), error: f.error.clone() },
            None => VisitResult {
                url: url.to_string(),
                content: None,
                error: Some("no scripted content for this url and goal".into()),
            },
        }
    }
}

#[async_trait]
impl SearchProvider for Arc<FixtureTools> {
    async fn search(&self, queries: &[String]) -> Result<Vec<Vec<SearchResult>>, BackendError> {
        validate_search_batch(queries)?;
        Ok(queries.iter().map(|q| self.search_one(q)).collect())
    }
}

#[async_trait]
impl VisitProvider for Arc<FixtureTools> {
    async fn visit(&self, urls: &[String], goal: &str) -> Result<Vec<VisitResult>, BackendError> {
        validate_visit_batch(urls)?;
        Ok(urls.iter().map(|u| self.visit_one(u, goal)).collect())
    }
}

/// The compiled simulator: a pure function of (scenario, conversation,
/// seed), with call counters and request capture for verification.
pub struct ScriptedBackend {
    script: ScenarioScript,
    chat_table: HashMap<String, ChatEntry>,
    node_responses: HashMap<(usize, String), ModelResponse>,
    aggregation_entries: Vec<AggregationEntry>,
    aggregate_system_canon: String,
    fixtures: Arc<FixtureTools>,
    chat_calls: AtomicUsize,
    tool_calls: AtomicUsize,
    captured: Mutex<Vec<ModelRequest>>,
}

fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

fn first_words(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

fn think_text(step: &Step) -> String {
    step.reasoning_tokens.iter().map(|t| t.text.as_str()).collect::<String>().trim().to_string()
}

/// Default compressed report for a leaf without an explicit one.
fn auto_report(steps: &[Step], answer: &str) -> ReportBody {
    let methods: Vec<SolutionMethod> = steps
        .iter()
        .filter(|s| s.tool_call.is_some())
        .map(|s| {
            let call = s.tool_call.as_ref().unwrap();
            SolutionMethod {
                subproblem: first_words(&think_text(s), 8),
                tool: call.tool_name.clone(),
                parameters: call.arguments.clone(),
                subanswer: s
                    .tool_response
                    .as_ref()
                    .map(|r| first_words(&r.content, 20))
                    .unwrap_or_default(),
            }
        })
        .collect();
    ReportBody {
        solution_planning: format!(
            "Decomposed the task into {} tool-backed subproblems executed in order.",
            methods.len()
        ),
        solution_methods: methods,
        final_reasoning: steps.last().map(|s| first_words(&think_text(s), 40)).unwrap_or_default(),
        candidate_answer: answer.to_string(),
    }
}

fn default_entity_graph(answer: &str) -> EntityGraph {
    EntityGraph {
        vertices: vec![answer.to_string()],
        relations: vec![],
        effective_flags: vec![true],
    }
}

struct Compiler {
    prompts: PromptSet,
    chat_table: HashMap<String, ChatEntry>,
    node_responses: HashMap<(usize, String), ModelResponse>,
    registry: ToolRegistry,
    response_cap: usize,
}

impl Compiler {
    fn insert_rollout(&mut self, hash: String, task_idx: usize, sel: &NextSel) -> Result<bool, ScenarioError> {
        match self.chat_table.get(&hash) {
            Some(ChatEntry::Rollout { task_idx: t, sel: s }) if *t == task_idx && s == sel => Ok(false),
            Some(_) => Err(fixture_err(format!(
                "two script positions produce the same conversation (task {task_idx})"
            ))),
            None => {
                self.chat_table.insert(hash, ChatEntry::Rollout { task_idx, sel: sel.clone() });
                Ok(true)
            }
        }
    }

    fn insert_fixed(&mut self, messages: &[super::ChatMessage], reply: ModelResponse) -> Result<(), ScenarioError> {
        let hash = conversation_hash(messages);
        match self.chat_table.get(&hash) {
            Some(ChatEntry::Fixed { reply: existing }) if *existing == reply => Ok(()),
            Some(_) => Err(fixture_err("two fixtures script the same conversation differently")),
            None => {
                self.chat_table.insert(hash, ChatEntry::Fixed { reply });
                Ok(())
            }
        }
    }

    fn walk(
        &mut self,
        task_idx: usize,
        task: &ScriptTask,
        steps: &[Step],
        sel: &NextSel,
        leaf_answers: &mut BTreeSet<String>,
    ) -> Result<(), ScenarioError> {
        let conv = messages_after_steps(&task.question, steps);
        if !self.insert_rollout(conversation_hash(&conv), task_idx, sel)? {
            return Ok(()); // already walked through an equivalent position
        }
        for child in sel.children() {
            let node = task
                .nodes
                .get(child)
                .ok_or_else(|| fixture_err(format!("task {} references missing node {child:?}", task.task_id)))?;
            let response = render_node(node);
            self.node_responses.insert((task_idx, child.to_string()), response.clone());
            let mut step = segment_step(&response.stream, steps.len())
                .map_err(|e| fixture_err(format!("node {child:?} renders a malformed stream: {e}")))?;

            match &node.action {
                NodeAction::ToolCall { .. } => {
                    let next = node
                        .next
                        .as_ref()
                        .ok_or_else(|| fixture_err(format!("tool-call node {child:?} lacks a continuation")))?;
                    let call = step.tool_call.as_ref().expect("tool node yields a call");
                    let outcome =
                        futures::executor::block_on(self.registry.invoke(&call.tool_name, &call.arguments));
                    let content = truncate_response(&outcome.content, self.response_cap);
                    step.tool_response = Some(ToolResponse {
                        token_count: whitespace_tokens(&content),
                        content,
                        error_flag: outcome.error_flag,
                    });
                    let mut extended = steps.to_vec();
                    extended.push(step);
                    self.walk(task_idx, task, &extended, next, leaf_answers)?;
                }
                NodeAction::Final { .. } => {
                    if node.next.is_some() {
                        return Err(fixture_err(format!("final node {child:?} must not have a continuation")));
                    }
                    let answer = extract_final_answer(&response.stream)
                        .map_err(|e| fixture_err(format!("node {child:?}: {e}")))?;
                    let mut full = steps.to_vec();
                    full.push(step);
                    if let Some(answer) = answer {
                        self.register_leaf(task, node, &full, &answer, leaf_answers)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn register_leaf(
        &mut self,
        task: &ScriptTask,
        node: &ScriptNode,
        steps: &[Step],
        answer: &str,
        leaf_answers: &mut BTreeSet<String>,
    ) -> Result<(), ScenarioError> {
        leaf_answers.insert(canonicalize_answer(answer));

        let body = node.report.clone().unwrap_or_else(|| auto_report(steps, answer));
        if body.candidate_answer != answer {
            return Err(fixture_err(format!(
                "scripted report answer {:?} does not match leaf answer {answer:?}",
                body.candidate_answer
            )));
        }
        let report_reply = render_text_reply(&serde_json::to_string(&body).expect("report serializes"));
        self.insert_fixed(&compression_messages(&self.prompts.clone(), steps, Some(answer)), report_reply)?;

        let graph = node.entity_graph.clone().unwrap_or_else(|| default_entity_graph(answer));
        graph.validate().map_err(|e| fixture_err(format!("scripted entity graph invalid: {e}")))?;
        let graph_reply = render_text_reply(&serde_json::to_string(&graph).expect("graph serializes"));
        let prompts = self.prompts.clone();
        self.insert_fixed(
            &extraction_messages(&prompts, steps, Some(answer), answer),
            graph_reply.clone(),
        )?;
        if let Some(gold) = &task.gold_answer {
            if gold != answer {
                self.insert_fixed(
                    &extraction_messages(&prompts, steps, Some(answer), gold),
                    graph_reply,
                )?;
            }
        }
        Ok(())
    }
}

impl ScriptedBackend {
    pub fn from_script(script: ScenarioScript) -> Result<Self, ScenarioError> {
        if script.schema != script::SCRIPT_SCHEMA_VERSION {
            return Err(fixture_err(format!("unsupported scenario schema {}", script.schema)));
        }
        if script.cold_cost_per_token < script.hot_cost_per_token || script.hot_cost_per_token <= 0.0 {
            return Err(fixture_err("costs must satisfy cold >= hot > 0"));
        }
        let mut search = HashMap::new();
        for f in &script.search {
            search.insert(canonical_text(&f.query), f.results.clone());
        }
        let mut visit = HashMap::new();
        for f in &script.visit {
            visit.insert((f.url.trim().to_string(), canonical_text(&f.goal)), f.clone());
        }
        let fixtures = Arc::new(FixtureTools { search, visit });
        let registry = ToolRegistry::standard(
            Arc::new(Arc::clone(&fixtures)),
            Arc::new(Arc::clone(&fixtures)),
        );

        let prompts = PromptSet::default();
        let mut compiler = Compiler {
            prompts: prompts.clone(),
            chat_table: HashMap::new(),
            node_responses: HashMap::new(),
            registry,
            response_cap: script.tool_response_token_cap,
        };
        let mut aggregation_entries = Vec::new();
        for (task_idx, task) in script.tasks.iter().enumerate() {
            let mut leaf_answers = BTreeSet::new();
            compiler.walk(task_idx, task, &[], &task.root, &mut leaf_answers)?;
            if let Some(agg) = &task.aggregation {
                let reply = serde_json::json!({
                    "answer": agg.answer,
                    "justification": agg.justification,
                })
                .to_string();
                aggregation_entries.push(AggregationEntry { answers: leaf_answers, reply });
            }
        }
        for fixture in &script.chat {
            let messages: Vec<super::ChatMessage> = fixture
                .messages
                .iter()
                .map(|m| super::ChatMessage { role: m.role, content: m.content.clone() })
                .collect();
            compiler.insert_fixed(&messages, render_text_reply(&fixture.reply))?;
        }

        Ok(Self {
            chat_table: compiler.chat_table,
            node_responses: compiler.node_responses,
            aggregation_entries,
            aggregate_system_canon: canonical_text(&prompts.aggregate),
            fixtures,
            script,
            chat_calls: AtomicUsize::new(0),
            tool_calls: AtomicUsize::new(0),
            captured: Mutex::new(Vec::new()),
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_script(serde_json::from_str(&text)?)
    }

    pub fn script(&self) -> &ScenarioScript {
        &self.script
    }

    pub fn scenario_id(&self) -> &str {
        &self.script.scenario_id
    }

    /// The tool-response cap the scenario was compiled with; engine runs
    /// must use the same cap for conversations to line up.
    pub fn response_cap(&self) -> usize {
        self.script.tool_response_token_cap
    }

    pub fn chat_call_count(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn tool_call_count(&self) -> usize {
        self.tool_calls.load(Ordering::SeqCst)
    }

    /// Total backend interactions (model plus tools), for resume checks.
    pub fn total_calls(&self) -> usize {
        self.chat_call_count() + self.tool_call_count()
    }

    /// Every model request seen so far, in arrival order.
    pub fn captured_requests(&self) -> Vec<ModelRequest> {
        self.captured.lock().expect("capture lock").clone()
    }

    fn match_aggregation(&self, request: &ModelRequest) -> Option<ModelResponse> {
        let system = request.messages.first()?;
        if system.role != Role::System || canonical_text(&system.content) != self.aggregate_system_canon {
            return None;
        }
        let user = request.messages.iter().rev().find(|m| m.role == Role::User)?;
        let mut present: BTreeSet<String> = BTreeSet::new();
        for line in user.content.lines() {
            if let Some(rest) = line.strip_prefix("Candidate answer: ") {
                let canon = canonicalize_answer(rest);
                if !canon.is_empty() {
                    present.insert(canon);
                }
            }
        }
        if present.is_empty() {
            return None;
        }
        let mut matches = self
            .aggregation_entries
            .iter()
            .filter(|e| present.is_subset(&e.answers));
        let hit = matches.next()?;
        if matches.next().is_some() {
            return None; // ambiguous: treat as a miss so the fixture gets fixed
        }
        Some(render_text_reply(&hit.reply))
    }

    fn miss(&self, request: &ModelRequest, detail: &str) -> BackendError {
        let last = request
            .messages
            .last()
            .map(|m| format!("{} {:?}", m.role, m.content.chars().take(80).collect::<String>()))
            .unwrap_or_else(|| "<empty conversation>".into());
        BackendError::ScriptMiss(format!(
            "scenario {:?}: {detail}; seed {}, {} messages, last: {last}",
            self.script.scenario_id,
            request.seed,
            request.messages.len()
        ))
    }
}

impl TokenCounter for ScriptedBackend {}

#[async_trait]
impl ModelBackend for ScriptedBackend {
    async fn chat_generate(&self, request: ModelRequest) -> Result<ModelResponse, BackendError> {
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        self.captured.lock().expect("capture lock").push(request.clone());

        let hash = conversation_hash(&request.messages);
        match self.chat_table.get(&hash) {
            Some(ChatEntry::Rollout { task_idx, sel }) => {
                let node = sel
                    .resolve(request.seed)
                    .ok_or_else(|| self.miss(&request, "no scripted continuation for this seed"))?;
                Ok(self.node_responses[&(*task_idx, node.to_string())].clone())
            }
            Some(ChatEntry::Fixed { reply }) => Ok(reply.clone()),
            None => match self.match_aggregation(&request) {
                Some(reply) => Ok(reply),
                None => Err(self.miss(&request, "conversation not in the scripted table")),
            },
        }
    }

    fn cost_model(&self) -> CostModel {
        CostModel {
            hot_cost_per_token: self.script.hot_cost_per_token,
            cold_cost_per_token: self.script.cold_cost_per_token,
        }
    }
}

#[async_trait]
impl SearchProvider for ScriptedBackend {
    async fn search(&self, queries: &[String]) -> Result<Vec<Vec<SearchResult>>, BackendError> {
        self.tool_calls.fetch_add(1, Ordering::SeqCst);
        validate_search_batch(queries)?;
        Ok(queries.iter().map(|q| self.fixtures.search_one(q)).collect())
    }
}

#[async_trait]
impl VisitProvider for ScriptedBackend {
    async fn visit(&self, urls: &[String], goal: &str) -> Result<Vec<VisitResult>, BackendError> {
        self.tool_calls.fetch_add(1, Ordering::SeqCst);
        validate_visit_batch(urls)?;
        Ok(urls.iter().map(|u| self.fixtures.visit_one(u, goal)).collect())
    }
}
