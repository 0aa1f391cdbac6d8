//! The rollout engine: drives the think -> tool-call loop, executes branch
//! plans as partial rollouts with prefix reuse under bounded parallelism,
//! and keeps the cost ledger.

mod ledger;
mod plan;

pub use ledger::{para_factor_bound, reuse_factor, total_speedup_estimate, BranchCost, CostLedger};
pub use plan::{plan_branches, BranchPlan, ResidualGrant};

use crate::backends::conversation::{messages_after_steps, ROLLOUT_SYSTEM_PROMPT};
use crate::backends::tools::{truncate_response, ToolRegistry};
use crate::backends::{BackendError, FinishReason, ModelBackend, ModelRequest};
use crate::model::{
    extract_final_answer, segment_step, Origin, SegmentError, Step, ToolResponse, Trajectory,
    RunConfig, TRAJECTORY_SCHEMA_VERSION,
};
use std::sync::Arc;
use thiserror::Error;
use tokio::sync::Semaphore;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("branch step index {index} out of range for parent with {steps} steps")]
    InvalidBranchIndex { index: usize, steps: usize },
    #[error("ledger has no newly generated tokens")]
    ZeroSuffix,
    #[error("every planned branch failed")]
    AllBranchesFailed,
    #[error("branch task join failure: {0}")]
    Join(String),
}

/// Model backend plus tool registry a rollout runs against.
#[derive(Clone)]
pub struct Backends {
    pub model: Arc<dyn ModelBackend>,
    pub tools: ToolRegistry,
    /// Tool responses are truncated to this many tokens.
    pub tool_response_token_cap: usize,
    /// Global in-flight backend-call cap shared across concurrent tasks;
    /// every model and tool call holds one permit while it runs.
    pub call_permits: Option<Arc<Semaphore>>,
}

impl Backends {
    pub fn new(model: Arc<dyn ModelBackend>, tools: ToolRegistry) -> Self {
        Self { model, tools, tool_response_token_cap: 4096, call_permits: None }
    }

    pub fn with_response_cap(mut self, cap: usize) -> Self {
        self.tool_response_token_cap = cap;
        self
    }

    pub fn with_call_permits(mut self, permits: Option<Arc<Semaphore>>) -> Self {
        self.call_permits = permits;
        self
    }

    async fn permit(&self) -> Option<tokio::sync::OwnedSemaphorePermit> {
        match &self.call_permits {
            Some(sem) => Some(Arc::clone(sem).acquire_owned().await.expect("permit semaphore never closes")),
            None => None,
        }
    }
}

/// Deterministic seed for branch `ordinal` launched at `step` of a parent
/// sampled with `parent_seed`.
pub fn derive_branch_seed(parent_seed: i64, step: usize, ordinal: usize) -> i64 {
    let mixed = splitmix64(
        splitmix64(parent_seed as u64 ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            ^ (ordinal as u64 + 1),
    );
    (mixed & 0x7fff_ffff) as i64
}

/// Deterministic seed for from-scratch rollout `ordinal` of a task.
pub fn derive_rollout_seed(base_seed: i64, task_id: &str, ordinal: usize) -> i64 {
    let mut acc = base_seed as u64;
    for b in task_id.as_bytes() {
        acc = splitmix64(acc ^ u64::from(*b));
    }
    (splitmix64(acc ^ (ordinal as u64 + 1)) & 0x7fff_ffff) as i64
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generated-token count of the parent's steps before `branch_step_index`:
/// the p value of a branch launched there.
pub fn prefix_generated_tokens(parent: &Trajectory, branch_step_index: usize) -> usize {
    parent.steps[..branch_step_index]
        .iter()
        .map(|s| s.generated_token_count())
        .sum()
}

fn prefix_prompt_tokens(counter: &dyn ModelBackend, question: &str, steps: &[Step]) -> usize {
    counter.count_tokens(ROLLOUT_SYSTEM_PROMPT)
        + counter.count_tokens(question)
        + steps
            .iter()
            .filter_map(|s| s.tool_response.as_ref())
            .map(|r| r.token_count)
            .sum::<usize>()
}

/// The shared think -> tool-call loop, resuming after `prefix` steps.
#[allow(clippy::too_many_arguments)]
async fn run_loop(
    task_id: &str,
    question: &str,
    trajectory_id: String,
    origin: Origin,
    prefix: Vec<Step>,
    config: &RunConfig,
    backends: &Backends,
    seed: i64,
) -> Result<Trajectory, EngineError> {
    let mut steps = prefix;
    let mut generated: usize = steps.iter().map(|s| s.generated_token_count()).sum();
    let mut prompt_tokens = prefix_prompt_tokens(backends.model.as_ref(), question, &steps);
    let mut final_answer = None;

    while steps.len() < config.max_steps && generated < config.max_generated_tokens {
        let request = ModelRequest {
            messages: messages_after_steps(question, &steps),
            tool_schemas: backends.tools.schemas(),
            temperature: config.temperature,
            seed,
            logprobs_required: true,
            max_tokens: (config.max_generated_tokens - generated).max(1),
        };
        let response = {
            let _permit = backends.permit().await;
            backends.model.chat_generate(request).await?
        };
        let mut step = segment_step(&response.stream, steps.len())?;
        generated += step.generated_token_count();

        if step.is_terminal {
            final_answer = extract_final_answer(&response.stream)?;
            steps.push(step);
            break;
        }

        let call = step.tool_call.as_ref().expect("non-terminal step carries a call");
        let outcome = {
            let _permit = backends.permit().await;
            backends.tools.invoke(&call.tool_name, &call.arguments).await
        };
        let content = truncate_response(&outcome.content, backends.tool_response_token_cap);
        let token_count = backends.model.count_tokens(&content);
        prompt_tokens += token_count;
        step.tool_response = Some(ToolResponse { content, token_count, error_flag: outcome.error_flag });
        steps.push(step);

        if response.finish_reason == FinishReason::Length {
            tracing::warn!(trajectory = %trajectory_id, "generation cut by length mid-loop");
            break;
        }
    }

    if final_answer.is_none() {
        tracing::debug!(trajectory = %trajectory_id, steps = steps.len(), generated, "budget exhausted without a terminal answer");
    }
    Ok(Trajectory {
        schema: TRAJECTORY_SCHEMA_VERSION,
        id: trajectory_id,
        task_id: task_id.to_string(),
        origin,
        steps,
        final_answer,
        generated_token_count: generated,
        prompt_token_count: prompt_tokens,
        sampling_seed: seed,
    })
}

/// Runs one from-scratch rollout: generate, segment, invoke the named tool,
/// append the response, repeat until a terminal step or a budget cap. A
/// budget-capped trajectory comes back with `final_answer` absent; an
/// unknown tool becomes an errored tool response and the loop continues.
pub async fn rollout(
    task_id: &str,
    question: &str,
    trajectory_id: String,
    config: &RunConfig,
    backends: &Backends,
    seed: i64,
) -> Result<Trajectory, EngineError> {
    run_loop(
        task_id,
        question,
        trajectory_id,
        Origin::FromScratch,
        Vec::new(),
        config,
        backends,
        seed,
    )
    .await
}

/// Resumes generation from `parent` at `branch_step_index`: the steps before
/// it (with their tool responses) are reused verbatim as the conversation
/// prefix, and the uncertain step itself is regenerated under a fresh seed.
pub async fn partial_rollout(
    parent: &Trajectory,
    branch_step_index: usize,
    question: &str,
    trajectory_id: String,
    config: &RunConfig,
    backends: &Backends,
    seed: i64,
) -> Result<Trajectory, EngineError> {
    if branch_step_index >= parent.steps.len() {
        return Err(EngineError::InvalidBranchIndex {
            index: branch_step_index,
            steps: parent.steps.len(),
        });
    }
    run_loop(
        &parent.task_id,
        question,
        trajectory_id,
        Origin::Branch { parent_id: parent.id.clone(), branch_step_index },
        parent.steps[..branch_step_index].to_vec(),
        config,
        backends,
        seed,
    )
    .await
}

/// Result of executing a branch plan: all N trajectories plus the ledger.
#[derive(Debug, Clone)]
pub struct ExecutionOutput {
    pub trajectories: Vec<Trajectory>,
    pub ledger: CostLedger,
}

/// A branch that failed is returned as its reused prefix with no answer, so
/// the result set always has N members.
fn stub_branch(
    parent: &Trajectory,
    branch_step_index: usize,
    trajectory_id: String,
    seed: i64,
    question: &str,
    backends: &Backends,
) -> Trajectory {
    let steps = parent.steps[..branch_step_index].to_vec();
    let generated = steps.iter().map(|s| s.generated_token_count()).sum();
    let prompt_tokens = prefix_prompt_tokens(backends.model.as_ref(), question, &steps);
    Trajectory {
        schema: TRAJECTORY_SCHEMA_VERSION,
        id: trajectory_id,
        task_id: parent.task_id.clone(),
        origin: Origin::Branch { parent_id: parent.id.clone(), branch_step_index },
        steps,
        final_answer: None,
        generated_token_count: generated,
        prompt_token_count: prompt_tokens,
        sampling_seed: seed,
    }
}

/// Executes every planned partial rollout with at most `parallelism_p` in
/// flight and returns the M initial plus N - M branch trajectories, sorted
/// by id. Branch ids and seeds are deterministic functions of (parent,
/// step, ordinal), so with a scripted backend the result set is identical
/// regardless of scheduling interleaving. Per-branch failures become stub
/// trajectories; the call fails only if every branch failed.
pub async fn execute_parallel(
    plan: &BranchPlan,
    initial: &[Trajectory],
    question: &str,
    config: &RunConfig,
    backends: &Backends,
) -> Result<ExecutionOutput, EngineError> {
    let mut ledger = CostLedger::new(backends.model.cost_model());
    let semaphore = Arc::new(Semaphore::new(config.parallelism_p.max(1)));
    let mut handles = Vec::new();

    for point in &plan.branch_points {
        let parent = initial
            .iter()
            .find(|t| t.id == point.trajectory_id)
            .ok_or_else(|| EngineError::Join(format!("plan references unknown parent {}", point.trajectory_id)))?;
        for ordinal in 0..point.allocated_branches {
            let branch_id = format!("{}-s{:03}-b{:02}", parent.id, point.step_index, ordinal);
            let seed = derive_branch_seed(parent.sampling_seed, point.step_index, ordinal);
            let parent = parent.clone();
            let question = question.to_string();
            let config = config.clone();
            let backends = backends.clone();
            let semaphore = Arc::clone(&semaphore);
            let step_index = point.step_index;
            handles.push(tokio::spawn(async move {
                let _permit = semaphore.acquire_owned().await.expect("semaphore never closes");
                let result = partial_rollout(
                    &parent,
                    step_index,
                    &question,
                    branch_id.clone(),
                    &config,
                    &backends,
                    seed,
                )
                .await;
                (parent, step_index, branch_id, seed, question, result)
            }));
        }
    }

    let planned = handles.len();
    let mut failures = 0usize;
    let mut trajectories: Vec<Trajectory> = initial.to_vec();
    for handle in handles {
        let (parent, step_index, branch_id, seed, question, result) =
            handle.await.map_err(|e| EngineError::Join(e.to_string()))?;
        let branch = match result {
            Ok(t) => t,
            Err(e) => {
                failures += 1;
                tracing::warn!(branch = %branch_id, error = %e, "branch failed; keeping its prefix stub");
                stub_branch(&parent, step_index, branch_id, seed, &question, backends)
            }
        };
        trajectories.push(branch);
    }
    if planned > 0 && failures == planned {
        return Err(EngineError::AllBranchesFailed);
    }

    trajectories.sort_by(|a, b| a.id.cmp(&b.id));
    for t in &trajectories {
        let prefix_tokens = match &t.origin {
            Origin::FromScratch => 0,
            Origin::Branch { parent_id, branch_step_index } => {
                let parent = trajectories
                    .iter()
                    .find(|p| p.id == *parent_id)
                    .expect("branch parent is in the result set");
                prefix_generated_tokens(parent, *branch_step_index)
            }
        };
        ledger.branches.push(BranchCost {
            branch_id: t.id.clone(),
            prefix_tokens,
            suffix_tokens: t.generated_token_count - prefix_tokens,
        });
        ledger.prompt_tokens_total += t.prompt_token_count;
    }

    Ok(ExecutionOutput { trajectories, ledger })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::conversation::conversation_hash;
    use crate::backends::{ChatMessage, ModelResponse, TokenCounter};
    use crate::model::segment::{ScoredToken, THINK_CLOSE, THINK_OPEN, TOOL_CLOSE, TOOL_OPEN};
    use crate::model::AssistantStream;
    use async_trait::async_trait;
    use std::collections::HashMap;
    use std::sync::Mutex;

    /// Minimal in-test scripted model: conversation-hash -> per-seed reply.
    struct TableModel {
        replies: HashMap<(String, i64), ModelResponse>,
        calls: Mutex<usize>,
    }

    impl TokenCounter for TableModel {}

    #[async_trait]
    impl ModelBackend for TableModel {
        async fn chat_generate(&self, request: ModelRequest) -> Result<ModelResponse, BackendError> {
            *self.calls.lock().unwrap() += 1;
            let key = (conversation_hash(&request.messages), request.seed);
            self.replies
                .get(&key)
                .cloned()
                .ok_or_else(|| BackendError::ScriptMiss(format!("no reply for seed {}", request.seed)))
        }
    }

    fn call_reply(think: &str, tool: &str, queries: &str) -> ModelResponse {
        let payload = format!("{{\"name\": \"{tool}\", \"arguments\": {{\"queries\": [\"{queries}\"]}}}}");
        let mut tokens = vec![
            ScoredToken::new(THINK_OPEN, 0.0),
            ScoredToken::new(think, -0.2),
            ScoredToken::new(THINK_CLOSE, 0.0),
            ScoredToken::new(TOOL_OPEN, 0.0),
        ];
        tokens.push(ScoredToken::new(payload, -0.4));
        tokens.push(ScoredToken::new(TOOL_CLOSE, 0.0));
        ModelResponse {
            stream: AssistantStream { tokens, structured_calls: vec![] },
            finish_reason: FinishReason::ToolCall,
        }
    }

    fn final_reply(answer: &str) -> ModelResponse {
        ModelResponse {
            stream: AssistantStream {
                tokens: vec![
                    ScoredToken::new(THINK_OPEN, 0.0),
                    ScoredToken::new("done", -0.1),
                    ScoredToken::new(THINK_CLOSE, 0.0),
                    ScoredToken::new(format!(" {answer}"), -0.1),
                ],
                structured_calls: vec![],
            },
            finish_reason: FinishReason::Terminal,
        }
    }

    struct NoTools;
    #[async_trait]
    impl crate::backends::SearchProvider for NoTools {
        async fn search(
            &self,
            queries: &[String],
        ) -> Result<Vec<Vec<crate::backends::SearchResult>>, BackendError> {
            Ok(queries.iter().map(|_| vec![]).collect())
        }
    }
    #[async_trait]
    impl crate::backends::VisitProvider for NoTools {
        async fn visit(
            &self,
            urls: &[String],
            _goal: &str,
        ) -> Result<Vec<crate::backends::VisitResult>, BackendError> {
            Ok(urls
                .iter()
                .map(|u| crate::backends::VisitResult { url: u.clone(), content: Some("x".into()), error: None })
                .collect())
        }
    }

    fn backends_with_replies(replies: Vec<(Vec<ChatMessage>, i64, ModelResponse)>) -> Backends {
        let table = replies
            .into_iter()
            .map(|(msgs, seed, resp)| ((conversation_hash(&msgs), seed), resp))
            .collect();
        let model = Arc::new(TableModel { replies: table, calls: Mutex::new(0) });
        let tools = ToolRegistry::standard(Arc::new(NoTools), Arc::new(NoTools));
        Backends::new(model, tools)
    }

    fn config() -> RunConfig {
        RunConfig { max_steps: 8, ..RunConfig::default() }
    }

    #[tokio::test]
    async fn rollout_runs_to_a_terminal_answer() {
        let question = "q?";
        let step0 = call_reply("look", "search", "a");
        let conv0 = messages_after_steps(question, &[]);
        let seg0 = {
            let mut s = segment_step(&step0.stream, 0).unwrap();
            s.tool_response = Some(ToolResponse {
                content: truncate_response("Results for \"a\":\n  (no results)\n", 4096),
                token_count: 0,
                error_flag: false,
            });
            s
        };
        // Token count must match what the engine computes.
        let mut seg0 = seg0;
        let counter = TableModel { replies: HashMap::new(), calls: Mutex::new(0) };
        seg0.tool_response.as_mut().unwrap().token_count =
            counter.count_tokens(&seg0.tool_response.as_ref().unwrap().content);
        let conv1 = messages_after_steps(question, std::slice::from_ref(&seg0));

        let backends = backends_with_replies(vec![
            (conv0, 7, step0),
            (conv1, 7, final_reply("42")),
        ]);
        let traj = rollout("task", question, "t-r00".into(), &config(), &backends, 7)
            .await
            .unwrap();
        assert_eq!(traj.steps.len(), 2);
        assert_eq!(traj.final_answer.as_deref(), Some("42"));
        assert!(crate::model::validate_trajectory(&traj).is_empty());
    }

    #[tokio::test]
    async fn max_steps_cap_flags_the_trajectory_by_absent_answer() {
        let question = "q?";
        let conv0 = messages_after_steps(question, &[]);
        // A fixture that never terminates: only step 0 is scripted and the
        // cap stops the loop right after it.
        let backends = backends_with_replies(vec![(conv0, 1, call_reply("loop", "search", "x"))]);
        let cfg = RunConfig { max_steps: 1, ..config() };
        let traj = rollout("task", question, "t-r00".into(), &cfg, &backends, 1)
            .await
            .unwrap();
        assert_eq!(traj.steps.len(), 1);
        assert_eq!(traj.final_answer, None);
    }

    #[tokio::test]
    async fn unknown_tool_is_recorded_and_the_loop_continues() {
        let question = "q?";
        let step0 = call_reply("try", "frobnicate", "x");
        let conv0 = messages_after_steps(question, &[]);
        let mut seg0 = segment_step(&step0.stream, 0).unwrap();
        let counter = TableModel { replies: HashMap::new(), calls: Mutex::new(0) };
        let content = "unknown tool: frobnicate".to_string();
        seg0.tool_response = Some(ToolResponse {
            token_count: counter.count_tokens(&content),
            content,
            error_flag: true,
        });
        let conv1 = messages_after_steps(question, std::slice::from_ref(&seg0));
        let backends = backends_with_replies(vec![
            (conv0, 3, step0),
            (conv1, 3, final_reply("recovered")),
        ]);
        let traj = rollout("task", question, "t-r00".into(), &config(), &backends, 3)
            .await
            .unwrap();
        assert!(traj.steps[0].tool_response.as_ref().unwrap().error_flag);
        assert_eq!(traj.final_answer.as_deref(), Some("recovered"));
    }

    #[tokio::test]
    async fn branch_at_zero_degenerates_to_scratch_with_branch_origin() {
        let question = "q?";
        let conv0 = messages_after_steps(question, &[]);
        let backends = backends_with_replies(vec![(conv0, 99, final_reply("alt"))]);
        let parent = Trajectory {
            schema: TRAJECTORY_SCHEMA_VERSION,
            id: "p".into(),
            task_id: "task".into(),
            origin: Origin::FromScratch,
            steps: vec![Step {
                index: 0,
                reasoning_tokens: vec![],
                tool_call: None,
                tool_response: None,
                is_terminal: true,
            }],
            final_answer: Some("x".into()),
            generated_token_count: 0,
            prompt_token_count: 0,
            sampling_seed: 1,
        };
        let branch = partial_rollout(&parent, 0, question, "p-s000-b00".into(), &config(), &backends, 99)
            .await
            .unwrap();
        assert_eq!(prefix_generated_tokens(&parent, 0), 0);
        assert_eq!(
            branch.origin,
            Origin::Branch { parent_id: "p".into(), branch_step_index: 0 }
        );
        assert_eq!(branch.final_answer.as_deref(), Some("alt"));
    }

    #[test]
    fn invalid_branch_index_is_rejected() {
        let parent = Trajectory {
            schema: TRAJECTORY_SCHEMA_VERSION,
            id: "p".into(),
            task_id: "task".into(),
            origin: Origin::FromScratch,
            steps: vec![],
            final_answer: None,
            generated_token_count: 0,
            prompt_token_count: 0,
            sampling_seed: 1,
        };
        let backends = backends_with_replies(vec![]);
        let err = futures::executor::block_on(partial_rollout(
            &parent,
            0,
            "q?",
            "b".into(),
            &config(),
            &backends,
            1,
        ))
        .unwrap_err();
        assert!(matches!(err, EngineError::InvalidBranchIndex { index: 0, steps: 0 }));
    }

    #[test]
    fn seed_derivation_is_deterministic_and_spread() {
        let a = derive_branch_seed(7, 3, 0);
        assert_eq!(a, derive_branch_seed(7, 3, 0));
        assert_ne!(a, derive_branch_seed(7, 3, 1));
        assert_ne!(a, derive_branch_seed(7, 4, 0));
        assert_ne!(derive_rollout_seed(1, "t1", 0), derive_rollout_seed(1, "t2", 0));
        assert!(a >= 0);
    }
}
