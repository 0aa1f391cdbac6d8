//! Canned scripted scenarios for desk-scale verification and demo runs.
//!
//! Branch continuations are scripted per derived seed, so each scenario is
//! tied to the run configuration returned by its companion `*_config`
//! function and to the base seed it was built with.

use super::script::{
    AggregationFixture, NextSel, NodeAction, ScenarioScript, ScriptNode, ScriptTask, SearchFixture,
    TokenSpec, VisitFixture,
};
use super::ScriptedBackend;
use crate::aggregate::{EntityGraph, Relation};
use crate::backends::SearchResult;
use crate::engine::{derive_branch_seed, derive_rollout_seed};
use crate::model::{RunConfig, RegionStrategy};
use std::collections::BTreeMap;

/// Default base seed the canned scenarios are built for.
pub const DEFAULT_BASE_SEED: i64 = 42;

fn think_tokens(stem: &str, n: usize, lp: f64) -> Vec<TokenSpec> {
    (0..n)
        .map(|i| {
            let text = if i == 0 { format!("{stem}{i}") } else { format!(" {stem}{i}") };
            TokenSpec::new(text, lp)
        })
        .collect()
}

fn tool_node(
    think: Vec<TokenSpec>,
    tool: &str,
    arguments: serde_json::Value,
    payload_lp: f64,
    payload_tokens: usize,
    next: NextSel,
) -> ScriptNode {
    ScriptNode {
        think,
        action: NodeAction::ToolCall {
            tool: tool.into(),
            arguments,
            payload_logprobs: vec![payload_lp; payload_tokens],
        },
        next: Some(next),
        report: None,
        entity_graph: None,
    }
}

fn final_node(think: Vec<TokenSpec>, answer: &str) -> ScriptNode {
    ScriptNode {
        think,
        action: NodeAction::Final { answer: Some(answer.into()), answer_logprobs: vec![] },
        next: None,
        report: None,
        entity_graph: None,
    }
}

const FILLER: [&str; 12] = [
    "archive", "ledger", "records", "survey", "harbor", "annual", "report", "county", "index",
    "registry", "volume", "entry",
];

/// Deterministic filler text of exactly `n` whitespace tokens.
fn filler_words(n: usize, salt: usize) -> String {
    (0..n)
        .map(|i| FILLER[(i * 7 + salt) % FILLER.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

fn compile(script: ScenarioScript) -> ScriptedBackend {
    ScriptedBackend::from_script(script).expect("canned scenario compiles")
}

/// Small four-step scenario: three tool steps, then the answer "42".
/// Step 0 has exactly 7 think tokens and 9 call tokens, and the leaf carries
/// an explicit entity graph.
pub fn basic() -> ScriptedBackend {
    compile(basic_script())
}

/// The script behind [`basic`], exposed for oracle comparisons.
pub fn basic_script() -> ScenarioScript {
    let mut script = ScenarioScript::new("scenario-basic");
    let paris_url = "https://example.org/paris";
    let dead_url = "https://dead.example/x";

    script.search = vec![
        SearchFixture {
            query: "capital of France".into(),
            results: (0..10)
                .map(|i| SearchResult {
                    title: format!("France guide, part {i}"),
                    url: format!("https://example.org/fr/{i}"),
                    snippet: format!("Paris is the capital; see section {i}."),
                })
                .collect(),
        },
        SearchFixture {
            query: "population of Paris".into(),
            results: (0..3)
                .map(|i| SearchResult {
                    title: format!("Paris census {i}"),
                    url: format!("https://example.org/census/{i}"),
                    snippet: "About two million residents.".into(),
                })
                .collect(),
        },
    ];
    script.visit = vec![
        VisitFixture {
            url: paris_url.into(),
            goal: "find the plaque number".into(),
            content: Some("The plaque in the main hall reads 42.".into()),
            error: None,
        },
        VisitFixture {
            url: paris_url.into(),
            goal: "find the population".into(),
            content: Some("Roughly 2.1 million people live in Paris.".into()),
            error: None,
        },
        VisitFixture {
            url: dead_url.into(),
            goal: "find the plaque number".into(),
            content: None,
            error: Some("connection refused".into()),
        },
    ];

    let mut nodes = BTreeMap::new();
    nodes.insert(
        "n0".to_string(),
        tool_node(
            vec![
                TokenSpec::new("I", -0.12),
                TokenSpec::new(" should", -0.34),
                TokenSpec::new(" find", -0.21),
                TokenSpec::new(" the", -0.05),
                TokenSpec::new(" capital", -0.4),
                TokenSpec::new(" city", -0.18),
                TokenSpec::new(" first", -0.27),
            ],
            "search",
            serde_json::json!({"queries": ["capital of France"]}),
            -0.3,
            9,
            NextSel::wildcard("n1"),
        ),
    );
    nodes.insert(
        "n1".to_string(),
        tool_node(
            think_tokens("visit", 3, -0.2),
            "visit",
            serde_json::json!({"urls": [paris_url, dead_url], "goal": "find the plaque number"}),
            -0.15,
            12,
            NextSel::wildcard("n2"),
        ),
    );
    nodes.insert(
        "n2".to_string(),
        tool_node(
            think_tokens("check", 4, -0.25),
            "search",
            serde_json::json!({"queries": ["population of Paris"]}),
            -0.1,
            8,
            NextSel::wildcard("n3"),
        ),
    );
    let mut leaf = final_node(think_tokens("conclude", 5, -0.08), "42");
    leaf.entity_graph = Some(EntityGraph {
        vertices: vec![
            "Paris".into(),
            "France".into(),
            "plaque 42".into(),
            "main hall".into(),
            "Paris census".into(),
        ],
        relations: vec![
            Relation { source: "Paris".into(), label: "capital_of".into(), target: "France".into() },
            Relation { source: "plaque 42".into(), label: "located_in".into(), target: "main hall".into() },
        ],
        effective_flags: vec![true, true, true, true, false],
    });
    nodes.insert("n3".to_string(), leaf);

    script.tasks.push(ScriptTask {
        task_id: "basic-1".into(),
        question: "What number is engraved on the plaque of the Paris exhibit?".into(),
        gold_answer: Some("42".into()),
        root: NextSel::wildcard("n0").with_seed(7, "n0"),
        nodes,
        aggregation: Some(AggregationFixture {
            answer: "42".into(),
            justification: "The visit evidence pins the plaque number directly.".into(),
        }),
    });
    script
}

/// Plan for one scripted task: which steps branch and what each branch
/// answers.
struct BranchDesign<'a> {
    task_id: String,
    question: String,
    gold: &'a str,
    parent_answer: &'a str,
    /// Parent tool steps: (payload logprob, think tokens per step).
    parent_steps: Vec<f64>,
    think_tokens_per_step: usize,
    /// step index -> answers of the branches launched there (ordinal order).
    branches: Vec<(usize, Vec<&'a str>)>,
    aggregation_answer: &'a str,
    query_salt: usize,
}

fn branchy_style_task(base_seed: i64, design: BranchDesign<'_>) -> ScriptTask {
    let s0 = derive_rollout_seed(base_seed, &design.task_id, 0);
    let n_steps = design.parent_steps.len();
    let branch_map: BTreeMap<usize, &Vec<&str>> =
        design.branches.iter().map(|(t, a)| (*t, a)).collect();

    // Selector leading into parent position `t`, with per-seed branch edges.
    let sel_into = |t: usize| -> NextSel {
        let target = if t == n_steps { "leaf".to_string() } else { format!("p{t}") };
        let mut sel = NextSel::default().with_seed(s0, target);
        if let Some(answers) = branch_map.get(&t) {
            for ordinal in 0..answers.len() {
                sel = sel.with_seed(derive_branch_seed(s0, t, ordinal), format!("v{t}x{ordinal}"));
            }
        }
        sel
    };

    let mut nodes = BTreeMap::new();
    for (t, payload_lp) in design.parent_steps.iter().enumerate() {
        nodes.insert(
            format!("p{t}"),
            tool_node(
                think_tokens(&format!("s{t}w"), design.think_tokens_per_step, -0.2),
                "search",
                serde_json::json!({"queries": [format!("{} lead {t}", design.question)]}),
                *payload_lp,
                9,
                sel_into(t + 1),
            ),
        );
    }
    nodes.insert(
        "leaf".to_string(),
        final_node(think_tokens("fin", 6, -0.1), design.parent_answer),
    );

    for (t, answers) in &design.branches {
        for (ordinal, answer) in answers.iter().enumerate() {
            let v = format!("v{t}x{ordinal}");
            let f = format!("f{t}x{ordinal}");
            nodes.insert(
                v.clone(),
                tool_node(
                    think_tokens(&format!("alt{t}o{ordinal}w"), design.think_tokens_per_step, -0.3),
                    "search",
                    serde_json::json!({"queries": [format!(
                        "variant {t}.{ordinal} salt {}", design.query_salt
                    )]}),
                    -0.3,
                    9,
                    NextSel::wildcard(f.clone()),
                ),
            );
            nodes.insert(f, final_node(think_tokens("alt-fin", 5, -0.1), answer));
        }
    }

    ScriptTask {
        task_id: design.task_id,
        question: design.question,
        gold_answer: Some(design.gold.to_string()),
        root: sel_into(0),
        nodes,
        aggregation: Some(AggregationFixture {
            answer: design.aggregation_answer.to_string(),
            justification: "This reasoning chain grounds every subanswer in retrieved evidence.".into(),
        }),
    }
}

/// Two tasks with branch fan-out matching the default run configuration
/// (N=8, M=1, top-K=2, 3 branches per step, exploration region): the
/// highest-PPL step takes 4 branches (3 plus the residual), the next takes
/// 3. The designated aggregation answer is a minority answer.
pub fn branchy(base_seed: i64) -> ScriptedBackend {
    compile(branchy_script(base_seed))
}

pub fn branchy_script(base_seed: i64) -> ScenarioScript {
    let mut script = ScenarioScript::new("scenario-branchy");
    script.tasks.push(branchy_style_task(
        base_seed,
        BranchDesign {
            task_id: "branchy-1".into(),
            question: "Which codename did the survey assign to the northern route?".into(),
            gold: "Beta",
            parent_answer: "Alpha",
            parent_steps: vec![-0.1, -0.1, -2.0, -0.1, -1.5, -0.1],
            think_tokens_per_step: 5,
            branches: vec![(2, vec!["Alpha", "Beta", "Alpha", "Gamma"]), (4, vec!["Alpha", "Beta", "Alpha"])],
            aggregation_answer: "Beta",
            query_salt: 1,
        },
    ));
    script.tasks.push(branchy_style_task(
        base_seed,
        BranchDesign {
            task_id: "branchy-2".into(),
            question: "Which city hosted the misfiled 1907 exposition records?".into(),
            gold: "Lyon",
            parent_answer: "Paris",
            parent_steps: vec![-0.1, -0.1, -2.0, -0.1, -1.5, -0.1],
            think_tokens_per_step: 5,
            branches: vec![(2, vec!["Paris", "Lyon", "Paris", "Nice"]), (4, vec!["Paris", "Lyon", "Paris"])],
            aggregation_answer: "Lyon",
            query_salt: 2,
        },
    ));
    script
}

/// Run configuration the branchy scenario is scripted for (the default
/// settings).
pub fn branchy_config() -> RunConfig {
    RunConfig::default()
}

/// One task with long low-uncertainty prefixes and late high-uncertainty
/// steps, so partial rollouts reuse most of the parent's generated tokens.
pub fn longprefix(base_seed: i64) -> ScriptedBackend {
    compile(longprefix_script(base_seed))
}

pub fn longprefix_script(base_seed: i64) -> ScenarioScript {
    let mut script = ScenarioScript::new("scenario-longprefix");
    let mut parent_steps = vec![-0.05; 12];
    parent_steps[10] = -2.2;
    parent_steps[11] = -1.8;
    script.tasks.push(branchy_style_task(
        base_seed,
        BranchDesign {
            task_id: "longprefix-1".into(),
            question: "Which lighthouse keeper logged the 1921 meteor shower?".into(),
            gold: "Neptune Quay",
            parent_answer: "Neptune Quay",
            parent_steps,
            think_tokens_per_step: 40,
            branches: vec![
                (10, vec!["Neptune Quay", "Harbor West", "Neptune Quay", "Harbor West"]),
                (11, vec!["Neptune Quay", "Harbor West", "Neptune Quay"]),
            ],
            aggregation_answer: "Neptune Quay",
            query_salt: 3,
        },
    ));
    script
}

pub fn longprefix_config() -> RunConfig {
    RunConfig::default()
}

/// One long single-path task whose tool responses push the trajectory
/// context past 20k tokens; the scripted compressor reduces it to a small
/// report.
pub fn compress_long(base_seed: i64) -> ScriptedBackend {
    compile(compress_long_script(base_seed))
}

pub fn compress_long_script(base_seed: i64) -> ScenarioScript {
    let mut script = ScenarioScript::new("scenario-compress");
    script.tool_response_token_cap = 8192;
    let task_id = "compress-1";
    let s0 = derive_rollout_seed(base_seed, task_id, 0);

    let n_steps = 6;
    let words_per_page = 3400;
    let mut nodes = BTreeMap::new();
    for t in 0..n_steps {
        let url = format!("https://example.org/archive/{t}");
        script.visit.push(VisitFixture {
            url: url.clone(),
            goal: "collect the ledger entries".into(),
            content: Some(filler_words(words_per_page, t)),
            error: None,
        });
        let next = if t + 1 == n_steps { "leaf".to_string() } else { format!("p{}", t + 1) };
        nodes.insert(
            format!("p{t}"),
            tool_node(
                think_tokens(&format!("dig{t}w"), 20, -0.15),
                "visit",
                serde_json::json!({"urls": [url], "goal": "collect the ledger entries"}),
                -0.1,
                10,
                NextSel::wildcard(next),
            ),
        );
    }
    nodes.insert("leaf".to_string(), final_node(think_tokens("wrap", 8, -0.05), "Arles"));

    script.tasks.push(ScriptTask {
        task_id: task_id.into(),
        question: "Which town's ledgers mention the drowned bell tower?".into(),
        gold_answer: Some("Arles".into()),
        root: NextSel::wildcard("p0").with_seed(s0, "p0"),
        nodes,
        aggregation: Some(AggregationFixture {
            answer: "Arles".into(),
            justification: "The ledgers converge on one town.".into(),
        }),
    });
    script
}

/// Single-rollout configuration for the compression scenario.
pub fn compress_long_config() -> RunConfig {
    RunConfig { sampling_budget_n: 1, initial_rollouts_m: 1, ..RunConfig::default() }
}

/// Four tasks with hand-labeled gold answers and a designed mix of correct
/// and incorrect rollouts: per-task NoScaling pass fractions are 3/4, 4/4,
/// 1/4, and 0/4, and the scripted aggregation answers are right on the
/// first two tasks and wrong on the last two.
pub fn eval_suite(base_seed: i64) -> ScriptedBackend {
    compile(eval_suite_script(base_seed))
}

pub fn eval_suite_script(base_seed: i64) -> ScenarioScript {
    let mut script = ScenarioScript::new("scenario-eval");
    let designs: Vec<(usize, Vec<&str>, bool)> = vec![
        // (task ordinal, branch answers, parent correct)
        (1, vec!["gold-1", "gold-1", "offtrack-1"], true),
        (2, vec!["gold-2", "gold-2", "gold-2"], true),
        (3, vec!["offtrack-3", "gold-3", "offtrack-3"], false),
        (4, vec!["offtrack-4", "offtrack-4", "offtrack-4"], false),
    ];
    for (i, branch_answers, parent_correct) in designs {
        let gold = format!("gold-{i}");
        let wrong = format!("offtrack-{i}");
        let parent_answer = if parent_correct { gold.clone() } else { wrong.clone() };
        let aggregation_answer = if i <= 2 { gold.clone() } else { wrong.clone() };
        script.tasks.push(branchy_style_task(
            base_seed,
            BranchDesign {
                task_id: format!("eval-{i}"),
                question: format!("Scripted evaluation question number {i}?"),
                gold: &gold,
                parent_answer: &parent_answer,
                parent_steps: vec![-0.4, -1.2],
                think_tokens_per_step: 4,
                branches: vec![(1, branch_answers)],
                aggregation_answer: &aggregation_answer,
                query_salt: 10 + i,
            },
        ));
    }
    script
}

/// Configuration the evaluation suite is scripted for: N=4, M=1, top-1
/// exploration step, 3 branches.
pub fn eval_suite_config() -> RunConfig {
    RunConfig {
        sampling_budget_n: 4,
        initial_rollouts_m: 1,
        branch_top_k: 1,
        branches_per_step: 3,
        region_strategy: RegionStrategy::Exploration,
        ..RunConfig::default()
    }
}

/// Looks up a canned scenario by name, as used by `builtin:<name>` scenario
/// references in configuration.
pub fn by_name(name: &str, base_seed: i64) -> Option<ScriptedBackend> {
    match name {
        "basic" => Some(basic()),
        "branchy" => Some(branchy(base_seed)),
        "longprefix" => Some(longprefix(base_seed)),
        "compress" => Some(compress_long(base_seed)),
        "eval" => Some(eval_suite(base_seed)),
        _ => None,
    }
}

/// The run configuration a canned scenario is scripted for.
pub fn config_for(name: &str) -> Option<RunConfig> {
    match name {
        "basic" => Some(RunConfig { sampling_budget_n: 1, initial_rollouts_m: 1, ..RunConfig::default() }),
        "branchy" => Some(branchy_config()),
        "longprefix" => Some(longprefix_config()),
        "compress" => Some(compress_long_config()),
        "eval" => Some(eval_suite_config()),
        _ => None,
    }
}
