//! Shared fixtures and generators for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regsearch::backend::ScriptedBackend;
use regsearch::engine::{Engine, FixedClock, RunConfig, RunResult};
use regsearch::protocol::*;
use regsearch::tokenizer::{ApproxTokenizer, Tokenizer};
use regsearch::tools::{Document, ToolError, ToolExecutor, ToolInvoker, ToolRegistry, ToolResult, ToolSpec};
use serde_json::{json, Map, Value};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn load_script(name: &str) -> Vec<String> {
    let text = std::fs::read_to_string(fixture(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub const TWO_HOP_QUESTION: &str = "Who was US president in the year the Eiffel Tower was completed?";

pub fn fixture_tools() -> Arc<dyn ToolInvoker> {
    Arc::new(ToolRegistry::from_config_file(&fixture("tools.toml"), None).unwrap())
}

pub fn scripted_engine(script: Vec<String>, tools: Arc<dyn ToolInvoker>, config: RunConfig) -> Engine {
    Engine::new(Arc::new(ScriptedBackend::new(script)), tools, config).with_clock(Arc::new(FixedClock(1_700_000_000_000)))
}

pub fn run_two_hop() -> RunResult {
    scripted_engine(load_script("two_hop_script.json"), fixture_tools(), RunConfig::default())
        .run(Some("two-hop"), TWO_HOP_QUESTION)
}

pub fn act(payload: Payload) -> String {
    render_action(&payload).unwrap()
}

pub fn intent(goal: &str) -> String {
    act(Payload::IntentRefinement(IntentPayload {
        refined_goal: goal.into(),
        constraints: vec![],
    }))
}

pub fn framing(ids: &[&str], edges: &[(&str, &str)]) -> String {
    act(Payload::ProblemFraming(FramingPayload {
        tasks: ids
            .iter()
            .map(|id| TaskSpec {
                task_id: id.to_string(),
                description: format!("solve {id}"),
            })
            .collect(),
        edges: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
    }))
}

pub fn tool_call(task: &str, query: &str) -> String {
    let mut arguments = Map::new();
    arguments.insert("query".into(), json!(query));
    act(Payload::ToolCall(ToolCallPayload {
        task_id: task.into(),
        tool_name: "search".into(),
        arguments,
    }))
}

pub fn extraction(task: &str, facts: &[&str]) -> String {
    act(Payload::DocExtraction(DocExtractionPayload {
        task_id: task.into(),
        facts: facts.iter().map(|s| s.to_string()).collect(),
        source_ids: vec![],
    }))
}

pub fn answer(task: &str, a: &str) -> String {
    act(Payload::TaskAnswer(TaskAnswerPayload {
        answers: vec![TaskAnswerEntry {
            task_id: task.into(),
            answer: a.into(),
        }],
    }))
}

pub fn final_answer(a: &str) -> String {
    act(Payload::FinalAnswer(FinalAnswerPayload { answer: a.into() }))
}

/// Script for a one-task run with exactly 8 actions.
pub fn eight_step_script(final_text: &str) -> Vec<String> {
    vec![
        intent("find the answer"),
        framing(&["t1"], &[]),
        tool_call("t1", "first query"),
        extraction("t1", &["fact one"]),
        tool_call("t1", "second query"),
        extraction("t1", &["fact two"]),
        answer("t1", final_text),
        final_answer(final_text),
    ]
}

// ---------------------------------------------------------------------------
// Synthetic long-horizon fixture

pub const SYNTH_TOOL_TOKENS: usize = 500;
pub const SYNTH_FACT_TOKENS: usize = 50;
pub const SYNTH_TASKS: usize = 7;

/// `n` distinct word tokens for the approximate tokenizer.
pub fn words(prefix: &str, n: usize) -> String {
    (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(" ")
}

/// Returns three documents whose rendering is exactly
/// [`SYNTH_TOOL_TOKENS`] tokens.
pub struct SyntheticSearch;

impl SyntheticSearch {
    pub fn result(query: &str) -> ToolResult {
        let tok = ApproxTokenizer;
        let tag: String = query.chars().filter(|c| c.is_alphanumeric()).collect();
        let mut docs: Vec<Document> = (0..3)
            .map(|i| Document {
                source_id: format!("syn:{tag}{i}"),
                title: format!("Doc {i}"),
                text: String::new(),
            })
            .collect();
        let overhead = tok.count(&ToolResult { documents: docs.clone(), raw: None }.render());
        let body = SYNTH_TOOL_TOKENS - overhead;
        for (i, d) in docs.iter_mut().enumerate() {
            let n = body / 3 + usize::from(i < body % 3);
            d.text = words(&format!("w{tag}d{i}x"), n);
        }
        let result = ToolResult { documents: docs, raw: None };
        assert_eq!(tok.count(&result.render()), SYNTH_TOOL_TOKENS);
        result
    }
}

impl ToolExecutor for SyntheticSearch {
    fn execute(&self, args: &Map<String, Value>) -> Result<ToolResult, ToolError> {
        Ok(Self::result(args["query"].as_str().unwrap_or_default()))
    }
}

pub fn synthetic_tools() -> Arc<dyn ToolInvoker> {
    Arc::new(
        ToolRegistry::new()
            .register_tool(
                ToolSpec::search("search", "synthetic passages"),
                Arc::new(SyntheticSearch),
            )
            .unwrap(),
    )
}

/// Seven chained tasks, each solved by search, extraction of a 50-token
/// fact and an answer: 21 solving turns plus the final answer.
pub fn synthetic_script() -> Vec<String> {
    let ids: Vec<String> = (1..=SYNTH_TASKS).map(|i| format!("t{i}")).collect();
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let edges: Vec<(&str, &str)> = id_refs.windows(2).map(|w| (w[0], w[1])).collect();
    let mut script = vec![intent("resolve a seven hop chain"), framing(&id_refs, &edges)];
    for (i, id) in ids.iter().enumerate() {
        script.push(tool_call(id, &format!("query {i}")));
        let fact = words(&format!("f{i}x"), SYNTH_FACT_TOKENS);
        assert_eq!(ApproxTokenizer.count(&fact), SYNTH_FACT_TOKENS);
        script.push(extraction(id, &[&fact]));
        script.push(answer(id, &format!("a{i}")));
    }
    script.push(final_answer(&format!("a{}", SYNTH_TASKS - 1)));
    script
}

pub fn run_synthetic() -> RunResult {
    scripted_engine(synthetic_script(), synthetic_tools(), RunConfig::default())
        .run(Some("synthetic"), "What is at the end of the seven hop chain?")
}

// ---------------------------------------------------------------------------
// Random actions and mutations

fn rand_text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 12] = [
        "alpha", "Beta", "42", " ", "\"", "\\", "\n", "</tool_call>", "{}", "é", "日本", "<x>",
    ];
    let n = rng.gen_range(0..6);
    (0..n).map(|_| *PIECES.choose(rng).unwrap()).collect()
}

fn rand_nonempty(rng: &mut ChaCha8Rng) -> String {
    format!("v{}{}", rng.gen_range(0..1000), rand_text(rng))
}

fn rand_id(rng: &mut ChaCha8Rng) -> String {
    format!("t{}", rng.gen_range(1..20))
}

fn rand_tasks(rng: &mut ChaCha8Rng) -> (Vec<TaskSpec>, Vec<Edge>) {
    let n = rng.gen_range(1..5);
    let tasks = (0..n)
        .map(|_| TaskSpec {
            task_id: rand_id(rng),
            description: rand_text(rng),
        })
        .collect();
    let edges = (0..rng.gen_range(0..3)).map(|_| (rand_id(rng), rand_id(rng))).collect();
    (tasks, edges)
}

pub fn random_payload(rng: &mut ChaCha8Rng) -> Payload {
    match rng.gen_range(0..8) {
        0 => Payload::IntentRefinement(IntentPayload {
            refined_goal: rand_nonempty(rng),
            constraints: (0..rng.gen_range(0..3)).map(|_| rand_text(rng)).collect(),
        }),
        1 => {
            let (tasks, edges) = rand_tasks(rng);
            Payload::ProblemFraming(FramingPayload { tasks, edges })
        }
        2 => {
            let mut arguments = Map::new();
            arguments.insert("query".into(), json!(rand_text(rng)));
            if rng.gen_bool(0.5) {
                arguments.insert("k".into(), json!(rng.gen_range(-5..50)));
            }
            if rng.gen_bool(0.3) {
                arguments.insert("nested".into(), json!({"z": [1, 2.5, null], "a": true}));
            }
            Payload::ToolCall(ToolCallPayload {
                task_id: rand_id(rng),
                tool_name: "search".into(),
                arguments,
            })
        }
        3 => Payload::DocExtraction(DocExtractionPayload {
            task_id: rand_id(rng),
            facts: (0..rng.gen_range(0..4)).map(|_| rand_text(rng)).collect(),
            source_ids: (0..rng.gen_range(0..3)).map(|_| rand_nonempty(rng)).collect(),
        }),
        4 => Payload::TaskAnswer(TaskAnswerPayload {
            answers: (0..rng.gen_range(1..4))
                .map(|_| TaskAnswerEntry {
                    task_id: rand_id(rng),
                    answer: rand_text(rng),
                })
                .collect(),
        }),
        5 => Payload::FinalAnswer(FinalAnswerPayload {
            answer: rand_text(rng),
        }),
        6 => Payload::RevisitTask(RevisitPayload {
            task_id: rand_id(rng),
            reason: rand_text(rng),
        }),
        _ => {
            let (tasks, edges) = rand_tasks(rng);
            Payload::Replanning(ReplanPayload {
                reason: rand_text(rng),
                tasks,
                edges,
            })
        }
    }
}

fn required_field(kind: ActionKind) -> &'static str {
    match kind {
        ActionKind::IntentRefinement => "refined_goal",
        ActionKind::ProblemFraming => "tasks",
        ActionKind::ToolCall => "tool_name",
        ActionKind::DocExtraction => "facts",
        ActionKind::TaskAnswer => "answers",
        ActionKind::FinalAnswer => "answer",
        ActionKind::RevisitTask => "task_id",
        ActionKind::Replanning => "reason",
    }
}

/// Corrupts a valid rendered action so that it no longer parses.
pub fn mutate(rng: &mut ChaCha8Rng, action: &Action) -> String {
    let raw = &action.raw_text;
    let tag = action.kind().tag();
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let json = &raw[open.len()..raw.len() - close.len()];
    let mut obj: Map<String, Value> = serde_json::from_str(json).unwrap();
    match rng.gen_range(0..8) {
        0 => {
            let cut = rng.gen_range(0..raw.len());
            let cut = (0..=cut).rev().find(|i| raw.is_char_boundary(*i)).unwrap();
            raw[..cut].to_string()
        }
        1 => format!("<unknown_action>{json}</unknown_action>"),
        2 => {
            obj.remove(required_field(action.kind()));
            format!("{open}{}{close}", Value::Object(obj))
        }
        3 => {
            obj.insert("unexpected_field".into(), json!(1));
            format!("{open}{}{close}", Value::Object(obj))
        }
        4 => format!("{raw}\n{raw}"),
        5 => format!("{open}{json}</other_tag>"),
        6 => {
            obj.insert(required_field(action.kind()).into(), json!(12345));
            format!("{open}{}{close}", Value::Object(obj))
        }
        _ => format!("{open}{}{close}", &json[1..]),
    }
}
