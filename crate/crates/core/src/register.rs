//! The context register: refined intent, archived plans, and the current
//! plan state. The register is the only durable memory of a run; it is
//! updated by deterministic code and rendered as the model's input.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::plan::{DagPlan, PlanError, TaskNode, TaskStatus};
use crate::protocol::{canonical_json, Action, ActionKind, IntentPayload, Payload, Subspace};
use crate::tokenizer::Tokenizer;
use crate::tools::ToolResult;

pub const REGISTER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Register {
    pub intent: IntentPayload,
    pub plan_history: Vec<PlanSnapshot>,
    pub current: CurrentPlan,
    /// Number of solving-stage actions applied so far.
    pub steps_applied: u64,
}

/// A discarded plan, archived with the statuses it had when replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSnapshot {
    pub plan: DagPlan,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentPlan {
    pub plan: DagPlan,
    pub revisit_history: Vec<RevisitRecord>,
    pub tool_log: Vec<ToolLogEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisitRecord {
    pub task_id: String,
    pub discarded_answer: String,
    pub reason: String,
}

/// One tool call, condensed. Raw documents are never stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolLogEntry {
    pub step_index: u64,
    pub task_id: String,
    pub tool_name: String,
    pub arguments: Map<String, Value>,
    pub condensed_facts: Vec<String>,
    pub source_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegisterError {
    #[error("<{0}> is a planning action and is only legal during holistic planning")]
    IllegalActionInStage(ActionKind),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("a tool result must accompany tool_call actions and only those (got {kind} with result present = {present})")]
    ToolResultMismatch { kind: ActionKind, present: bool },
    #[error("doc_extraction for task {0:?} has no preceding tool_call in the current plan")]
    NoToolCallForTask(String),
    #[error("rendered context is {tokens} tokens, over the {cap}-token cap")]
    ContextOverflow { tokens: usize, cap: usize },
    #[error("register snapshot: {0}")]
    Snapshot(String),
}

/// Rendered model input. The stage prompt occupies `text[..prompt_end]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextText {
    pub text: String,
    pub prompt_end: usize,
}

impl ContextText {
    pub fn prompt(&self) -> &str {
        &self.text[..self.prompt_end]
    }

    pub fn body(&self) -> &str {
        &self.text[self.prompt_end..]
    }
}

pub struct ContextLimits<'a> {
    pub tokenizer: &'a dyn Tokenizer,
    pub max_tokens: usize,
}

impl ContextLimits<'_> {
    pub fn check(&self, text: &str) -> Result<usize, RegisterError> {
        let tokens = self.tokenizer.count(text);
        if tokens > self.max_tokens {
            Err(RegisterError::ContextOverflow {
                tokens,
                cap: self.max_tokens,
            })
        } else {
            Ok(tokens)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    register: Register,
}

impl Register {
    /// Initial register built from the holistic-planning outputs.
    pub fn init(intent: IntentPayload, plan: DagPlan) -> Self {
        Register {
            intent,
            plan_history: Vec::new(),
            current: CurrentPlan {
                plan,
                revisit_history: Vec::new(),
                tool_log: Vec::new(),
            },
            steps_applied: 0,
        }
    }

    pub fn plan(&self) -> &DagPlan {
        &self.current.plan
    }

    /// Deterministic update for one solving-stage action.
    pub fn apply_action(
        &self,
        action: &Action,
        tool_result: Option<&ToolResult>,
    ) -> Result<Register, RegisterError> {
        let kind = action.kind();
        if kind.subspace() == Subspace::Plan {
            return Err(RegisterError::IllegalActionInStage(kind));
        }
        if (kind == ActionKind::ToolCall) != tool_result.is_some() {
            return Err(RegisterError::ToolResultMismatch {
                kind,
                present: tool_result.is_some(),
            });
        }

        let mut next = self.clone();
        next.steps_applied += 1;
        let cur = &mut next.current;
        match &action.payload {
            Payload::ToolCall(call) => {
                cur.plan = cur.plan.mark_active(&call.task_id)?;
                cur.tool_log.push(ToolLogEntry {
                    step_index: next.steps_applied,
                    task_id: call.task_id.clone(),
                    tool_name: call.tool_name.clone(),
                    arguments: call.arguments.clone(),
                    condensed_facts: Vec::new(),
                    source_ids: Vec::new(),
                });
            }
            Payload::DocExtraction(ex) => {
                cur.plan = cur.plan.add_evidence(&ex.task_id, &ex.facts)?;
                let entry = cur
                    .tool_log
                    .iter_mut()
                    .rev()
                    .find(|e| e.task_id == ex.task_id)
                    .ok_or_else(|| RegisterError::NoToolCallForTask(ex.task_id.clone()))?;
                entry.condensed_facts.extend(ex.facts.iter().cloned());
                for id in &ex.source_ids {
                    if !entry.source_ids.contains(id) {
                        entry.source_ids.push(id.clone());
                    }
                }
            }
            Payload::TaskAnswer(ans) => {
                cur.plan = cur.plan.apply_task_answer(&ans.answers)?;
            }
            Payload::RevisitTask(rev) => {
                let (plan, discarded) = cur.plan.reset_for_revisit(&rev.task_id)?;
                cur.plan = plan;
                cur.revisit_history
                    .extend(discarded.into_iter().map(|d| RevisitRecord {
                        task_id: d.task_id,
                        discarded_answer: d.old_answer,
                        reason: rev.reason.clone(),
                    }));
            }
            Payload::Replanning(re) => {
                let plan = DagPlan::build(&re.tasks, &re.edges, cur.plan.plan_id + 1)?;
                let archived = std::mem::replace(
                    cur,
                    CurrentPlan {
                        plan,
                        revisit_history: Vec::new(),
                        tool_log: Vec::new(),
                    },
                );
                next.plan_history.push(PlanSnapshot {
                    plan: archived.plan,
                    reason: re.reason.clone(),
                });
            }
            Payload::FinalAnswer(_) => {}
            Payload::IntentRefinement(_) | Payload::ProblemFraming(_) => unreachable!(),
        }
        Ok(next)
    }

    /// Renders the solving-stage context and enforces the token cap.
    pub fn render_context(
        &self,
        question: &str,
        stage_prompt: &str,
        limits: &ContextLimits<'_>,
    ) -> Result<ContextText, RegisterError> {
        let ctx = self.render(question, stage_prompt);
        limits.check(&ctx.text)?;
        Ok(ctx)
    }

    /// Section order runs from most to least stable so that consecutive
    /// renders share long prefixes: the task structure is fixed within a
    /// plan epoch, the revisit and tool logs only grow, and task statuses
    /// and answers come last. Empty history sections are omitted.
    pub fn render(&self, question: &str, stage_prompt: &str) -> ContextText {
        let mut out = String::new();
        out.push_str(stage_prompt.trim_end());
        out.push_str("\n\n");
        let prompt_end = out.len();

        write_question(&mut out, question);
        write_intent(&mut out, &self.intent);

        if !self.plan_history.is_empty() {
            out.push_str("## Plan history (discarded plans)\n");
            for snap in &self.plan_history {
                let _ = writeln!(
                    out,
                    "### Plan {} (discarded: {})",
                    snap.plan.plan_id,
                    one_line(&snap.reason)
                );
                write_plan_tasks(&mut out, &snap.plan);
            }
            out.push('\n');
        }

        let _ = writeln!(out, "## Current plan (plan {})", self.current.plan.plan_id);
        write_plan_structure(&mut out, &self.current.plan);
        out.push('\n');

        if !self.current.revisit_history.is_empty() {
            out.push_str("## Revisited tasks\n");
            for r in &self.current.revisit_history {
                let _ = writeln!(
                    out,
                    "- {}: discarded answer {:?} (reason: {})",
                    r.task_id,
                    r.discarded_answer,
                    one_line(&r.reason)
                );
            }
            out.push('\n');
        }

        if !self.current.tool_log.is_empty() {
            out.push_str("## Tool log\n");
            for e in &self.current.tool_log {
                write_log_entry(&mut out, e);
            }
            out.push('\n');
        }

        out.push_str("## Task status\n");
        write_plan_status(&mut out, &self.current.plan);
        out.push('\n');

        ContextText { text: out, prompt_end }
    }

    pub fn to_snapshot_json(&self) -> String {
        serde_json::to_string(&Snapshot {
            version: REGISTER_SCHEMA_VERSION,
            register: self.clone(),
        })
        .expect("register serializes")
    }

    pub fn from_snapshot_json(text: &str) -> Result<Self, RegisterError> {
        let snap: Snapshot =
            serde_json::from_str(text).map_err(|e| RegisterError::Snapshot(e.to_string()))?;
        if snap.version != REGISTER_SCHEMA_VERSION {
            return Err(RegisterError::Snapshot(format!(
                "unsupported version {}",
                snap.version
            )));
        }
        Ok(snap.register)
    }
}

pub(crate) fn write_question(out: &mut String, question: &str) {
    out.push_str("## Question\n");
    out.push_str(question.trim());
    out.push_str("\n\n");
}

pub(crate) fn write_intent(out: &mut String, intent: &IntentPayload) {
    out.push_str("## Refined intent\n");
    let _ = writeln!(out, "Goal: {}", intent.refined_goal.trim());
    if intent.constraints.is_empty() {
        out.push_str("Constraints: none\n");
    } else {
        out.push_str("Constraints:\n");
        for c in &intent.constraints {
            let _ = writeln!(out, "- {}", one_line(c));
        }
    }
    out.push('\n');
}

fn status_label(status: TaskStatus) -> &'static str {
    match status {
        TaskStatus::Pending => "pending",
        TaskStatus::Active => "active",
        TaskStatus::Answered => "answered",
    }
}

fn write_task_line(out: &mut String, plan: &DagPlan, t: &TaskNode, status: bool) {
    let mut deps: Vec<&str> = plan.predecessors(&t.task_id).collect();
    deps.sort();
    deps.dedup();
    let _ = write!(out, "- {}", t.task_id);
    if status {
        let _ = write!(out, " [{}]", status_label(t.status));
    }
    let _ = write!(out, " {}", one_line(&t.description));
    if !deps.is_empty() {
        let _ = write!(out, " (depends on: {})", deps.join(", "));
    }
    out.push('\n');
}

fn write_answer(out: &mut String, t: &TaskNode) {
    if let Some(answer) = &t.answer {
        let _ = writeln!(out, "  answer: {}", one_line(answer));
    }
}

/// Archived plans: structure, final statuses and answers together.
fn write_plan_tasks(out: &mut String, plan: &DagPlan) {
    for t in &plan.tasks {
        write_task_line(out, plan, t, true);
        write_answer(out, t);
    }
}

fn write_plan_structure(out: &mut String, plan: &DagPlan) {
    for t in &plan.tasks {
        write_task_line(out, plan, t, false);
    }
}

fn write_plan_status(out: &mut String, plan: &DagPlan) {
    for t in &plan.tasks {
        let _ = writeln!(out, "- {} [{}]", t.task_id, status_label(t.status));
        write_answer(out, t);
    }
}

fn write_log_entry(out: &mut String, e: &ToolLogEntry) {
    let _ = writeln!(
        out,
        "- [step {}] {} -> {} {}",
        e.step_index,
        e.task_id,
        e.tool_name,
        canonical_json(&Value::Object(e.arguments.clone()))
    );
    if e.condensed_facts.is_empty() {
        out.push_str("  (no facts extracted)\n");
    } else {
        for f in &e.condensed_facts {
            let _ = writeln!(out, "  * {}", one_line(f));
        }
    }
    if !e.source_ids.is_empty() {
        let _ = writeln!(out, "  sources: {}", e.source_ids.join(", "));
    }
}

pub(crate) fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::*;
    use crate::tokenizer::ApproxTokenizer;
    use crate::tools::Document;
    use serde_json::json;

    fn intent() -> IntentPayload {
        IntentPayload {
            refined_goal: "Find the birth year of the director of Jaws".into(),
            constraints: vec!["answer is a year".into()],
        }
    }

    fn two_task_plan(plan_id: u64) -> DagPlan {
        DagPlan::build(
            &[
                TaskSpec {
                    task_id: "t1".into(),
                    description: "Who directed Jaws?".into(),
                },
                TaskSpec {
                    task_id: "t2".into(),
                    description: "When was that person born?".into(),
                },
            ],
            &[("t1".into(), "t2".into())],
            plan_id,
        )
        .unwrap()
    }

    fn act(p: Payload) -> Action {
        Action::new(p).unwrap()
    }

    fn tool_call(task: &str, q: &str) -> Action {
        let mut arguments = Map::new();
        arguments.insert("query".into(), json!(q));
        act(Payload::ToolCall(ToolCallPayload {
            task_id: task.into(),
            tool_name: "search".into(),
            arguments,
        }))
    }

    fn extraction(task: &str, fact: &str) -> Action {
        act(Payload::DocExtraction(DocExtractionPayload {
            task_id: task.into(),
            facts: vec![fact.into()],
            source_ids: vec!["search:abc".into()],
        }))
    }

    fn answer(task: &str, a: &str) -> Action {
        act(Payload::TaskAnswer(TaskAnswerPayload {
            answers: vec![TaskAnswerEntry {
                task_id: task.into(),
                answer: a.into(),
            }],
        }))
    }

    fn docs() -> ToolResult {
        ToolResult {
            documents: vec![Document {
                source_id: "search:abc".into(),
                title: "Jaws".into(),
                text: "RAW DOCUMENT TEXT".into(),
            }],
            raw: None,
        }
    }

    #[test]
    fn init_is_empty() {
        let r = Register::init(intent(), two_task_plan(0));
        assert!(r.plan_history.is_empty());
        assert!(r.current.revisit_history.is_empty());
        assert!(r.current.tool_log.is_empty());
        assert_eq!(r.plan().plan_id, 0);
        let ctx = r.render("q?", "PROMPT");
        assert!(ctx.text.contains("Find the birth year of the director of Jaws"));
    }

    #[test]
    fn empty_register_renders_only_core_sections() {
        let r = Register::init(intent(), two_task_plan(0));
        let ctx = r.render("Who?", "PROMPT");
        let mut expected = String::from("PROMPT\n\n");
        write_question(&mut expected, "Who?");
        write_intent(&mut expected, &intent());
        expected.push_str("## Current plan (plan 0)\n");
        expected.push_str("- t1 Who directed Jaws?\n");
        expected.push_str("- t2 When was that person born? (depends on: t1)\n\n");
        expected.push_str("## Task status\n- t1 [pending]\n- t2 [pending]\n\n");
        assert_eq!(ctx.text, expected);
        assert_eq!(ctx.prompt(), "PROMPT\n\n");
    }

    #[test]
    fn tool_call_then_extraction_condenses() {
        let r = Register::init(intent(), two_task_plan(0));
        let r = r.apply_action(&tool_call("t1", "Jaws director"), Some(&docs())).unwrap();
        assert_eq!(r.plan().task("t1").unwrap().status, TaskStatus::Active);
        assert_eq!(r.current.tool_log.len(), 1);
        assert!(r.render("q", "p").text.contains("(no facts extracted)"));

        let r = r
            .apply_action(&extraction("t1", "Jaws was directed by Steven Spielberg"), None)
            .unwrap();
        let entry = &r.current.tool_log[0];
        assert_eq!(entry.step_index, 1);
        assert_eq!(entry.condensed_facts.len(), 1);
        assert_eq!(r.plan().task("t1").unwrap().evidence.len(), 1);
        let text = r.render("q", "p").text;
        assert!(text.contains("Steven Spielberg"));
        assert!(!text.contains("RAW DOCUMENT TEXT"));
    }

    #[test]
    fn tool_result_presence_must_match_kind() {
        let r = Register::init(intent(), two_task_plan(0));
        assert!(matches!(
            r.apply_action(&tool_call("t1", "x"), None),
            Err(RegisterError::ToolResultMismatch { .. })
        ));
        let r2 = r.apply_action(&tool_call("t1", "x"), Some(&docs())).unwrap();
        assert!(matches!(
            r2.apply_action(&extraction("t1", "f"), Some(&docs())),
            Err(RegisterError::ToolResultMismatch { .. })
        ));
    }

    #[test]
    fn extraction_without_call_is_rejected() {
        let r = Register::init(intent(), two_task_plan(0));
        assert_eq!(
            r.apply_action(&extraction("t1", "f"), None),
            Err(RegisterError::NoToolCallForTask("t1".into()))
        );
    }

    #[test]
    fn planning_actions_are_illegal_while_solving() {
        let r = Register::init(intent(), two_task_plan(0));
        let a = act(Payload::IntentRefinement(intent()));
        assert_eq!(
            r.apply_action(&a, None),
            Err(RegisterError::IllegalActionInStage(ActionKind::IntentRefinement))
        );
        let f = act(Payload::ProblemFraming(FramingPayload {
            tasks: vec![],
            edges: vec![],
        }));
        assert!(matches!(
            r.apply_action(&f, None),
            Err(RegisterError::IllegalActionInStage(_))
        ));
    }

    #[test]
    fn revisit_records_discarded_answers() {
        let r = Register::init(intent(), two_task_plan(0))
            .apply_action(&answer("t1", "Spielberg"), None)
            .unwrap();
        let rev = act(Payload::RevisitTask(RevisitPayload {
            task_id: "t1".into(),
            reason: "contradiction".into(),
        }));
        let r = r.apply_action(&rev, None).unwrap();
        assert_eq!(r.current.revisit_history.len(), 1);
        assert_eq!(r.current.revisit_history[0].discarded_answer, "Spielberg");
        assert_eq!(r.plan().task("t1").unwrap().status, TaskStatus::Pending);
        assert!(r.render("q", "p").text.contains("## Revisited tasks"));
    }

    #[test]
    fn replanning_archives_and_resets_epoch() {
        let r = Register::init(intent(), two_task_plan(0))
            .apply_action(&tool_call("t1", "x"), Some(&docs()))
            .unwrap()
            .apply_action(&answer("t1", "Spielberg"), None)
            .unwrap();
        let re = act(Payload::Replanning(ReplanPayload {
            reason: "wrong film".into(),
            tasks: vec![TaskSpec {
                task_id: "n1".into(),
                description: "new".into(),
            }],
            edges: vec![],
        }));
        let before = r.plan_history.len();
        let r2 = r.apply_action(&re, None).unwrap();
        assert_eq!(r2.plan_history.len(), before + 1);
        assert_eq!(r2.plan().plan_id, 1);
        assert!(r2.current.tool_log.is_empty());
        assert!(r2.current.revisit_history.is_empty());
        let archived = &r2.plan_history[0].plan;
        assert_eq!(archived.task("t1").unwrap().status, TaskStatus::Answered);

        let cyclic = act(Payload::Replanning(ReplanPayload {
            reason: "x".into(),
            tasks: vec![TaskSpec {
                task_id: "a".into(),
                description: "".into(),
            }],
            edges: vec![("a".into(), "a".into())],
        }));
        assert!(matches!(
            r2.apply_action(&cyclic, None),
            Err(RegisterError::Plan(PlanError::CyclicPlan(_)))
        ));
    }

    #[test]
    fn overflow_is_typed() {
        let r = Register::init(intent(), two_task_plan(0));
        let tok = ApproxTokenizer;
        let tight = ContextLimits {
            tokenizer: &tok,
            max_tokens: 10,
        };
        assert!(matches!(
            r.render_context("q", "prompt", &tight),
            Err(RegisterError::ContextOverflow { cap: 10, .. })
        ));
        let roomy = ContextLimits {
            tokenizer: &tok,
            max_tokens: 32_000,
        };
        assert!(r.render_context("q", "prompt", &roomy).is_ok());
    }

    #[test]
    fn appended_log_entry_extends_previous_render() {
        let r = Register::init(intent(), two_task_plan(0))
            .apply_action(&tool_call("t1", "a"), Some(&docs()))
            .unwrap()
            .apply_action(&extraction("t1", "fact one"), None)
            .unwrap();
        let before = r.render("q", "p").text;
        let r2 = r.apply_action(&tool_call("t1", "b"), Some(&docs())).unwrap();
        let after = r2.render("q", "p").text;
        let log_end = before.find("## Task status").unwrap();
        assert!(after.starts_with(&before[..log_end - 1]));
        assert!(after.len() > before.len());
    }

    #[test]
    fn snapshot_round_trips_and_checks_version() {
        let r = Register::init(intent(), two_task_plan(0))
            .apply_action(&tool_call("t1", "a"), Some(&docs()))
            .unwrap();
        let json = r.to_snapshot_json();
        assert!(json.starts_with("{\"version\":1"));
        assert_eq!(Register::from_snapshot_json(&json).unwrap(), r);
        let bumped = json.replacen("\"version\":1", "\"version\":9", 1);
        assert!(Register::from_snapshot_json(&bumped).is_err());
    }
}
