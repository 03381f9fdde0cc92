//! The two-stage agentic loop: holistic planning (intent refinement, then
//! problem framing) followed by proactive solving, one action per turn,
//! until a final answer or a budget runs out.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, Completion, CompletionRequest, GenerationParams};
use crate::plan::{DagPlan, PlanError};
use crate::protocol::{
    parse_action_with, Action, ActionKind, IntentPayload, ParseOptions, Payload,
};
use crate::register::{write_intent, write_question, ContextText, Register, RegisterError};
use crate::tokenizer::{default_tokenizer, Tokenizer};
use crate::tools::{stable_source_id, ToolError, ToolInvoker, ToolResult, DEFAULT_TOP_K};
use crate::trajectory::{AbandonedStep, Attempt, Outcome, Stage, Step, Trajectory, TurnStats};

pub const DEFAULT_PROMPTS: &str = include_str!("../prompts/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub max_turns: usize,
    pub max_context_tokens: usize,
    pub max_malformed_retries: usize,
    /// Re-prompts allowed for a final answer emitted while tasks are open.
    pub max_premature_final_retries: usize,
    pub top_k: usize,
    pub strict_protocol: bool,
    pub generation: GenerationParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_turns: 40,
            max_context_tokens: 32_000,
            max_malformed_retries: 2,
            max_premature_final_retries: 1,
            top_k: DEFAULT_TOP_K,
            strict_protocol: false,
            generation: GenerationParams::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let positive = [
            ("max_turns", self.max_turns),
            ("max_context_tokens", self.max_context_tokens),
            ("top_k", self.top_k),
        ];
        match positive.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(EngineError::Config(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }
}

/// Stage prompts. Treated as configuration; recorded in every trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPack {
    pub holistic: String,
    pub solving: String,
}

impl Default for PromptPack {
    fn default() -> Self {
        toml::from_str(DEFAULT_PROMPTS).expect("bundled prompt pack parses")
    }
}

impl PromptPack {
    pub fn from_file(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn solving_prompt(&self, tools: &dyn ToolInvoker) -> String {
        let listing: Vec<String> = tools.specs().iter().map(|s| format!("- {}", s.describe())).collect();
        let listing = if listing.is_empty() {
            "(none)".to_string()
        } else {
            listing.join("\n")
        };
        self.solving.replace("{tools}", &listing)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("expected <{expected}> during holistic planning, got <{got}>")]
    WrongActionKind { expected: ActionKind, got: ActionKind },
    #[error("gave up after {attempts} invalid responses; last problem: {last}")]
    RetriesExhausted { attempts: usize, last: String },
    #[error("final answer emitted while tasks {pending:?} are unanswered")]
    FinalBeforeComplete { pending: Vec<String> },
    #[error("context is {tokens} tokens, over the {cap}-token cap")]
    ContextOverflow { tokens: usize, cap: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("configuration: {0}")]
    Config(String),
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Always reports the same instant; used for reproducible runs.
pub struct FixedClock(pub u64);

impl Clock for FixedClock {
    fn now_ms(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub outcome: Outcome,
    pub trajectory: Trajectory,
    pub turn_stats: Vec<TurnStats>,
}

impl RunResult {
    pub fn final_answer(&self) -> Option<&str> {
        match &self.outcome {
            Outcome::Answered { answer } => Some(answer),
            _ => None,
        }
    }
}

/// The model input for one attempt: the state, the tool output surfaced
/// this turn, and feedback on the previous rejected attempt.
pub fn compose_input(
    state: &ContextText,
    ephemeral: Option<&str>,
    rejected: Option<&Attempt>,
) -> ContextText {
    let mut text = state.text.clone();
    if let Some(eph) = ephemeral {
        text.push_str(eph);
    }
    if let Some(prev) = rejected {
        text.push_str("## Previous response rejected\n");
        let _ = writeln!(text, "Your previous response was:\n{}", prev.output.trim());
        let _ = writeln!(text, "Problem: {}", prev.diagnostic);
        text.push_str("Respond again with exactly one valid action block.\n");
    }
    ContextText {
        text,
        prompt_end: state.prompt_end,
    }
}

fn ephemeral_section(call_task: &str, tool: &str, result: &ToolResult) -> String {
    format!(
        "## Latest tool output ({tool} for {call_task}; shown this turn only)\n{}",
        result.render()
    )
}

pub fn question_id_for(question: &str) -> String {
    stable_source_id("q", question).replacen("q:", "q-", 1)
}

enum Rejection {
    /// Counted against the malformed-response budget.
    Retry(String),
    /// Counted against the premature-final budget.
    Premature(Vec<String>),
    Fatal(EngineError),
}

struct Accepted<T> {
    completion: Completion,
    action: Action,
    value: T,
    input_tokens: usize,
}

struct Failed {
    outcome: Outcome,
    attempts: Vec<Attempt>,
}

pub struct Engine {
    backend: Arc<dyn ChatBackend>,
    tools: Arc<dyn ToolInvoker>,
    config: RunConfig,
    prompts: PromptPack,
    tokenizer: Arc<dyn Tokenizer>,
    clock: Arc<dyn Clock>,
}

impl Engine {
    pub fn new(backend: Arc<dyn ChatBackend>, tools: Arc<dyn ToolInvoker>, config: RunConfig) -> Self {
        Engine {
            backend,
            tools,
            config,
            prompts: PromptPack::default(),
            tokenizer: default_tokenizer(),
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_prompts(mut self, prompts: PromptPack) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn prompts(&self) -> &PromptPack {
        &self.prompts
    }

    /// Runs planning then solving. Every error ends up in the outcome.
    pub fn run(&self, question_id: Option<&str>, question: &str) -> RunResult {
        let mut traj = Trajectory {
            version: crate::trajectory::TRAJECTORY_VERSION,
            question_id: question_id
                .map(str::to_string)
                .unwrap_or_else(|| question_id_for(question)),
            question: question.to_string(),
            config: self.config.clone(),
            prompts: self.prompts.clone(),
            tools: self.tools.specs(),
            steps: Vec::new(),
            abandoned: None,
            outcome: Outcome::Aborted {
                error: "run did not start".into(),
            },
            started_at_ms: self.clock.now_ms(),
            finished_at_ms: 0,
        };

        let outcome = match self.config.validate() {
            Err(e) => Outcome::Aborted {
                error: e.to_string(),
            },
            Ok(()) => match self.holistic_planning(question, &mut traj) {
                Ok((intent, plan)) => self.solve(question, Register::init(intent, plan), &mut traj),
                Err(outcome) => outcome,
            },
        };
        traj.outcome = outcome.clone();
        traj.finished_at_ms = self.clock.now_ms();
        let turn_stats = traj.turn_stats(self.tokenizer.as_ref());
        RunResult {
            outcome,
            trajectory: traj,
            turn_stats,
        }
    }

    /// Intent refinement followed by problem framing. The framing request
    /// sees the refined intent. Returns the failure outcome on error.
    pub fn holistic_planning(
        &self,
        question: &str,
        traj: &mut Trajectory,
    ) -> Result<(IntentPayload, DagPlan), Outcome> {
        let prompt = format!("{}\n\n", self.prompts.holistic.trim_end());

        let mut body = String::new();
        write_question(&mut body, question);
        let intent_ctx = ContextText {
            text: format!("{prompt}{body}Respond with exactly one <intent_refinement> action.\n"),
            prompt_end: prompt.len(),
        };
        let intent = self.planning_step(traj, intent_ctx, ActionKind::IntentRefinement, |p| match p {
            Payload::IntentRefinement(i) => Ok(i.clone()),
            _ => unreachable!(),
        })?;

        write_intent(&mut body, &intent);
        let framing_ctx = ContextText {
            text: format!("{prompt}{body}Respond with exactly one <problem_framing> action.\n"),
            prompt_end: prompt.len(),
        };
        let plan = self.planning_step(traj, framing_ctx, ActionKind::ProblemFraming, |p| match p {
            Payload::ProblemFraming(f) => DagPlan::build(&f.tasks, &f.edges, 0)
                .map_err(|e| Rejection::Retry(e.to_string())),
            _ => unreachable!(),
        })?;
        Ok((intent, plan))
    }

    fn planning_step<T>(
        &self,
        traj: &mut Trajectory,
        state: ContextText,
        expected: ActionKind,
        accept: impl Fn(&Payload) -> Result<T, Rejection>,
    ) -> Result<T, Outcome> {
        let result = self.attempt_loop(&state, None, |action| {
            if action.kind() != expected {
                return Err(Rejection::Fatal(EngineError::WrongActionKind {
                    expected,
                    got: action.kind(),
                }));
            }
            match &action.payload {
                Payload::IntentRefinement(_) | Payload::ProblemFraming(_) => accept(&action.payload),
                _ => unreachable!(),
            }
        });
        match result {
            Ok((acc, retries)) => {
                self.record(traj, Stage::Planning, state, None, acc.input_tokens, retries, acc.completion, acc.action, None, None);
                Ok(acc.value)
            }
            Err(failed) => {
                traj.abandoned = Some(AbandonedStep {
                    stage: Stage::Planning,
                    state: state.text,
                    prompt_end: state.prompt_end,
                    ephemeral: None,
                    attempts: failed.attempts,
                });
                Err(failed.outcome)
            }
        }
    }

    /// The proactive solving loop over an initialized register.
    pub fn solve(&self, question: &str, mut register: Register, traj: &mut Trajectory) -> Outcome {
        let stage_prompt = self.prompts.solving_prompt(self.tools.as_ref());
        let mut ephemeral: Option<String> = None;

        for _turn in 0..self.config.max_turns {
            let state = register.render(question, &stage_prompt);
            let result = self.attempt_loop(&state, ephemeral.as_deref(), |action| {
                self.accept_solving(&register, action)
            });
            match result {
                Ok((acc, retries)) => {
                    let (next, tool_result) = acc.value;
                    let final_answer = match &acc.action.payload {
                        Payload::FinalAnswer(f) => Some(f.answer.clone()),
                        _ => None,
                    };
                    let next_ephemeral = match (&acc.action.payload, &tool_result) {
                        (Payload::ToolCall(call), Some(res)) => {
                            Some(ephemeral_section(&call.task_id, &call.tool_name, res))
                        }
                        _ => None,
                    };
                    self.record(
                        traj,
                        Stage::Solving,
                        state,
                        ephemeral.take(),
                        acc.input_tokens,
                        retries,
                        acc.completion,
                        acc.action,
                        tool_result,
                        Some(next.clone()),
                    );
                    if let Some(answer) = final_answer {
                        return Outcome::Answered { answer };
                    }
                    register = next;
                    ephemeral = next_ephemeral;
                }
                Err(failed) => {
                    traj.abandoned = Some(AbandonedStep {
                        stage: Stage::Solving,
                        state: state.text,
                        prompt_end: state.prompt_end,
                        ephemeral,
                        attempts: failed.attempts,
                    });
                    return failed.outcome;
                }
            }
        }
        Outcome::BudgetExhausted
    }

    fn accept_solving(
        &self,
        register: &Register,
        action: &Action,
    ) -> Result<(Register, Option<ToolResult>), Rejection> {
        let plan = register.plan();
        let tool_result = match &action.payload {
            Payload::FinalAnswer(_) if !plan.is_complete() => {
                let pending = plan
                    .tasks
                    .iter()
                    .filter(|t| !t.is_answered())
                    .map(|t| t.task_id.clone())
                    .collect();
                return Err(Rejection::Premature(pending));
            }
            Payload::ToolCall(call) => {
                if plan.task(&call.task_id).is_none() {
                    return Err(Rejection::Retry(
                        PlanError::UnknownTask(call.task_id.clone()).to_string(),
                    ));
                }
                match self.tools.invoke(call) {
                    Ok(r) => Some(r),
                    Err(e) if e.is_repromptable() => return Err(Rejection::Retry(e.to_string())),
                    Err(e) => return Err(Rejection::Fatal(e.into())),
                }
            }
            _ => None,
        };
        match register.apply_action(action, tool_result.as_ref()) {
            Ok(next) => Ok((next, tool_result)),
            Err(RegisterError::ContextOverflow { tokens, cap }) => {
                Err(Rejection::Fatal(EngineError::ContextOverflow { tokens, cap }))
            }
            Err(e) => Err(Rejection::Retry(e.to_string())),
        }
    }

    /// Completes, parses and validates one step, re-prompting with a
    /// diagnostic on recoverable failures.
    fn attempt_loop<T>(
        &self,
        state: &ContextText,
        ephemeral: Option<&str>,
        mut accept: impl FnMut(&Action) -> Result<T, Rejection>,
    ) -> Result<(Accepted<T>, Vec<Attempt>), Failed> {
        let mut attempts: Vec<Attempt> = Vec::new();
        let mut malformed = 0;
        let mut premature = 0;
        let parse_opts = ParseOptions {
            strict: self.config.strict_protocol,
        };
        loop {
            let input = compose_input(state, ephemeral, attempts.last());
            let tokens = self.tokenizer.count(&input.text);
            let fail = |outcome, attempts| Err(Failed { outcome, attempts });
            if tokens > self.config.max_context_tokens {
                return fail(
                    Outcome::ContextOverflow {
                        tokens,
                        cap: self.config.max_context_tokens,
                    },
                    attempts,
                );
            }
            let request = CompletionRequest {
                context: input,
                token_count: tokens,
                token_cap: self.config.max_context_tokens,
                params: self.config.generation.clone(),
            };
            let completion = match self.backend.complete(&request) {
                Ok(c) => c,
                Err(BackendError::OverBudget { tokens, cap }) => {
                    return fail(Outcome::ContextOverflow { tokens, cap }, attempts)
                }
                Err(e) => return fail(Outcome::aborted(EngineError::from(e)), attempts),
            };

            let rejection = match parse_action_with(&completion.text, parse_opts) {
                Err(e) => Rejection::Retry(e.to_string()),
                Ok(action) => match accept(&action) {
                    Ok(value) => {
                        let input_tokens = if attempts.is_empty() {
                            tokens
                        } else {
                            self.tokenizer
                                .count(&compose_input(state, ephemeral, None).text)
                        };
                        return Ok((
                            Accepted {
                                completion,
                                action,
                                value,
                                input_tokens,
                            },
                            attempts,
                        ));
                    }
                    Err(r) => r,
                },
            };

            let diagnostic = match rejection {
                Rejection::Fatal(e) => {
                    attempts.push(Attempt {
                        output: completion.text,
                        diagnostic: e.to_string(),
                    });
                    return fail(Outcome::aborted(e), attempts);
                }
                Rejection::Retry(diag) => {
                    malformed += 1;
                    if malformed > self.config.max_malformed_retries {
                        attempts.push(Attempt {
                            output: completion.text,
                            diagnostic: diag.clone(),
                        });
                        let e = EngineError::RetriesExhausted {
                            attempts: attempts.len(),
                            last: diag,
                        };
                        return fail(Outcome::aborted(e), attempts);
                    }
                    diag
                }
                Rejection::Premature(pending) => {
                    premature += 1;
                    let e = EngineError::FinalBeforeComplete { pending };
                    if premature > self.config.max_premature_final_retries {
                        attempts.push(Attempt {
                            output: completion.text,
                            diagnostic: e.to_string(),
                        });
                        return fail(Outcome::aborted(e), attempts);
                    }
                    e.to_string()
                }
            };
            log::debug!("re-prompting: {diagnostic}");
            attempts.push(Attempt {
                output: completion.text,
                diagnostic,
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        traj: &mut Trajectory,
        stage: Stage,
        state: ContextText,
        ephemeral: Option<String>,
        input_tokens: usize,
        retries: Vec<Attempt>,
        completion: Completion,
        action: Action,
        tool_result: Option<ToolResult>,
        register: Option<Register>,
    ) {
        traj.steps.push(Step {
            index: traj.steps.len() + 1,
            stage,
            state_tokens: self.tokenizer.count(&state.text),
            input_tokens,
            state: state.text,
            prompt_end: state.prompt_end,
            ephemeral,
            retries,
            output: completion.text,
            action,
            tool_result,
            register,
            exchange: completion.exchange,
        });
    }
}
