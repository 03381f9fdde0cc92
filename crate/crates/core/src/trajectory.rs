//! Run records, the rejection filter, SFT export and evaluation metrics.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::RecordedCompletion;
use crate::engine::{compose_input, EngineError, PromptPack, RunConfig};
use crate::protocol::{Action, ActionKind, Payload, Subspace};
use crate::register::{ContextText, Register};
use crate::tokenizer::Tokenizer;
use crate::tools::{ToolResult, ToolSpec};

pub const TRAJECTORY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Planning,
    Solving,
}

/// A rejected model response and the diagnostic it was re-prompted with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub output: String,
    pub diagnostic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based position in the trajectory.
    pub index: usize,
    pub stage: Stage,
    /// Rendered state: planning context or register render.
    pub state: String,
    pub prompt_end: usize,
    /// Tool output from the previous step, shown on this turn only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ephemeral: Option<String>,
    pub state_tokens: usize,
    /// Tokens of state plus ephemeral output.
    pub input_tokens: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retries: Vec<Attempt>,
    /// Full accepted model output, free text included.
    pub output: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_result: Option<ToolResult>,
    /// Register after this step (solving steps only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub register: Option<Register>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exchange: Option<Value>,
}

impl Step {
    pub fn state_context(&self) -> ContextText {
        ContextText {
            text: self.state.clone(),
            prompt_end: self.prompt_end,
        }
    }

    /// The model input of the first attempt at this step.
    pub fn input(&self) -> String {
        compose_input(&self.state_context(), self.ephemeral.as_deref(), None).text
    }
}

/// The step a run failed on, with every rejected attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbandonedStep {
    pub stage: Stage,
    pub state: String,
    pub prompt_end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ephemeral: Option<String>,
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Answered { answer: String },
    BudgetExhausted,
    ContextOverflow { tokens: usize, cap: usize },
    Aborted { error: String },
}

impl Outcome {
    pub(crate) fn aborted(e: EngineError) -> Self {
        match e {
            EngineError::ContextOverflow { tokens, cap } => Outcome::ContextOverflow { tokens, cap },
            e => Outcome::Aborted {
                error: e.to_string(),
            },
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Answered { .. } => "answered",
            Outcome::BudgetExhausted => "budget_exhausted",
            Outcome::ContextOverflow { .. } => "context_overflow",
            Outcome::Aborted { .. } => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub version: u32,
    pub question_id: String,
    pub question: String,
    pub config: RunConfig,
    pub prompts: PromptPack,
    /// Tools offered to the model, as listed in the solving prompt.
    #[serde(default)]
    pub tools: Vec<ToolSpec>,
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abandoned: Option<AbandonedStep>,
    pub outcome: Outcome,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

/// Per solving turn. `cache_ratio` compares with the previous solving turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnStats {
    pub turn: usize,
    pub state_tokens: usize,
    pub input_tokens: usize,
    pub cache_ratio: Option<f64>,
}

impl Trajectory {
    pub fn solving_steps(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter().filter(|s| s.stage == Stage::Solving)
    }

    pub fn turn_stats(&self, tokenizer: &dyn Tokenizer) -> Vec<TurnStats> {
        let mut prev: Option<Vec<String>> = None;
        self.solving_steps()
            .enumerate()
            .map(|(i, s)| {
                let toks = tokenizer.tokens(&s.state);
                let cache_ratio = prev.as_ref().and_then(|p| cache_ratio(p, &toks).ok());
                prev = Some(toks);
                TurnStats {
                    turn: i + 1,
                    state_tokens: s.state_tokens,
                    input_tokens: s.input_tokens,
                    cache_ratio,
                }
            })
            .collect()
    }

    pub fn total_retries(&self) -> usize {
        self.steps.iter().map(|s| s.retries.len()).sum::<usize>()
            + self.abandoned.as_ref().map_or(0, |a| a.attempts.len())
    }

    /// Every completion of the run in order, with the exact request context.
    pub fn recorded_completions(&self) -> Vec<RecordedCompletion> {
        let mut out = Vec::new();
        let mut push_attempts = |state: &ContextText, eph: Option<&str>, attempts: &[Attempt], last: Option<&str>| {
            let mut prev: Option<&Attempt> = None;
            for a in attempts {
                out.push(RecordedCompletion {
                    context: compose_input(state, eph, prev).text,
                    output: a.output.clone(),
                });
                prev = Some(a);
            }
            if let Some(output) = last {
                out.push(RecordedCompletion {
                    context: compose_input(state, eph, prev).text,
                    output: output.to_string(),
                });
            }
        };
        for s in &self.steps {
            push_attempts(&s.state_context(), s.ephemeral.as_deref(), &s.retries, Some(&s.output));
        }
        if let Some(a) = &self.abandoned {
            let state = ContextText {
                text: a.state.clone(),
                prompt_end: a.prompt_end,
            };
            push_attempts(&state, a.ephemeral.as_deref(), &a.attempts, None);
        }
        out
    }

    pub fn recorded_tool_results(&self) -> Vec<ToolResult> {
        self.steps.iter().filter_map(|s| s.tool_result.clone()).collect()
    }

    pub fn final_answer(&self) -> Option<&str> {
        match &self.outcome {
            Outcome::Answered { answer } => Some(answer),
            _ => None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {detail}")]
    Format {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("export input contains trajectory {question_id:?} rejected by the filter ({reason})")]
    UnfilteredInput { question_id: String, reason: String },
    #[error("cache ratio needs a non-empty current sequence")]
    EmptyCurrent,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrajectoryError + '_ {
    move |source| TrajectoryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes trajectories as JSONL, one per line.
pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), TrajectoryError> {
    let mut text = String::new();
    for t in trajectories {
        text.push_str(&t.to_json_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, TrajectoryError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let format = |detail: String| TrajectoryError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| format(e.to_string()))?;
        match value.get("version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(TRAJECTORY_VERSION) => {}
            other => return Err(format(format!("unsupported trajectory version {other:?}"))),
        }
        out.push(serde_json::from_value(value).map_err(|e| format(e.to_string()))?);
    }
    Ok(out)
}

/// Reads every `*.jsonl` file in a directory, in file-name order. A plain
/// file path is read directly.
pub fn read_trajectory_dir(path: &Path) -> Result<Vec<Trajectory>, TrajectoryError> {
    if path.is_file() {
        return read_trajectories(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_trajectories(&f)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rejection filter

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected(Rejection),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    /// Positional action constraints violated.
    Structure(String),
    /// Run did not end in an answer.
    Unanswered,
    /// Some step needed a re-prompt.
    Schema,
    Incorrect,
}

impl Rejection {
    pub fn label(&self) -> &'static str {
        match self {
            Rejection::Structure(_) => "structure",
            Rejection::Unanswered => "unanswered",
            Rejection::Schema => "schema",
            Rejection::Incorrect => "incorrect",
        }
    }
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }
}

/// Checks the positional constraints on a trajectory's action sequence:
/// two planning actions first, a final answer last, and only non-final
/// solving or retrospection actions in between.
pub fn check_positions(kinds: &[ActionKind]) -> Result<(), String> {
    if kinds.len() < 3 {
        return Err(format!("trajectory has {} actions; at least 3 required", kinds.len()));
    }
    for (i, k) in kinds.iter().take(2).enumerate() {
        if k.subspace() != Subspace::Plan {
            return Err(format!("action {} is <{k}>, expected a planning action", i + 1));
        }
    }
    let last = kinds[kinds.len() - 1];
    if last != ActionKind::FinalAnswer {
        return Err(format!("last action is <{last}>, expected <final_answer>"));
    }
    for (i, k) in kinds.iter().enumerate().take(kinds.len() - 1).skip(2) {
        if k.subspace() == Subspace::Plan || *k == ActionKind::FinalAnswer {
            return Err(format!("action {} is <{k}>, not allowed mid-solve", i + 1));
        }
    }
    Ok(())
}

/// Keeps a trajectory only if it is well-formed, answered, needed no
/// re-prompts, and its final answer is correct under [`acc_score`].
pub fn rft_filter(trajectory: &Trajectory, gold: &[String]) -> Verdict {
    let kinds: Vec<ActionKind> = trajectory.steps.iter().map(|s| s.action.kind()).collect();
    if let Err(detail) = check_positions(&kinds) {
        return Verdict::Rejected(Rejection::Structure(detail));
    }
    let Some(answer) = trajectory.final_answer() else {
        return Verdict::Rejected(Rejection::Unanswered);
    };
    let last_answer = match &trajectory.steps[trajectory.steps.len() - 1].action.payload {
        Payload::FinalAnswer(f) => &f.answer,
        _ => unreachable!("checked by check_positions"),
    };
    if last_answer != answer {
        return Verdict::Rejected(Rejection::Structure(
            "outcome answer differs from the final action".into(),
        ));
    }
    if trajectory.total_retries() > 0 {
        return Verdict::Rejected(Rejection::Schema);
    }
    if acc_score(answer, gold) == 0 {
        return Verdict::Rejected(Rejection::Incorrect);
    }
    Verdict::Accepted
}

/// A trajectory paired with its filter verdict.
#[derive(Debug, Clone)]
pub struct Screened<'a> {
    pub trajectory: &'a Trajectory,
    pub verdict: Verdict,
}

impl<'a> Screened<'a> {
    pub fn new(trajectory: &'a Trajectory, gold: &[String]) -> Self {
        Screened {
            trajectory,
            verdict: rft_filter(trajectory, gold),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub state: String,
    pub action_raw_text: String,
    pub question_id: String,
    pub step_index: usize,
}

/// Writes one JSONL record per state-action pair. Returns the record count.
pub fn export_sft(items: &[Screened<'_>], out: &mut dyn Write) -> Result<usize, TrajectoryError> {
    if let Some(bad) = items.iter().find(|s| !s.verdict.is_accepted()) {
        let reason = match &bad.verdict {
            Verdict::Rejected(r) => r.label().to_string(),
            Verdict::Accepted => unreachable!(),
        };
        return Err(TrajectoryError::UnfilteredInput {
            question_id: bad.trajectory.question_id.clone(),
            reason,
        });
    }
    let mut count = 0;
    for s in items {
        for step in &s.trajectory.steps {
            let rec = SftRecord {
                state: step.input(),
                action_raw_text: step.action.raw_text.clone(),
                question_id: s.trajectory.question_id.clone(),
                step_index: step.index,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(out, "{line}").map_err(io_err(Path::new("<sft output>")))?;
            count += 1;
        }
    }
    Ok(count)
}

// ---------------------------------------------------------------------------
// Metrics

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, drop punctuation and articles, collapse whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| !(c.is_ascii_punctuation() || c.is_ascii() && !c.is_ascii_alphanumeric() && !c.is_whitespace()))
        .filter(|c| !is_unicode_punctuation(*c))
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .map(str::to_string)
        .collect()
}

fn is_unicode_punctuation(c: char) -> bool {
    matches!(
        c,
        '\u{2010}'..='\u{2027}' | '\u{3000}'..='\u{303F}' | '\u{FF01}'..='\u{FF0F}' | '«' | '»' | '¿' | '¡'
    )
}

/// 1 if the normalized prediction equals, or contains on token boundaries,
/// any normalized gold answer.
pub fn acc_score(predicted: &str, gold: &[String]) -> u8 {
    let pred = normalize_answer(predicted);
    let hit = gold.iter().any(|g| {
        let g = normalize_answer(g);
        !g.is_empty() && (pred == g || pred.windows(g.len()).any(|w| w == g.as_slice()))
    });
    u8::from(hit)
}

/// Longest common prefix of the two sequences over the current length.
pub fn cache_ratio<T: PartialEq>(prev: &[T], cur: &[T]) -> Result<f64, TrajectoryError> {
    if cur.is_empty() {
        return Err(TrajectoryError::EmptyCurrent);
    }
    let common = prev.iter().zip(cur).take_while(|(a, b)| a == b).count();
    Ok(common as f64 / cur.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub turn: usize,
    pub runs: usize,
    pub mean_state_tokens: f64,
    pub mean_input_tokens: f64,
    /// Mean over runs that have a previous turn; `None` at turn 1.
    pub mean_cache_ratio: Option<f64>,
    /// Fewer than the requested minimum number of runs reached this turn.
    pub low_sample: bool,
}

/// Per-turn means over solving turns, aligned by turn index; each point
/// reports how many runs contributed.
pub fn context_curve(
    trajectories: &[Trajectory],
    tokenizer: &dyn Tokenizer,
    min_runs: usize,
) -> Vec<CurvePoint> {
    let per_run: Vec<Vec<TurnStats>> = trajectories.iter().map(|t| t.turn_stats(tokenizer)).collect();
    let max_turns = per_run.iter().map(Vec::len).max().unwrap_or(0);
    (0..max_turns)
        .map(|i| {
            let at: Vec<&TurnStats> = per_run.iter().filter_map(|r| r.get(i)).collect();
            let n = at.len() as f64;
            let ratios: Vec<f64> = at.iter().filter_map(|s| s.cache_ratio).collect();
            CurvePoint {
                turn: i + 1,
                runs: at.len(),
                mean_state_tokens: at.iter().map(|s| s.state_tokens as f64).sum::<f64>() / n,
                mean_input_tokens: at.iter().map(|s| s.input_tokens as f64).sum::<f64>() / n,
                mean_cache_ratio: (!ratios.is_empty())
                    .then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
                low_sample: at.len() < min_runs,
            }
        })
        .collect()
}

pub fn write_curve_csv(points: &[CurvePoint], out: impl Write) -> Result<(), TrajectoryError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "turn",
        "runs",
        "mean_state_tokens",
        "mean_input_tokens",
        "mean_cache_ratio",
        "low_sample",
    ])?;
    for p in points {
        w.write_record([
            p.turn.to_string(),
            p.runs.to_string(),
            format!("{:.2}", p.mean_state_tokens),
            format!("{:.2}", p.mean_input_tokens),
            p.mean_cache_ratio.map(|r| format!("{r:.4}")).unwrap_or_default(),
            p.low_sample.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(Path::new("<csv output>")))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub question: String,
    pub gold: Vec<String>,
    pub predicted: Option<String>,
    pub acc: u8,
    pub outcome: String,
    pub context_lengths: Vec<usize>,
    pub cache_ratios: Vec<f64>,
}

impl EvalRecord {
    pub fn from_trajectory(t: &Trajectory, gold: &[String], tokenizer: &dyn Tokenizer) -> Self {
        let stats = t.turn_stats(tokenizer);
        let predicted = t.final_answer().map(str::to_string);
        EvalRecord {
            question_id: t.question_id.clone(),
            question: t.question.clone(),
            gold: gold.to_vec(),
            acc: predicted.as_deref().map_or(0, |p| acc_score(p, gold)),
            predicted,
            outcome: t.outcome.label().to_string(),
            context_lengths: stats.iter().map(|s| s.input_tokens).collect(),
            cache_ratios: stats.iter().filter_map(|s| s.cache_ratio).collect(),
        }
    }

    pub fn mean_cache_ratio(&self) -> Option<f64> {
        (!self.cache_ratios.is_empty())
            .then(|| self.cache_ratios.iter().sum::<f64>() / self.cache_ratios.len() as f64)
    }
}

/// Columns: question_id, acc, turns, final_context_tokens, mean_cache_ratio.
pub fn write_eval_csv(records: &[EvalRecord], out: impl Write) -> Result<(), TrajectoryError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["question_id", "acc", "turns", "final_context_tokens", "mean_cache_ratio"])?;
    for r in records {
        w.write_record([
            r.question_id.clone(),
            r.acc.to_string(),
            r.context_lengths.len().to_string(),
            r.context_lengths.last().copied().unwrap_or(0).to_string(),
            r.mean_cache_ratio().map(|x| format!("{x:.4}")).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(io_err(Path::new("<csv output>")))?;
    Ok(())
}

pub fn mean_acc(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| f64::from(r.acc)).sum::<f64>() / records.len() as f64
}

/// ReAct-style baseline context at solving turn `turn` (1-based): the
/// prompt, the question, then every earlier model output followed by the
/// raw tool output it produced. Used to compare against register renders.
pub fn transcript_baseline(trajectory: &Trajectory, stage_prompt: &str, turn: usize) -> String {
    let mut out = String::new();
    out.push_str(stage_prompt.trim_end());
    out.push_str("\n\n");
    crate::register::write_question(&mut out, &trajectory.question);
    let solving_start = trajectory
        .steps
        .iter()
        .position(|s| s.stage == Stage::Solving)
        .unwrap_or(trajectory.steps.len());
    for step in trajectory.steps.iter().take(solving_start + turn - 1) {
        out.push_str(step.output.trim());
        out.push('\n');
        if let Some(r) = &step.tool_result {
            out.push_str("Observation:\n");
            out.push_str(&r.render());
        }
    }
    out
}
