//! The closed action grammar.
//!
//! Eight action kinds split across three disjoint subspaces. Every model
//! response is reduced to exactly one action block of the form
//! `<kind>{json-object}</kind>`; text outside the block is ignored (or
//! rejected in strict mode). Rendering is canonical: sorted object keys,
//! compact separators, UTF-8.

use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    IntentRefinement,
    ProblemFraming,
    ToolCall,
    DocExtraction,
    TaskAnswer,
    FinalAnswer,
    RevisitTask,
    Replanning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subspace {
    Plan,
    Sol,
    Ret,
}

impl ActionKind {
    pub const ALL: [ActionKind; 8] = [
        ActionKind::IntentRefinement,
        ActionKind::ProblemFraming,
        ActionKind::ToolCall,
        ActionKind::DocExtraction,
        ActionKind::TaskAnswer,
        ActionKind::FinalAnswer,
        ActionKind::RevisitTask,
        ActionKind::Replanning,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ActionKind::IntentRefinement => "intent_refinement",
            ActionKind::ProblemFraming => "problem_framing",
            ActionKind::ToolCall => "tool_call",
            ActionKind::DocExtraction => "doc_extraction",
            ActionKind::TaskAnswer => "task_answer",
            ActionKind::FinalAnswer => "final_answer",
            ActionKind::RevisitTask => "revisit_task",
            ActionKind::Replanning => "replanning",
        }
    }

    pub fn subspace(self) -> Subspace {
        subspace_of(self)
    }
}

/// Total map from kind to its subspace.
pub fn subspace_of(kind: ActionKind) -> Subspace {
    match kind {
        ActionKind::IntentRefinement | ActionKind::ProblemFraming => Subspace::Plan,
        ActionKind::ToolCall
        | ActionKind::DocExtraction
        | ActionKind::TaskAnswer
        | ActionKind::FinalAnswer => Subspace::Sol,
        ActionKind::RevisitTask | ActionKind::Replanning => Subspace::Ret,
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ActionKind {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| ParseError::UnknownActionKind { tag: s.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentPayload {
    pub refined_goal: String,
    #[serde(default)]
    pub constraints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub description: String,
}

/// A dependency edge `(from, to)`: `to` depends on `from`.
pub type Edge = (String, String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramingPayload {
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolCallPayload {
    pub task_id: String,
    pub tool_name: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocExtractionPayload {
    pub task_id: String,
    pub facts: Vec<String>,
    #[serde(default)]
    pub source_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskAnswerEntry {
    pub task_id: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskAnswerPayload {
    pub answers: Vec<TaskAnswerEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalAnswerPayload {
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevisitPayload {
    pub task_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplanPayload {
    pub reason: String,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub edges: Vec<Edge>,
}

/// Structured payload, one variant per action kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    IntentRefinement(IntentPayload),
    ProblemFraming(FramingPayload),
    ToolCall(ToolCallPayload),
    DocExtraction(DocExtractionPayload),
    TaskAnswer(TaskAnswerPayload),
    FinalAnswer(FinalAnswerPayload),
    RevisitTask(RevisitPayload),
    Replanning(ReplanPayload),
}

impl Payload {
    pub fn kind(&self) -> ActionKind {
        match self {
            Payload::IntentRefinement(_) => ActionKind::IntentRefinement,
            Payload::ProblemFraming(_) => ActionKind::ProblemFraming,
            Payload::ToolCall(_) => ActionKind::ToolCall,
            Payload::DocExtraction(_) => ActionKind::DocExtraction,
            Payload::TaskAnswer(_) => ActionKind::TaskAnswer,
            Payload::FinalAnswer(_) => ActionKind::FinalAnswer,
            Payload::RevisitTask(_) => ActionKind::RevisitTask,
            Payload::Replanning(_) => ActionKind::Replanning,
        }
    }

    fn to_value(&self) -> Value {
        let v = match self {
            Payload::IntentRefinement(p) => serde_json::to_value(p),
            Payload::ProblemFraming(p) => serde_json::to_value(p),
            Payload::ToolCall(p) => serde_json::to_value(p),
            Payload::DocExtraction(p) => serde_json::to_value(p),
            Payload::TaskAnswer(p) => serde_json::to_value(p),
            Payload::FinalAnswer(p) => serde_json::to_value(p),
            Payload::RevisitTask(p) => serde_json::to_value(p),
            Payload::Replanning(p) => serde_json::to_value(p),
        };
        v.expect("payload types always serialize")
    }

    fn from_value(kind: ActionKind, value: Value) -> Result<Self, ParseError> {
        fn typed<T: DeserializeOwned>(kind: ActionKind, value: Value) -> Result<T, ParseError> {
            serde_json::from_value(value).map_err(|e| ParseError::SchemaViolation {
                kind,
                detail: e.to_string(),
            })
        }
        let payload = match kind {
            ActionKind::IntentRefinement => Payload::IntentRefinement(typed(kind, value)?),
            ActionKind::ProblemFraming => Payload::ProblemFraming(typed(kind, value)?),
            ActionKind::ToolCall => Payload::ToolCall(typed(kind, value)?),
            ActionKind::DocExtraction => Payload::DocExtraction(typed(kind, value)?),
            ActionKind::TaskAnswer => Payload::TaskAnswer(typed(kind, value)?),
            ActionKind::FinalAnswer => Payload::FinalAnswer(typed(kind, value)?),
            ActionKind::RevisitTask => Payload::RevisitTask(typed(kind, value)?),
            ActionKind::Replanning => Payload::Replanning(typed(kind, value)?),
        };
        payload.validate()?;
        Ok(payload)
    }

    /// Field-level checks serde cannot express. Graph-level checks on
    /// framing payloads (unique ids, declared endpoints, acyclicity) are
    /// done by [`crate::plan::DagPlan::build`].
    pub fn validate(&self) -> Result<(), ParseError> {
        let kind = self.kind();
        let violation = |detail: &str| {
            Err(ParseError::SchemaViolation {
                kind,
                detail: detail.to_string(),
            })
        };
        match self {
            Payload::IntentRefinement(p) if p.refined_goal.trim().is_empty() => {
                violation("refined_goal must be non-empty")
            }
            Payload::ProblemFraming(FramingPayload { tasks, .. })
            | Payload::Replanning(ReplanPayload { tasks, .. })
                if tasks.iter().any(|t| t.task_id.is_empty()) =>
            {
                violation("task_id must be non-empty")
            }
            Payload::ToolCall(p) if p.task_id.is_empty() || p.tool_name.is_empty() => {
                violation("task_id and tool_name must be non-empty")
            }
            Payload::DocExtraction(p) if p.task_id.is_empty() => {
                violation("task_id must be non-empty")
            }
            Payload::TaskAnswer(p) if p.answers.is_empty() => {
                violation("answers must list at least one task")
            }
            Payload::RevisitTask(p) if p.task_id.is_empty() => {
                violation("task_id must be non-empty")
            }
            _ => Ok(()),
        }
    }
}

/// One parsed protocol unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub payload: Payload,
    /// The action block exactly as emitted, from `<kind>` through `</kind>`.
    pub raw_text: String,
}

impl Action {
    /// Builds an action with its canonical surface form.
    pub fn new(payload: Payload) -> Result<Self, ParseError> {
        render_action(&payload).map(|raw_text| Action { payload, raw_text })
    }

    pub fn kind(&self) -> ActionKind {
        self.payload.kind()
    }
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.raw_text.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        parse_action(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no action block found; respond with exactly one block of the form <kind>{{...}}</kind>")]
    NoActionBlock,
    #[error("found more than one action block (second starts at byte {second_at}); emit exactly one action per step")]
    MultipleActionBlocks { second_at: usize },
    #[error("unknown action kind <{tag}>; allowed kinds: intent_refinement, problem_framing, tool_call, doc_extraction, task_answer, final_answer, revisit_task, replanning")]
    UnknownActionKind { tag: String },
    #[error("malformed payload in <{kind}>: {detail}")]
    MalformedPayload { kind: ActionKind, detail: String },
    #[error("payload of <{kind}> violates its schema: {detail}")]
    SchemaViolation { kind: ActionKind, detail: String },
    #[error("text outside the action block is not allowed in strict mode")]
    ExtraText,
}

impl ParseError {
    pub fn category(&self) -> &'static str {
        match self {
            ParseError::NoActionBlock => "no_action_block",
            ParseError::MultipleActionBlocks { .. } => "multiple_action_blocks",
            ParseError::UnknownActionKind { .. } => "unknown_action_kind",
            ParseError::MalformedPayload { .. } => "malformed_payload",
            ParseError::SchemaViolation { .. } => "schema_violation",
            ParseError::ExtraText => "extra_text",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOptions {
    /// Reject any non-whitespace text outside the action block.
    pub strict: bool,
}

/// Parses one action out of arbitrary model output.
pub fn parse_action(text: &str) -> Result<Action, ParseError> {
    parse_action_with(text, ParseOptions::default())
}

pub fn parse_action_with(text: &str, options: ParseOptions) -> Result<Action, ParseError> {
    let open = find_opening(text, 0).ok_or(ParseError::NoActionBlock)?;
    let kind: ActionKind = open.tag.parse()?;
    let block = parse_block(text, &open, kind)?;

    if let Some(second) = find_opening(text, block.end) {
        return Err(ParseError::MultipleActionBlocks {
            second_at: second.start,
        });
    }
    if options.strict
        && (!text[..open.start].trim().is_empty() || !text[block.end..].trim().is_empty())
    {
        return Err(ParseError::ExtraText);
    }

    let payload = Payload::from_value(kind, block.value)?;
    Ok(Action {
        payload,
        raw_text: text[open.start..block.end].to_string(),
    })
}

/// Canonical `<kind>{payload}</kind>` text.
pub fn render_action(payload: &Payload) -> Result<String, ParseError> {
    payload.validate()?;
    let tag = payload.kind().tag();
    let mut out = String::with_capacity(64);
    out.push('<');
    out.push_str(tag);
    out.push('>');
    write_canonical(&payload.to_value(), &mut out);
    out.push_str("</");
    out.push_str(tag);
    out.push('>');
    Ok(out)
}

/// Re-renders parseable text in canonical form.
pub fn canonicalize(text: &str) -> Result<String, ParseError> {
    parse_action(text).and_then(|a| render_action(&a.payload))
}

/// Compact JSON with object keys sorted by byte order at every depth.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

struct Opening<'a> {
    start: usize,
    /// Byte offset just past `>`.
    body: usize,
    tag: &'a str,
}

struct Block {
    value: Value,
    end: usize,
}

fn is_tag_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

fn is_tag_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Finds the next `<tag>` that opens an action block: either the tag names a
/// known kind, or the tag is immediately followed by a JSON object.
fn find_opening(text: &str, from: usize) -> Option<Opening<'_>> {
    let bytes = text.as_bytes();
    let mut i = from;
    while let Some(offset) = text[i..].find('<') {
        let start = i + offset;
        let mut j = start + 1;
        if j < bytes.len() && is_tag_start(bytes[j]) {
            while j < bytes.len() && is_tag_char(bytes[j]) {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'>' {
                let tag = &text[start + 1..j];
                let body = j + 1;
                let known = tag.parse::<ActionKind>().is_ok();
                if known || text[body..].trim_start().starts_with('{') {
                    return Some(Opening { start, body, tag });
                }
            }
        }
        i = start + 1;
    }
    None
}

fn parse_block(text: &str, open: &Opening<'_>, kind: ActionKind) -> Result<Block, ParseError> {
    let malformed = |detail: String| ParseError::MalformedPayload { kind, detail };
    let rest = &text[open.body..];
    let lead = rest.len() - rest.trim_start().len();
    let json_start = open.body + lead;
    if !text[json_start..].starts_with('{') {
        return Err(malformed("payload must be a single JSON object".into()));
    }

    let mut stream = serde_json::Deserializer::from_str(&text[json_start..]).into_iter::<Value>();
    let value = match stream.next() {
        Some(Ok(v)) => v,
        Some(Err(e)) => return Err(malformed(e.to_string())),
        None => return Err(malformed("empty payload".into())),
    };
    let json_end = json_start + stream.byte_offset();

    let after = &text[json_end..];
    let gap = after.len() - after.trim_start().len();
    let close = format!("</{}>", open.tag);
    if !after[gap..].starts_with(&close) {
        return Err(malformed(format!("expected closing tag {close} after payload")));
    }
    Ok(Block {
        value,
        end: json_end + gap + close.len(),
    })
}
