//! Command-line surface: single runs, batch evaluation, replay, SFT export
//! and context statistics.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::backend::{ChatBackend, HttpChatBackend, HttpChatConfig, ReplayBackend, ScriptedBackend};
use crate::engine::{question_id_for, Engine, FixedClock, PromptPack, RunConfig};
use crate::tokenizer::default_tokenizer;
use crate::tools::{RecordedTools, ToolInvoker, ToolRegistry};
use crate::trajectory::{
    context_curve, export_sft, mean_acc, read_trajectories, read_trajectory_dir, write_curve_csv,
    write_eval_csv, write_trajectories, EvalRecord, Outcome, Screened, Trajectory, TrajectoryError,
};

#[derive(Debug, Parser)]
#[command(name = "regsearch", version, about = "Register-based agentic search")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer one question and write its trajectory.
    Run {
        #[arg(long)]
        question: String,
        #[arg(long)]
        question_id: Option<String>,
        /// Trajectory output (JSONL).
        #[arg(long, default_value = "trajectory.jsonl")]
        out: PathBuf,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Run every question of a JSONL dataset and score the answers.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Directory for trajectories.jsonl and eval.csv.
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of concurrent runs.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Re-execute recorded trajectories against their recorded outputs.
    Replay {
        #[arg(long)]
        trajectories: PathBuf,
        /// Require every request context to match the recording byte for byte.
        #[arg(long)]
        strict: bool,
    },
    /// Filter trajectories and write the accepted ones as SFT JSONL.
    Export {
        /// A trajectory file or a directory of *.jsonl files.
        #[arg(long)]
        trajectories: PathBuf,
        /// Dataset JSONL holding gold answers.
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-turn context length and cache ratio curve as CSV.
    Stats {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Turns reached by fewer runs are flagged low_sample.
        #[arg(long, default_value_t = 5)]
        min_runs: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    HttpChat,
    Scripted,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunOpts {
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Script for the scripted backend (JSON array, or object keyed by question id).
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Tool config (TOML).
    #[arg(long)]
    pub tools: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub max_turns: Option<usize>,
    #[arg(long)]
    pub max_context_tokens: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Exit nonzero if any run does not end in an answer.
    #[arg(long)]
    pub strict: bool,
    /// Fix timestamps to this value (ms) for reproducible trajectories.
    #[arg(long)]
    pub fixed_clock: Option<u64>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The config file. Relative paths resolve against its directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: Option<RunConfig>,
    pub tools: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub backend: Option<BackendConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    HttpChat {
        endpoint: Option<String>,
        model: Option<String>,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        retry: Option<crate::RetryPolicy>,
    },
    Scripted {
        script: PathBuf,
    },
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.tools.as_mut().map(resolve);
        cfg.prompts.as_mut().map(resolve);
        if let Some(BackendConfig::Scripted { script }) = cfg.backend.as_mut() {
            resolve(script);
        }
        Ok(cfg)
    }
}

/// Scripted responses: one list for every question, or lists keyed by id.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Script {
    Single(Vec<String>),
    PerQuestion(BTreeMap<String, Vec<String>>),
}

impl Script {
    fn for_question(&self, question_id: &str) -> Result<Vec<String>, CliError> {
        match self {
            Script::Single(v) => Ok(v.clone()),
            Script::PerQuestion(m) => m.get(question_id).cloned().ok_or_else(|| {
                CliError::Config(format!("script has no responses for question {question_id:?}"))
            }),
        }
    }
}

enum BackendSource {
    Shared(Arc<dyn ChatBackend>),
    Scripted(Script),
}

/// Everything a run needs, resolved from config file and flags.
pub struct Resolved {
    pub config: RunConfig,
    pub prompts: PromptPack,
    tools: Arc<dyn ToolInvoker>,
    backend: BackendSource,
    fixed_clock: Option<u64>,
}

impl Resolved {
    pub fn new(file: &FileConfig, opts: &RunOpts) -> Result<Self, CliError> {
        let mut config = file.run.clone().unwrap_or_default();
        if let Some(v) = opts.max_turns {
            config.max_turns = v;
        }
        if let Some(v) = opts.max_context_tokens {
            config.max_context_tokens = v;
        }
        if let Some(v) = opts.top_k {
            config.top_k = v;
        }
        config
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;

        let prompts = match opts.prompts.as_ref().or(file.prompts.as_ref()) {
            Some(p) => PromptPack::from_file(p).map_err(|e| CliError::Config(e.to_string()))?,
            None => PromptPack::default(),
        };

        let tools: Arc<dyn ToolInvoker> = match opts.tools.as_ref().or(file.tools.as_ref()) {
            Some(p) => Arc::new(
                ToolRegistry::from_config_file(p, Some(config.top_k))
                    .map_err(|e| CliError::Config(e.to_string()))?,
            ),
            None => {
                log::warn!("no tool config given; the agent has no tools");
                Arc::new(ToolRegistry::new())
            }
        };

        let kind = opts.backend.or(match &file.backend {
            Some(BackendConfig::HttpChat { .. }) => Some(BackendKind::HttpChat),
            Some(BackendConfig::Scripted { .. }) => Some(BackendKind::Scripted),
            None => None,
        });
        let backend = match kind.unwrap_or(BackendKind::HttpChat) {
            BackendKind::Scripted => {
                let path = match (&opts.script, &file.backend) {
                    (Some(p), _) => p.clone(),
                    (None, Some(BackendConfig::Scripted { script })) => script.clone(),
                    _ => {
                        return Err(CliError::Config(
                            "the scripted backend needs --script or [backend] script".into(),
                        ))
                    }
                };
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                let script: Script = serde_json::from_str(&text).map_err(|e| {
                    CliError::Config(format!(
                        "{}: expected a JSON array of responses or an object of arrays: {e}",
                        path.display()
                    ))
                })?;
                BackendSource::Scripted(script)
            }
            BackendKind::HttpChat => {
                let cfg = http_config(file.backend.as_ref())?;
                BackendSource::Shared(Arc::new(HttpChatBackend::new(&cfg)))
            }
        };

        Ok(Resolved {
            config,
            prompts,
            tools,
            backend,
            fixed_clock: opts.fixed_clock,
        })
    }

    pub fn engine_for(&self, question_id: &str) -> Result<Engine, CliError> {
        let backend: Arc<dyn ChatBackend> = match &self.backend {
            BackendSource::Shared(b) => b.clone(),
            BackendSource::Scripted(s) => Arc::new(ScriptedBackend::new(s.for_question(question_id)?)),
        };
        let mut engine = Engine::new(backend, self.tools.clone(), self.config.clone())
            .with_prompts(self.prompts.clone());
        if let Some(t) = self.fixed_clock {
            engine = engine.with_clock(Arc::new(FixedClock(t)));
        }
        Ok(engine)
    }
}

fn http_config(file: Option<&BackendConfig>) -> Result<HttpChatConfig, CliError> {
    let env = |k: &str| std::env::var(k).ok();
    let (endpoint, model, key_env, retry) = match file {
        Some(BackendConfig::HttpChat {
            endpoint,
            model,
            api_key_env,
            retry,
        }) => (endpoint.clone(), model.clone(), api_key_env.clone(), *retry),
        _ => (None, None, None, None),
    };
    let missing = |what: &str, var: &str| {
        CliError::Config(format!(
            "http_chat backend needs {what}: set [backend] {what} in the config or {var}"
        ))
    };
    Ok(HttpChatConfig {
        endpoint: endpoint
            .or_else(|| env(crate::backend::ENV_LLM_URL))
            .ok_or_else(|| missing("endpoint", crate::backend::ENV_LLM_URL))?,
        model: model
            .or_else(|| env(crate::backend::ENV_LLM_MODEL))
            .ok_or_else(|| missing("model", crate::backend::ENV_LLM_MODEL))?,
        api_key_env: key_env.unwrap_or_else(|| crate::backend::ENV_LLM_API_KEY.to_string()),
        retry: retry.unwrap_or_default(),
    })
}

/// One dataset line.
#[derive(Debug, Clone, Deserialize)]
pub struct DatasetItem {
    #[serde(default)]
    pub question_id: Option<String>,
    pub question: String,
    pub answers: Vec<String>,
}

impl DatasetItem {
    pub fn id(&self) -> String {
        self.question_id
            .clone()
            .unwrap_or_else(|| question_id_for(&self.question))
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetItem>, CliError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            CliError::Config(format!(
                "{}:{}: expected {{\"question\", \"answers\"}}: {e}",
                path.display(),
                i + 1
            ))
        })?);
    }
    Ok(out)
}

/// Executes a parsed command, writing human-readable output to `out`.
/// Returns the process exit status.
pub fn run_command(cli: &Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let stdout_err = |e| io_err(Path::new("<stdout>"))(e);
    match &cli.command {
        Command::Run {
            question,
            question_id,
            out: path,
            opts,
        } => {
            let resolved = Resolved::new(&file, opts)?;
            let qid = question_id.clone().unwrap_or_else(|| question_id_for(question));
            let result = resolved.engine_for(&qid)?.run(Some(&qid), question);
            write_trajectories(path, std::slice::from_ref(&result.trajectory))?;
            match &result.outcome {
                Outcome::Answered { answer } => writeln!(out, "{answer}").map_err(stdout_err)?,
                other => {
                    log::error!("run ended without an answer: {other:?}");
                    writeln!(out, "no answer ({})", other.label()).map_err(stdout_err)?;
                }
            }
            Ok(exit_status(opts.strict, [&result.outcome]))
        }
        Command::Eval {
            dataset,
            out_dir,
            parallel,
            opts,
        } => {
            let resolved = Resolved::new(&file, opts)?;
            let items = read_dataset(dataset)?;
            let engines = items
                .iter()
                .map(|item| resolved.engine_for(&item.id()))
                .collect::<Result<Vec<_>, _>>()?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads((*parallel).max(1))
                .build()
                .map_err(|e| CliError::Config(e.to_string()))?;
            let trajectories: Vec<Trajectory> = pool.install(|| {
                items
                    .par_iter()
                    .zip(engines.par_iter())
                    .map(|(item, engine)| engine.run(Some(&item.id()), &item.question).trajectory)
                    .collect()
            });
            fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
            write_trajectories(&out_dir.join("trajectories.jsonl"), &trajectories)?;
            let tok = default_tokenizer();
            let records: Vec<EvalRecord> = items
                .iter()
                .zip(&trajectories)
                .map(|(item, t)| EvalRecord::from_trajectory(t, &item.answers, tok.as_ref()))
                .collect();
            let csv_path = out_dir.join("eval.csv");
            let f = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
            write_eval_csv(&records, f)?;
            writeln!(
                out,
                "mean ACC {:.4} over {} questions ({} answered)",
                mean_acc(&records),
                records.len(),
                trajectories.iter().filter(|t| t.final_answer().is_some()).count()
            )
            .map_err(stdout_err)?;
            Ok(exit_status(opts.strict, trajectories.iter().map(|t| &t.outcome)))
        }
        Command::Replay {
            trajectories,
            strict,
        } => {
            let recorded = read_trajectories(trajectories)?;
            let mut divergent = 0;
            for t in &recorded {
                if let Some(problem) = replay_one(t, *strict) {
                    divergent += 1;
                    writeln!(out, "{}: diverged: {problem}", t.question_id).map_err(stdout_err)?;
                }
            }
            writeln!(
                out,
                "replayed {} trajectories, {divergent} divergent",
                recorded.len()
            )
            .map_err(stdout_err)?;
            Ok(i32::from(divergent > 0))
        }
        Command::Export {
            trajectories,
            gold,
            out: path,
        } => {
            let trajs = read_trajectory_dir(trajectories)?;
            let gold: BTreeMap<String, Vec<String>> = read_dataset(gold)?
                .into_iter()
                .map(|d| (d.id(), d.answers))
                .collect();
            let screened: Vec<Screened<'_>> = trajs
                .iter()
                .map(|t| {
                    let answers = gold.get(&t.question_id).map(Vec::as_slice).unwrap_or_else(|| {
                        log::warn!("no gold answers for {}", t.question_id);
                        &[]
                    });
                    Screened::new(t, answers)
                })
                .collect();
            let mut rejected: BTreeMap<&str, usize> = BTreeMap::new();
            for s in &screened {
                if let crate::trajectory::Verdict::Rejected(r) = &s.verdict {
                    *rejected.entry(r.label()).or_default() += 1;
                }
            }
            let accepted: Vec<Screened<'_>> = screened
                .into_iter()
                .filter(|s| s.verdict.is_accepted())
                .collect();
            if accepted.is_empty() {
                log::warn!("no trajectories passed the filter; writing an empty corpus");
            }
            let mut f = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
            let pairs = export_sft(&accepted, &mut f)?;
            f.flush().map_err(io_err(path))?;
            writeln!(
                out,
                "exported {pairs} state-action pairs from {} of {} trajectories; rejected: {rejected:?}",
                accepted.len(),
                trajs.len()
            )
            .map_err(stdout_err)?;
            Ok(0)
        }
        Command::Stats {
            trajectories,
            out: path,
            min_runs,
        } => {
            let trajs = read_trajectory_dir(trajectories)?;
            let curve = context_curve(&trajs, default_tokenizer().as_ref(), *min_runs);
            let f = fs::File::create(path).map_err(io_err(path))?;
            write_curve_csv(&curve, f)?;
            writeln!(
                out,
                "wrote {} turns from {} trajectories to {}",
                curve.len(),
                trajs.len(),
                path.display()
            )
            .map_err(stdout_err)?;
            Ok(0)
        }
    }
}

fn exit_status<'a>(strict: bool, outcomes: impl IntoIterator<Item = &'a Outcome>) -> i32 {
    let failed = outcomes
        .into_iter()
        .any(|o| !matches!(o, Outcome::Answered { .. }));
    i32::from(strict && failed)
}

/// Re-runs a trajectory against its recorded completions and tool results.
/// Returns a description of the first divergence, if any.
pub fn replay_one(t: &Trajectory, strict: bool) -> Option<String> {
    let completions = t.recorded_completions();
    let expected = completions.len();
    let backend = Arc::new(ReplayBackend::new(completions, strict));
    let tools = Arc::new(RecordedTools::new(t.tools.clone(), t.recorded_tool_results()));
    let engine = Engine::new(backend.clone(), tools, t.config.clone())
        .with_prompts(t.prompts.clone())
        .with_clock(Arc::new(FixedClock(t.started_at_ms)));
    let replayed = engine.run(Some(&t.question_id), &t.question).trajectory;
    if replayed.outcome != t.outcome {
        return Some(format!(
            "outcome {:?}, recorded {:?}",
            replayed.outcome, t.outcome
        ));
    }
    if backend.consumed() != expected {
        return Some(format!(
            "consumed {} of {expected} recorded completions",
            backend.consumed()
        ));
    }
    let actions = |x: &Trajectory| x.steps.iter().map(|s| s.action.clone()).collect::<Vec<_>>();
    if actions(&replayed) != actions(t) {
        return Some("action sequence differs".into());
    }
    if strict {
        let states = |x: &Trajectory| x.steps.iter().map(|s| s.input()).collect::<Vec<_>>();
        if states(&replayed) != states(t) {
            return Some("rendered states differ".into());
        }
    }
    None
}
