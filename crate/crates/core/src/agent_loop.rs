//! One trial: provision, route once, loop model calls and tool dispatch under
//! a wall-clock budget, then snapshot the final workspace.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use tempfile::TempDir;
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::model_backend::{
    media_limit, mime_for_path, BackendError, ContentPart, MediaPayload, Message, ModelBackend,
    ModelRequest, Role, ToolCall, Usage,
};
use crate::routing::{
    build_prompt, effective_schema, HarnessVariant, RoutingError, ToolName, ToolSchema,
};
use crate::sandbox::{ExecResult, OutputSnapshot, Runtime, Sandbox, SandboxError};
use crate::task_model::TaskSpec;

pub const DEFAULT_BUDGET: Duration = Duration::from_secs(600);
pub const MAX_COMMAND_TIMEOUT: Duration = Duration::from_secs(120);
/// Workspace path shown to the model, independent of where the runtime put it.
pub const PROMPT_WORKSPACE: &str = "/workspace";
const OPENING_MESSAGE: &str = "The terminal is ready. Begin the task.";
const NO_CALL_NUDGE: &str =
    "No tool call received. Call a tool to continue, or task_complete when the outputs are written.";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentConfig {
    pub harness: HarnessVariant,
    pub model: String,
}

impl AgentConfig {
    pub fn new(harness: HarnessVariant, model: impl Into<String>) -> Self {
        AgentConfig {
            harness,
            model: model.into(),
        }
    }

    /// Filesystem-safe label, e.g. `MM__google-gemini-3.1-pro`.
    pub fn label(&self) -> String {
        let model: String = self
            .model
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || matches!(c, '-' | '.' | '_') {
                    c
                } else {
                    '-'
                }
            })
            .collect();
        format!("{}__{}", self.harness, model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    TaskComplete,
    BudgetExhausted,
    BackendError,
    ScriptExhausted,
    /// Provisioning failed; the agent never ran.
    SetupFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolResult {
    Exec(ExecResult),
    MediaDelivered {
        path: String,
        modality: crate::routing::Modality,
        mime_type: String,
        bytes: usize,
        sha256: String,
    },
    Completion,
    Rejected {
        reason: String,
    },
}

impl ToolResult {
    pub fn is_rejection(&self) -> bool {
        matches!(self, ToolResult::Rejected { .. })
    }

    fn render(&self) -> String {
        match self {
            ToolResult::Exec(r) => r.render(),
            ToolResult::MediaDelivered {
                path,
                mime_type,
                bytes,
                ..
            } => {
                format!("Attached {path} ({mime_type}, {bytes} bytes).")
            }
            ToolResult::Completion => "Task marked complete.".into(),
            ToolResult::Rejected { reason } => format!("Error: {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolOutcome {
    pub call_id: String,
    pub tool: String,
    pub result: ToolResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Turn {
    pub index: u32,
    pub request_digest: String,
    pub schema_digest: String,
    pub assistant_text: Option<String>,
    pub tool_calls: Vec<ToolCall>,
    pub tool_results: Vec<ToolOutcome>,
    pub usage: Usage,
    pub retries: u32,
    /// Seconds spent in this turn.
    pub wall: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub trial_id: String,
    pub agent: AgentConfig,
    pub task_id: String,
    pub schema: Vec<ToolName>,
    pub turns: Vec<Turn>,
    pub terminal_reason: TerminalReason,
    /// Agent execution window: first model call to loop exit.
    pub agent_wall_seconds: f64,
}

impl Trajectory {
    pub fn total_usage(&self) -> Usage {
        self.turns.iter().map(|t| t.usage).sum()
    }

    /// Every `execute_commands` command line, in order.
    pub fn commands(&self) -> impl Iterator<Item = &str> {
        self.turns.iter().flat_map(|t| {
            t.tool_calls.iter().filter_map(|c| {
                (c.name == ToolName::ExecuteCommands.as_str())
                    .then(|| c.arguments.get("command").and_then(|v| v.as_str()))
                    .flatten()
            })
        })
    }
}

/// Final workspace copied out of the sandbox, plus the declared outputs.
#[derive(Debug)]
pub struct WorkspaceSnapshot {
    dir: TempDir,
    pub outputs: OutputSnapshot,
}

impl WorkspaceSnapshot {
    pub fn path(&self) -> &Path {
        self.dir.path()
    }
}

#[derive(Debug)]
pub struct TrialOutcome {
    pub trajectory: Trajectory,
    pub snapshot: WorkspaceSnapshot,
}

/// Failures outside the agent window (setup and final snapshot).
#[derive(Debug, Error)]
pub enum TrialError {
    #[error("provisioning failed: {0}")]
    Provision(#[source] SandboxError),
    #[error("tool routing failed: {0}")]
    Routing(#[from] RoutingError),
    #[error("snapshot failed: {0}")]
    Snapshot(#[source] SandboxError),
    #[error("trajectory log {path}: {source}")]
    Log {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct TrialOptions {
    pub trial_id: String,
    pub budget: Duration,
    /// Where to append one JSON line per turn.
    pub trajectory_log: Option<PathBuf>,
    pub max_command_timeout: Duration,
}

impl TrialOptions {
    pub fn new(trial_id: impl Into<String>, budget: Duration) -> Self {
        TrialOptions {
            trial_id: trial_id.into(),
            budget,
            trajectory_log: None,
            max_command_timeout: MAX_COMMAND_TIMEOUT,
        }
    }

    pub fn with_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.trajectory_log = Some(path.into());
        self
    }
}

/// Result of dispatching one tool call.
#[derive(Debug)]
pub struct Dispatched {
    pub result: ToolResult,
    pub media: Option<MediaPayload>,
}

impl Dispatched {
    fn reject(reason: impl Into<String>) -> Self {
        Dispatched {
            result: ToolResult::Rejected {
                reason: reason.into(),
            },
            media: None,
        }
    }
}

fn string_arg<'a>(call: &'a ToolCall, key: &str) -> Result<&'a str, String> {
    match call.arguments.get(key) {
        Some(serde_json::Value::String(s)) => Ok(s),
        Some(_) => Err(format!("argument `{key}` must be a string")),
        None => Err(format!("missing required argument `{key}`")),
    }
}

/// Executes one tool call against the sandbox. Never fails: problems come
/// back as [`ToolResult::Rejected`].
pub fn dispatch(
    sandbox: &mut dyn Sandbox,
    schema: &ToolSchema,
    call: &ToolCall,
    remaining: Duration,
    max_command_timeout: Duration,
) -> Dispatched {
    let Some(tool) = call.tool().filter(|t| schema.contains(*t)) else {
        return Dispatched::reject(format!("tool not available: {}", call.name));
    };
    match tool {
        ToolName::TaskComplete => Dispatched {
            result: ToolResult::Completion,
            media: None,
        },
        ToolName::ExecuteCommands => {
            let command = match string_arg(call, "command") {
                Ok(c) => c,
                Err(e) => return Dispatched::reject(e),
            };
            let mut timeout = max_command_timeout.min(remaining);
            if let Some(t) = call
                .arguments
                .get("timeout_seconds")
                .and_then(|v| v.as_f64())
            {
                if t.is_finite() && t > 0.0 {
                    timeout = timeout.min(Duration::from_secs_f64(t));
                }
            }
            if timeout.is_zero() {
                return Dispatched::reject("budget exhausted");
            }
            match sandbox.exec(command, timeout) {
                Ok(r) => Dispatched {
                    result: ToolResult::Exec(r),
                    media: None,
                },
                Err(e) => Dispatched::reject(e.to_string()),
            }
        }
        ToolName::ViewImage | ToolName::ListenAudio | ToolName::WatchVideo => {
            let path = match string_arg(call, "path") {
                Ok(p) => p,
                Err(e) => return Dispatched::reject(e),
            };
            let want = tool.modality().expect("perception tool");
            let Some((mime, modality)) = mime_for_path(path) else {
                return Dispatched::reject(format!(
                    "{tool} cannot open `{path}`: unsupported file type"
                ));
            };
            if modality != want {
                return Dispatched::reject(format!(
                    "{tool} expects a {want} file, got `{path}` ({modality})"
                ));
            }
            let data = match sandbox.read_file(path) {
                Ok(d) => d,
                Err(SandboxError::NotFound(_)) => {
                    return Dispatched::reject(format!("not found: {path}"))
                }
                Err(SandboxError::PathEscape(_)) => {
                    return Dispatched::reject(format!("path escapes the workspace: {path}"))
                }
                Err(e) => return Dispatched::reject(e.to_string()),
            };
            let limit = media_limit(modality);
            if data.len() > limit {
                return Dispatched::reject(format!(
                    "{path} is {} bytes, over the {limit}-byte {modality} limit; \
                     clip or downsample it with terminal tools first",
                    data.len()
                ));
            }
            if data.is_empty() {
                return Dispatched::reject(format!("{path} is empty"));
            }
            let result = ToolResult::MediaDelivered {
                path: path.to_string(),
                modality,
                mime_type: mime.to_string(),
                bytes: data.len(),
                sha256: sha256_hex(&data),
            };
            Dispatched {
                result,
                media: Some(MediaPayload {
                    modality,
                    mime_type: mime.to_string(),
                    data,
                    source_path: path.to_string(),
                    duration_seconds: None,
                }),
            }
        }
    }
}

struct TurnLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TurnLog {
    fn open(path: &Path) -> Result<TurnLog, TrialError> {
        let err = |source| TrialError::Log {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(err)?;
        }
        let file = File::create(path).map_err(err)?;
        Ok(TurnLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    fn append(&mut self, turn: &Turn) {
        let line = serde_json::to_string(turn).expect("turn serializes");
        let res = writeln!(self.out, "{line}").and_then(|_| self.out.flush());
        if let Err(e) = res {
            warn!("cannot append to {}: {e}", self.path.display());
        }
    }
}

/// Runs `agent` on `spec` until completion, budget expiry, backend failure or
/// script exhaustion, and returns the trajectory with the final snapshot.
pub fn run_trial(
    spec: &TaskSpec,
    agent: &AgentConfig,
    backend: &dyn ModelBackend,
    runtime: &dyn Runtime,
    opts: &TrialOptions,
) -> Result<TrialOutcome, TrialError> {
    let mut sandbox = runtime
        .provision(spec, &opts.trial_id)
        .map_err(TrialError::Provision)?;
    let result = drive(spec, agent, backend, sandbox.as_mut(), opts);
    if let Err(e) = sandbox.teardown() {
        warn!("trial {}: teardown failed: {e}", opts.trial_id);
    }
    result
}

fn drive(
    spec: &TaskSpec,
    agent: &AgentConfig,
    backend: &dyn ModelBackend,
    sandbox: &mut dyn Sandbox,
    opts: &TrialOptions,
) -> Result<TrialOutcome, TrialError> {
    // Routed from the seed: staging is byte-identical, and the agent has not acted yet.
    let schema = effective_schema(agent.harness, &spec.workspace_seed)?;
    let schema_digest = sha256_hex(&serde_json::to_vec(&schema).expect("schema serializes"));
    let system_prompt = build_prompt(
        agent.harness,
        &schema,
        &spec.instruction,
        &format!("{PROMPT_WORKSPACE}$ "),
    );
    let mut log = opts
        .trajectory_log
        .as_deref()
        .map(TurnLog::open)
        .transpose()?;

    let start = Instant::now();
    let deadline = start + opts.budget;
    let mut messages = vec![Message {
        role: Role::Environment,
        content: vec![ContentPart::Text {
            text: OPENING_MESSAGE.into(),
        }],
    }];
    let mut turns = Vec::new();
    let reason = loop {
        if Instant::now() >= deadline {
            break TerminalReason::BudgetExhausted;
        }
        let turn_start = Instant::now();
        let request = ModelRequest {
            system_prompt: system_prompt.clone(),
            messages: messages.clone(),
            tool_schema: schema.clone(),
        };
        let mut turn = Turn {
            index: turns.len() as u32 + 1,
            request_digest: request.digest(),
            schema_digest: schema_digest.clone(),
            assistant_text: None,
            tool_calls: vec![],
            tool_results: vec![],
            usage: Usage::default(),
            retries: 0,
            wall: 0.0,
            error: None,
        };
        let mut stop = None;
        match backend.complete(&request, Some(deadline)) {
            Err(e) => {
                turn.error = Some(e.to_string());
                stop = Some(match e {
                    BackendError::DeadlineExceeded => TerminalReason::BudgetExhausted,
                    _ => TerminalReason::BackendError,
                });
            }
            Ok(resp) if resp.end_of_script => {
                stop = Some(TerminalReason::ScriptExhausted);
            }
            Ok(resp) => {
                turn.assistant_text = resp.assistant_text.clone();
                turn.usage = resp.usage;
                turn.retries = resp.retries;
                let mut agent_parts: Vec<ContentPart> = resp
                    .assistant_text
                    .iter()
                    .map(|t| ContentPart::Text { text: t.clone() })
                    .collect();
                let mut env_parts = Vec::new();
                let mut media_parts = Vec::new();
                for call in &resp.tool_calls {
                    agent_parts.push(ContentPart::ToolCall(call.clone()));
                    let remaining = deadline.saturating_duration_since(Instant::now());
                    let d = if stop == Some(TerminalReason::TaskComplete) {
                        Dispatched::reject("not executed: task_complete was already called")
                    } else if stop == Some(TerminalReason::BudgetExhausted) || remaining.is_zero() {
                        stop = Some(TerminalReason::BudgetExhausted);
                        Dispatched::reject("not executed: budget exhausted")
                    } else {
                        dispatch(sandbox, &schema, call, remaining, opts.max_command_timeout)
                    };
                    if d.result == ToolResult::Completion {
                        stop = Some(TerminalReason::TaskComplete);
                    }
                    env_parts.push(ContentPart::ToolResult {
                        call_id: call.id.clone(),
                        name: call.name.clone(),
                        text: d.result.render(),
                    });
                    if let Some(m) = d.media {
                        media_parts.push(ContentPart::Media(m));
                    }
                    turn.tool_results.push(ToolOutcome {
                        call_id: call.id.clone(),
                        tool: call.name.clone(),
                        result: d.result,
                    });
                }
                turn.tool_calls = resp.tool_calls;
                if turn.tool_calls.is_empty() {
                    env_parts.push(ContentPart::Text {
                        text: NO_CALL_NUDGE.into(),
                    });
                }
                env_parts.extend(media_parts);
                messages.push(Message {
                    role: Role::Agent,
                    content: agent_parts,
                });
                messages.push(Message {
                    role: Role::Environment,
                    content: env_parts,
                });
                if stop.is_none() && Instant::now() >= deadline {
                    stop = Some(TerminalReason::BudgetExhausted);
                }
            }
        }
        turn.wall = turn_start.elapsed().as_secs_f64();
        debug!(
            "trial {} turn {} done in {:.2}s",
            opts.trial_id, turn.index, turn.wall
        );
        if let Some(log) = log.as_mut() {
            log.append(&turn);
        }
        turns.push(turn);
        if let Some(reason) = stop {
            break reason;
        }
    };
    let agent_wall_seconds = start.elapsed().as_secs_f64();

    let dir = tempfile::Builder::new()
        .prefix("mmtb-snapshot-")
        .tempdir()
        .map_err(|e| TrialError::Snapshot(SandboxError::io("creating snapshot dir")(e)))?;
    sandbox
        .snapshot_workspace(dir.path())
        .map_err(TrialError::Snapshot)?;
    let outputs = sandbox
        .snapshot_outputs(&spec.output_paths)
        .map_err(TrialError::Snapshot)?;

    Ok(TrialOutcome {
        trajectory: Trajectory {
            trial_id: opts.trial_id.clone(),
            agent: agent.clone(),
            task_id: spec.task_id.clone(),
            schema: schema.tools.iter().map(|t| t.name).collect(),
            turns,
            terminal_reason: reason,
            agent_wall_seconds,
        },
        snapshot: WorkspaceSnapshot { dir, outputs },
    })
}
