use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{BackendError, ModelBackend, ModelRequest, ModelResponse, ToolCall, Usage};

pub const SCRIPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedCall {
    pub name: String,
    #[serde(default)]
    pub arguments: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedStep {
    #[serde(default)]
    pub tool_calls: Vec<ScriptedCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant_text: Option<String>,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub latency_seconds: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

/// Versioned JSON document of ordered steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub version: u32,
    pub steps: Vec<ScriptedStep>,
}

impl Script {
    pub fn new(steps: Vec<ScriptedStep>) -> Self {
        Script {
            version: SCRIPT_VERSION,
            steps,
        }
    }

    pub fn load(path: &Path) -> Result<Script, BackendError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidScript(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            BackendError::InvalidScript(m) => {
                BackendError::InvalidScript(format!("{}: {m}", path.display()))
            }
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Script, BackendError> {
        let script: Script =
            serde_json::from_str(text).map_err(|e| BackendError::InvalidScript(e.to_string()))?;
        script.check()?;
        Ok(script)
    }

    fn check(&self) -> Result<(), BackendError> {
        if self.version != SCRIPT_VERSION {
            return Err(BackendError::InvalidScript(format!(
                "unsupported script version {}",
                self.version
            )));
        }
        if self.steps.is_empty() {
            return Err(BackendError::InvalidScript("script has no steps".into()));
        }
        if self
            .steps
            .iter()
            .any(|s| !s.latency_seconds.is_finite() || s.latency_seconds < 0.0)
        {
            return Err(BackendError::InvalidScript("latency must be >= 0".into()));
        }
        Ok(())
    }

    /// One `execute_commands` step per command, then `task_complete`.
    pub fn from_commands<S: AsRef<str>>(commands: &[S]) -> Script {
        let mut steps: Vec<ScriptedStep> = commands
            .iter()
            .map(|c| ScriptedStep {
                tool_calls: vec![ScriptedCall {
                    name: "execute_commands".into(),
                    arguments: serde_json::json!({ "command": c.as_ref() }),
                }],
                ..Default::default()
            })
            .collect();
        steps.push(ScriptedStep {
            tool_calls: vec![ScriptedCall {
                name: "task_complete".into(),
                arguments: serde_json::json!({}),
            }],
            ..Default::default()
        });
        Script::new(steps)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }
}

/// Replays a fixed script. Holds a cursor, so use one instance per trial.
#[derive(Debug)]
pub struct ScriptedBackend {
    model_id: String,
    steps: Vec<ScriptedStep>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(model_id: impl Into<String>, script: Script) -> Result<Self, BackendError> {
        script.check()?;
        Ok(ScriptedBackend {
            model_id: model_id.into(),
            steps: script.steps,
            cursor: Mutex::new(0),
        })
    }

    pub fn remaining(&self) -> usize {
        self.steps.len() - *self.cursor.lock().unwrap()
    }
}

impl ModelBackend for ScriptedBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(
        &self,
        request: &ModelRequest,
        deadline: Option<Instant>,
    ) -> Result<ModelResponse, BackendError> {
        request.validate()?;
        let idx = {
            let mut cursor = self.cursor.lock().unwrap();
            let idx = *cursor;
            if idx < self.steps.len() {
                *cursor += 1;
            }
            idx
        };
        let Some(step) = self.steps.get(idx) else {
            return Ok(ModelResponse {
                tool_calls: vec![],
                assistant_text: None,
                usage: Usage::default(),
                retries: 0,
                end_of_script: true,
            });
        };
        if step.latency_seconds > 0.0 {
            let wanted = Duration::from_secs_f64(step.latency_seconds);
            let until = Instant::now() + wanted;
            match deadline {
                Some(d) if d < until => {
                    thread::sleep(d.saturating_duration_since(Instant::now()));
                    return Err(BackendError::DeadlineExceeded);
                }
                _ => thread::sleep(wanted),
            }
        }
        let turn = idx + 1;
        Ok(ModelResponse {
            tool_calls: step
                .tool_calls
                .iter()
                .enumerate()
                .map(|(i, c)| ToolCall {
                    id: format!("call_{turn}_{i}"),
                    name: c.name.clone(),
                    arguments: c.arguments.clone(),
                })
                .collect(),
            assistant_text: step.assistant_text.clone(),
            usage: step.usage,
            retries: 0,
            end_of_script: false,
        })
    }
}
