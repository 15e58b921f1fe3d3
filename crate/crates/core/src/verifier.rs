//! Runs a task's evaluator over a final workspace snapshot.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::sandbox::{copy_tree, ExecResult, Runtime, SandboxError, ScoringContext};
use crate::task_model::{normalize_relative, ScoreSource, TaskSpec};

/// Bytes of evaluator output kept in [`Score::evaluator_log`].
pub const EVALUATOR_LOG_CAP: usize = 8 * 1024;

/// Why an evaluator run produced no usable score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreFailure {
    Crashed { exit_code: i32 },
    TimedOut { seconds: u64 },
    Malformed { detail: String },
    OutOfRange { value: f64 },
    ScoreFileMissing { path: String },
    ContextSetup { detail: String },
}

impl fmt::Display for ScoreFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreFailure::Crashed { exit_code } => {
                write!(f, "evaluator crashed (exit {exit_code})")
            }
            ScoreFailure::TimedOut { seconds } => write!(f, "evaluator timed out after {seconds}s"),
            ScoreFailure::Malformed { detail } => write!(f, "malformed score document: {detail}"),
            ScoreFailure::OutOfRange { value } => write!(f, "score out of range: {value}"),
            ScoreFailure::ScoreFileMissing { path } => write!(f, "score file missing: {path}"),
            ScoreFailure::ContextSetup { detail } => {
                write!(f, "scoring context setup failed: {detail}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub partial: f64,
    pub pass: bool,
    pub threshold: f64,
    pub evaluator_exit: i32,
    pub evaluator_log: String,
    pub failure: Option<ScoreFailure>,
}

impl Score {
    pub fn new(partial: f64, threshold: f64) -> Score {
        Score {
            partial,
            pass: partial >= threshold,
            threshold,
            evaluator_exit: 0,
            evaluator_log: String::new(),
            failure: None,
        }
    }

    fn failed(threshold: f64, exit: i32, log: String, failure: ScoreFailure) -> Score {
        Score {
            partial: 0.0,
            pass: 0.0 >= threshold,
            threshold,
            evaluator_exit: exit,
            evaluator_log: log,
            failure: Some(failure),
        }
    }

    pub fn reason(&self) -> Option<String> {
        self.failure.as_ref().map(ToString::to_string)
    }
}

fn cap_log(r: &ExecResult) -> String {
    let mut s = String::from_utf8_lossy(&r.stdout).into_owned();
    if !r.stderr.is_empty() {
        s.push_str(&String::from_utf8_lossy(&r.stderr));
    }
    if s.len() > EVALUATOR_LOG_CAP {
        let mut cut = EVALUATOR_LOG_CAP;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
        s.push_str("\n[log truncated]");
    }
    s
}

/// Parses a `{"score": x}` document. Accepts surrounding log lines on stdout
/// by taking the last line that parses as such a document.
pub fn parse_score_document(text: &str) -> Result<f64, ScoreFailure> {
    let from_doc = |t: &str| -> Option<Result<f64, ScoreFailure>> {
        let v: serde_json::Value = serde_json::from_str(t.trim()).ok()?;
        let obj = v.as_object()?;
        let raw = obj.get("score")?;
        Some(match raw.as_f64() {
            Some(x) if !(0.0..=1.0).contains(&x) => Err(ScoreFailure::OutOfRange { value: x }),
            Some(x) => Ok(x),
            None => Err(ScoreFailure::Malformed {
                detail: format!("score is not a number: {raw}"),
            }),
        })
    };
    if let Some(r) = from_doc(text) {
        return r;
    }
    text.lines()
        .rev()
        .filter(|l| !l.trim().is_empty())
        .find_map(from_doc)
        .unwrap_or_else(|| {
            let head: String = text.trim().chars().take(120).collect();
            Err(ScoreFailure::Malformed {
                detail: if head.is_empty() {
                    "empty output".into()
                } else {
                    head
                },
            })
        })
}

fn build_context(
    snapshot: &Path,
    spec: &TaskSpec,
) -> std::io::Result<(tempfile::TempDir, ScoringContext)> {
    let dir = tempfile::Builder::new().prefix("mmtb-score-").tempdir()?;
    let ctx = ScoringContext {
        root: dir.path().to_path_buf(),
    };
    copy_tree(snapshot, &ctx.snapshot_dir())?;
    let verifier = spec.verifier_dir();
    if verifier.is_dir() {
        copy_tree(&verifier, &ctx.verifier_dir())?;
    } else {
        fs::create_dir_all(ctx.verifier_dir())?;
    }
    Ok((dir, ctx))
}

/// Scores a materialized snapshot. Every failure maps to partial 0 with a
/// recorded reason; the only error is a runtime that cannot run at all.
pub fn score(
    snapshot: &Path,
    spec: &TaskSpec,
    runtime: &dyn Runtime,
) -> Result<Score, SandboxError> {
    let tau = spec.threshold;
    let (_guard, ctx) = match build_context(snapshot, spec) {
        Ok(c) => c,
        Err(e) => {
            let f = ScoreFailure::ContextSetup {
                detail: e.to_string(),
            };
            warn!("task {}: {f}", spec.task_id);
            return Ok(Score::failed(tau, -1, String::new(), f));
        }
    };
    let ev = &spec.evaluator;
    let r = runtime.run_scoring(
        &spec.environment_ref,
        &ctx,
        &ev.command,
        Duration::from_secs(ev.timeout_seconds),
    )?;
    let log = cap_log(&r);
    let fail = |f: ScoreFailure| {
        warn!("task {}: {f}", spec.task_id);
        Ok(Score::failed(tau, r.exit_code, log.clone(), f))
    };
    if r.timed_out {
        return fail(ScoreFailure::TimedOut {
            seconds: ev.timeout_seconds,
        });
    }
    if r.exit_code != 0 {
        return fail(ScoreFailure::Crashed {
            exit_code: r.exit_code,
        });
    }
    let doc = match &ev.score_source {
        ScoreSource::StdoutJson => String::from_utf8_lossy(&r.stdout).into_owned(),
        ScoreSource::ScoreFile(rel) => {
            let Some(p) = normalize_relative(rel) else {
                return fail(ScoreFailure::ScoreFileMissing { path: rel.clone() });
            };
            match fs::read(ctx.root.join(p)) {
                Ok(b) => String::from_utf8_lossy(&b).into_owned(),
                Err(_) => return fail(ScoreFailure::ScoreFileMissing { path: rel.clone() }),
            }
        }
    };
    match parse_score_document(&doc) {
        Ok(x) => Ok(Score {
            evaluator_exit: r.exit_code,
            evaluator_log: log,
            ..Score::new(x, tau)
        }),
        Err(f) => fail(f),
    }
}
