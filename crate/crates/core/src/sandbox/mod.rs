//! Isolated task workspaces.
//!
//! [`Runtime`] provisions one [`Sandbox`] per trial and runs evaluators in
//! fresh scoring contexts. Two runtimes ship: [`ProcessRuntime`] (a temp
//! directory plus host processes, used by tests and desk-scale runs) and
//! [`OciRuntime`] (a docker/podman-compatible CLI).

mod exec;
mod oci;
mod process;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::task_model::{IntegrityReport, TaskSpec};

pub use exec::run_capped;
pub use oci::OciRuntime;
pub use process::ProcessRuntime;

/// Per-stream capture cap.
pub const DEFAULT_OUTPUT_CAP: usize = 64 * 1024;
/// Exit code recorded when a command is killed at its timeout.
pub const TIMEOUT_EXIT_CODE: i32 = 124;
pub const IMAGE_PREFIX: &str = "mmtb-env/";

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("environment image unavailable: {0}")]
    ImageUnavailable(String),
    #[error("media integrity check failed for task `{task_id}` ({} mismatched entries)", report.mismatches())]
    IntegrityFailure {
        task_id: String,
        report: IntegrityReport,
    },
    #[error("container runtime unavailable: {0}")]
    RuntimeUnavailable(String),
    #[error("sandbox `{0}` is no longer running")]
    SandboxDead(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("path escapes the workspace: {0}")]
    PathEscape(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl SandboxError {
    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(io::Error) -> SandboxError {
        let context = context.into();
        move |source| SandboxError::Io { context, source }
    }
}

#[derive(Debug, Clone)]
pub struct SandboxHandle {
    pub trial_id: String,
    pub container_ref: String,
    /// Workspace path as seen from inside the sandbox.
    pub workspace_root: PathBuf,
    pub started_at: Instant,
    pub network: bool,
}

fn lossy<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&String::from_utf8_lossy(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecResult {
    #[serde(serialize_with = "lossy")]
    pub stdout: Vec<u8>,
    #[serde(serialize_with = "lossy")]
    pub stderr: Vec<u8>,
    pub exit_code: i32,
    /// Seconds.
    pub duration: f64,
    pub truncated: bool,
    pub timed_out: bool,
}

impl ExecResult {
    /// Text shown to the model: both streams plus the exit status.
    pub fn render(&self) -> String {
        let mut s = String::from_utf8_lossy(&self.stdout).into_owned();
        if !self.stderr.is_empty() {
            if !s.is_empty() && !s.ends_with('\n') {
                s.push('\n');
            }
            s.push_str(&String::from_utf8_lossy(&self.stderr));
        }
        if !s.is_empty() && !s.ends_with('\n') {
            s.push('\n');
        }
        if self.timed_out {
            s.push_str("[command timed out and was terminated]\n");
        }
        if self.truncated {
            s.push_str("[output truncated]\n");
        }
        s.push_str(&format!("[exit code {}]", self.exit_code));
        s
    }
}

/// Per-path contents of the declared outputs; `None` means the file is missing.
pub type OutputSnapshot = BTreeMap<String, Option<Vec<u8>>>;

/// Directory layout handed to an evaluator: `snapshot/` holds the final
/// workspace, `verifier/` the task's evaluator assets. The evaluator runs with
/// `root` as its working directory.
#[derive(Debug, Clone)]
pub struct ScoringContext {
    pub root: PathBuf,
}

impl ScoringContext {
    pub fn snapshot_dir(&self) -> PathBuf {
        self.root.join("snapshot")
    }
    pub fn verifier_dir(&self) -> PathBuf {
        self.root.join("verifier")
    }
}

pub trait Sandbox: Send {
    fn handle(&self) -> &SandboxHandle;

    /// Runs `command` through the sandbox shell in the workspace root.
    fn exec(&mut self, command: &str, timeout: Duration) -> Result<ExecResult, SandboxError>;

    fn read_file(&self, path: &str) -> Result<Vec<u8>, SandboxError>;

    /// Reads the declared outputs. Missing files are recorded, not errors.
    fn snapshot_outputs(&self, paths: &[String]) -> Result<OutputSnapshot, SandboxError> {
        let mut out = OutputSnapshot::new();
        for p in paths {
            let entry = match self.read_file(p) {
                Ok(bytes) => Some(bytes),
                Err(SandboxError::NotFound(_) | SandboxError::PathEscape(_)) => None,
                Err(e) => return Err(e),
            };
            out.insert(p.clone(), entry);
        }
        Ok(out)
    }

    /// Copies the whole workspace to `dest` on the host.
    fn snapshot_workspace(&self, dest: &Path) -> Result<(), SandboxError>;

    fn teardown(&mut self) -> Result<(), SandboxError>;
}

pub trait Runtime: Send + Sync {
    fn name(&self) -> &'static str;

    fn resolve_image(&self, environment_ref: &str) -> Result<(), SandboxError>;

    fn provision(&self, spec: &TaskSpec, trial_id: &str) -> Result<Box<dyn Sandbox>, SandboxError>;

    fn run_scoring(
        &self,
        environment_ref: &str,
        context: &ScoringContext,
        command: &[String],
        timeout: Duration,
    ) -> Result<ExecResult, SandboxError>;
}

/// Splits `mmtb-env/<name>:<tag>` into `(name, tag)`.
pub fn parse_image_ref(environment_ref: &str) -> Option<(&str, &str)> {
    let rest = environment_ref.strip_prefix(IMAGE_PREFIX)?;
    let (name, tag) = rest.split_once(':')?;
    let ok = |s: &str| {
        !s.is_empty()
            && s.chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
    };
    (ok(name) && ok(tag)).then_some((name, tag))
}

/// Recursive copy of regular files and directories; symlinks are recreated.
pub fn copy_tree(src: &Path, dest: &Path) -> io::Result<()> {
    fs::create_dir_all(dest)?;
    for entry in fs::read_dir(src)? {
        let entry = entry?;
        let ty = entry.file_type()?;
        let target = dest.join(entry.file_name());
        if ty.is_dir() {
            copy_tree(&entry.path(), &target)?;
        } else if ty.is_symlink() {
            #[cfg(unix)]
            std::os::unix::fs::symlink(fs::read_link(entry.path())?, &target)?;
        } else {
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

pub(crate) fn check_integrity(spec: &TaskSpec) -> Result<(), SandboxError> {
    let report = crate::task_model::verify_media_integrity(spec, &spec.workspace_seed);
    if report.passed() {
        Ok(())
    } else {
        Err(SandboxError::IntegrityFailure {
            task_id: spec.task_id.clone(),
            report,
        })
    }
}
