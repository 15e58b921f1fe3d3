use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use log::warn;
use tempfile::TempDir;

use super::{
    check_integrity, copy_tree, parse_image_ref, run_capped, ExecResult, Runtime, Sandbox,
    SandboxError, SandboxHandle, ScoringContext, DEFAULT_OUTPUT_CAP,
};
use crate::task_model::{normalize_relative, TaskSpec};

/// Fallback runtime: each sandbox is a private temp directory and commands
/// are host processes confined to it by working directory and environment.
///
/// Images resolve to `<images_root>/<name>/<tag>/`; an image's `bin/`
/// directory is prepended to `PATH` (that is where fixture images keep their
/// `ffprobe`/`ffmpeg` stubs). Network policy is recorded but not enforced.
#[derive(Debug, Clone)]
pub struct ProcessRuntime {
    images_root: PathBuf,
    scratch_root: Option<PathBuf>,
    output_cap: usize,
}

impl ProcessRuntime {
    pub fn new(images_root: impl Into<PathBuf>) -> Self {
        let images_root = images_root.into();
        ProcessRuntime {
            // Commands run with the workspace as cwd, so PATH entries must be absolute.
            images_root: std::path::absolute(&images_root).unwrap_or(images_root),
            scratch_root: None,
            output_cap: DEFAULT_OUTPUT_CAP,
        }
    }

    /// Directory under which per-trial temp directories are created.
    pub fn with_scratch_root(mut self, dir: impl Into<PathBuf>) -> Self {
        self.scratch_root = Some(dir.into());
        self
    }

    pub fn with_output_cap(mut self, cap: usize) -> Self {
        self.output_cap = cap;
        self
    }

    fn image_dir(&self, environment_ref: &str) -> Result<PathBuf, SandboxError> {
        let (name, tag) = parse_image_ref(environment_ref)
            .ok_or_else(|| SandboxError::ImageUnavailable(environment_ref.to_string()))?;
        let dir = self.images_root.join(name).join(tag);
        if dir.is_dir() {
            Ok(dir)
        } else {
            Err(SandboxError::ImageUnavailable(environment_ref.to_string()))
        }
    }

    fn search_path(image: &Path) -> OsString {
        let mut parts = vec![image.join("bin")];
        parts.extend(std::env::split_paths(
            &std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()),
        ));
        std::env::join_paths(parts).unwrap_or_else(|_| "/usr/bin:/bin".into())
    }

    fn tempdir(&self, prefix: &str) -> Result<TempDir, SandboxError> {
        let mut b = tempfile::Builder::new();
        b.prefix(prefix);
        match &self.scratch_root {
            Some(root) => {
                fs::create_dir_all(root).map_err(SandboxError::io("creating scratch root"))?;
                b.tempdir_in(root)
            }
            None => b.tempdir(),
        }
        .map_err(SandboxError::io("creating sandbox directory"))
    }
}

impl Runtime for ProcessRuntime {
    fn name(&self) -> &'static str {
        "process"
    }

    fn resolve_image(&self, environment_ref: &str) -> Result<(), SandboxError> {
        self.image_dir(environment_ref).map(|_| ())
    }

    fn provision(&self, spec: &TaskSpec, trial_id: &str) -> Result<Box<dyn Sandbox>, SandboxError> {
        check_integrity(spec)?;
        let image = self.image_dir(&spec.environment_ref)?;
        let root = self.tempdir("mmtb-trial-")?;
        let workspace = root.path().join("workspace");
        if spec.workspace_seed.is_dir() {
            copy_tree(&spec.workspace_seed, &workspace)
                .map_err(SandboxError::io("staging workspace seed"))?;
        } else {
            fs::create_dir_all(&workspace).map_err(SandboxError::io("creating workspace"))?;
        }
        for d in ["home", "tmp"] {
            fs::create_dir_all(root.path().join(d))
                .map_err(SandboxError::io("creating sandbox dirs"))?;
        }
        if !spec.network {
            warn!(
                "trial {trial_id}: network disabled for task {} but the process runtime cannot enforce it",
                spec.task_id
            );
        }
        let canonical_ws = workspace
            .canonicalize()
            .map_err(SandboxError::io("resolving workspace"))?;
        Ok(Box::new(ProcessSandbox {
            handle: SandboxHandle {
                trial_id: trial_id.to_string(),
                container_ref: root.path().display().to_string(),
                workspace_root: canonical_ws.clone(),
                started_at: Instant::now(),
                network: spec.network,
            },
            path_var: Self::search_path(&image),
            workspace: canonical_ws,
            root: Some(root),
            output_cap: self.output_cap,
        }))
    }

    fn run_scoring(
        &self,
        environment_ref: &str,
        context: &ScoringContext,
        command: &[String],
        timeout: Duration,
    ) -> Result<ExecResult, SandboxError> {
        let image = self.image_dir(environment_ref)?;
        let (program, args) = command
            .split_first()
            .ok_or_else(|| SandboxError::NotFound("empty evaluator command".into()))?;
        let home = context.root.join(".home");
        fs::create_dir_all(&home).map_err(SandboxError::io("creating scoring home"))?;
        let mut cmd = Command::new(program);
        cmd.args(args)
            .current_dir(&context.root)
            .env_clear()
            .env("PATH", Self::search_path(&image))
            .env("HOME", &home)
            .env("LANG", "C.UTF-8")
            .env("SNAPSHOT_DIR", context.snapshot_dir())
            .env("VERIFIER_DIR", context.verifier_dir());
        match run_capped(&mut cmd, timeout, self.output_cap) {
            Ok(r) => Ok(r),
            // A missing evaluator binary is an evaluator crash, not a runtime fault.
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ExecResult {
                stdout: vec![],
                stderr: format!("cannot spawn `{program}`: {e}").into_bytes(),
                exit_code: 127,
                duration: 0.0,
                truncated: false,
                timed_out: false,
            }),
            Err(e) => Err(SandboxError::io("running evaluator")(e)),
        }
    }
}

pub struct ProcessSandbox {
    handle: SandboxHandle,
    path_var: OsString,
    workspace: PathBuf,
    root: Option<TempDir>,
    output_cap: usize,
}

impl ProcessSandbox {
    fn live_root(&self) -> Result<&Path, SandboxError> {
        self.root
            .as_ref()
            .map(|r| r.path())
            .ok_or_else(|| SandboxError::SandboxDead(self.handle.trial_id.clone()))
    }

    fn resolve(&self, path: &str) -> Result<PathBuf, SandboxError> {
        self.live_root()?;
        let rel = normalize_relative(path).ok_or_else(|| SandboxError::PathEscape(path.into()))?;
        let joined = self.workspace.join(rel);
        let real = match joined.canonicalize() {
            Ok(p) => p,
            Err(_) => return Err(SandboxError::NotFound(path.into())),
        };
        if !real.starts_with(&self.workspace) {
            return Err(SandboxError::PathEscape(path.into()));
        }
        Ok(real)
    }
}

impl Sandbox for ProcessSandbox {
    fn handle(&self) -> &SandboxHandle {
        &self.handle
    }

    fn exec(&mut self, command: &str, timeout: Duration) -> Result<ExecResult, SandboxError> {
        let root = self.live_root()?.to_path_buf();
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(command)
            .current_dir(&self.workspace)
            .env_clear()
            .env("PATH", &self.path_var)
            .env("HOME", root.join("home"))
            .env("TMPDIR", root.join("tmp"))
            .env("LANG", "C.UTF-8")
            .env("WORKSPACE", &self.workspace);
        run_capped(&mut cmd, timeout, self.output_cap).map_err(SandboxError::io("spawning shell"))
    }

    fn read_file(&self, path: &str) -> Result<Vec<u8>, SandboxError> {
        let real = self.resolve(path)?;
        if !real.is_file() {
            return Err(SandboxError::NotFound(path.into()));
        }
        fs::read(&real).map_err(SandboxError::io(format!("reading {path}")))
    }

    fn snapshot_workspace(&self, dest: &Path) -> Result<(), SandboxError> {
        self.live_root()?;
        copy_tree(&self.workspace, dest).map_err(SandboxError::io("snapshotting workspace"))
    }

    fn teardown(&mut self) -> Result<(), SandboxError> {
        if let Some(root) = self.root.take() {
            root.close().map_err(SandboxError::io("removing sandbox"))?;
        }
        Ok(())
    }
}

impl Drop for ProcessSandbox {
    fn drop(&mut self) {
        let _ = self.teardown();
    }
}
