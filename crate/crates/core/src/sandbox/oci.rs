use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use super::{
    check_integrity, run_capped, ExecResult, Runtime, Sandbox, SandboxError, SandboxHandle,
    ScoringContext, DEFAULT_OUTPUT_CAP,
};
use crate::task_model::{normalize_relative, TaskSpec};

const CONTAINER_WORKSPACE: &str = "/workspace";
const CLI_TIMEOUT: Duration = Duration::from_secs(120);

/// Runtime backed by a docker- or podman-compatible CLI.
///
/// Environment refs are used as image names directly. Each trial gets one
/// long-running container (`sleep infinity`) with the seed copied into
/// `/workspace`; evaluators run in a fresh `--rm` container with the snapshot
/// mounted read-only at `/snapshot` and the evaluator assets at `/verifier`.
#[derive(Debug, Clone)]
pub struct OciRuntime {
    binary: String,
    output_cap: usize,
}

impl OciRuntime {
    pub fn new(binary: impl Into<String>) -> Self {
        OciRuntime {
            binary: binary.into(),
            output_cap: DEFAULT_OUTPUT_CAP,
        }
    }

    pub fn docker() -> Self {
        Self::new("docker")
    }

    /// True when the CLI answers `version`.
    pub fn available(&self) -> bool {
        self.cli(&["version"])
            .map(|r| r.exit_code == 0)
            .unwrap_or(false)
    }

    fn cli(&self, args: &[&str]) -> Result<ExecResult, SandboxError> {
        let mut cmd = Command::new(&self.binary);
        cmd.args(args);
        run_capped(&mut cmd, CLI_TIMEOUT, self.output_cap)
            .map_err(|e| SandboxError::RuntimeUnavailable(format!("{}: {e}", self.binary)))
    }

    fn cli_ok(&self, args: &[&str], what: &str) -> Result<ExecResult, SandboxError> {
        let r = self.cli(args)?;
        if r.exit_code != 0 {
            return Err(SandboxError::RuntimeUnavailable(format!(
                "{what} failed: {}",
                String::from_utf8_lossy(&r.stderr).trim()
            )));
        }
        Ok(r)
    }
}

impl Runtime for OciRuntime {
    fn name(&self) -> &'static str {
        "oci"
    }

    fn resolve_image(&self, environment_ref: &str) -> Result<(), SandboxError> {
        if !self.available() {
            return Err(SandboxError::RuntimeUnavailable(self.binary.clone()));
        }
        let r = self.cli(&["image", "inspect", environment_ref])?;
        if r.exit_code == 0 {
            Ok(())
        } else {
            Err(SandboxError::ImageUnavailable(environment_ref.to_string()))
        }
    }

    fn provision(&self, spec: &TaskSpec, trial_id: &str) -> Result<Box<dyn Sandbox>, SandboxError> {
        check_integrity(spec)?;
        self.resolve_image(&spec.environment_ref)?;
        let name = format!(
            "mmtb-{}",
            trial_id.replace(|c: char| !c.is_ascii_alphanumeric(), "-")
        );
        let mut args = vec!["create", "--name", &name, "-w", CONTAINER_WORKSPACE];
        if !spec.network {
            args.extend(["--network", "none"]);
        }
        args.extend([spec.environment_ref.as_str(), "sleep", "infinity"]);
        self.cli_ok(&args, "container create")?;
        let sandbox = OciSandbox {
            runtime: self.clone(),
            handle: SandboxHandle {
                trial_id: trial_id.to_string(),
                container_ref: name.clone(),
                workspace_root: PathBuf::from(CONTAINER_WORKSPACE),
                started_at: Instant::now(),
                network: spec.network,
            },
            live: true,
        };
        if spec.workspace_seed.is_dir() {
            let src = format!("{}/.", spec.workspace_seed.display());
            let dest = format!("{name}:{CONTAINER_WORKSPACE}");
            self.cli_ok(&["cp", &src, &dest], "staging workspace")?;
        }
        self.cli_ok(&["start", &name], "container start")?;
        Ok(Box::new(sandbox))
    }

    fn run_scoring(
        &self,
        environment_ref: &str,
        context: &ScoringContext,
        command: &[String],
        timeout: Duration,
    ) -> Result<ExecResult, SandboxError> {
        let root = context.root.display().to_string();
        let snap = format!("{}:/snapshot:ro", context.snapshot_dir().display());
        let ver = format!("{}:/verifier:ro", context.verifier_dir().display());
        let scoring = format!("{root}:/scoring");
        let mut args: Vec<&str> = vec![
            "run",
            "--rm",
            "--network",
            "none",
            "-v",
            &scoring,
            "-v",
            &snap,
            "-v",
            &ver,
            "-w",
            "/scoring",
            "-e",
            "SNAPSHOT_DIR=/snapshot",
            "-e",
            "VERIFIER_DIR=/verifier",
            environment_ref,
        ];
        args.extend(command.iter().map(String::as_str));
        let mut cmd = Command::new(&self.binary);
        cmd.args(&args);
        run_capped(&mut cmd, timeout, self.output_cap)
            .map_err(|e| SandboxError::RuntimeUnavailable(format!("{}: {e}", self.binary)))
    }
}

pub struct OciSandbox {
    runtime: OciRuntime,
    handle: SandboxHandle,
    live: bool,
}

impl OciSandbox {
    fn name(&self) -> Result<&str, SandboxError> {
        if self.live {
            Ok(&self.handle.container_ref)
        } else {
            Err(SandboxError::SandboxDead(self.handle.trial_id.clone()))
        }
    }
}

// Resolves inside the container and refuses anything outside /workspace.
const READ_SCRIPT: &str = r#"p=$(realpath -e -- "$1") || exit 2
case "$p" in /workspace/*) ;; *) exit 3 ;; esac
[ -f "$p" ] || exit 2
exec cat -- "$p""#;

impl Sandbox for OciSandbox {
    fn handle(&self) -> &SandboxHandle {
        &self.handle
    }

    fn exec(&mut self, command: &str, timeout: Duration) -> Result<ExecResult, SandboxError> {
        let name = self.name()?.to_string();
        let mut cmd = Command::new(&self.runtime.binary);
        cmd.args([
            "exec",
            "-w",
            CONTAINER_WORKSPACE,
            &name,
            "sh",
            "-c",
            command,
        ]);
        let r = run_capped(&mut cmd, timeout, self.runtime.output_cap)
            .map_err(|e| SandboxError::RuntimeUnavailable(e.to_string()))?;
        if r.timed_out {
            // Killing the local client does not stop the in-container process tree.
            let _ = self.runtime.cli(&["exec", &name, "sh", "-c", "kill -9 -1"]);
        }
        Ok(r)
    }

    fn read_file(&self, path: &str) -> Result<Vec<u8>, SandboxError> {
        let name = self.name()?;
        let rel = normalize_relative(path).ok_or_else(|| SandboxError::PathEscape(path.into()))?;
        let target = Path::new(CONTAINER_WORKSPACE).join(rel);
        let target = target.to_string_lossy();
        let mut cmd = Command::new(&self.runtime.binary);
        cmd.args(["exec", name, "sh", "-c", READ_SCRIPT, "_", &target]);
        let r = run_capped(&mut cmd, CLI_TIMEOUT, usize::MAX)
            .map_err(|e| SandboxError::RuntimeUnavailable(e.to_string()))?;
        match r.exit_code {
            0 => Ok(r.stdout),
            3 => Err(SandboxError::PathEscape(path.into())),
            _ => Err(SandboxError::NotFound(path.into())),
        }
    }

    fn snapshot_workspace(&self, dest: &Path) -> Result<(), SandboxError> {
        let name = self.name()?;
        std::fs::create_dir_all(dest).map_err(SandboxError::io("creating snapshot dir"))?;
        let src = format!("{name}:{CONTAINER_WORKSPACE}/.");
        let dest = dest.display().to_string();
        self.runtime.cli_ok(&["cp", &src, &dest], "snapshot copy")?;
        Ok(())
    }

    fn teardown(&mut self) -> Result<(), SandboxError> {
        if self.live {
            self.live = false;
            self.runtime.cli_ok(
                &["rm", "-f", &self.handle.container_ref],
                "container removal",
            )?;
        }
        Ok(())
    }
}

impl Drop for OciSandbox {
    fn drop(&mut self) {
        let _ = self.teardown();
    }
}
