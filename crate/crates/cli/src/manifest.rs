use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmtb_core::sandbox::{OciRuntime, ProcessRuntime, Runtime};
use mmtb_core::AgentConfig;
use serde::Deserialize;

pub const DEFAULT_BASE_URL: &str = "https://openrouter.ai/api/v1";
pub const API_KEY_VAR: &str = "MMTB_API_KEY";

/// Run configuration as written on disk. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    run_id: String,
    suite: PathBuf,
    output: PathBuf,
    rates: PathBuf,
    #[serde(default)]
    budget_seconds: Option<u64>,
    #[serde(default = "one")]
    parallelism: usize,
    #[serde(default = "default_backend")]
    backend: String,
    #[serde(default = "default_runtime")]
    runtime: String,
    #[serde(default)]
    images: Option<PathBuf>,
    agents: Vec<AgentConfig>,
}

fn one() -> usize {
    1
}
fn default_backend() -> String {
    "http".into()
}
fn default_runtime() -> String {
    "process".into()
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub run_id: String,
    pub suite: PathBuf,
    pub output: PathBuf,
    pub rates: PathBuf,
    pub budget_seconds: Option<u64>,
    pub parallelism: usize,
    pub backend: BackendChoice,
    pub runtime: RuntimeChoice,
    pub agents: Vec<AgentConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendChoice {
    /// `<dir>/<agent-label>/<task>.json`, falling back to `<dir>/<task>.json`.
    ScriptDir(PathBuf),
    Oracle,
    Null,
    Http {
        base_url: String,
    },
}

impl BackendChoice {
    pub fn parse(s: &str, base: &Path) -> Result<BackendChoice> {
        Ok(match s {
            "scripted:oracle" => BackendChoice::Oracle,
            "scripted:null" => BackendChoice::Null,
            "http" => BackendChoice::Http {
                base_url: DEFAULT_BASE_URL.into(),
            },
            _ => {
                if let Some(dir) = s.strip_prefix("scripted:") {
                    BackendChoice::ScriptDir(base.join(dir))
                } else if let Some(url) = s.strip_prefix("http:") {
                    BackendChoice::Http {
                        base_url: url.to_string(),
                    }
                } else {
                    bail!("unknown backend `{s}` (expected scripted:<dir>, scripted:oracle, scripted:null, http or http:<url>)")
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuntimeChoice {
    Process { images: PathBuf },
    Oci { binary: String },
}

impl RuntimeChoice {
    pub fn parse(s: &str, images: Option<PathBuf>) -> Result<RuntimeChoice> {
        Ok(match s {
            "process" => RuntimeChoice::Process {
                images: images
                    .context("the process runtime needs an images directory (--images)")?,
            },
            "oci" | "docker" => RuntimeChoice::Oci {
                binary: "docker".into(),
            },
            "podman" => RuntimeChoice::Oci {
                binary: "podman".into(),
            },
            _ => bail!("unknown runtime `{s}` (expected process, docker or podman)"),
        })
    }

    pub fn build(&self) -> Box<dyn Runtime> {
        match self {
            RuntimeChoice::Process { images } => Box::new(ProcessRuntime::new(images)),
            RuntimeChoice::Oci { binary } => Box::new(OciRuntime::new(binary.clone())),
        }
    }
}

/// Command-line values that take precedence over the manifest.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub parallelism: Option<usize>,
    pub budget_seconds: Option<u64>,
    pub rates: Option<PathBuf>,
    pub backend: Option<String>,
    pub runtime: Option<String>,
    pub images: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl RunManifest {
    pub fn load(path: &Path, o: &Overrides) -> Result<RunManifest> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let raw: RawManifest =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rel = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        if raw.run_id.is_empty() || raw.run_id.contains(['/', '\\']) {
            bail!("run_id must be a non-empty name without path separators");
        }
        let parallelism = o.parallelism.unwrap_or(raw.parallelism);
        if parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if raw.agents.is_empty() {
            bail!("manifest lists no agents");
        }
        let images = o.images.clone().or(raw.images.map(rel));
        let backend = match &o.backend {
            Some(b) => BackendChoice::parse(b, Path::new("."))?,
            None => BackendChoice::parse(&raw.backend, base)?,
        };
        Ok(RunManifest {
            run_id: raw.run_id,
            suite: rel(raw.suite),
            output: o.output.clone().unwrap_or_else(|| rel(raw.output)),
            rates: o.rates.clone().unwrap_or_else(|| rel(raw.rates)),
            budget_seconds: o.budget_seconds.or(raw.budget_seconds),
            parallelism,
            backend,
            runtime: RuntimeChoice::parse(o.runtime.as_deref().unwrap_or(&raw.runtime), images)?,
            agents: raw.agents,
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.join(&self.run_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_relative_paths_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            r#"
run_id = "r1"
suite = "suite"
output = "runs"
rates = "rates.toml"
images = "images"
backend = "scripted:scripts"
parallelism = 2

[[agents]]
harness = "MM"
model = "scripted"
"#,
        )
        .unwrap();
        let m = RunManifest::load(&path, &Overrides::default()).unwrap();
        assert_eq!(m.suite, dir.path().join("suite"));
        assert_eq!(
            m.backend,
            BackendChoice::ScriptDir(dir.path().join("scripts"))
        );
        assert_eq!(m.parallelism, 2);
        assert_eq!(m.run_dir(), dir.path().join("runs/r1"));

        let o = Overrides {
            parallelism: Some(0),
            ..Default::default()
        };
        assert!(RunManifest::load(&path, &o).is_err());
    }

    #[test]
    fn backend_strings() {
        let b = Path::new("/x");
        assert_eq!(
            BackendChoice::parse("scripted:null", b).unwrap(),
            BackendChoice::Null
        );
        assert_eq!(
            BackendChoice::parse("http:http://localhost:9", b).unwrap(),
            BackendChoice::Http {
                base_url: "http://localhost:9".into()
            }
        );
        assert!(BackendChoice::parse("gpt", b).is_err());
    }
}
