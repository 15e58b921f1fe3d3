//! Task certification: structure, build, media, oracle, null agent.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use crate::agent_loop::{run_trial, AgentConfig, TrialOptions};
use crate::digest::{sha256_file, sha256_hex};
use crate::model_backend::{Script, ScriptedBackend, ScriptedCall, ScriptedStep};
use crate::routing::HarnessVariant;
use crate::sandbox::Runtime;
use crate::task_model::{
    load_task, normalize_relative, verify_media_integrity, MediaManifestEntry, TaskSpec,
};
use crate::verifier::{score, Score};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    Structure,
    Build,
    Media,
    Oracle,
    NullAgent,
}

impl CheckName {
    pub const ORDER: [CheckName; 5] = [
        CheckName::Structure,
        CheckName::Build,
        CheckName::Media,
        CheckName::Oracle,
        CheckName::NullAgent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckName::Structure => "structure",
            CheckName::Build => "build",
            CheckName::Media => "media",
            CheckName::Oracle => "oracle",
            CheckName::NullAgent => "null_agent",
        }
    }
}

impl fmt::Display for CheckName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: CheckName,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificationReport {
    pub task_id: String,
    pub checks: Vec<CheckResult>,
    pub certified: bool,
    /// Scores from baseline agents, recorded for manual review only.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub baseline_scores: BTreeMap<String, f64>,
}

impl CertificationReport {
    pub fn check(&self, name: CheckName) -> &CheckResult {
        self.checks
            .iter()
            .find(|c| c.name == name)
            .expect("every check is reported")
    }

    pub fn record_baseline(&mut self, agent: impl Into<String>, partial: f64) {
        self.baseline_scores.insert(agent.into(), partial);
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: {}\n",
            self.task_id,
            if self.certified {
                "certified"
            } else {
                "NOT certified"
            }
        );
        for c in &self.checks {
            let status = match c.status {
                CheckStatus::Pass => "pass",
                CheckStatus::Fail => "FAIL",
                CheckStatus::Skipped => "skip",
            };
            s.push_str(&format!(
                "  {:<10} {status:<4} {}\n",
                c.name.as_str(),
                c.detail
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct CertifyOptions {
    /// Digest-addressed download cache. Defaults to a directory under the system temp dir.
    pub media_cache: Option<PathBuf>,
    /// Overrides the task's own budget for the two agent checks.
    pub budget: Option<Duration>,
}

/// One step: call `task_complete` immediately.
pub fn null_agent_script() -> Script {
    Script::new(vec![ScriptedStep {
        tool_calls: vec![ScriptedCall {
            name: "task_complete".into(),
            arguments: serde_json::json!({}),
        }],
        ..Default::default()
    }])
}

/// Runs a scripted agent through the normal trial path and scores the result.
pub fn scripted_trial_score(
    spec: &TaskSpec,
    script: Script,
    label: &str,
    runtime: &dyn Runtime,
    budget: Duration,
) -> Result<Score, String> {
    let backend = ScriptedBackend::new(label, script).map_err(|e| e.to_string())?;
    let agent = AgentConfig::new(HarnessVariant::T2, label);
    let opts = TrialOptions::new(format!("certify-{}-{label}", spec.task_id), budget);
    let outcome = run_trial(spec, &agent, &backend, runtime, &opts).map_err(|e| e.to_string())?;
    score(outcome.snapshot.path(), spec, runtime).map_err(|e| e.to_string())
}

fn fetch_bytes(url: &str) -> Result<Vec<u8>, String> {
    if let Some(path) = url.strip_prefix("file://") {
        return fs::read(path).map_err(|e| format!("{url}: {e}"));
    }
    if url.starts_with("http://") || url.starts_with("https://") {
        let resp = ureq::get(url).call().map_err(|e| format!("{url}: {e}"))?;
        let mut buf = Vec::new();
        resp.into_body()
            .into_reader()
            .read_to_end(&mut buf)
            .map_err(|e| format!("{url}: {e}"))?;
        return Ok(buf);
    }
    Err(format!("unsupported media url scheme: {url}"))
}

/// Fetches `entry` into `dest` through the digest cache, refusing content
/// whose hash differs from the manifest.
fn fetch_media(
    entry: &MediaManifestEntry,
    url: &str,
    cache: &Path,
    dest: &Path,
) -> Result<(), String> {
    let cached = cache.join(&entry.content_hash);
    let bytes = match fs::read(&cached) {
        Ok(b) if sha256_hex(&b) == entry.content_hash => b,
        _ => {
            let b = fetch_bytes(url)?;
            let got = sha256_hex(&b);
            if got != entry.content_hash {
                return Err(format!(
                    "{}: fetched content hash {got} does not match {}",
                    entry.relative_path, entry.content_hash
                ));
            }
            fs::create_dir_all(cache).map_err(|e| e.to_string())?;
            fs::write(&cached, &b).map_err(|e| e.to_string())?;
            b
        }
    };
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent).map_err(|e| e.to_string())?;
    }
    fs::write(dest, bytes).map_err(|e| e.to_string())
}

fn media_check(spec: &TaskSpec, opts: &CertifyOptions) -> Result<String, String> {
    let cache = opts
        .media_cache
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join("mmtb-media-cache"));
    let mut fetched = 0;
    for entry in &spec.media_manifest {
        let Some(url) = &entry.url else { continue };
        let rel = normalize_relative(&entry.relative_path)
            .ok_or_else(|| format!("{}: path escapes the workspace", entry.relative_path))?;
        let dest = spec.workspace_seed.join(rel);
        let present = sha256_file(&dest)
            .map(|h| h == entry.content_hash)
            .unwrap_or(false);
        if !present {
            fetch_media(entry, url, &cache, &dest)?;
            fetched += 1;
        }
    }
    let report = verify_media_integrity(spec, &spec.workspace_seed);
    if !report.passed() {
        let bad: Vec<String> = report
            .entries
            .iter()
            .filter(|e| !e.passed())
            .map(|e| format!("{}: {:?}", e.relative_path, e.failures))
            .collect();
        return Err(bad.join("; "));
    }
    Ok(format!(
        "{} file(s) verified, {fetched} fetched",
        spec.media_manifest.len()
    ))
}

fn describe(score: &Score) -> String {
    let mut s = format!("score {} (threshold {})", score.partial, score.threshold);
    if let Some(r) = score.reason() {
        s.push_str(&format!("; {r}"));
    }
    s
}

type CheckFn<'a> = Box<dyn Fn() -> Result<String, String> + 'a>;

/// Runs the check chain; the first failure marks later checks skipped.
pub fn certify(
    task_dir: &Path,
    runtime: &dyn Runtime,
    opts: &CertifyOptions,
) -> CertificationReport {
    let mut checks = Vec::new();
    let mut failed = false;
    let mut record = |name: CheckName, outcome: Result<String, String>| {
        let (status, detail) = match outcome {
            Ok(d) => (CheckStatus::Pass, d),
            Err(d) => (CheckStatus::Fail, d),
        };
        checks.push(CheckResult {
            name,
            status,
            detail,
        });
        status == CheckStatus::Pass
    };

    let spec = load_task(task_dir);
    let task_id = match &spec {
        Ok(s) => s.task_id.clone(),
        Err(_) => task_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let structure = spec.as_ref().map_err(|e| e.to_string()).and_then(|s| {
        if s.workspace_seed.is_dir() {
            Ok(format!("{} output(s) declared", s.output_paths.len()))
        } else {
            Err("workspace/ directory missing".into())
        }
    });
    if !record(CheckName::Structure, structure) {
        failed = true;
    }

    if let (false, Ok(spec)) = (failed, &spec) {
        let budget = opts
            .budget
            .unwrap_or(Duration::from_secs(spec.budget_seconds));
        let steps: [(CheckName, CheckFn); 4] = [
            (
                CheckName::Build,
                Box::new(|| {
                    runtime
                        .resolve_image(&spec.environment_ref)
                        .map(|_| format!("{} resolved by {}", spec.environment_ref, runtime.name()))
                        .map_err(|e| e.to_string())
                }),
            ),
            (CheckName::Media, Box::new(|| media_check(spec, opts))),
            (
                CheckName::Oracle,
                Box::new(|| {
                    let oracle = spec.oracle.as_ref().ok_or("no oracle solution declared")?;
                    let s = scripted_trial_score(
                        spec,
                        Script::from_commands(&oracle.commands),
                        "oracle",
                        runtime,
                        budget,
                    )?;
                    if s.pass {
                        Ok(describe(&s))
                    } else {
                        Err(describe(&s))
                    }
                }),
            ),
            (
                CheckName::NullAgent,
                Box::new(|| {
                    let s =
                        scripted_trial_score(spec, null_agent_script(), "null", runtime, budget)?;
                    if s.pass {
                        Err(format!("untouched workspace passes: {}", describe(&s)))
                    } else {
                        Ok(describe(&s))
                    }
                }),
            ),
        ];
        for (name, run) in steps {
            if failed {
                break;
            }
            if !record(name, run()) {
                failed = true;
            }
        }
    }
    let done: Vec<CheckName> = checks.iter().map(|c| c.name).collect();
    for name in CheckName::ORDER {
        if !done.contains(&name) {
            checks.push(CheckResult {
                name,
                status: CheckStatus::Skipped,
                detail: "skipped after an earlier failure".into(),
            });
        }
    }
    let certified = checks.iter().all(|c| c.status == CheckStatus::Pass);
    CertificationReport {
        task_id,
        checks,
        certified,
        baseline_scores: BTreeMap::new(),
    }
}
