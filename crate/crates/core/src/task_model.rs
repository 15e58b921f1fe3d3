//! Task units: descriptor parsing, media manifests and integrity checks.
//!
//! A task directory looks like this:
//!
//! ```text
//! <task>/
//!   task.toml        descriptor (id, threshold, outputs, [evaluator], [oracle], ...)
//!   instruction.md   task instruction (may instead be inlined as `instruction`)
//!   workspace/       seed copied into the sandbox
//!   verifier/        evaluator assets, mounted into the scoring context
//!   oracle/          optional oracle assets
//!   media.toml       [[media]] provenance entries
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_file;
use crate::routing::Modality;

pub const DESCRIPTOR_FILE: &str = "task.toml";
pub const INSTRUCTION_FILE: &str = "instruction.md";
pub const MEDIA_FILE: &str = "media.toml";
pub const WORKSPACE_DIR: &str = "workspace";
pub const VERIFIER_DIR: &str = "verifier";
pub const ORACLE_DIR: &str = "oracle";

pub const DEFAULT_THRESHOLD: f64 = 1.0;
pub const DEFAULT_BUDGET_SECONDS: u64 = 600;
pub const DEFAULT_EVALUATOR_TIMEOUT_SECONDS: u64 = 300;
pub const DEFAULT_ENVIRONMENT: &str = "mmtb-env/base:latest";

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{path}: missing field `{field}`")]
    MissingField { path: PathBuf, field: String },
    #[error("{path}: malformed descriptor: {reason}")]
    MalformedDescriptor { path: PathBuf, reason: String },
    #[error("{path}: duplicate output path `{output}`")]
    DuplicateOutputPath { path: PathBuf, output: String },
    #[error("{path}: threshold {value} outside [0, 1]")]
    ThresholdOutOfRange { path: PathBuf, value: f64 },
    #[error("duplicate task id `{task_id}` in {first} and {second}")]
    DuplicateTaskId {
        task_id: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TaskError + '_ {
    move |source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where the evaluator reports its `{"score": x}` document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Path relative to the scoring context's working directory.
    ScoreFile(String),
    StdoutJson,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluatorSpec {
    pub command: Vec<String>,
    pub score_source: ScoreSource,
    pub timeout_seconds: u64,
}

/// Reference solution: shell commands replayed in order through the scripted backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleSpec {
    pub commands: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaManifestEntry {
    pub relative_path: String,
    pub source_description: String,
    pub license: String,
    pub content_hash: String,
    pub byte_size: u64,
    /// Remote location for the validation pipeline's fetch step.
    pub url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Categories {
    pub meta: String,
    pub fine: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    pub dir: PathBuf,
    pub instruction: String,
    pub workspace_seed: PathBuf,
    pub environment_ref: String,
    pub network: bool,
    pub output_paths: Vec<String>,
    pub evaluator: EvaluatorSpec,
    pub oracle: Option<OracleSpec>,
    pub threshold: f64,
    pub budget_seconds: u64,
    pub categories: Categories,
    pub capability_tags: BTreeSet<String>,
    /// Modalities a solver must perceive. Not used for routing, only for analysis.
    pub required_modalities: BTreeSet<Modality>,
    pub media_manifest: Vec<MediaManifestEntry>,
}

impl TaskSpec {
    pub fn verifier_dir(&self) -> PathBuf {
        self.dir.join(VERIFIER_DIR)
    }
}

// ---- on-disk descriptor ----

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDescriptor {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_seconds: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub environment: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta_category: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fine_category: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub required_modalities: Vec<Modality>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluator: Option<EvaluatorDescriptor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleDescriptor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub media: Vec<MediaDescriptor>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorDescriptor {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timeout_seconds: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleDescriptor {
    #[serde(default)]
    pub commands: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediaDescriptor {
    pub path: Option<String>,
    pub source: Option<String>,
    pub license: Option<String>,
    pub sha256: Option<String>,
    pub bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

/// Standalone `media.toml`: just `[[media]]` tables.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediaFile {
    #[serde(default)]
    pub media: Vec<MediaDescriptor>,
}

fn is_kebab(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('-')
        && !id.ends_with('-')
        && !id.contains("--")
        && id
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
}

/// Lexically normalized, workspace-relative path; `None` if it escapes or is absolute.
pub fn normalize_relative(path: &str) -> Option<PathBuf> {
    let mut out = PathBuf::new();
    for comp in Path::new(path).components() {
        match comp {
            Component::Normal(c) => out.push(c),
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    return None;
                }
            }
            Component::RootDir | Component::Prefix(_) => return None,
        }
    }
    if out.as_os_str().is_empty() {
        None
    } else {
        Some(out)
    }
}

fn is_hex64(s: &str) -> bool {
    s.len() == 64
        && s.bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Parses a standalone media manifest (e.g. `media.toml`) for provenance audits.
pub fn load_media_manifest(path: &Path) -> Result<Vec<MediaManifestEntry>, TaskError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: MediaFile = toml::from_str(&text).map_err(|e| TaskError::MalformedDescriptor {
        path: path.to_path_buf(),
        reason: e.message().to_string(),
    })?;
    file.media
        .into_iter()
        .map(|m| media_entry(path, m))
        .collect()
}

fn media_entry(path: &Path, m: MediaDescriptor) -> Result<MediaManifestEntry, TaskError> {
    let missing = |field: &str| TaskError::MissingField {
        path: path.to_path_buf(),
        field: format!("media.{field}"),
    };
    let rel = m.path.ok_or_else(|| missing("path"))?;
    if normalize_relative(&rel).is_none() {
        return Err(TaskError::MalformedDescriptor {
            path: path.to_path_buf(),
            reason: format!("media path `{rel}` is not workspace-relative"),
        });
    }
    let hash = m.sha256.ok_or_else(|| missing("sha256"))?;
    if !is_hex64(&hash) {
        return Err(TaskError::MalformedDescriptor {
            path: path.to_path_buf(),
            reason: format!("media `{rel}`: sha256 must be 64 lowercase hex characters"),
        });
    }
    Ok(MediaManifestEntry {
        relative_path: rel,
        source_description: m.source.ok_or_else(|| missing("source"))?,
        license: m.license.ok_or_else(|| missing("license"))?,
        content_hash: hash,
        byte_size: m.bytes.ok_or_else(|| missing("bytes"))?,
        url: m.url,
    })
}

/// Loads one task directory and checks every descriptor invariant.
pub fn load_task(dir: &Path) -> Result<TaskSpec, TaskError> {
    let dir = &std::path::absolute(dir).map_err(io_err(dir))?;
    let desc_path = dir.join(DESCRIPTOR_FILE);
    let text = fs::read_to_string(&desc_path).map_err(io_err(&desc_path))?;
    let desc: TaskDescriptor =
        toml::from_str(&text).map_err(|e| TaskError::MalformedDescriptor {
            path: desc_path.clone(),
            reason: e.message().to_string(),
        })?;
    from_descriptor(dir, desc)
}

pub fn from_descriptor(dir: &Path, desc: TaskDescriptor) -> Result<TaskSpec, TaskError> {
    let desc_path = dir.join(DESCRIPTOR_FILE);
    let missing = |field: &str| TaskError::MissingField {
        path: desc_path.clone(),
        field: field.to_string(),
    };
    let malformed = |reason: String| TaskError::MalformedDescriptor {
        path: desc_path.clone(),
        reason,
    };

    let task_id = desc.id.ok_or_else(|| missing("id"))?;
    if !is_kebab(&task_id) {
        return Err(malformed(format!("id `{task_id}` is not lowercase-kebab")));
    }

    let instruction = match desc.instruction {
        Some(text) => text,
        None => {
            let p = dir.join(INSTRUCTION_FILE);
            if p.is_file() {
                fs::read_to_string(&p).map_err(io_err(&p))?
            } else {
                return Err(missing("instruction"));
            }
        }
    };
    if instruction.trim().is_empty() {
        return Err(missing("instruction"));
    }

    let threshold = desc.threshold.unwrap_or(DEFAULT_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(TaskError::ThresholdOutOfRange {
            path: desc_path,
            value: threshold,
        });
    }

    let budget_seconds = desc.budget_seconds.unwrap_or(DEFAULT_BUDGET_SECONDS);
    if budget_seconds == 0 {
        return Err(malformed("budget_seconds must be positive".into()));
    }

    let outputs = desc.outputs.ok_or_else(|| missing("outputs"))?;
    if outputs.is_empty() {
        return Err(malformed("outputs must list at least one path".into()));
    }
    let mut seen = BTreeSet::new();
    for out in &outputs {
        let norm = normalize_relative(out)
            .ok_or_else(|| malformed(format!("output `{out}` is not workspace-relative")))?;
        if !seen.insert(norm) {
            return Err(TaskError::DuplicateOutputPath {
                path: desc_path,
                output: out.clone(),
            });
        }
    }

    let ev = desc.evaluator.ok_or_else(|| missing("evaluator"))?;
    let command = ev.command.ok_or_else(|| missing("evaluator.command"))?;
    if command.is_empty() {
        return Err(malformed("evaluator.command must be non-empty".into()));
    }
    let score_source = match ev.score_file {
        Some(p) => {
            if normalize_relative(&p).is_none() {
                return Err(malformed(format!(
                    "evaluator.score_file `{p}` is not relative"
                )));
            }
            ScoreSource::ScoreFile(p)
        }
        None => ScoreSource::StdoutJson,
    };
    let timeout_seconds = ev
        .timeout_seconds
        .unwrap_or(DEFAULT_EVALUATOR_TIMEOUT_SECONDS);
    if timeout_seconds == 0 {
        return Err(malformed(
            "evaluator.timeout_seconds must be positive".into(),
        ));
    }

    let mut media_manifest = desc
        .media
        .into_iter()
        .map(|m| media_entry(&desc_path, m))
        .collect::<Result<Vec<_>, _>>()?;
    let media_path = dir.join(MEDIA_FILE);
    if media_path.is_file() {
        media_manifest.extend(load_media_manifest(&media_path)?);
    }
    let mut media_seen = BTreeSet::new();
    for m in &media_manifest {
        if !media_seen.insert(normalize_relative(&m.relative_path)) {
            return Err(malformed(format!(
                "media path `{}` declared twice",
                m.relative_path
            )));
        }
    }

    Ok(TaskSpec {
        task_id,
        dir: dir.to_path_buf(),
        instruction,
        workspace_seed: dir.join(WORKSPACE_DIR),
        environment_ref: desc
            .environment
            .unwrap_or_else(|| DEFAULT_ENVIRONMENT.to_string()),
        network: desc.network.unwrap_or(true),
        output_paths: outputs,
        evaluator: EvaluatorSpec {
            command,
            score_source,
            timeout_seconds,
        },
        oracle: desc.oracle.map(|o| OracleSpec {
            commands: o.commands,
        }),
        threshold,
        budget_seconds,
        categories: Categories {
            meta: desc.meta_category.unwrap_or_default(),
            fine: desc.fine_category.unwrap_or_default(),
        },
        capability_tags: desc.tags.into_iter().collect(),
        required_modalities: desc.required_modalities.into_iter().collect(),
        media_manifest,
    })
}

/// Descriptor form of a spec, with the instruction and media inlined.
pub fn to_descriptor(spec: &TaskSpec) -> TaskDescriptor {
    TaskDescriptor {
        id: Some(spec.task_id.clone()),
        instruction: Some(spec.instruction.clone()),
        threshold: Some(spec.threshold),
        budget_seconds: Some(spec.budget_seconds),
        environment: Some(spec.environment_ref.clone()),
        network: Some(spec.network),
        outputs: Some(spec.output_paths.clone()),
        meta_category: Some(spec.categories.meta.clone()).filter(|s| !s.is_empty()),
        fine_category: Some(spec.categories.fine.clone()).filter(|s| !s.is_empty()),
        tags: spec.capability_tags.iter().cloned().collect(),
        required_modalities: spec.required_modalities.iter().copied().collect(),
        evaluator: Some(EvaluatorDescriptor {
            command: Some(spec.evaluator.command.clone()),
            score_file: match &spec.evaluator.score_source {
                ScoreSource::ScoreFile(p) => Some(p.clone()),
                ScoreSource::StdoutJson => None,
            },
            timeout_seconds: Some(spec.evaluator.timeout_seconds),
        }),
        oracle: spec.oracle.as_ref().map(|o| OracleDescriptor {
            commands: o.commands.clone(),
        }),
        media: spec
            .media_manifest
            .iter()
            .map(|m| MediaDescriptor {
                path: Some(m.relative_path.clone()),
                source: Some(m.source_description.clone()),
                license: Some(m.license.clone()),
                sha256: Some(m.content_hash.clone()),
                bytes: Some(m.byte_size),
                url: m.url.clone(),
            })
            .collect(),
    }
}

pub fn descriptor_to_toml(spec: &TaskSpec) -> String {
    toml::to_string(&to_descriptor(spec)).expect("descriptor serializes")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrityFailure {
    Missing,
    HashMismatch { expected: String, actual: String },
    SizeMismatch { expected: u64, actual: u64 },
    Unreadable { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntegrityEntry {
    pub relative_path: String,
    pub failures: Vec<IntegrityFailure>,
}

impl IntegrityEntry {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntegrityReport {
    pub entries: Vec<IntegrityEntry>,
}

impl IntegrityReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(IntegrityEntry::passed)
    }

    pub fn mismatches(&self) -> usize {
        self.entries.iter().filter(|e| !e.passed()).count()
    }
}

/// Recomputes digest and size of every manifest entry under `staged`.
pub fn verify_media_integrity(spec: &TaskSpec, staged: &Path) -> IntegrityReport {
    let entries = spec
        .media_manifest
        .iter()
        .map(|m| IntegrityEntry {
            relative_path: m.relative_path.clone(),
            failures: check_entry(m, staged),
        })
        .collect();
    IntegrityReport { entries }
}

fn check_entry(m: &MediaManifestEntry, staged: &Path) -> Vec<IntegrityFailure> {
    let Some(rel) = normalize_relative(&m.relative_path) else {
        return vec![IntegrityFailure::Missing];
    };
    let path = staged.join(rel);
    let meta = match fs::symlink_metadata(&path) {
        Ok(meta) if meta.is_file() => meta,
        _ => return vec![IntegrityFailure::Missing],
    };
    let mut failures = Vec::new();
    match sha256_file(&path) {
        Ok(actual) if actual != m.content_hash => failures.push(IntegrityFailure::HashMismatch {
            expected: m.content_hash.clone(),
            actual,
        }),
        Ok(_) => {}
        Err(e) => failures.push(IntegrityFailure::Unreadable {
            reason: e.to_string(),
        }),
    }
    if meta.len() != m.byte_size {
        failures.push(IntegrityFailure::SizeMismatch {
            expected: m.byte_size,
            actual: meta.len(),
        });
    }
    failures
}

/// Loads every task directory under `root`, ordered by task id.
pub fn list_suite(root: &Path) -> Result<Vec<TaskSpec>, TaskError> {
    let mut by_id: BTreeMap<String, TaskSpec> = BTreeMap::new();
    let rd = fs::read_dir(root).map_err(io_err(root))?;
    for entry in rd {
        let entry = entry.map_err(io_err(root))?;
        let dir = entry.path();
        if !dir.is_dir() || !dir.join(DESCRIPTOR_FILE).is_file() {
            continue;
        }
        let spec = load_task(&dir)?;
        if let Some(prev) = by_id.get(&spec.task_id) {
            // Report the pair in path order so the error is stable.
            let (first, second) = if prev.dir <= spec.dir {
                (prev.dir.clone(), spec.dir.clone())
            } else {
                (spec.dir.clone(), prev.dir.clone())
            };
            return Err(TaskError::DuplicateTaskId {
                task_id: spec.task_id,
                first,
                second,
            });
        }
        by_id.insert(spec.task_id.clone(), spec);
    }
    Ok(by_id.into_values().collect())
}
