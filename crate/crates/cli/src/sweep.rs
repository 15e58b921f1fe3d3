//! The `run` subcommand: agents × tasks on a bounded worker pool, one
//! record per trial on disk so an interrupted sweep can resume.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use log::{error, info, warn};
use mmtb_core::agent_loop::{TrialError, TrialOptions};
use mmtb_core::metrics::{summarize_all, RateTable, SUMMARY_CSV_HEADER};
use mmtb_core::model_backend::Usage;
use mmtb_core::model_backend::{HttpBackend, ModelBackend, Script, ScriptedBackend};
use mmtb_core::sandbox::Runtime;
use mmtb_core::task_model::list_suite;
use mmtb_core::validation::null_agent_script;
use mmtb_core::verifier::score;
use mmtb_core::{run_trial, AgentConfig, TaskSpec, TerminalReason, TrialRecord};
use rayon::prelude::*;

use crate::manifest::{BackendChoice, RunManifest, API_KEY_VAR};

pub const RECORD_FILE: &str = "record.json";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";

pub fn trial_dir(run_dir: &Path, task_id: &str, agent: &AgentConfig) -> PathBuf {
    run_dir.join(task_id).join(agent.label())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn read_record(path: &Path) -> Option<TrialRecord> {
    let text = fs::read_to_string(path).ok()?;
    match serde_json::from_str(&text) {
        Ok(r) => Some(r),
        Err(e) => {
            warn!("ignoring unreadable record {}: {e}", path.display());
            None
        }
    }
}

fn script_for(
    choice: &BackendChoice,
    spec: &TaskSpec,
    agent: &AgentConfig,
) -> Result<Option<Script>> {
    Ok(match choice {
        BackendChoice::Oracle => {
            let oracle = spec
                .oracle
                .as_ref()
                .with_context(|| format!("task {} has no oracle solution", spec.task_id))?;
            Some(Script::from_commands(&oracle.commands))
        }
        BackendChoice::Null => Some(null_agent_script()),
        BackendChoice::ScriptDir(dir) => {
            let specific = dir
                .join(agent.label())
                .join(format!("{}.json", spec.task_id));
            let shared = dir.join(format!("{}.json", spec.task_id));
            let path = if specific.is_file() { specific } else { shared };
            Some(Script::load(&path)?)
        }
        BackendChoice::Http { .. } => None,
    })
}

fn backend_for(
    choice: &BackendChoice,
    spec: &TaskSpec,
    agent: &AgentConfig,
) -> Result<Box<dyn ModelBackend>> {
    match (choice, script_for(choice, spec, agent)?) {
        (_, Some(script)) => Ok(Box::new(ScriptedBackend::new(agent.model.clone(), script)?)),
        (BackendChoice::Http { base_url }, None) => Ok(Box::new(HttpBackend::new(
            base_url.clone(),
            agent.model.clone(),
            std::env::var(API_KEY_VAR).ok(),
        ))),
        _ => unreachable!("script_for returns a script for every scripted backend"),
    }
}

fn setup_failure(spec: &TaskSpec, agent: &AgentConfig, reason: String) -> TrialRecord {
    TrialRecord {
        task_id: spec.task_id.clone(),
        agent: agent.clone(),
        partial: 0.0,
        pass: false,
        threshold: spec.threshold,
        usage_total: Usage::default(),
        api_cost_usd: Default::default(),
        agent_wall_seconds: 0.0,
        turns: 0,
        terminal_reason: TerminalReason::SetupFailed,
        failure_label: None,
        error: Some(reason),
    }
}

struct Job<'a> {
    spec: &'a TaskSpec,
    agent: &'a AgentConfig,
    dir: PathBuf,
}

fn run_job(
    m: &RunManifest,
    job: &Job,
    runtime: &dyn Runtime,
    rates: &RateTable,
) -> Result<TrialRecord> {
    let Job { spec, agent, dir } = job;
    let budget = Duration::from_secs(m.budget_seconds.unwrap_or(spec.budget_seconds));
    let trial_id = format!("{}-{}-{}", m.run_id, spec.task_id, agent.label());
    let opts = TrialOptions::new(trial_id, budget).with_log(dir.join(TRAJECTORY_FILE));
    let backend = backend_for(&m.backend, spec, agent)?;
    let record = match run_trial(spec, agent, backend.as_ref(), runtime, &opts) {
        Ok(outcome) => {
            let s = score(outcome.snapshot.path(), spec, runtime)?;
            TrialRecord::from_trial(&outcome.trajectory, &s, rates)?
        }
        Err(e @ (TrialError::Provision(_) | TrialError::Routing(_))) => {
            error!("{} / {}: {e}", spec.task_id, agent.label());
            setup_failure(spec, agent, e.to_string())
        }
        Err(e) => return Err(e.into()),
    };
    let mut json = serde_json::to_string_pretty(&record)?;
    json.push('\n');
    write_atomic(&dir.join(RECORD_FILE), json.as_bytes())?;
    Ok(record)
}

pub struct RunReport {
    pub executed: usize,
    pub resumed: usize,
    pub failed: usize,
}

pub fn cmd_run(m: &RunManifest) -> Result<RunReport> {
    let rates = RateTable::load(&m.rates)?;
    for a in &m.agents {
        rates
            .get(&a.model)
            .with_context(|| format!("agent {}", a.label()))?;
    }
    let suite = list_suite(&m.suite)?;
    if suite.is_empty() {
        bail!("suite {} has no tasks", m.suite.display());
    }
    if let BackendChoice::ScriptDir(_) | BackendChoice::Oracle = m.backend {
        for spec in &suite {
            for a in &m.agents {
                script_for(&m.backend, spec, a)?;
            }
        }
    }
    let runtime = m.runtime.build();
    let run_dir = m.run_dir();
    fs::create_dir_all(&run_dir)?;

    let mut pending = Vec::new();
    let mut resumed = 0;
    for a in &m.agents {
        for spec in &suite {
            let dir = trial_dir(&run_dir, &spec.task_id, a);
            if read_record(&dir.join(RECORD_FILE)).is_some() {
                resumed += 1;
            } else {
                pending.push(Job {
                    spec,
                    agent: a,
                    dir,
                });
            }
        }
    }
    info!(
        "{} trial(s) to run, {resumed} already recorded",
        pending.len()
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(m.parallelism)
        .build()?;
    let outcomes: Vec<Result<TrialRecord>> = pool.install(|| {
        pending
            .par_iter()
            .map(|job| run_job(m, job, runtime.as_ref(), &rates))
            .collect()
    });
    let mut failed = 0;
    for (job, r) in pending.iter().zip(&outcomes) {
        if let Err(e) = r {
            failed += 1;
            error!("{} / {}: {e:#}", job.spec.task_id, job.agent.label());
        }
    }

    let mut records = Vec::new();
    for a in &m.agents {
        for spec in &suite {
            if let Some(r) = read_record(&trial_dir(&run_dir, &spec.task_id, a).join(RECORD_FILE)) {
                records.push(r);
            }
        }
    }
    records.sort_by(|x, y| (x.agent.label(), &x.task_id).cmp(&(y.agent.label(), &y.task_id)));
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write_atomic(&run_dir.join(RESULTS_FILE), lines.as_bytes())?;

    let ids: Vec<&str> = suite.iter().map(|s| s.task_id.as_str()).collect();
    let summaries = summarize_all(&records, &ids)?;
    if summaries.len() != m.agents.len() {
        bail!(
            "expected summaries for {} agents, got {}",
            m.agents.len(),
            summaries.len()
        );
    }
    let mut json = serde_json::to_string_pretty(&summaries)?;
    json.push('\n');
    write_atomic(&run_dir.join(SUMMARY_JSON), json.as_bytes())?;
    let mut csv = format!("{SUMMARY_CSV_HEADER}\n");
    for s in &summaries {
        csv.push_str(&s.csv_row());
        csv.push('\n');
    }
    write_atomic(&run_dir.join(SUMMARY_CSV), csv.as_bytes())?;
    Ok(RunReport {
        executed: pending.len() - failed,
        resumed,
        failed,
    })
}
