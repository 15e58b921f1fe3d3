#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Duration;

use mmtb_core::agent_loop::TrialOptions;
use mmtb_core::model_backend::{Script, ScriptedBackend};
use mmtb_core::sandbox::ProcessRuntime;
use mmtb_core::verifier::{score, Score};
use mmtb_core::{run_trial, AgentConfig, HarnessVariant, TaskSpec, TrialOutcome};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn runtime() -> ProcessRuntime {
    ProcessRuntime::new(fixtures().join("images"))
}

pub fn load(rel: &str) -> TaskSpec {
    mmtb_core::load_task(&fixtures().join(rel)).unwrap()
}

pub fn trial(
    spec: &TaskSpec,
    harness: HarnessVariant,
    script: Script,
    budget: Duration,
) -> TrialOutcome {
    let backend = ScriptedBackend::new("scripted", script).unwrap();
    let agent = AgentConfig::new(harness, "scripted");
    let opts = TrialOptions::new(format!("t-{}", spec.task_id), budget);
    run_trial(spec, &agent, &backend, &runtime(), &opts).unwrap()
}

pub fn trial_score(spec: &TaskSpec, script: Script) -> (TrialOutcome, Score) {
    let out = trial(spec, HarnessVariant::T2, script, Duration::from_secs(60));
    let s = score(out.snapshot.path(), spec, &runtime()).unwrap();
    (out, s)
}

pub fn record(
    task: &str,
    harness: HarnessVariant,
    partial: f64,
    threshold: f64,
) -> mmtb_core::TrialRecord {
    mmtb_core::TrialRecord {
        task_id: task.to_string(),
        agent: AgentConfig::new(harness, "model"),
        partial,
        pass: partial >= threshold,
        threshold,
        usage_total: Default::default(),
        api_cost_usd: rust_decimal::Decimal::ONE,
        agent_wall_seconds: 1.0,
        turns: 1,
        terminal_reason: mmtb_core::TerminalReason::TaskComplete,
        failure_label: None,
        error: None,
    }
}

pub fn task_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("task-{i:03}")).collect()
}
