mod common;

use std::fs;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::{fixtures, load, runtime, trial};
use mmtb_core::agent_loop::{ToolResult, TrialOptions};
use mmtb_core::digest::sha256_hex;
use mmtb_core::model_backend::{
    BackendError, ContentPart, ModelBackend, ModelRequest, ModelResponse, Script, ScriptedBackend,
    ScriptedCall, ScriptedStep, Usage,
};
use mmtb_core::routing::{route_tools, scan_modalities, DEFAULT_SCAN_DEPTH};
use mmtb_core::{run_trial, AgentConfig, HarnessVariant, TerminalReason, ToolName};
use serde_json::{json, Value};

fn call(name: &str, args: Value) -> ScriptedCall {
    ScriptedCall {
        name: name.into(),
        arguments: args,
    }
}

fn step(calls: Vec<ScriptedCall>) -> ScriptedStep {
    ScriptedStep {
        tool_calls: calls,
        usage: Usage {
            input_tokens: 1000,
            cached_tokens: 0,
            output_tokens: 50,
        },
        ..Default::default()
    }
}

fn exec(cmd: &str) -> ScriptedCall {
    call("execute_commands", json!({ "command": cmd }))
}

fn done() -> ScriptedCall {
    call("task_complete", json!({}))
}

/// Wraps a scripted backend and keeps every request it was sent.
struct Recording {
    inner: ScriptedBackend,
    seen: Mutex<Vec<ModelRequest>>,
}

impl ModelBackend for Recording {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(
        &self,
        request: &ModelRequest,
        deadline: Option<Instant>,
    ) -> Result<ModelResponse, BackendError> {
        self.seen.lock().unwrap().push(request.clone());
        self.inner.complete(request, deadline)
    }
}

fn recorded(
    harness: HarnessVariant,
    task: &str,
    script: Script,
) -> (mmtb_core::TrialOutcome, Vec<ModelRequest>) {
    let spec = load(task);
    let backend = Recording {
        inner: ScriptedBackend::new("scripted", script).unwrap(),
        seen: Mutex::new(vec![]),
    };
    let agent = AgentConfig::new(harness, "scripted");
    let opts = TrialOptions::new("rec", Duration::from_secs(60));
    let out = run_trial(&spec, &agent, &backend, &runtime(), &opts).unwrap();
    (out, backend.seen.into_inner().unwrap())
}

#[test]
fn schema_is_fixed_for_the_whole_trial() {
    let script = Script::new(vec![
        step(vec![exec("mkdir -p out && cp media/clip.mp4 out/x.png")]),
        step(vec![exec("printf 'a' > extra.wav")]),
        step(vec![call(
            "view_image",
            json!({ "path": "media/clip.mp4" }),
        )]),
        step(vec![done()]),
    ]);
    let (out, requests) = recorded(HarnessVariant::MM, "suite/copy-clip", script);
    let t = &out.trajectory;
    assert_eq!(t.terminal_reason, TerminalReason::TaskComplete);
    let seed = &load("suite/copy-clip").workspace_seed;
    let want: Vec<ToolName> = route_tools(&scan_modalities(seed, DEFAULT_SCAN_DEPTH).unwrap())
        .into_iter()
        .collect();
    assert_eq!(t.schema, want);
    // Files created mid-trial do not unlock listen_audio.
    assert!(!t.schema.contains(&ToolName::ListenAudio));
    let first = &t.turns[0].schema_digest;
    assert!(t.turns.iter().all(|turn| &turn.schema_digest == first));
    assert!(requests
        .iter()
        .all(|r| r.tool_schema == requests[0].tool_schema));
    assert!(requests
        .iter()
        .all(|r| r.system_prompt == requests[0].system_prompt));
}

#[test]
fn media_reaches_the_next_request() {
    let script = Script::new(vec![
        step(vec![call(
            "watch_video",
            json!({ "path": "media/clip.mp4" }),
        )]),
        step(vec![done()]),
    ]);
    let (out, requests) = recorded(HarnessVariant::MM, "suite/copy-clip", script);
    let bytes = fs::read(fixtures().join("suite/copy-clip/workspace/media/clip.mp4")).unwrap();
    match &out.trajectory.turns[0].tool_results[0].result {
        ToolResult::MediaDelivered {
            bytes: n,
            sha256,
            mime_type,
            ..
        } => {
            assert_eq!(*n, bytes.len());
            assert_eq!(sha256, &sha256_hex(&bytes));
            assert_eq!(mime_type, "video/mp4");
        }
        other => panic!("expected media, got {other:?}"),
    }
    assert_eq!(requests[0].media().count(), 0);
    let media: Vec<_> = requests[1].media().collect();
    assert_eq!(media.len(), 1);
    assert_eq!(media[0].data, bytes);
    assert!(requests[1].tool_schema.contains(ToolName::WatchVideo));
}

fn reasons(out: &mmtb_core::TrialOutcome) -> Vec<String> {
    out.trajectory
        .turns
        .iter()
        .flat_map(|t| &t.tool_results)
        .filter_map(|r| match &r.result {
            ToolResult::Rejected { reason } => Some(reason.clone()),
            _ => None,
        })
        .collect()
}

#[test]
fn bad_calls_are_rejected_not_fatal() {
    let script = Script::new(vec![
        step(vec![call(
            "listen_audio",
            json!({ "path": "media/clip.mp4" }),
        )]),
        step(vec![call(
            "view_image",
            json!({ "path": "media/clip.mp4" }),
        )]),
        step(vec![call(
            "watch_video",
            json!({ "path": "media/missing.mp4" }),
        )]),
        step(vec![call(
            "watch_video",
            json!({ "path": "../../etc/x.mp4" }),
        )]),
        step(vec![call("watch_video", json!({}))]),
        step(vec![call("execute_commands", json!({ "command": 5 }))]),
        step(vec![call("launch_rockets", json!({}))]),
        step(vec![exec(": > empty.mp4")]),
        step(vec![call("watch_video", json!({ "path": "empty.mp4" }))]),
        step(vec![done()]),
    ]);
    let (out, _) = recorded(HarnessVariant::MM, "suite/copy-clip", script);
    assert_eq!(out.trajectory.terminal_reason, TerminalReason::TaskComplete);
    let r = reasons(&out);
    assert_eq!(r.len(), 8, "{r:#?}");
    assert!(r[0].starts_with("tool not available: listen_audio"));
    assert!(r[1].contains("expects a image file"));
    assert!(r[2].starts_with("not found"));
    assert!(r[3].contains("escapes"));
    assert!(r[4].contains("missing required argument `path`"));
    assert!(r[5].contains("must be a string"));
    assert!(r[6].starts_with("tool not available: launch_rockets"));
    assert!(r[7].contains("empty"));
}

#[test]
fn text_only_harness_has_no_perception() {
    let script = Script::new(vec![
        step(vec![call(
            "watch_video",
            json!({ "path": "media/clip.mp4" }),
        )]),
        step(vec![done()]),
    ]);
    let (out, requests) = recorded(HarnessVariant::T2, "suite/copy-clip", script);
    assert_eq!(
        out.trajectory.schema,
        vec![ToolName::ExecuteCommands, ToolName::TaskComplete]
    );
    assert!(reasons(&out)[0].starts_with("tool not available"));
    assert!(requests.iter().all(|r| r.media().count() == 0));
}

#[test]
fn oversize_image_is_rejected_with_advice() {
    let dir = tempfile::tempdir().unwrap();
    mmtb_core::sandbox::copy_tree(&fixtures().join("suite/upper-transcript"), dir.path()).unwrap();
    fs::write(
        dir.path().join("workspace/big.png"),
        vec![7u8; 9 * 1024 * 1024],
    )
    .unwrap();
    let spec = mmtb_core::load_task(dir.path()).unwrap();
    let script = Script::new(vec![
        step(vec![call("view_image", json!({ "path": "big.png" }))]),
        step(vec![done()]),
    ]);
    let out = trial(&spec, HarnessVariant::MM, script, Duration::from_secs(60));
    let r = reasons(&out);
    assert!(r[0].contains("clip or downsample"), "{r:?}");
}

#[test]
fn calls_after_completion_are_not_executed() {
    let spec = load("suite/copy-clip");
    let script = Script::new(vec![step(vec![done(), exec("touch after.txt")])]);
    let out = trial(&spec, HarnessVariant::T2, script, Duration::from_secs(60));
    assert_eq!(out.trajectory.terminal_reason, TerminalReason::TaskComplete);
    assert!(reasons(&out)[0].contains("task_complete was already called"));
    assert!(!out.snapshot.path().join("after.txt").exists());
}

#[test]
fn script_running_out_ends_the_trial() {
    let spec = load("suite/copy-clip");
    let script = Script::new(vec![step(vec![exec("mkdir -p out")]), step(vec![])]);
    let out = trial(&spec, HarnessVariant::T2, script, Duration::from_secs(60));
    assert_eq!(
        out.trajectory.terminal_reason,
        TerminalReason::ScriptExhausted
    );
    assert_eq!(out.trajectory.turns.len(), 3);
    assert!(out.snapshot.path().join("out").is_dir());
    let usage = out.trajectory.total_usage();
    assert_eq!((usage.input_tokens, usage.output_tokens), (2000, 100));
}

#[test]
fn trajectory_log_has_one_line_per_turn() {
    let spec = load("suite/copy-clip");
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("nested/trajectory.jsonl");
    let script =
        Script::from_commands(&["mkdir -p out", "cp media/clip.mp4 out/clip.mp4", "ls out"]);
    let backend = ScriptedBackend::new("scripted", script).unwrap();
    let agent = AgentConfig::new(HarnessVariant::MM, "scripted");
    let opts = TrialOptions::new("log", Duration::from_secs(60)).with_log(&log);
    let out = run_trial(&spec, &agent, &backend, &runtime(), &opts).unwrap();
    let lines: Vec<Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), out.trajectory.turns.len());
    assert_eq!(lines.len(), 4);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["index"], i as u64 + 1);
        assert_eq!(l["request_digest"], out.trajectory.turns[i].request_digest);
    }
    assert_eq!(
        lines[2]["tool_results"][0]["result"]["stdout"],
        "clip.mp4\n"
    );
    let cmds: Vec<&str> = out.trajectory.commands().collect();
    assert_eq!(
        cmds,
        ["mkdir -p out", "cp media/clip.mp4 out/clip.mp4", "ls out"]
    );
}

#[test]
fn identical_scripts_give_identical_requests() {
    let make = || {
        Script::new(vec![
            step(vec![exec("ls media")]),
            step(vec![call(
                "watch_video",
                json!({ "path": "media/clip.mp4" }),
            )]),
            step(vec![
                exec("mkdir -p out && cp media/clip.mp4 out/clip.mp4"),
                done(),
            ]),
        ])
    };
    let (a, ra) = recorded(HarnessVariant::MM, "suite/copy-clip", make());
    let (b, rb) = recorded(HarnessVariant::MM, "suite/copy-clip", make());
    let da: Vec<&String> = a
        .trajectory
        .turns
        .iter()
        .map(|t| &t.request_digest)
        .collect();
    let db: Vec<&String> = b
        .trajectory
        .turns
        .iter()
        .map(|t| &t.request_digest)
        .collect();
    assert_eq!(da, db);
    assert_eq!(
        ra.iter().map(|r| r.digest()).collect::<Vec<_>>(),
        rb.iter().map(|r| r.digest()).collect::<Vec<_>>()
    );
    // The rendered prompt names the virtual workspace, not the host path.
    assert!(ra[0].system_prompt.contains("/workspace$ "));
    assert!(!ra[0].system_prompt.contains(fixtures().to_str().unwrap()));
}

#[test]
fn budget_cuts_a_long_command() {
    let spec = load("suite/copy-clip");
    let script = Script::new(vec![
        step(vec![exec(
            "mkdir -p out; echo partial > out/note; sleep 30",
        )]),
        step(vec![done()]),
    ]);
    let start = Instant::now();
    let out = trial(&spec, HarnessVariant::T2, script, Duration::from_secs(2));
    let elapsed = start.elapsed();
    assert_eq!(
        out.trajectory.terminal_reason,
        TerminalReason::BudgetExhausted
    );
    assert!(elapsed < Duration::from_secs(6), "took {elapsed:?}");
    assert!(out.trajectory.agent_wall_seconds >= 1.9);
    match &out.trajectory.turns[0].tool_results[0].result {
        ToolResult::Exec(r) => assert!(r.timed_out),
        other => panic!("{other:?}"),
    }
    // Work done before the cutoff is kept for scoring.
    assert_eq!(
        fs::read_to_string(out.snapshot.path().join("out/note")).unwrap(),
        "partial\n"
    );
}

#[test]
fn requested_timeout_caps_a_command() {
    let spec = load("suite/copy-clip");
    let script = Script::new(vec![
        step(vec![call(
            "execute_commands",
            json!({ "command": "sleep 20", "timeout_seconds": 1 }),
        )]),
        step(vec![done()]),
    ]);
    let start = Instant::now();
    let out = trial(&spec, HarnessVariant::T2, script, Duration::from_secs(60));
    assert!(start.elapsed() < Duration::from_secs(5));
    assert_eq!(out.trajectory.terminal_reason, TerminalReason::TaskComplete);
    match &out.trajectory.turns[0].tool_results[0].result {
        ToolResult::Exec(r) => {
            assert!(r.timed_out && r.exit_code == mmtb_core::sandbox::TIMEOUT_EXIT_CODE)
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn backend_latency_past_deadline_exhausts_budget() {
    let spec = load("suite/copy-clip");
    let script = Script::new(vec![ScriptedStep {
        latency_seconds: 30.0,
        ..step(vec![done()])
    }]);
    let start = Instant::now();
    let out = trial(&spec, HarnessVariant::T2, script, Duration::from_secs(1));
    assert!(start.elapsed() < Duration::from_secs(4));
    assert_eq!(
        out.trajectory.terminal_reason,
        TerminalReason::BudgetExhausted
    );
}

#[test]
fn missing_image_is_a_trial_error() {
    let dir = tempfile::tempdir().unwrap();
    mmtb_core::sandbox::copy_tree(&fixtures().join("suite/copy-clip"), dir.path()).unwrap();
    let toml = fs::read_to_string(dir.path().join("task.toml")).unwrap();
    fs::write(
        dir.path().join("task.toml"),
        format!("environment = \"mmtb-env/nope:1\"\n{toml}"),
    )
    .unwrap();
    let spec = mmtb_core::load_task(dir.path()).unwrap();
    let backend = ScriptedBackend::new("s", Script::from_commands::<&str>(&[])).unwrap();
    let agent = AgentConfig::new(HarnessVariant::T2, "s");
    let err = run_trial(
        &spec,
        &agent,
        &backend,
        &runtime(),
        &TrialOptions::new("x", Duration::from_secs(5)),
    )
    .unwrap_err();
    assert!(
        matches!(err, mmtb_core::agent_loop::TrialError::Provision(_)),
        "{err}"
    );
}

#[test]
fn assistant_text_without_calls_gets_a_nudge() {
    let spec = load("suite/copy-clip");
    let script = Script::new(vec![
        ScriptedStep {
            assistant_text: Some("thinking".into()),
            ..Default::default()
        },
        step(vec![done()]),
    ]);
    let backend = Recording {
        inner: ScriptedBackend::new("s", script).unwrap(),
        seen: Mutex::new(vec![]),
    };
    let agent = AgentConfig::new(HarnessVariant::T2, "s");
    let out = run_trial(
        &spec,
        &agent,
        &backend,
        &runtime(),
        &TrialOptions::new("n", Duration::from_secs(30)),
    )
    .unwrap();
    assert_eq!(out.trajectory.terminal_reason, TerminalReason::TaskComplete);
    let seen = backend.seen.into_inner().unwrap();
    let last = seen[1].messages.last().unwrap();
    assert!(last
        .content
        .iter()
        .any(|p| matches!(p, ContentPart::Text { text } if text.contains("task_complete"))));
}
