use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .canonicalize()
        .unwrap()
}

fn mmtb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmtb"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Temp run layout: a suite with the named tasks and a manifest for `agents`.
struct Layout {
    dir: tempfile::TempDir,
}

impl Layout {
    fn new(tasks: &[&str], agents: &[(&str, &str)], extra: &str) -> Layout {
        let dir = tempfile::tempdir().unwrap();
        for t in tasks {
            copy(
                &fixtures().join("suite").join(t),
                &dir.path().join("suite").join(t),
            );
        }
        let f = fixtures();
        let mut m = format!(
            "run_id = \"r\"\nsuite = \"suite\"\noutput = \"runs\"\nrates = \"{}\"\nimages = \"{}\"\n\
             backend = \"scripted:{}\"\n{extra}\n",
            f.join("rates.toml").display(),
            f.join("images").display(),
            f.join("scripts/desk").display(),
        );
        for (h, model) in agents {
            m.push_str(&format!(
                "[[agents]]\nharness = \"{h}\"\nmodel = \"{model}\"\n"
            ));
        }
        fs::write(dir.path().join("run.toml"), m).unwrap();
        Layout { dir }
    }

    fn manifest(&self) -> String {
        self.dir.path().join("run.toml").display().to_string()
    }

    fn run_dir(&self) -> PathBuf {
        self.dir.path().join("runs/r")
    }

    fn run(&self, extra: &[&str]) -> Output {
        let m = self.manifest();
        let mut args = vec!["run", "--manifest", m.as_str()];
        args.extend_from_slice(extra);
        mmtb(&args)
    }
}

fn copy(src: &Path, dest: &Path) {
    fs::create_dir_all(dest).unwrap();
    for e in fs::read_dir(src).unwrap() {
        let e = e.unwrap();
        let to = dest.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy(&e.path(), &to);
        } else {
            fs::copy(e.path(), to).unwrap();
        }
    }
}

fn records(run_dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for task in fs::read_dir(run_dir)
        .unwrap()
        .flatten()
        .filter(|e| e.path().is_dir())
    {
        for agent in fs::read_dir(task.path()).unwrap().flatten() {
            let r = agent.path().join("record.json");
            if r.is_file() {
                out.push(r);
            }
        }
    }
    out.sort();
    out
}

const THREE: [&str; 3] = ["copy-clip", "probe-duration", "upper-transcript"];

#[test]
fn one_agent_three_tasks() {
    let l = Layout::new(&THREE, &[("T2", "scripted")], "");
    let o = l.run(&[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("3 trial(s) executed, 0 resumed, 0 failed"));
    assert_eq!(records(&l.run_dir()).len(), 3);
    let csv = fs::read_to_string(l.run_dir().join("summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(
        rows[1].starts_with("T2__scripted,T2,scripted,3,1.000,1.000,"),
        "{}",
        rows[1]
    );
    let results = fs::read_to_string(l.run_dir().join("results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 3);
    for dir in ["copy-clip", "probe-duration", "upper-transcript"] {
        let log = l.run_dir().join(dir).join("T2__scripted/trajectory.jsonl");
        assert!(fs::read_to_string(log).unwrap().lines().count() >= 2);
    }
}

#[test]
fn rerun_only_executes_missing_trials() {
    let l = Layout::new(&THREE, &[("T2", "scripted")], "");
    assert!(l.run(&[]).status.success());
    let before = fs::read_to_string(l.run_dir().join("results.jsonl")).unwrap();
    let recs = records(&l.run_dir());
    fs::remove_file(&recs[1]).unwrap();
    let o = l.run(&[]);
    assert!(o.status.success());
    assert!(
        stdout(&o).contains("1 trial(s) executed, 2 resumed"),
        "{}",
        stdout(&o)
    );
    let after = fs::read_to_string(l.run_dir().join("results.jsonl")).unwrap();
    let strip = |s: &str| -> Vec<Value> {
        s.lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("agent_wall_seconds");
                v
            })
            .collect()
    };
    assert_eq!(strip(&before), strip(&after));
}

#[test]
fn unknown_model_rates_fail_before_any_trial() {
    let l = Layout::new(&THREE, &[("T2", "scripted"), ("MM", "unpriced/model")], "");
    let o = l.run(&[]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("unpriced/model"), "{err}");
    assert!(!l.run_dir().exists() || records(&l.run_dir()).is_empty());
}

#[test]
fn missing_script_fails_before_any_trial() {
    let l = Layout::new(&THREE, &[("T2", "scripted")], "");
    let empty = tempfile::tempdir().unwrap();
    let backend = format!("scripted:{}", empty.path().display());
    let o = l.run(&["--backend", &backend]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!l.run_dir().exists() || records(&l.run_dir()).is_empty());
}

#[test]
fn parallelism_does_not_change_results() {
    let tasks = [
        "copy-clip",
        "probe-duration",
        "upper-transcript",
        "frame-manifest",
        "caption-timing",
    ];
    let agents = [("MM", "scripted"), ("T2", "scripted")];
    let a = Layout::new(&tasks, &agents, "parallelism = 1");
    let b = Layout::new(&tasks, &agents, "parallelism = 8");
    assert!(a.run(&[]).status.success());
    assert!(b.run(&[]).status.success());
    let norm = |l: &Layout| -> Vec<Value> {
        fs::read_to_string(l.run_dir().join("results.jsonl"))
            .unwrap()
            .lines()
            .map(|line| {
                let mut v: Value = serde_json::from_str(line).unwrap();
                v.as_object_mut().unwrap().remove("agent_wall_seconds");
                v
            })
            .collect()
    };
    assert_eq!(norm(&a), norm(&b));
    let summary = |l: &Layout| -> Vec<Value> {
        let v: Value =
            serde_json::from_str(&fs::read_to_string(l.run_dir().join("summary.json")).unwrap())
                .unwrap();
        v.as_array()
            .unwrap()
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.as_object_mut().unwrap().remove("mean_wall_seconds");
                s
            })
            .collect()
    };
    assert_eq!(summary(&a), summary(&b));
}

#[test]
fn route_reports_video_tools() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("clips/raw")).unwrap();
    fs::write(dir.path().join("clips/raw/take1.MOV"), b"x").unwrap();
    fs::write(dir.path().join("notes.txt"), b"x").unwrap();
    let o = mmtb(&["route", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o),
        "modalities: video\ntools: execute_commands, task_complete, view_image, watch_video\n"
    );
    let o = mmtb(&[
        "route",
        dir.path().to_str().unwrap(),
        "--harness",
        "T2",
        "--json",
    ]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["tools"], json!(["execute_commands", "task_complete"]));
    assert_eq!(v["modalities"], json!(["video"]));
}

fn synthetic_record(task: &str, harness: &str, pass: bool) -> Value {
    json!({
        "task_id": task,
        "agent": { "harness": harness, "model": "m" },
        "partial": if pass { 1.0 } else { 0.0 },
        "pass": pass,
        "threshold": 1.0,
        "usage_total": { "input_tokens": 10, "cached_tokens": 0, "output_tokens": 1 },
        "api_cost_usd": "0.01",
        "agent_wall_seconds": 1.0,
        "turns": 2,
        "terminal_reason": if pass { "task_complete" } else { "budget_exhausted" },
    })
}

#[test]
fn analyze_regime_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for i in 0..105 {
        let t = format!("task-{i:03}");
        // Text agent passes 0..17, MM passes 6..45.
        lines.push_str(&format!("{}\n", synthetic_record(&t, "T2", i < 17)));
        lines.push_str(&format!(
            "{}\n",
            synthetic_record(&t, "MM", (6..45).contains(&i))
        ));
    }
    let path = dir.path().join("results.jsonl");
    fs::write(&path, lines).unwrap();
    let o = mmtb(&[
        "analyze",
        "regime",
        "--results",
        path.to_str().unwrap(),
        "--a",
        "T2__m",
        "--b",
        "MM__m",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        stdout(&o),
        "regime,count\nboth_solve,11\nT2__m_only,6\nMM__m_only,28\nboth_fail,60\n"
    );
}

#[test]
fn analyze_over_a_desk_run() {
    let tasks = [
        "copy-clip",
        "probe-duration",
        "upper-transcript",
        "frame-manifest",
        "caption-timing",
    ];
    let l = Layout::new(&tasks, &[("MM", "scripted"), ("T2", "scripted")], "");
    assert!(l.run(&[]).status.success());
    let results = l.run_dir().join("results.jsonl");
    let r = results.to_str().unwrap();
    let suite = l.dir.path().join("suite");
    let run_dir = l.run_dir();
    let o = mmtb(&[
        "analyze",
        "matched-pairs",
        "--results",
        r,
        "--partial",
        "T2__scripted",
        "--mm",
        "MM__scripted",
        "--suite",
        suite.to_str().unwrap(),
        "--run-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(
        stdout(&o).starts_with("co_success,2\nmodality_required,1\nattempts,1\nn,1\n"),
        "{}",
        stdout(&o)
    );
    let labels = fixtures().join("desk-labels.toml");
    let o = mmtb(&[
        "analyze",
        "failures",
        "--results",
        r,
        "--agent",
        "T2__scripted",
        "--labels",
        labels.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("model_reasoning,0.50"));
    // Unlabeled failures are an error, not a silent omission.
    let o = mmtb(&[
        "analyze",
        "failures",
        "--results",
        r,
        "--agent",
        "T2__scripted",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn score_empty_snapshot_fails() {
    let snap = tempfile::tempdir().unwrap();
    let task = fixtures().join("suite/copy-clip");
    let images = fixtures().join("images");
    let o = mmtb(&[
        "score",
        snap.path().to_str().unwrap(),
        task.to_str().unwrap(),
        "--images",
        images.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["partial"], 0.0);
    assert_eq!(v["pass"], false);
}

#[test]
fn certify_exit_codes() {
    let images = fixtures().join("images");
    let i = images.to_str().unwrap();
    let good = fixtures().join("suite/copy-clip");
    assert!(mmtb(&["certify", good.to_str().unwrap(), "--images", i])
        .status
        .success());
    let bad = fixtures().join("tasks/broken-oracle");
    let o = mmtb(&["certify", bad.to_str().unwrap(), "--images", i]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("oracle"));
}

#[test]
fn validate_suite_flags_tampering() {
    let dir = tempfile::tempdir().unwrap();
    copy(&fixtures().join("suite"), dir.path());
    let p = dir.path().join("copy-clip/workspace/media/clip.mp4");
    let mut b = fs::read(&p).unwrap();
    b[0] ^= 1;
    fs::write(&p, b).unwrap();
    let o = mmtb(&["validate-suite", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("copy-clip: 1 media mismatch(es)"));
}
