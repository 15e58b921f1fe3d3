use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmtb_core::analysis::{
    auto_label, failure_distribution, matched_pairs, overhead_ratios, regime_partition,
    tag_cooccurrence, AvgDefinition, FailureSignature, InspectionPatternConfig, InspectionPatterns,
};
use mmtb_core::task_model::list_suite;
use mmtb_core::{Modality, TerminalReason, TrialRecord};
use serde::Deserialize;
use serde_json::Value;

use crate::sweep::{trial_dir, TRAJECTORY_FILE};

pub fn read_results(paths: &[PathBuf]) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(line)
                    .with_context(|| format!("{}:{}: bad record", p.display(), i + 1))?,
            );
        }
    }
    Ok(out)
}

pub fn for_agent(records: &[TrialRecord], label: &str) -> Result<Vec<TrialRecord>> {
    let v: Vec<TrialRecord> = records
        .iter()
        .filter(|r| r.agent.label() == label)
        .cloned()
        .collect();
    if v.is_empty() {
        let known: BTreeSet<String> = records.iter().map(|r| r.agent.label()).collect();
        bail!("no records for agent `{label}` (have: {known:?})");
    }
    Ok(v)
}

/// Suite task ids from a suite directory, or else every task in the records.
fn suite_ids(suite: Option<&Path>, records: &[TrialRecord]) -> Result<Vec<String>> {
    Ok(match suite {
        Some(dir) => list_suite(dir)?.into_iter().map(|s| s.task_id).collect(),
        None => records
            .iter()
            .map(|r| r.task_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    })
}

/// `execute_commands` command lines from a trajectory log.
pub fn trajectory_commands(path: &Path) -> Result<Vec<String>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
        Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
    };
    let mut cmds = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let turn: Value = serde_json::from_str(line)
            .with_context(|| format!("{}: bad trajectory line", path.display()))?;
        for call in turn["tool_calls"].as_array().into_iter().flatten() {
            if call["name"] == "execute_commands" {
                if let Some(c) = call["arguments"]["command"].as_str() {
                    cmds.push(c.to_string());
                }
            }
        }
    }
    Ok(cmds)
}

pub fn regime(results: &[PathBuf], a: &str, b: &str, suite: Option<&Path>) -> Result<String> {
    let all = read_results(results)?;
    let ra = for_agent(&all, a)?;
    let rb = for_agent(&all, b)?;
    let ids = suite_ids(suite, &all)?;
    let p = regime_partition(&ra, &rb, &ids)?;
    Ok(p.to_csv(a, b))
}

pub struct PairArgs<'a> {
    pub results: &'a [PathBuf],
    pub partial: &'a str,
    pub mm: &'a str,
    pub suite: &'a Path,
    pub run_dir: &'a Path,
    pub patterns: Option<&'a Path>,
    pub avg: AvgDefinition,
}

pub fn pairs(args: &PairArgs) -> Result<String> {
    let all = read_results(args.results)?;
    let rp = for_agent(&all, args.partial)?;
    let rm = for_agent(&all, args.mm)?;
    let specs = list_suite(args.suite)?;
    let ids: Vec<&str> = specs.iter().map(|s| s.task_id.as_str()).collect();
    let required: BTreeMap<String, BTreeSet<Modality>> = specs
        .iter()
        .map(|s| (s.task_id.clone(), s.required_modalities.clone()))
        .collect();
    let access = rp[0].agent.harness.native_modalities();
    let patterns = match args.patterns {
        Some(p) => {
            let cfg: InspectionPatternConfig = toml::from_str(&fs::read_to_string(p)?)
                .with_context(|| format!("parsing {}", p.display()))?;
            InspectionPatterns::from_config(&cfg)?
        }
        None => InspectionPatterns::default(),
    };
    let agent = rp[0].agent.clone();
    let mut io_error = None;
    let funnel = matched_pairs(&rp, &rm, &ids, &required, &access, |task, missing| {
        let path = trial_dir(args.run_dir, task, &agent).join(TRAJECTORY_FILE);
        match trajectory_commands(&path) {
            Ok(cmds) => patterns.attempted(cmds.iter().map(String::as_str), missing),
            Err(e) => {
                io_error.get_or_insert(e);
                false
            }
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    let mut out = format!(
        "co_success,{}\nmodality_required,{}\nattempts,{}\nn,{}\n",
        funnel.co_success,
        funnel.modality_required,
        funnel.attempts,
        funnel.pairs.len()
    );
    if funnel.pairs.is_empty() {
        return Ok(out);
    }
    let r = overhead_ratios(&funnel.pairs, args.avg)?;
    let [ac, wc, at, wt] = r.formatted();
    out.push_str(&format!(
        "avg_cost_ratio,{ac}\nworst_cost_ratio,{wc}\navg_turn_ratio,{at}\nworst_turn_ratio,{wt}\n\
         cost_mean_of_ratios,{:.4}\ncost_ratio_of_means,{:.4}\nturn_mean_of_ratios,{:.4}\nturn_ratio_of_means,{:.4}\n",
        r.cost_mean_of_ratios, r.cost_ratio_of_means, r.turn_mean_of_ratios, r.turn_ratio_of_means
    ));
    out.push_str("\ntask_id,partial_cost,mm_cost,partial_turns,mm_turns\n");
    for p in &funnel.pairs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.task_id, p.partial_agent_cost, p.mm_cost, p.partial_agent_turns, p.mm_turns
        ));
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelFile {
    #[serde(default)]
    label: Vec<LabelEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelEntry {
    task_id: String,
    agent: String,
    signature: FailureSignature,
}

pub fn failures(
    results: &[PathBuf],
    agent: &str,
    labels: Option<&Path>,
    run_dir: Option<&Path>,
) -> Result<String> {
    let all = read_results(results)?;
    let mut recs = for_agent(&all, agent)?;
    let mut manual = BTreeMap::new();
    if let Some(p) = labels {
        let f: LabelFile = toml::from_str(&fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?;
        for l in f.label.into_iter().filter(|l| l.agent == agent) {
            manual.insert(l.task_id, l.signature);
        }
    }
    for r in recs
        .iter_mut()
        .filter(|r| !r.pass && r.failure_label.is_none())
    {
        if manual.contains_key(&r.task_id) || r.terminal_reason != TerminalReason::BudgetExhausted {
            continue;
        }
        let cmds = match run_dir {
            Some(d) => {
                trajectory_commands(&trial_dir(d, &r.task_id, &r.agent).join(TRAJECTORY_FILE))?
            }
            None => vec![],
        };
        r.failure_label = auto_label(r.terminal_reason, cmds.iter().map(String::as_str));
    }
    let dist = failure_distribution(&recs, &manual)?;
    let mut out = String::from("signature,share\n");
    for (k, v) in dist {
        out.push_str(&format!("{k},{v:.2}\n"));
    }
    Ok(out)
}

pub fn tags(suite: &Path) -> Result<String> {
    let specs = list_suite(suite)?;
    let sets: Vec<BTreeSet<String>> = specs.into_iter().map(|s| s.capability_tags).collect();
    Ok(tag_cooccurrence(&sets).to_csv())
}
