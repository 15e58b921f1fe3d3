//! Post-hoc computations over sealed results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use rust_decimal::prelude::ToPrimitive;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent_loop::TerminalReason;
use crate::metrics::{check_coverage, MetricsError, TrialRecord};
use crate::routing::Modality;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no matched pairs")]
    EmptyMatchedSet,
    #[error("task {task_id}: cost must be positive")]
    NonPositiveCost { task_id: String },
    #[error("task {task_id}: turns must be at least 1")]
    ZeroTurns { task_id: String },
    #[error("failed task {0} has no failure label")]
    MissingLabel(String),
    #[error("unknown failure signature `{0}`")]
    UnknownSignature(String),
    #[error("bad inspection pattern: {0}")]
    BadPattern(#[from] regex::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureSignature {
    TimeoutToolSetup,
    TimeoutToolExecution,
    WrongOutputFormat,
    WrongApproach,
    CorrectApproachLowPrecision,
    ToolFailure,
    ModelReasoning,
}

impl FailureSignature {
    pub const ALL: [FailureSignature; 7] = [
        FailureSignature::TimeoutToolSetup,
        FailureSignature::TimeoutToolExecution,
        FailureSignature::WrongOutputFormat,
        FailureSignature::WrongApproach,
        FailureSignature::CorrectApproachLowPrecision,
        FailureSignature::ToolFailure,
        FailureSignature::ModelReasoning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureSignature::TimeoutToolSetup => "timeout_tool_setup",
            FailureSignature::TimeoutToolExecution => "timeout_tool_execution",
            FailureSignature::WrongOutputFormat => "wrong_output_format",
            FailureSignature::WrongApproach => "wrong_approach",
            FailureSignature::CorrectApproachLowPrecision => "correct_approach_low_precision",
            FailureSignature::ToolFailure => "tool_failure",
            FailureSignature::ModelReasoning => "model_reasoning",
        }
    }
}

impl fmt::Display for FailureSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FailureSignature {
    type Err = AnalysisError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FailureSignature::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| AnalysisError::UnknownSignature(s.to_string()))
    }
}

// ---- regime partition ----

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RegimePartition {
    pub both_solve: BTreeSet<String>,
    pub a_only: BTreeSet<String>,
    pub b_only: BTreeSet<String>,
    pub both_fail: BTreeSet<String>,
}

impl RegimePartition {
    /// (both, a only, b only, neither).
    pub fn sizes(&self) -> (usize, usize, usize, usize) {
        (
            self.both_solve.len(),
            self.a_only.len(),
            self.b_only.len(),
            self.both_fail.len(),
        )
    }

    pub fn to_csv(&self, a: &str, b: &str) -> String {
        let (both, ao, bo, none) = self.sizes();
        format!("regime,count\nboth_solve,{both}\n{a}_only,{ao}\n{b}_only,{bo}\nboth_fail,{none}\n")
    }
}

/// Splits `suite` by membership in the two pass sets.
pub fn partition_passes(
    suite: &BTreeSet<String>,
    pass_a: &BTreeSet<String>,
    pass_b: &BTreeSet<String>,
) -> RegimePartition {
    let mut p = RegimePartition::default();
    for t in suite {
        let bucket = match (pass_a.contains(t), pass_b.contains(t)) {
            (true, true) => &mut p.both_solve,
            (true, false) => &mut p.a_only,
            (false, true) => &mut p.b_only,
            (false, false) => &mut p.both_fail,
        };
        bucket.insert(t.clone());
    }
    p
}

fn passes(records: &[&TrialRecord]) -> BTreeSet<String> {
    records
        .iter()
        .filter(|r| r.pass)
        .map(|r| r.task_id.clone())
        .collect()
}

pub fn regime_partition<S: AsRef<str>>(
    results_a: &[TrialRecord],
    results_b: &[TrialRecord],
    suite: &[S],
) -> Result<RegimePartition, AnalysisError> {
    let a = check_coverage(results_a, suite)?;
    let b = check_coverage(results_b, suite)?;
    let all: BTreeSet<String> = suite.iter().map(|s| s.as_ref().to_string()).collect();
    Ok(partition_passes(&all, &passes(&a), &passes(&b)))
}

// ---- matched pairs ----

/// Command patterns that count as inspecting a modality through the terminal.
#[derive(Debug, Clone)]
pub struct InspectionPatterns {
    patterns: BTreeMap<Modality, Vec<Regex>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectionPatternConfig {
    #[serde(default)]
    pub image: Vec<String>,
    #[serde(default)]
    pub audio: Vec<String>,
    #[serde(default)]
    pub video: Vec<String>,
}

impl InspectionPatterns {
    pub fn from_config(cfg: &InspectionPatternConfig) -> Result<Self, AnalysisError> {
        let compile = |v: &[String]| {
            v.iter()
                .map(|p| Regex::new(p))
                .collect::<Result<Vec<_>, _>>()
        };
        let mut patterns = BTreeMap::new();
        patterns.insert(Modality::Image, compile(&cfg.image)?);
        patterns.insert(Modality::Audio, compile(&cfg.audio)?);
        patterns.insert(Modality::Video, compile(&cfg.video)?);
        Ok(InspectionPatterns { patterns })
    }

    pub fn default_config() -> InspectionPatternConfig {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        InspectionPatternConfig {
            image: v(&[
                r"\b(tesseract|pytesseract|identify|exiftool|zbarimg)\b",
                r"\b(convert|magick)\b\s",
                r"Image\.open|cv2\.imread|easyocr",
            ]),
            audio: v(&[
                r"\b(whisper|sox|soxi|aubio|vosk|librosa|speech_recognition|pydub)\b",
                r"\bffmpeg\b.*\s-vn\b",
                r"\b(ffprobe|ffmpeg)\b.*\.(wav|mp3|ogg|flac|aac|m4a)\b",
            ]),
            video: v(&[
                r"\bffmpeg\b.*(\s-vf\s|fps=|select=|\s-frames:v\s|\s-ss\s)",
                r"\b(ffprobe|ffmpeg|mediainfo)\b.*\.(mp4|webm|avi|mov|mkv)\b",
                r"cv2\.VideoCapture|decord|scenedetect",
            ]),
        }
    }

    /// True when any command matches a pattern for one of `modalities`.
    pub fn attempted<'a>(
        &self,
        commands: impl IntoIterator<Item = &'a str>,
        modalities: &BTreeSet<Modality>,
    ) -> bool {
        let active: Vec<&Regex> = modalities
            .iter()
            .flat_map(|m| self.patterns.get(m).into_iter().flatten())
            .collect();
        commands
            .into_iter()
            .any(|c| active.iter().any(|re| re.is_match(c)))
    }
}

impl Default for InspectionPatterns {
    fn default() -> Self {
        Self::from_config(&Self::default_config()).expect("built-in patterns compile")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedPair {
    pub task_id: String,
    #[serde(with = "rust_decimal::serde::str")]
    pub partial_agent_cost: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub mm_cost: Decimal,
    pub partial_agent_turns: u32,
    pub mm_turns: u32,
}

/// Filter funnel counts plus the surviving pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedPairs {
    pub co_success: usize,
    pub modality_required: usize,
    pub attempts: usize,
    pub pairs: Vec<MatchedPair>,
}

/// Tasks passed by both agents where the partial agent lacked a required
/// modality and `attempted(task_id, missing)` reports a terminal-side try.
pub fn matched_pairs<S, F>(
    partial_results: &[TrialRecord],
    mm_results: &[TrialRecord],
    suite: &[S],
    required: &BTreeMap<String, BTreeSet<Modality>>,
    partial_access: &BTreeSet<Modality>,
    mut attempted: F,
) -> Result<MatchedPairs, AnalysisError>
where
    S: AsRef<str>,
    F: FnMut(&str, &BTreeSet<Modality>) -> bool,
{
    let partial = check_coverage(partial_results, suite)?;
    let mm = check_coverage(mm_results, suite)?;
    let mm_by_task: BTreeMap<&str, &TrialRecord> =
        mm.iter().map(|r| (r.task_id.as_str(), *r)).collect();
    let empty = BTreeSet::new();
    let mut out = MatchedPairs {
        co_success: 0,
        modality_required: 0,
        attempts: 0,
        pairs: vec![],
    };
    for p in partial {
        let m = mm_by_task[p.task_id.as_str()];
        if !(p.pass && m.pass) {
            continue;
        }
        out.co_success += 1;
        let missing: BTreeSet<Modality> = required
            .get(&p.task_id)
            .unwrap_or(&empty)
            .difference(partial_access)
            .copied()
            .collect();
        if missing.is_empty() {
            continue;
        }
        out.modality_required += 1;
        if !attempted(&p.task_id, &missing) {
            continue;
        }
        out.attempts += 1;
        for (cost, turns) in [(p.api_cost_usd, p.turns), (m.api_cost_usd, m.turns)] {
            if cost <= Decimal::ZERO {
                return Err(AnalysisError::NonPositiveCost {
                    task_id: p.task_id.clone(),
                });
            }
            if turns == 0 {
                return Err(AnalysisError::ZeroTurns {
                    task_id: p.task_id.clone(),
                });
            }
        }
        out.pairs.push(MatchedPair {
            task_id: p.task_id.clone(),
            partial_agent_cost: p.api_cost_usd,
            mm_cost: m.api_cost_usd,
            partial_agent_turns: p.turns,
            mm_turns: m.turns,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvgDefinition {
    #[default]
    MeanOfRatios,
    RatioOfMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadRatios {
    pub n: usize,
    pub definition: AvgDefinition,
    pub avg_cost_ratio: f64,
    pub worst_cost_ratio: f64,
    pub avg_turn_ratio: f64,
    pub worst_turn_ratio: f64,
    pub cost_mean_of_ratios: f64,
    pub cost_ratio_of_means: f64,
    pub turn_mean_of_ratios: f64,
    pub turn_ratio_of_means: f64,
}

impl OverheadRatios {
    /// Two-decimal multiplier strings: avg cost, worst cost, avg turns, worst turns.
    pub fn formatted(&self) -> [String; 4] {
        [
            self.avg_cost_ratio,
            self.worst_cost_ratio,
            self.avg_turn_ratio,
            self.worst_turn_ratio,
        ]
        .map(|x| format!("{x:.2}"))
    }
}

fn dec_f64(d: Decimal) -> f64 {
    d.to_f64().unwrap_or(f64::NAN)
}

pub fn overhead_ratios(
    pairs: &[MatchedPair],
    definition: AvgDefinition,
) -> Result<OverheadRatios, AnalysisError> {
    if pairs.is_empty() {
        return Err(AnalysisError::EmptyMatchedSet);
    }
    let n = pairs.len();
    let cost: Vec<f64> = pairs
        .iter()
        .map(|p| dec_f64(p.partial_agent_cost / p.mm_cost))
        .collect();
    let turns: Vec<f64> = pairs
        .iter()
        .map(|p| p.partial_agent_turns as f64 / p.mm_turns as f64)
        .collect();
    let max = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max);
    let cost_mor = cost.iter().sum::<f64>() / n as f64;
    let turn_mor = turns.iter().sum::<f64>() / n as f64;
    let sum_dec = |f: fn(&MatchedPair) -> Decimal| pairs.iter().map(f).sum::<Decimal>();
    let cost_rom = dec_f64(sum_dec(|p| p.partial_agent_cost) / sum_dec(|p| p.mm_cost));
    let turn_rom = pairs
        .iter()
        .map(|p| p.partial_agent_turns as f64)
        .sum::<f64>()
        / pairs.iter().map(|p| p.mm_turns as f64).sum::<f64>();
    let (avg_cost, avg_turn) = match definition {
        AvgDefinition::MeanOfRatios => (cost_mor, turn_mor),
        AvgDefinition::RatioOfMeans => (cost_rom, turn_rom),
    };
    Ok(OverheadRatios {
        n,
        definition,
        avg_cost_ratio: avg_cost,
        worst_cost_ratio: max(&cost),
        avg_turn_ratio: avg_turn,
        worst_turn_ratio: max(&turns),
        cost_mean_of_ratios: cost_mor,
        cost_ratio_of_means: cost_rom,
        turn_mean_of_ratios: turn_mor,
        turn_ratio_of_means: turn_rom,
    })
}

// ---- failure signatures ----

const SETUP_PATTERN: &str = r"\b(apt-get|apt|apk|yum|dnf)\s+install\b|\bpip3?\s+install\b|\bconda\s+install\b|\bnpm\s+(install|i)\b|\bcargo\s+install\b|\bgit\s+clone\b|\b(wget|curl)\b";

/// Derives the two timeout classes from a budget-exhausted trial's commands:
/// installation activity means setup, anything else means execution.
pub fn auto_label<'a>(
    reason: TerminalReason,
    commands: impl IntoIterator<Item = &'a str>,
) -> Option<FailureSignature> {
    if reason != TerminalReason::BudgetExhausted {
        return None;
    }
    let re = Regex::new(SETUP_PATTERN).expect("setup pattern compiles");
    Some(if commands.into_iter().any(|c| re.is_match(c)) {
        FailureSignature::TimeoutToolSetup
    } else {
        FailureSignature::TimeoutToolExecution
    })
}

/// Share of each signature over failed records. A record's own
/// `failure_label` is used when `labels` has no entry for its task.
pub fn failure_distribution(
    records: &[TrialRecord],
    labels: &BTreeMap<String, FailureSignature>,
) -> Result<BTreeMap<FailureSignature, f64>, AnalysisError> {
    let failed: Vec<&TrialRecord> = records.iter().filter(|r| !r.pass).collect();
    let mut counts: BTreeMap<FailureSignature, usize> = BTreeMap::new();
    for r in &failed {
        let label = labels
            .get(&r.task_id)
            .copied()
            .or(r.failure_label)
            .ok_or_else(|| AnalysisError::MissingLabel(r.task_id.clone()))?;
        *counts.entry(label).or_default() += 1;
    }
    let n = failed.len() as f64;
    Ok(counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect())
}

// ---- tag co-occurrence ----

/// Symmetric pair counts; `(a, b)` and `(b, a)` are both stored, `(a, a)` never.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TagTable {
    pub marginals: BTreeMap<String, usize>,
    pub pairs: BTreeMap<(String, String), usize>,
}

impl TagTable {
    pub fn get(&self, a: &str, b: &str) -> usize {
        self.pairs
            .get(&(a.to_string(), b.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tag_a,tag_b,count\n");
        for ((a, b), c) in &self.pairs {
            if a < b {
                s.push_str(&format!("{a},{b},{c}\n"));
            }
        }
        s
    }
}

pub fn tag_cooccurrence<'a>(tag_sets: impl IntoIterator<Item = &'a BTreeSet<String>>) -> TagTable {
    let mut t = TagTable::default();
    for tags in tag_sets {
        for a in tags {
            *t.marginals.entry(a.clone()).or_default() += 1;
            for b in tags {
                if a != b {
                    *t.pairs.entry((a.clone(), b.clone())).or_default() += 1;
                }
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn partition_edges() {
        let suite = set(&["a", "b", "c"]);
        let p = partition_passes(&suite, &set(&["a"]), &set(&["a"]));
        assert!(p.a_only.is_empty() && p.b_only.is_empty());
        let p = partition_passes(&suite, &set(&["a"]), &set(&["b", "c"]));
        assert!(p.both_solve.is_empty() && p.both_fail.is_empty());
    }

    #[test]
    fn single_pair_ratios() {
        let pair = MatchedPair {
            task_id: "t".into(),
            partial_agent_cost: Decimal::from(2),
            mm_cost: Decimal::from(1),
            partial_agent_turns: 4,
            mm_turns: 2,
        };
        let r = overhead_ratios(&[pair], AvgDefinition::MeanOfRatios).unwrap();
        assert_eq!(
            r.formatted(),
            ["2.00", "2.00", "2.00", "2.00"].map(String::from)
        );
        assert!(matches!(
            overhead_ratios(&[], AvgDefinition::RatioOfMeans),
            Err(AnalysisError::EmptyMatchedSet)
        ));
    }

    #[test]
    fn worst_of_two() {
        let mk = |c: i64| MatchedPair {
            task_id: "t".into(),
            partial_agent_cost: Decimal::from(c),
            mm_cost: Decimal::from(1),
            partial_agent_turns: 1,
            mm_turns: 1,
        };
        let r = overhead_ratios(&[mk(2), mk(6)], AvgDefinition::MeanOfRatios).unwrap();
        assert_eq!(r.worst_cost_ratio, 6.0);
        assert_eq!(r.avg_cost_ratio, 4.0);
    }

    #[test]
    fn tags() {
        let sets = vec![set(&["x", "y"]); 3];
        let t = tag_cooccurrence(&sets);
        assert_eq!(t.get("x", "y"), 3);
        assert_eq!(t.get("y", "x"), 3);
        assert_eq!(t.get("x", "x"), 0);
        let singles = vec![set(&["x"]), set(&["y"])];
        assert!(tag_cooccurrence(&singles).pairs.is_empty());
    }

    #[test]
    fn auto_labels() {
        assert_eq!(
            auto_label(
                TerminalReason::BudgetExhausted,
                ["pip install openai-whisper"]
            ),
            Some(FailureSignature::TimeoutToolSetup)
        );
        assert_eq!(
            auto_label(TerminalReason::BudgetExhausted, ["ffmpeg -i a.mp4 out.wav"]),
            Some(FailureSignature::TimeoutToolExecution)
        );
        assert_eq!(
            auto_label(TerminalReason::TaskComplete, ["pip install x"]),
            None
        );
    }

    #[test]
    fn inspection_patterns() {
        let p = InspectionPatterns::default();
        let video: BTreeSet<_> = [Modality::Video].into();
        let image: BTreeSet<_> = [Modality::Image].into();
        assert!(p.attempted(["ffmpeg -i clip.mp4 -vf fps=1 f_%03d.png"], &video));
        assert!(!p.attempted(["ls -la", "cat notes.txt"], &video));
        assert!(p.attempted(["tesseract slide.png out"], &image));
        assert!(!p.attempted(["tesseract slide.png out"], &video));
    }

    #[test]
    fn signature_names_roundtrip() {
        for s in FailureSignature::ALL {
            assert_eq!(s.as_str().parse::<FailureSignature>().unwrap(), s);
        }
    }
}
