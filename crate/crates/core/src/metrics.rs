//! Per-trial records and per-agent aggregates: binary and partial success,
//! list-rate API cost, token volume and agent wall time.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent_loop::{AgentConfig, TerminalReason, Trajectory};
use crate::analysis::FailureSignature;
use crate::model_backend::Usage;
use crate::verifier::Score;

/// Decimal places for reported money.
pub const MONEY_DP: u32 = 6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("incomplete suite for {agent}: missing {missing:?}, duplicated {duplicated:?}, unknown {unknown:?}")]
    IncompleteSuite {
        agent: String,
        missing: Vec<String>,
        duplicated: Vec<String>,
        unknown: Vec<String>,
    },
    #[error("no rates for model `{0}`")]
    UnknownModelRates(String),
    #[error("records mix agents: {0} and {1}")]
    MixedAgents(String, String),
    #[error("rates file {path}: {reason}")]
    Rates { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRates {
    /// USD per prompt token.
    pub input_per_token: Decimal,
    /// USD per completion token.
    pub output_per_token: Decimal,
}

/// Posted list rates keyed by model id. On disk:
///
/// ```toml
/// [models."google/gemini-3.1-pro"]
/// input_per_token = "0.000002"
/// output_per_token = "0.000012"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateTable {
    #[serde(default)]
    pub models: BTreeMap<String, ModelRates>,
}

impl RateTable {
    pub fn load(path: &Path) -> Result<RateTable, MetricsError> {
        let err = |reason: String| MetricsError::Rates {
            path: path.display().to_string(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let table: RateTable = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        for (model, r) in &table.models {
            if r.input_per_token.is_sign_negative() || r.output_per_token.is_sign_negative() {
                return Err(err(format!("negative rate for {model}")));
            }
        }
        Ok(table)
    }

    pub fn get(&self, model: &str) -> Result<&ModelRates, MetricsError> {
        self.models
            .get(model)
            .ok_or_else(|| MetricsError::UnknownModelRates(model.to_string()))
    }

    pub fn cost(&self, model: &str, usage: &Usage) -> Result<Decimal, MetricsError> {
        Ok(uniform_cost(usage, self.get(model)?))
    }
}

/// `input·r_in + output·r_out`. Cached prompt tokens are already inside
/// `input_tokens` and pay the full input rate.
pub fn uniform_cost(usage: &Usage, rates: &ModelRates) -> Decimal {
    (Decimal::from(usage.input_tokens) * rates.input_per_token
        + Decimal::from(usage.output_tokens) * rates.output_per_token)
        .normalize()
}

pub fn round_money(d: Decimal) -> Decimal {
    d.round_dp_with_strategy(MONEY_DP, RoundingStrategy::MidpointNearestEven)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub task_id: String,
    pub agent: AgentConfig,
    pub partial: f64,
    pub pass: bool,
    pub threshold: f64,
    pub usage_total: Usage,
    #[serde(with = "rust_decimal::serde::str")]
    pub api_cost_usd: Decimal,
    pub agent_wall_seconds: f64,
    pub turns: u32,
    pub terminal_reason: TerminalReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_label: Option<FailureSignature>,
    /// Evaluator or setup failure text, when there was one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn from_trial(
        trajectory: &Trajectory,
        score: &Score,
        rates: &RateTable,
    ) -> Result<TrialRecord, MetricsError> {
        let usage = trajectory.total_usage();
        Ok(TrialRecord {
            task_id: trajectory.task_id.clone(),
            agent: trajectory.agent.clone(),
            partial: score.partial,
            pass: score.pass,
            threshold: score.threshold,
            usage_total: usage,
            api_cost_usd: rates.cost(&trajectory.agent.model, &usage)?,
            agent_wall_seconds: trajectory.agent_wall_seconds,
            turns: trajectory.turns.len() as u32,
            terminal_reason: trajectory.terminal_reason,
            failure_label: None,
            error: score.reason(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub agent: AgentConfig,
    pub n_tasks: usize,
    pub binary_rate: f64,
    pub partial_rate: f64,
    #[serde(with = "rust_decimal::serde::str")]
    pub mean_cost_usd: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub total_cost_usd: Decimal,
    pub mean_tokens_thousands: f64,
    pub mean_wall_seconds: f64,
}

pub const SUMMARY_CSV_HEADER: &str =
    "agent,harness,model,n_tasks,binary,partial,mean_cost_usd,mean_tokens_k,mean_wall_s";

impl SuiteSummary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{:.3},{},{:.1},{:.1}",
            self.agent.label(),
            self.agent.harness,
            self.agent.model,
            self.n_tasks,
            self.binary_rate,
            self.partial_rate,
            self.mean_cost_usd,
            self.mean_tokens_thousands,
            self.mean_wall_seconds
        )
    }
}

/// Checks one-record-per-task coverage and returns the records in task order.
pub fn check_coverage<'a, S: AsRef<str>>(
    records: &'a [TrialRecord],
    suite: &[S],
) -> Result<Vec<&'a TrialRecord>, MetricsError> {
    let agent = records.first().map(|r| r.agent.label()).unwrap_or_default();
    if let Some(other) = records.iter().find(|r| r.agent.label() != agent) {
        return Err(MetricsError::MixedAgents(agent, other.agent.label()));
    }
    let expected: BTreeSet<&str> = suite.iter().map(AsRef::as_ref).collect();
    let mut by_task: BTreeMap<&str, Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        by_task.entry(r.task_id.as_str()).or_default().push(r);
    }
    let missing: Vec<String> = expected
        .iter()
        .filter(|t| !by_task.contains_key(*t))
        .map(|t| t.to_string())
        .collect();
    let duplicated: Vec<String> = by_task
        .iter()
        .filter(|(_, v)| v.len() > 1)
        .map(|(t, _)| t.to_string())
        .collect();
    let unknown: Vec<String> = by_task
        .keys()
        .filter(|t| !expected.contains(*t))
        .map(|t| t.to_string())
        .collect();
    if !missing.is_empty() || !duplicated.is_empty() || !unknown.is_empty() || expected.is_empty() {
        return Err(MetricsError::IncompleteSuite {
            agent,
            missing,
            duplicated,
            unknown,
        });
    }
    Ok(by_task.into_values().map(|v| v[0]).collect())
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// (1/N)·Σ 𝟙[sᵢ ≥ τᵢ].
pub fn binary_rate<S: AsRef<str>>(
    records: &[TrialRecord],
    suite: &[S],
) -> Result<f64, MetricsError> {
    let rs = check_coverage(records, suite)?;
    Ok(rs.iter().filter(|r| r.pass).count() as f64 / rs.len() as f64)
}

/// (1/N)·Σ sᵢ.
pub fn partial_rate<S: AsRef<str>>(
    records: &[TrialRecord],
    suite: &[S],
) -> Result<f64, MetricsError> {
    let rs = check_coverage(records, suite)?;
    Ok(mean(rs.iter().map(|r| r.partial), rs.len()))
}

/// Aggregates for one agent over the full suite.
pub fn summarize<S: AsRef<str>>(
    records: &[TrialRecord],
    suite: &[S],
) -> Result<SuiteSummary, MetricsError> {
    let rs = check_coverage(records, suite)?;
    let n = rs.len();
    let total_cost: Decimal = rs.iter().map(|r| r.api_cost_usd).sum();
    Ok(SuiteSummary {
        agent: rs[0].agent.clone(),
        n_tasks: n,
        binary_rate: rs.iter().filter(|r| r.pass).count() as f64 / n as f64,
        partial_rate: mean(rs.iter().map(|r| r.partial), n),
        mean_cost_usd: round_money(total_cost / Decimal::from(n)),
        total_cost_usd: total_cost.normalize(),
        mean_tokens_thousands: mean(rs.iter().map(|r| r.usage_total.total_tokens() as f64), n)
            / 1000.0,
        mean_wall_seconds: mean(rs.iter().map(|r| r.agent_wall_seconds), n),
    })
}

/// One summary per agent label, in label order.
pub fn summarize_all<S: AsRef<str>>(
    records: &[TrialRecord],
    suite: &[S],
) -> Result<Vec<SuiteSummary>, MetricsError> {
    let mut groups: BTreeMap<String, Vec<TrialRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.agent.label()).or_default().push(r.clone());
    }
    groups.values().map(|g| summarize(g, suite)).collect()
}
