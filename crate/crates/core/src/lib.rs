//! Evaluation framework for terminal agents working on multimedia files.
//!
//! Tasks are loaded from self-contained directories ([`task_model`]), agents
//! run inside isolated sandboxes ([`sandbox`]) against a pluggable model
//! backend ([`model_backend`]) with a per-trial tool schema ([`routing`]),
//! and the final workspace is scored by the task's evaluator ([`verifier`]).
//! [`metrics`] and [`analysis`] aggregate sealed results; [`validation`]
//! certifies new tasks.

pub mod agent_loop;
pub mod analysis;
pub mod digest;
pub mod metrics;
pub mod model_backend;
pub mod routing;
pub mod sandbox;
pub mod task_model;
pub mod validation;
pub mod verifier;

pub use agent_loop::{run_trial, AgentConfig, TerminalReason, Trajectory, TrialOutcome};
pub use metrics::{SuiteSummary, TrialRecord};
pub use routing::{HarnessVariant, Modality, ToolName, ToolSchema};
pub use task_model::{load_task, TaskSpec};
