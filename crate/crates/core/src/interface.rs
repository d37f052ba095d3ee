//! Validation and interface node.
//!
//! Admits only registry-listed actions whose parameters are in bounds, maps
//! them onto simulator capabilities and reports the definitive outcome.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dsl::{ExtractedCommand, Scalar};
use crate::registry::{ActionRegistry, ParamKind};
use crate::sim::{Capability, CapabilityError, Payload, SimHandle, SimUnavailable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReasonCode {
    UnknownAction,
    CategoryMismatch,
    UnknownParam,
    OutOfBounds,
    MissingParam,
    OutOfScopeCommand,
}

impl ReasonCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasonCode::UnknownAction => "UNKNOWN_ACTION",
            ReasonCode::CategoryMismatch => "CATEGORY_MISMATCH",
            ReasonCode::UnknownParam => "UNKNOWN_PARAM",
            ReasonCode::OutOfBounds => "OUT_OF_BOUNDS",
            ReasonCode::MissingParam => "MISSING_PARAM",
            ReasonCode::OutOfScopeCommand => "OUT_OF_SCOPE_COMMAND",
        }
    }
}

impl fmt::Display for ReasonCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<ReasonCode>,
    pub detail: String,
}

impl ValidationResult {
    fn accepted() -> Self {
        ValidationResult {
            verdict: Verdict::Accepted,
            reason: None,
            detail: String::new(),
        }
    }

    fn rejected(reason: ReasonCode, detail: impl Into<String>) -> Self {
        ValidationResult {
            verdict: Verdict::Rejected,
            reason: Some(reason),
            detail: detail.into(),
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.verdict == Verdict::Accepted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecStatus {
    Success,
    Rejected,
    Failed,
}

/// Definitive outcome of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub status: ExecStatus,
    pub validation: ValidationResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability: Option<Capability>,
    #[serde(default)]
    pub payload: Payload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<CapabilityError>,
    /// Dispatch to acknowledgment, wall clock [ms]; zero when rejected.
    pub exec_latency_ms: f64,
}

/// Checks a command against the registry. Rejection is a value, not an error.
pub fn validate(cmd: &ExtractedCommand, registry: &ActionRegistry) -> ValidationResult {
    use ReasonCode::*;

    let Some(action) = &cmd.action else {
        return ValidationResult::rejected(OutOfScopeCommand, "the request is outside what the vehicle can do");
    };
    if cmd.is_out_of_scope() {
        return ValidationResult::rejected(OutOfScopeCommand, "the request is outside what the vehicle can do");
    }
    let Some(spec) = registry.get(action) else {
        return ValidationResult::rejected(UnknownAction, format!("{action} is not an allowed action"));
    };
    if spec.category != cmd.category {
        return ValidationResult::rejected(
            CategoryMismatch,
            format!("{action} belongs to {}, not {}", spec.category, cmd.category),
        );
    }
    if let Some(p) = cmd.parameters.iter().find(|p| spec.param(&p.name).is_none()) {
        return ValidationResult::rejected(UnknownParam, format!("{action} has no parameter {}", p.name));
    }
    if spec.any_of {
        if cmd.parameters.is_empty() {
            let names: Vec<_> = spec.params.iter().map(|p| p.name.as_str()).collect();
            return ValidationResult::rejected(
                MissingParam,
                format!("{action} needs at least one of {}", names.join(", ")),
            );
        }
    } else if let Some(missing) = spec.params.iter().find(|p| cmd.parameters.get(&p.name).is_none()) {
        return ValidationResult::rejected(MissingParam, format!("{action} needs parameter {}", missing.name));
    }
    for p in &cmd.parameters {
        let ps = spec.param(&p.name).expect("checked above");
        match (&ps.kind, &p.value) {
            (ParamKind::Number { unit, min, max }, Scalar::Number(v)) => {
                if !(v >= min && v <= max) {
                    return ValidationResult::rejected(
                        OutOfBounds,
                        format!("{} must be between {min} and {max} {unit}, got {v}", p.name),
                    );
                }
            }
            (ParamKind::Number { .. }, Scalar::Text(t)) => {
                return ValidationResult::rejected(OutOfBounds, format!("{} must be a number, got {t:?}", p.name));
            }
            (ParamKind::Enum { values }, Scalar::Text(t)) if values.iter().any(|v| v == t) => {}
            (ParamKind::Enum { values }, value) => {
                return ValidationResult::rejected(
                    OutOfBounds,
                    format!("{} must be one of {}, got {value}", p.name, values.join("|")),
                );
            }
            (ParamKind::String, Scalar::Text(_)) => {}
            (ParamKind::String, Scalar::Number(n)) => {
                return ValidationResult::rejected(OutOfBounds, format!("{} must be text, got {n}", p.name));
            }
        }
    }
    ValidationResult::accepted()
}

/// Thread-safe facade over the registry and the simulation kernel.
#[derive(Clone)]
pub struct InterfaceNode {
    registry: Arc<ActionRegistry>,
    sim: SimHandle,
}

impl InterfaceNode {
    pub fn new(registry: Arc<ActionRegistry>, sim: SimHandle) -> Self {
        InterfaceNode { registry, sim }
    }

    pub fn registry(&self) -> &Arc<ActionRegistry> {
        &self.registry
    }

    pub fn sim(&self) -> &SimHandle {
        &self.sim
    }

    pub fn validate(&self, cmd: &ExtractedCommand) -> ValidationResult {
        validate(cmd, &self.registry)
    }

    /// Validates and, if accepted, executes a command on the simulation.
    /// Rejected commands never reach the simulation.
    pub fn execute(&self, cmd: &ExtractedCommand) -> Result<ExecutionReport, SimUnavailable> {
        let validation = self.validate(cmd);
        if !validation.is_accepted() {
            return Ok(ExecutionReport {
                status: ExecStatus::Rejected,
                validation,
                capability: None,
                payload: Payload::new(),
                failure: None,
                exec_latency_ms: 0.0,
            });
        }
        let action = cmd.action.as_ref().expect("accepted commands carry an action");
        let capability = self.registry.get(action).expect("accepted action is registered").capability;

        let started = Instant::now();
        let outcome = self.sim.apply(capability, cmd.parameters.clone())?;
        let exec_latency_ms = started.elapsed().as_secs_f64() * 1e3;

        let (status, payload, failure) = match outcome {
            Ok(payload) => (ExecStatus::Success, payload, None),
            Err(e) => (ExecStatus::Failed, Payload::new(), Some(e)),
        };
        tracing::debug!(%action, ?status, exec_latency_ms, "executed");
        Ok(ExecutionReport {
            status,
            validation,
            capability: Some(capability),
            payload,
            failure,
            exec_latency_ms,
        })
    }
}
