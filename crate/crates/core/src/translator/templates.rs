//! Feedback templates for the rule-based backend.
//!
//! ```text
//! <key> <STATUS> | <text>
//! TRANSLATION_ERROR | <text>
//! ```
//!
//! The key is `ACTION.param` (first parameter of the command), `ACTION`,
//! `OUT_OF_SCOPE` or `*`; the most specific key present wins. Placeholders in
//! braces are filled from the command parameters, the execution payload and
//! `{action}`, `{param}`, `{value}`, `{status}`, `{detail}`, `{reason}`.
//! Numbers are rounded to two decimals and lose a trailing `.0`. `*`
//! entries for SUCCESS, REJECTED and FAILED plus `TRANSLATION_ERROR` are
//! mandatory.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{FeedbackMessage, FeedbackSource};
use crate::dsl::{format_number, ExtractedCommand, Scalar};
use crate::interface::{ExecStatus, ExecutionReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TemplateError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: duplicate template for {key}")]
    Duplicate { line: usize, key: String },
    #[error("missing mandatory template {0}")]
    Missing(String),
}

const TRANSLATION_ERROR: &str = "TRANSLATION_ERROR";

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackTemplates {
    by_key: HashMap<(String, ExecStatus), String>,
    translation_error: String,
}

fn status_token(s: ExecStatus) -> &'static str {
    match s {
        ExecStatus::Success => "SUCCESS",
        ExecStatus::Rejected => "REJECTED",
        ExecStatus::Failed => "FAILED",
    }
}

impl FeedbackTemplates {
    pub fn parse(text: &str) -> Result<FeedbackTemplates, TemplateError> {
        let mut by_key = HashMap::new();
        let mut translation_error = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let syntax = |reason: &str| TemplateError::Syntax { line, reason: reason.into() };
            let (head, body) = trimmed.split_once('|').ok_or_else(|| syntax("expected `<key> <STATUS> | <text>`"))?;
            let body = body.trim().to_string();
            if body.is_empty() {
                return Err(syntax("empty template text"));
            }
            let head: Vec<&str> = head.split_whitespace().collect();
            match head.as_slice() {
                [TRANSLATION_ERROR] => {
                    if translation_error.replace(body).is_some() {
                        return Err(TemplateError::Duplicate { line, key: TRANSLATION_ERROR.into() });
                    }
                }
                [key, status] => {
                    let status = match *status {
                        "SUCCESS" => ExecStatus::Success,
                        "REJECTED" => ExecStatus::Rejected,
                        "FAILED" => ExecStatus::Failed,
                        _ => return Err(syntax("status must be SUCCESS, REJECTED or FAILED")),
                    };
                    if by_key.insert((key.to_string(), status), body).is_some() {
                        return Err(TemplateError::Duplicate {
                            line,
                            key: format!("{key} {}", status_token(status)),
                        });
                    }
                }
                _ => return Err(syntax("expected `<key> <STATUS>` before `|`")),
            }
        }
        for status in [ExecStatus::Success, ExecStatus::Rejected, ExecStatus::Failed] {
            if !by_key.contains_key(&("*".to_string(), status)) {
                return Err(TemplateError::Missing(format!("* {}", status_token(status))));
            }
        }
        let translation_error = translation_error.ok_or_else(|| TemplateError::Missing(TRANSLATION_ERROR.into()))?;
        Ok(FeedbackTemplates { by_key, translation_error })
    }

    fn lookup(&self, command: &ExtractedCommand, status: ExecStatus) -> &str {
        let mut keys = Vec::new();
        match &command.action {
            None => keys.push("OUT_OF_SCOPE".to_string()),
            Some(action) => {
                if let Some(p) = command.parameters.iter().next() {
                    keys.push(format!("{action}.{}", p.name));
                }
                keys.push(action.to_string());
            }
        }
        keys.push("*".into());
        keys.iter()
            .find_map(|k| self.by_key.get(&(k.clone(), status)))
            .expect("`*` templates exist for every status")
    }

    /// Stage-two text for a finished execution.
    pub fn render(&self, command: &ExtractedCommand, report: &ExecutionReport) -> FeedbackMessage {
        let mut vars: BTreeMap<String, String> = BTreeMap::new();
        for (k, v) in &report.payload {
            vars.insert(k.clone(), display_scalar(v));
        }
        for p in &command.parameters {
            vars.insert(p.name.clone(), display_scalar(&p.value));
        }
        if let Some(p) = command.parameters.iter().next() {
            vars.insert("param".into(), p.name.clone());
            vars.insert("value".into(), display_scalar(&p.value));
        }
        let action = command.action.as_ref().map_or("OUT_OF_SCOPE".to_string(), ToString::to_string);
        vars.insert("action".into(), action);
        vars.insert("status".into(), status_token(report.status).to_lowercase());
        vars.insert("detail".into(), report.validation.detail.clone());
        let reason = match (&report.failure, report.validation.reason) {
            (Some(f), _) => f.to_string(),
            (None, Some(code)) => format!("{code}: {}", report.validation.detail),
            (None, None) => String::new(),
        };
        vars.insert("reason".into(), reason);

        FeedbackMessage {
            text: fill(self.lookup(command, report.status), &vars),
            command: Some(command.to_dsl()),
            status: Some(report.status),
            source: FeedbackSource::Template,
        }
    }

    /// Apology for an instruction that could not be carried through, such
    /// as a failed translation or an unreachable simulation.
    pub fn apology(&self, reason: &str) -> FeedbackMessage {
        let vars = BTreeMap::from([("reason".to_string(), reason.to_string())]);
        FeedbackMessage {
            text: fill(&self.translation_error, &vars),
            command: None,
            status: None,
            source: FeedbackSource::Fallback,
        }
    }
}

fn display_scalar(v: &Scalar) -> String {
    match v {
        Scalar::Number(n) => {
            let s = format_number((n * 100.0).round() / 100.0);
            s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
        }
        Scalar::Text(t) => t.clone(),
    }
}

fn fill(template: &str, vars: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let key = &after[..close];
                out.push_str(vars.get(key).map_or("unknown", String::as_str));
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets;
    use crate::dsl::{Category, ParameterSet};
    use crate::interface::{ReasonCode, ValidationResult, Verdict};
    use crate::sim::{Capability, CapabilityError, Payload};
    use crate::translator::TranslationError;

    fn templates() -> FeedbackTemplates {
        FeedbackTemplates::parse(assets::TEMPLATES).unwrap()
    }

    fn report(status: ExecStatus, payload: Payload, failure: Option<CapabilityError>) -> ExecutionReport {
        ExecutionReport {
            status,
            validation: ValidationResult { verdict: Verdict::Accepted, reason: None, detail: String::new() },
            capability: Some(Capability::SetParam),
            payload,
            failure,
            exec_latency_ms: 0.1,
        }
    }

    #[test]
    fn set_param_success() {
        let cmd = ExtractedCommand::new(Category::Config, "SET_PARAM", ParameterSet::new().with("max_vel", 90.0));
        let fb = templates().render(&cmd, &report(ExecStatus::Success, Payload::new(), None));
        assert_eq!(fb.text, "Maximum speed set to 90 km/h.");
        assert_eq!(fb.status, Some(ExecStatus::Success));
        assert_eq!(fb.command.as_deref(), Some(cmd.to_dsl().as_str()));
    }

    #[test]
    fn payload_injection() {
        let cmd = ExtractedCommand::new(Category::Info, "GET_SPEED_LIMIT", ParameterSet::new());
        let payload = Payload::from([("speed_limit_kmh".to_string(), Scalar::Number(50.0))]);
        let fb = templates().render(&cmd, &report(ExecStatus::Success, payload, None));
        assert!(fb.text.contains("50"), "{}", fb.text);
        assert!(!fb.text.contains("unknown"));
    }

    #[test]
    fn rejection_and_failure_carry_reason() {
        let cmd = ExtractedCommand::new(Category::Config, "SET_PARAM", ParameterSet::new().with("max_vel", 900.0));
        let mut r = report(ExecStatus::Rejected, Payload::new(), None);
        r.validation = ValidationResult {
            verdict: Verdict::Rejected,
            reason: Some(ReasonCode::OutOfBounds),
            detail: "max_vel must be between 5 and 130 km/h, got 900".into(),
        };
        let fb = templates().render(&cmd, &r);
        assert!(fb.text.contains("130"), "{}", fb.text);

        let cmd = ExtractedCommand::new(Category::Coop, "TURN_AT_NEXT_INTERSECTION", ParameterSet::new().with("direction", "right"));
        let failure = CapabilityError::PreconditionFailed("no right turn at the next intersection (x2)".into());
        let fb = templates().render(&cmd, &report(ExecStatus::Failed, Payload::new(), Some(failure)));
        assert!(fb.text.contains("no right turn"), "{}", fb.text);
    }

    #[test]
    fn out_of_scope_has_own_template() {
        let mut r = report(ExecStatus::Rejected, Payload::new(), None);
        r.validation.reason = Some(ReasonCode::OutOfScopeCommand);
        let fb = templates().render(&ExtractedCommand::out_of_scope(), &r);
        assert!(fb.text.starts_with("Sorry"), "{}", fb.text);
    }

    #[test]
    fn translation_error_text() {
        let fb = templates().apology(&TranslationError::BackendUnavailable("timeout".into()).to_string());
        assert!(fb.text.contains("timeout"));
        assert_eq!(fb.source, FeedbackSource::Fallback);
        assert!(fb.status.is_none());
    }

    #[test]
    fn parse_errors() {
        let minimal = "* SUCCESS | ok\n* REJECTED | no\n* FAILED | fail\nTRANSLATION_ERROR | err\n";
        assert!(FeedbackTemplates::parse(minimal).is_ok());
        assert!(matches!(
            FeedbackTemplates::parse("* SUCCESS | ok\n"),
            Err(TemplateError::Missing(_))
        ));
        assert!(matches!(
            FeedbackTemplates::parse(&format!("{minimal}* FAILED | again\n")),
            Err(TemplateError::Duplicate { line: 5, .. })
        ));
        assert!(matches!(FeedbackTemplates::parse("* DONE | x\n"), Err(TemplateError::Syntax { line: 1, .. })));
    }

    #[test]
    fn fill_handles_unknown_and_unclosed() {
        let vars = BTreeMap::from([("a".to_string(), "1".to_string())]);
        assert_eq!(fill("{a} {b} {c", &vars), "1 unknown {c");
    }
}
