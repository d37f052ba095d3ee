//! Offline rule-based backend.
//!
//! The rule table is an ordered list of blocks:
//!
//! ```text
//! rule <CATEGORY> [<ACTION>]
//!   any <phrase>|<phrase>|...
//!   none <phrase>|<phrase>|...
//!   number <param> speed|distance|accel
//!   set <param> <value>
//!   pick <param> <phrase>[=<value>]|...
//! ```
//!
//! Every `any` line must match at least one phrase, every `none` line must
//! match none, and every `number`/`pick` line must find something. The first
//! rule that holds produces the command. Matching runs on [`normalize`]d text
//! and phrases match whole words only. `#` starts a comment line.

use std::sync::Arc;

use thiserror::Error;

use super::templates::FeedbackTemplates;
use super::{Backend, FeedbackMessage, Instruction, PromptBundle, TranslationError};
use crate::assets;
use crate::dsl::{ActionId, Category, ExtractedCommand, ParameterSet, Scalar};
use crate::interface::ExecutionReport;
use crate::registry::{ActionRegistry, ParamKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuleError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("rule at line {line}: {reason}")]
    Registry { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    /// Registry unit km/h.
    Speed,
    /// Registry unit m.
    Distance,
    /// Registry unit m/s².
    Accel,
}

#[derive(Debug, Clone, PartialEq)]
enum Condition {
    Any(Vec<String>),
    None(Vec<String>),
    Number { param: String, quantity: Quantity },
    Set { param: String, value: Scalar },
    Pick { param: String, options: Vec<(String, String)> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub line: usize,
    pub category: Category,
    pub action: Option<ActionId>,
    conditions: Vec<Condition>,
}

impl Rule {
    fn apply(&self, text: &str) -> Option<ExtractedCommand> {
        let mut params = ParameterSet::new();
        for cond in &self.conditions {
            match cond {
                Condition::Any(phrases) => {
                    if !phrases.iter().any(|p| contains_phrase(text, p)) {
                        return None;
                    }
                }
                Condition::None(phrases) => {
                    if phrases.iter().any(|p| contains_phrase(text, p)) {
                        return None;
                    }
                }
                Condition::Number { param, quantity } => {
                    params.push(param.clone(), first_quantity(text, *quantity)?);
                }
                Condition::Set { param, value } => {
                    params.push(param.clone(), value.clone());
                }
                Condition::Pick { param, options } => {
                    let (_, value) = options.iter().find(|(phrase, _)| contains_phrase(text, phrase))?;
                    params.push(param.clone(), value.as_str());
                }
            }
        }
        Some(match &self.action {
            None => ExtractedCommand::out_of_scope(),
            Some(action) => ExtractedCommand {
                category: self.category,
                action: Some(action.clone()),
                parameters: params,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RuleTable {
    rules: Vec<Rule>,
}

impl RuleTable {
    pub fn parse(text: &str) -> Result<RuleTable, RuleError> {
        let mut rules: Vec<Rule> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let syntax = |reason: &str| RuleError::Syntax { line, reason: reason.to_string() };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut words = trimmed.splitn(2, ' ');
            let keyword = words.next().unwrap_or_default();
            let rest = words.next().unwrap_or("").trim();

            if !raw.starts_with(' ') {
                if keyword != "rule" {
                    return Err(syntax("expected `rule <CATEGORY> [<ACTION>]`"));
                }
                let mut parts = rest.split_whitespace();
                let category = parts
                    .next()
                    .and_then(Category::from_token)
                    .ok_or_else(|| syntax("unknown category token"))?;
                let action = parts
                    .next()
                    .map(|a| ActionId::new(a).map_err(|e| syntax(&e.to_string())))
                    .transpose()?;
                if parts.next().is_some() {
                    return Err(syntax("trailing tokens after action"));
                }
                if (category == Category::OutOfScope) != action.is_none() {
                    return Err(syntax("OUT_OF_SCOPE rules take no action; all others need one"));
                }
                rules.push(Rule { line, category, action, conditions: Vec::new() });
                continue;
            }

            let rule = rules.last_mut().ok_or_else(|| syntax("condition before any rule"))?;
            let phrases = |s: &str| -> Result<Vec<String>, RuleError> {
                let list: Vec<String> = s.split('|').map(normalize).collect();
                if list.iter().any(String::is_empty) {
                    return Err(syntax("empty phrase"));
                }
                Ok(list)
            };
            let cond = match keyword {
                "any" => Condition::Any(phrases(rest)?),
                "none" => Condition::None(phrases(rest)?),
                "number" => {
                    let (param, q) = rest.split_once(' ').ok_or_else(|| syntax("expected `number <param> <quantity>`"))?;
                    let quantity = match q.trim() {
                        "speed" => Quantity::Speed,
                        "distance" => Quantity::Distance,
                        "accel" => Quantity::Accel,
                        _ => return Err(syntax("quantity must be speed, distance or accel")),
                    };
                    Condition::Number { param: param.to_string(), quantity }
                }
                "set" => {
                    let (param, v) = rest.split_once(' ').ok_or_else(|| syntax("expected `set <param> <value>`"))?;
                    let v = v.trim();
                    let value = match v.parse::<f64>() {
                        Ok(n) if n.is_finite() => Scalar::Number(n),
                        _ => Scalar::Text(v.to_string()),
                    };
                    Condition::Set { param: param.to_string(), value }
                }
                "pick" => {
                    let (param, opts) = rest.split_once(' ').ok_or_else(|| syntax("expected `pick <param> <options>`"))?;
                    let options = opts
                        .split('|')
                        .map(|o| match o.split_once('=') {
                            Some((phrase, value)) => (normalize(phrase), value.trim().to_string()),
                            None => (normalize(o), o.trim().to_string()),
                        })
                        .collect::<Vec<_>>();
                    if options.iter().any(|(p, v)| p.is_empty() || v.is_empty()) {
                        return Err(syntax("empty pick option"));
                    }
                    Condition::Pick { param: param.to_string(), options }
                }
                _ => return Err(syntax("unknown condition keyword")),
            };
            if rule.action.is_none() {
                return Err(syntax("OUT_OF_SCOPE rules take no conditions"));
            }
            rule.conditions.push(cond);
        }
        match rules.last() {
            Some(r) if r.action.is_none() && r.conditions.is_empty() => Ok(RuleTable { rules }),
            _ => Err(RuleError::Syntax {
                line: text.lines().count(),
                reason: "the table must end with a bare `rule OUT_OF_SCOPE` catch-all".into(),
            }),
        }
    }

    /// Every rule names a registered action of the right category and only
    /// that action's parameters, with constant values that the registry allows.
    pub fn check_against(&self, registry: &ActionRegistry) -> Result<(), RuleError> {
        for rule in &self.rules {
            let err = |reason: String| RuleError::Registry { line: rule.line, reason };
            let Some(action) = &rule.action else { continue };
            let spec = registry.get(action).ok_or_else(|| err(format!("{action} is not registered")))?;
            if spec.category != rule.category {
                return Err(err(format!("{action} belongs to {}", spec.category)));
            }
            for cond in &rule.conditions {
                let (param, allowed) = match cond {
                    Condition::Any(_) | Condition::None(_) => continue,
                    Condition::Number { param, .. } => (param, None),
                    Condition::Set { param, value } => (param, Some(vec![value.clone()])),
                    Condition::Pick { param, options } => {
                        (param, Some(options.iter().map(|(_, v)| Scalar::Text(v.clone())).collect()))
                    }
                };
                let ps = spec.param(param).ok_or_else(|| err(format!("{action} has no parameter {param}")))?;
                for v in allowed.into_iter().flatten() {
                    let ok = match (&ps.kind, &v) {
                        (ParamKind::Number { min, max, .. }, Scalar::Number(n)) => n >= min && n <= max,
                        (ParamKind::Enum { values }, Scalar::Text(t)) => values.contains(t),
                        (ParamKind::String, Scalar::Text(_)) => true,
                        _ => false,
                    };
                    if !ok {
                        return Err(err(format!("value {v} not allowed for {param}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn translate(&self, text: &str) -> ExtractedCommand {
        let text = normalize(text);
        self.rules
            .iter()
            .find_map(|r| r.apply(&text))
            .unwrap_or_else(ExtractedCommand::out_of_scope)
    }
}

const UNIT_ALIASES: &[(&str, &str)] = &[
    ("m/s²", " mps2 "),
    ("m/s^2", " mps2 "),
    ("m/s2", " mps2 "),
    ("meters per second squared", " mps2 "),
    ("metres per second squared", " mps2 "),
    ("km/h", " kmh "),
    ("kilometers per hour", " kmh "),
    ("kilometres per hour", " kmh "),
    ("kph", " kmh "),
    ("miles per hour", " mph "),
    ("m/s", " mps "),
    ("meters per second", " mps "),
    ("metres per second", " mps "),
];

/// Lower-cases, folds unit spellings to single tokens and replaces
/// punctuation with spaces. A `.` survives only between two digits.
pub fn normalize(text: &str) -> String {
    let mut s = text.to_lowercase();
    for (from, to) in UNIT_ALIASES {
        s = s.replace(from, to);
    }
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    for (i, &c) in chars.iter().enumerate() {
        let keep_dot = c == '.'
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if c.is_alphanumeric() || keep_dot {
            out.push(c);
        } else {
            out.push(' ');
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn contains_phrase(text: &str, phrase: &str) -> bool {
    let mut start = 0;
    while let Some(pos) = text[start..].find(phrase) {
        let at = start + pos;
        let end = at + phrase.len();
        let left_ok = at == 0 || text.as_bytes()[at - 1] == b' ';
        let right_ok = end == text.len() || text.as_bytes()[end] == b' ';
        if left_ok && right_ok {
            return true;
        }
        start = at + 1;
        while !text.is_char_boundary(start) {
            start += 1;
        }
    }
    false
}

/// First number in normalized text, converted to the registry unit of
/// `quantity` from the unit token that follows it (if any).
fn first_quantity(text: &str, quantity: Quantity) -> Option<f64> {
    let words: Vec<&str> = text.split(' ').collect();
    let (i, n) = words
        .iter()
        .enumerate()
        .find_map(|(i, w)| w.parse::<f64>().ok().filter(|n| n.is_finite()).map(|n| (i, n)))?;
    let unit = words.get(i + 1).copied().unwrap_or("");
    let factor = match (quantity, unit) {
        (Quantity::Speed, "mph") => 1.609_344,
        (Quantity::Speed, "mps") => 3.6,
        (Quantity::Distance, "km" | "kilometers" | "kilometres") => 1000.0,
        (Quantity::Distance, "ft" | "feet") => 0.3048,
        (Quantity::Distance, "yards" | "yd") => 0.9144,
        _ => 1.0,
    };
    Some(((n * factor) * 100.0).round() / 100.0)
}

/// Deterministic backend: rule table for stage one, templates for stage two.
#[derive(Debug, Clone)]
pub struct RuleBackend {
    table: Arc<RuleTable>,
    templates: Arc<FeedbackTemplates>,
}

impl RuleBackend {
    pub fn new(table: RuleTable, templates: FeedbackTemplates) -> Self {
        RuleBackend {
            table: Arc::new(table),
            templates: Arc::new(templates),
        }
    }

    /// Backend built from the rule and template files in `assets/`.
    pub fn shipped() -> Self {
        RuleBackend::new(
            RuleTable::parse(assets::RULES).expect("shipped rule table parses"),
            FeedbackTemplates::parse(assets::TEMPLATES).expect("shipped templates parse"),
        )
    }

    pub fn table(&self) -> &RuleTable {
        &self.table
    }

    pub fn templates(&self) -> &FeedbackTemplates {
        &self.templates
    }
}

impl Backend for RuleBackend {
    fn name(&self) -> &str {
        "rule"
    }

    fn translate(&self, instruction: &Instruction, _bundle: &PromptBundle) -> Result<ExtractedCommand, TranslationError> {
        Ok(self.table.translate(&instruction.text))
    }

    fn feedback(
        &self,
        _instruction: &Instruction,
        command: &ExtractedCommand,
        report: &ExecutionReport,
    ) -> Result<FeedbackMessage, TranslationError> {
        Ok(self.templates.render(command, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> RuleTable {
        RuleTable::parse(assets::RULES).unwrap()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize("Set it to 2.5 m/s²!"), "set it to 2.5 mps2");
        assert_eq!(normalize("It's 90 km/h."), "it s 90 kmh");
        assert_eq!(normalize("go 25 m/s."), "go 25 mps");
        assert_eq!(normalize("Wait... what?"), "wait what");
    }

    #[test]
    fn phrases_match_whole_words() {
        assert!(contains_phrase("the light is green", "light"));
        assert!(!contains_phrase("a lightweight car", "light"));
        assert!(contains_phrase("turn up the ac", "turn up"));
        assert!(!contains_phrase("return", "turn"));
    }

    #[test]
    fn unit_conversion() {
        assert_eq!(first_quantity("limit to 25 mps", Quantity::Speed), Some(90.0));
        assert_eq!(first_quantity("never above 40 mph", Quantity::Speed), Some(64.37));
        assert_eq!(first_quantity("90 kmh", Quantity::Speed), Some(90.0));
        assert_eq!(first_quantity("keep 100 feet", Quantity::Distance), Some(30.48));
        assert_eq!(first_quantity("no number", Quantity::Speed), None);
    }

    #[test]
    fn shipped_table_is_consistent_with_registry() {
        let reg = ActionRegistry::parse(assets::DEFAULT_REGISTRY).unwrap();
        table().check_against(&reg).unwrap();
    }

    #[test]
    fn reference_translations() {
        let t = table();
        assert_eq!(
            t.translate("Set the maximum speed to 90 kilometers per hour"),
            ExtractedCommand::new(Category::Config, "SET_PARAM", ParameterSet::new().with("max_vel", 90.0))
        );
        assert_eq!(
            t.translate("What is the current speed limit?"),
            ExtractedCommand::new(Category::Info, "GET_SPEED_LIMIT", ParameterSet::new())
        );
        assert_eq!(t.translate("Tell me a joke"), ExtractedCommand::out_of_scope());
        assert_eq!(t.translate(""), ExtractedCommand::out_of_scope());
    }

    #[test]
    fn corpus_exact_match() {
        let t = table();
        let misses: Vec<String> = crate::corpus::parse_corpus(assets::CORPUS)
            .unwrap()
            .into_iter()
            .filter(|e| t.translate(&e.instruction) != e.expected)
            .map(|e| format!("{}: {:?} -> {}", e.id, e.instruction, t.translate(&e.instruction)))
            .collect();
        assert!(misses.is_empty(), "{misses:#?}");
    }

    #[test]
    fn table_errors() {
        assert!(RuleTable::parse("rule INFO GET_ETA\n  any eta\n").is_err());
        assert!(RuleTable::parse("rule INFO GET_ETA\n  maybe eta\nrule OUT_OF_SCOPE\n").is_err());
        assert!(RuleTable::parse("  any eta\nrule OUT_OF_SCOPE\n").is_err());
        assert!(RuleTable::parse("rule INFO\nrule OUT_OF_SCOPE\n").is_err());
        assert!(RuleTable::parse("rule OUT_OF_SCOPE\n").is_ok());

        let reg = ActionRegistry::parse(assets::DEFAULT_REGISTRY).unwrap();
        let bad = RuleTable::parse("rule CONFIG SET_PARAM\n  set max_vel 500\nrule OUT_OF_SCOPE\n").unwrap();
        assert!(matches!(bad.check_against(&reg), Err(RuleError::Registry { line: 1, .. })));
        let bad = RuleTable::parse("rule INFO SET_PARAM\nrule OUT_OF_SCOPE\n").unwrap();
        assert!(bad.check_against(&reg).is_err());
    }
}
