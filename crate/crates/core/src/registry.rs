//! The action registry: the explicit allowlist of executable actions.
//!
//! Registry documents are line oriented. An `action` record opens an entry
//! and indented `param` lines describe its parameters:
//!
//! ```text
//! action SET_PARAM category CONFIG capability set_param any_of
//!   param max_vel number km/h 5 130
//! action TURN_AT_NEXT_INTERSECTION category COOP capability turn_choice
//!   param direction enum left|right|straight
//! ```
//!
//! Parameters are required by default. The trailing `any_of` flag instead
//! requires at least one of them. `param <name> string` declares a free
//! text parameter. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::dsl::{is_param_ident, ActionId, Category};
use crate::sim::{Capability, RouteMap};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistryError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: duplicate action {action}")]
    DuplicateAction { line: usize, action: String },
    #[error("line {line}: duplicate parameter {param} on {action}")]
    DuplicateParam { line: usize, action: String, param: String },
    #[error("no action registered for category {0}")]
    EmptyCategory(Category),
    #[error("line {line}: invalid bounds for {param}: {reason}")]
    InvalidBounds { line: usize, param: String, reason: String },
    #[error("line {line}: unknown capability {capability:?}")]
    UnknownCapability { line: usize, capability: String },
    #[error("action {action} allows destination {goal:?}, which the map does not define")]
    UnknownGoal { action: String, goal: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParamKind {
    Number { unit: String, min: f64, max: f64 },
    String,
    Enum { values: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionSpec {
    pub action: ActionId,
    pub category: Category,
    pub params: Vec<ParamSpec>,
    pub capability: Capability,
    /// At least one parameter required instead of all of them.
    pub any_of: bool,
}

impl ActionSpec {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionRegistry {
    actions: BTreeMap<ActionId, ActionSpec>,
}

impl ActionRegistry {
    pub fn parse(text: &str) -> Result<ActionRegistry, RegistryError> {
        let mut actions: BTreeMap<ActionId, ActionSpec> = BTreeMap::new();
        let mut current: Option<ActionId> = None;

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim_end();
            if content.trim().is_empty() {
                continue;
            }
            let indented = content.starts_with(char::is_whitespace);
            let fields: Vec<&str> = content.split_whitespace().collect();
            let syntax = |reason: &str| RegistryError::Syntax {
                line,
                reason: format!("{reason}: {:?}", content.trim()),
            };

            if !indented {
                let (id, category, capability, any_of) = match fields[..] {
                    ["action", id, "category", cat, "capability", cap] => (id, cat, cap, false),
                    ["action", id, "category", cat, "capability", cap, "any_of"] => (id, cat, cap, true),
                    _ => return Err(syntax("expected `action <ID> category <TOKEN> capability <ident> [any_of]`")),
                };
                let action = ActionId::new(id).map_err(|e| syntax(&e.to_string()))?;
                let category = Category::from_token(category).ok_or_else(|| syntax("unknown category"))?;
                if category == Category::OutOfScope {
                    return Err(syntax("OUT_OF_SCOPE cannot carry actions"));
                }
                let capability = Capability::parse(capability).ok_or_else(|| RegistryError::UnknownCapability {
                    line,
                    capability: capability.to_string(),
                })?;
                if actions.contains_key(&action) {
                    return Err(RegistryError::DuplicateAction { line, action: action.to_string() });
                }
                actions.insert(
                    action.clone(),
                    ActionSpec { action: action.clone(), category, params: Vec::new(), capability, any_of },
                );
                current = Some(action);
                continue;
            }

            let Some(owner) = &current else {
                return Err(syntax("parameter line outside an action"));
            };
            let spec = actions.get_mut(owner).expect("current action registered");
            let (name, kind) = match fields[..] {
                ["param", name, "number", unit, min, max] => {
                    let min = parse_bound(min, line, name)?;
                    let max = parse_bound(max, line, name)?;
                    if min > max {
                        return Err(RegistryError::InvalidBounds {
                            line,
                            param: name.into(),
                            reason: format!("min {min} exceeds max {max}"),
                        });
                    }
                    (name, ParamKind::Number { unit: unit.to_string(), min, max })
                }
                ["param", name, "string"] => (name, ParamKind::String),
                ["param", name, "enum", values] => {
                    let values: Vec<String> =
                        values.split('|').filter(|v| !v.is_empty()).map(str::to_string).collect();
                    if values.is_empty() {
                        return Err(RegistryError::InvalidBounds {
                            line,
                            param: name.into(),
                            reason: "enum needs at least one allowed value".into(),
                        });
                    }
                    (name, ParamKind::Enum { values })
                }
                ["param", name, "enum"] => {
                    return Err(RegistryError::InvalidBounds {
                        line,
                        param: name.into(),
                        reason: "enum needs at least one allowed value".into(),
                    })
                }
                _ => return Err(syntax("expected `param <name> <kind> ...`")),
            };
            if !is_param_ident(name) {
                return Err(syntax("invalid parameter name"));
            }
            if spec.param(name).is_some() {
                return Err(RegistryError::DuplicateParam {
                    line,
                    action: owner.to_string(),
                    param: name.into(),
                });
            }
            spec.params.push(ParamSpec { name: name.to_string(), kind });
        }

        for category in Category::ALL {
            if category != Category::OutOfScope && !actions.values().any(|a| a.category == category) {
                return Err(RegistryError::EmptyCategory(category));
            }
        }
        Ok(ActionRegistry { actions })
    }

    pub fn get(&self, action: &ActionId) -> Option<&ActionSpec> {
        self.actions.get(action)
    }

    pub fn get_str(&self, action: &str) -> Option<&ActionSpec> {
        self.actions.values().find(|a| a.action.as_str() == action)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ActionSpec> {
        self.actions.values()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Checks registry values that name map entities (destinations).
    pub fn check_against_map(&self, map: &RouteMap) -> Result<(), RegistryError> {
        for spec in self.iter().filter(|s| s.capability == Capability::SetDestination) {
            for p in &spec.params {
                if let ParamKind::Enum { values } = &p.kind {
                    if let Some(goal) = values.iter().find(|v| map.goal(v).is_none()) {
                        return Err(RegistryError::UnknownGoal {
                            action: spec.action.to_string(),
                            goal: goal.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Human-readable action catalog for prompts.
    pub fn render_catalog(&self) -> String {
        let mut out = String::new();
        for category in Category::ALL {
            let specs: Vec<_> = self.iter().filter(|s| s.category == category).collect();
            if specs.is_empty() {
                continue;
            }
            let _ = writeln!(out, "{category}:");
            for spec in specs {
                let params: Vec<String> = spec
                    .params
                    .iter()
                    .map(|p| match &p.kind {
                        ParamKind::Number { unit, min, max } => format!("{} ({unit}, {min}..{max})", p.name),
                        ParamKind::String => format!("{} (text)", p.name),
                        ParamKind::Enum { values } => format!("{} ({})", p.name, values.join("|")),
                    })
                    .collect();
                if params.is_empty() {
                    let _ = writeln!(out, "  {}", spec.action);
                } else {
                    let joiner = if spec.any_of { " and/or " } else { ", " };
                    let _ = writeln!(out, "  {}: {}", spec.action, params.join(joiner));
                }
            }
        }
        out
    }
}

fn parse_bound(s: &str, line: usize, param: &str) -> Result<f64, RegistryError> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(RegistryError::InvalidBounds {
            line,
            param: param.into(),
            reason: format!("{s:?} is not a finite number"),
        }),
    }
}
