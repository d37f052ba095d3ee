//! The passenger command language.
//!
//! A command document is a flat, YAML-like block:
//!
//! ```text
//! command_type: CONFIG
//! action: SET_PARAM
//! parameters:
//!   - name: max_vel
//!     value: 90.0
//! ```
//!
//! The grammar is deliberately strict. Lines end in LF, every colon is
//! followed by exactly one space, and nothing may trail a value. Scalars are
//! finite decimal numbers, bare identifiers, or double-quoted strings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Interaction category of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    Info,
    Mission,
    Config,
    Coop,
    Intervention,
    OutOfScope,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Info,
        Category::Mission,
        Category::Config,
        Category::Coop,
        Category::Intervention,
        Category::OutOfScope,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Category::Info => "INFO",
            Category::Mission => "MISSION",
            Category::Config => "CONFIG",
            Category::Coop => "COOP",
            Category::Intervention => "INTERVENTION",
            Category::OutOfScope => "OUT_OF_SCOPE",
        }
    }

    pub fn from_token(token: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.token() == token)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Uppercase action identifier such as `SET_PARAM`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ActionId(String);

impl ActionId {
    pub fn new(id: impl Into<String>) -> Result<Self, InvalidIdentifier> {
        let id = id.into();
        if is_action_ident(&id) {
            Ok(ActionId(id))
        } else {
            Err(InvalidIdentifier(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ActionId {
    type Err = InvalidIdentifier;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionId::new(s)
    }
}

impl TryFrom<String> for ActionId {
    type Error = InvalidIdentifier;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        ActionId::new(s)
    }
}

impl From<ActionId> for String {
    fn from(id: ActionId) -> String {
        id.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid identifier {0:?}")]
pub struct InvalidIdentifier(pub String);

/// A parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Number(f64),
    Text(String),
}

impl Scalar {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Scalar::Number(n) => Some(*n),
            Scalar::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Scalar::Number(_) => None,
            Scalar::Text(s) => Some(s),
        }
    }

    /// Canonical DSL rendering of the scalar.
    pub fn render(&self) -> String {
        match self {
            Scalar::Number(n) => format_number(*n),
            Scalar::Text(s) if is_bare_string(s) => s.clone(),
            Scalar::Text(s) => {
                let mut out = String::with_capacity(s.len() + 2);
                out.push('"');
                for c in s.chars() {
                    match c {
                        '"' => out.push_str("\\\""),
                        '\\' => out.push_str("\\\\"),
                        '\n' => out.push_str("\\n"),
                        '\r' => out.push_str("\\r"),
                        _ => out.push(c),
                    }
                }
                out.push('"');
                out
            }
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Number(n) => f.write_str(&format_number(*n)),
            Scalar::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Scalar {
    fn from(n: f64) -> Self {
        Scalar::Number(n)
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Text(s.to_string())
    }
}

/// Shortest round-trip decimal, with `.0` appended to integral values.
pub fn format_number(n: f64) -> String {
    let mut s = format!("{n}");
    if !s.contains('.') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Scalar,
}

/// Ordered parameter list with unique names.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterSet(Vec<Parameter>);

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet(Vec::new())
    }

    /// Appends a parameter. Returns `false` (and leaves the set unchanged)
    /// when the name is already present or the number is not finite.
    pub fn push(&mut self, name: impl Into<String>, value: impl Into<Scalar>) -> bool {
        let name = name.into();
        let value = value.into();
        if self.get(&name).is_some() {
            return false;
        }
        if let Scalar::Number(n) = value {
            if !n.is_finite() {
                return false;
            }
        }
        self.0.push(Parameter { name, value });
        true
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<Scalar>) -> Self {
        self.push(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Scalar> {
        self.0.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'a> IntoIterator for &'a ParameterSet {
    type Item = &'a Parameter;
    type IntoIter = std::slice::Iter<'a, Parameter>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// A command extracted from a passenger instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedCommand {
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionId>,
    #[serde(default, skip_serializing_if = "ParameterSet::is_empty")]
    pub parameters: ParameterSet,
}

impl ExtractedCommand {
    pub fn out_of_scope() -> Self {
        ExtractedCommand {
            category: Category::OutOfScope,
            action: None,
            parameters: ParameterSet::new(),
        }
    }

    /// Builds a command for an in-scope category.
    ///
    /// Panics if `action` is not a valid action identifier; intended for
    /// literals in code and tests.
    pub fn new(category: Category, action: &str, parameters: ParameterSet) -> Self {
        ExtractedCommand {
            category,
            action: Some(ActionId::new(action).expect("valid action identifier")),
            parameters,
        }
    }

    pub fn is_out_of_scope(&self) -> bool {
        self.category == Category::OutOfScope
    }

    pub fn to_dsl(&self) -> String {
        serialize_command(self)
    }
}

impl fmt::Display for ExtractedCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_command(self))
    }
}

impl FromStr for ExtractedCommand {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_command(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    EmptyDocument,
    MissingCommandType,
    UnknownCategoryToken,
    UnknownKey,
    DuplicateKey,
    MalformedLine,
    MalformedParameterItem,
    DuplicateParameter,
    InvalidIdentifier,
    NonFiniteNumber,
    /// Action present on an out-of-scope command, or missing elsewhere.
    ActionMismatch,
}

/// Parse failure with a 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("line {line}: {kind:?}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
    pub reason: String,
}

impl ParseError {
    fn new(line: usize, kind: ParseErrorKind, reason: impl Into<String>) -> Self {
        ParseError {
            line,
            kind,
            reason: reason.into(),
        }
    }
}

/// Renders the canonical form of a command.
pub fn serialize_command(cmd: &ExtractedCommand) -> String {
    let mut out = format!("command_type: {}\n", cmd.category.token());
    if let Some(action) = &cmd.action {
        out.push_str("action: ");
        out.push_str(action.as_str());
        out.push('\n');
    }
    if !cmd.parameters.is_empty() {
        out.push_str("parameters:\n");
        for p in &cmd.parameters {
            out.push_str("  - name: ");
            out.push_str(&p.name);
            out.push_str("\n    value: ");
            out.push_str(&p.value.render());
            out.push('\n');
        }
    }
    out
}

/// Parses a command document.
pub fn parse_command(text: &str) -> Result<ExtractedCommand, ParseError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Err(ParseError::new(1, ParseErrorKind::EmptyDocument, "empty document"));
    }
    let lines: Vec<&str> = body.split('\n').collect();

    let mut category = None;
    let mut action: Option<ActionId> = None;
    let mut parameters = ParameterSet::new();
    let mut seen_parameters = false;

    let mut i = 0;
    while i < lines.len() {
        let lineno = i + 1;
        let line = lines[i];
        if line.contains('\r') {
            return Err(ParseError::new(lineno, ParseErrorKind::MalformedLine, "CR in line; LF line endings only"));
        }
        let (key, value) = split_key(line, lineno)?;
        if i == 0 && key != "command_type" {
            return Err(ParseError::new(
                lineno,
                ParseErrorKind::MissingCommandType,
                "first line must be `command_type: <TOKEN>`",
            ));
        }
        match key {
            "command_type" => {
                if category.is_some() {
                    return Err(ParseError::new(lineno, ParseErrorKind::DuplicateKey, "duplicate command_type"));
                }
                let token = value.ok_or_else(|| {
                    ParseError::new(lineno, ParseErrorKind::MalformedLine, "command_type needs a value")
                })?;
                category = Some(Category::from_token(token).ok_or_else(|| {
                    ParseError::new(
                        lineno,
                        ParseErrorKind::UnknownCategoryToken,
                        format!("unknown category {token:?}"),
                    )
                })?);
                i += 1;
            }
            "action" => {
                if action.is_some() {
                    return Err(ParseError::new(lineno, ParseErrorKind::DuplicateKey, "duplicate action"));
                }
                if seen_parameters {
                    return Err(ParseError::new(lineno, ParseErrorKind::MalformedLine, "action must precede parameters"));
                }
                let token = value
                    .ok_or_else(|| ParseError::new(lineno, ParseErrorKind::MalformedLine, "action needs a value"))?;
                action = Some(ActionId::new(token).map_err(|e| {
                    ParseError::new(lineno, ParseErrorKind::InvalidIdentifier, e.to_string())
                })?);
                i += 1;
            }
            "parameters" => {
                if seen_parameters {
                    return Err(ParseError::new(lineno, ParseErrorKind::DuplicateKey, "duplicate parameters"));
                }
                if value.is_some() {
                    return Err(ParseError::new(
                        lineno,
                        ParseErrorKind::MalformedLine,
                        "`parameters:` takes no inline value",
                    ));
                }
                seen_parameters = true;
                i += 1;
                let start = i;
                while i < lines.len() && lines[i].starts_with(' ') {
                    let name_line = lines[i];
                    let name_no = i + 1;
                    let name = name_line.strip_prefix("  - name: ").ok_or_else(|| {
                        ParseError::new(name_no, ParseErrorKind::MalformedParameterItem, "expected `  - name: <ident>`")
                    })?;
                    if !is_param_ident(name) {
                        return Err(ParseError::new(
                            name_no,
                            ParseErrorKind::InvalidIdentifier,
                            format!("invalid parameter name {name:?}"),
                        ));
                    }
                    let value_line = lines.get(i + 1).ok_or_else(|| {
                        ParseError::new(name_no + 1, ParseErrorKind::MalformedParameterItem, "missing `    value:` line")
                    })?;
                    let raw = value_line.strip_prefix("    value: ").ok_or_else(|| {
                        ParseError::new(name_no + 1, ParseErrorKind::MalformedParameterItem, "expected `    value: <scalar>`")
                    })?;
                    if value_line.contains('\r') {
                        return Err(ParseError::new(name_no + 1, ParseErrorKind::MalformedLine, "CR in line"));
                    }
                    let scalar = parse_scalar(raw, name_no + 1)?;
                    if !parameters.push(name, scalar) {
                        return Err(ParseError::new(
                            name_no,
                            ParseErrorKind::DuplicateParameter,
                            format!("parameter {name:?} given twice"),
                        ));
                    }
                    i += 2;
                }
                if i == start {
                    return Err(ParseError::new(
                        lineno,
                        ParseErrorKind::MalformedParameterItem,
                        "`parameters:` must be followed by at least one item",
                    ));
                }
            }
            other => {
                return Err(ParseError::new(lineno, ParseErrorKind::UnknownKey, format!("unknown key {other:?}")));
            }
        }
    }

    let category = category.expect("first line checked");
    match (category, &action) {
        (Category::OutOfScope, Some(_)) => {
            return Err(ParseError::new(2, ParseErrorKind::ActionMismatch, "OUT_OF_SCOPE commands carry no action"))
        }
        (Category::OutOfScope, None) if !parameters.is_empty() => {
            return Err(ParseError::new(2, ParseErrorKind::ActionMismatch, "OUT_OF_SCOPE commands carry no parameters"))
        }
        (c, None) if c != Category::OutOfScope => {
            return Err(ParseError::new(
                lines.len(),
                ParseErrorKind::ActionMismatch,
                format!("{c} commands need an action"),
            ))
        }
        _ => {}
    }

    Ok(ExtractedCommand {
        category,
        action,
        parameters,
    })
}

/// Splits a top-level `key: value` or `key:` line.
fn split_key(line: &str, lineno: usize) -> Result<(&str, Option<&str>), ParseError> {
    if line.starts_with(' ') {
        return Err(ParseError::new(lineno, ParseErrorKind::MalformedLine, "unexpected indentation"));
    }
    let Some((key, rest)) = line.split_once(':') else {
        return Err(ParseError::new(lineno, ParseErrorKind::MalformedLine, "expected `key: value`"));
    };
    if rest.is_empty() {
        return Ok((key, None));
    }
    let Some(value) = rest.strip_prefix(' ') else {
        return Err(ParseError::new(lineno, ParseErrorKind::MalformedLine, "exactly one space must follow the colon"));
    };
    if value.is_empty() || value.starts_with(' ') || value.contains(' ') {
        return Err(ParseError::new(
            lineno,
            ParseErrorKind::MalformedLine,
            "value must be a single token with exactly one preceding space",
        ));
    }
    Ok((key, Some(value)))
}

fn parse_scalar(raw: &str, lineno: usize) -> Result<Scalar, ParseError> {
    if raw.is_empty() {
        return Err(ParseError::new(lineno, ParseErrorKind::MalformedParameterItem, "empty value"));
    }
    if let Some(inner) = raw.strip_prefix('"') {
        return parse_quoted(inner, lineno).map(Scalar::Text);
    }
    if is_non_finite_word(raw) {
        return Err(ParseError::new(lineno, ParseErrorKind::NonFiniteNumber, format!("{raw:?} is not finite")));
    }
    let first = raw.as_bytes()[0];
    if first.is_ascii_digit() || first == b'-' || first == b'+' || first == b'.' {
        if !is_decimal(raw) {
            return Err(ParseError::new(
                lineno,
                ParseErrorKind::MalformedParameterItem,
                format!("{raw:?} is not a decimal number"),
            ));
        }
        let n: f64 = raw.parse().map_err(|_| {
            ParseError::new(lineno, ParseErrorKind::MalformedParameterItem, format!("{raw:?} is not a number"))
        })?;
        if !n.is_finite() {
            return Err(ParseError::new(lineno, ParseErrorKind::NonFiniteNumber, format!("{raw:?} overflows")));
        }
        return Ok(Scalar::Number(n));
    }
    if is_bare_string(raw) {
        Ok(Scalar::Text(raw.to_string()))
    } else {
        Err(ParseError::new(
            lineno,
            ParseErrorKind::MalformedParameterItem,
            format!("{raw:?} is neither a number nor a string"),
        ))
    }
}

fn parse_quoted(inner: &str, lineno: usize) -> Result<String, ParseError> {
    let mut out = String::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        match c {
            '"' => {
                if chars.next().is_some() {
                    return Err(ParseError::new(lineno, ParseErrorKind::MalformedParameterItem, "text after closing quote"));
                }
                return Ok(out);
            }
            '\\' => match chars.next() {
                Some('"') => out.push('"'),
                Some('\\') => out.push('\\'),
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                _ => {
                    return Err(ParseError::new(lineno, ParseErrorKind::MalformedParameterItem, "bad escape in string"))
                }
            },
            _ => out.push(c),
        }
    }
    Err(ParseError::new(lineno, ParseErrorKind::MalformedParameterItem, "unterminated string"))
}

/// `-?digits(.digits)?([eE][+-]?digits)?`
fn is_decimal(s: &str) -> bool {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && b[i] == b'-' {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    if i == int_start {
        return false;
    }
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == frac_start {
            return false;
        }
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return false;
        }
    }
    i == b.len()
}

fn is_non_finite_word(s: &str) -> bool {
    let t = s.trim_start_matches(['+', '-']).to_ascii_lowercase();
    matches!(t.as_str(), "nan" | "inf" | "infinity")
}

/// Strings that can be written without quotes.
fn is_bare_string(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '/'))
        && !is_non_finite_word(s)
}

fn is_action_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_uppercase())
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

pub(crate) fn is_param_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}
