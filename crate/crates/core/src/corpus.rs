//! Instruction/command pairs, used for the evaluation corpus and for the
//! in-context examples.
//!
//! ```text
//! id: config-01
//! instruction: Set the maximum speed to 90 km/h.
//!   command_type: CONFIG
//!   action: SET_PARAM
//!   parameters:
//!     - name: max_vel
//!       value: 90.0
//! ```
//!
//! Blocks are separated by blank lines; `#` lines outside blocks are comments.

use std::collections::HashSet;

use serde::Serialize;
use thiserror::Error;

use crate::dsl::{parse_command, ExtractedCommand, ParseError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusEntry {
    pub id: String,
    pub instruction: String,
    pub expected: ExtractedCommand,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("entry {id} (line {line}): {source}")]
    Command {
        id: String,
        line: usize,
        #[source]
        source: ParseError,
    },
    #[error("line {line}: duplicate id {id}")]
    DuplicateId { line: usize, id: String },
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusEntry>, CorpusError> {
    let mut entries = Vec::new();
    let mut ids = HashSet::new();
    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if line.trim().is_empty() || line.starts_with('#') {
            i += 1;
            continue;
        }
        let start = i + 1;
        let id = line
            .strip_prefix("id: ")
            .ok_or_else(|| CorpusError::Format { line: start, reason: "expected `id: <id>`".into() })?
            .trim()
            .to_string();
        if id.is_empty() {
            return Err(CorpusError::Format { line: start, reason: "empty id".into() });
        }
        if !ids.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { line: start, id });
        }
        let instruction = lines
            .get(i + 1)
            .and_then(|l| l.strip_prefix("instruction: "))
            .ok_or_else(|| CorpusError::Format {
                line: start + 1,
                reason: "expected `instruction: <text>`".into(),
            })?
            .trim()
            .to_string();
        if instruction.is_empty() {
            return Err(CorpusError::Format { line: start + 1, reason: "empty instruction".into() });
        }
        i += 2;
        let mut doc = String::new();
        while i < lines.len() && !lines[i].trim().is_empty() {
            let body = lines[i].strip_prefix("  ").ok_or_else(|| CorpusError::Format {
                line: i + 1,
                reason: "command lines must be indented by two spaces".into(),
            })?;
            doc.push_str(body);
            doc.push('\n');
            i += 1;
        }
        let expected = parse_command(&doc).map_err(|source| CorpusError::Command {
            id: id.clone(),
            line: start + 2,
            source,
        })?;
        entries.push(CorpusEntry { id, instruction, expected });
    }
    Ok(entries)
}

/// Renders entries back into the block format.
pub fn render_corpus(entries: &[CorpusEntry]) -> String {
    let mut out = String::new();
    for (n, e) in entries.iter().enumerate() {
        if n > 0 {
            out.push('\n');
        }
        out.push_str("id: ");
        out.push_str(&e.id);
        out.push_str("\ninstruction: ");
        out.push_str(&e.instruction);
        out.push('\n');
        for l in e.expected.to_dsl().lines() {
            out.push_str("  ");
            out.push_str(l);
            out.push('\n');
        }
    }
    out
}
