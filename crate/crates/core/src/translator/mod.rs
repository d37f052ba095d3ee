//! Instruction-to-command translation and outcome feedback.
//!
//! Both stages sit behind the [`Backend`] trait. [`RuleBackend`] is an
//! offline, deterministic pattern table; [`HttpBackend`] forwards the
//! assembled prompt to an external language model.

mod http;
mod rules;
mod templates;

use std::fmt;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusEntry;
use crate::dsl::ExtractedCommand;
use crate::interface::{ExecStatus, ExecutionReport};
use crate::sim::AvStatus;

pub use http::{HttpBackend, HttpConfig, ENDPOINT_ENV, KEY_ENV};
pub use rules::{normalize, Rule, RuleBackend, RuleError, RuleTable};
pub use templates::{FeedbackTemplates, TemplateError};

/// A passenger instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub session: String,
    /// Unix time of submission [ms].
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("instruction text is empty")]
pub struct EmptyInstruction;

impl Instruction {
    pub fn new(session: impl Into<String>, text: impl Into<String>) -> Result<Self, EmptyInstruction> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(EmptyInstruction);
        }
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Ok(Instruction {
            text,
            session: session.into(),
            timestamp_ms,
        })
    }
}

/// Which prompt inputs accompany the knowledge base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Baseline,
    NoStatus,
    ZeroShot,
    KbOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::NoStatus, Ablation::ZeroShot, Ablation::KbOnly];

    pub fn includes_status(self) -> bool {
        matches!(self, Ablation::Baseline | Ablation::ZeroShot)
    }

    pub fn includes_examples(self) -> bool {
        matches!(self, Ablation::Baseline | Ablation::NoStatus)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::NoStatus => "no-status",
            Ablation::ZeroShot => "zero-shot",
            Ablation::KbOnly => "kb-only",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}; expected baseline, no-status, zero-shot or kb-only"))
    }
}

/// One in-context example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclExample {
    pub instruction: String,
    pub command: ExtractedCommand,
}

impl From<&CorpusEntry> for IclExample {
    fn from(e: &CorpusEntry) -> Self {
        IclExample {
            instruction: e.instruction.clone(),
            command: e.expected.clone(),
        }
    }
}

/// Everything sent to the model for stage one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub knowledge_base: String,
    pub status: Option<String>,
    pub examples: Option<Vec<IclExample>>,
    pub instruction: String,
}

impl PromptBundle {
    /// Prompt text: knowledge base, status, examples, instruction.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("### Knowledge base\n");
        out.push_str(self.knowledge_base.trim_end());
        out.push_str("\n\n");
        if let Some(status) = &self.status {
            out.push_str("### Vehicle status\n");
            out.push_str(status.trim_end());
            out.push_str("\n\n");
        }
        if let Some(examples) = &self.examples {
            out.push_str("### Examples\n");
            for ex in examples {
                out.push_str("Instruction: ");
                out.push_str(&ex.instruction);
                out.push('\n');
                out.push_str(&ex.command.to_dsl());
                out.push('\n');
            }
        }
        out.push_str("### Instruction\n");
        out.push_str(&self.instruction);
        out.push('\n');
        out
    }
}

/// Builds the stage-one prompt. An empty example list is treated as absent.
pub fn assemble_prompt(
    knowledge_base: &str,
    status: Option<&AvStatus>,
    examples: Option<&[IclExample]>,
    instruction: &Instruction,
) -> PromptBundle {
    PromptBundle {
        knowledge_base: knowledge_base.to_string(),
        status: status.map(AvStatus::render),
        examples: examples.filter(|e| !e.is_empty()).map(<[IclExample]>::to_vec),
        instruction: instruction.text.clone(),
    }
}

/// [`assemble_prompt`] with inputs gated by an ablation setting.
pub fn assemble_for(
    ablation: Ablation,
    knowledge_base: &str,
    status: Option<&AvStatus>,
    examples: &[IclExample],
    instruction: &Instruction,
) -> PromptBundle {
    assemble_prompt(
        knowledge_base,
        status.filter(|_| ablation.includes_status()),
        ablation.includes_examples().then_some(examples),
        instruction,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "reason", rename_all = "snake_case")]
pub enum TranslationError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("unparseable response: {0}")]
    UnparseableResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Template,
    Model,
    /// Local template used because the model could not be reached.
    Fallback,
}

/// Stage-two passenger feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMessage {
    pub text: String,
    /// Canonical command the feedback refers to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<ExecStatus>,
    pub source: FeedbackSource,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn translate(&self, instruction: &Instruction, bundle: &PromptBundle) -> Result<ExtractedCommand, TranslationError>;

    fn feedback(
        &self,
        instruction: &Instruction,
        command: &ExtractedCommand,
        report: &ExecutionReport,
    ) -> Result<FeedbackMessage, TranslationError>;
}

/// Stage two. Only callable with a finished report.
pub fn generate_feedback(
    instruction: &Instruction,
    command: &ExtractedCommand,
    report: &ExecutionReport,
    backend: &dyn Backend,
) -> Result<FeedbackMessage, TranslationError> {
    backend.feedback(instruction, command, report)
}

/// Pulls the first command document out of free-form model output: the
/// first line starting with `command_type:` and the command lines after it.
pub fn extract_dsl(response: &str) -> Option<String> {
    let mut lines = response.lines().map(|l| l.trim_end_matches('\r'));
    let first = lines.by_ref().find(|l| l.trim_start().starts_with("command_type:"))?;
    let mut doc = String::from(first.trim_start());
    doc.push('\n');
    for l in lines {
        let belongs = l.starts_with("action:")
            || l == "parameters:"
            || l.starts_with("  - name:")
            || l.starts_with("    value:");
        if !belongs {
            break;
        }
        doc.push_str(l);
        doc.push('\n');
    }
    Some(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets;
    use crate::corpus::parse_corpus;

    fn examples() -> Vec<IclExample> {
        parse_corpus(assets::ICL_EXAMPLES).unwrap().iter().map(IclExample::from).collect()
    }

    fn status() -> AvStatus {
        use crate::sim::{RouteMap, SimConfig, Simulation};
        let map = std::sync::Arc::new(RouteMap::parse(assets::DEFAULT_MAP).unwrap());
        Simulation::new(map, SimConfig::default()).unwrap().snapshot()
    }

    #[test]
    fn ablations_gate_sections() {
        let instr = Instruction::new("s", "Tell me a joke").unwrap();
        let (st, ex) = (status(), examples());
        let base = assemble_for(Ablation::Baseline, "KB", Some(&st), &ex, &instr);
        assert!(base.status.is_some() && base.examples.is_some());
        let kb = assemble_for(Ablation::KbOnly, "KB", Some(&st), &ex, &instr);
        assert!(kb.status.is_none() && kb.examples.is_none());
        let ns = assemble_for(Ablation::NoStatus, "KB", Some(&st), &ex, &instr);
        assert!(ns.status.is_none() && ns.examples.is_some());
        let zs = assemble_for(Ablation::ZeroShot, "KB", Some(&st), &ex, &instr);
        assert!(zs.status.is_some() && zs.examples.is_none());

        // Empty example list is the same as leaving examples out.
        assert_eq!(assemble_for(Ablation::Baseline, "KB", Some(&st), &[], &instr), zs);
    }

    #[test]
    fn render_orders_sections() {
        let instr = Instruction::new("s", "Stop the car.").unwrap();
        let text = assemble_for(Ablation::Baseline, "KB TEXT", Some(&status()), &examples(), &instr).render();
        let positions: Vec<usize> = ["### Knowledge base", "### Vehicle status", "### Examples", "### Instruction"]
            .iter()
            .map(|h| text.find(h).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(text.ends_with("Stop the car.\n"));
    }

    #[test]
    fn extracts_first_document() {
        let resp = "Sure! Here it is:\ncommand_type: CONFIG\naction: SET_PARAM\nparameters:\n  - name: max_vel\n    value: 90.0\nHope that helps.\ncommand_type: INFO\n";
        let doc = extract_dsl(resp).unwrap();
        assert_eq!(doc, "command_type: CONFIG\naction: SET_PARAM\nparameters:\n  - name: max_vel\n    value: 90.0\n");
        assert!(extract_dsl("no command here").is_none());
    }

    #[test]
    fn empty_instruction_rejected() {
        assert!(Instruction::new("s", "   ").is_err());
    }

    #[test]
    fn ablation_names() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!("full".parse::<Ablation>().is_err());
    }
}
