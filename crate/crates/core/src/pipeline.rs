//! Two-stage interaction loop: translate, validate and execute, then
//! generate feedback from the definitive execution outcome.

use std::collections::HashMap;
use std::sync::mpsc::Receiver;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets;
use crate::corpus::parse_corpus;
use crate::dsl::ExtractedCommand;
use crate::interface::{ExecStatus, ExecutionReport, InterfaceNode, ValidationResult};
use crate::log::{valid_session, LogError, LogStore};
use crate::registry::ActionRegistry;
use crate::sim::{
    AvStatus, KernelError, KernelOptions, Pacing, RouteMap, SimConfig, SimError, SimHandle, Simulation,
    TrajectorySample,
};
use crate::translator::{
    assemble_for, generate_feedback, Ablation, Backend, EmptyInstruction, FeedbackMessage, FeedbackSource,
    FeedbackTemplates, IclExample, Instruction, TranslationError,
};

/// Knowledge base text: role and grammar followed by the action catalog.
pub fn knowledge_base(registry: &ActionRegistry) -> String {
    format!("{}\n{}", assets::KNOWLEDGE_BASE.trim_end(), registry.render_catalog())
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub ablation: Ablation,
    pub knowledge_base: String,
    pub examples: Vec<IclExample>,
}

impl PipelineConfig {
    pub fn shipped(registry: &ActionRegistry, ablation: Ablation) -> Self {
        PipelineConfig {
            ablation,
            knowledge_base: knowledge_base(registry),
            examples: parse_corpus(assets::ICL_EXAMPLES)
                .expect("shipped examples parse")
                .iter()
                .map(IclExample::from)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    /// Stage one [s].
    pub translation_s: f64,
    /// Dispatch to acknowledgment [ms]; absent when nothing was executed.
    pub execution_ms: Option<f64>,
    /// Stage two [s].
    pub feedback_s: f64,
}

/// Completion time of each stage in nanoseconds since the pipeline started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimestamps {
    pub translated_ns: u64,
    pub executed_ns: Option<u64>,
    pub feedback_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Translation,
    Execution,
    Feedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Success,
    Rejected,
    Failed,
    TranslationError,
    ExecutionError,
    FeedbackError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub id: String,
    pub seq: u64,
    pub instruction: Instruction,
    /// Simulated time at submission [s].
    pub sim_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<ExtractedCommand>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation_error: Option<TranslationError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<ExecutionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution_error: Option<String>,
    pub feedback: FeedbackMessage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_error: Option<TranslationError>,
    pub latency: LatencyRecord,
    pub timestamps: StageTimestamps,
    pub outcome: Outcome,
}

impl InteractionRecord {
    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn failed_stage(&self) -> Option<Stage> {
        match self.outcome {
            Outcome::Success => None,
            Outcome::TranslationError => Some(Stage::Translation),
            Outcome::Rejected | Outcome::Failed | Outcome::ExecutionError => Some(Stage::Execution),
            Outcome::FeedbackError => Some(Stage::Feedback),
        }
    }

    /// Stage timestamps are strictly increasing, and feedback from the
    /// backend exists only together with an execution report.
    pub fn stages_ordered(&self) -> bool {
        let t = &self.timestamps;
        let times_ok = match t.executed_ns {
            Some(e) => t.translated_ns < e && e < t.feedback_ns,
            None => t.translated_ns < t.feedback_ns,
        };
        let report_ok = match self.feedback.source {
            FeedbackSource::Template | FeedbackSource::Model => self.execution.is_some() && t.executed_ns.is_some(),
            FeedbackSource::Fallback => true,
        };
        times_ok && report_ok
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    EmptyInstruction(#[from] EmptyInstruction),
    #[error("invalid session id {0:?}")]
    InvalidSession(String),
    #[error("could not persist record: {0}")]
    Log(#[from] LogError),
}

/// Per-session bookkeeping; the mutex serializes a session's instructions.
#[derive(Default)]
struct Session {
    next_seq: u64,
    history: Vec<InteractionRecord>,
}

pub struct Pipeline {
    node: InterfaceNode,
    backend: Arc<dyn Backend>,
    fallback: Arc<FeedbackTemplates>,
    config: PipelineConfig,
    log: Option<Arc<LogStore<InteractionRecord>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    epoch: Instant,
}

impl Pipeline {
    pub fn new(node: InterfaceNode, backend: Arc<dyn Backend>, fallback: FeedbackTemplates, config: PipelineConfig) -> Self {
        Pipeline {
            node,
            backend,
            fallback: Arc::new(fallback),
            config,
            log: None,
            sessions: Mutex::new(HashMap::new()),
            epoch: Instant::now(),
        }
    }

    /// Persist every record to `log` before it is returned.
    pub fn with_log(mut self, log: Arc<LogStore<InteractionRecord>>) -> Self {
        self.log = Some(log);
        self
    }

    pub fn node(&self) -> &InterfaceNode {
        &self.node
    }

    pub fn sim(&self) -> &SimHandle {
        self.node.sim()
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Telemetry feed of the underlying simulation.
    pub fn telemetry(&self) -> Receiver<AvStatus> {
        self.node.sim().subscribe()
    }

    fn session(&self, id: &str) -> Arc<Mutex<Session>> {
        let mut sessions = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        sessions.entry(id.to_string()).or_default().clone()
    }

    /// Nanoseconds since start, strictly after `after`.
    fn stamp(&self, after: Option<u64>) -> u64 {
        let now = self.epoch.elapsed().as_nanos() as u64;
        match after {
            Some(a) => now.max(a + 1),
            None => now,
        }
    }

    pub fn submit(&self, session: &str, text: &str) -> Result<InteractionRecord, PipelineError> {
        self.handle_instruction(Instruction::new(session, text)?)
    }

    /// Runs one instruction through both stages. Failures of individual
    /// stages end up in the record; only a log write can fail the call.
    pub fn handle_instruction(&self, instr: Instruction) -> Result<InteractionRecord, PipelineError> {
        check_session(&instr.session)?;
        let session = self.session(&instr.session);
        let mut session = session.lock().unwrap_or_else(|e| e.into_inner());
        session.next_seq += 1;
        let seq = session.next_seq;

        let sim = self.node.sim();
        let status = sim.snapshot().unwrap_or_else(|_| sim.latest());
        let bundle = assemble_for(
            self.config.ablation,
            &self.config.knowledge_base,
            Some(&status),
            &self.config.examples,
            &instr,
        );

        let started = Instant::now();
        let translated = self.backend.translate(&instr, &bundle);
        let translation_s = started.elapsed().as_secs_f64();
        let translated_ns = self.stamp(None);

        let mut record = InteractionRecord {
            id: format!("{}-{seq}", instr.session),
            seq,
            sim_time: status.t,
            command: None,
            translation_error: None,
            validation: None,
            execution: None,
            execution_error: None,
            feedback: self.fallback.apology(""),
            feedback_error: None,
            latency: LatencyRecord { translation_s, execution_ms: None, feedback_s: 0.0 },
            timestamps: StageTimestamps { translated_ns, executed_ns: None, feedback_ns: 0 },
            outcome: Outcome::TranslationError,
            instruction: instr,
        };

        match translated {
            Err(e) => {
                tracing::warn!(id = %record.id, error = %e, "translation failed");
                let started = Instant::now();
                record.feedback = self.fallback.apology(&e.to_string());
                record.latency.feedback_s = started.elapsed().as_secs_f64();
                record.translation_error = Some(e);
            }
            Ok(cmd) => {
                record.command = Some(cmd.clone());
                match self.node.execute(&cmd) {
                    Err(e) => {
                        tracing::error!(id = %record.id, error = %e, "execution impossible");
                        record.validation = Some(self.node.validate(&cmd));
                        record.feedback = self.fallback.apology(&e.to_string());
                        record.execution_error = Some(e.to_string());
                        record.outcome = Outcome::ExecutionError;
                    }
                    Ok(report) => {
                        let executed_ns = self.stamp(Some(translated_ns));
                        record.timestamps.executed_ns = Some(executed_ns);
                        record.latency.execution_ms = Some(report.exec_latency_ms);
                        record.validation = Some(report.validation.clone());
                        record.outcome = match report.status {
                            ExecStatus::Success => Outcome::Success,
                            ExecStatus::Rejected => Outcome::Rejected,
                            ExecStatus::Failed => Outcome::Failed,
                        };

                        let started = Instant::now();
                        let fb = generate_feedback(&record.instruction, &cmd, &report, self.backend.as_ref());
                        record.latency.feedback_s = started.elapsed().as_secs_f64();
                        match fb {
                            Ok(fb) => record.feedback = fb,
                            Err(e) => {
                                tracing::warn!(id = %record.id, error = %e, "feedback generation failed");
                                let mut fb = self.fallback.render(&cmd, &report);
                                fb.source = FeedbackSource::Fallback;
                                record.feedback = fb;
                                record.feedback_error = Some(e);
                                record.outcome = Outcome::FeedbackError;
                            }
                        }
                        record.execution = Some(report);
                    }
                }
            }
        }
        let last = record.timestamps.executed_ns.unwrap_or(translated_ns);
        record.timestamps.feedback_ns = self.stamp(Some(last));

        if let Some(log) = &self.log {
            log.append(&record.instruction.session, &record)?;
        } else {
            session.history.push(record.clone());
        }
        tracing::info!(id = %record.id, outcome = ?record.outcome, "instruction handled");
        Ok(record)
    }

    /// All records of a session, oldest first.
    pub fn records(&self, session: &str) -> Result<Vec<InteractionRecord>, PipelineError> {
        check_session(session)?;
        if let Some(log) = &self.log {
            return Ok(log.load(session)?.records);
        }
        let s = self.session(session);
        let s = s.lock().unwrap_or_else(|e| e.into_inner());
        Ok(s.history.clone())
    }
}

fn check_session(id: &str) -> Result<(), PipelineError> {
    if valid_session(id) {
        Ok(())
    } else {
        Err(PipelineError::InvalidSession(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledInstruction {
    /// Simulated trigger time [s].
    pub at: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("entry {index}: trigger times must be finite, non-negative and strictly increasing")]
    NotIncreasing { index: usize },
    #[error("entry {index}: empty instruction")]
    EmptyText { index: usize },
}

/// Timed instructions with strictly increasing trigger times.
///
/// Text format: one `<time [s]> <instruction>` per line, `#` comments.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Schedule {
    items: Vec<ScheduledInstruction>,
}

impl Schedule {
    pub fn new(items: Vec<ScheduledInstruction>) -> Result<Self, ScheduleError> {
        let mut prev = None;
        for (index, item) in items.iter().enumerate() {
            let ordered = item.at.is_finite() && item.at >= 0.0 && prev.is_none_or(|p| item.at > p);
            if !ordered {
                return Err(ScheduleError::NotIncreasing { index });
            }
            if item.text.trim().is_empty() {
                return Err(ScheduleError::EmptyText { index });
            }
            prev = Some(item.at);
        }
        Ok(Schedule { items })
    }

    pub fn parse(text: &str) -> Result<Self, ScheduleError> {
        let mut items = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |reason: &str| ScheduleError::Syntax { line: idx + 1, reason: reason.into() };
            let (at, rest) = line.split_once(char::is_whitespace).ok_or_else(|| syntax("expected `<time> <text>`"))?;
            let at: f64 = at.parse().map_err(|_| syntax("time is not a number"))?;
            items.push(ScheduledInstruction { at, text: rest.trim().to_string() });
        }
        Schedule::new(items)
    }

    pub fn items(&self) -> &[ScheduledInstruction] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Copy with the instruction at `index` replaced.
    pub fn with_text(&self, index: usize, text: &str) -> Self {
        let mut s = self.clone();
        s.items[index].text = text.to_string();
        s
    }
}

/// Everything needed to replay a schedule on a fresh simulation.
#[derive(Clone)]
pub struct ScenarioSetup {
    pub map: Arc<RouteMap>,
    pub registry: Arc<ActionRegistry>,
    pub sim: SimConfig,
    pub pipeline: PipelineConfig,
    pub fallback: FeedbackTemplates,
    /// Simulated time kept running after the last instruction [s].
    pub tail_s: f64,
}

impl ScenarioSetup {
    pub fn shipped() -> Self {
        let map = Arc::new(RouteMap::parse(assets::DEFAULT_MAP).expect("shipped map parses"));
        let registry = Arc::new(ActionRegistry::parse(assets::DEFAULT_REGISTRY).expect("shipped registry parses"));
        ScenarioSetup {
            pipeline: PipelineConfig::shipped(&registry, Ablation::Baseline),
            map,
            registry,
            sim: SimConfig::default(),
            fallback: FeedbackTemplates::parse(assets::TEMPLATES).expect("shipped templates parse"),
            tail_s: 15.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub records: Vec<InteractionRecord>,
    pub trajectory: Vec<TrajectorySample>,
    pub final_status: AvStatus,
}

impl ScenarioRun {
    pub fn all_succeeded(&self) -> bool {
        self.records.iter().all(InteractionRecord::is_success)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub const SCENARIO_SESSION: &str = "scenario";

/// Replays `schedule` on a fresh lockstep simulation: each instruction is
/// submitted once simulated time reaches its trigger.
pub fn run_scripted_schedule(
    setup: &ScenarioSetup,
    schedule: &Schedule,
    backend: Arc<dyn Backend>,
) -> Result<ScenarioRun, ScenarioError> {
    let sim = Simulation::new(setup.map.clone(), setup.sim.clone())?;
    let handle = SimHandle::spawn(
        sim,
        KernelOptions {
            pacing: Pacing::Lockstep,
            record_trajectory: true,
            ..KernelOptions::default()
        },
    );
    let result = replay(setup, schedule, backend, &handle);
    handle.shutdown();
    result
}

fn replay(
    setup: &ScenarioSetup,
    schedule: &Schedule,
    backend: Arc<dyn Backend>,
    handle: &SimHandle,
) -> Result<ScenarioRun, ScenarioError> {
    let node = InterfaceNode::new(setup.registry.clone(), handle.clone());
    let pipeline = Pipeline::new(node, backend, setup.fallback.clone(), setup.pipeline.clone());
    let mut records = Vec::with_capacity(schedule.len());
    for item in schedule.items() {
        handle.run_until(item.at)?;
        records.push(pipeline.submit(SCENARIO_SESSION, &item.text)?);
    }
    let end = schedule.items().last().map_or(0.0, |i| i.at) + setup.tail_s;
    handle.run_until(end)?;
    Ok(ScenarioRun {
        records,
        trajectory: handle.trajectory().map_err(KernelError::from)?,
        final_status: handle.snapshot().map_err(KernelError::from)?,
    })
}
