use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use avcopilot_core::assets;
use avcopilot_core::dsl::{Category, ExtractedCommand};
use avcopilot_core::interface::{ExecStatus, ExecutionReport, InterfaceNode, ReasonCode};
use avcopilot_core::log::{append_raw, LogStore};
use avcopilot_core::pipeline::{
    run_scripted_schedule, InteractionRecord, Outcome, Pipeline, ScenarioSetup, Schedule, Stage,
};
use avcopilot_core::sim::{CapabilityError, KernelOptions, OperationMode, Pacing, SimHandle, Simulation};
use avcopilot_core::translator::{
    Backend, FeedbackMessage, FeedbackSource, Instruction, PromptBundle, RuleBackend, TranslationError,
};

fn pipeline_with(backend: Arc<dyn Backend>) -> (Pipeline, SimHandle) {
    let setup = ScenarioSetup::shipped();
    let sim = Simulation::new(setup.map.clone(), setup.sim.clone()).unwrap();
    let handle = SimHandle::spawn(sim, KernelOptions { pacing: Pacing::Lockstep, ..Default::default() });
    let node = InterfaceNode::new(setup.registry.clone(), handle.clone());
    (Pipeline::new(node, backend, setup.fallback, setup.pipeline), handle)
}

/// Stage one always fails.
struct DownBackend;

impl Backend for DownBackend {
    fn name(&self) -> &str {
        "down"
    }
    fn translate(&self, _: &Instruction, _: &PromptBundle) -> Result<ExtractedCommand, TranslationError> {
        Err(TranslationError::BackendUnavailable("connection refused".into()))
    }
    fn feedback(&self, _: &Instruction, _: &ExtractedCommand, _: &ExecutionReport) -> Result<FeedbackMessage, TranslationError> {
        Err(TranslationError::BackendUnavailable("connection refused".into()))
    }
}

/// Rule backend whose n-th feedback call (1-based) fails.
struct FlakyFeedback {
    inner: RuleBackend,
    fail_on: usize,
    calls: AtomicUsize,
}

impl Backend for FlakyFeedback {
    fn name(&self) -> &str {
        "flaky"
    }
    fn translate(&self, i: &Instruction, b: &PromptBundle) -> Result<ExtractedCommand, TranslationError> {
        self.inner.translate(i, b)
    }
    fn feedback(&self, i: &Instruction, c: &ExtractedCommand, r: &ExecutionReport) -> Result<FeedbackMessage, TranslationError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) + 1 == self.fail_on {
            return Err(TranslationError::BackendUnavailable("HTTP 500".into()));
        }
        self.inner.feedback(i, c, r)
    }
}

#[test]
fn start_driving_from_stopped() {
    let (p, handle) = pipeline_with(Arc::new(RuleBackend::shipped()));
    assert_eq!(handle.snapshot().unwrap().mode, OperationMode::Stopped);
    let rec = p.submit("s", "Start driving autonomously").unwrap();
    let cmd = rec.command.as_ref().unwrap();
    assert_eq!(cmd.category, Category::Mission);
    assert_eq!(cmd.action.as_ref().unwrap().as_str(), "START_DRIVING");
    assert_eq!(rec.outcome, Outcome::Success);
    assert!(rec.feedback.text.starts_with("Starting the drive"), "{}", rec.feedback.text);
    assert_eq!(handle.snapshot().unwrap().mode, OperationMode::Driving);
    assert!(rec.stages_ordered());
}

#[test]
fn backend_down_leaves_sim_untouched() {
    let (p, handle) = pipeline_with(Arc::new(DownBackend));
    let before = handle.state_hash().unwrap();
    let rec = p.submit("s", "Start driving autonomously").unwrap();
    assert_eq!(handle.state_hash().unwrap(), before);
    assert_eq!(rec.outcome, Outcome::TranslationError);
    assert_eq!(rec.failed_stage(), Some(Stage::Translation));
    assert!(matches!(rec.translation_error, Some(TranslationError::BackendUnavailable(_))));
    assert!(rec.execution.is_none() && rec.command.is_none());
    assert_eq!(rec.feedback.source, FeedbackSource::Fallback);
    assert!(rec.feedback.text.starts_with("Sorry"), "{}", rec.feedback.text);
    assert!(rec.stages_ordered());
}

#[test]
fn green_light_without_light_ahead_fails() {
    let (p, handle) = pipeline_with(Arc::new(RuleBackend::shipped()));
    // Oracle: with the default route, the only light is on a1. Past it there is none.
    handle.inspect(|s| assert!(s.snapshot().red_light_ahead_m.is_some())).unwrap();
    p.submit("s", "Start driving autonomously").unwrap();
    p.submit("s", "The traffic light is green").unwrap();
    handle.run_until(60.0).unwrap();
    assert!(handle.snapshot().unwrap().red_light_ahead_m.is_none());

    let rec = p.submit("s", "The traffic light is green").unwrap();
    assert_eq!(rec.outcome, Outcome::Failed);
    let report = rec.execution.as_ref().unwrap();
    assert_eq!(report.status, ExecStatus::Failed);
    assert!(matches!(report.failure, Some(CapabilityError::PreconditionFailed(_))));
    assert!(rec.feedback.text.contains("no red traffic light"), "{}", rec.feedback.text);
}

#[test]
fn rejected_command_feedback_names_reason() {
    let (p, handle) = pipeline_with(Arc::new(RuleBackend::shipped()));
    let before = handle.state_hash().unwrap();
    let rec = p.submit("s", "Set the maximum speed to 900 km/h").unwrap();
    assert_eq!(rec.outcome, Outcome::Rejected);
    assert_eq!(rec.validation.as_ref().unwrap().reason, Some(ReasonCode::OutOfBounds));
    assert!(rec.feedback.text.contains("130"), "{}", rec.feedback.text);
    assert_eq!(handle.state_hash().unwrap(), before);

    let rec = p.submit("s", "Tell me a joke").unwrap();
    assert_eq!(rec.outcome, Outcome::Rejected);
    assert_eq!(rec.validation.as_ref().unwrap().reason, Some(ReasonCode::OutOfScopeCommand));
}

#[test]
fn feedback_failure_is_recorded_with_fallback_text() {
    let backend = FlakyFeedback { inner: RuleBackend::shipped(), fail_on: 1, calls: AtomicUsize::new(0) };
    let (p, _handle) = pipeline_with(Arc::new(backend));
    let rec = p.submit("s", "What is the current speed limit?").unwrap();
    assert_eq!(rec.outcome, Outcome::FeedbackError);
    assert_eq!(rec.failed_stage(), Some(Stage::Feedback));
    assert_eq!(rec.execution.as_ref().unwrap().status, ExecStatus::Success);
    assert_eq!(rec.feedback.source, FeedbackSource::Fallback);
    assert!(rec.feedback.text.contains("50"), "{}", rec.feedback.text);
}

#[test]
fn shipped_schedule_all_succeed() {
    let schedule = Schedule::parse(assets::SCHEDULE).unwrap();
    let run = run_scripted_schedule(&ScenarioSetup::shipped(), &schedule, Arc::new(RuleBackend::shipped())).unwrap();
    assert_eq!(run.records.len(), 6);
    for r in &run.records {
        assert_eq!(r.outcome, Outcome::Success, "{}: {:?}", r.instruction.text, r.execution);
        assert!(r.stages_ordered());
    }
    assert_eq!(run.final_status.mode, OperationMode::Stopped);
    assert_eq!(run.final_status.v, 0.0);
}

#[test]
fn turn_right_replacement_fails_once() {
    let schedule = Schedule::parse(assets::SCHEDULE).unwrap();
    let idx = schedule.items().iter().position(|i| i.text.contains("straight")).unwrap();
    let schedule = schedule.with_text(idx, "Turn right at the next intersection.");
    let run = run_scripted_schedule(&ScenarioSetup::shipped(), &schedule, Arc::new(RuleBackend::shipped())).unwrap();
    let outcomes: Vec<Outcome> = run.records.iter().map(|r| r.outcome).collect();
    assert_eq!(outcomes.iter().filter(|o| **o == Outcome::Success).count(), 5);
    assert_eq!(outcomes[idx], Outcome::Failed);
    let failure = run.records[idx].execution.as_ref().unwrap().failure.clone();
    assert!(matches!(failure, Some(CapabilityError::PreconditionFailed(_))));
}

#[test]
fn persisted_log_is_ordered_and_survives_torn_write() {
    let dir = tempfile::tempdir().unwrap();
    let log = Arc::new(LogStore::<InteractionRecord>::open(dir.path()).unwrap());
    let (p, _handle) = pipeline_with(Arc::new(RuleBackend::shipped()));
    let p = p.with_log(log.clone());
    for text in ["What is the current speed limit?", "Start driving autonomously", "Fly to the moon", "Stop the car"] {
        p.submit("cabin", text).unwrap();
    }
    append_raw(&log.path_for("cabin").unwrap(), b"{\"id\":\"cabin-5\",\"se").unwrap();

    let loaded = log.load("cabin").unwrap();
    assert!(loaded.truncated_tail);
    assert_eq!(loaded.records.len(), 4);
    for (i, r) in loaded.records.iter().enumerate() {
        assert_eq!(r.seq, i as u64 + 1);
        assert!(r.stages_ordered(), "{}", r.id);
        if matches!(r.feedback.source, FeedbackSource::Template | FeedbackSource::Model) {
            assert!(r.execution.is_some());
        }
    }
    assert_eq!(p.records("cabin").unwrap(), loaded.records);
}

#[test]
fn sessions_are_serialized_and_independent() {
    let (p, _handle) = pipeline_with(Arc::new(RuleBackend::shipped()));
    let p = Arc::new(p);
    let threads: Vec<_> = (0..4)
        .map(|n| {
            let p = p.clone();
            std::thread::spawn(move || {
                for _ in 0..5 {
                    p.submit(&format!("s{n}"), "What is the current speed limit?").unwrap();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    for n in 0..4 {
        let recs = p.records(&format!("s{n}")).unwrap();
        let seqs: Vec<u64> = recs.iter().map(|r| r.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4, 5]);
    }
}

#[test]
fn telemetry_cadence() {
    let setup = ScenarioSetup::shipped();
    let sim = Simulation::new(setup.map.clone(), setup.sim.clone()).unwrap();
    let handle = SimHandle::spawn(sim, KernelOptions { pacing: Pacing::Lockstep, ..Default::default() });
    let rx = handle.subscribe();
    handle.run_until(5.0).unwrap();
    let frames: Vec<_> = rx.try_iter().collect();
    // 5 s at 10 Hz.
    assert!((48..=52).contains(&frames.len()), "{}", frames.len());
    assert!((frames[1].t - frames[0].t - 0.1).abs() <= 0.02 + 1e-9);
    assert!(frames.windows(2).all(|w| w[1].t > w[0].t));
    assert!(frames.iter().all(|f| f.v == 0.0));
    handle.shutdown();
}

#[test]
fn invalid_session_is_refused_before_any_stage() {
    let (p, handle) = pipeline_with(Arc::new(RuleBackend::shipped()));
    let before = handle.state_hash().unwrap();
    for bad in ["", "../etc", "a b", "ünï"] {
        assert!(matches!(p.submit(bad, "Start driving autonomously"), Err(avcopilot_core::pipeline::PipelineError::InvalidSession(_))));
        assert!(p.records(bad).is_err());
    }
    assert_eq!(handle.state_hash().unwrap(), before);
    // A refused id does not consume a sequence number elsewhere.
    assert_eq!(p.submit("ok", "What is the current speed limit?").unwrap().seq, 1);
}

#[test]
fn empty_schedule_idles() {
    let schedule = Schedule::parse("# nothing scheduled\n").unwrap();
    let run = run_scripted_schedule(&ScenarioSetup::shipped(), &schedule, Arc::new(RuleBackend::shipped())).unwrap();
    assert!(run.records.is_empty());
    assert!(run.trajectory.iter().all(|s| s.v == 0.0));
    assert_eq!(run.final_status.mode, OperationMode::Stopped);
}
