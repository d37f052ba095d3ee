//! Evaluation harness: translation accuracy and latency over an instruction
//! corpus, and task success over repeated scripted drives.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets;
use crate::corpus::{parse_corpus, CorpusEntry};
use crate::dsl::{Category, ExtractedCommand};
use crate::pipeline::{knowledge_base, run_scripted_schedule, InteractionRecord, Outcome, ScenarioError, ScenarioSetup, Schedule, Stage};
use crate::registry::ActionRegistry;
use crate::sim::{AvStatus, RouteMap, SimConfig, Simulation};
use crate::stats::{Boxplot, Summary};
use crate::translator::{assemble_for, Ablation, Backend, IclExample, Instruction, TranslationError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus is empty; accuracy is undefined")]
    EmptyCorpus,
    #[error("at least one run is required")]
    NoRuns,
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("writing results: {0}")]
    Io(#[from] io::Error),
}

/// Published reference figures for one ablation configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub n: usize,
    pub accuracy_pct: f64,
    pub mean_s: f64,
    pub median_s: f64,
}

pub fn reference_row(ablation: Ablation) -> ReferenceRow {
    let (accuracy_pct, mean_s, median_s) = match ablation {
        Ablation::Baseline => (97.0, 1.723, 1.669),
        Ablation::NoStatus => (96.0, 1.735, 1.674),
        Ablation::ZeroShot => (73.0, 1.703, 1.683),
        Ablation::KbOnly => (66.3, 1.717, 1.689),
    };
    ReferenceRow { n: 200, accuracy_pct, mean_s, median_s }
}

/// Where a wrong translation first deviates from the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLevel {
    Category,
    Action,
    Parameter,
    /// No command was produced at all.
    Translation,
}

pub fn classify(predicted: &ExtractedCommand, expected: &ExtractedCommand) -> Option<ErrorLevel> {
    if predicted.to_dsl() == expected.to_dsl() {
        None
    } else if predicted.category != expected.category {
        Some(ErrorLevel::Category)
    } else if predicted.action != expected.action {
        Some(ErrorLevel::Action)
    } else {
        Some(ErrorLevel::Parameter)
    }
}

/// Inputs shared by every prompt of a translation run.
#[derive(Debug, Clone)]
pub struct PromptContext {
    pub knowledge_base: String,
    pub examples: Vec<IclExample>,
    pub status: AvStatus,
}

impl PromptContext {
    /// Shipped knowledge base and examples, status of a parked vehicle on
    /// the shipped map.
    pub fn shipped() -> Self {
        let registry = ActionRegistry::parse(assets::DEFAULT_REGISTRY).expect("shipped registry parses");
        let map = Arc::new(RouteMap::parse(assets::DEFAULT_MAP).expect("shipped map parses"));
        PromptContext {
            knowledge_base: knowledge_base(&registry),
            examples: parse_corpus(assets::ICL_EXAMPLES)
                .expect("shipped examples parse")
                .iter()
                .map(IclExample::from)
                .collect(),
            status: Simulation::new(map, SimConfig::default()).expect("shipped map simulates").snapshot(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryResult {
    pub id: String,
    pub instruction: String,
    pub category: Category,
    pub expected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation_error: Option<TranslationError>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_level: Option<ErrorLevel>,
    pub latency_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub n: usize,
    pub correct: usize,
    pub accuracy_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub category: usize,
    pub action: usize,
    pub parameter: usize,
    pub translation: usize,
}

impl ErrorBreakdown {
    pub fn total(&self) -> usize {
        self.category + self.action + self.parameter + self.translation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub backend: String,
    pub ablation: Ablation,
    pub n: usize,
    pub correct: usize,
    pub accuracy_pct: f64,
    /// Translation time [s].
    pub mean_s: f64,
    pub median_s: f64,
    pub std_s: f64,
    pub per_category: BTreeMap<Category, CategoryAccuracy>,
    pub errors: ErrorBreakdown,
    pub reference: ReferenceRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationEval {
    pub stats: EvalStats,
    pub boxplot: Boxplot,
    pub entries: Vec<EntryResult>,
}

impl TranslationEval {
    pub fn latencies(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.latency_s).collect()
    }
}

fn pct(num: usize, den: usize) -> f64 {
    100.0 * num as f64 / den as f64
}

/// Translates every corpus instruction and scores it by exact equality of
/// the canonical command text. Only the translate call is timed.
pub fn run_translation_eval(
    corpus: &[CorpusEntry],
    backend: &dyn Backend,
    ablation: Ablation,
    ctx: &PromptContext,
) -> Result<TranslationEval, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut entries = Vec::with_capacity(corpus.len());
    for e in corpus {
        let instr = Instruction::new("eval", e.instruction.clone()).map_err(|_| EvalError::EmptyCorpus)?;
        let bundle = assemble_for(ablation, &ctx.knowledge_base, Some(&ctx.status), &ctx.examples, &instr);
        let started = Instant::now();
        let result = backend.translate(&instr, &bundle);
        let latency_s = started.elapsed().as_secs_f64();
        let (predicted, translation_error, error_level) = match result {
            Ok(cmd) => (Some(cmd.to_dsl()), None, classify(&cmd, &e.expected)),
            Err(err) => (None, Some(err), Some(ErrorLevel::Translation)),
        };
        entries.push(EntryResult {
            id: e.id.clone(),
            instruction: e.instruction.clone(),
            category: e.expected.category,
            expected: e.expected.to_dsl(),
            correct: error_level.is_none(),
            predicted,
            translation_error,
            error_level,
            latency_s,
        });
    }

    let n = entries.len();
    let correct = entries.iter().filter(|e| e.correct).count();
    let mut per_category = BTreeMap::new();
    for cat in Category::ALL {
        let of_cat: Vec<&EntryResult> = entries.iter().filter(|e| e.category == cat).collect();
        if of_cat.is_empty() {
            continue;
        }
        let ok = of_cat.iter().filter(|e| e.correct).count();
        per_category.insert(cat, CategoryAccuracy { n: of_cat.len(), correct: ok, accuracy_pct: pct(ok, of_cat.len()) });
    }
    let mut errors = ErrorBreakdown::default();
    for level in entries.iter().filter_map(|e| e.error_level) {
        match level {
            ErrorLevel::Category => errors.category += 1,
            ErrorLevel::Action => errors.action += 1,
            ErrorLevel::Parameter => errors.parameter += 1,
            ErrorLevel::Translation => errors.translation += 1,
        }
    }
    let latencies: Vec<f64> = entries.iter().map(|e| e.latency_s).collect();
    let summary = Summary::of(&latencies).ok_or(EvalError::EmptyCorpus)?;
    Ok(TranslationEval {
        stats: EvalStats {
            backend: backend.name().to_string(),
            ablation,
            n,
            correct,
            accuracy_pct: pct(correct, n),
            mean_s: summary.mean,
            median_s: summary.median,
            std_s: summary.std,
            per_category,
            errors,
            reference: reference_row(ablation),
        },
        boxplot: Boxplot::of(&latencies).ok_or(EvalError::EmptyCorpus)?,
        entries,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Table layout of the translation results next to the reference row.
pub fn translation_summary(eval: &TranslationEval) -> String {
    let s = &eval.stats;
    let r = &s.reference;
    let mut out = String::new();
    let _ = writeln!(out, "{:<26} {:>5} {:>9} {:>10} {:>11} {:>11} {:>9}", "Experiment", "N", "Correct", "Acc. in %", "mean t_r/s", "median t_r/s", "sigma/s");
    let _ = writeln!(
        out,
        "{:<26} {:>5} {:>9} {:>10.1} {:>11.6} {:>11.6} {:>9.6}",
        format!("{} ({})", s.ablation, s.backend),
        s.n,
        format!("{}/{}", s.correct, s.n),
        s.accuracy_pct,
        s.mean_s,
        s.median_s,
        s.std_s
    );
    let _ = writeln!(
        out,
        "{:<26} {:>5} {:>9} {:>10.1} {:>11.3} {:>11.3} {:>9}",
        format!("{} (reference)", s.ablation),
        r.n,
        "-",
        r.accuracy_pct,
        r.mean_s,
        r.median_s,
        "-"
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "Per category:");
    for (cat, c) in &s.per_category {
        let _ = writeln!(out, "  {:<14} {:>3}/{:<3} {:>6.1} %", cat.token(), c.correct, c.n, c.accuracy_pct);
    }
    let e = &s.errors;
    let _ = writeln!(
        out,
        "Errors: {} total (category {}, action {}, parameter {}, no command {})",
        e.total(),
        e.category,
        e.action,
        e.parameter,
        e.translation
    );
    out
}

/// Writes `stats.json`, `boxplot.json`, `latencies.txt`, `results.jsonl`
/// and `summary.txt` into `dir`.
pub fn write_translation_report(eval: &TranslationEval, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("stats.json"), &eval.stats)?;
    write_json(&dir.join("boxplot.json"), &eval.boxplot)?;
    let mut lat = String::from("# id translation_s\n");
    let mut results = String::new();
    for e in &eval.entries {
        let _ = writeln!(lat, "{} {:.9}", e.id, e.latency_s);
        results.push_str(&serde_json::to_string(e).map_err(io::Error::other)?);
        results.push('\n');
    }
    fs::write(dir.join("latencies.txt"), lat)?;
    fs::write(dir.join("results.jsonl"), results)?;
    fs::write(dir.join("summary.txt"), translation_summary(eval))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSource {
    pub run: usize,
    pub record: usize,
    pub instruction: String,
    pub stage: Stage,
    pub description: String,
}

fn describe(r: &InteractionRecord) -> String {
    match r.outcome {
        Outcome::Success => "success".into(),
        Outcome::TranslationError => match &r.translation_error {
            Some(TranslationError::BackendUnavailable(_)) => "translation: backend unavailable".into(),
            _ => "translation: unparseable response".into(),
        },
        Outcome::Rejected => format!(
            "validation: {}",
            r.validation.as_ref().and_then(|v| v.reason).map_or("rejected", |c| c.as_str())
        ),
        Outcome::Failed => format!(
            "execution: {}",
            r.execution.as_ref().and_then(|e| e.failure.as_ref()).map_or("failed".into(), ToString::to_string)
        ),
        Outcome::ExecutionError => "execution: simulation unavailable".into(),
        Outcome::FeedbackError => match &r.feedback_error {
            Some(TranslationError::BackendUnavailable(_)) => "feedback: backend unavailable".into(),
            _ => "feedback: unusable response".into(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub success: bool,
    /// Categories with at least one successful record.
    pub categories_succeeded: Vec<Category>,
    pub failures: Vec<FailureSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReference {
    pub runs: usize,
    pub successful: usize,
    pub tsr_pct: f64,
    pub execution_ms: (f64, f64, f64),
    pub feedback_s: (f64, f64, f64),
}

pub const SCENARIO_REFERENCE: ScenarioReference = ScenarioReference {
    runs: 30,
    successful: 29,
    tsr_pct: 96.7,
    execution_ms: (5.737, 0.461, 8.491),
    feedback_s: (1.846, 1.778, 0.355),
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub backend: String,
    pub runs: usize,
    pub successful: usize,
    pub tsr_pct: f64,
    /// Failure description → count.
    pub failure_sources: BTreeMap<String, usize>,
    /// Latencies over the successful runs.
    pub execution_ms: Option<Summary>,
    pub feedback_s: Option<Summary>,
    pub translation_s: Option<Summary>,
    /// Every category succeeded at least once in every run.
    pub all_categories_every_run: bool,
    pub per_run: Vec<RunResult>,
    pub reference: ScenarioReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEval {
    pub report: ScenarioReport,
    /// Execution latencies of every executed record of every run [ms].
    pub execution_ms: Vec<f64>,
    pub feedback_s: Vec<f64>,
    pub translation_s: Vec<f64>,
    /// Per-run records, in run order.
    #[serde(skip)]
    pub records: Vec<Vec<InteractionRecord>>,
}

/// Replays `schedule` `runs` times, each on a fresh simulation. A run
/// succeeds iff all of its records end in SUCCESS.
pub fn run_scenario_eval(
    runs: usize,
    setup: &ScenarioSetup,
    schedule: &Schedule,
    backend: Arc<dyn Backend>,
) -> Result<ScenarioEval, EvalError> {
    if runs == 0 {
        return Err(EvalError::NoRuns);
    }
    let operative: Vec<Category> = Category::ALL.into_iter().filter(|c| *c != Category::OutOfScope).collect();
    let mut per_run = Vec::with_capacity(runs);
    let mut all_records = Vec::with_capacity(runs);
    let (mut exec, mut fb, mut tr) = (Vec::new(), Vec::new(), Vec::new());
    let (mut exec_all, mut fb_all, mut tr_all) = (Vec::new(), Vec::new(), Vec::new());
    let mut failure_sources = BTreeMap::new();

    for run in 1..=runs {
        let result = run_scripted_schedule(setup, schedule, backend.clone())?;
        let mut failures = Vec::new();
        let mut categories_succeeded = Vec::new();
        for (i, r) in result.records.iter().enumerate() {
            if let Some(stage) = r.failed_stage() {
                let description = describe(r);
                *failure_sources.entry(description.clone()).or_insert(0) += 1;
                failures.push(FailureSource { run, record: i + 1, instruction: r.instruction.text.clone(), stage, description });
            } else if let Some(cat) = r.command.as_ref().map(|c| c.category) {
                if !categories_succeeded.contains(&cat) {
                    categories_succeeded.push(cat);
                }
            }
        }
        categories_succeeded.sort();
        let success = failures.is_empty();
        for r in &result.records {
            let (e, f, t) = if success { (&mut exec, &mut fb, &mut tr) } else { (&mut exec_all, &mut fb_all, &mut tr_all) };
            if let Some(ms) = r.latency.execution_ms {
                e.push(ms);
            }
            if r.execution.is_some() {
                f.push(r.latency.feedback_s);
            }
            t.push(r.latency.translation_s);
        }
        per_run.push(RunResult { run, success, categories_succeeded, failures });
        all_records.push(result.records);
    }

    let successful = per_run.iter().filter(|r| r.success).count();
    let report = ScenarioReport {
        backend: backend.name().to_string(),
        runs,
        successful,
        tsr_pct: pct(successful, runs),
        failure_sources,
        execution_ms: Summary::of(&exec),
        feedback_s: Summary::of(&fb),
        translation_s: Summary::of(&tr),
        all_categories_every_run: per_run.iter().all(|r| operative.iter().all(|c| r.categories_succeeded.contains(c))),
        per_run,
        reference: SCENARIO_REFERENCE,
    };
    exec.extend(exec_all);
    fb.extend(fb_all);
    tr.extend(tr_all);
    Ok(ScenarioEval { report, execution_ms: exec, feedback_s: fb, translation_s: tr, records: all_records })
}

fn fmt_summary(s: &Option<Summary>, digits: usize) -> String {
    match s {
        Some(s) => format!("mean={:.d$}, median={:.d$}, sigma={:.d$} (n={})", s.mean, s.median, s.std, s.n, d = digits),
        None => "n/a".into(),
    }
}

pub fn scenario_summary(eval: &ScenarioEval) -> String {
    let r = &eval.report;
    let x = &r.reference;
    let mut out = String::new();
    let _ = writeln!(out, "{:<30} {:<44} Reference", "Metric", format!("Value ({})", r.backend));
    let _ = writeln!(out, "{:<30} {:<44} {}/{}", "Successful runs", format!("{}/{}", r.successful, r.runs), x.successful, x.runs);
    let _ = writeln!(out, "{:<30} {:<44} {:.1} %", "Task success rate", format!("{:.1} %", r.tsr_pct), x.tsr_pct);
    let sources = if r.failure_sources.is_empty() {
        "none".to_string()
    } else {
        r.failure_sources.iter().map(|(k, v)| format!("{v}x {k}")).collect::<Vec<_>>().join("; ")
    };
    let _ = writeln!(out, "{:<30} {:<44} 1x API server error", "Failure source", sources);
    let (em, emd, es) = x.execution_ms;
    let _ = writeln!(
        out,
        "{:<30} {:<44} mean={em}, median={emd}, sigma={es}",
        "Command execution (ms)",
        fmt_summary(&r.execution_ms, 3)
    );
    let (fm, fmd, fs) = x.feedback_s;
    let _ = writeln!(
        out,
        "{:<30} {:<44} mean={fm}, median={fmd}, sigma={fs}",
        "Feedback generation (s)",
        fmt_summary(&r.feedback_s, 6)
    );
    let _ = writeln!(out, "{:<30} {}", "Translation (s)", fmt_summary(&r.translation_s, 6));
    let _ = writeln!(out, "{:<30} {}", "All categories every run", r.all_categories_every_run);
    out
}

/// Writes `report.json`, `boxplot.json`, `latencies.txt` and `summary.txt`.
pub fn write_scenario_report(eval: &ScenarioEval, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), &eval.report)?;
    let boxes = BTreeMap::from([
        ("execution_ms", Boxplot::of(&eval.execution_ms)),
        ("feedback_s", Boxplot::of(&eval.feedback_s)),
        ("translation_s", Boxplot::of(&eval.translation_s)),
    ]);
    write_json(&dir.join("boxplot.json"), &boxes)?;
    let mut lat = String::from("# run record translation_s execution_ms feedback_s outcome\n");
    for (run, records) in eval.records.iter().enumerate() {
        for r in records {
            let _ = writeln!(
                lat,
                "{} {} {:.9} {} {:.9} {:?}",
                run + 1,
                r.seq,
                r.latency.translation_s,
                r.latency.execution_ms.map_or("-".into(), |v| format!("{v:.6}")),
                r.latency.feedback_s,
                r.outcome
            );
        }
    }
    fs::write(dir.join("latencies.txt"), lat)?;
    fs::write(dir.join("summary.txt"), scenario_summary(eval))?;
    Ok(())
}
