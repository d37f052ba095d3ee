use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use avcopilot_core::assets;
use avcopilot_core::corpus::parse_corpus;
use avcopilot_core::dsl::{Category, ExtractedCommand};
use avcopilot_core::eval::{
    run_scenario_eval, run_translation_eval, write_scenario_report, write_translation_report, EvalStats, PromptContext,
};
use avcopilot_core::interface::ExecutionReport;
use avcopilot_core::pipeline::{ScenarioSetup, Schedule, Stage};
use avcopilot_core::stats::Boxplot;
use avcopilot_core::translator::{
    Ablation, Backend, FeedbackMessage, Instruction, PromptBundle, RuleBackend, TranslationError,
};

/// Brute-force oracle: O(n^2) rank-based quantile, two-pass variance.
fn oracle_quantile(xs: &[f64], p: f64) -> f64 {
    let n = xs.len();
    let rank_of = |k: usize| -> f64 {
        // k-th smallest by counting, no sort.
        *xs.iter()
            .find(|&&x| {
                let below = xs.iter().filter(|&&y| y < x).count();
                let equal = xs.iter().filter(|&&y| y == x).count();
                below <= k && k < below + equal
            })
            .unwrap()
    };
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    rank_of(lo) + (h - lo as f64) * (rank_of(h.ceil() as usize) - rank_of(lo))
}

fn oracle_stats(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mut sum = 0.0;
    for x in xs {
        sum += x;
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for x in xs {
        ss += (x - mean).powi(2);
    }
    (mean, oracle_quantile(xs, 0.5), (ss / (n - 1.0)).sqrt())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

#[test]
fn rule_backend_translation_eval() {
    let corpus = parse_corpus(assets::CORPUS).unwrap();
    let eval = run_translation_eval(&corpus, &RuleBackend::shipped(), Ablation::Baseline, &PromptContext::shipped()).unwrap();
    let s = &eval.stats;
    assert_eq!(s.n, corpus.len());
    assert_eq!(s.correct, s.n, "{:#?}", eval.entries.iter().filter(|e| !e.correct).collect::<Vec<_>>());
    assert_eq!(s.accuracy_pct, 100.0);
    assert_eq!(s.errors.total(), 0);
    assert_eq!(s.per_category.values().map(|c| c.n).sum::<usize>(), s.n);

    let lat = eval.latencies();
    let (mean, median, std) = oracle_stats(&lat);
    assert!(close(s.mean_s, mean) && close(s.median_s, median) && close(s.std_s, std));
    assert!(close(eval.boxplot.q1, oracle_quantile(&lat, 0.25)));
    assert!(close(eval.boxplot.q3, oracle_quantile(&lat, 0.75)));

    let dir = tempfile::tempdir().unwrap();
    write_translation_report(&eval, dir.path()).unwrap();
    let stats: EvalStats = serde_json::from_str(&std::fs::read_to_string(dir.path().join("stats.json")).unwrap()).unwrap();
    assert_eq!(&stats, s);
    let boxplot: Boxplot = serde_json::from_str(&std::fs::read_to_string(dir.path().join("boxplot.json")).unwrap()).unwrap();
    assert_eq!(boxplot, eval.boxplot);
    let raw = std::fs::read_to_string(dir.path().join("latencies.txt")).unwrap();
    assert_eq!(raw.lines().filter(|l| !l.starts_with('#')).count(), s.n);
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("100.0") && summary.contains("97.0") && summary.contains("1.723") && summary.contains("1.669"));
}

/// Answers one fixed command; exercises the error taxonomy.
struct Constant(ExtractedCommand);

impl Backend for Constant {
    fn name(&self) -> &str {
        "constant"
    }
    fn translate(&self, _: &Instruction, _: &PromptBundle) -> Result<ExtractedCommand, TranslationError> {
        Ok(self.0.clone())
    }
    fn feedback(&self, _: &Instruction, _: &ExtractedCommand, _: &ExecutionReport) -> Result<FeedbackMessage, TranslationError> {
        unreachable!()
    }
}

#[test]
fn error_breakdown_sums_to_misses() {
    let corpus = parse_corpus(assets::CORPUS).unwrap();
    let eval = run_translation_eval(&corpus, &Constant(ExtractedCommand::out_of_scope()), Ablation::KbOnly, &PromptContext::shipped())
        .unwrap();
    let s = &eval.stats;
    let oos = corpus.iter().filter(|e| e.expected.category == Category::OutOfScope).count();
    assert_eq!(s.correct, oos);
    assert_eq!(s.errors.total(), s.n - oos);
    assert_eq!(s.errors.category, s.n - oos);
    assert_eq!(s.per_category[&Category::OutOfScope].accuracy_pct, 100.0);
    assert_eq!(s.per_category[&Category::Info].accuracy_pct, 0.0);
    assert_eq!(s.reference.accuracy_pct, 66.3);
}

/// Rule backend whose n-th translate call (1-based) fails.
struct FailOn {
    inner: RuleBackend,
    n: usize,
    calls: AtomicUsize,
}

impl Backend for FailOn {
    fn name(&self) -> &str {
        "fail-on"
    }
    fn translate(&self, i: &Instruction, b: &PromptBundle) -> Result<ExtractedCommand, TranslationError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) + 1 == self.n {
            return Err(TranslationError::BackendUnavailable("HTTP 500".into()));
        }
        self.inner.translate(i, b)
    }
    fn feedback(&self, i: &Instruction, c: &ExtractedCommand, r: &ExecutionReport) -> Result<FeedbackMessage, TranslationError> {
        self.inner.feedback(i, c, r)
    }
}

#[test]
fn forced_failure_is_attributed() {
    let schedule = Schedule::parse(assets::SCHEDULE).unwrap();
    let backend = Arc::new(FailOn { inner: RuleBackend::shipped(), n: 3, calls: AtomicUsize::new(0) });
    let eval = run_scenario_eval(1, &ScenarioSetup::shipped(), &schedule, backend).unwrap();
    let r = &eval.report;
    assert_eq!(r.tsr_pct, 0.0);
    assert_eq!(r.successful, 0);
    let failures = &r.per_run[0].failures;
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].record, 3);
    assert_eq!(failures[0].stage, Stage::Translation);
    assert_eq!(r.failure_sources.get("translation: backend unavailable"), Some(&1));
    assert!(r.execution_ms.is_none());
}

#[test]
fn scenario_eval_small() {
    let schedule = Schedule::parse(assets::SCHEDULE).unwrap();
    let eval = run_scenario_eval(3, &ScenarioSetup::shipped(), &schedule, Arc::new(RuleBackend::shipped())).unwrap();
    let r = &eval.report;
    assert_eq!((r.runs, r.successful, r.tsr_pct), (3, 3, 100.0));
    assert!(r.all_categories_every_run);
    assert_eq!(eval.execution_ms.len(), 18);
    let (mean, median, std) = oracle_stats(&eval.execution_ms);
    let e = r.execution_ms.unwrap();
    assert!(close(e.mean, mean) && close(e.median, median) && close(e.std, std));

    let dir = tempfile::tempdir().unwrap();
    write_scenario_report(&eval, dir.path()).unwrap();
    for f in ["report.json", "boxplot.json", "latencies.txt", "summary.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("3/3") && summary.contains("100.0 %"), "{summary}");
}
