//! The generate-execute-correct loop.
//!
//! One run plans and retrieves once, then makes up to `n_threshold`
//! attempts. Each attempt generates a script, pre-checks it, executes it and
//! (optionally) validates it. A failed attempt turns into an
//! [`ErrorReport`] that drives the next attempt when feedback is enabled.

use std::sync::mpsc::SyncSender;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::executor::{ExecBackend, ExecStatus, ExecutionReport, DEFAULT_TIMEOUT_MS};
use crate::llm::{ChatBackend, CompletionParams};
use crate::planner::{
    fallback_plan, plan_query, retrieve_context, KnowledgeContext, KnowledgeStores, PlanSource, QueryPlan,
    RetrievalMode,
};
use crate::precheck::{precheck, ConventionCatalog, PrecheckReport};
use crate::prompt::{build_feedback_prompt, build_system_prompt, extract_code, ErrorReport, FewShot};
use crate::validator::{validate, Severity, ValidationVerdict};

pub const DEFAULT_N_THRESHOLD: usize = 5;
pub const DEFAULT_K: usize = 4;
pub const DEFAULT_CONTEXT_BUDGET: usize = 6000;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub rag_mode: RetrievalMode,
    pub feedback_enabled: bool,
    pub planner_enabled: bool,
    pub validator_enabled: bool,
    pub n_threshold: usize,
    pub k: usize,
    pub context_budget: usize,
    pub exec_timeout_ms: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self::full_model()
    }
}

impl AgentConfig {
    pub fn full_model() -> Self {
        Self {
            rag_mode: RetrievalMode::EnhancedVector,
            feedback_enabled: true,
            planner_enabled: true,
            validator_enabled: true,
            n_threshold: DEFAULT_N_THRESHOLD,
            k: DEFAULT_K,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            exec_timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }

    pub fn single_pass() -> Self {
        Self {
            feedback_enabled: false,
            ..Self::full_model()
        }
    }

    pub fn simple_search() -> Self {
        Self {
            planner_enabled: false,
            ..Self::full_model()
        }
    }

    pub fn execution_only() -> Self {
        Self {
            validator_enabled: false,
            ..Self::full_model()
        }
    }

    /// Ablation preset by label (case and separator insensitive).
    pub fn preset(name: &str) -> Option<Self> {
        let key: String = name
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "fullmodel" | "full" => Some(Self::full_model()),
            "singlepass" => Some(Self::single_pass()),
            "simplesearch" => Some(Self::simple_search()),
            "executiononly" => Some(Self::execution_only()),
            _ => None,
        }
    }

    pub fn check(&self) -> Result<(), AgentError> {
        if self.n_threshold < 1 {
            return Err(AgentError::Config("n_threshold must be at least 1".into()));
        }
        if self.exec_timeout_ms < 1 {
            return Err(AgentError::Config("exec_timeout_ms must be at least 1".into()));
        }
        if self.rag_mode != RetrievalMode::None && self.k < 1 {
            return Err(AgentError::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Plan,
    Retrieve,
    Generate,
    Precheck,
    Execute,
    Validate,
    Feedback,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEvent {
    pub seq: u64,
    pub phase: Phase,
    pub payload: serde_json::Value,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

pub trait EventSink {
    fn emit(&mut self, event: &AgentEvent);
}

/// Discards events; the result still carries the full log.
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&mut self, _event: &AgentEvent) {}
}

impl EventSink for Vec<AgentEvent> {
    fn emit(&mut self, event: &AgentEvent) {
        self.push(event.clone());
    }
}

/// Forwards events into a bounded channel; blocks while the channel is full.
/// A dropped receiver is ignored.
pub struct ChannelSink(pub SyncSender<AgentEvent>);

impl EventSink for ChannelSink {
    fn emit(&mut self, event: &AgentEvent) {
        let _ = self.0.send(event.clone());
    }
}

impl<F: FnMut(&AgentEvent)> EventSink for F {
    fn emit(&mut self, event: &AgentEvent) {
        self(event)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentResult {
    pub status: RunStatus,
    pub final_code: String,
    pub iterations_used: usize,
    pub warnings: Vec<String>,
    pub event_log: Vec<AgentEvent>,
    pub last_error: Option<String>,
    pub verdict: Option<ValidationVerdict>,
}

impl AgentResult {
    pub fn generate_count(&self) -> usize {
        self.event_log.iter().filter(|e| e.phase == Phase::Generate).count()
    }
}

/// Everything a run needs besides the request and configuration.
pub struct AgentDeps<'a> {
    pub llm: &'a dyn ChatBackend,
    /// Independent validator backend; the generation backend is used when absent.
    pub validator_llm: Option<&'a dyn ChatBackend>,
    pub stores: &'a KnowledgeStores,
    pub executor: &'a dyn ExecBackend,
    pub catalog: &'a ConventionCatalog,
    pub fewshots: &'a [FewShot],
}

/// Why an attempt did not end the run successfully.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttemptFailure {
    RuntimeError(String),
    Timeout { budget_ms: u64 },
    Critical(Vec<String>),
    NoCode,
}

/// State of a finished, failed attempt.
#[derive(Debug, Clone)]
pub struct AttemptState {
    pub iteration: usize,
    pub code: String,
    pub hints: Vec<String>,
    pub failure: AttemptFailure,
}

impl AttemptFailure {
    pub fn error_text(&self) -> String {
        match self {
            Self::RuntimeError(text) => text.clone(),
            Self::Timeout { budget_ms } => format!("Execution timed out after {budget_ms} ms"),
            Self::Critical(issues) => format!("SEMANTIC: {}", issues.join("; ")),
            Self::NoCode => "model output contained no code".to_owned(),
        }
    }
}

pub fn build_error_report_from_attempt(
    attempt: &AttemptState,
    request: &str,
    context: &KnowledgeContext,
) -> ErrorReport {
    ErrorReport {
        user_request: request.to_owned(),
        failed_code: attempt.code.clone(),
        error_text: attempt.failure.error_text(),
        precheck_hints: attempt.hints.clone(),
        context: context.clone(),
        iteration: attempt.iteration,
    }
}

struct Recorder<'s> {
    log: Vec<AgentEvent>,
    sink: &'s mut dyn EventSink,
}

impl Recorder<'_> {
    fn emit(&mut self, phase: Phase, payload: serde_json::Value) {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let event = AgentEvent {
            seq: self.log.len() as u64 + 1,
            phase,
            payload,
            timestamp,
        };
        self.sink.emit(&event);
        self.log.push(event);
    }
}

fn plan_payload(plan: &QueryPlan) -> serde_json::Value {
    json!({
        "source": match plan.source { PlanSource::Llm => "llm", PlanSource::Fallback => "fallback" },
        "subrequests": plan.subrequests,
    })
}

fn exec_payload(attempt: usize, report: &ExecutionReport) -> serde_json::Value {
    json!({
        "attempt": attempt,
        "status": report.status,
        "error_text": report.error_text,
        "warnings": report.warnings,
        "duration_ms": report.duration_ms,
        "stdout_tail": tail(&report.stdout, 2000),
    })
}

fn tail(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut start = s.len() - max;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    &s[start..]
}

fn precheck_payload(attempt: usize, report: &PrecheckReport) -> serde_json::Value {
    json!({
        "attempt": attempt,
        "findings": report.findings,
        "hints": report.hints,
        "changed": !report.findings.iter().all(|f| !f.is_corrective()),
    })
}

pub fn run_agent(request: &str, config: &AgentConfig, deps: &AgentDeps<'_>) -> Result<AgentResult, AgentError> {
    run_agent_with_sink(request, config, deps, &mut NullSink)
}

pub fn run_agent_with_sink(
    request: &str,
    config: &AgentConfig,
    deps: &AgentDeps<'_>,
    sink: &mut dyn EventSink,
) -> Result<AgentResult, AgentError> {
    let request = request.trim();
    if request.is_empty() {
        return Err(AgentError::InvalidRequest("request is empty".into()));
    }
    config.check()?;
    deps.stores
        .check_mode(config.rag_mode)
        .map_err(|e| AgentError::Config(e.to_string()))?;

    let mut rec = Recorder { log: Vec::new(), sink };

    let context = if config.rag_mode == RetrievalMode::None {
        rec.emit(Phase::Plan, json!({ "skipped": true, "reason": "rag_mode none" }));
        let ctx = KnowledgeContext::empty(RetrievalMode::None, config.k);
        rec.emit(
            Phase::Retrieve,
            json!({ "mode": "none", "fragments": 0, "total_chars": 0 }),
        );
        ctx
    } else {
        let plan = if config.planner_enabled {
            plan_query(request, deps.llm)
        } else {
            fallback_plan(request)
        }
        .map_err(|e| AgentError::InvalidRequest(e.to_string()))?;
        rec.emit(Phase::Plan, plan_payload(&plan));
        let ctx = retrieve_context(&plan, config.rag_mode, deps.stores, config.k, config.context_budget)
            .map_err(|e| AgentError::Config(e.to_string()))?;
        rec.emit(
            Phase::Retrieve,
            json!({
                "mode": config.rag_mode.as_str(),
                "fragments": ctx.fragments.len(),
                "total_chars": ctx.total_chars,
                "labels": ctx.fragments.iter().map(|f| f.label.as_str()).collect::<Vec<_>>(),
            }),
        );
        ctx
    };

    let validator_llm = deps.validator_llm.unwrap_or(deps.llm);
    let mut warnings: Vec<String> = Vec::new();
    let mut previous: Option<AttemptState> = None;
    let mut final_code = String::new();
    let mut last_error: Option<String> = None;
    let mut verdict: Option<ValidationVerdict> = None;
    let mut status = RunStatus::Failure;
    let mut iterations = 0usize;

    for attempt in 1..=config.n_threshold {
        iterations = attempt;
        let bundle = match &previous {
            None => build_system_prompt(&context, request, deps.fewshots),
            Some(prev) => build_feedback_prompt(
                &build_error_report_from_attempt(prev, request, &context),
                config.n_threshold,
            ),
        };
        let completion = match deps.llm.complete(&bundle.messages, &CompletionParams::generation()) {
            Ok(c) => c,
            Err(e) => {
                let msg = format!("generation failed: {e}");
                rec.emit(Phase::Generate, json!({ "attempt": attempt, "error": msg }));
                last_error = Some(msg);
                break;
            }
        };
        rec.emit(
            Phase::Generate,
            json!({
                "attempt": attempt,
                "backend": completion.backend,
                "latency_ms": completion.latency_ms,
                "truncated": completion.truncated,
                "prompt_chars": bundle.full_text().len(),
                "feedback": previous.is_some(),
            }),
        );

        let failure = match extract_code(&completion.text) {
            Err(_) => {
                final_code = completion.text.clone();
                (AttemptFailure::NoCode, Vec::new())
            }
            Ok(code) => {
                let checked = precheck(&code, deps.catalog);
                rec.emit(Phase::Precheck, precheck_payload(attempt, &checked));
                final_code = checked.corrected_code.clone();
                let report = match deps.executor.execute(&final_code, config.exec_timeout_ms) {
                    Ok(r) => r,
                    Err(e) => {
                        let msg = format!("execution backend failed: {e}");
                        rec.emit(Phase::Execute, json!({ "attempt": attempt, "error": msg }));
                        last_error = Some(msg);
                        break;
                    }
                };
                rec.emit(Phase::Execute, exec_payload(attempt, &report));
                match report.status {
                    ExecStatus::RuntimeError => {
                        (AttemptFailure::RuntimeError(report.error_text.clone()), checked.hints)
                    }
                    ExecStatus::Timeout => (
                        AttemptFailure::Timeout {
                            budget_ms: config.exec_timeout_ms,
                        },
                        checked.hints,
                    ),
                    ExecStatus::Success if !config.validator_enabled => {
                        status = RunStatus::Success;
                        last_error = None;
                        break;
                    }
                    ExecStatus::Success => {
                        let v = match validate(request, &final_code, &report, validator_llm) {
                            Ok(v) => v,
                            Err(e) => ValidationVerdict {
                                severity: Severity::Minor,
                                issues: vec![format!("validator unavailable: {e}")],
                                raw_text: String::new(),
                            },
                        };
                        rec.emit(
                            Phase::Validate,
                            json!({
                                "attempt": attempt,
                                "severity": v.severity,
                                "issues": v.issues,
                                "raw_text": v.raw_text,
                            }),
                        );
                        let critical = v.is_critical();
                        let issues = v.issues.clone();
                        verdict = Some(v);
                        if critical {
                            (AttemptFailure::Critical(issues), checked.hints)
                        } else {
                            for issue in issues {
                                if !warnings.contains(&issue) {
                                    warnings.push(issue);
                                }
                            }
                            status = RunStatus::Success;
                            last_error = None;
                            break;
                        }
                    }
                }
            }
        };
        let (failure, hints) = failure;
        let state = AttemptState {
            iteration: attempt,
            code: final_code.clone(),
            hints,
            failure,
        };
        last_error = Some(state.failure.error_text());
        if !config.feedback_enabled || attempt == config.n_threshold {
            break;
        }
        rec.emit(
            Phase::Feedback,
            json!({
                "attempt": attempt,
                "next_attempt": attempt + 1,
                "error_text": state.failure.error_text(),
                "hints": state.hints,
            }),
        );
        previous = Some(state);
    }

    rec.emit(
        Phase::Done,
        json!({
            "status": status,
            "iterations_used": iterations,
            "warnings": warnings,
            "last_error": last_error,
        }),
    );
    Ok(AgentResult {
        status,
        final_code,
        iterations_used: iterations,
        warnings,
        event_log: rec.log,
        last_error,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{MockExecBackend, MockScenario};
    use crate::llm::{MockBackend, MockScript};
    use crate::prompt::bundled_fewshots;

    const CODE: &str = "```matlab\nmpc = loadcase('case9');\nresults = runpf(mpc);\n```";
    const OK: &str = r#"{"severity":"none","issues":[]}"#;

    fn run(config: &AgentConfig, llm: &MockBackend, exec: &MockExecBackend) -> AgentResult {
        let stores = KnowledgeStores::default();
        let deps = AgentDeps {
            llm,
            validator_llm: None,
            stores: &stores,
            executor: exec,
            catalog: ConventionCatalog::bundled(),
            fewshots: bundled_fewshots(),
        };
        run_agent("Run an AC power flow on case9", config, &deps).unwrap()
    }

    fn no_rag(mut c: AgentConfig) -> AgentConfig {
        c.rag_mode = RetrievalMode::None;
        c
    }

    fn validated_script(n: usize) -> MockScript {
        let mut s = MockScript::from_texts(std::iter::repeat_n(CODE, n));
        for _ in 0..n {
            s.push_tagged("VALIDATE-REQUEST", OK);
        }
        s
    }

    fn check_log(r: &AgentResult) {
        for (i, e) in r.event_log.iter().enumerate() {
            assert_eq!(e.seq, i as u64 + 1);
        }
        assert_eq!(r.event_log.iter().filter(|e| e.phase == Phase::Done).count(), 1);
        assert_eq!(r.event_log.last().unwrap().phase, Phase::Done);
        assert_eq!(r.generate_count(), r.iterations_used);
    }

    #[test]
    fn recovers_on_second_attempt() {
        let llm = MockBackend::new(validated_script(2));
        let exec = MockExecBackend::new(MockScenario::from_statuses(&[
            ExecStatus::RuntimeError,
            ExecStatus::Success,
        ]));
        let r = run(&no_rag(AgentConfig::full_model()), &llm, &exec);
        assert_eq!(r.status, RunStatus::Success);
        assert_eq!(r.iterations_used, 2);
        assert!(r.last_error.is_none());
        check_log(&r);
        let phases: Vec<Phase> = r.event_log.iter().map(|e| e.phase).collect();
        assert_eq!(
            phases,
            vec![
                Phase::Plan,
                Phase::Retrieve,
                Phase::Generate,
                Phase::Precheck,
                Phase::Execute,
                Phase::Feedback,
                Phase::Generate,
                Phase::Precheck,
                Phase::Execute,
                Phase::Validate,
                Phase::Done
            ]
        );
    }

    #[test]
    fn exhausts_threshold() {
        let llm = MockBackend::new(validated_script(5));
        let exec = MockExecBackend::new(MockScenario::from_statuses(&[ExecStatus::RuntimeError]));
        let r = run(&no_rag(AgentConfig::full_model()), &llm, &exec);
        assert_eq!(r.status, RunStatus::Failure);
        assert_eq!(r.iterations_used, 5);
        assert_eq!(r.last_error.as_deref(), Some("error: scripted failure"));
        assert_eq!(exec.calls(), 5);
        check_log(&r);
    }

    #[test]
    fn single_pass_stops_after_one() {
        let llm = MockBackend::new(validated_script(5));
        let exec = MockExecBackend::new(MockScenario::from_statuses(&[
            ExecStatus::RuntimeError,
            ExecStatus::Success,
        ]));
        let r = run(&no_rag(AgentConfig::single_pass()), &llm, &exec);
        assert_eq!(r.status, RunStatus::Failure);
        assert_eq!(r.iterations_used, 1);
        assert!(!r.event_log.iter().any(|e| e.phase == Phase::Feedback));
        check_log(&r);
    }

    #[test]
    fn critical_verdict_counts_as_iteration() {
        let mut script = MockScript::from_texts([CODE, CODE]);
        script.push_tagged(
            "VALIDATE-REQUEST",
            r#"{"severity":"critical","issues":["ran AC PF but DC was requested"]}"#,
        );
        script.push_tagged(
            "VALIDATE-REQUEST",
            r#"{"severity":"minor","issues":["hard-coded bus index"]}"#,
        );
        let llm = MockBackend::new(script);
        let exec = MockExecBackend::new(MockScenario::from_statuses(&[ExecStatus::Success]));
        let r = run(&no_rag(AgentConfig::full_model()), &llm, &exec);
        assert_eq!(r.status, RunStatus::Success);
        assert_eq!(r.iterations_used, 2);
        assert_eq!(r.warnings, vec!["hard-coded bus index"]);
        let fb = r.event_log.iter().find(|e| e.phase == Phase::Feedback).unwrap();
        assert_eq!(fb.payload["error_text"], "SEMANTIC: ran AC PF but DC was requested");
    }

    #[test]
    fn execution_only_never_validates() {
        let llm = MockBackend::from_texts([CODE]);
        let exec = MockExecBackend::new(MockScenario::from_statuses(&[ExecStatus::Success]));
        let r = run(&no_rag(AgentConfig::execution_only()), &llm, &exec);
        assert_eq!(r.status, RunStatus::Success);
        assert!(!r.event_log.iter().any(|e| e.phase == Phase::Validate));
        assert!(r.verdict.is_none());
    }

    #[test]
    fn vector_mode_without_index_is_config_error() {
        let llm = MockBackend::from_texts([CODE]);
        let exec = MockExecBackend::new(MockScenario::default());
        let stores = KnowledgeStores::default();
        let deps = AgentDeps {
            llm: &llm,
            validator_llm: None,
            stores: &stores,
            executor: &exec,
            catalog: ConventionCatalog::bundled(),
            fewshots: bundled_fewshots(),
        };
        let err = run_agent("run case9", &AgentConfig::full_model(), &deps).unwrap_err();
        assert!(matches!(err, AgentError::Config(_)));
        assert!(matches!(
            run_agent("  ", &no_rag(AgentConfig::full_model()), &deps),
            Err(AgentError::InvalidRequest(_))
        ));
    }

    #[test]
    fn generation_error_ends_run() {
        let llm = MockBackend::from_texts(Vec::<String>::new());
        let exec = MockExecBackend::new(MockScenario::default());
        let r = run(&no_rag(AgentConfig::full_model()), &llm, &exec);
        assert_eq!(r.status, RunStatus::Failure);
        assert_eq!(r.iterations_used, 1);
        assert!(r.last_error.unwrap().contains("generation failed"));
        assert_eq!(exec.calls(), 0);
    }

    #[test]
    fn feedback_prompt_carries_error_and_fixed_code() {
        let typo = "```matlab\nmpopt = mpoption('pf.alg', 'NR', 'pf.tol', 1e-8, 'verbse', 2);\nx = PD;\n```";
        let mut script = MockScript::from_texts([typo, CODE]);
        script.push_tagged("VALIDATE-REQUEST", OK);
        let llm = MockBackend::new(script);
        let exec = MockExecBackend::new(MockScenario::from_statuses(&[
            ExecStatus::RuntimeError,
            ExecStatus::Success,
        ]));
        let r = run(&no_rag(AgentConfig::full_model()), &llm, &exec);
        assert_eq!(r.status, RunStatus::Success);
        let first = &exec.executed_scripts()[0];
        assert!(first.starts_with("define_constants;\n"));
        assert!(first.contains("'verbose'"));
    }

    #[test]
    fn timeout_report_text() {
        let state = AttemptState {
            iteration: 1,
            code: "while true, end".into(),
            hints: vec!["unknown option 'foo'".into()],
            failure: AttemptFailure::Timeout { budget_ms: 120000 },
        };
        let ctx = KnowledgeContext::empty(RetrievalMode::None, 4);
        let report = build_error_report_from_attempt(&state, "req", &ctx);
        assert_eq!(report.error_text, "Execution timed out after 120000 ms");
        assert_eq!(report.precheck_hints, state.hints);
        assert_eq!(report.failed_code, "while true, end");
        let rt = AttemptState {
            failure: AttemptFailure::RuntimeError("error: undefined 'x'".into()),
            ..state
        };
        assert_eq!(
            build_error_report_from_attempt(&rt, "req", &ctx).error_text,
            "error: undefined 'x'"
        );
    }

    #[test]
    fn presets_match_ablation_table() {
        let rows = [
            ("Full Model", true, true, true),
            ("Single Pass", false, true, true),
            ("Simple Search", true, false, true),
            ("Execution Only", true, true, false),
        ];
        for (name, fb, plan, val) in rows {
            let c = AgentConfig::preset(name).unwrap();
            assert_eq!(c.rag_mode, RetrievalMode::EnhancedVector);
            assert_eq!(
                (c.feedback_enabled, c.planner_enabled, c.validator_enabled),
                (fb, plan, val),
                "{name}"
            );
        }
    }

    #[test]
    fn bounded_channel_sink_delivers_in_order() {
        let (tx, rx) = std::sync::mpsc::sync_channel(1);
        let handle = std::thread::spawn(move || {
            let llm = MockBackend::new(validated_script(1));
            let exec = MockExecBackend::new(MockScenario::from_statuses(&[ExecStatus::Success]));
            let stores = KnowledgeStores::default();
            let deps = AgentDeps {
                llm: &llm,
                validator_llm: None,
                stores: &stores,
                executor: &exec,
                catalog: ConventionCatalog::bundled(),
                fewshots: bundled_fewshots(),
            };
            run_agent_with_sink(
                "run case9",
                &no_rag(AgentConfig::full_model()),
                &deps,
                &mut ChannelSink(tx),
            )
            .unwrap()
        });
        let got: Vec<AgentEvent> = rx.iter().collect();
        let r = handle.join().unwrap();
        assert_eq!(got, r.event_log);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn loop_is_bounded(
            statuses in proptest::collection::vec(0u8..3, 0..8),
            verdicts in proptest::collection::vec(0u8..4, 0..8),
            n in 1usize..7,
            feedback: bool,
            validator: bool,
        ) {
            let statuses: Vec<ExecStatus> = statuses.iter().map(|s| match s {
                0 => ExecStatus::Success,
                1 => ExecStatus::RuntimeError,
                _ => ExecStatus::Timeout,
            }).collect();
            let mut script = MockScript::from_texts(std::iter::repeat_n(CODE, 10));
            for v in &verdicts {
                script.push_tagged("VALIDATE-REQUEST", match v {
                    0 => OK,
                    1 => r#"{"severity":"minor","issues":["m"]}"#,
                    2 => r#"{"severity":"critical","issues":["c"]}"#,
                    _ => "garbage",
                });
            }
            let llm = MockBackend::new(script);
            let exec = MockExecBackend::new(MockScenario::from_statuses(&statuses));
            let config = AgentConfig { n_threshold: n, feedback_enabled: feedback, validator_enabled: validator, exec_timeout_ms: 5, ..no_rag(AgentConfig::full_model()) };
            let r = run(&config, &llm, &exec);
            proptest::prop_assert!(r.iterations_used >= 1 && r.iterations_used <= n);
            proptest::prop_assert_eq!(r.generate_count(), r.iterations_used);
            if !feedback {
                proptest::prop_assert_eq!(r.generate_count(), 1);
            }
            if !validator {
                proptest::prop_assert!(!r.event_log.iter().any(|e| e.phase == Phase::Validate));
            }
            let done = r.event_log.iter().filter(|e| e.phase == Phase::Done).count();
            proptest::prop_assert_eq!(done, 1);
            for (i, e) in r.event_log.iter().enumerate() {
                proptest::prop_assert_eq!(e.seq, i as u64 + 1);
            }
            if r.status == RunStatus::Success {
                let last_exec = r.event_log.iter().rev().find(|e| e.phase == Phase::Execute).unwrap();
                proptest::prop_assert_eq!(&last_exec.payload["status"], "success");
                if validator {
                    proptest::prop_assert!(!r.verdict.as_ref().unwrap().is_critical());
                }
            }
        }
    }
}
