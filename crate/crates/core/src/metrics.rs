//! Benchmark scoring and the configuration matrix runner.
//!
//! Per task: `csgf = S * (N - (n - 1)) / N` with `S` in {1.0, 0.8, 0.0}.
//! Per configuration: `gca = (1 - sqrt(mean((1 - csgf)^2))) * 100`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_agent, AgentConfig, AgentDeps, AgentResult, RunStatus};
use crate::executor::{ExecBackend, ExecutorSettings, MockExecBackend, MockScenario, OctaveBackend};
use crate::llm::{load_mock_script, ChatBackend, HttpChatBackend, MockBackend};
use crate::planner::{KnowledgeStores, RetrievalMode};
use crate::precheck::ConventionCatalog;
use crate::prompt::bundled_fewshots;
use crate::validator::Severity;

pub const ALLOWED_S: [f64; 3] = [1.0, 0.8, 0.0];
pub const SUMMARY_FILE: &str = "bench_summary.json";
pub const TABLE_FILE: &str = "bench_table.txt";

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("semantic score {0} is not one of 1.0, 0.8, 0.0")]
    BadScore(f64),
    #[error("iteration count {n} outside 1..={n_threshold}")]
    BadIterations { n: usize, n_threshold: usize },
    #[error("n_threshold must be at least 1")]
    BadThreshold,
    #[error("gca needs at least one score")]
    Empty,
    #[error("csgf value {0} outside [0, 1]")]
    BadCsgf(f64),
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    TaskFile { path: String, line: usize, message: String },
    #[error("invalid matrix {path}: {message}")]
    Matrix { path: String, message: String },
    #[error("invalid overrides {path}: {message}")]
    Overrides { path: String, message: String },
}

fn is_allowed_s(s: f64) -> bool {
    ALLOWED_S.iter().any(|a| (a - s).abs() < 1e-12)
}

pub fn csgf(s: f64, n: usize, n_threshold: usize) -> Result<f64, DomainError> {
    if n_threshold < 1 {
        return Err(DomainError::BadThreshold);
    }
    if !is_allowed_s(s) {
        return Err(DomainError::BadScore(s));
    }
    if n < 1 || n > n_threshold {
        return Err(DomainError::BadIterations { n, n_threshold });
    }
    Ok(s * (n_threshold - (n - 1)) as f64 / n_threshold as f64)
}

pub fn gca(scores: &[f64]) -> Result<f64, DomainError> {
    if scores.is_empty() {
        return Err(DomainError::Empty);
    }
    if let Some(&bad) = scores.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(DomainError::BadCsgf(bad));
    }
    let mse = scores.iter().map(|c| (1.0 - c).powi(2)).sum::<f64>() / scores.len() as f64;
    Ok((1.0 - mse.sqrt()) * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Complexity {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub complexity: Complexity,
    pub request: String,
    /// `published` for benchmark tasks taken verbatim, `authored` for filler tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

/// Read a JSON-lines task file. Blank lines are skipped.
pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<TaskRecord>, BenchError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| BenchError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut seen = HashSet::new();
    let mut tasks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| BenchError::TaskFile {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let task: TaskRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if task.request.trim().is_empty() {
            return Err(err("empty request".into()));
        }
        if !seen.insert(task.task_id.clone()) {
            return Err(err(format!("duplicate task_id {}", task.task_id)));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

/// Manual semantic scores keyed by task id.
pub type Overrides = BTreeMap<String, f64>;

pub fn load_overrides(path: impl AsRef<Path>) -> Result<Overrides, BenchError> {
    let path = path.as_ref();
    let err = |message: String| BenchError::Overrides {
        path: path.display().to_string(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let map: Overrides = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if let Some((id, s)) = map.iter().find(|(_, s)| !is_allowed_s(**s)) {
        return Err(err(format!("{id}: {}", DomainError::BadScore(*s))));
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub task_id: String,
    pub complexity: Complexity,
    #[serde(rename = "S")]
    pub s: f64,
    pub n: usize,
    pub csgf: f64,
    pub status: RunStatus,
    pub overridden: bool,
}

/// Semantic score from the run outcome; `override_s` wins when present.
///
/// Failure or a critical verdict gives 0, a minor verdict 0.8, otherwise 1.0
/// (including runs without a validator).
pub fn grade_task(
    task: &TaskRecord,
    result: &AgentResult,
    override_s: Option<f64>,
    n_threshold: usize,
) -> Result<ScoreRecord, DomainError> {
    let auto = match (&result.status, &result.verdict) {
        (RunStatus::Failure, _) => 0.0,
        (RunStatus::Success, Some(v)) => match v.severity {
            Severity::Critical => 0.0,
            Severity::Minor => 0.8,
            Severity::None => 1.0,
        },
        (RunStatus::Success, None) => 1.0,
    };
    let s = override_s.unwrap_or(auto);
    let n = result.iterations_used;
    Ok(ScoreRecord {
        task_id: task.task_id.clone(),
        complexity: task.complexity,
        s,
        n,
        csgf: csgf(s, n, n_threshold)?,
        status: result.status,
        overridden: override_s.is_some(),
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    (count > 0).then(|| sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub label: String,
    pub config: AgentConfig,
    pub records: Vec<ScoreRecord>,
    pub gca: Option<f64>,
    pub easy_mean: Option<f64>,
    pub hard_mean: Option<f64>,
    pub k: usize,
    pub error: Option<String>,
}

impl BenchSummary {
    pub fn from_records(label: &str, config: &AgentConfig, records: Vec<ScoreRecord>) -> Self {
        let scores: Vec<f64> = records.iter().map(|r| r.csgf).collect();
        let group = |c: Complexity| mean(records.iter().filter(|r| r.complexity == c).map(|r| r.csgf));
        Self {
            label: label.to_owned(),
            config: config.clone(),
            gca: gca(&scores).ok(),
            easy_mean: group(Complexity::Easy),
            hard_mean: group(Complexity::Hard),
            k: records.len(),
            records,
            error: None,
        }
    }

    fn failed(label: &str, config: &AgentConfig, error: String) -> Self {
        Self {
            label: label.to_owned(),
            config: config.clone(),
            records: Vec::new(),
            gca: None,
            easy_mean: None,
            hard_mean: None,
            k: 0,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    #[default]
    Mock,
    Octave,
}

/// One row of the configuration matrix. Flags left out fall back to the
/// preset (Full Model when no preset is named).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixEntry {
    pub label: String,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub rag_mode: Option<RetrievalMode>,
    #[serde(default)]
    pub feedback_enabled: Option<bool>,
    #[serde(default)]
    pub planner_enabled: Option<bool>,
    #[serde(default)]
    pub validator_enabled: Option<bool>,
    #[serde(default)]
    pub n_threshold: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub context_budget: Option<usize>,
    #[serde(default)]
    pub exec_timeout_ms: Option<u64>,
    #[serde(default)]
    pub llm: LlmKind,
    #[serde(default)]
    pub executor: ExecutorKind,
    /// Directory of mock scripts named `<task_id>.json`, with `default.json` as fallback.
    #[serde(default)]
    pub llm_scripts: Option<PathBuf>,
    /// Directory of mock execution scenarios, same naming as `llm_scripts`.
    #[serde(default)]
    pub scenarios: Option<PathBuf>,
    #[serde(default)]
    pub overrides: Option<PathBuf>,
}

impl MatrixEntry {
    pub fn agent_config(&self) -> Result<AgentConfig, String> {
        let mut c = match &self.preset {
            Some(p) => AgentConfig::preset(p).ok_or_else(|| format!("unknown preset '{p}'"))?,
            None => AgentConfig::full_model(),
        };
        if let Some(v) = self.rag_mode {
            c.rag_mode = v;
        }
        if let Some(v) = self.feedback_enabled {
            c.feedback_enabled = v;
        }
        if let Some(v) = self.planner_enabled {
            c.planner_enabled = v;
        }
        if let Some(v) = self.validator_enabled {
            c.validator_enabled = v;
        }
        if let Some(v) = self.n_threshold {
            c.n_threshold = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.context_budget {
            c.context_budget = v;
        }
        if let Some(v) = self.exec_timeout_ms {
            c.exec_timeout_ms = v;
        }
        c.check().map_err(|e| e.to_string())?;
        Ok(c)
    }

    fn uses_only_mocks(&self) -> bool {
        self.llm == LlmKind::Mock && self.executor == ExecutorKind::Mock
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchMatrix {
    pub configurations: Vec<MatrixEntry>,
}

impl BenchMatrix {
    /// Load a matrix; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let path = path.as_ref();
        let err = |message: String| BenchError::Matrix {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for entry in &mut m.configurations {
            for p in [&mut entry.llm_scripts, &mut entry.scenarios, &mut entry.overrides]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        let mut labels = HashSet::new();
        if let Some(dup) = m.configurations.iter().find(|e| !labels.insert(e.label.clone())) {
            return Err(err(format!("duplicate label '{}'", dup.label)));
        }
        Ok(m)
    }
}

/// Builds the per-task backends of a configuration.
pub trait SessionFactory: Sync {
    fn llm(&self, entry: &MatrixEntry, task: &TaskRecord) -> Result<Box<dyn ChatBackend>, String>;
    fn executor(&self, entry: &MatrixEntry, task: &TaskRecord) -> Result<Box<dyn ExecBackend>, String>;
}

fn per_task_file(dir: &Path, task_id: &str) -> Option<PathBuf> {
    [format!("{task_id}.json"), "default.json".to_owned()]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
}

/// Backends from the matrix: mock scripts and scenarios from disk, the
/// HTTP backend from the environment, Octave from `settings`.
#[derive(Debug, Clone, Default)]
pub struct FileSessionFactory {
    pub settings: ExecutorSettings,
}

impl SessionFactory for FileSessionFactory {
    fn llm(&self, entry: &MatrixEntry, task: &TaskRecord) -> Result<Box<dyn ChatBackend>, String> {
        match entry.llm {
            LlmKind::Http => Ok(Box::new(HttpChatBackend::from_env().map_err(|e| e.to_string())?)),
            LlmKind::Mock => {
                let dir = entry
                    .llm_scripts
                    .as_ref()
                    .ok_or_else(|| "mock llm needs llm_scripts".to_owned())?;
                let file = per_task_file(dir, &task.task_id)
                    .ok_or_else(|| format!("no mock script for {} in {}", task.task_id, dir.display()))?;
                let script = load_mock_script(&file).map_err(|e| e.to_string())?;
                Ok(Box::new(MockBackend::new(script)))
            }
        }
    }

    fn executor(&self, entry: &MatrixEntry, task: &TaskRecord) -> Result<Box<dyn ExecBackend>, String> {
        match entry.executor {
            ExecutorKind::Octave => {
                let dir = self
                    .settings
                    .matpower_dir
                    .clone()
                    .ok_or_else(|| "octave executor needs matpower_dir".to_owned())?;
                let bin = self.settings.octave_bin.clone().unwrap_or_else(|| "octave".into());
                Ok(Box::new(OctaveBackend::new(bin, dir)))
            }
            ExecutorKind::Mock => {
                let scenario = match &entry.scenarios {
                    Some(dir) => match per_task_file(dir, &task.task_id) {
                        Some(f) => MockScenario::load(f).map_err(|e| e.to_string())?,
                        None => return Err(format!("no scenario for {} in {}", task.task_id, dir.display())),
                    },
                    None => MockScenario::default(),
                };
                Ok(Box::new(MockExecBackend::new(scenario)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    /// Concurrent tasks per configuration; only honored for all-mock rows.
    pub parallel: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { parallel: 1 }
    }
}

fn run_task(
    task: &TaskRecord,
    entry: &MatrixEntry,
    config: &AgentConfig,
    stores: &KnowledgeStores,
    factory: &dyn SessionFactory,
    overrides: &Overrides,
) -> Result<ScoreRecord, String> {
    let llm = factory.llm(entry, task)?;
    let exec = factory.executor(entry, task)?;
    let deps = AgentDeps {
        llm: llm.as_ref(),
        validator_llm: None,
        stores,
        executor: exec.as_ref(),
        catalog: ConventionCatalog::bundled(),
        fewshots: bundled_fewshots(),
    };
    let result = run_agent(&task.request, config, &deps).map_err(|e| format!("{}: {e}", task.task_id))?;
    grade_task(task, &result, overrides.get(&task.task_id).copied(), config.n_threshold)
        .map_err(|e| format!("{}: {e}", task.task_id))
}

fn run_configuration(
    tasks: &[TaskRecord],
    entry: &MatrixEntry,
    stores: &KnowledgeStores,
    factory: &dyn SessionFactory,
    opts: BenchOptions,
) -> BenchSummary {
    let config = match entry.agent_config() {
        Ok(c) => c,
        Err(e) => return BenchSummary::failed(&entry.label, &AgentConfig::full_model(), e),
    };
    if let Err(e) = stores.check_mode(config.rag_mode) {
        return BenchSummary::failed(&entry.label, &config, e.to_string());
    }
    let overrides = match &entry.overrides {
        Some(p) => match load_overrides(p) {
            Ok(o) => o,
            Err(e) => return BenchSummary::failed(&entry.label, &config, e.to_string()),
        },
        None => Overrides::new(),
    };
    let parallel = if entry.uses_only_mocks() {
        opts.parallel.max(1)
    } else {
        1
    };
    let results: Vec<Result<ScoreRecord, String>> = if parallel == 1 {
        tasks
            .iter()
            .map(|t| run_task(t, entry, &config, stores, factory, &overrides))
            .collect()
    } else {
        let mut out = Vec::with_capacity(tasks.len());
        for chunk in tasks.chunks(parallel) {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|t| s.spawn(|| run_task(t, entry, &config, stores, factory, &overrides)))
                    .collect();
                for h in handles {
                    out.push(h.join().unwrap_or_else(|_| Err("task panicked".into())));
                }
            });
        }
        out
    };
    match results.into_iter().collect::<Result<Vec<_>, _>>() {
        Ok(records) => BenchSummary::from_records(&entry.label, &config, records),
        Err(e) => BenchSummary::failed(&entry.label, &config, e),
    }
}

/// Run every configuration in order; a broken configuration is reported in
/// its summary and the matrix carries on.
pub fn run_benchmark(
    tasks: &[TaskRecord],
    matrix: &BenchMatrix,
    stores: &KnowledgeStores,
    factory: &dyn SessionFactory,
    opts: BenchOptions,
) -> Vec<BenchSummary> {
    matrix
        .configurations
        .iter()
        .map(|entry| {
            let summary = run_configuration(tasks, entry, stores, factory, opts);
            match &summary.error {
                Some(e) => tracing::warn!(label = %entry.label, error = %e, "configuration failed"),
                None => tracing::info!(label = %entry.label, gca = ?summary.gca, "configuration done"),
            }
            summary
        })
        .collect()
}

fn fmt_opt(v: Option<f64>, scale: f64) -> String {
    v.map(|x| format!("{:.2}", x * scale)).unwrap_or_else(|| "-".into())
}

pub fn render_table(summaries: &[BenchSummary]) -> String {
    let width = summaries.iter().map(|s| s.label.len()).max().unwrap_or(0).max(13);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>6}  {:>6}  {:>3}  note",
        "configuration", "GCA(%)", "easy", "hard", "K"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>6}  {:>6}  {:>3}  {}",
            s.label,
            fmt_opt(s.gca, 1.0),
            fmt_opt(s.easy_mean, 1.0),
            fmt_opt(s.hard_mean, 1.0),
            s.k,
            s.error.as_deref().unwrap_or("")
        );
    }
    out.push('\n');
    for s in summaries.iter().filter(|s| s.error.is_none()) {
        let _ = writeln!(out, "[{}]", s.label);
        for r in &s.records {
            let _ = writeln!(
                out,
                "  {:<10} {:<4}  S={:.1}  n={}  csgf={:.2}{}",
                r.task_id,
                match r.complexity {
                    Complexity::Easy => "easy",
                    Complexity::Hard => "hard",
                },
                r.s,
                r.n,
                r.csgf,
                if r.overridden { "  (override)" } else { "" }
            );
        }
    }
    out
}

/// Write `bench_summary.json` and `bench_table.txt` into `dir`.
pub fn write_reports(dir: impl AsRef<Path>, summaries: &[BenchSummary]) -> Result<(), BenchError> {
    let dir = dir.as_ref();
    let io = |e: std::io::Error| BenchError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(io)?;
    let json = serde_json::to_string_pretty(summaries).expect("summaries serialize");
    fs::write(dir.join(SUMMARY_FILE), json).map_err(io)?;
    fs::write(dir.join(TABLE_FILE), render_table(summaries)).map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{AgentEvent, Phase};
    use crate::validator::ValidationVerdict;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn csgf_examples() {
        assert_eq!(csgf(1.0, 1, 5).unwrap(), 1.0);
        assert!(close(csgf(0.8, 3, 5).unwrap(), 0.48, 1e-12));
        for n in 1..=5 {
            assert_eq!(csgf(0.0, n, 5).unwrap(), 0.0);
        }
        assert_eq!(csgf(0.5, 1, 5), Err(DomainError::BadScore(0.5)));
        assert!(matches!(csgf(1.0, 0, 5), Err(DomainError::BadIterations { .. })));
        assert!(matches!(csgf(1.0, 6, 5), Err(DomainError::BadIterations { .. })));
        assert_eq!(csgf(1.0, 1, 0), Err(DomainError::BadThreshold));
    }

    #[test]
    fn gca_examples() {
        assert_eq!(gca(&[1.0; 10]).unwrap(), 100.0);
        assert_eq!(gca(&[0.0; 4]).unwrap(), 0.0);
        // (1 - sqrt(0.2704 / 2)) * 100
        let oracle = (1.0 - (0.52f64 * 0.52 / 2.0).sqrt()) * 100.0;
        assert!(close(gca(&[1.0, 0.48]).unwrap(), oracle, 1e-9));
        assert!(close(gca(&[1.0, 0.48]).unwrap(), 63.2304, 1e-4));
        assert_eq!(gca(&[]), Err(DomainError::Empty));
        assert_eq!(gca(&[1.2]), Err(DomainError::BadCsgf(1.2)));
    }

    fn result(status: RunStatus, severity: Option<Severity>, n: usize) -> AgentResult {
        AgentResult {
            status,
            final_code: String::new(),
            iterations_used: n,
            warnings: vec![],
            event_log: vec![AgentEvent {
                seq: 1,
                phase: Phase::Done,
                payload: serde_json::Value::Null,
                timestamp: 0,
            }],
            last_error: None,
            verdict: severity.map(|severity| ValidationVerdict {
                severity,
                issues: if severity == Severity::None {
                    vec![]
                } else {
                    vec!["x".into()]
                },
                raw_text: String::new(),
            }),
        }
    }

    fn task(id: &str) -> TaskRecord {
        TaskRecord {
            task_id: id.into(),
            complexity: Complexity::Easy,
            request: "r".into(),
            origin: None,
        }
    }

    #[test]
    fn grading_rules() {
        let t = task("e1");
        let r = grade_task(&t, &result(RunStatus::Success, Some(Severity::None), 1), None, 5).unwrap();
        assert_eq!((r.s, r.csgf), (1.0, 1.0));
        let r = grade_task(&t, &result(RunStatus::Success, Some(Severity::Minor), 2), None, 5).unwrap();
        assert_eq!(r.s, 0.8);
        assert!(close(r.csgf, 0.64, 1e-12));
        let r = grade_task(&t, &result(RunStatus::Failure, None, 5), None, 5).unwrap();
        assert_eq!((r.s, r.csgf), (0.0, 0.0));
        let r = grade_task(&t, &result(RunStatus::Success, None, 1), Some(0.0), 5).unwrap();
        assert_eq!((r.s, r.csgf, r.overridden), (0.0, 0.0, true));
    }

    #[test]
    fn summary_groups() {
        let mut hard = task("h1");
        hard.complexity = Complexity::Hard;
        let recs = vec![
            grade_task(
                &task("e1"),
                &result(RunStatus::Success, Some(Severity::None), 1),
                None,
                5,
            )
            .unwrap(),
            grade_task(&hard, &result(RunStatus::Success, Some(Severity::Minor), 3), None, 5).unwrap(),
        ];
        let s = BenchSummary::from_records("x", &AgentConfig::full_model(), recs);
        assert_eq!(s.k, 2);
        assert!(close(s.gca.unwrap(), 63.2304, 1e-4));
        assert_eq!(s.easy_mean, Some(1.0));
        assert!(close(s.hard_mean.unwrap(), 0.48, 1e-12));
        let table = render_table(&[s]);
        assert!(table.contains("63.23"));
    }

    #[test]
    fn task_file_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        fs::write(&p, "{\"task_id\":\"a\",\"complexity\":\"easy\",\"request\":\"x\"}\n\n{\"task_id\":\"a\",\"complexity\":\"hard\",\"request\":\"y\"}\n").unwrap();
        assert!(matches!(load_tasks(&p), Err(BenchError::TaskFile { line: 3, .. })));
        fs::write(&p, "{\"task_id\":\"a\",\"complexity\":\"easy\",\"request\":\" \"}\n").unwrap();
        assert!(load_tasks(&p).is_err());
        let o = dir.path().join("o.json");
        fs::write(&o, "{\"a\":0.5}").unwrap();
        assert!(load_overrides(&o).is_err());
    }

    proptest! {
        #[test]
        fn csgf_monotone(si in 0usize..2, n in 1usize..5, nt in 5usize..9) {
            let s = ALLOWED_S[si];
            prop_assert!(csgf(s, n, nt).unwrap() >= csgf(s, n + 1, nt).unwrap());
        }

        #[test]
        fn gca_permutation_and_range(mut xs in proptest::collection::vec(0.0f64..=1.0, 1..20), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let a = gca(&xs).unwrap();
            xs.shuffle(&mut rand::rngs::StdRng::seed_from_u64(seed));
            let b = gca(&xs).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(&a));
            prop_assert_eq!(a == 100.0, xs.iter().all(|&x| x == 1.0));
        }
    }
}
