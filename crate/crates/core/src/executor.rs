//! Script execution backends.
//!
//! [`OctaveBackend`] runs each script in a fresh temporary directory with
//! the MATPOWER directory on the interpreter path. [`MockExecBackend`] replays a
//! JSON scenario keyed by attempt ordinal, which keeps agent-loop tests
//! deterministic. [`ExecutorPool`] bounds concurrent executions.

use std::fs;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMEOUT_MS: u64 = 120_000;
pub const DEFAULT_POOL: usize = 2;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("execution backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid execution request: {0}")]
    InvalidRequest(String),
    #[error("cannot load mock scenario {path}: {message}")]
    Scenario { path: String, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Success,
    RuntimeError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub status: ExecStatus,
    pub stdout: String,
    pub stderr: String,
    /// Empty iff `status` is success.
    pub error_text: String,
    pub warnings: Vec<String>,
    pub duration_ms: u64,
}

pub trait ExecBackend: Send + Sync {
    fn name(&self) -> &str;
    fn execute(&self, code: &str, timeout_ms: u64) -> Result<ExecutionReport, ExecError>;
}

fn check_timeout(timeout_ms: u64) -> Result<(), ExecError> {
    if timeout_ms < 1 {
        return Err(ExecError::InvalidRequest("timeout_ms must be at least 1".into()));
    }
    Ok(())
}

/// Classify interpreter output.
///
/// Lines starting with `warning:` (any case) are warnings. The first
/// `error:` line and the lines following it, up to a blank line or a
/// warning, form the error text.
pub fn classify_output(exit_code: Option<i32>, stdout: &str, stderr: &str) -> (ExecStatus, String, Vec<String>) {
    let mut warnings = Vec::new();
    let mut error_block: Vec<&str> = Vec::new();
    let mut in_error = false;
    let mut error_done = false;
    for line in stderr.lines().chain(stdout.lines()) {
        let lower = line.trim_start().to_ascii_lowercase();
        if lower.starts_with("warning:") {
            warnings.push(line.trim().to_owned());
            if in_error {
                in_error = false;
                error_done = true;
            }
            continue;
        }
        if in_error {
            if line.trim().is_empty() {
                in_error = false;
                error_done = true;
            } else {
                error_block.push(line);
            }
            continue;
        }
        if !error_done && lower.starts_with("error:") {
            in_error = true;
            error_block.push(line.trim_start());
        }
    }
    if !error_block.is_empty() {
        return (ExecStatus::RuntimeError, error_block.join("\n"), warnings);
    }
    match exit_code {
        Some(0) => (ExecStatus::Success, String::new(), warnings),
        code => {
            let tail: Vec<&str> = stderr.lines().filter(|l| !l.trim().is_empty()).collect();
            let tail = tail[tail.len().saturating_sub(5)..].join("\n");
            let what = match code {
                Some(c) => format!("interpreter exited with status {c}"),
                None => "interpreter terminated by a signal".to_owned(),
            };
            let text = if tail.is_empty() {
                what
            } else {
                format!("{what}\n{tail}")
            };
            (ExecStatus::RuntimeError, text, warnings)
        }
    }
}

/// Raw result of a child process run under a deadline.
#[derive(Debug, Clone)]
pub struct ProcessOutput {
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
    pub duration: Duration,
}

/// Run `cmd` in its own process group; on deadline the whole group is killed.
pub fn run_with_deadline(mut cmd: Command, timeout: Duration) -> Result<ProcessOutput, ExecError> {
    cmd.stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let started = Instant::now();
    let mut child = cmd.spawn()?;
    let pgid = child.id() as i32;
    let mut out_pipe = child.stdout.take().expect("stdout piped");
    let mut err_pipe = child.stderr.take().expect("stderr piped");
    let out_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = out_pipe.read_to_end(&mut buf);
        buf
    });
    let err_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = err_pipe.read_to_end(&mut buf);
        buf
    });

    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if started.elapsed() >= timeout {
            timed_out = true;
            // SAFETY: kill(2) on our own child's process group has no memory effects.
            unsafe {
                libc::kill(-pgid, libc::SIGKILL);
            }
            break child.wait()?;
        }
        thread::sleep(Duration::from_millis(5));
    };
    if !timed_out {
        // reap any stragglers left in the group by the interpreter
        unsafe {
            libc::kill(-pgid, libc::SIGKILL);
        }
    }
    let stdout = String::from_utf8_lossy(&out_reader.join().unwrap_or_default()).into_owned();
    let stderr = String::from_utf8_lossy(&err_reader.join().unwrap_or_default()).into_owned();
    Ok(ProcessOutput {
        exit_code: status.code(),
        stdout,
        stderr,
        timed_out,
        duration: started.elapsed(),
    })
}

fn report_from_process(out: ProcessOutput, timeout_ms: u64) -> ExecutionReport {
    let duration_ms = out.duration.as_millis() as u64;
    if out.timed_out {
        let (_, _, warnings) = classify_output(Some(0), &out.stdout, &out.stderr);
        return ExecutionReport {
            status: ExecStatus::Timeout,
            stdout: out.stdout,
            stderr: out.stderr,
            error_text: format!("Execution timed out after {timeout_ms} ms"),
            warnings,
            duration_ms: duration_ms.max(timeout_ms),
        };
    }
    let (status, error_text, warnings) = classify_output(out.exit_code, &out.stdout, &out.stderr);
    ExecutionReport {
        status,
        stdout: out.stdout,
        stderr: out.stderr,
        error_text,
        warnings,
        duration_ms,
    }
}

/// Runs scripts with GNU Octave and MATPOWER.
#[derive(Debug, Clone)]
pub struct OctaveBackend {
    pub octave_bin: PathBuf,
    pub matpower_dir: PathBuf,
}

impl OctaveBackend {
    pub fn new(octave_bin: impl Into<PathBuf>, matpower_dir: impl Into<PathBuf>) -> Self {
        Self {
            octave_bin: octave_bin.into(),
            matpower_dir: matpower_dir.into(),
        }
    }

    fn command(&self, script: &Path, workdir: &Path) -> Command {
        let dir = self.matpower_dir.display().to_string().replace('\'', "''");
        let script = script.display().to_string().replace('\'', "''");
        let eval = format!("addpath(genpath('{dir}')); source('{script}');");
        let mut cmd = Command::new(&self.octave_bin);
        cmd.args(["--no-gui", "--no-window-system", "--quiet", "--norc", "--eval", &eval])
            .current_dir(workdir);
        cmd
    }
}

impl ExecBackend for OctaveBackend {
    fn name(&self) -> &str {
        "octave"
    }

    fn execute(&self, code: &str, timeout_ms: u64) -> Result<ExecutionReport, ExecError> {
        check_timeout(timeout_ms)?;
        let bin = resolve_binary(&self.octave_bin)
            .ok_or_else(|| ExecError::BackendUnavailable(format!("{} not found", self.octave_bin.display())))?;
        let workdir = tempfile::Builder::new().prefix("gridscribe-exec-").tempdir()?;
        let script = workdir.path().join("task_script.m");
        fs::write(&script, code)?;
        let mut backend = self.clone();
        backend.octave_bin = bin;
        let out = run_with_deadline(
            backend.command(&script, workdir.path()),
            Duration::from_millis(timeout_ms),
        )?;
        Ok(report_from_process(out, timeout_ms))
    }
}

/// Find an executable by path or on `PATH`.
pub fn resolve_binary(bin: &Path) -> Option<PathBuf> {
    let is_exec = |p: &Path| {
        use std::os::unix::fs::PermissionsExt;
        p.is_file()
            && p.metadata()
                .map(|m| m.permissions().mode() & 0o111 != 0)
                .unwrap_or(false)
    };
    if bin.components().count() > 1 || bin.is_absolute() {
        return is_exec(bin).then(|| bin.to_path_buf());
    }
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path).map(|d| d.join(bin)).find(|p| is_exec(p))
}

/// One scripted attempt of a mock scenario.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockAttempt {
    pub status: Option<ExecStatus>,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub error_text: String,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Simulated run time.
    #[serde(default)]
    pub sleep_ms: u64,
    /// Never finishes on its own; always ends in a timeout.
    #[serde(default)]
    pub hang: bool,
}

/// Mock scenario: `attempts[i]` answers the (i+1)-th execution; later
/// executions use `default`, or repeat the last attempt when absent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScenario {
    #[serde(default)]
    pub attempts: Vec<MockAttempt>,
    #[serde(default)]
    pub default: Option<MockAttempt>,
}

impl MockScenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExecError> {
        let path = path.as_ref();
        let err = |message: String| ExecError::Scenario {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn from_statuses(statuses: &[ExecStatus]) -> Self {
        Self {
            attempts: statuses
                .iter()
                .map(|&s| MockAttempt {
                    status: Some(s),
                    error_text: match s {
                        ExecStatus::RuntimeError => "error: scripted failure".into(),
                        _ => String::new(),
                    },
                    hang: s == ExecStatus::Timeout,
                    ..MockAttempt::default()
                })
                .collect(),
            default: None,
        }
    }

    fn attempt(&self, ordinal: usize) -> MockAttempt {
        self.attempts
            .get(ordinal)
            .cloned()
            .or_else(|| self.default.clone())
            .or_else(|| self.attempts.last().cloned())
            .unwrap_or_else(|| MockAttempt {
                status: Some(ExecStatus::Success),
                ..MockAttempt::default()
            })
    }
}

#[derive(Debug)]
pub struct MockExecBackend {
    scenario: MockScenario,
    calls: AtomicUsize,
    scripts: Mutex<Vec<String>>,
}

impl MockExecBackend {
    pub fn new(scenario: MockScenario) -> Self {
        Self {
            scenario,
            calls: AtomicUsize::new(0),
            scripts: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Every script this backend was asked to run, in order.
    pub fn executed_scripts(&self) -> Vec<String> {
        self.scripts.lock().unwrap().clone()
    }
}

impl ExecBackend for MockExecBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn execute(&self, code: &str, timeout_ms: u64) -> Result<ExecutionReport, ExecError> {
        check_timeout(timeout_ms)?;
        let ordinal = self.calls.fetch_add(1, Ordering::SeqCst);
        self.scripts.lock().unwrap().push(code.to_owned());
        let attempt = self.scenario.attempt(ordinal);
        let started = Instant::now();
        let wanted = if attempt.hang { u64::MAX } else { attempt.sleep_ms };
        if wanted >= timeout_ms {
            thread::sleep(Duration::from_millis(timeout_ms));
            return Ok(ExecutionReport {
                status: ExecStatus::Timeout,
                stdout: attempt.stdout,
                stderr: attempt.stderr,
                error_text: format!("Execution timed out after {timeout_ms} ms"),
                warnings: attempt.warnings,
                duration_ms: (started.elapsed().as_millis() as u64).max(timeout_ms),
            });
        }
        if wanted > 0 {
            thread::sleep(Duration::from_millis(wanted));
        }
        let (status, error_text, mut warnings) = match attempt.status {
            Some(ExecStatus::Success) => (ExecStatus::Success, String::new(), Vec::new()),
            Some(ExecStatus::RuntimeError) => {
                let text = if attempt.error_text.is_empty() {
                    "error: scripted failure".to_owned()
                } else {
                    attempt.error_text.clone()
                };
                (ExecStatus::RuntimeError, text, Vec::new())
            }
            Some(ExecStatus::Timeout) => (
                ExecStatus::Timeout,
                format!("Execution timed out after {timeout_ms} ms"),
                Vec::new(),
            ),
            // no explicit status: classify the scripted output like a real run
            None => classify_output(Some(0), &attempt.stdout, &attempt.stderr),
        };
        for w in attempt.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        Ok(ExecutionReport {
            status,
            stdout: attempt.stdout,
            stderr: attempt.stderr,
            error_text,
            warnings,
            duration_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Bounds the number of concurrent executions on an inner backend.
pub struct ExecutorPool<B> {
    inner: B,
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl<B: ExecBackend> ExecutorPool<B> {
    pub fn new(inner: B, limit: usize) -> Self {
        Self {
            inner,
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ExecBackend> ExecBackend for ExecutorPool<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn execute(&self, code: &str, timeout_ms: u64) -> Result<ExecutionReport, ExecError> {
        {
            let mut active = self.active.lock().unwrap();
            while *active >= self.limit {
                active = self.freed.wait(active).unwrap();
            }
            *active += 1;
        }
        let result = self.inner.execute(code, timeout_ms);
        *self.active.lock().unwrap() -= 1;
        self.freed.notify_one();
        result
    }
}

impl ExecBackend for Box<dyn ExecBackend> {
    fn name(&self) -> &str {
        self.as_ref().name()
    }

    fn execute(&self, code: &str, timeout_ms: u64) -> Result<ExecutionReport, ExecError> {
        self.as_ref().execute(code, timeout_ms)
    }
}

impl<T: ExecBackend + ?Sized> ExecBackend for std::sync::Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn execute(&self, code: &str, timeout_ms: u64) -> Result<ExecutionReport, ExecError> {
        (**self).execute(code, timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub detail: String,
}

/// Executor settings relevant to backend discovery.
#[derive(Debug, Clone, Default)]
pub struct ExecutorSettings {
    pub octave_bin: Option<PathBuf>,
    pub matpower_dir: Option<PathBuf>,
}

/// Mock is always available; Octave when the interpreter resolves and the
/// MATPOWER directory exists.
pub fn list_backends(settings: &ExecutorSettings) -> Vec<BackendDescriptor> {
    let mut out = vec![BackendDescriptor {
        name: "mock".into(),
        detail: "scripted scenario backend".into(),
    }];
    let bin = settings.octave_bin.clone().unwrap_or_else(|| PathBuf::from("octave"));
    let Some(resolved) = resolve_binary(&bin) else {
        return out;
    };
    match &settings.matpower_dir {
        Some(dir) if dir.is_dir() => out.push(BackendDescriptor {
            name: "octave".into(),
            detail: format!("{} with MATPOWER at {}", resolved.display(), dir.display()),
        }),
        Some(dir) => tracing::warn!(dir = %dir.display(), "matpower_dir is not a directory; octave backend disabled"),
        None => tracing::warn!("matpower_dir not configured; octave backend disabled"),
    }
    out
}
