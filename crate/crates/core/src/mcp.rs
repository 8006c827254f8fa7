//! MCP tool server over newline-delimited JSON-RPC 2.0.
//!
//! Each `tools/call` runs in its own worker process: the `gridscribe` binary
//! invoked as `run ... --emit-result`. The worker prints
//! [`SENTINEL`] followed by a one-line [`ResultPacket`] when it finishes.
//! Everything else it prints is kept as the worker log.

use std::path::PathBuf;
use std::process::Stdio;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, BufReader};
use tokio::process::Command;
use tokio::sync::{mpsc, Semaphore};
use tokio::task::JoinSet;

use crate::agent::{AgentEvent, AgentResult, Phase, RunStatus};
use crate::planner::RetrievalMode;

pub const SENTINEL: &str = "@@GRIDSCRIBE_RESULT@@ ";
pub const TOOL_NAME: &str = "run_matpower_task";
pub const SERVER_NAME: &str = "gridscribe";
pub const DEFAULT_PROTOCOL_VERSION: &str = "2024-11-05";
pub const DEFAULT_WORKER_LIMIT: usize = 4;
pub const DEFAULT_WORKER_TIMEOUT_MS: u64 = 600_000;

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;
pub const SERVER_BUSY: i64 = -32000;
pub const SPAWN_FAILED: i64 = -32001;

/// Final packet a worker prints after the sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultPacket {
    pub final_code: String,
    pub status: String,
    pub iterations: usize,
    #[serde(default)]
    pub debug_log: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("")
}

fn event_summary(e: &AgentEvent) -> String {
    let p = &e.payload;
    let attempt = p["attempt"].as_u64().unwrap_or(0);
    let text = match e.phase {
        Phase::Plan if p["skipped"] == true => "plan: skipped".to_owned(),
        Phase::Plan => format!(
            "plan: {} with {} sub-request(s)",
            p["source"].as_str().unwrap_or("?"),
            p["subrequests"].as_array().map_or(0, Vec::len)
        ),
        Phase::Retrieve => format!(
            "retrieve: mode {}, {} fragment(s)",
            p["mode"].as_str().unwrap_or("?"),
            p["fragments"].as_u64().unwrap_or(0)
        ),
        Phase::Generate => match p["error"].as_str() {
            Some(err) => format!("generate: attempt {attempt} failed: {err}"),
            None if p["feedback"] == true => format!("generate: attempt {attempt} (feedback)"),
            None => format!("generate: attempt {attempt}"),
        },
        Phase::Precheck => format!(
            "precheck: attempt {attempt}, {} finding(s)",
            p["findings"].as_array().map_or(0, Vec::len)
        ),
        Phase::Execute => match (p["error"].as_str(), p["status"].as_str()) {
            (Some(err), _) => format!("execute: attempt {attempt} failed: {err}"),
            (None, Some("success")) => format!("execute: attempt {attempt} -> success"),
            (None, status) => format!(
                "execute: attempt {attempt} -> {}: {}",
                status.unwrap_or("?"),
                first_line(p["error_text"].as_str().unwrap_or(""))
            ),
        },
        Phase::Validate => format!(
            "validate: attempt {attempt} -> {}",
            p["severity"].as_str().unwrap_or("?")
        ),
        Phase::Feedback => format!("feedback: attempt {attempt} failed, retrying"),
        Phase::Done => format!(
            "done: {} after {} iteration(s)",
            p["status"].as_str().unwrap_or("?"),
            p["iterations_used"].as_u64().unwrap_or(0)
        ),
    };
    format!("[{}] {text}", e.seq)
}

impl ResultPacket {
    pub fn from_result(result: &AgentResult) -> Self {
        Self {
            final_code: result.final_code.clone(),
            status: match result.status {
                RunStatus::Success => "success".into(),
                RunStatus::Failure => "failure".into(),
            },
            iterations: result.iterations_used,
            debug_log: result.event_log.iter().map(event_summary).collect(),
            warnings: result.warnings.clone(),
            last_error: result.last_error.clone(),
        }
    }

    /// Sentinel line, without a trailing newline.
    pub fn sentinel_line(&self) -> String {
        format!("{SENTINEL}{}", serde_json::to_string(self).expect("packet serializes"))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SentinelError {
    #[error("worker output ended without a result")]
    NoResult,
    #[error("malformed result packet: {0}")]
    MalformedPacket(String),
}

/// Incremental sentinel scanner; the last sentinel line wins.
#[derive(Debug, Default)]
pub struct SentinelScanner {
    last: Option<String>,
    log: Vec<String>,
}

impl SentinelScanner {
    pub fn push_line(&mut self, line: &str) {
        let line = line.strip_suffix('\r').unwrap_or(line);
        match line.strip_prefix(SENTINEL) {
            Some(rest) => self.last = Some(rest.to_owned()),
            None => self.log.push(line.to_owned()),
        }
    }

    pub fn log(&self) -> &[String] {
        &self.log
    }

    pub fn finish(self) -> (Result<ResultPacket, SentinelError>, Vec<String>) {
        let packet = match self.last {
            None => Err(SentinelError::NoResult),
            Some(raw) => serde_json::from_str(&raw).map_err(|e| SentinelError::MalformedPacket(e.to_string())),
        };
        (packet, self.log)
    }
}

pub fn parse_sentinel_stream<I, S>(lines: I) -> Result<ResultPacket, SentinelError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut scanner = SentinelScanner::default();
    for line in lines {
        scanner.push_line(line.as_ref());
    }
    scanner.finish().0
}

#[derive(Debug, Error)]
pub enum McpError {
    #[error("busy: {0} workers already running")]
    Busy(usize),
    #[error("cannot spawn worker: {0}")]
    Spawn(String),
}

/// How to start a worker: `program [prefix..] run <tool args> --emit-result [suffix..]`.
#[derive(Debug, Clone)]
pub struct WorkerCommand {
    pub program: PathBuf,
    pub prefix: Vec<String>,
    pub suffix: Vec<String>,
}

impl WorkerCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            prefix: Vec::new(),
            suffix: Vec::new(),
        }
    }

    fn args(&self, call: &ToolArgs) -> Vec<String> {
        let mut args = self.prefix.clone();
        args.extend(["run".to_owned(), "--request".to_owned(), call.request.clone()]);
        if let Some(mode) = call.rag_mode {
            args.extend(["--rag-mode".to_owned(), mode.as_str().to_owned()]);
        }
        if let Some(backend) = &call.backend {
            args.extend(["--backend".to_owned(), backend.clone()]);
        }
        args.push("--emit-result".to_owned());
        args.extend(self.suffix.iter().cloned());
        args
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerState {
    Running,
    Finished,
    Failed,
}

#[derive(Debug, Clone)]
pub struct WorkerHandle {
    pub id: u64,
    pub state: WorkerState,
    pub packet: Option<ResultPacket>,
    pub log: Vec<String>,
    pub diagnostic: Option<String>,
}

/// Validated `tools/call` arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolArgs {
    pub request: String,
    pub rag_mode: Option<RetrievalMode>,
    pub backend: Option<String>,
}

impl ToolArgs {
    pub fn from_value(args: &Value) -> Result<Self, String> {
        let obj = args.as_object().ok_or("arguments must be an object")?;
        let request = match obj.get("request") {
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            Some(Value::String(_)) => return Err("request must not be empty".into()),
            Some(_) => return Err("request must be a string".into()),
            None => return Err("missing required argument: request".into()),
        };
        let rag_mode = match obj.get("rag_mode") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(
                s.parse::<RetrievalMode>()
                    .map_err(|_| format!("invalid rag_mode '{s}'"))?,
            ),
            Some(_) => return Err("rag_mode must be a string".into()),
        };
        let backend = match obj.get("backend") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) if s == "mock" || s == "octave" => Some(s.clone()),
            Some(other) => return Err(format!("invalid backend {other}")),
        };
        Ok(Self {
            request,
            rag_mode,
            backend,
        })
    }
}

pub fn tool_descriptor() -> Value {
    json!({
        "name": TOOL_NAME,
        "description": "Turn a natural-language power-grid request into a MATPOWER script, execute it and self-correct until it runs.",
        "inputSchema": {
            "type": "object",
            "properties": {
                "request": { "type": "string", "description": "Natural-language simulation request." },
                "rag_mode": { "type": "string", "enum": ["none", "ocr", "pdf", "enhanced"] },
                "backend": { "type": "string", "enum": ["mock", "octave"] }
            },
            "required": ["request"]
        }
    })
}

fn error_frame(id: Value, code: i64, message: impl Into<String>) -> Value {
    json!({ "jsonrpc": "2.0", "id": id, "error": { "code": code, "message": message.into() } })
}

fn result_frame(id: Value, result: Value) -> Value {
    json!({ "jsonrpc": "2.0", "id": id, "result": result })
}

pub struct McpServer {
    worker: WorkerCommand,
    limit: usize,
    slots: Arc<Semaphore>,
    worker_timeout: Duration,
    next_id: AtomicU64,
}

impl McpServer {
    pub fn new(worker: WorkerCommand, limit: usize, worker_timeout: Duration) -> Self {
        let limit = limit.max(1);
        Self {
            worker,
            limit,
            slots: Arc::new(Semaphore::new(limit)),
            worker_timeout,
            next_id: AtomicU64::new(1),
        }
    }

    /// Handle one raw line; `None` for notifications.
    pub async fn handle_line(&self, line: &str) -> Option<String> {
        let response = match serde_json::from_str::<Value>(line) {
            Ok(frame) => self.handle_frame(frame).await?,
            Err(_) => error_frame(Value::Null, PARSE_ERROR, "Parse error"),
        };
        Some(serde_json::to_string(&response).expect("frame serializes"))
    }

    pub async fn handle_frame(&self, frame: Value) -> Option<Value> {
        let Some(obj) = frame.as_object() else {
            return Some(error_frame(Value::Null, INVALID_REQUEST, "Invalid Request"));
        };
        let id = obj.get("id").cloned();
        let valid_id = matches!(id, None | Some(Value::Null | Value::Number(_) | Value::String(_)));
        let method = obj.get("method").and_then(Value::as_str);
        if obj.get("jsonrpc") != Some(&json!("2.0")) || method.is_none() || !valid_id {
            return Some(error_frame(
                id.unwrap_or(Value::Null),
                INVALID_REQUEST,
                "Invalid Request",
            ));
        }
        let id = id?;
        let params = obj.get("params").cloned().unwrap_or(Value::Null);
        Some(match method.unwrap() {
            "initialize" => {
                let version = params
                    .get("protocolVersion")
                    .and_then(Value::as_str)
                    .unwrap_or(DEFAULT_PROTOCOL_VERSION);
                result_frame(
                    id,
                    json!({
                        "protocolVersion": version,
                        "capabilities": { "tools": {} },
                        "serverInfo": { "name": SERVER_NAME, "version": env!("CARGO_PKG_VERSION") }
                    }),
                )
            }
            "ping" => result_frame(id, json!({})),
            "tools/list" => result_frame(id, json!({ "tools": [tool_descriptor()] })),
            "tools/call" => self.tools_call(id, &params).await,
            other => error_frame(id, METHOD_NOT_FOUND, format!("Method not found: {other}")),
        })
    }

    async fn tools_call(&self, id: Value, params: &Value) -> Value {
        match params.get("name").and_then(Value::as_str) {
            Some(TOOL_NAME) => {}
            Some(other) => return error_frame(id, INVALID_PARAMS, format!("unknown tool '{other}'")),
            None => return error_frame(id, INVALID_PARAMS, "missing tool name"),
        }
        let args = match ToolArgs::from_value(params.get("arguments").unwrap_or(&Value::Null)) {
            Ok(a) => a,
            Err(msg) => return error_frame(id, INVALID_PARAMS, msg),
        };
        let handle = match self.spawn_worker(&args).await {
            Ok(h) => h,
            Err(e @ McpError::Busy(_)) => return error_frame(id, SERVER_BUSY, e.to_string()),
            Err(e) => return error_frame(id, SPAWN_FAILED, e.to_string()),
        };
        match (handle.state, handle.packet) {
            (WorkerState::Finished, Some(packet)) => {
                let is_error = packet.status != "success";
                let text = serde_json::to_string(&packet).expect("packet serializes");
                result_frame(
                    id,
                    json!({ "content": [{ "type": "text", "text": text }], "isError": is_error }),
                )
            }
            _ => {
                let text = handle.diagnostic.unwrap_or_else(|| "worker failed".into());
                result_frame(
                    id,
                    json!({ "content": [{ "type": "text", "text": text }], "isError": true }),
                )
            }
        }
    }

    /// Run one worker to completion. Fails fast with [`McpError::Busy`] when
    /// the worker limit is reached.
    pub async fn spawn_worker(&self, args: &ToolArgs) -> Result<WorkerHandle, McpError> {
        let _permit = self
            .slots
            .clone()
            .try_acquire_owned()
            .map_err(|_| McpError::Busy(self.limit))?;
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let mut cmd = Command::new(&self.worker.program);
        cmd.args(self.worker.args(args))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true)
            .process_group(0);
        let mut child = cmd.spawn().map_err(|e| McpError::Spawn(e.to_string()))?;
        let pid = child.id();
        let stdout = child.stdout.take().expect("stdout piped");
        let mut stderr = child.stderr.take().expect("stderr piped");
        let stderr_task = tokio::spawn(async move {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf).await;
            String::from_utf8_lossy(&buf).into_owned()
        });

        let mut scanner = SentinelScanner::default();
        let run = async {
            let mut lines = BufReader::new(stdout).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                scanner.push_line(&line);
            }
            child.wait().await
        };
        let outcome = tokio::time::timeout(self.worker_timeout, run).await;
        let status = match outcome {
            Ok(status) => Some(status),
            Err(_) => {
                if let Some(pid) = pid {
                    // SAFETY: signalling the worker's own process group
                    unsafe {
                        libc::kill(-(pid as i32), libc::SIGKILL);
                    }
                }
                let _ = child.wait().await;
                None
            }
        };
        let stderr_text = stderr_task.await.unwrap_or_default();
        let (packet, log) = scanner.finish();
        let mut handle = WorkerHandle {
            id,
            state: WorkerState::Running,
            packet: None,
            log,
            diagnostic: None,
        };
        let tail = stderr_text.lines().rev().take(5).collect::<Vec<_>>();
        let tail = tail.into_iter().rev().collect::<Vec<_>>().join("\n");
        match (status, packet) {
            (None, _) => {
                handle.state = WorkerState::Failed;
                handle.diagnostic = Some("worker timeout".into());
            }
            (Some(_), Ok(packet)) => {
                handle.state = WorkerState::Finished;
                handle.packet = Some(packet);
            }
            (Some(status), Err(e)) => {
                handle.state = WorkerState::Failed;
                let exit = match status {
                    Ok(s) => match s.code() {
                        Some(c) => format!("exit status {c}"),
                        None => "killed by a signal".to_owned(),
                    },
                    Err(e) => e.to_string(),
                };
                let mut msg = format!("worker failed ({exit}): {e}");
                if !tail.is_empty() {
                    msg.push('\n');
                    msg.push_str(&tail);
                }
                handle.diagnostic = Some(msg);
            }
        }
        tracing::debug!(worker = id, state = ?handle.state, "worker finished");
        Ok(handle)
    }
}

/// Serve frames from `reader` until EOF. Frames are handled concurrently;
/// responses are written as soon as each one is ready.
pub async fn serve<R, W>(server: Arc<McpServer>, reader: R, mut writer: W) -> std::io::Result<()>
where
    R: AsyncBufRead + Unpin,
    W: AsyncWrite + Unpin + Send + 'static,
{
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    let writer_task = tokio::spawn(async move {
        while let Some(line) = rx.recv().await {
            writer.write_all(line.as_bytes()).await?;
            writer.write_all(b"\n").await?;
            writer.flush().await?;
        }
        Ok::<_, std::io::Error>(())
    });
    let mut tasks = JoinSet::new();
    let mut lines = reader.lines();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let server = server.clone();
        let tx = tx.clone();
        tasks.spawn(async move {
            if let Some(resp) = server.handle_line(&line).await {
                let _ = tx.send(resp);
            }
        });
    }
    while tasks.join_next().await.is_some() {}
    drop(tx);
    writer_task.await.map_err(std::io::Error::other)?
}

pub async fn serve_stdio(server: Arc<McpServer>) -> std::io::Result<()> {
    serve(server, BufReader::new(tokio::io::stdin()), tokio::io::stdout()).await
}

/// Read a whole stream and parse it as sentinel-framed worker output.
pub async fn read_sentinel_stream<R: AsyncRead + Unpin>(reader: R) -> Result<ResultPacket, SentinelError> {
    let mut scanner = SentinelScanner::default();
    let mut lines = BufReader::new(reader).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        scanner.push_line(&line);
    }
    scanner.finish().0
}
