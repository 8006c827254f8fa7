//! HTTP + server-sent-events gateway for the web console.
//!
//! | method | path                          | answer                                   |
//! |--------|-------------------------------|------------------------------------------|
//! | POST   | `/api/run`                    | `202 {"session_id"}`                     |
//! | GET    | `/api/sessions/{id}/events`   | SSE stream of agent events, ends at done |
//! | GET    | `/api/sessions/{id}/result`   | agent result; 409 while running          |
//! | GET    | `/api/backends`               | available execution backends             |
//!
//! Unknown session ids answer 404.

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::{mpsc as std_mpsc, Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::watch;

use crate::agent::{run_agent_with_sink, AgentDeps, AgentEvent, AgentResult, ChannelSink};
use crate::config::{parse_executor_kind, RunOverrides, Runtime};
use crate::executor::list_backends;
use crate::metrics::ExecutorKind;
use crate::planner::RetrievalMode;
use crate::precheck::ConventionCatalog;
use crate::prompt::bundled_fewshots;

const EVENT_QUEUE: usize = 64;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    pub request: String,
    #[serde(default)]
    pub backend: Option<String>,
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
}

#[derive(Debug, Serialize)]
pub struct RunAccepted {
    pub session_id: String,
}

#[derive(Default)]
struct SessionData {
    events: Vec<AgentEvent>,
    outcome: Option<Result<AgentResult, String>>,
}

struct Session {
    data: Mutex<SessionData>,
    version: watch::Sender<u64>,
}

impl Session {
    fn touch(&self) {
        self.version.send_modify(|v| *v += 1);
    }
}

#[derive(Clone)]
pub struct GatewayState {
    runtime: Arc<Runtime>,
    sessions: Arc<Mutex<HashMap<String, Arc<Session>>>>,
}

impl GatewayState {
    pub fn new(runtime: Arc<Runtime>) -> Self {
        Self {
            runtime,
            sessions: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.lock().unwrap().get(id).cloned()
    }
}

fn json_error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn start_run(State(state): State<GatewayState>, Json(body): Json<RunRequest>) -> Response {
    if body.request.trim().is_empty() {
        return json_error(StatusCode::BAD_REQUEST, "request is empty");
    }
    let kind = match body.backend.as_deref().map(parse_executor_kind).transpose() {
        Ok(k) => k.unwrap_or(ExecutorKind::Mock),
        Err(e) => return json_error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let mut config = state.runtime.config.agent_config();
    RunOverrides {
        rag_mode: body.rag_mode,
        feedback_enabled: body.feedback_enabled,
        planner_enabled: body.planner_enabled,
        validator_enabled: body.validator_enabled,
        n_threshold: body.n_threshold,
        k: body.k,
        context_budget: body.context_budget,
        exec_timeout_ms: body.exec_timeout_ms,
    }
    .apply(&mut config);
    if let Err(e) = config.check() {
        return json_error(StatusCode::BAD_REQUEST, e.to_string());
    }
    if let Err(e) = state.runtime.stores.check_mode(config.rag_mode) {
        return json_error(StatusCode::BAD_REQUEST, e.to_string());
    }
    let llm = match state.runtime.llm() {
        Ok(l) => l,
        Err(e) => return json_error(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
    };
    let executor = match state.runtime.executor(kind) {
        Ok(x) => x,
        Err(e) => return json_error(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
    };

    let id = uuid::Uuid::new_v4().to_string();
    let session = Arc::new(Session {
        data: Mutex::new(SessionData::default()),
        version: watch::channel(0).0,
    });
    state.sessions.lock().unwrap().insert(id.clone(), session.clone());

    let (tx, rx) = std_mpsc::sync_channel::<AgentEvent>(EVENT_QUEUE);
    let forward = session.clone();
    tokio::task::spawn_blocking(move || {
        for event in rx {
            forward.data.lock().unwrap().events.push(event);
            forward.touch();
        }
    });
    let runtime = state.runtime.clone();
    let request = body.request.clone();
    tokio::task::spawn_blocking(move || {
        let deps = AgentDeps {
            llm: llm.as_ref(),
            validator_llm: None,
            stores: &runtime.stores,
            executor: executor.as_ref(),
            catalog: ConventionCatalog::bundled(),
            fewshots: bundled_fewshots(),
        };
        let mut sink = ChannelSink(tx);
        let outcome = run_agent_with_sink(&request, &config, &deps, &mut sink).map_err(|e| e.to_string());
        // close the queue, then wait until the forwarder has drained it
        drop(sink);
        loop {
            let mut data = session.data.lock().unwrap();
            let expected = outcome.as_ref().map_or(data.events.len(), |r| r.event_log.len());
            if data.events.len() >= expected {
                data.outcome = Some(outcome);
                break;
            }
            drop(data);
            std::thread::sleep(std::time::Duration::from_millis(1));
        }
        session.touch();
    });
    (StatusCode::ACCEPTED, Json(RunAccepted { session_id: id })).into_response()
}

fn event_stream(session: Arc<Session>) -> impl Stream<Item = Result<Event, Infallible>> {
    let rx = session.version.subscribe();
    stream::unfold(
        (session, rx, 0usize, false),
        |(session, mut rx, cursor, finished)| async move {
            if finished {
                return None;
            }
            loop {
                rx.borrow_and_update();
                let (batch, done) = {
                    let data = session.data.lock().unwrap();
                    (data.events[cursor..].to_vec(), data.outcome.is_some())
                };
                if !batch.is_empty() || done {
                    let next = cursor + batch.len();
                    let events: Vec<Result<Event, Infallible>> = batch
                        .iter()
                        .map(|e| {
                            Ok(Event::default()
                                .id(e.seq.to_string())
                                .data(serde_json::to_string(e).expect("event serializes")))
                        })
                        .collect();
                    let caught_up = done && next == session.data.lock().unwrap().events.len();
                    return Some((stream::iter(events), (session, rx, next, caught_up)));
                }
                if rx.changed().await.is_err() {
                    return None;
                }
            }
        },
    )
    .flatten()
}

async fn session_events(State(state): State<GatewayState>, Path(id): Path<String>) -> Response {
    match state.session(&id) {
        Some(session) => Sse::new(event_stream(session))
            .keep_alive(KeepAlive::default())
            .into_response(),
        None => json_error(StatusCode::NOT_FOUND, format!("unknown session {id}")),
    }
}

async fn session_result(State(state): State<GatewayState>, Path(id): Path<String>) -> Response {
    let Some(session) = state.session(&id) else {
        return json_error(StatusCode::NOT_FOUND, format!("unknown session {id}"));
    };
    let data = session.data.lock().unwrap();
    match &data.outcome {
        None => json_error(StatusCode::CONFLICT, "session still running"),
        Some(Ok(result)) => Json(result.clone()).into_response(),
        Some(Err(e)) => json_error(StatusCode::INTERNAL_SERVER_ERROR, e.clone()),
    }
}

async fn backends(State(state): State<GatewayState>) -> Response {
    Json(list_backends(&state.runtime.config.executor_settings())).into_response()
}

pub fn router(state: GatewayState) -> Router {
    Router::new()
        .route("/api/run", post(start_run))
        .route("/api/sessions/{id}/events", get(session_events))
        .route("/api/sessions/{id}/result", get(session_result))
        .route("/api/backends", get(backends))
        .with_state(state)
}

/// Serve the gateway on an already bound listener until the task is dropped.
pub async fn serve_gateway(listener: TcpListener, runtime: Arc<Runtime>) -> std::io::Result<()> {
    axum::serve(listener, router(GatewayState::new(runtime))).await
}
