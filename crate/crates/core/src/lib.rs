//! Self-correcting MATPOWER script generation.
//!
//! A request goes through planning and retrieval over the MATPOWER manual,
//! prompt assembly, generation, a static pre-check, execution and semantic
//! validation. Failed attempts are fed back to the generator until the
//! script runs or the iteration budget is spent.
//!
//! Module map:
//!
//! - [`corpus`]: manual sources, sliding-window chunks, Markdown sections
//! - [`vector`]: embedders and the flat cosine index
//! - [`planner`]: query plans, the four retrieval modes, knowledge stores
//! - [`llm`]: chat backends (scripted mock, chat-completions HTTP)
//! - [`prompt`]: layered prompts and code extraction
//! - [`precheck`]: option-name repair and constant injection
//! - [`executor`]: Octave and mock execution backends
//! - [`validator`]: semantic verdicts on executed code
//! - [`agent`]: the correction loop
//! - [`metrics`]: CSGF/GCA scoring and the benchmark runner
//! - [`mcp`]: MCP tool server with worker processes
//! - [`gateway`]: HTTP/SSE gateway
//! - [`config`]: configuration file and backend wiring

pub mod agent;
pub mod config;
pub mod corpus;
pub mod executor;
pub mod gateway;
pub mod llm;
pub mod mcp;
pub mod metrics;
pub mod planner;
pub mod precheck;
pub mod prompt;
pub mod validator;
pub mod vector;

pub use agent::{
    run_agent, run_agent_with_sink, AgentConfig, AgentDeps, AgentError, AgentEvent, AgentResult, EventSink, Phase,
    RunStatus,
};
pub use config::{GridscribeConfig, RunOverrides, Runtime};
pub use corpus::{Corpus, CorpusManifest, DocumentChunk, SectionIndex, SourceDocument, SourceKind, Span};
pub use executor::{ExecBackend, ExecStatus, ExecutionReport, MockExecBackend, MockScenario, OctaveBackend};
pub use llm::{ChatBackend, ChatMessage, CompletionParams, HttpChatBackend, MockBackend, MockScript};
pub use mcp::{McpServer, ResultPacket, WorkerCommand, SENTINEL};
pub use metrics::{csgf, gca, BenchMatrix, BenchSummary, ScoreRecord, TaskRecord};
pub use planner::{KnowledgeContext, KnowledgeStores, QueryPlan, RetrievalMode};
pub use precheck::{precheck, ConventionCatalog, PrecheckReport};
pub use prompt::{ErrorReport, PromptBundle};
pub use validator::{Severity, ValidationVerdict};
pub use vector::{Embedder, EmbeddingVector, HashingEmbedder, VectorIndex};
