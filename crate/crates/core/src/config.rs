//! Runtime configuration file and backend wiring.
//!
//! The file is flat JSON. Relative paths resolve against the file's
//! directory:
//!
//! ```json
//! {
//!   "matpower_dir": "/opt/matpower",
//!   "octave_bin": "octave-cli",
//!   "exec_timeout_ms": 120000,
//!   "exec_pool": 2,
//!   "index_dir": "index",
//!   "llm": "mock",
//!   "llm_script": "mock/llm.json",
//!   "exec_scenario": "mock/exec.json",
//!   "rag_mode": "enhanced"
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::corpus::CorpusManifest;
use crate::executor::{
    ExecBackend, ExecutorPool, ExecutorSettings, MockExecBackend, MockScenario, OctaveBackend, DEFAULT_POOL,
};
use crate::llm::{load_mock_script, ChatBackend, HttpChatBackend, MockBackend};
use crate::metrics::{ExecutorKind, LlmKind};
use crate::planner::{KnowledgeStores, RetrievalMode};
use crate::vector::HashingEmbedder;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("backend unavailable: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridscribeConfig {
    pub matpower_dir: Option<PathBuf>,
    pub octave_bin: Option<PathBuf>,
    pub exec_timeout_ms: Option<u64>,
    pub exec_pool: Option<usize>,
    /// Directory written by `gridscribe index`.
    pub index_dir: Option<PathBuf>,
    /// Build stores in memory from a corpus manifest when no index is given.
    pub corpus_manifest: Option<PathBuf>,
    pub llm: Option<LlmKind>,
    pub llm_script: Option<PathBuf>,
    pub exec_scenario: Option<PathBuf>,
    pub rag_mode: Option<RetrievalMode>,
    pub feedback_enabled: Option<bool>,
    pub planner_enabled: Option<bool>,
    pub validator_enabled: Option<bool>,
    pub n_threshold: Option<usize>,
    pub k: Option<usize>,
    pub context_budget: Option<usize>,
    pub mcp_worker_limit: Option<usize>,
    pub worker_timeout_ms: Option<u64>,
}

impl GridscribeConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let err = |message: String| ConfigError::Read {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.matpower_dir,
            &mut cfg.index_dir,
            &mut cfg.corpus_manifest,
            &mut cfg.llm_script,
            &mut cfg.exec_scenario,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        // a bare interpreter name is looked up on PATH, a relative path is not
        if let Some(bin) = &mut cfg.octave_bin {
            if bin.components().count() > 1 && bin.is_relative() {
                *bin = base.join(&*bin);
            }
        }
        Ok(cfg)
    }

    pub fn executor_settings(&self) -> ExecutorSettings {
        ExecutorSettings {
            octave_bin: self.octave_bin.clone(),
            matpower_dir: self.matpower_dir.clone(),
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        let mut c = AgentConfig::full_model();
        RunOverrides {
            rag_mode: self.rag_mode,
            feedback_enabled: self.feedback_enabled,
            planner_enabled: self.planner_enabled,
            validator_enabled: self.validator_enabled,
            n_threshold: self.n_threshold,
            k: self.k,
            context_budget: self.context_budget,
            exec_timeout_ms: self.exec_timeout_ms,
        }
        .apply(&mut c);
        c
    }

    pub fn llm_kind(&self) -> LlmKind {
        self.llm.unwrap_or(if self.llm_script.is_some() {
            LlmKind::Mock
        } else {
            LlmKind::Http
        })
    }
}

/// Per-run adjustments on top of the configured agent settings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOverrides {
    pub rag_mode: Option<RetrievalMode>,
    pub feedback_enabled: Option<bool>,
    pub planner_enabled: Option<bool>,
    pub validator_enabled: Option<bool>,
    pub n_threshold: Option<usize>,
    pub k: Option<usize>,
    pub context_budget: Option<usize>,
    pub exec_timeout_ms: Option<u64>,
}

impl RunOverrides {
    pub fn apply(&self, c: &mut AgentConfig) {
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
    }
}

/// Long-lived wiring shared by every run of a process: the knowledge stores
/// and, when used, one bounded Octave pool.
pub struct Runtime {
    pub config: GridscribeConfig,
    pub stores: Arc<KnowledgeStores>,
    octave: Option<Arc<ExecutorPool<OctaveBackend>>>,
}

impl Runtime {
    pub fn new(config: GridscribeConfig) -> Result<Self, ConfigError> {
        let embedder = Arc::new(HashingEmbedder::default());
        let stores = match (&config.index_dir, &config.corpus_manifest) {
            (Some(dir), _) => KnowledgeStores::load(dir, embedder).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            (None, Some(manifest)) => {
                let corpus = CorpusManifest::load(manifest)
                    .and_then(|m| m.load_corpus())
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                KnowledgeStores::from_corpus(&corpus, embedder).map_err(|e| ConfigError::Invalid(e.to_string()))?
            }
            (None, None) => KnowledgeStores::empty(embedder),
        };
        let octave = config.matpower_dir.as_ref().map(|dir| {
            let bin = config.octave_bin.clone().unwrap_or_else(|| "octave".into());
            Arc::new(ExecutorPool::new(
                OctaveBackend::new(bin, dir),
                config.exec_pool.unwrap_or(DEFAULT_POOL),
            ))
        });
        Ok(Self {
            config,
            stores: Arc::new(stores),
            octave,
        })
    }

    /// A fresh generation backend for one run.
    pub fn llm(&self) -> Result<Box<dyn ChatBackend>, ConfigError> {
        match self.config.llm_kind() {
            LlmKind::Mock => {
                let path = self
                    .config
                    .llm_script
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("llm \"mock\" needs llm_script".into()))?;
                let script = load_mock_script(path).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(Box::new(MockBackend::new(script)))
            }
            LlmKind::Http => Ok(Box::new(
                HttpChatBackend::from_env().map_err(|e| ConfigError::Backend(e.to_string()))?,
            )),
        }
    }

    /// Executor for one run. Mock executors are fresh per run so that
    /// scenario attempt numbering starts at the first attempt.
    pub fn executor(&self, kind: ExecutorKind) -> Result<Arc<dyn ExecBackend>, ConfigError> {
        match kind {
            ExecutorKind::Mock => {
                let scenario = match &self.config.exec_scenario {
                    Some(p) => MockScenario::load(p).map_err(|e| ConfigError::Invalid(e.to_string()))?,
                    None => MockScenario::default(),
                };
                Ok(Arc::new(MockExecBackend::new(scenario)))
            }
            ExecutorKind::Octave => match &self.octave {
                Some(pool) => Ok(pool.clone()),
                None => Err(ConfigError::Backend("octave needs matpower_dir in the config".into())),
            },
        }
    }
}

pub fn parse_executor_kind(s: &str) -> Result<ExecutorKind, ConfigError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "mock" => Ok(ExecutorKind::Mock),
        "octave" => Ok(ExecutorKind::Octave),
        other => Err(ConfigError::Invalid(format!(
            "unknown backend '{other}' (expected mock or octave)"
        ))),
    }
}
