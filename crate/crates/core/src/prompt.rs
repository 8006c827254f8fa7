//! Prompt construction and LLM output post-processing.
//!
//! Generation prompts use one system message split into three layers:
//! role (language and constraints), knowledge (retrieved fragments) and
//! task (few-shot pairs, then the user request). The byte range of each
//! layer is recorded in [`LayerSpans`].
//!
//! Template assets under `assets/prompts/` use `{{name}}` placeholders:
//!
//! | asset                 | placeholders                                                        |
//! |-----------------------|---------------------------------------------------------------------|
//! | `task.txt`            | `fewshots`, `request`                                               |
//! | `feedback_report.txt` | `header`, `request`, `failed_code`, `error`, `hints_section`, `context` |
//!
//! The user message of every prompt starts with a marker (`GENERATE#1`,
//! `FEEDBACK#<n>`, `PLAN-REQUEST`, `VALIDATE-REQUEST`) so that scripted
//! backends can key their responses.

use std::ops::Range;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::ChatMessage;
use crate::planner::KnowledgeContext;

pub const ROLE_TEMPLATE: &str = include_str!("../assets/prompts/role.txt");
pub const TASK_TEMPLATE: &str = include_str!("../assets/prompts/task.txt");
pub const PLANNER_TEMPLATE: &str = include_str!("../assets/prompts/planner.txt");
pub const FEEDBACK_TASK_TEMPLATE: &str = include_str!("../assets/prompts/feedback_task.txt");
pub const FEEDBACK_REPORT_TEMPLATE: &str = include_str!("../assets/prompts/feedback_report.txt");
pub const VALIDATOR_TEMPLATE: &str = include_str!("../assets/prompts/validator.txt");
const FEWSHOTS_JSON: &str = include_str!("../assets/fewshots.json");

pub const NO_CONTEXT: &str = "No retrieved context.";
pub const PLANNER_MARKER: &str = "PLAN-REQUEST";
pub const VALIDATOR_MARKER: &str = "VALIDATE-REQUEST";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("no code found in model output")]
    EmptyOutput,
    #[error("prompt input is empty: {0}")]
    EmptyInput(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShot {
    pub request: String,
    pub script: String,
}

/// The three bundled request/script examples.
pub fn bundled_fewshots() -> &'static [FewShot] {
    static SHOTS: OnceLock<Vec<FewShot>> = OnceLock::new();
    SHOTS.get_or_init(|| serde_json::from_str(FEWSHOTS_JSON).expect("bundled few-shots are valid JSON"))
}

/// Byte ranges of each layer inside the system message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpans {
    pub role: Range<usize>,
    pub knowledge: Range<usize>,
    pub task: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub messages: Vec<ChatMessage>,
    pub layers: LayerSpans,
}

impl PromptBundle {
    pub fn system(&self) -> &str {
        &self.messages[0].content
    }

    pub fn role_layer(&self) -> &str {
        &self.system()[self.layers.role.clone()]
    }

    pub fn knowledge_layer(&self) -> &str {
        &self.system()[self.layers.knowledge.clone()]
    }

    pub fn task_layer(&self) -> &str {
        &self.system()[self.layers.task.clone()]
    }

    /// All message contents joined, for substring checks.
    pub fn full_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Failure report fed back to the generator on the next attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub user_request: String,
    pub failed_code: String,
    pub error_text: String,
    pub precheck_hints: Vec<String>,
    pub context: KnowledgeContext,
    /// 1-based number of the attempt that failed.
    pub iteration: usize,
}

/// Substitute `{{name}}` placeholders in one pass; values are not rescanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) => {
                let name = &after[..close];
                match vars.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push_str("{{");
                        out.push_str(name);
                        out.push_str("}}");
                    }
                }
                rest = &after[close + 2..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

fn compose(layers: [&str; 3]) -> (String, LayerSpans) {
    let mut text = String::new();
    let mut ranges: Vec<Range<usize>> = Vec::with_capacity(3);
    for layer in layers {
        if !layer.is_empty() && !text.is_empty() {
            text.push_str("\n\n");
        }
        let start = text.len();
        text.push_str(layer);
        ranges.push(start..text.len());
    }
    let task = ranges.pop().unwrap();
    let knowledge = ranges.pop().unwrap();
    let role = ranges.pop().unwrap();
    (text, LayerSpans { role, knowledge, task })
}

pub fn render_context(context: &KnowledgeContext) -> String {
    if context.fragments.is_empty() {
        return NO_CONTEXT.to_owned();
    }
    context
        .fragments
        .iter()
        .map(|f| format!("[{}]\n{}", f.label, f.text.trim_end()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn render_fewshots(fewshots: &[FewShot]) -> String {
    if fewshots.is_empty() {
        return "(none)".to_owned();
    }
    fewshots
        .iter()
        .enumerate()
        .map(|(i, s)| {
            format!(
                "Example {}\nRequest: {}\n```matlab\n{}\n```",
                i + 1,
                s.request.trim(),
                s.script.trim_end()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// First-attempt prompt: role, knowledge and task layers in one system message.
pub fn build_system_prompt(context: &KnowledgeContext, request: &str, fewshots: &[FewShot]) -> PromptBundle {
    let role = ROLE_TEMPLATE.trim_end();
    let knowledge = render_context(context);
    let task = render(
        TASK_TEMPLATE,
        &[("fewshots", &render_fewshots(fewshots)), ("request", request.trim())],
    );
    let (system, layers) = compose([role, &knowledge, task.trim_end()]);
    PromptBundle {
        messages: vec![
            ChatMessage::system(system),
            ChatMessage::user(format!("GENERATE#1\n{}", request.trim())),
        ],
        layers,
    }
}

/// Prompt for the attempt after `report.iteration`.
///
/// The user message carries, in order: request, failed code, error text,
/// pre-check hints (omitted when there are none) and retrieved context.
pub fn build_feedback_prompt(report: &ErrorReport, n_threshold: usize) -> PromptBundle {
    let header = format!(
        "FEEDBACK#{}: attempt {} of {}",
        report.iteration,
        report.iteration + 1,
        n_threshold
    );
    let hints_section = if report.precheck_hints.is_empty() {
        String::new()
    } else {
        let items: Vec<String> = report.precheck_hints.iter().map(|h| format!("- {h}")).collect();
        format!("\n## Pre-check hints\n{}\n", items.join("\n"))
    };
    let user = render(
        FEEDBACK_REPORT_TEMPLATE,
        &[
            ("header", &header),
            ("request", report.user_request.trim()),
            ("failed_code", report.failed_code.trim_end()),
            ("error", report.error_text.trim_end()),
            ("hints_section", &hints_section),
            ("context", &render_context(&report.context)),
        ],
    );
    let (system, layers) = compose([ROLE_TEMPLATE.trim_end(), "", FEEDBACK_TASK_TEMPLATE.trim_end()]);
    PromptBundle {
        messages: vec![ChatMessage::system(system), ChatMessage::user(user)],
        layers,
    }
}

pub fn build_validator_prompt(request: &str, final_code: &str) -> Result<PromptBundle, PromptError> {
    if request.trim().is_empty() {
        return Err(PromptError::EmptyInput("request"));
    }
    if final_code.trim().is_empty() {
        return Err(PromptError::EmptyInput("final_code"));
    }
    let (system, layers) = compose([VALIDATOR_TEMPLATE.trim_end(), "", ""]);
    let user = format!("{VALIDATOR_MARKER}\n## User request\n{request}\n\n## Final code\n```matlab\n{final_code}\n```");
    Ok(PromptBundle {
        messages: vec![ChatMessage::system(system), ChatMessage::user(user)],
        layers,
    })
}

pub fn build_planner_prompt(request: &str) -> PromptBundle {
    let (system, layers) = compose([PLANNER_TEMPLATE.trim_end(), "", ""]);
    PromptBundle {
        messages: vec![
            ChatMessage::system(system),
            ChatMessage::user(format!("{PLANNER_MARKER}\n{request}")),
        ],
        layers,
    }
}

/// Contents of the first fenced code block, or the whole trimmed text when
/// there is no fence.
pub fn extract_code(completion: &str) -> Result<String, PromptError> {
    let code = match completion.find("```") {
        None => completion.trim(),
        Some(open) => {
            let after = &completion[open + 3..];
            let body = match after.find("```") {
                Some(close) => &after[..close],
                None => after,
            };
            // the first line of a multi-line block is the info string
            match body.find('\n') {
                Some(nl) => &body[nl + 1..],
                None => body,
            }
            .trim()
        }
    };
    if code.is_empty() {
        Err(PromptError::EmptyOutput)
    } else {
        Ok(code.to_owned())
    }
}
