//! Post-execution semantic check of the final script against the request.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{ExecStatus, ExecutionReport};
use crate::llm::{ChatBackend, CompletionParams, LlmError};
use crate::prompt::{build_validator_prompt, PromptError};

pub const UNPARSABLE_ISSUE: &str = "validator output unparsable";

#[derive(Debug, Error)]
pub enum ValidatorError {
    #[error("validator needs a successful execution, got {0:?}")]
    NotExecuted(ExecStatus),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    None,
    Minor,
    Critical,
}

impl Severity {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Some(Self::None),
            "minor" => Some(Self::Minor),
            "critical" => Some(Self::Critical),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub severity: Severity,
    pub issues: Vec<String>,
    pub raw_text: String,
}

impl ValidationVerdict {
    pub fn is_critical(&self) -> bool {
        self.severity == Severity::Critical
    }

    fn unparsable(raw: &str) -> Self {
        Self {
            severity: Severity::Minor,
            issues: vec![UNPARSABLE_ISSUE.to_owned()],
            raw_text: raw.to_owned(),
        }
    }
}

fn verdict_from_value(value: &serde_json::Value, raw: &str) -> Option<ValidationVerdict> {
    let obj = value.as_object()?;
    let severity = Severity::parse(obj.get("severity")?.as_str()?)?;
    let issues = obj
        .get("issues")?
        .as_array()?
        .iter()
        .map(|v| v.as_str().map(|s| s.trim().to_owned()))
        .collect::<Option<Vec<_>>>()?;
    let issues: Vec<String> = issues.into_iter().filter(|s| !s.is_empty()).collect();
    if severity != Severity::None && issues.is_empty() {
        return None;
    }
    Some(ValidationVerdict {
        severity,
        issues,
        raw_text: raw.to_owned(),
    })
}

/// Parse validator output. Never fails: anything that does not yield a
/// schema-valid verdict becomes a minor verdict flagged as unparsable.
///
/// Objects carrying a `severity` key are preferred over earlier objects
/// without one, so braces inside code fences do not shadow the verdict.
pub fn parse_verdict(text: &str) -> ValidationVerdict {
    let mut first: Option<serde_json::Value> = None;
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
        if let Some(Ok(v @ serde_json::Value::Object(_))) = stream.next() {
            if v.get("severity").is_some() {
                return verdict_from_value(&v, text).unwrap_or_else(|| ValidationVerdict::unparsable(text));
            }
            first.get_or_insert(v);
        }
    }
    first
        .and_then(|v| verdict_from_value(&v, text))
        .unwrap_or_else(|| ValidationVerdict::unparsable(text))
}

/// Ask an independent conversation whether `final_code` does what was asked.
pub fn validate(
    request: &str,
    final_code: &str,
    exec_report: &ExecutionReport,
    llm: &dyn ChatBackend,
) -> Result<ValidationVerdict, ValidatorError> {
    if exec_report.status != ExecStatus::Success {
        return Err(ValidatorError::NotExecuted(exec_report.status));
    }
    let bundle = build_validator_prompt(request, final_code)?;
    let completion = llm.complete(&bundle.messages, &CompletionParams::validation())?;
    Ok(parse_verdict(&completion.text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, CompletionResult, MockBackend};
    use std::sync::Mutex;

    fn ok_report() -> ExecutionReport {
        ExecutionReport {
            status: ExecStatus::Success,
            stdout: String::new(),
            stderr: String::new(),
            error_text: String::new(),
            warnings: vec![],
            duration_ms: 1,
        }
    }

    #[test]
    fn critical_fixture() {
        let mock = MockBackend::from_texts([r#"{"severity":"critical","issues":["ran AC PF but DC was requested"]}"#]);
        let v = validate("run a DC power flow on case9", "runpf('case9')", &ok_report(), &mock).unwrap();
        assert_eq!(v.severity, Severity::Critical);
        assert_eq!(v.issues, vec!["ran AC PF but DC was requested"]);
        assert!(v.is_critical());
    }

    #[test]
    fn none_passes() {
        let mock = MockBackend::from_texts([r#"{"severity":"none","issues":[]}"#]);
        let v = validate("run case9", "runpf('case9')", &ok_report(), &mock).unwrap();
        assert_eq!(v.severity, Severity::None);
        assert!(v.issues.is_empty());
    }

    #[test]
    fn prose_is_minor_unparsable() {
        let v = parse_verdict("Looks fine to me, nothing to add.");
        assert_eq!(v.severity, Severity::Minor);
        assert_eq!(v.issues, vec![UNPARSABLE_ISSUE]);
        assert_eq!(v.raw_text, "Looks fine to me, nothing to add.");
    }

    #[test]
    fn embedded_and_cased() {
        let v = parse_verdict(r#"Verdict: {"severity":"Minor","issues":["hard-coded bus index"]}"#);
        assert_eq!(v.severity, Severity::Minor);
        assert_eq!(v.issues, vec!["hard-coded bus index"]);

        let v = parse_verdict("{}");
        assert_eq!(v.issues, vec![UNPARSABLE_ISSUE]);

        let text = "```matlab\ns = struct('a', {1});\nx = {\"k\": 1};\n```\n{\"severity\":\"CRITICAL\",\"issues\":[\"wrong case\"]}";
        let v = parse_verdict(text);
        assert_eq!(v.severity, Severity::Critical);
        assert_eq!(v.issues, vec!["wrong case"]);
    }

    #[test]
    fn schema_violations_fall_back() {
        for text in [
            r#"{"severity":"fatal","issues":["x"]}"#,
            r#"{"severity":"minor","issues":[]}"#,
            r#"{"severity":"critical"}"#,
            r#"{"severity":"minor","issues":[3]}"#,
            r#"{"severity":1,"issues":["x"]}"#,
        ] {
            let v = parse_verdict(text);
            assert_eq!(
                (v.severity, v.issues.as_slice()),
                (Severity::Minor, [UNPARSABLE_ISSUE.to_owned()].as_slice()),
                "{text}"
            );
        }
    }

    #[test]
    fn requires_success_and_zero_temperature() {
        struct Spy(Mutex<Vec<(Vec<ChatMessage>, f64)>>);
        impl ChatBackend for Spy {
            fn id(&self) -> String {
                "spy".into()
            }
            fn complete(&self, m: &[ChatMessage], p: &CompletionParams) -> Result<CompletionResult, LlmError> {
                self.0.lock().unwrap().push((m.to_vec(), p.temperature));
                Ok(CompletionResult {
                    text: r#"{"severity":"none","issues":[]}"#.into(),
                    backend: "spy".into(),
                    latency_ms: 0,
                    truncated: false,
                })
            }
        }
        let spy = Spy(Mutex::new(vec![]));
        let mut failed = ok_report();
        failed.status = ExecStatus::RuntimeError;
        assert!(matches!(
            validate("r", "c", &failed, &spy),
            Err(ValidatorError::NotExecuted(_))
        ));
        validate("run case9", "runpf('case9')", &ok_report(), &spy).unwrap();
        let calls = spy.0.lock().unwrap();
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].1, 0.0);
        assert_eq!(calls[0].0.len(), 2);
        assert!(calls[0].0[1].content.contains("runpf('case9')"));
    }

    proptest::proptest! {
        #[test]
        fn parse_is_total(s in ".{0,200}") {
            let v = parse_verdict(&s);
            proptest::prop_assert!(v.severity == Severity::None || !v.issues.is_empty());
        }
    }
}
