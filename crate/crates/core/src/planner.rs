//! Query planning and retrieval.
//!
//! A request is decomposed into sub-requests with keywords (by the LLM when
//! its output parses, by a rule-based fallback otherwise), each sub-request
//! is run against the store that the configured [`RetrievalMode`] selects,
//! and the merged fragments become the [`KnowledgeContext`] of the prompt.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_section_index, chunk_sliding, chunk_sliding_from, Corpus, CorpusError, SectionIndex};
use crate::llm::{find_json_object, ChatBackend, CompletionParams};
use crate::prompt;
use crate::vector::{build_index, Embedder, HashingEmbedder, RetrievalHit, VectorError, VectorIndex};

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_CONTEXT_BUDGET: usize = 6000;

const STOPWORDS: &str = include_str!("../assets/stopwords.txt");

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("request is empty")]
    EmptyRequest,
    #[error("retrieval mode {0} needs a store that is not loaded")]
    StoreMissing(RetrievalMode),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("store io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RetrievalMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "ocr", alias = "ocr_keyword")]
    OcrKeyword,
    #[serde(rename = "pdf", alias = "pdf_vector")]
    PdfVector,
    #[serde(rename = "enhanced", alias = "enhanced_vector")]
    EnhancedVector,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 4] = [
        RetrievalMode::None,
        RetrievalMode::OcrKeyword,
        RetrievalMode::PdfVector,
        RetrievalMode::EnhancedVector,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RetrievalMode::None => "none",
            RetrievalMode::OcrKeyword => "ocr",
            RetrievalMode::PdfVector => "pdf",
            RetrievalMode::EnhancedVector => "enhanced",
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(RetrievalMode::None),
            "ocr" | "ocr_keyword" => Ok(RetrievalMode::OcrKeyword),
            "pdf" | "pdf_vector" => Ok(RetrievalMode::PdfVector),
            "enhanced" | "enhanced_vector" => Ok(RetrievalMode::EnhancedVector),
            other => Err(format!(
                "unknown retrieval mode '{other}' (expected none|ocr|pdf|enhanced)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubRequest {
    pub text: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    Llm,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub subrequests: Vec<SubRequest>,
    pub source: PlanSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeContext {
    pub fragments: Vec<Fragment>,
    pub total_chars: usize,
    pub mode: RetrievalMode,
    pub k: usize,
}

impl KnowledgeContext {
    pub fn empty(mode: RetrievalMode, k: usize) -> Self {
        Self {
            fragments: Vec::new(),
            total_chars: 0,
            mode,
            k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }
}

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS.lines().map(str::trim).filter(|l| !l.is_empty()).collect())
}

pub fn is_stopword(word: &str) -> bool {
    stopwords().contains(word)
}

/// Lowercase words of the request minus stopwords, deduplicated in order.
pub fn fallback_keywords(request: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    request
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !is_stopword(w))
        .filter(|w| seen.insert(w.clone()))
        .collect()
}

pub fn fallback_plan(request: &str) -> Result<QueryPlan, PlannerError> {
    let trimmed = request.trim();
    if trimmed.is_empty() {
        return Err(PlannerError::EmptyRequest);
    }
    Ok(QueryPlan {
        subrequests: vec![SubRequest {
            text: trimmed.to_owned(),
            keywords: fallback_keywords(trimmed),
        }],
        source: PlanSource::Fallback,
    })
}

#[derive(Deserialize)]
struct RawPlan {
    subrequests: Vec<RawSubRequest>,
}

#[derive(Deserialize)]
struct RawSubRequest {
    text: String,
    #[serde(default)]
    keywords: Vec<String>,
}

/// Validate LLM planner output against the plan schema.
pub fn parse_plan(text: &str) -> Option<QueryPlan> {
    let value = find_json_object(text)?;
    let raw: RawPlan = serde_json::from_value(value).ok()?;
    let subrequests: Vec<SubRequest> = raw
        .subrequests
        .into_iter()
        .filter(|s| !s.text.trim().is_empty())
        .map(|s| {
            let mut seen = HashSet::new();
            let keywords = s
                .keywords
                .iter()
                .map(|k| k.trim().to_lowercase())
                .filter(|k| !k.is_empty() && seen.insert(k.clone()))
                .collect();
            SubRequest {
                text: s.text.trim().to_owned(),
                keywords,
            }
        })
        .collect();
    if subrequests.is_empty() {
        return None;
    }
    Some(QueryPlan {
        subrequests,
        source: PlanSource::Llm,
    })
}

/// Ask the LLM for a plan; any failure degrades to [`fallback_plan`].
pub fn plan_query(request: &str, llm: &dyn ChatBackend) -> Result<QueryPlan, PlannerError> {
    let fallback = fallback_plan(request)?;
    let bundle = prompt::build_planner_prompt(request.trim());
    match llm.complete(&bundle.messages, &CompletionParams::validation()) {
        Ok(out) => Ok(parse_plan(&out.text).unwrap_or_else(|| {
            tracing::debug!("planner output did not match the plan schema; using fallback");
            fallback
        })),
        Err(e) => {
            tracing::warn!(error = %e, "planner call failed; using fallback plan");
            Ok(fallback)
        }
    }
}

/// Mode 1 retrieval: count case-insensitive keyword occurrences per section.
pub fn keyword_search(sections: &SectionIndex, keywords: &[String], k: usize) -> Vec<RetrievalHit> {
    let needles: Vec<String> = keywords
        .iter()
        .map(|w| w.to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    let mut scored: Vec<(usize, usize)> = sections
        .sections
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let hay = format!("{}\n{}", s.heading_path.join("\n"), s.body).to_lowercase();
            let score: usize = needles.iter().map(|n| hay.matches(n.as_str()).count()).sum();
            (score > 0).then_some((i, score))
        })
        .collect();
    // stable sort keeps section order among equal scores
    scored.sort_by_key(|s| std::cmp::Reverse(s.1));
    scored
        .into_iter()
        .take(k)
        .map(|(i, score)| {
            let s = &sections.sections[i];
            let text = if s.heading_path.is_empty() {
                s.body.clone()
            } else {
                format!("{}\n{}", s.heading_path.join(" > "), s.body)
            };
            RetrievalHit {
                chunk_id: i as u32,
                score: score as f64,
                source_id: sections.source_id.clone(),
                heading_path: s.heading_path.clone(),
                text,
            }
        })
        .collect()
}

/// Retrieval backing stores for every mode.
#[derive(Clone)]
pub struct KnowledgeStores {
    pub embedder: Arc<dyn Embedder>,
    pub pdf: Option<VectorIndex>,
    pub enhanced: Option<VectorIndex>,
    pub sections: Option<SectionIndex>,
}

impl fmt::Debug for KnowledgeStores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KnowledgeStores")
            .field("embedder", &self.embedder.id())
            .field("pdf", &self.pdf.as_ref().map(VectorIndex::len))
            .field("enhanced", &self.enhanced.as_ref().map(VectorIndex::len))
            .field("sections", &self.sections.as_ref().map(|s| s.sections.len()))
            .finish()
    }
}

const PDF_INDEX_FILE: &str = "pdf.gsix";
const ENHANCED_INDEX_FILE: &str = "enhanced.gsix";
const SECTIONS_FILE: &str = "sections.json";

impl Default for KnowledgeStores {
    fn default() -> Self {
        Self::empty(Arc::new(HashingEmbedder::default()))
    }
}

impl KnowledgeStores {
    pub fn empty(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            embedder,
            pdf: None,
            enhanced: None,
            sections: None,
        }
    }

    /// Build every store the corpus supports: PDF-only and enhanced vector
    /// indexes plus the Markdown section index.
    pub fn from_corpus(corpus: &Corpus, embedder: Arc<dyn Embedder>) -> Result<Self, PlannerError> {
        let pdf = match &corpus.raw {
            Some(raw) => Some(build_index(
                &chunk_sliding(raw, corpus.window, corpus.stride)?,
                embedder.as_ref(),
            )?),
            None => None,
        };
        let enhanced = match corpus.enhanced()? {
            Some(doc) => Some(build_index(
                &chunk_sliding_from(&doc, corpus.window, corpus.stride, 0)?,
                embedder.as_ref(),
            )?),
            None => None,
        };
        let sections = match &corpus.markdown {
            Some(md) => Some(build_section_index(md)?),
            None => None,
        };
        Ok(Self {
            embedder,
            pdf,
            enhanced,
            sections,
        })
    }

    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<(), PlannerError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| PlannerError::Io(format!("{}: {e}", dir.display())))?;
        if let Some(idx) = &self.pdf {
            idx.persist(dir.join(PDF_INDEX_FILE))?;
        }
        if let Some(idx) = &self.enhanced {
            idx.persist(dir.join(ENHANCED_INDEX_FILE))?;
        }
        if let Some(sections) = &self.sections {
            let json = serde_json::to_string_pretty(sections).expect("sections serialize");
            fs::write(dir.join(SECTIONS_FILE), json).map_err(|e| PlannerError::Io(e.to_string()))?;
        }
        Ok(())
    }

    /// Load whatever stores exist in `dir`; missing files leave the slot empty.
    pub fn load(dir: impl AsRef<Path>, embedder: Arc<dyn Embedder>) -> Result<Self, PlannerError> {
        let dir = dir.as_ref();
        let load_idx = |name: &str| -> Result<Option<VectorIndex>, PlannerError> {
            let p = dir.join(name);
            if p.exists() {
                Ok(Some(VectorIndex::load(p)?))
            } else {
                Ok(None)
            }
        };
        let sections_path = dir.join(SECTIONS_FILE);
        let sections = if sections_path.exists() {
            let text = fs::read_to_string(&sections_path).map_err(|e| PlannerError::Io(e.to_string()))?;
            Some(
                serde_json::from_str(&text)
                    .map_err(|e| PlannerError::Io(format!("{}: {e}", sections_path.display())))?,
            )
        } else {
            None
        };
        Ok(Self {
            pdf: load_idx(PDF_INDEX_FILE)?,
            enhanced: load_idx(ENHANCED_INDEX_FILE)?,
            sections,
            embedder,
        })
    }

    /// Fails with [`PlannerError::StoreMissing`] when `mode` cannot be served.
    pub fn check_mode(&self, mode: RetrievalMode) -> Result<(), PlannerError> {
        let ok = match mode {
            RetrievalMode::None => true,
            RetrievalMode::OcrKeyword => self.sections.is_some(),
            RetrievalMode::PdfVector => self.pdf.is_some(),
            RetrievalMode::EnhancedVector => self.enhanced.is_some(),
        };
        if ok {
            Ok(())
        } else {
            Err(PlannerError::StoreMissing(mode))
        }
    }
}

fn hit_label(hit: &RetrievalHit, mode: RetrievalMode) -> String {
    let mut label = match mode {
        RetrievalMode::OcrKeyword => format!("{} section {}", hit.source_id, hit.chunk_id),
        _ => format!("{} chunk {}", hit.source_id, hit.chunk_id),
    };
    if !hit.heading_path.is_empty() {
        label.push_str(" | ");
        label.push_str(&hit.heading_path.join(" > "));
    }
    label
}

/// Run every sub-request against the mode's store and merge the fragments.
///
/// Results are merged in plan order, exact-duplicate texts are dropped, and
/// the list is cut at the first fragment that would exceed `budget` chars.
pub fn retrieve_context(
    plan: &QueryPlan,
    mode: RetrievalMode,
    stores: &KnowledgeStores,
    k: usize,
    budget: usize,
) -> Result<KnowledgeContext, PlannerError> {
    if mode == RetrievalMode::None {
        return Ok(KnowledgeContext::empty(mode, k));
    }
    stores.check_mode(mode)?;
    let mut hits: Vec<RetrievalHit> = Vec::new();
    for sub in &plan.subrequests {
        match mode {
            RetrievalMode::OcrKeyword => {
                let sections = stores.sections.as_ref().ok_or(PlannerError::StoreMissing(mode))?;
                hits.extend(keyword_search(sections, &sub.keywords, k));
            }
            RetrievalMode::PdfVector | RetrievalMode::EnhancedVector => {
                let index = if mode == RetrievalMode::PdfVector {
                    stores.pdf.as_ref()
                } else {
                    stores.enhanced.as_ref()
                }
                .ok_or(PlannerError::StoreMissing(mode))?;
                let query = if sub.keywords.is_empty() {
                    sub.text.clone()
                } else {
                    format!("{} {}", sub.text, sub.keywords.join(" "))
                };
                let q = stores.embedder.embed(&query)?;
                hits.extend(index.search(&q, k)?);
            }
            RetrievalMode::None => unreachable!(),
        }
    }
    Ok(assemble(hits, mode, k, budget))
}

fn assemble(hits: Vec<RetrievalHit>, mode: RetrievalMode, k: usize, budget: usize) -> KnowledgeContext {
    let mut seen: HashSet<String> = HashSet::new();
    let mut fragments = Vec::new();
    let mut total = 0usize;
    for hit in hits {
        if seen.contains(&hit.text) {
            continue;
        }
        let len = hit.text.chars().count();
        if total + len > budget {
            break;
        }
        total += len;
        seen.insert(hit.text.clone());
        fragments.push(Fragment {
            label: hit_label(&hit, mode),
            text: hit.text,
        });
    }
    KnowledgeContext {
        fragments,
        total_chars: total,
        mode,
        k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SourceDocument, SourceKind};
    use crate::llm::MockBackend;
    use proptest::prelude::*;

    fn sections(text: &str) -> SectionIndex {
        build_section_index(&SourceDocument::new("m", SourceKind::OcrMarkdown, text)).unwrap()
    }

    fn kw(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn llm_plan_is_parsed_and_normalized() {
        let mock = MockBackend::from_texts([
            r#"{"subrequests":[{"text":"run dc power flow","keywords":["rundcpf","dc power flow"]},{"text":"increase load","keywords":["PD","bus matrix"]}]}"#,
        ]);
        let plan = plan_query("Increase load and run DC PF", &mock).unwrap();
        assert_eq!(plan.source, PlanSource::Llm);
        assert_eq!(plan.subrequests.len(), 2);
        assert_eq!(plan.subrequests[1].keywords, kw(&["pd", "bus matrix"]));
    }

    #[test]
    fn prose_output_falls_back() {
        let mock = MockBackend::from_texts(["Sure! First you should load the case."]);
        let plan = plan_query("Run a DC power flow on case14", &mock).unwrap();
        assert_eq!(plan.source, PlanSource::Fallback);
        assert_eq!(plan.subrequests.len(), 1);
        assert_eq!(plan.subrequests[0].text, "Run a DC power flow on case14");
        assert_eq!(
            plan.subrequests[0].keywords,
            kw(&["run", "dc", "power", "flow", "case14"])
        );
    }

    #[test]
    fn backend_failure_falls_back() {
        let exhausted = MockBackend::from_texts(Vec::<String>::new());
        let plan = plan_query("runpf case9", &exhausted).unwrap();
        assert_eq!(plan.source, PlanSource::Fallback);
        assert!(matches!(plan_query("   ", &exhausted), Err(PlannerError::EmptyRequest)));
    }

    #[test]
    fn schema_violations_fall_back() {
        assert!(parse_plan(r#"{"subrequests":[]}"#).is_none());
        assert!(parse_plan(r#"{"subrequests":[{"text":"  ","keywords":["a"]}]}"#).is_none());
        assert!(parse_plan(r#"{"plan":"x"}"#).is_none());
        let p = parse_plan(r#"noise {"subrequests":[{"text":"x","keywords":["A"," a ",""]}]}"#).unwrap();
        assert_eq!(p.subrequests[0].keywords, kw(&["a"]));
    }

    #[test]
    fn fallback_keywords_dedupe_and_keep_order() {
        assert_eq!(
            fallback_keywords("Load case57. Run the AC power flow and the DC power flow."),
            kw(&["load", "case57", "run", "ac", "power", "flow", "dc"])
        );
        assert_eq!(fallback_keywords("RATE_A limit"), kw(&["rate_a", "limit"]));
    }

    #[test]
    fn keyword_counting() {
        let idx = sections("# runpf\nrunpf runs a power flow; see RUNPF options\n# other\nnothing here");
        let hits = keyword_search(&idx, &kw(&["runpf"]), 4);
        assert_eq!(hits.len(), 1);
        // heading + two body occurrences
        assert_eq!(hits[0].score, 3.0);

        let idx = sections("# a\nrunpf twice runpf\n# b\nnothing");
        let hits = keyword_search(&idx, &kw(&["runpf"]), 4);
        assert_eq!(hits[0].score, 2.0);
        assert!(keyword_search(&idx, &kw(&["zzz"]), 4).is_empty());
    }

    #[test]
    fn keyword_top_k_and_ties() {
        let idx = sections("# s1\nflow\n# s2\nflow flow flow\n# s3\nflow");
        let hits = keyword_search(&idx, &kw(&["flow"]), 1);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].chunk_id, 1);
        assert_eq!(hits[0].score, 3.0);
        let all = keyword_search(&idx, &kw(&["flow"]), 5);
        assert_eq!(all.iter().map(|h| h.chunk_id).collect::<Vec<_>>(), vec![1, 0, 2]);
    }

    fn fake_hit(id: u32, len: usize, ch: char) -> RetrievalHit {
        RetrievalHit {
            chunk_id: id,
            score: 1.0,
            source_id: "s".into(),
            heading_path: vec![],
            text: std::iter::repeat_n(ch, len).collect(),
        }
    }

    #[test]
    fn none_mode_is_empty() {
        let plan = fallback_plan("anything").unwrap();
        let ctx = retrieve_context(&plan, RetrievalMode::None, &KnowledgeStores::default(), 4, 6000).unwrap();
        assert!(ctx.fragments.is_empty());
        assert_eq!(ctx.total_chars, 0);
    }

    #[test]
    fn missing_store_is_reported() {
        let plan = fallback_plan("anything").unwrap();
        for mode in [
            RetrievalMode::OcrKeyword,
            RetrievalMode::PdfVector,
            RetrievalMode::EnhancedVector,
        ] {
            assert!(matches!(
                retrieve_context(&plan, mode, &KnowledgeStores::default(), 4, 6000),
                Err(PlannerError::StoreMissing(m)) if m == mode
            ));
        }
    }

    #[test]
    fn union_of_subrequest_hits() {
        let idx = sections("# a\nalpha shared\n# b\nbeta shared\n# c\ngamma shared shared shared\n");
        let stores = KnowledgeStores {
            sections: Some(idx),
            ..KnowledgeStores::default()
        };
        let plan = QueryPlan {
            subrequests: vec![
                SubRequest {
                    text: "one".into(),
                    keywords: kw(&["shared", "alpha"]),
                },
                SubRequest {
                    text: "two".into(),
                    keywords: kw(&["shared", "beta"]),
                },
            ],
            source: PlanSource::Llm,
        };
        // sub 1 top-2: c (3), a (2); sub 2 top-2: c (3), b (2)
        let ctx = retrieve_context(&plan, RetrievalMode::OcrKeyword, &stores, 2, 6000).unwrap();
        assert_eq!(ctx.fragments.len(), 3);
        assert!(ctx.fragments[0].text.contains("gamma"));
        assert!(ctx.fragments[1].text.contains("alpha"));
        assert!(ctx.fragments[2].text.contains("beta"));
    }

    #[test]
    fn budget_truncates_at_fragment_granularity() {
        let ctx = assemble(
            vec![fake_hit(0, 300, 'a'), fake_hit(1, 300, 'b')],
            RetrievalMode::PdfVector,
            4,
            500,
        );
        assert_eq!(ctx.fragments.len(), 1);
        assert_eq!(ctx.total_chars, 300);
    }

    #[test]
    fn mode_parsing() {
        for m in RetrievalMode::ALL {
            assert_eq!(m.as_str().parse::<RetrievalMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<RetrievalMode>(&json).unwrap(), m);
        }
        assert_eq!(
            "enhanced_vector".parse::<RetrievalMode>().unwrap(),
            RetrievalMode::EnhancedVector
        );
        assert!("rag".parse::<RetrievalMode>().is_err());
    }

    proptest! {
        #[test]
        fn fallback_is_total(req in "\\PC{0,60}") {
            let res = fallback_plan(&req);
            if req.trim().is_empty() {
                prop_assert!(res.is_err());
            } else {
                let plan = res.unwrap();
                prop_assert_eq!(plan.subrequests.len(), 1);
                for k in &plan.subrequests[0].keywords {
                    prop_assert!(!k.is_empty());
                    prop_assert_eq!(k, &k.to_lowercase());
                }
            }
        }

        #[test]
        fn assembled_context_is_unique_and_within_budget(
            lens in proptest::collection::vec((1usize..400, 0u8..6), 0..30),
            budget in 0usize..3000,
        ) {
            let hits: Vec<RetrievalHit> = lens
                .iter()
                .enumerate()
                .map(|(i, (len, ch))| fake_hit(i as u32, *len, (b'a' + ch) as char))
                .collect();
            let ctx = assemble(hits, RetrievalMode::EnhancedVector, 4, budget);
            prop_assert!(ctx.total_chars <= budget);
            let texts: HashSet<&String> = ctx.fragments.iter().map(|f| &f.text).collect();
            prop_assert_eq!(texts.len(), ctx.fragments.len());
            prop_assert_eq!(ctx.total_chars, ctx.fragments.iter().map(|f| f.text.chars().count()).sum::<usize>());
        }
    }
}
