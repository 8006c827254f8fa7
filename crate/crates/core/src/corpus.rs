//! Manual corpus ingestion.
//!
//! Sources come in two flavours: structured Markdown produced by an OCR
//! pass over the manual, and the raw text stream extracted from the PDF.
//! Both are segmented with a fixed-size character window. Markdown sources
//! additionally get a [`SectionIndex`] for keyword-only retrieval.
//!
//! All spans in this module are measured in characters (Unicode scalar
//! values), not bytes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_WINDOW: usize = 1000;
pub const DEFAULT_STRIDE: usize = 800;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("source file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("source file is not valid UTF-8: {0}")]
    InvalidEncoding(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("source kind mismatch: expected {expected}, got {actual}")]
    KindMismatch { expected: SourceKind, actual: SourceKind },
    #[error("invalid chunking parameters: window={window}, stride={stride}")]
    InvalidParams { window: usize, stride: usize },
    #[error("invalid corpus manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    OcrMarkdown,
    RawText,
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceKind::OcrMarkdown => f.write_str("ocr_markdown"),
            SourceKind::RawText => f.write_str("raw_text"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub id: String,
    pub kind: SourceKind,
    pub text: String,
    pub origin_path: String,
}

impl SourceDocument {
    pub fn new(id: impl Into<String>, kind: SourceKind, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind,
            text: canonicalize_newlines(&text.into()),
            origin_path: String::new(),
        }
    }

    /// Length in characters.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// Half-open character interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn contains_pos(&self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub chunk_id: u32,
    pub source_id: String,
    pub span: Span,
    pub text: String,
    pub heading_path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub heading_path: Vec<String>,
    pub body: String,
    pub span: Span,
}

impl Section {
    /// Heading path joined with `>`, e.g. `"A>B"`. Empty for the preamble.
    pub fn path_label(&self) -> String {
        self.heading_path.join(">")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionIndex {
    pub source_id: String,
    pub sections: Vec<Section>,
}

/// Replace `\r\n` and lone `\r` with `\n`.
pub fn canonicalize_newlines(text: &str) -> String {
    if !text.contains('\r') {
        return text.to_owned();
    }
    text.replace("\r\n", "\n").replace('\r', "\n")
}

pub fn load_source(path: impl AsRef<Path>, kind: SourceKind) -> Result<SourceDocument, CorpusError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CorpusError::FileNotFound(path.to_path_buf()),
        _ => CorpusError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let text = String::from_utf8(bytes).map_err(|_| CorpusError::InvalidEncoding(path.to_path_buf()))?;
    let id = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok(SourceDocument {
        id,
        kind,
        text: canonicalize_newlines(&text),
        origin_path: path.display().to_string(),
    })
}

/// Concatenate the OCR Markdown with the raw text stream, Markdown first.
pub fn merge_enhanced(md: &SourceDocument, raw: &SourceDocument) -> Result<SourceDocument, CorpusError> {
    expect_kind(md, SourceKind::OcrMarkdown)?;
    expect_kind(raw, SourceKind::RawText)?;
    let mut text = String::with_capacity(md.text.len() + raw.text.len() + 2);
    text.push_str(&md.text);
    text.push_str("\n\n");
    text.push_str(&raw.text);
    Ok(SourceDocument {
        id: format!("{}+{}", md.id, raw.id),
        kind: SourceKind::OcrMarkdown,
        text,
        origin_path: format!("{}+{}", md.origin_path, raw.origin_path),
    })
}

fn expect_kind(doc: &SourceDocument, expected: SourceKind) -> Result<(), CorpusError> {
    if doc.kind == expected {
        Ok(())
    } else {
        Err(CorpusError::KindMismatch {
            expected,
            actual: doc.kind,
        })
    }
}

/// Byte offset of every char boundary, plus the final `text.len()`.
fn char_boundaries(text: &str) -> Vec<usize> {
    let mut offsets: Vec<usize> = text.char_indices().map(|(i, _)| i).collect();
    offsets.push(text.len());
    offsets
}

/// Compute the window spans for a document of `len` characters.
pub fn sliding_spans(len: usize, window: usize, stride: usize) -> Result<Vec<Span>, CorpusError> {
    if window < 1 || stride < 1 || stride > window {
        return Err(CorpusError::InvalidParams { window, stride });
    }
    let mut spans: Vec<Span> = Vec::new();
    let mut start = 0;
    while start < len {
        let span = Span::new(start, (start + window).min(len));
        let contained = spans.last().is_some_and(|prev| prev.contains(&span));
        if !contained {
            spans.push(span);
        }
        if span.end == len {
            // every later candidate is contained in this one
            break;
        }
        start += stride;
    }
    Ok(spans)
}

/// Segment a document with a fixed-size sliding character window.
///
/// Chunk ids start at `first_id` and are dense in emission order. For
/// Markdown sources the heading path at the chunk start is attached.
pub fn chunk_sliding(doc: &SourceDocument, window: usize, stride: usize) -> Result<Vec<DocumentChunk>, CorpusError> {
    chunk_sliding_from(doc, window, stride, 0)
}

pub fn chunk_sliding_from(
    doc: &SourceDocument,
    window: usize,
    stride: usize,
    first_id: u32,
) -> Result<Vec<DocumentChunk>, CorpusError> {
    let bounds = char_boundaries(&doc.text);
    let len = bounds.len() - 1;
    let spans = sliding_spans(len, window, stride)?;
    let sections = match doc.kind {
        SourceKind::OcrMarkdown => Some(section_spans(&doc.text)),
        SourceKind::RawText => None,
    };
    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(i, span)| {
            let heading_path = sections
                .as_ref()
                .and_then(|secs| secs.iter().find(|s| s.span.contains_pos(span.start)))
                .map(|s| s.heading_path.clone())
                .unwrap_or_default();
            DocumentChunk {
                chunk_id: first_id + i as u32,
                source_id: doc.id.clone(),
                span,
                text: doc.text[bounds[span.start]..bounds[span.end]].to_owned(),
                heading_path,
            }
        })
        .collect())
}

/// Parse a heading line: optional whitespace, 1-6 `#`, then a space.
fn heading_of(line: &str) -> Option<(usize, &str)> {
    let trimmed = line.trim_start();
    let hashes = trimmed.bytes().take_while(|&b| b == b'#').count();
    if !(1..=6).contains(&hashes) {
        return None;
    }
    let rest = &trimmed[hashes..];
    if !rest.starts_with(' ') {
        return None;
    }
    Some((hashes, rest.trim()))
}

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

struct RawSection {
    heading_path: Vec<String>,
    span: Span,
    // byte range of the section and of its heading line
    bytes: (usize, usize),
    heading_bytes: usize,
}

fn section_spans(text: &str) -> Vec<RawSection> {
    let mut out: Vec<RawSection> = Vec::new();
    if text.is_empty() {
        return out;
    }
    let mut stack: Vec<(usize, String)> = Vec::new();
    let mut in_fence = false;
    let mut char_pos = 0usize;
    let mut byte_pos = 0usize;
    // (heading_path, char_start, byte_start, heading_line_bytes)
    let mut open: Option<(Vec<String>, usize, usize, usize)> = None;

    for line in text.split_inclusive('\n') {
        let content = line.strip_suffix('\n').unwrap_or(line);
        let heading = if in_fence { None } else { heading_of(content) };
        if is_fence(content) {
            in_fence = !in_fence;
        }
        if let Some((level, title)) = heading {
            if let Some((path, cstart, bstart, hb)) = open.take() {
                out.push(RawSection {
                    heading_path: path,
                    span: Span::new(cstart, char_pos),
                    bytes: (bstart, byte_pos),
                    heading_bytes: hb,
                });
            } else if char_pos > 0 {
                out.push(RawSection {
                    heading_path: Vec::new(),
                    span: Span::new(0, char_pos),
                    bytes: (0, byte_pos),
                    heading_bytes: 0,
                });
            }
            while stack.last().is_some_and(|(l, _)| *l >= level) {
                stack.pop();
            }
            stack.push((level, title.to_owned()));
            let path = stack.iter().map(|(_, t)| t.clone()).collect();
            open = Some((path, char_pos, byte_pos, line.len()));
        }
        char_pos += line.chars().count();
        byte_pos += line.len();
    }
    match open {
        Some((path, cstart, bstart, hb)) => out.push(RawSection {
            heading_path: path,
            span: Span::new(cstart, char_pos),
            bytes: (bstart, byte_pos),
            heading_bytes: hb,
        }),
        None => out.push(RawSection {
            heading_path: Vec::new(),
            span: Span::new(0, char_pos),
            bytes: (0, byte_pos),
            heading_bytes: 0,
        }),
    }
    out
}

/// Split OCR Markdown into heading-delimited sections.
///
/// Section spans partition the text. Text before the first heading becomes
/// a preamble section with an empty heading path. Headings inside fenced
/// code blocks are ignored.
pub fn build_section_index(md: &SourceDocument) -> Result<SectionIndex, CorpusError> {
    expect_kind(md, SourceKind::OcrMarkdown)?;
    let sections = section_spans(&md.text)
        .into_iter()
        .map(|raw| {
            let (bstart, bend) = raw.bytes;
            let body = md.text[bstart + raw.heading_bytes..bend].trim().to_owned();
            Section {
                heading_path: raw.heading_path,
                body,
                span: raw.span,
            }
        })
        .collect();
    Ok(SectionIndex {
        source_id: md.id.clone(),
        sections,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSource {
    pub path: PathBuf,
    pub kind: SourceKind,
}

/// Corpus manifest: `{"sources":[{"path":..,"kind":..}], "window":1000, "stride":800}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub sources: Vec<ManifestSource>,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn default_stride() -> usize {
    DEFAULT_STRIDE
}

/// The loaded corpus, grouped into the documents each retrieval mode needs.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub markdown: Option<SourceDocument>,
    pub raw: Option<SourceDocument>,
    pub window: usize,
    pub stride: usize,
}

impl CorpusManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CorpusError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| CorpusError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for src in &mut manifest.sources {
            if src.path.is_relative() {
                src.path = base.join(&src.path);
            }
        }
        Ok(manifest)
    }

    /// Load every source; multiple sources of one kind are concatenated in
    /// manifest order with a blank line between them.
    pub fn load_corpus(&self) -> Result<Corpus, CorpusError> {
        if self.window < 1 || self.stride < 1 || self.stride > self.window {
            return Err(CorpusError::InvalidParams {
                window: self.window,
                stride: self.stride,
            });
        }
        let mut markdown: Option<SourceDocument> = None;
        let mut raw: Option<SourceDocument> = None;
        for src in &self.sources {
            let doc = load_source(&src.path, src.kind)?;
            let slot = match src.kind {
                SourceKind::OcrMarkdown => &mut markdown,
                SourceKind::RawText => &mut raw,
            };
            *slot = Some(match slot.take() {
                None => doc,
                Some(prev) => SourceDocument {
                    id: format!("{}+{}", prev.id, doc.id),
                    kind: prev.kind,
                    text: format!("{}\n\n{}", prev.text, doc.text),
                    origin_path: format!("{}+{}", prev.origin_path, doc.origin_path),
                },
            });
        }
        Ok(Corpus {
            markdown,
            raw,
            window: self.window,
            stride: self.stride,
        })
    }
}

impl Corpus {
    pub fn enhanced(&self) -> Result<Option<SourceDocument>, CorpusError> {
        match (&self.markdown, &self.raw) {
            (Some(md), Some(raw)) => merge_enhanced(md, raw).map(Some),
            (Some(md), None) => Ok(Some(md.clone())),
            (None, Some(raw)) => Ok(Some(SourceDocument {
                kind: SourceKind::OcrMarkdown,
                ..raw.clone()
            })),
            (None, None) => Ok(None),
        }
    }
}
