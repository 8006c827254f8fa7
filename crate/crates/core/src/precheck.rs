//! Static pre-check of generated MATLAB/MATPOWER code.
//!
//! Two repairs run before execution: option-name typos inside `mpoption(`
//! calls are fixed by nearest-neighbour matching against the convention
//! catalog, and `define_constants;` is prepended when a named index
//! constant is used without it. A small lexer keeps string literals and
//! comments out of both checks.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const CATALOG_JSON: &str = include_str!("../assets/catalog.json");

pub const DEFINE_CONSTANTS: &str = "define_constants";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read catalog {path}: {message}")]
    Load { path: String, message: String },
    #[error("catalog has no {0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConventionCatalog {
    pub option_names: BTreeSet<String>,
    pub constant_names: BTreeSet<String>,
}

impl ConventionCatalog {
    pub fn bundled() -> &'static ConventionCatalog {
        static CATALOG: OnceLock<ConventionCatalog> = OnceLock::new();
        CATALOG.get_or_init(|| Self::from_json(CATALOG_JSON).expect("bundled catalog is valid"))
    }

    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let catalog: ConventionCatalog = serde_json::from_str(text).map_err(|e| CatalogError::Load {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        if catalog.option_names.is_empty() {
            return Err(CatalogError::Empty("option_names"));
        }
        if catalog.constant_names.is_empty() {
            return Err(CatalogError::Empty("constant_names"));
        }
        Ok(catalog)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CatalogError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CatalogError::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            CatalogError::Load { message, .. } => CatalogError::Load {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    /// Nearest catalog option and its edit distance; ties go to the
    /// lexicographically smallest name.
    pub fn nearest_option(&self, name: &str) -> Option<(&str, usize)> {
        // BTreeSet iterates in lexicographic order, so the first minimum wins
        let mut best: Option<(&str, usize)> = None;
        for candidate in &self.option_names {
            let d = levenshtein(name, candidate);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((candidate, d));
            }
        }
        best
    }
}

/// Character-level edit distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    OptionTypoFixed,
    ConstantsInjected,
    Hint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    /// 1-based line in the code the check ran on.
    pub line: usize,
    pub before: Option<String>,
    pub after: Option<String>,
    pub message: String,
}

impl Finding {
    pub fn is_corrective(&self) -> bool {
        self.kind != FindingKind::Hint
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecheckReport {
    pub corrected_code: String,
    pub findings: Vec<Finding>,
    pub hints: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Ident,
    Number,
    /// Single-quoted character array.
    SqString,
    /// Double-quoted string.
    DqString,
    Comment,
    Punct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub kind: TokenKind,
    pub text: &'a str,
    /// Byte offset into the source.
    pub start: usize,
    pub line: usize,
}

impl Token<'_> {
    pub fn end(&self) -> usize {
        self.start + self.text.len()
    }

    /// Contents of a string literal without its quotes.
    pub fn literal_body(&self) -> &str {
        match self.kind {
            TokenKind::SqString | TokenKind::DqString => {
                let inner = &self.text[1..];
                inner.strip_suffix(['\'', '"']).unwrap_or(inner)
            }
            _ => self.text,
        }
    }
}

/// Tokenize MATLAB source. Whitespace and newlines are dropped; comments are
/// kept as single tokens. A `'` directly after a value (identifier, number,
/// closing bracket or another transpose) is the transpose operator.
pub fn tokenize(src: &str) -> Vec<Token<'_>> {
    let bytes = src.as_bytes();
    let mut out: Vec<Token<'_>> = Vec::new();
    let mut i = 0;
    let mut line = 1;
    let mut line_start = true;
    let mut prev_value = false;

    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\n' {
            line += 1;
            i += 1;
            line_start = true;
            prev_value = false;
            continue;
        }
        if c == b' ' || c == b'\t' || c == b'\r' {
            i += 1;
            prev_value = false;
            continue;
        }
        let start = i;
        let at_line_start = line_start;
        line_start = false;

        if c == b'%' {
            // block comment: a line holding only %{ ... up to a line holding only %}
            let line_end = src[i..].find('\n').map_or(src.len(), |n| i + n);
            if at_line_start && src[i..line_end].trim_end() == "%{" {
                let mut j = line_end;
                while j < src.len() {
                    let next_start = j + 1;
                    let next_end = src[next_start..].find('\n').map_or(src.len(), |n| next_start + n);
                    j = next_end;
                    if src[next_start..next_end].trim() == "%}" {
                        break;
                    }
                }
                let text = &src[start..j];
                out.push(Token {
                    kind: TokenKind::Comment,
                    text,
                    start,
                    line,
                });
                line += text.matches('\n').count();
                i = j;
                continue;
            }
            out.push(Token {
                kind: TokenKind::Comment,
                text: &src[start..line_end],
                start,
                line,
            });
            i = line_end;
            continue;
        }
        if src[i..].starts_with("...") {
            // continuation: rest of the line is a comment, the newline is joined
            let line_end = src[i..].find('\n').map_or(src.len(), |n| i + n);
            out.push(Token {
                kind: TokenKind::Comment,
                text: &src[start..line_end],
                start,
                line,
            });
            i = (line_end + 1).min(src.len());
            if line_end < src.len() {
                line += 1;
            }
            continue;
        }
        if c == b'\'' && !prev_value {
            let end = scan_quoted(bytes, i, b'\'');
            out.push(Token {
                kind: TokenKind::SqString,
                text: &src[start..end],
                start,
                line,
            });
            i = end;
            prev_value = true;
            continue;
        }
        if c == b'"' {
            let end = scan_quoted(bytes, i, b'"');
            out.push(Token {
                kind: TokenKind::DqString,
                text: &src[start..end],
                start,
                line,
            });
            i = end;
            prev_value = true;
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            out.push(Token {
                kind: TokenKind::Ident,
                text: &src[start..j],
                start,
                line,
            });
            i = j;
            prev_value = true;
            continue;
        }
        if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'.') {
                j += 1;
            }
            out.push(Token {
                kind: TokenKind::Number,
                text: &src[start..j],
                start,
                line,
            });
            i = j;
            prev_value = true;
            continue;
        }
        // one punctuation character (multi-byte UTF-8 included)
        let ch_len = src[i..].chars().next().map_or(1, char::len_utf8);
        let text = &src[start..start + ch_len];
        prev_value = matches!(text, ")" | "]" | "}" | "'") || (text == "." && src[i + 1..].starts_with('\''));
        out.push(Token {
            kind: TokenKind::Punct,
            text,
            start,
            line,
        });
        i += ch_len;
    }
    out
}

/// End offset of a quoted literal starting at `start`; a doubled quote is
/// an escape. Unterminated literals stop at the end of the line.
fn scan_quoted(bytes: &[u8], start: usize, quote: u8) -> usize {
    let mut j = start + 1;
    while j < bytes.len() {
        match bytes[j] {
            b'\n' => return j,
            q if q == quote => {
                if bytes.get(j + 1) == Some(&quote) {
                    j += 2;
                } else {
                    return j + 1;
                }
            }
            _ => j += 1,
        }
    }
    j
}

fn significant<'a>(tokens: &[Token<'a>]) -> Vec<Token<'a>> {
    tokens
        .iter()
        .filter(|t| t.kind != TokenKind::Comment)
        .cloned()
        .collect()
}

/// Option-name literals of every `mpoption(...)` call: the name slots of the
/// name/value pairs, after an optional leading options struct.
fn option_name_literals<'a>(tokens: &[Token<'a>]) -> Vec<Token<'a>> {
    let toks = significant(tokens);
    let mut names = Vec::new();
    for (i, t) in toks.iter().enumerate() {
        if t.kind != TokenKind::Ident || t.text != "mpoption" {
            continue;
        }
        if toks.get(i + 1).map(|n| n.text) != Some("(") {
            continue;
        }
        if i > 0 && toks[i - 1].text == "." {
            continue;
        }
        // split the argument list at depth-1 commas
        let mut args: Vec<Vec<&Token<'a>>> = vec![Vec::new()];
        let mut depth = 0usize;
        for tok in &toks[i + 1..] {
            match tok.text {
                "(" | "[" | "{" if tok.kind == TokenKind::Punct => {
                    depth += 1;
                    if depth == 1 {
                        continue;
                    }
                }
                ")" | "]" | "}" if tok.kind == TokenKind::Punct => {
                    depth -= 1;
                    if depth == 0 {
                        break;
                    }
                }
                "," if tok.kind == TokenKind::Punct && depth == 1 => {
                    args.push(Vec::new());
                    continue;
                }
                _ => {}
            }
            args.last_mut().unwrap().push(tok);
        }
        let is_literal = |arg: &Vec<&Token<'a>>| arg.len() == 1 && arg[0].kind == TokenKind::SqString;
        let first_name = match args.first() {
            Some(a) if is_literal(a) => 0,
            _ => 1,
        };
        for arg in args.iter().skip(first_name).step_by(2) {
            if is_literal(arg) {
                names.push(arg[0].clone());
            }
        }
    }
    names
}

/// Repair option-name typos inside `mpoption(` calls.
///
/// An unknown name is replaced by its nearest catalog entry when the edit
/// distance is at most 2 and less than half the name's length; any other
/// unknown name yields a hint finding.
pub fn scan_options(code: &str, catalog: &ConventionCatalog) -> (String, Vec<Finding>) {
    let tokens = tokenize(code);
    let mut findings = Vec::new();
    let mut edits: Vec<(usize, usize, String)> = Vec::new();
    for lit in option_name_literals(&tokens) {
        let name = lit.literal_body();
        if catalog.option_names.contains(name) {
            continue;
        }
        let len = name.chars().count();
        match catalog.nearest_option(name) {
            Some((best, d)) if d <= 2 && 2 * d < len => {
                findings.push(Finding {
                    kind: FindingKind::OptionTypoFixed,
                    line: lit.line,
                    before: Some(name.to_owned()),
                    after: Some(best.to_owned()),
                    message: format!("option '{name}' corrected to '{best}' (edit distance {d})"),
                });
                edits.push((lit.start, lit.end(), format!("'{best}'")));
            }
            _ => findings.push(Finding {
                kind: FindingKind::Hint,
                line: lit.line,
                before: Some(name.to_owned()),
                after: None,
                message: format!("unknown option '{name}'"),
            }),
        }
    }
    let mut out = code.to_owned();
    for (start, end, replacement) in edits.into_iter().rev() {
        out.replace_range(start..end, &replacement);
    }
    (out, findings)
}

/// Prepend `define_constants;` when a catalog constant is used before any
/// `define_constants` statement.
pub fn inject_constants(code: &str, catalog: &ConventionCatalog) -> (String, Vec<Finding>) {
    let tokens = significant(&tokenize(code));
    let mut defined = false;
    for (i, t) in tokens.iter().enumerate() {
        if t.kind != TokenKind::Ident {
            continue;
        }
        if t.text == DEFINE_CONSTANTS {
            defined = true;
            continue;
        }
        let is_field = i > 0 && tokens[i - 1].text == ".";
        if !defined && !is_field && catalog.constant_names.contains(t.text) {
            let fixed = format!("{DEFINE_CONSTANTS};\n{code}");
            let finding = Finding {
                kind: FindingKind::ConstantsInjected,
                line: t.line,
                before: None,
                after: Some(format!("{DEFINE_CONSTANTS};")),
                message: format!("'{}' used without {DEFINE_CONSTANTS}; statement injected", t.text),
            };
            return (fixed, vec![finding]);
        }
    }
    (code.to_owned(), Vec::new())
}

pub fn precheck(code: &str, catalog: &ConventionCatalog) -> PrecheckReport {
    let (after_options, mut findings) = scan_options(code, catalog);
    let (corrected_code, injected) = inject_constants(&after_options, catalog);
    findings.extend(injected);
    let hints = findings
        .iter()
        .filter(|f| f.kind == FindingKind::Hint)
        .map(|f| f.message.clone())
        .collect();
    PrecheckReport {
        corrected_code,
        findings,
        hints,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cat() -> &'static ConventionCatalog {
        ConventionCatalog::bundled()
    }

    // Plain O(3^n) recursion as an independent reference.
    fn lev_reference(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((ha, ta)), Some((hb, tb))) => {
                let sub = lev_reference(ta, tb) + usize::from(ha != hb);
                sub.min(lev_reference(ta, b) + 1).min(lev_reference(a, tb) + 1)
            }
        }
    }

    #[test]
    fn levenshtein_matches_reference() {
        for (a, b) in [
            ("verbos", "verbose"),
            ("kitten", "sitting"),
            ("", "abc"),
            ("pf.alg", "pf.tol"),
            ("xyzzy", "model"),
        ] {
            let ac: Vec<char> = a.chars().collect();
            let bc: Vec<char> = b.chars().collect();
            assert_eq!(levenshtein(a, b), lev_reference(&ac, &bc), "{a} vs {b}");
        }
        assert_eq!(levenshtein("verbos", "verbose"), 1);
    }

    #[test]
    fn typo_is_repaired() {
        let (code, findings) = scan_options("mpopt = mpoption('verbos', 2);", cat());
        assert_eq!(code, "mpopt = mpoption('verbose', 2);");
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].kind, FindingKind::OptionTypoFixed);
        assert_eq!(findings[0].before.as_deref(), Some("verbos"));
        assert_eq!(findings[0].after.as_deref(), Some("verbose"));
    }

    #[test]
    fn exact_options_and_values_untouched() {
        let src = "mpopt = mpoption('pf.alg', 'NR');";
        let (code, findings) = scan_options(src, cat());
        assert_eq!(code, src);
        assert!(findings.is_empty());
    }

    #[test]
    fn far_unknown_option_yields_hint() {
        let nearest = cat().nearest_option("xyzzy").unwrap();
        assert!(nearest.1 > 2);
        let src = "mpopt = mpoption('xyzzy', 1);";
        let (code, findings) = scan_options(src, cat());
        assert_eq!(code, src);
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].kind, FindingKind::Hint);
        assert_eq!(findings[0].message, "unknown option 'xyzzy'");
    }

    #[test]
    fn struct_first_argument_and_multiline_calls() {
        let src = "mpopt = mpoption(mpopt, 'pf.nr.max_itt', 10, ...\n    'out.al', 0);";
        let (code, findings) = scan_options(src, cat());
        assert_eq!(
            code,
            "mpopt = mpoption(mpopt, 'pf.nr.max_it', 10, ...\n    'out.all', 0);"
        );
        assert_eq!(findings.len(), 2);
        assert_eq!(findings[1].line, 2);
        // short names: distance must stay below half the length
        let (_, f) = scan_options("mpoption('pf', 1)", cat());
        assert_eq!(f[0].kind, FindingKind::Hint);
    }

    #[test]
    fn strings_outside_mpoption_are_ignored() {
        let src = "disp('verbos'); x = foo('verbos');";
        assert_eq!(scan_options(src, cat()).1, vec![]);
    }

    #[test]
    fn constants_are_injected() {
        let src = "mpc.bus(2, PD) = mpc.bus(2, PD) * 1.15;";
        let (code, findings) = inject_constants(src, cat());
        assert_eq!(code, format!("define_constants;\n{src}"));
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].kind, FindingKind::ConstantsInjected);
    }

    #[test]
    fn existing_define_constants_is_respected() {
        let src = "define_constants;\ng = mpc.gen(:, GEN_BUS);";
        assert_eq!(inject_constants(src, cat()), (src.to_owned(), vec![]));
        // defined only after first use still needs injection
        let late = "x = mpc.bus(:, PD);\ndefine_constants;";
        assert_eq!(inject_constants(late, cat()).1.len(), 1);
    }

    #[test]
    fn constants_in_strings_and_comments_do_not_trigger() {
        for src in [
            "disp('PD')",
            "disp(\"GEN_BUS\")",
            "x = 1; % uses PD later",
            "%{\nPD block comment\n%}\ny = 2;",
            "s.PD = 3;",
            "r = a'; disp('PD');",
        ] {
            assert_eq!(inject_constants(src, cat()).1, vec![], "{src}");
        }
    }

    #[test]
    fn transpose_is_not_a_string() {
        let toks = tokenize("y = x' + PD;");
        assert!(toks.iter().any(|t| t.kind == TokenKind::Ident && t.text == "PD"));
        let toks = tokenize("y = [1 2]'; z = 'str';");
        assert_eq!(toks.iter().filter(|t| t.kind == TokenKind::SqString).count(), 1);
        let toks = tokenize("a = 'it''s'; b = PG;");
        assert_eq!(
            toks.iter()
                .find(|t| t.kind == TokenKind::SqString)
                .unwrap()
                .literal_body(),
            "it''s"
        );
    }

    #[test]
    fn precheck_composes_both_checks() {
        let clean = "define_constants;\nmpc = loadcase('case14');\nresults = runpf(mpc);";
        let report = precheck(clean, cat());
        assert_eq!(report.corrected_code, clean);
        assert!(report.findings.is_empty());

        let src = "mpopt = mpoption('verbos', 0);\nmpc.bus(2, PD) = 1.15 * mpc.bus(2, PD);\nrundcpf(mpc, mpopt);";
        let report = precheck(src, cat());
        assert_eq!(report.findings.len(), 2);
        assert!(report
            .corrected_code
            .starts_with("define_constants;\nmpopt = mpoption('verbose', 0);"));
        let again = precheck(&report.corrected_code, cat());
        assert!(again.findings.is_empty());
        assert_eq!(again.corrected_code, report.corrected_code);
    }

    #[test]
    fn hints_are_forwarded() {
        let report = precheck("mpoption('xyzzy', 1)", cat());
        assert_eq!(report.hints, vec!["unknown option 'xyzzy'".to_string()]);
    }

    #[test]
    fn catalog_validation() {
        assert!(matches!(
            ConventionCatalog::from_json(r#"{"option_names":[],"constant_names":["PD"]}"#),
            Err(CatalogError::Empty("option_names"))
        ));
        assert!(cat().constant_names.contains("GEN_BUS"));
        for name in [
            "verbose",
            "pf.alg",
            "pf.tol",
            "pf.nr.max_it",
            "pf.fd.max_it",
            "out.all",
            "model",
            "opf.ac.solver",
        ] {
            assert!(cat().option_names.contains(name), "{name}");
        }
        for name in [
            "PD", "QD", "GEN_BUS", "PG", "QG", "VM", "VA", "BUS_TYPE", "RATE_A", "PMAX", "PMIN",
        ] {
            assert!(cat().constant_names.contains(name), "{name}");
        }
    }

    proptest! {
        #[test]
        fn levenshtein_agrees_with_reference(a in "[a-c.]{0,6}", b in "[a-c.]{0,6}") {
            let ac: Vec<char> = a.chars().collect();
            let bc: Vec<char> = b.chars().collect();
            prop_assert_eq!(levenshtein(&a, &b), lev_reference(&ac, &bc));
        }

        #[test]
        fn tokenizer_never_panics(src in "\\PC{0,120}") {
            let toks = tokenize(&src);
            for t in toks {
                prop_assert!(t.end() <= src.len());
            }
        }
    }
}
