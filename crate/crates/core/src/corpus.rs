//! Mining (code, summary) pairs out of Java sources.
//!
//! Method extraction is a lexical scan: comments, string/char literals and
//! text blocks are recognised so that braces inside them do not count, and
//! every `{ ... }` block is classified as a type body, a method body, or
//! something else. There is no Java grammar behind it.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textcodec::{tokenize_code, tokenize_summary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMethod {
    pub project_id: String,
    pub file_path: String,
    /// 1-based line of the declaration's first token (annotations included).
    pub line: usize,
    pub method_text: String,
    /// The `/** ... */` block attached to the declaration, or "".
    pub doc_comment: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractWarning {
    pub file_path: String,
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub methods: Vec<RawMethod>,
    pub warnings: Vec<ExtractWarning>,
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeSummaryPair {
    pub project_id: String,
    pub code_tokens: Vec<String>,
    pub summary_tokens: Vec<String>,
    pub file_path: String,
    pub line: usize,
}

impl CodeSummaryPair {
    fn content_key(&self) -> (&[String], &[String]) {
        (&self.code_tokens, &self.summary_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectCorpus {
    pub project_id: String,
    pub pairs: Vec<CodeSummaryPair>,
}

impl ProjectCorpus {
    pub fn new(project_id: impl Into<String>, pairs: Vec<CodeSummaryPair>) -> Result<Self> {
        let project_id = project_id.into();
        if let Some(p) = pairs.iter().find(|p| p.project_id != project_id) {
            return Err(Error::Contract(format!(
                "pair from project `{}` in corpus of `{project_id}`",
                p.project_id
            )));
        }
        Ok(ProjectCorpus { project_id, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Sym(char),
    Literal,
    Doc,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    start: usize,
    end: usize,
    line: usize,
}

struct Lexed {
    tokens: Vec<Token>,
    defect: Option<(usize, String)>,
}

fn lex(src: &str) -> Lexed {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut line = 1;
    let count_lines = |from: usize, to: usize| bytes[from..to].iter().filter(|&&b| b == b'\n').count();

    while i < bytes.len() {
        let b = bytes[i];
        let start = i;
        let start_line = line;
        match b {
            b'\n' => {
                line += 1;
                i += 1;
            }
            _ if b.is_ascii_whitespace() => i += 1,
            b'/' if bytes.get(i + 1) == Some(&b'/') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                let Some(close) = src[i + 2..].find("*/") else {
                    return Lexed { tokens, defect: Some((start_line, "unterminated block comment".into())) };
                };
                let end = i + 2 + close + 2;
                let is_doc = bytes.get(i + 2) == Some(&b'*') && end - start > 4;
                line += count_lines(i, end);
                if is_doc {
                    tokens.push(Token { tok: Tok::Doc, start, end, line: start_line });
                }
                i = end;
            }
            b'"' if src[i..].starts_with("\"\"\"") => {
                let Some(close) = src[i + 3..].find("\"\"\"") else {
                    return Lexed { tokens, defect: Some((start_line, "unterminated text block".into())) };
                };
                let end = i + 3 + close + 3;
                line += count_lines(i, end);
                tokens.push(Token { tok: Tok::Literal, start, end, line: start_line });
                i = end;
            }
            b'"' | b'\'' => {
                let quote = b;
                i += 1;
                loop {
                    match bytes.get(i) {
                        None | Some(b'\n') => {
                            return Lexed {
                                tokens,
                                defect: Some((start_line, "unterminated string or char literal".into())),
                            };
                        }
                        Some(b'\\') => i += 2,
                        Some(&c) if c == quote => {
                            i += 1;
                            break;
                        }
                        Some(_) => i += 1,
                    }
                }
                tokens.push(Token { tok: Tok::Literal, start, end: i, line: start_line });
            }
            _ => {
                let ch = src[i..].chars().next().expect("in bounds");
                if ch.is_alphanumeric() || ch == '_' || ch == '$' {
                    let mut end = i;
                    for c in src[i..].chars() {
                        if c.is_alphanumeric() || c == '_' || c == '$' {
                            end += c.len_utf8();
                        } else {
                            break;
                        }
                    }
                    tokens.push(Token { tok: Tok::Word(src[i..end].to_string()), start, end, line: start_line });
                    i = end;
                } else {
                    i += ch.len_utf8();
                    tokens.push(Token { tok: Tok::Sym(ch), start, end: i, line: start_line });
                }
            }
        }
    }
    Lexed { tokens, defect: None }
}

// ---------------------------------------------------------------------------
// Declaration classification

const TYPE_KEYWORDS: [&str; 4] = ["class", "interface", "enum", "record"];
const NOT_METHOD_NAMES: [&str; 16] = [
    "if", "for", "while", "switch", "catch", "synchronized", "try", "do", "else", "return", "new", "super",
    "this", "assert", "throw", "case",
];

#[derive(Debug, Clone, Copy, PartialEq)]
enum BlockKind {
    Type,
    Method(usize),
    Other,
}

/// Significant tokens of a declaration header: doc comments and annotations removed.
fn header_tokens(seg: &[Token]) -> Vec<&Token> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < seg.len() {
        match &seg[i].tok {
            Tok::Doc => i += 1,
            Tok::Sym('@') if !matches!(seg.get(i + 1).map(|t| &t.tok), Some(Tok::Word(w)) if w == "interface") => {
                i += 1;
                // qualified annotation name
                if matches!(seg.get(i).map(|t| &t.tok), Some(Tok::Word(_))) {
                    i += 1;
                }
                while matches!(seg.get(i).map(|t| &t.tok), Some(Tok::Sym('.')))
                    && matches!(seg.get(i + 1).map(|t| &t.tok), Some(Tok::Word(_)))
                {
                    i += 2;
                }
                if matches!(seg.get(i).map(|t| &t.tok), Some(Tok::Sym('('))) {
                    let mut depth = 0;
                    while i < seg.len() {
                        match seg[i].tok {
                            Tok::Sym('(') => depth += 1,
                            Tok::Sym(')') => {
                                depth -= 1;
                                if depth == 0 {
                                    i += 1;
                                    break;
                                }
                            }
                            _ => {}
                        }
                        i += 1;
                    }
                }
            }
            _ => {
                out.push(&seg[i]);
                i += 1;
            }
        }
    }
    out
}

fn is_word(t: &Token, w: &str) -> bool {
    matches!(&t.tok, Tok::Word(x) if x == w)
}

fn declares_type(h: &[&Token]) -> bool {
    h.iter().enumerate().any(|(i, t)| {
        TYPE_KEYWORDS.iter().any(|k| is_word(t, k))
            && (i == 0 || h[i - 1].tok != Tok::Sym('.'))
            && matches!(h.get(i + 1).map(|t| &t.tok), Some(Tok::Word(_)))
    })
}

/// If the header looks like a method or constructor signature, returns the
/// index of its name token within `h`.
fn method_name_index(h: &[&Token], needs_return_type: bool) -> Option<usize> {
    // Drop a trailing `throws A, B.C`.
    let mut end = h.len();
    if let Some(pos) = h.iter().rposition(|t| is_word(t, "throws")) {
        let tail_ok = h[pos + 1..].iter().all(|t| matches!(t.tok, Tok::Word(_) | Tok::Sym('.') | Tok::Sym(',') | Tok::Sym('<') | Tok::Sym('>')));
        if tail_ok && pos + 1 < h.len() {
            end = pos;
        }
    }
    if end == 0 || h[end - 1].tok != Tok::Sym(')') {
        return None;
    }
    let mut depth = 0i32;
    let mut open = None;
    for j in (0..end).rev() {
        match h[j].tok {
            Tok::Sym(')') => depth += 1,
            Tok::Sym('(') => {
                depth -= 1;
                if depth == 0 {
                    open = Some(j);
                    break;
                }
            }
            _ => {}
        }
    }
    let open = open?;
    if open == 0 {
        return None;
    }
    let name_idx = open - 1;
    let Tok::Word(name) = &h[name_idx].tok else { return None };
    if NOT_METHOD_NAMES.contains(&name.as_str()) || name.chars().next().is_some_and(|c| c.is_ascii_digit()) {
        return None;
    }
    let before = &h[..name_idx];
    if needs_return_type && before.is_empty() {
        return None;
    }
    let mut angle = 0i32;
    for t in before {
        match t.tok {
            Tok::Sym('<') => angle += 1,
            Tok::Sym('>') => angle -= 1,
            Tok::Sym(',') if angle == 0 => return None,
            Tok::Sym('=') | Tok::Sym('(') | Tok::Sym(')') | Tok::Sym('.') if angle == 0 => return None,
            Tok::Literal => return None,
            _ => {}
        }
    }
    if before.iter().any(|t| is_word(t, "new") || is_word(t, "return")) {
        return None;
    }
    Some(name_idx)
}

fn classify_block(seg: &[Token], parent: Option<BlockKind>) -> (BlockKind, bool) {
    let h = header_tokens(seg);
    if h.is_empty() {
        return (BlockKind::Other, false);
    }
    if declares_type(&h) {
        return (BlockKind::Type, false);
    }
    let has_arrow = h.windows(2).any(|w| w[0].tok == Tok::Sym('-') && w[1].tok == Tok::Sym('>'));
    if has_arrow {
        return (BlockKind::Other, false);
    }
    if h.iter().any(|t| is_word(t, "new")) && h.last().is_some_and(|t| t.tok == Tok::Sym(')')) {
        return (BlockKind::Type, false);
    }
    let in_type_body = matches!(parent, None | Some(BlockKind::Type));
    if in_type_body && method_name_index(&h, false).is_some() {
        return (BlockKind::Method(usize::MAX), true);
    }
    (BlockKind::Other, false)
}

struct OpenMethod {
    start: usize,
    line: usize,
    doc: String,
}

fn method_start(seg: &[Token], src: &str) -> Option<OpenMethod> {
    let first = seg.iter().find(|t| t.tok != Tok::Doc)?;
    let name_pos = seg.iter().position(|t| t.tok == Tok::Sym('(')).unwrap_or(seg.len());
    let doc = seg[..name_pos]
        .iter()
        .rev()
        .find(|t| t.tok == Tok::Doc)
        .map(|t| src[t.start..t.end].to_string())
        .unwrap_or_default();
    Some(OpenMethod { start: first.start, line: first.line, doc })
}

/// Extracts every method declaration (at any nesting depth) in declaration
/// order. A brace or lexical defect stops the scan; methods completed before
/// it are kept and the defect is reported as a warning.
pub fn extract_methods(java_source: &str, project_id: &str, file_path: &str) -> Extraction {
    let lexed = lex(java_source);
    let toks = &lexed.tokens;
    let mut out = Extraction::default();
    let mut found: Vec<(usize, RawMethod)> = Vec::new();
    let mut pending: Vec<OpenMethod> = Vec::new();
    // (kind, saved paren depth)
    let mut stack: Vec<(BlockKind, i32)> = Vec::new();
    let mut seg_start = 0;
    let mut paren = 0i32;
    let warn = |line: usize, message: String| ExtractWarning { file_path: file_path.to_string(), line, message };

    let push_method = |m: OpenMethod, end: usize, found: &mut Vec<(usize, RawMethod)>| {
        found.push((
            m.start,
            RawMethod {
                project_id: project_id.to_string(),
                file_path: file_path.to_string(),
                line: m.line,
                method_text: java_source[m.start..end].to_string(),
                doc_comment: m.doc,
            },
        ));
    };

    let mut i = 0;
    while i < toks.len() {
        match toks[i].tok {
            Tok::Sym('(') => paren += 1,
            Tok::Sym(')') => paren = (paren - 1).max(0),
            Tok::Sym('{') => {
                let parent = stack.last().map(|b| b.0);
                let seg = &toks[seg_start..i];
                let (mut kind, is_method) = classify_block(seg, parent);
                if is_method {
                    match method_start(seg, java_source) {
                        Some(m) => {
                            pending.push(m);
                            kind = BlockKind::Method(pending.len() - 1);
                        }
                        None => kind = BlockKind::Other,
                    }
                }
                stack.push((kind, paren));
                paren = 0;
                seg_start = i + 1;
            }
            Tok::Sym('}') => {
                let Some((kind, saved)) = stack.pop() else {
                    out.warnings.push(warn(toks[i].line, "unmatched closing brace; rest of file skipped".into()));
                    break;
                };
                if let BlockKind::Method(idx) = kind {
                    let m = pending.remove(idx);
                    debug_assert_eq!(idx, pending.len());
                    push_method(m, toks[i].end, &mut found);
                }
                paren = saved;
                seg_start = i + 1;
            }
            Tok::Sym(';') if paren == 0 => {
                let parent = stack.last().map(|b| b.0);
                if matches!(parent, None | Some(BlockKind::Type)) {
                    let seg = &toks[seg_start..i];
                    let h = header_tokens(seg);
                    if !declares_type(&h) && method_name_index(&h, true).is_some() {
                        if let Some(m) = method_start(seg, java_source) {
                            push_method(m, toks[i].end, &mut found);
                        }
                    }
                }
                seg_start = i + 1;
            }
            _ => {}
        }
        i += 1;
    }
    if !stack.is_empty() && out.warnings.is_empty() {
        let line = toks.last().map(|t| t.line).unwrap_or(1);
        out.warnings.push(warn(line, format!("{} unclosed brace(s) at end of file", stack.len())));
    }
    if let Some((line, msg)) = lexed.defect {
        out.warnings.push(warn(line, format!("{msg}; rest of file skipped")));
    }
    found.sort_by_key(|(start, _)| *start);
    out.methods = found.into_iter().map(|(_, m)| m).collect();
    out
}

// ---------------------------------------------------------------------------
// Summaries

/// Removes `/** */` delimiters, leading `*` decoration, inline-tag braces and
/// HTML tags, and drops everything from the first block tag (`@param`, ...).
pub fn strip_javadoc(doc_comment: &str) -> String {
    let mut body = doc_comment.trim();
    body = body.strip_prefix("/**").unwrap_or(body);
    body = body.strip_suffix("*/").unwrap_or(body);
    let mut lines = Vec::new();
    for raw in body.lines() {
        let mut l = raw.trim_start();
        while let Some(rest) = l.strip_prefix('*') {
            l = rest;
        }
        let l = l.trim();
        if l.starts_with('@') {
            break;
        }
        lines.push(l.to_string());
    }
    let joined = lines.join("\n");
    strip_html(&replace_inline_tags(&joined)).trim().to_string()
}

fn replace_inline_tags(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find("{@") {
        out.push_str(&rest[..pos]);
        let after = &rest[pos + 2..];
        let Some(close) = after.find('}') else {
            out.push_str(&rest[pos..]);
            return out;
        };
        let inner = &after[..close];
        let content = inner.split_once(char::is_whitespace).map(|(_, c)| c.trim()).unwrap_or("");
        out.push_str(content);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    out
}

fn strip_html(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        let starts_tag = c == '<' && chars.peek().is_some_and(|n| n.is_ascii_alphabetic() || *n == '/');
        if starts_tag {
            for n in chars.by_ref() {
                if n == '>' {
                    break;
                }
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Text up to and including the first `.`, or up to the first newline when
/// there is no period; trimmed.
pub fn first_sentence(description: &str) -> String {
    let cut = match description.find('.') {
        Some(p) => &description[..=p],
        None => description.split('\n').next().unwrap_or(""),
    };
    cut.trim().to_string()
}

// ---------------------------------------------------------------------------
// Cleaning

pub const DEFAULT_MARKERS: [&str; 4] = ["auto-generated", "@generated", "created by", "todo auto"];
pub const MIN_SUMMARY_TOKENS: usize = 3;
pub const MIN_ASCII_RATIO: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanConfig {
    pub markers: Vec<String>,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig { markers: DEFAULT_MARKERS.iter().map(|s| s.to_string()).collect() }
    }
}

impl CleanConfig {
    /// One marker per line; blank lines and `#` comments are ignored.
    pub fn from_markers_text(text: &str) -> Self {
        let markers = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        CleanConfig { markers }
    }
}

/// A pair before cleaning; keeps the raw summary sentence for the checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidatePair {
    pub project_id: String,
    pub code_tokens: Vec<String>,
    pub summary: String,
    pub summary_tokens: Vec<String>,
    pub file_path: String,
    pub line: usize,
}

impl CandidatePair {
    pub fn from_method(m: &RawMethod) -> Self {
        let summary = first_sentence(&strip_javadoc(&m.doc_comment));
        CandidatePair {
            project_id: m.project_id.clone(),
            code_tokens: tokenize_code(&m.method_text),
            summary_tokens: tokenize_summary(&summary),
            summary,
            file_path: m.file_path.clone(),
            line: m.line,
        }
    }
}

impl From<&CodeSummaryPair> for CandidatePair {
    fn from(p: &CodeSummaryPair) -> Self {
        CandidatePair {
            project_id: p.project_id.clone(),
            code_tokens: p.code_tokens.clone(),
            summary: p.summary_tokens.join(" "),
            summary_tokens: p.summary_tokens.clone(),
            file_path: p.file_path.clone(),
            line: p.line,
        }
    }
}

/// Share of non-whitespace characters that are ASCII letters, digits or punctuation.
pub fn ascii_ratio(text: &str) -> f64 {
    let (mut ascii, mut total) = (0usize, 0usize);
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        total += 1;
        if c.is_ascii_alphanumeric() || c.is_ascii_punctuation() {
            ascii += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        ascii as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    EmptyCode,
    AutoGenerated,
    TooShort,
    NonEnglish,
    Duplicate,
}

/// Why `c` would be dropped by [`clean`], ignoring duplicates.
pub fn rejection(c: &CandidatePair, cfg: &CleanConfig) -> Option<DropReason> {
    let joined = c.summary_tokens.join(" ");
    let texts = [c.summary.to_lowercase(), joined];
    if c.code_tokens.is_empty() {
        Some(DropReason::EmptyCode)
    } else if cfg.markers.iter().any(|m| texts.iter().any(|t| t.contains(&m.to_lowercase()))) {
        Some(DropReason::AutoGenerated)
    } else if c.summary_tokens.len() < MIN_SUMMARY_TOKENS {
        Some(DropReason::TooShort)
    } else if texts.iter().any(|t| ascii_ratio(t) < MIN_ASCII_RATIO) {
        Some(DropReason::NonEnglish)
    } else {
        None
    }
}

/// Drops auto-generated, too-short and non-English summaries and exact
/// (code, summary) duplicates; the first occurrence of a duplicate wins.
pub fn clean(candidates: &[CandidatePair], cfg: &CleanConfig) -> Vec<CodeSummaryPair> {
    let mut seen: HashSet<(Vec<String>, Vec<String>)> = HashSet::new();
    let mut out = Vec::new();
    for c in candidates {
        if rejection(c, cfg).is_some() {
            continue;
        }
        if !seen.insert((c.code_tokens.clone(), c.summary_tokens.clone())) {
            continue;
        }
        out.push(CodeSummaryPair {
            project_id: c.project_id.clone(),
            code_tokens: c.code_tokens.clone(),
            summary_tokens: c.summary_tokens.clone(),
            file_path: c.file_path.clone(),
            line: c.line,
        });
    }
    out
}

/// Removes every pretraining pair whose exact (code, summary) content occurs
/// in a held-out project.
pub fn dedup_against(pretrain: &[CodeSummaryPair], held_out: &[ProjectCorpus]) -> Vec<CodeSummaryPair> {
    let banned: HashSet<(&[String], &[String])> =
        held_out.iter().flat_map(|p| p.pairs.iter().map(CodeSummaryPair::content_key)).collect();
    pretrain.iter().filter(|p| !banned.contains(&p.content_key())).cloned().collect()
}

// ---------------------------------------------------------------------------
// Repositories and corpus files

#[derive(Debug, Clone, Default)]
pub struct MineOutcome {
    pub pairs: Vec<CodeSummaryPair>,
    pub warnings: Vec<ExtractWarning>,
    pub methods_seen: usize,
}

/// Mines every `.java` file under `repo` (sorted path order).
pub fn mine_repo(repo: &Path, project_id: &str, cfg: &CleanConfig) -> Result<MineOutcome> {
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in walkdir::WalkDir::new(repo).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(repo, e.into()))?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|x| x == "java") {
            files.push(entry.into_path());
        }
    }
    let per_file: Vec<Result<Extraction>> = files
        .par_iter()
        .map(|path| {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let text = String::from_utf8_lossy(&bytes);
            let rel = path.strip_prefix(repo).unwrap_or(path);
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            Ok(extract_methods(&text, project_id, &rel))
        })
        .collect();

    let mut methods = Vec::new();
    let mut warnings = Vec::new();
    for r in per_file {
        let ex = r?;
        methods.extend(ex.methods);
        warnings.extend(ex.warnings);
    }
    methods.sort_by(|a, b| (a.file_path.as_str(), a.line).cmp(&(b.file_path.as_str(), b.line)));
    let candidates: Vec<CandidatePair> = methods.iter().map(CandidatePair::from_method).collect();
    Ok(MineOutcome { pairs: clean(&candidates, cfg), warnings, methods_seen: methods.len() })
}

pub fn write_corpus(path: &Path, pairs: &[CodeSummaryPair]) -> Result<()> {
    let mut buf = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut buf, p)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<CodeSummaryPair>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

/// Groups pairs by project id, in id order.
pub fn group_by_project(pairs: Vec<CodeSummaryPair>) -> Vec<ProjectCorpus> {
    let mut groups: BTreeMap<String, Vec<CodeSummaryPair>> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.project_id.clone()).or_default().push(p);
    }
    groups.into_iter().map(|(project_id, pairs)| ProjectCorpus { project_id, pairs }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn cand(code: &str, summary: &str) -> CandidatePair {
        CandidatePair {
            project_id: "p".into(),
            code_tokens: toks(code),
            summary: summary.into(),
            summary_tokens: tokenize_summary(summary),
            file_path: "A.java".into(),
            line: 1,
        }
    }

    #[test]
    fn doc_comment_is_captured() {
        let src = "class Q {\n  /** Checks whether the queue is empty. */\n  boolean isEmpty() { return n == 0; }\n}\n";
        let ex = extract_methods(src, "p", "Q.java");
        assert_eq!(ex.methods.len(), 1);
        assert!(ex.methods[0].doc_comment.contains("Checks whether the queue is empty."));
        assert_eq!(ex.methods[0].line, 3);
        assert_eq!(ex.methods[0].method_text, "boolean isEmpty() { return n == 0; }");
        assert!(ex.warnings.is_empty());
    }

    #[test]
    fn missing_doc_comment_is_empty() {
        let src = "class Q { int size() { return n; } }";
        let ex = extract_methods(src, "p", "Q.java");
        assert_eq!(ex.methods.len(), 1);
        assert_eq!(ex.methods[0].doc_comment, "");
    }

    #[test]
    fn braces_in_literals_and_comments_are_ignored() {
        let src = r#"
class A {
    /** Opens. */
    @Override
    public String open(String s) throws java.io.IOException {
        String x = "}{"; char c = '}'; // }
        /* { */
        if (s.isEmpty()) { return "{"; }
        return x;
    }

    /** Closes. */
    abstract void close();

    void run() {
        Runnable r = new Runnable() {
            /** Inner run. */
            public void run() { for (int i = 0; i < 3; i++) { go(); } }
        };
        list.forEach(x -> { use(x); });
    }
}
"#;
        let ex = extract_methods(src, "p", "A.java");
        let names: Vec<_> = ex.methods.iter().map(|m| m.method_text.lines().next().unwrap().trim().to_string()).collect();
        assert_eq!(ex.methods.len(), 4, "{names:?}");
        assert!(ex.methods[0].method_text.starts_with("@Override"));
        assert!(ex.methods[0].doc_comment.contains("Opens."));
        assert!(ex.methods[1].method_text.starts_with("abstract void close();"));
        assert!(ex.methods[2].method_text.starts_with("void run()"));
        assert!(ex.methods[3].doc_comment.contains("Inner run."));
        assert!(ex.warnings.is_empty());
    }

    #[test]
    fn fields_enums_and_calls_are_not_methods() {
        let src = r#"
enum Color { RED(1), GREEN(2); Color(int v) { this.v = v; } }
class B {
    int x = compute();
    static { init(); }
    int[] arr = { 1, 2 };
    Object o = Foo.class;
}
"#;
        let ex = extract_methods(src, "p", "B.java");
        assert_eq!(ex.methods.len(), 1);
        assert!(ex.methods[0].method_text.starts_with("Color(int v)"));
    }

    #[test]
    fn unbalanced_braces_keep_earlier_methods() {
        let src = "class A {\n void a() { }\n void b() { if (x) { }\n";
        let ex = extract_methods(src, "p", "A.java");
        assert_eq!(ex.methods.len(), 1);
        assert_eq!(ex.warnings.len(), 1);

        let src = "class A { void a() { } } } void b() { }";
        let ex = extract_methods(src, "p", "A.java");
        assert_eq!(ex.methods.len(), 1);
        assert!(ex.warnings[0].message.contains("unmatched"));
    }

    #[test]
    fn javadoc_stripping() {
        let doc = "/**\n * Returns the {@code size} of the <b>list</b>.\n * More text.\n * @return the size\n */";
        assert_eq!(strip_javadoc(doc), "Returns the size of the list.\nMore text.");
        assert_eq!(strip_javadoc("/** Uses {@link Foo#bar}. */"), "Uses Foo#bar.");
        assert_eq!(strip_javadoc(""), "");
    }

    #[test]
    fn first_sentence_examples() {
        assert_eq!(first_sentence("Returns the size. Never negative."), "Returns the size.");
        assert_eq!(first_sentence("checks whether empty\nmore detail"), "checks whether empty");
        assert_eq!(first_sentence(""), "");
    }

    #[test]
    fn clean_drops_each_criterion() {
        let cfg = CleanConfig::default();
        assert_eq!(rejection(&cand("a", "Auto-generated method stub here"), &cfg), Some(DropReason::AutoGenerated));
        assert_eq!(rejection(&cand("a", "the size"), &cfg), Some(DropReason::TooShort));
        assert_eq!(rejection(&cand("a", "返回 列表 的 大小 值"), &cfg), Some(DropReason::NonEnglish));
        assert_eq!(rejection(&cand("", "returns the size"), &cfg), Some(DropReason::EmptyCode));
        assert_eq!(rejection(&cand("a", "returns the size"), &cfg), None);
    }

    #[test]
    fn clean_ten_candidates_keeps_seven() {
        let cfg = CleanConfig::default();
        let mut cs: Vec<CandidatePair> =
            (0..7).map(|i| cand(&format!("m{i} ( )"), &format!("returns value number {i}"))).collect();
        cs.push(cand("x ( )", "TODO Auto-generated stub"));
        cs.push(cand("y ( )", "gets it"));
        cs.push(cand("z ( )", "получить размер списка"));
        assert_eq!(clean(&cs, &cfg).len(), 7);
    }

    #[test]
    fn clean_removes_exact_duplicates() {
        let cfg = CleanConfig::default();
        let cs = vec![cand("a b", "returns the size"), cand("a b", "returns the size"), cand("a c", "returns the size")];
        assert_eq!(clean(&cs, &cfg).len(), 2);
    }

    fn pair(code: &str, summary: &str) -> CodeSummaryPair {
        CodeSummaryPair {
            project_id: "p".into(),
            code_tokens: toks(code),
            summary_tokens: toks(summary),
            file_path: "A.java".into(),
            line: 1,
        }
    }

    #[test]
    fn dedup_against_examples() {
        let pre: Vec<_> = (0..5).map(|i| pair(&format!("c{i}"), "returns the value")).collect();
        assert_eq!(dedup_against(&pre, &[]), pre);

        let held = ProjectCorpus::new("p", vec![pair("c1", "returns the value"), pair("c3", "returns the value")]).unwrap();
        assert_eq!(dedup_against(&pre, std::slice::from_ref(&held)).len(), 3);

        let near = ProjectCorpus { project_id: "p".into(), pairs: vec![pair("c1", "returns the values")] };
        assert_eq!(dedup_against(&pre, &[near]).len(), 5);
    }

    #[test]
    fn corpus_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let pairs = vec![pair("a ( )", "returns the a"), pair("b", "gets the b")];
        write_corpus(&path, &pairs).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), pairs);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"project_id\":\"p\",\"code_tokens\":[\"a\",\"(\",\")\"]"));
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(
            items in prop::collection::vec((0usize..4, "[a-zA-Z é_-]{0,24}"), 0..20)
        ) {
            let cfg = CleanConfig::default();
            let cs: Vec<CandidatePair> = items.iter().map(|(c, s)| cand(&format!("c{c}"), s)).collect();
            let once = clean(&cs, &cfg);
            let again: Vec<CandidatePair> = once.iter().map(CandidatePair::from).collect();
            prop_assert_eq!(clean(&again, &cfg), once.clone());
            for p in &once {
                prop_assert!(p.summary_tokens.len() >= MIN_SUMMARY_TOKENS);
                prop_assert!(!p.code_tokens.is_empty());
            }
        }

        #[test]
        fn dedup_output_disjoint_from_held_out(
            pre in prop::collection::vec((0usize..5, 0usize..3), 0..15),
            held in prop::collection::vec((0usize..5, 0usize..3), 0..8),
        ) {
            let mk = |v: &[(usize, usize)]| v.iter().map(|(c, s)| pair(&format!("c{c}"), &format!("s{s} a b"))).collect::<Vec<_>>();
            let h = ProjectCorpus { project_id: "p".into(), pairs: mk(&held) };
            let kept = dedup_against(&mk(&pre), std::slice::from_ref(&h));
            for k in &kept {
                prop_assert!(!h.pairs.iter().any(|x| x.content_key() == k.content_key()));
            }
        }

        #[test]
        fn extraction_never_panics(src in "[a-z{}();/*\"' \n]{0,80}") {
            let _ = extract_methods(&src, "p", "F.java");
        }
    }
}
