//! Turns raw question rows into the processed field schema (`code`, `error`,
//! `keyword`, `best_answer`, ...) and builds token queries from them.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::RawPostRow;
use crate::lexical::{tokenize, TokenSeq};
use crate::PostId;

const TRACEBACK_HEADER: &str = "Traceback (most recent call last)";

fn error_head() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^([A-Za-z_][A-Za-z0-9_.]*(?:Error|Exception|Warning))\b").unwrap())
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PreprocessError {
    #[error("truncation length must be at least 2, got {0}")]
    MaxLenTooSmall(usize),
    #[error("question {0} has neither code nor error text")]
    NoSnippet(PostId),
    #[error("post {0} is not a question")]
    NotAQuestion(PostId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Code,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBlock {
    pub text: String,
    pub kind: BlockKind,
}

impl CodeBlock {
    pub fn classified(text: String) -> Self {
        let kind = classify_block(&text);
        Self { text, kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessedQuestion {
    pub id: PostId,
    pub title: String,
    #[serde(rename = "body")]
    pub body_text: String,
    pub code: String,
    pub error: String,
    pub keyword: Option<String>,
    pub best_answer: Option<String>,
    pub duplicate_of: Option<PostId>,
    pub favorite_count: Option<i64>,
}

impl ProcessedQuestion {
    pub fn has_snippet(&self) -> bool {
        !self.code.is_empty() || !self.error.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutMode {
    /// Keep the head and the tail, drop the middle.
    #[default]
    Middle,
    /// Keep the first `max_len` tokens.
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub tokens: TokenSeq,
    pub source_question: PostId,
}

/// Finds `<code ...>` (case-insensitive) starting at or after `from`.
fn find_open_code(lower: &str, from: usize) -> Option<(usize, usize)> {
    let mut at = from;
    while let Some(rel) = lower[at..].find("<code") {
        let start = at + rel;
        let after = start + "<code".len();
        match lower[after..].chars().next() {
            Some('>') => return Some((start, after + 1)),
            Some(c) if c.is_whitespace() || c == '/' => {
                let end = lower[after..].find('>').map_or(lower.len(), |e| after + e + 1);
                return Some((start, end));
            }
            None => return None,
            _ => at = after,
        }
    }
    None
}

/// Removes every `<...>` tag, optionally turning block-level tags into newlines.
fn strip_tags(html: &str, block_breaks: bool) -> String {
    let mut out = String::with_capacity(html.len());
    let mut rest = html;
    while let Some(lt) = rest.find('<') {
        out.push_str(&rest[..lt]);
        let Some(gt) = rest[lt..].find('>') else {
            out.push_str(&rest[lt..]);
            return out;
        };
        let tag = &rest[lt + 1..lt + gt];
        let looks_like_tag = tag
            .trim_start_matches('/')
            .starts_with(|c: char| c.is_ascii_alphabetic() || c == '!');
        if !looks_like_tag {
            out.push('<');
            rest = &rest[lt + 1..];
            continue;
        }
        if block_breaks {
            let name: String = tag
                .trim_start_matches('/')
                .chars()
                .take_while(|c| c.is_ascii_alphanumeric())
                .collect::<String>()
                .to_ascii_lowercase();
            if matches!(
                name.as_str(),
                "p" | "br"
                    | "pre"
                    | "div"
                    | "li"
                    | "ul"
                    | "ol"
                    | "blockquote"
                    | "hr"
                    | "h1"
                    | "h2"
                    | "h3"
                    | "h4"
                    | "h5"
                    | "h6"
                    | "table"
                    | "tr"
            ) && !out.ends_with('\n')
                && !out.is_empty()
            {
                out.push('\n');
            }
        }
        rest = &rest[lt + gt + 1..];
    }
    out.push_str(rest);
    out
}

fn decode_entities(text: &str) -> String {
    html_escape::decode_html_entities(text).into_owned()
}

/// Markup-free rendering of an HTML body; code-tag contents stay in place.
pub fn strip_markup(html: &str) -> String {
    let text = decode_entities(&strip_tags(html, true));
    let mut lines: Vec<&str> = text.lines().map(str::trim_end).collect();
    while lines.first().is_some_and(|l| l.trim().is_empty()) {
        lines.remove(0);
    }
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    lines.dedup_by(|a, b| a.trim().is_empty() && b.trim().is_empty());
    lines.join("\n")
}

/// Inner text of every `<code>` region, in document order, entities decoded.
/// An unclosed tag runs to the end of the input.
pub fn extract_code_blocks(body_html: &str) -> Vec<String> {
    let lower = body_html.to_ascii_lowercase();
    let mut blocks = Vec::new();
    let mut at = 0;
    while let Some((_, content_start)) = find_open_code(&lower, at) {
        let content_end = lower[content_start..]
            .find("</code>")
            .map_or(lower.len(), |e| content_start + e);
        let inner = &body_html[content_start..content_end];
        blocks.push(decode_entities(&strip_tags(inner, false)));
        at = (content_end + "</code>".len()).min(lower.len());
        if content_end == lower.len() {
            break;
        }
    }
    blocks
}

/// `Error` when the text carries a traceback sign: the interpreter's
/// traceback header, or a line that starts with an `...Error`,
/// `...Exception` or `...Warning` identifier.
pub fn classify_block(text: &str) -> BlockKind {
    if text.contains(TRACEBACK_HEADER) || error_head().is_match(text) {
        BlockKind::Error
    } else {
        BlockKind::Code
    }
}

/// Identifier of the last error-head line; the final frame names the raised error.
pub fn extract_error_keyword(error_text: &str) -> Option<String> {
    error_head().captures_iter(error_text).last().map(|c| c[1].to_owned())
}

/// Counters for things [`assemble_question`] had to paper over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyReport {
    pub questions: u64,
    pub missing_accepted_answer: u64,
}

pub fn assemble_question(
    row: &RawPostRow,
    answers: &HashMap<PostId, RawPostRow>,
    duplicates: &HashMap<PostId, PostId>,
    report: &mut AssemblyReport,
) -> Result<ProcessedQuestion, PreprocessError> {
    if row.post_type != crate::ingest::PostType::Question {
        return Err(PreprocessError::NotAQuestion(row.id));
    }
    report.questions += 1;
    let blocks: Vec<CodeBlock> = extract_code_blocks(&row.body_html)
        .into_iter()
        .filter(|b| !b.trim().is_empty())
        .map(CodeBlock::classified)
        .collect();
    let merge = |kind: BlockKind| {
        blocks
            .iter()
            .filter(|b| b.kind == kind)
            .map(|b| b.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    };
    let code = merge(BlockKind::Code);
    let error = merge(BlockKind::Error);
    let keyword = extract_error_keyword(&error);

    let best_answer = row.accepted_answer_id.and_then(|aid| match answers.get(&aid) {
        Some(answer) => Some(strip_markup(&answer.body_html)),
        None => {
            report.missing_accepted_answer += 1;
            None
        }
    });

    Ok(ProcessedQuestion {
        id: row.id,
        title: row.title.clone().unwrap_or_default(),
        body_text: strip_markup(&row.body_html),
        code,
        error,
        keyword,
        best_answer,
        duplicate_of: duplicates.get(&row.id).copied(),
        favorite_count: row.favorite_count,
    })
}

/// Keeps the first `ceil(max_len/2)` and last `floor(max_len/2)` tokens.
pub fn truncate_middle<T: Clone>(tokens: &[T], max_len: usize) -> Result<Vec<T>, PreprocessError> {
    if max_len < 2 {
        return Err(PreprocessError::MaxLenTooSmall(max_len));
    }
    if tokens.len() <= max_len {
        return Ok(tokens.to_vec());
    }
    let head = max_len.div_ceil(2);
    let tail = max_len / 2;
    let mut out = Vec::with_capacity(max_len);
    out.extend_from_slice(&tokens[..head]);
    out.extend_from_slice(&tokens[tokens.len() - tail..]);
    Ok(out)
}

pub fn truncate(tokens: TokenSeq, max_len: usize, mode: CutMode) -> Result<TokenSeq, PreprocessError> {
    match mode {
        CutMode::Middle => Ok(TokenSeq::new(truncate_middle(tokens.as_slice(), max_len)?)),
        CutMode::Head => {
            if max_len < 2 {
                return Err(PreprocessError::MaxLenTooSmall(max_len));
            }
            let mut v = tokens.into_inner();
            v.truncate(max_len);
            Ok(TokenSeq::new(v))
        }
    }
}

/// Query tokens are `tokenize(code) ++ tokenize(error)`, cut to `max_len`.
pub fn build_query(pq: &ProcessedQuestion, max_len: usize, cut: CutMode) -> Result<Query, PreprocessError> {
    if !pq.has_snippet() {
        return Err(PreprocessError::NoSnippet(pq.id));
    }
    let tokens = tokenize(&pq.code).concat(tokenize(&pq.error));
    Ok(Query {
        tokens: truncate(tokens, max_len, cut)?,
        source_question: pq.id,
    })
}
