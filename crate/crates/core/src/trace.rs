//! The Think+Score text protocol.
//!
//! A reward-model output ends with a JSON array of per-principle verdicts, an
//! `{"average_score": ..}` object and a terminal `<score>..</score>` tag:
//!
//! ```text
//! <free-form reasoning>
//! [{"question": "Is the sky purple?", "score": 1}, ...], {"average_score": 0.8} <score>7</score>
//! ```
//!
//! [`extract_score`] is the score operator used to turn raw text into a scalar
//! reward. Parsing is total: every input yields a value or a typed error.

use crate::model::{
    verdict_average, PrincipleSet, PrincipleVerdict, ReasoningTrace, FINAL_SCORE_MAX,
    FINAL_SCORE_MIN,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

const OPEN_TAG: &str = "<score>";
const CLOSE_TAGS: [&str; 2] = ["</score>", "<\\score>"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("no well-formed <score>..</score> tag")]
    ScoreMissing,
    #[error("score tag content `{0}` is not a decimal number")]
    ScoreUnparseable(String),
    #[error("no verdict entry for principle `{0}`")]
    VerdictMissing(String),
    #[error("verdict for `{question}` is `{value}`, expected 0 or 1")]
    VerdictNonBinary { question: String, value: String },
}

/// Arbitrary model output.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq, Default)]
pub struct RawTraceText {
    pub text: String,
}

impl RawTraceText {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

impl From<String> for RawTraceText {
    fn from(text: String) -> Self {
        Self { text }
    }
}

impl From<&str> for RawTraceText {
    fn from(text: &str) -> Self {
        Self { text: text.into() }
    }
}

/// A parsed score and whether it had to be clamped into [0, 10].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreReading {
    pub value: f64,
    pub clamped: bool,
}

fn find_close(text: &str, from: usize) -> Option<(usize, usize)> {
    CLOSE_TAGS
        .iter()
        .filter_map(|tag| text[from..].find(tag).map(|i| (from + i, tag.len())))
        .min_by_key(|(pos, _)| *pos)
}

/// Byte range of the content of the last well-formed score tag.
fn last_score_tag(text: &str) -> Option<(usize, usize)> {
    let mut last = None;
    let mut cursor = 0;
    while let Some(rel) = text[cursor..].find(OPEN_TAG) {
        let content_start = cursor + rel + OPEN_TAG.len();
        cursor = content_start;
        let Some((close, _)) = find_close(text, content_start) else {
            continue;
        };
        // An open tag followed by another open tag before any close is a stray.
        if text[content_start..close].contains(OPEN_TAG) {
            continue;
        }
        last = Some((content_start, close));
    }
    last
}

fn is_decimal(s: &str) -> bool {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        digits += i - frac_start;
    }
    if digits == 0 {
        return false;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return false;
        }
    }
    i == b.len()
}

/// Parses a score and clamps it into [0, 10].
pub fn parse_score_value(content: &str) -> Result<ScoreReading, TraceError> {
    let trimmed = content.trim();
    if !is_decimal(trimmed) {
        return Err(TraceError::ScoreUnparseable(trimmed.to_string()));
    }
    let value: f64 = trimmed
        .parse()
        .map_err(|_| TraceError::ScoreUnparseable(trimmed.to_string()))?;
    if !value.is_finite() {
        return Err(TraceError::ScoreUnparseable(trimmed.to_string()));
    }
    let clamped_value = value.clamp(FINAL_SCORE_MIN, FINAL_SCORE_MAX);
    Ok(ScoreReading {
        value: clamped_value,
        clamped: clamped_value != value,
    })
}

/// Extracts the scalar score from the last well-formed `<score>` tag.
///
/// Both `</score>` and `<\score>` close a tag. Later tags supersede earlier
/// ones, and an unparseable last tag is an error rather than a fallback.
pub fn extract_score(raw: &RawTraceText) -> Result<ScoreReading, TraceError> {
    let (start, end) = last_score_tag(&raw.text).ok_or(TraceError::ScoreMissing)?;
    let reading = parse_score_value(&raw.text[start..end])?;
    if reading.clamped {
        log::warn!("score `{}` clamped to {}", raw.text[start..end].trim(), reading.value);
    }
    Ok(reading)
}

/// Score for RL use: malformed output maps to `floor` instead of failing.
pub fn score_or_floor(raw: &RawTraceText, floor: f64) -> (f64, Option<TraceError>) {
    match extract_score(raw) {
        Ok(r) => (r.value, None),
        Err(e) => (floor, Some(e)),
    }
}

/// Index of the bracket matching `text[open]`, honoring both quote styles.
fn matching_close(text: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut quote: Option<u8> = None;
    let mut escaped = false;
    for (i, &c) in text.iter().enumerate().skip(open) {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == b'\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            b'"' | b'\'' => quote = Some(c),
            b'[' | b'{' => depth += 1,
            b']' | b'}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Rewrites single-quoted strings as JSON strings.
fn requote_single(src: &str) -> String {
    let mut out = String::with_capacity(src.len());
    let mut quote: Option<char> = None;
    let mut chars = src.chars();
    while let Some(c) = chars.next() {
        match quote {
            None => match c {
                '"' => {
                    quote = Some('"');
                    out.push(c);
                }
                '\'' => {
                    quote = Some('\'');
                    out.push('"');
                }
                _ => out.push(c),
            },
            Some('"') => {
                out.push(c);
                if c == '\\' {
                    if let Some(n) = chars.next() {
                        out.push(n);
                    }
                } else if c == '"' {
                    quote = None;
                }
            }
            Some(_) => match c {
                '\\' => match chars.next() {
                    Some('\'') => out.push('\''),
                    Some(n) => {
                        out.push('\\');
                        out.push(n);
                    }
                    None => out.push('\\'),
                },
                '"' => out.push_str("\\\""),
                '\'' => {
                    quote = None;
                    out.push('"');
                }
                _ => out.push(c),
            },
        }
    }
    out
}

fn parse_lenient(src: &str) -> Option<Value> {
    serde_json::from_str(src)
        .ok()
        .or_else(|| serde_json::from_str(&requote_single(src)).ok())
}

/// Finds the last bracketed region opening with `open` that parses and
/// satisfies `accept`. Returns (start, end-exclusive, value).
fn last_structure(
    text: &str,
    open: u8,
    accept: impl Fn(&Value) -> bool,
) -> Option<(usize, usize, Value)> {
    let bytes = text.as_bytes();
    let opens: Vec<usize> = bytes
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == open)
        .map(|(i, _)| i)
        .collect();
    for &start in opens.iter().rev() {
        let Some(end) = matching_close(bytes, start) else {
            continue;
        };
        if let Some(value) = parse_lenient(&text[start..=end]) {
            if accept(&value) {
                return Some((start, end + 1, value));
            }
        }
    }
    None
}

fn is_verdict_array(value: &Value) -> bool {
    value.as_array().is_some_and(|items| {
        items.iter().all(|item| {
            item.as_object()
                .is_some_and(|o| o.contains_key("question") && o.contains_key("score"))
        })
    })
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

fn coerce_binary(question: &str, value: &Value) -> Result<bool, TraceError> {
    let non_binary = || TraceError::VerdictNonBinary {
        question: question.to_string(),
        value: value.to_string(),
    };
    match value {
        Value::Bool(b) => Ok(*b),
        Value::Number(n) => match n.as_f64() {
            Some(0.0) => Ok(false),
            Some(1.0) => Ok(true),
            _ => Err(non_binary()),
        },
        Value::String(s) => match s.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(non_binary()),
        },
        _ => Err(non_binary()),
    }
}

struct VerdictEntry<'a> {
    question: &'a str,
    score: &'a Value,
    reason: &'a str,
}

fn entries(value: &Value) -> Vec<VerdictEntry<'_>> {
    value
        .as_array()
        .map(|items| {
            items
                .iter()
                .filter_map(|item| {
                    let o = item.as_object()?;
                    Some(VerdictEntry {
                        question: o.get("question")?.as_str().unwrap_or(""),
                        score: o.get("score")?,
                        reason: o.get("reason").and_then(Value::as_str).unwrap_or(""),
                    })
                })
                .collect()
        })
        .unwrap_or_default()
}

fn align(entries: &[VerdictEntry<'_>], principles: &PrincipleSet) -> Result<Vec<PrincipleVerdict>, TraceError> {
    let mut used = vec![false; entries.len()];
    let normalized: Vec<String> = entries.iter().map(|e| normalize(e.question)).collect();
    let mut verdicts = Vec::with_capacity(principles.len());
    for p in principles.iter() {
        let exact = (0..entries.len()).find(|&i| !used[i] && entries[i].question == p.text);
        let idx = exact.or_else(|| {
            let target = normalize(&p.text);
            (0..entries.len()).find(|&i| !used[i] && normalized[i] == target)
        });
        let Some(i) = idx else {
            return Err(TraceError::VerdictMissing(p.id.clone()));
        };
        used[i] = true;
        let met = coerce_binary(entries[i].question, entries[i].score)?;
        verdicts.push(PrincipleVerdict::new(p.id.clone(), met).with_reason(entries[i].reason));
    }
    Ok(verdicts)
}

/// Parses per-principle verdicts, aligned to `principles` by question text.
///
/// Exact text matches are tried first, then a whitespace- and case-insensitive
/// match. Paraphrases do not match.
pub fn parse_verdicts(
    raw: &RawTraceText,
    principles: &PrincipleSet,
) -> Result<Vec<PrincipleVerdict>, TraceError> {
    let array = last_structure(&raw.text, b'[', is_verdict_array);
    let Some((_, _, value)) = array else {
        let first = principles.iter().next().map(|p| p.id.clone()).unwrap_or_default();
        return Err(TraceError::VerdictMissing(first));
    };
    align(&entries(&value), principles)
}

/// The `average_score` the model reported, if any.
pub fn parse_reported_average(raw: &RawTraceText) -> Option<f64> {
    let (_, _, value) = last_structure(&raw.text, b'{', |v| {
        v.get("average_score").is_some_and(Value::is_number)
    })?;
    value.get("average_score")?.as_f64()
}

/// Everything recoverable from one raw output.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedTrace {
    pub think_text: String,
    pub verdicts: Vec<PrincipleVerdict>,
    pub average_score: f64,
    pub reported_average: Option<f64>,
    pub final_score: f64,
    pub clamped: bool,
}

pub fn parse_trace(raw: &RawTraceText, principles: &PrincipleSet) -> Result<ParsedTrace, TraceError> {
    let score = extract_score(raw)?;
    let (start, _, value) = last_structure(&raw.text, b'[', is_verdict_array).ok_or_else(|| {
        TraceError::VerdictMissing(principles.iter().next().map(|p| p.id.clone()).unwrap_or_default())
    })?;
    let verdicts = align(&entries(&value), principles)?;
    let think = &raw.text[..start];
    let think_text = think.strip_suffix('\n').unwrap_or(think).to_string();
    Ok(ParsedTrace {
        think_text,
        average_score: verdict_average(&verdicts).unwrap_or(0.0),
        verdicts,
        reported_average: parse_reported_average(raw),
        final_score: score.value,
        clamped: score.clamped,
    })
}

/// FNV-1a word hash used as a stand-in token id for text-only traces.
fn word_id(word: &str) -> u32 {
    word.bytes()
        .fold(0x811c_9dc5u32, |h, b| (h ^ u32::from(b)).wrapping_mul(0x0100_0193))
}

impl ParsedTrace {
    /// Builds a trace for text that arrived without token log-probabilities.
    /// Tokens are whitespace-separated words of the raw text.
    pub fn into_text_trace(self, raw: &RawTraceText) -> ReasoningTrace {
        let mut token_ids: Vec<u32> = raw.text.split_whitespace().map(word_id).collect();
        if token_ids.is_empty() {
            token_ids.push(0);
        }
        ReasoningTrace {
            think_text: self.think_text,
            verdicts: self.verdicts,
            average_score: self.average_score,
            final_score: self.final_score,
            score_clamped: self.clamped,
            length: token_ids.len(),
            token_ids,
            token_logprobs_current: Vec::new(),
            token_logprobs_old: Vec::new(),
        }
    }
}

/// Shortest decimal rendering that parses back to the same value.
pub fn format_number(x: f64) -> String {
    format!("{x}")
}

/// Renders a trace in the wire format. Questions come from `principles`,
/// matched to verdicts by principle id.
pub fn emit_trace(trace: &ReasoningTrace, principles: &PrincipleSet) -> RawTraceText {
    let mut out = String::new();
    if !trace.think_text.is_empty() {
        out.push_str(&trace.think_text);
        out.push('\n');
    }
    out.push('[');
    for (i, v) in trace.verdicts.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let question = principles
            .iter()
            .find(|p| p.id == v.principle_id)
            .map_or(v.principle_id.as_str(), |p| p.text.as_str());
        out.push_str("{\"question\": ");
        out.push_str(&Value::from(question).to_string());
        out.push_str(", \"score\": ");
        out.push(if v.met { '1' } else { '0' });
        if !v.reason.is_empty() {
            out.push_str(", \"reason\": ");
            out.push_str(&Value::from(v.reason.as_str()).to_string());
        }
        out.push('}');
    }
    out.push_str("], {\"average_score\": ");
    out.push_str(&format_number(trace.average_score));
    out.push_str("} <score>");
    out.push_str(&format_number(trace.final_score));
    out.push_str("</score>");
    RawTraceText::from(out)
}
