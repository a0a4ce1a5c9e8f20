//! Expert and automatic highlights, and their token-level footprint.
//!
//! Span offsets are byte offsets into the annotated text, end exclusive, and
//! must fall on UTF-8 character boundaries.

pub mod llm;

use std::ops::Range;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::answer_in_caption;
use crate::guidance::HighlightMask;
use crate::model::{Prompt, Role, TokenSequence, Vocab};
use crate::scalar::Scalar;
use crate::text::content_words;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanSource {
    Expert,
    Auto,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightSpan {
    pub start: usize,
    pub end: usize,
    pub source: SpanSource,
}

impl HighlightSpan {
    pub fn new(start: usize, end: usize, source: SpanSource) -> Self {
        Self { start, end, source }
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn validate(&self, text: &str) -> Result<()> {
        if self.start >= self.end || self.end > text.len() {
            return Err(Error::contract(format!(
                "span {}..{} invalid for text of length {}",
                self.start,
                self.end,
                text.len()
            )));
        }
        if !text.is_char_boundary(self.start) || !text.is_char_boundary(self.end) {
            return Err(Error::contract(format!(
                "span {}..{} splits a character",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

/// Sorts spans and merges overlapping ones. Touching spans stay separate.
/// A merged span keeps the source of its earliest member.
pub fn merge_spans(mut spans: Vec<HighlightSpan>) -> Vec<HighlightSpan> {
    spans.sort_by_key(|s| (s.start, s.end));
    let mut out: Vec<HighlightSpan> = Vec::with_capacity(spans.len());
    for s in spans {
        match out.last_mut() {
            Some(last) if s.start < last.end => last.end = last.end.max(s.end),
            _ => out.push(s),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAnnotation {
    /// The reviewed, possibly edited reference. Authoritative for regeneration.
    pub reference_text: String,
    pub spans: Vec<HighlightSpan>,
    pub editor: String,
    pub timestamp: DateTime<Utc>,
}

impl ExpertAnnotation {
    pub fn validate(&self) -> Result<()> {
        self.spans.iter().try_for_each(|s| s.validate(&self.reference_text))
    }

    /// Validated copy with overlapping spans merged.
    pub fn normalized(mut self) -> Result<Self> {
        self.validate()?;
        self.spans = merge_spans(self.spans);
        Ok(self)
    }
}

/// Mask for a sequence whose token offsets index `text` directly.
pub fn mask_from_spans(text: &str, spans: &[HighlightSpan], seq: &TokenSequence) -> Result<HighlightMask> {
    mask_from_spans_at(text, spans, seq, 0)
}

/// Mask for a sequence tokenized from a larger prompt in which `text` starts
/// at byte `base`.
///
/// A prompt token is set when its byte range overlaps a span by at least one
/// byte. A span that reaches no token is an error rather than a silent drop.
pub fn mask_from_spans_at(
    text: &str,
    spans: &[HighlightSpan],
    seq: &TokenSequence,
    base: usize,
) -> Result<HighlightMask> {
    let mut mask = HighlightMask::zeros(seq.len());
    for span in spans {
        span.validate(text)?;
        let (lo, hi) = (span.start + base, span.end + base);
        let mut hit = false;
        for (i, (tok, role)) in seq.tokens().iter().zip(seq.roles()).enumerate() {
            if *role != Role::Prompt {
                continue;
            }
            if let Some(r) = &tok.offset {
                if r.start < hi && lo < r.end {
                    mask.set(i);
                    hit = true;
                }
            }
        }
        if !hit {
            return Err(Error::contract(format!(
                "span {}..{} ({:?}) covers no token",
                span.start,
                span.end,
                &text[span.range()]
            )));
        }
    }
    Ok(mask)
}

/// Regeneration prompt text: the question, a newline, then the reference.
/// Returns the text and the byte offset where the reference begins.
pub fn compose_prompt(question: &str, reference: &str) -> (String, usize) {
    let q = question.trim_end();
    (format!("{q}\n{reference}"), q.len() + 1)
}

/// Tokenized regeneration prompt and the mask of `spans` over its reference part.
pub fn highlighted_prompt<F: Scalar>(
    vocab: &Vocab,
    question: &str,
    reference: &str,
    spans: &[HighlightSpan],
) -> Result<(Prompt<F>, HighlightMask)> {
    let (text, base) = compose_prompt(question, reference);
    let seq = vocab.tokenize(&text);
    let mask = mask_from_spans_at(reference, spans, &seq, base)?;
    Ok((Prompt::text(seq), mask))
}

/// Byte ranges of ASCII-case-insensitive, whole-word occurrences of `needle`.
pub fn find_whole_word(haystack: &str, needle: &str) -> Vec<Range<usize>> {
    let needle = needle.trim();
    if needle.is_empty() {
        return Vec::new();
    }
    let hay = haystack.as_bytes();
    let pat = needle.as_bytes();
    let is_word = |b: u8| b.is_ascii_alphanumeric() || b >= 0x80;
    let mut out = Vec::new();
    let mut i = 0;
    while i + pat.len() <= hay.len() {
        if hay[i..i + pat.len()].eq_ignore_ascii_case(pat) {
            let before = i == 0 || !is_word(hay[i - 1]) || !is_word(pat[0]);
            let end = i + pat.len();
            let after = end == hay.len() || !is_word(hay[end]) || !is_word(pat[pat.len() - 1]);
            if before && after && haystack.is_char_boundary(i) && haystack.is_char_boundary(end) {
                out.push(i..end);
                i = end;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Whether `keyword` shares a content word with `question`.
pub fn overlaps_question(keyword: &str, question: &str) -> bool {
    let q = content_words(question);
    content_words(keyword).iter().any(|w| q.contains(w))
}

/// Spans over reference occurrences of the keywords that are relevant to the
/// question, or that appear in `answer` when a ground-truth answer is given.
pub fn auto_highlight(keywords: &[String], question: &str, reference: &str, answer: Option<&str>) -> Vec<HighlightSpan> {
    let spans = keywords
        .iter()
        .filter(|k| overlaps_question(k, question) || answer.is_some_and(|a| answer_in_caption(k, a)))
        .flat_map(|k| find_whole_word(reference, k))
        .map(|r| HighlightSpan::new(r.start, r.end, SpanSource::Auto))
        .collect();
    merge_spans(spans)
}
