// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt rendering for the two input orders, marked prompting, and span
//! bookkeeping.
//!
//! All spans are half-open byte ranges into [`RenderedPrompt::text`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::RcExample;
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSpan, TokenizedText};

const QUESTION_LABEL: &str = "Question: ";
const CONTEXT_LABEL: &str = "Context: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrder {
    QuestionFirst,
    ContextFirst,
}

impl PromptOrder {
    pub const ALL: [PromptOrder; 2] = [PromptOrder::QuestionFirst, PromptOrder::ContextFirst];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptOrder::QuestionFirst => "question_first",
            PromptOrder::ContextFirst => "context_first",
        }
    }
}

impl fmt::Display for PromptOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "question_first" | "qf" => Ok(PromptOrder::QuestionFirst),
            "context_first" | "cf" => Ok(PromptOrder::ContextFirst),
            other => Err(format!("unknown prompt order {other:?}")),
        }
    }
}

/// Which substring is emphasized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmphasisTarget {
    None,
    Question,
    Context,
    QuestionAndContext,
}

impl EmphasisTarget {
    /// The three emphasis targets (everything but `None`).
    pub const EMPHASIZED: [EmphasisTarget; 3] = [
        EmphasisTarget::Question,
        EmphasisTarget::Context,
        EmphasisTarget::QuestionAndContext,
    ];

    pub fn covers_question(self) -> bool {
        matches!(
            self,
            EmphasisTarget::Question | EmphasisTarget::QuestionAndContext
        )
    }

    pub fn covers_context(self) -> bool {
        matches!(
            self,
            EmphasisTarget::Context | EmphasisTarget::QuestionAndContext
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmphasisTarget::None => "none",
            EmphasisTarget::Question => "question",
            EmphasisTarget::Context => "context",
            EmphasisTarget::QuestionAndContext => "question_and_context",
        }
    }

    /// Column label used in the text tables.
    pub fn short(self) -> &'static str {
        match self {
            EmphasisTarget::None => "-",
            EmphasisTarget::Question => "Q",
            EmphasisTarget::Context => "C",
            EmphasisTarget::QuestionAndContext => "Q+C",
        }
    }
}

impl fmt::Display for EmphasisTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmphasisTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" | "-" => Ok(EmphasisTarget::None),
            "question" | "Q" | "q" => Ok(EmphasisTarget::Question),
            "context" | "C" | "c" => Ok(EmphasisTarget::Context),
            "question_and_context" | "Q+C" | "q+c" => Ok(EmphasisTarget::QuestionAndContext),
            other => Err(format!("unknown emphasis target {other:?}")),
        }
    }
}

/// A single prompt segment that can carry a steering span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Question,
    Context,
}

impl Segment {
    /// Steering segment for an emphasis target. Question+context has no
    /// single contiguous segment and is rejected.
    pub fn for_target(target: EmphasisTarget) -> Result<Segment> {
        match target {
            EmphasisTarget::Question => Ok(Segment::Question),
            EmphasisTarget::Context => Ok(Segment::Context),
            EmphasisTarget::QuestionAndContext => Err(Error::InvalidTarget),
            EmphasisTarget::None => Err(Error::NoEmphasisTarget),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Segment::Question => "question",
            Segment::Context => "context",
        }
    }
}

/// Open/close strings wrapped around an emphasized substring.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MarkerPair {
    pub name: String,
    pub open: String,
    pub close: String,
}

impl MarkerPair {
    pub fn new(
        name: impl Into<String>,
        open: impl Into<String>,
        close: impl Into<String>,
    ) -> Result<Self> {
        let (name, open, close) = (name.into(), open.into(), close.into());
        if name.is_empty() || open.is_empty() || close.is_empty() {
            return Err(Error::InvalidMarker(format!(
                "name, open and close must be non-empty (got {name:?}, {open:?}, {close:?})"
            )));
        }
        Ok(Self { name, open, close })
    }

    /// The four built-in pairs: `*..*`, `“..”`, `<emphasize>..<\emphasize>`
    /// and `<mark>..<\mark>`.
    pub fn builtins() -> Vec<MarkerPair> {
        [
            ("star", "*", "*"),
            ("quote", "\u{201c}", "\u{201d}"),
            ("emphasize", "<emphasize>", "<\\emphasize>"),
            ("mark", "<mark>", "<\\mark>"),
        ]
        .into_iter()
        .map(|(n, o, c)| MarkerPair {
            name: n.into(),
            open: o.into(),
            close: c.into(),
        })
        .collect()
    }

    pub fn builtin(name: &str) -> Option<MarkerPair> {
        Self::builtins().into_iter().find(|m| m.name == name)
    }

    fn occurs_in(&self, s: &str) -> bool {
        s.contains(&self.open) || s.contains(&self.close)
    }
}

/// Half-open byte range into a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end]
    }

    fn disjoint(&self, other: &CharSpan) -> bool {
        self.end <= other.start || other.end <= self.start
    }
}

/// Prompt text plus the byte spans of its segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// Question substring, markers included when wrapped.
    pub question_span: CharSpan,
    /// Context substring, markers included when wrapped. `None` for
    /// closed-book prompts.
    pub context_span: Option<CharSpan>,
    pub emphasized_spans: Vec<CharSpan>,
    pub order: PromptOrder,
    pub target: EmphasisTarget,
    pub marker: Option<MarkerPair>,
    /// The question or context text itself contains the marker strings.
    pub marker_collision: bool,
}

impl RenderedPrompt {
    pub fn question(&self) -> &str {
        self.question_span.slice(&self.text)
    }

    pub fn context(&self) -> Option<&str> {
        self.context_span.map(|s| s.slice(&self.text))
    }

    pub fn is_closed_book(&self) -> bool {
        self.context_span.is_none()
    }

    fn segment_span(&self, which: Segment) -> Result<CharSpan> {
        match which {
            Segment::Question => Ok(self.question_span),
            Segment::Context => self.context_span.ok_or(Error::SpanMissing("context")),
        }
    }

    /// Byte span of a segment with or without its wrapping markers.
    pub fn segment_char_span(&self, which: Segment, include_markers: bool) -> Result<CharSpan> {
        let span = self.segment_span(which)?;
        let wrapped = match which {
            Segment::Question => self.target.covers_question(),
            Segment::Context => self.target.covers_context(),
        };
        match (&self.marker, wrapped, include_markers) {
            (Some(m), true, false) => Ok(CharSpan::new(
                span.start + m.open.len(),
                span.end - m.close.len(),
            )),
            _ => Ok(span),
        }
    }

    /// Checks the span invariants; used by tests and debug assertions.
    pub fn spans_consistent(&self) -> bool {
        let len = self.text.len();
        let in_bounds = |s: &CharSpan| s.start <= s.end && s.end <= len;
        let mut ok = in_bounds(&self.question_span);
        if let Some(c) = &self.context_span {
            ok &= in_bounds(c) && c.disjoint(&self.question_span);
        }
        ok &= self.emphasized_spans.iter().all(in_bounds);
        for (i, a) in self.emphasized_spans.iter().enumerate() {
            for b in &self.emphasized_spans[i + 1..] {
                ok &= a.disjoint(b);
            }
        }
        ok
    }
}

struct Builder {
    text: String,
}

impl Builder {
    fn push(&mut self, s: &str) {
        self.text.push_str(s);
    }

    fn push_segment(&mut self, body: &str, marker: Option<&MarkerPair>) -> CharSpan {
        let start = self.text.len();
        match marker {
            Some(m) => {
                self.text.push_str(&m.open);
                self.text.push_str(body);
                self.text.push_str(&m.close);
            }
            None => self.text.push_str(body),
        }
        CharSpan::new(start, self.text.len())
    }
}

fn assemble(
    question: &str,
    context: Option<&str>,
    order: PromptOrder,
    target: EmphasisTarget,
    marker: Option<&MarkerPair>,
) -> RenderedPrompt {
    let q_marker = marker.filter(|_| target.covers_question());
    let c_marker = marker.filter(|_| target.covers_context());
    let mut b = Builder {
        text: String::new(),
    };

    let (question_span, context_span) = match (context, order) {
        (None, _) => {
            b.push(QUESTION_LABEL);
            (b.push_segment(question, q_marker), None)
        }
        (Some(c), PromptOrder::QuestionFirst) => {
            b.push(QUESTION_LABEL);
            let q = b.push_segment(question, q_marker);
            b.push(" ");
            b.push(CONTEXT_LABEL);
            let c = b.push_segment(c, c_marker);
            (q, Some(c))
        }
        (Some(c), PromptOrder::ContextFirst) => {
            b.push(CONTEXT_LABEL);
            let c = b.push_segment(c, c_marker);
            b.push(" ");
            b.push(QUESTION_LABEL);
            let q = b.push_segment(question, q_marker);
            (q, Some(c))
        }
    };

    let mut emphasized_spans = Vec::new();
    if q_marker.is_some() {
        emphasized_spans.push(question_span);
    }
    if let (Some(_), Some(c)) = (c_marker, context_span) {
        emphasized_spans.push(c);
    }
    emphasized_spans.sort_by_key(|s| s.start);

    let marker_collision = marker.is_some_and(|m| {
        (q_marker.is_some() && m.occurs_in(question))
            || (c_marker.is_some() && context.is_some_and(|c| m.occurs_in(c)))
    });

    RenderedPrompt {
        text: b.text,
        question_span,
        context_span,
        emphasized_spans,
        order,
        target,
        marker: marker.cloned(),
        marker_collision,
    }
}

/// `Question: <q> Context: <c>` or `Context: <c> Question: <q>`.
pub fn render(example: &RcExample, order: PromptOrder) -> RenderedPrompt {
    assemble(
        &example.question,
        Some(&example.context),
        order,
        EmphasisTarget::None,
        None,
    )
}

/// `Question: <q>`, ignoring the context.
pub fn closed_book_render(example: &RcExample) -> RenderedPrompt {
    assemble(
        &example.question,
        None,
        PromptOrder::QuestionFirst,
        EmphasisTarget::None,
        None,
    )
}

/// Wraps the targeted segment(s) of an unemphasized prompt in `marker`,
/// with no whitespace between marker and text.
pub fn apply_markers(
    rp: &RenderedPrompt,
    target: EmphasisTarget,
    marker: &MarkerPair,
) -> Result<RenderedPrompt> {
    if rp.target != EmphasisTarget::None {
        return Err(Error::AlreadyEmphasized);
    }
    if target == EmphasisTarget::None {
        return Err(Error::NoEmphasisTarget);
    }
    if target.covers_context() && rp.is_closed_book() {
        return Err(Error::SpanMissing("context"));
    }
    let out = assemble(rp.question(), rp.context(), rp.order, target, Some(marker));
    if out.marker_collision {
        log::warn!(
            "marker {:?} occurs inside the emphasized text; emphasis is ambiguous",
            marker.name
        );
    }
    debug_assert!(out.spans_consistent());
    Ok(out)
}

/// Token span of the question or context segment of `rp`.
///
/// `tt` must be the tokenization of `rp.text`.
pub fn emphasized_token_span(
    rp: &RenderedPrompt,
    tt: &TokenizedText,
    which: Segment,
    include_markers: bool,
) -> Result<TokenSpan> {
    if tt.text != rp.text {
        return Err(Error::SpanMissing(which.as_str()));
    }
    let span = rp.segment_char_span(which, include_markers)?;
    tt.align_span(span.start, span.end)
}
