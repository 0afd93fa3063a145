//! Interleaved think/answer traces and their tagged text format.
//!
//! A trace is written as a strict alternation of tag blocks:
//!
//! ```text
//! <think>...</think><answer>...</answer><think>...</think><answer>...</answer>
//! ```
//!
//! Only ASCII whitespace may appear between blocks. The parser never fails:
//! malformed text produces a [`ParsedOutcome`] with `format_ok == false` and at
//! least one [`Diagnostic`].

use serde::{Deserialize, Serialize};
use std::fmt;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("segment text contains a tag marker: {0:?}")]
    TagInText(String),
    #[error("trace must contain at least one think/answer pair")]
    Empty,
    #[error("segment {index} should be {expected:?}")]
    Alternation { index: usize, expected: SegmentKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    Think,
    Answer,
}

impl SegmentKind {
    fn open_tag(self) -> &'static str {
        match self {
            SegmentKind::Think => THINK_OPEN,
            SegmentKind::Answer => ANSWER_OPEN,
        }
    }

    fn close_tag(self) -> &'static str {
        match self {
            SegmentKind::Think => THINK_CLOSE,
            SegmentKind::Answer => ANSWER_CLOSE,
        }
    }

    fn other(self) -> Self {
        match self {
            SegmentKind::Think => SegmentKind::Answer,
            SegmentKind::Answer => SegmentKind::Think,
        }
    }
}

/// How a trace is organised. Not part of the wire format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceMode {
    CloseEnded,
    OpenEnded,
    Binary,
}

/// One think or answer fragment. Text is stored trimmed and never contains a
/// tag marker.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Segment {
    kind: SegmentKind,
    text: String,
}

impl Segment {
    pub fn new(kind: SegmentKind, text: &str) -> Result<Self, TraceError> {
        if TAGS.iter().any(|t| text.contains(t)) {
            return Err(TraceError::TagInText(text.to_string()));
        }
        Ok(Segment {
            kind,
            text: text.trim().to_string(),
        })
    }

    pub fn think(text: &str) -> Result<Self, TraceError> {
        Segment::new(SegmentKind::Think, text)
    }

    pub fn answer(text: &str) -> Result<Self, TraceError> {
        Segment::new(SegmentKind::Answer, text)
    }

    pub fn kind(&self) -> SegmentKind {
        self.kind
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// A borrowed think/answer pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRef<'a> {
    pub think: &'a str,
    pub answer: &'a str,
}

/// Alternating think/answer segments, starting with think and ending with answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InterleavedTrace {
    segments: Vec<Segment>,
    mode: Option<TraceMode>,
}

impl InterleavedTrace {
    pub fn new(segments: Vec<Segment>, mode: Option<TraceMode>) -> Result<Self, TraceError> {
        if segments.len() < 2 {
            return Err(TraceError::Empty);
        }
        let mut expected = SegmentKind::Think;
        for (index, seg) in segments.iter().enumerate() {
            if seg.kind != expected {
                return Err(TraceError::Alternation { index, expected });
            }
            expected = expected.other();
        }
        if expected != SegmentKind::Think {
            return Err(TraceError::Alternation {
                index: segments.len(),
                expected: SegmentKind::Answer,
            });
        }
        Ok(InterleavedTrace { segments, mode })
    }

    /// Builds a trace from (think, answer) text pairs.
    pub fn from_pairs<S: AsRef<str>>(
        pairs: &[(S, S)],
        mode: Option<TraceMode>,
    ) -> Result<Self, TraceError> {
        let mut segments = Vec::with_capacity(pairs.len() * 2);
        for (t, a) in pairs {
            segments.push(Segment::think(t.as_ref())?);
            segments.push(Segment::answer(a.as_ref())?);
        }
        InterleavedTrace::new(segments, mode)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn mode(&self) -> Option<TraceMode> {
        self.mode
    }

    pub fn with_mode(mut self, mode: TraceMode) -> Self {
        self.mode = Some(mode);
        self
    }

    pub fn num_pairs(&self) -> usize {
        self.segments.len() / 2
    }

    pub fn pairs(&self) -> impl Iterator<Item = StepRef<'_>> + '_ {
        self.segments.chunks_exact(2).map(|c| StepRef {
            think: &c[0].text,
            answer: &c[1].text,
        })
    }

    /// Splits into the intermediate pairs and the final pair.
    pub fn split_intermediate_final(&self) -> (Vec<StepRef<'_>>, StepRef<'_>) {
        let mut pairs: Vec<StepRef<'_>> = self.pairs().collect();
        // new() guarantees at least one pair
        let last = pairs.pop().expect("non-empty trace");
        (pairs, last)
    }

    pub fn final_answer(&self) -> &str {
        &self.segments[self.segments.len() - 1].text
    }
}

/// Tagged text form with no padding between blocks.
pub fn serialize_trace(trace: &InterleavedTrace) -> String {
    let mut out = String::new();
    for seg in &trace.segments {
        out.push_str(seg.kind.open_tag());
        out.push_str(&seg.text);
        out.push_str(seg.kind.close_tag());
    }
    out
}

impl fmt::Display for InterleavedTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_trace(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutcome {
    pub trace: Option<InterleavedTrace>,
    pub format_ok: bool,
    pub diagnostics: Vec<Diagnostic>,
    /// Inner text of the last `<answer>` block when the raw text ends with a
    /// closed answer tag, whether or not the rest of the text is well formed.
    pub terminal_answer: Option<String>,
}

fn tag_at(raw: &str, pos: usize) -> Option<&'static str> {
    TAGS.iter().copied().find(|t| raw[pos..].starts_with(t))
}

/// Position and text of the next tag at or after `from`.
fn next_tag(raw: &str, from: usize) -> Option<(usize, &'static str)> {
    let bytes = raw.as_bytes();
    let mut i = from;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            if let Some(t) = tag_at(raw, i) {
                return Some((i, t));
            }
        }
        i += 1;
    }
    None
}

fn kind_of_open(tag: &str) -> Option<SegmentKind> {
    match tag {
        THINK_OPEN => Some(SegmentKind::Think),
        ANSWER_OPEN => Some(SegmentKind::Answer),
        _ => None,
    }
}

fn terminal_answer(raw: &str) -> Option<String> {
    let trimmed = raw.trim_end_matches(|c: char| c.is_ascii_whitespace());
    let body = trimmed.strip_suffix(ANSWER_CLOSE)?;
    let start = body.rfind(ANSWER_OPEN)? + ANSWER_OPEN.len();
    let inner = &body[start..];
    if TAGS.iter().any(|t| inner.contains(t)) {
        return None;
    }
    Some(inner.trim().to_string())
}

/// Parses tagged trace text. Total over all UTF-8 input.
pub fn parse_trace(raw: &str) -> ParsedOutcome {
    let mut diagnostics = Vec::new();
    let mut segments = Vec::new();
    let mut expected = SegmentKind::Think;
    let bytes = raw.as_bytes();
    let mut pos = 0;

    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            break;
        }
        let Some(tag) = tag_at(raw, pos) else {
            // stray text: report it and resume at the next tag
            let resume = next_tag(raw, pos).map(|(p, _)| p);
            diagnostics.push(Diagnostic {
                offset: pos,
                message: "text outside tag blocks".into(),
            });
            match resume {
                Some(p) => {
                    pos = p;
                    continue;
                }
                None => break,
            }
        };
        let Some(kind) = kind_of_open(tag) else {
            diagnostics.push(Diagnostic {
                offset: pos,
                message: format!("unexpected closing tag {tag}"),
            });
            pos += tag.len();
            continue;
        };
        if kind != expected {
            diagnostics.push(Diagnostic {
                offset: pos,
                message: format!("expected {} but found {}", expected.open_tag(), tag),
            });
        }
        let body_start = pos + tag.len();
        match next_tag(raw, body_start) {
            None => {
                diagnostics.push(Diagnostic {
                    offset: pos,
                    message: format!("unclosed {tag}"),
                });
                break;
            }
            Some((close_pos, close)) if close == kind.close_tag() => {
                // Segment::new cannot fail here: the body holds no tag
                if let Ok(seg) = Segment::new(kind, &raw[body_start..close_pos]) {
                    segments.push(seg);
                }
                expected = kind.other();
                pos = close_pos + close.len();
            }
            Some((other_pos, other)) => {
                diagnostics.push(Diagnostic {
                    offset: other_pos,
                    message: format!("{other} inside {tag} block"),
                });
                pos = other_pos;
            }
        }
    }

    if diagnostics.is_empty() {
        if segments.is_empty() {
            diagnostics.push(Diagnostic {
                offset: 0,
                message: "no think/answer pair".into(),
            });
        } else if expected == SegmentKind::Answer {
            diagnostics.push(Diagnostic {
                offset: raw.len(),
                message: "sequence ends with a think block".into(),
            });
        }
    }

    let trace = if diagnostics.is_empty() {
        InterleavedTrace::new(segments, None).ok()
    } else {
        None
    };
    let format_ok = trace.is_some();
    if !format_ok && diagnostics.is_empty() {
        diagnostics.push(Diagnostic {
            offset: 0,
            message: "trace invariants violated".into(),
        });
    }
    ParsedOutcome {
        trace,
        format_ok,
        diagnostics,
        terminal_answer: terminal_answer(raw),
    }
}
