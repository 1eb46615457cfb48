//! Tokenized reasoning traces and marker-phrase segmentation.
//!
//! A trace is a prompt followed by a reasoning region. The reasoning region is
//! split into steps wherever a marker phrase (e.g. "Wait", "So") begins at a
//! word boundary. Offsets handed to [`ReasoningTrace::token_of_char`] are byte
//! offsets into the UTF-8 text.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("EmptyReasoningRegion: reasoning starts at token {reason_start} of {len}")]
    EmptyReasoningRegion { reason_start: usize, len: usize },
    #[error("OffsetOutOfRange: offset {offset} is not below text length {len}")]
    OffsetOutOfRange { offset: usize, len: usize },
    #[error("prompt_len {prompt_len} exceeds token count {len}")]
    PromptTooLong { prompt_len: usize, len: usize },
    #[error("marker set is empty")]
    EmptyMarkerSet,
    #[error("marker phrase #{0} is empty")]
    EmptyMarker(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub index: usize,
    pub id: u32,
    pub text: String,
}

/// A prompt plus a generated reasoning region, with byte offsets of every token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningTrace {
    tokens: Vec<Token>,
    prompt_len: usize,
    text: String,
    // offsets[i] is the byte start of token i; offsets[len] == text.len()
    offsets: Vec<usize>,
}

impl ReasoningTrace {
    pub fn new<I, S>(prompt_len: usize, tokens: I) -> Result<Self, TraceError>
    where
        I: IntoIterator<Item = (u32, S)>,
        S: Into<String>,
    {
        let tokens: Vec<Token> = tokens
            .into_iter()
            .enumerate()
            .map(|(index, (id, text))| Token {
                index,
                id,
                text: text.into(),
            })
            .collect();
        if prompt_len > tokens.len() {
            return Err(TraceError::PromptTooLong {
                prompt_len,
                len: tokens.len(),
            });
        }
        let mut text = String::new();
        let mut offsets = Vec::with_capacity(tokens.len() + 1);
        for tok in &tokens {
            offsets.push(text.len());
            text.push_str(&tok.text);
        }
        offsets.push(text.len());
        Ok(Self {
            tokens,
            prompt_len,
            text,
            offsets,
        })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn reason_start(&self) -> usize {
        self.prompt_len
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Byte offset at which token `index` starts (`index == len()` gives the text length).
    pub fn offset_of(&self, index: usize) -> usize {
        self.offsets[index]
    }

    pub fn reasoning_text(&self) -> &str {
        &self.text[self.offsets[self.prompt_len]..]
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.tokens.iter().map(|t| t.id)
    }

    /// Index of the token whose text span contains byte `offset`.
    pub fn token_of_char(&self, offset: usize) -> Result<usize, TraceError> {
        if offset >= self.text.len() {
            return Err(TraceError::OffsetOutOfRange {
                offset,
                len: self.text.len(),
            });
        }
        // last token starting at or before `offset`; empty tokens are skipped
        // because partition_point lands past all equal starts
        let after = self.offsets[..self.tokens.len()].partition_point(|&o| o <= offset);
        Ok(after - 1)
    }
}

/// Ordered, de-duplicated set of marker phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerSet {
    phrases: Vec<String>,
    // indices into `phrases`, longest first (stable for equal lengths)
    by_len: Vec<usize>,
}

const DEFAULT_MARKERS: [&str; 32] = [
    "Wait",
    "Alternatively",
    "Another angle",
    "Another approach",
    "But wait",
    "Hold on",
    "Hmm",
    "Maybe",
    "Looking back",
    "Okay",
    "Let me",
    "First",
    "Then",
    "Alright",
    "Compute",
    "Correct",
    "Good",
    "Got it",
    "I don\u{2019}t see any errors",
    "I think",
    "Let me double-check",
    "Let\u{2019}s see",
    "Now",
    "Remember",
    "Seems solid",
    "Similarly",
    "So",
    "Starting",
    "That\u{2019}s correct",
    "That seems right",
    "Therefore",
    "Thus",
];

/// The 32 reflection/sequencing phrases used to split reasoning into steps.
pub fn default_marker_set() -> MarkerSet {
    MarkerSet::new(DEFAULT_MARKERS).expect("default markers are valid")
}

impl MarkerSet {
    pub fn new<I, S>(phrases: I) -> Result<Self, TraceError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (i, p) in phrases.into_iter().enumerate() {
            let p: String = p.into();
            if p.is_empty() {
                return Err(TraceError::EmptyMarker(i));
            }
            if seen.insert(p.clone()) {
                out.push(p);
            }
        }
        if out.is_empty() {
            return Err(TraceError::EmptyMarkerSet);
        }
        let mut by_len: Vec<usize> = (0..out.len()).collect();
        by_len.sort_by(|&a, &b| out[b].len().cmp(&out[a].len()));
        Ok(Self {
            phrases: out,
            by_len,
        })
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.phrases.iter().any(|p| p == phrase)
    }

    /// Longest phrase that matches at byte `pos` of `text` and is not followed by a letter.
    fn longest_match_at<'a>(&'a self, text: &str, pos: usize) -> Option<&'a str> {
        let rest = &text[pos..];
        self.by_len
            .iter()
            .map(|&i| self.phrases[i].as_str())
            .find(|p| {
                rest.starts_with(p)
                    && !rest[p.len()..]
                        .chars()
                        .next()
                        .is_some_and(char::is_alphabetic)
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub start: usize,
    pub end: usize,
    pub marker: Option<String>,
}

impl Step {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, token: usize) -> bool {
        (self.start..self.end).contains(&token)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub steps: Vec<Step>,
    pub trace_len: usize,
}

impl Segmentation {
    /// Step id containing `token`, if it lies in the reasoning region.
    pub fn step_of(&self, token: usize) -> Option<usize> {
        let i = self.steps.partition_point(|s| s.start <= token);
        (i > 0 && self.steps[i - 1].contains(token)).then(|| i - 1)
    }

    pub fn boundaries(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.start).collect()
    }
}

fn left_boundary(text: &str, pos: usize) -> bool {
    text[..pos]
        .chars()
        .next_back()
        .is_none_or(|c| !c.is_alphanumeric())
}

/// Split the reasoning region into steps opened by marker phrases.
pub fn segment(trace: &ReasoningTrace, markers: &MarkerSet) -> Result<Segmentation, TraceError> {
    let reason_start = trace.reason_start();
    if reason_start == trace.len() {
        return Err(TraceError::EmptyReasoningRegion {
            reason_start,
            len: trace.len(),
        });
    }
    let base = trace.offset_of(reason_start);
    let text = trace.reasoning_text();

    let mut opened: Vec<(usize, Option<String>)> = vec![(reason_start, None)];
    let mut consumed = 0;
    for (pos, _) in text.char_indices() {
        if pos < consumed || !left_boundary(text, pos) {
            continue;
        }
        let Some(phrase) = markers.longest_match_at(text, pos) else {
            continue;
        };
        consumed = pos + phrase.len();
        let token = trace.token_of_char(base + pos)?;
        let last = opened.last_mut().expect("non-empty");
        if token == last.0 {
            // a marker in the step's first token labels that step
            if last.1.is_none() {
                last.1 = Some(phrase.to_string());
            }
        } else {
            opened.push((token, Some(phrase.to_string())));
        }
    }

    let ends = opened
        .iter()
        .skip(1)
        .map(|(s, _)| *s)
        .chain(std::iter::once(trace.len()));
    let steps = opened
        .iter()
        .zip(ends)
        .map(|((start, marker), end)| Step {
            start: *start,
            end,
            marker: marker.clone(),
        })
        .collect();
    Ok(Segmentation {
        steps,
        trace_len: trace.len(),
    })
}

/// On-disk trace: `{"prompt_len": int, "tokens": [{"id": int, "text": str}, ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFile {
    pub prompt_len: usize,
    pub tokens: Vec<TraceFileToken>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFileToken {
    pub id: u32,
    pub text: String,
}

impl TraceFile {
    pub fn into_trace(self) -> Result<ReasoningTrace, TraceError> {
        ReasoningTrace::new(
            self.prompt_len,
            self.tokens.into_iter().map(|t| (t.id, t.text)),
        )
    }
}

impl From<&ReasoningTrace> for TraceFile {
    fn from(trace: &ReasoningTrace) -> Self {
        Self {
            prompt_len: trace.prompt_len(),
            tokens: trace
                .tokens()
                .iter()
                .map(|t| TraceFileToken {
                    id: t.id,
                    text: t.text.clone(),
                })
                .collect(),
        }
    }
}

/// On-disk segmentation: `{"steps": [{"start", "end", "marker"}, ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationFile {
    pub steps: Vec<Step>,
}
