//! Word-level vocabulary for the tiny decoder.
//!
//! Ids 0..3 are reserved (`<eos>`, `<think>`, `</think>`). The lexicon covers
//! every marker phrase, the summarization probe and a pool of filler words;
//! ids past the lexicon are synthetic `" w<id>"` words.

use std::collections::HashMap;

use crate::engine::EngineError;
use crate::scoring::DEFAULT_THINK_END_ID;

pub const EOS_ID: u32 = 0;
pub const THINK_START_ID: u32 = 1;
pub const THINK_END_ID: u32 = DEFAULT_THINK_END_ID;

const SPECIALS: [&str; 3] = ["", "<think>", "</think>"];

const WORDS: &[&str] = &[
    // marker vocabulary
    "Wait", "Alternatively", "Another", "angle", "approach", "But", "wait", "Hold", "on", "Hmm",
    "Maybe", "Looking", "back", "Okay", "Let", "me", "First", "Then", "Alright", "Compute",
    "Correct", "Good", "Got", "it", "I", "don\u{2019}t", "see", "any", "errors", "think",
    "double-check", "Let\u{2019}s", "Now", "Remember", "Seems", "solid", "Similarly", "So",
    "Starting", "That\u{2019}s", "correct", "That", "seems", "right", "Therefore", "Thus",
    // probe vocabulary
    "Time", "is", "up", "Given", "the", "time", "spent", "and", "approaches", "tried", "should",
    "stop", "thinking", "now", "write", "summarization", "in", "one", "sentence",
    // filler
    "x", "y", "z", "n", "equals", "plus", "minus", "times", "two", "three", "four", "five",
    "number", "answer", "check", "sum", "value", "of", "we", "get", "so", "then", "a", "if",
    "find", "such", "that", "let", "try", "again", "case", "hmm", "which", "gives", "not",
    "true", "false", "square", "root", "both", "sides", "Find", "What", "Question", "Solve",
    "1", "2", "3", "4", "5", "6", "7", "8", "9", "0",
];

const PUNCT: &[&str] = &[".", ",", "?", "!", ":", ";", "=", "+", "-", "(", ")", "'ve", "\n"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    entries: Vec<String>,
    lookup: HashMap<String, u32>,
    max_len: usize,
}

fn lexicon() -> Vec<String> {
    let mut out: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    for w in WORDS {
        out.push((*w).to_string());
        out.push(format!(" {w}"));
    }
    out.extend(PUNCT.iter().map(|p| p.to_string()));
    out
}

impl Vocab {
    /// Number of ids taken by the fixed lexicon.
    pub fn base_size() -> usize {
        lexicon().len()
    }

    pub fn new(vocab_size: usize) -> Result<Self, EngineError> {
        let mut entries = lexicon();
        if vocab_size < entries.len() {
            return Err(EngineError::InvalidConfig(format!(
                "vocab_size {vocab_size} is smaller than the {} lexicon entries",
                entries.len()
            )));
        }
        for id in entries.len()..vocab_size {
            entries.push(format!(" w{id}"));
        }
        let mut lookup = HashMap::new();
        for (id, e) in entries.iter().enumerate() {
            if !e.is_empty() {
                lookup.entry(e.clone()).or_insert(id as u32);
            }
        }
        let max_len = entries.iter().map(String::len).max().unwrap_or(0);
        Ok(Self {
            entries,
            lookup,
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn text(&self, id: u32) -> &str {
        &self.entries[id as usize]
    }

    pub fn id(&self, text: &str) -> Option<u32> {
        self.lookup.get(text).copied()
    }

    /// Greedy longest-match tokenization.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>, EngineError> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            let mut found = None;
            let mut len = self.max_len.min(rest.len());
            while len > 0 {
                if rest.is_char_boundary(len) {
                    if let Some(&id) = self.lookup.get(&rest[..len]) {
                        found = Some((id, len));
                        break;
                    }
                }
                len -= 1;
            }
            let (id, len) = found.ok_or_else(|| EngineError::UnknownText(rest.chars().take(16).collect()))?;
            out.push(id);
            pos += len;
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.text(id)).collect()
    }
}
