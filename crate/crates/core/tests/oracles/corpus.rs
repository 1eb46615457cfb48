//! Seeded generators for synthetic traces and planning instances.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;

use kvprune::candidates::Candidates;
use kvprune::scoring::ScoreTensor;
use kvprune::trace::{default_marker_set, ReasoningTrace, Segmentation, Step};

const FILLER: &[&str] = &[
    "x", "equals", "two", "add", "the", "sum", "answer", "is", "4", "recheck", "hmm", "wait", "so", "then",
    "Sonow", "Soap", "Thenceforth", "Waiting", "Nowhere", "Maybelline", "Okayish", "Firstly", "Goodness",
    "Thusly", "However", "Let", "me", "think", "see", "correct", "That", "right", "Alternatively2", "I",
];

const GLUE: &[&str] = &[" ", " ", " ", ", ", ". ", "! ", "? ", "\n", ": ", " (", ") ", "", "-", "'", "\u{2019}"];

/// Reasoning text mixing every marker phrase with filler, glue and near-miss words.
pub fn reasoning_text(rng: &mut impl Rng, pieces: usize) -> String {
    let markers = default_marker_set();
    let phrases = markers.phrases();
    let mut out = String::new();
    for _ in 0..pieces {
        out.push_str(GLUE.choose(rng).unwrap());
        if rng.gen_bool(0.4) {
            out.push_str(&phrases[rng.gen_range(0..phrases.len())]);
        } else {
            out.push_str(FILLER.choose(rng).unwrap());
        }
    }
    out
}

/// Cut `text` into tokens of 1..=6 chars at random char boundaries, with the
/// occasional empty token.
pub fn chunk(rng: &mut impl Rng, text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if rng.gen_bool(0.03) {
            out.push(String::new());
        }
        let n = rng.gen_range(1..=6).min(chars.len() - i);
        out.push(chars[i..i + n].iter().collect());
        i += n;
    }
    out
}

pub fn synthetic_trace(rng: &mut impl Rng) -> ReasoningTrace {
    let prompt_text = format!("Question: {} ", FILLER.choose(rng).unwrap());
    let prompt = chunk(rng, &prompt_text);
    let pieces = rng.gen_range(1..30);
    let text = reasoning_text(rng, pieces);
    let mut reasoning = chunk(rng, &text);
    if reasoning.is_empty() {
        reasoning.push("x".into());
    }
    let prompt_len = prompt.len();
    ReasoningTrace::new(
        prompt_len,
        prompt.into_iter().chain(reasoning).enumerate().map(|(i, t)| (i as u32, t)),
    )
    .unwrap()
}

/// A random hierarchical-planning instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub prompt_len: usize,
    pub len: usize,
    pub seg: Segmentation,
    pub cands: Candidates,
    pub scores: ScoreTensor,
    pub k: usize,
}

pub fn instance(rng: &mut impl Rng) -> Instance {
    let len = rng.gen_range(1..=20);
    let prompt_len = rng.gen_range(0..len.min(4));
    let steps_n = rng.gen_range(1..=4).min(len - prompt_len);
    let mut cuts: Vec<usize> = (prompt_len + 1..len).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(steps_n - 1).collect();
    cuts.sort_unstable();
    let mut bounds = vec![prompt_len];
    bounds.extend(cuts);
    bounds.push(len);
    let seg = Segmentation {
        steps: bounds
            .windows(2)
            .map(|w| Step { start: w[0], end: w[1], marker: None })
            .collect(),
        trace_len: len,
    };
    let (nl, nh) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let live_p = rng.gen_range(0.5..=1.0);
    let cands = Candidates::from_fn(nl, nh, prompt_len..len, |_, _, _| rng.gen_bool(live_p));
    let tied = rng.gen_bool(0.5);
    let mut scores = ScoreTensor::new(nl, nh);
    for l in 0..nl {
        for h in 0..nh {
            for &t in cands.get(l, h) {
                let v = if tied {
                    f64::from(rng.gen_range(0..4u8)) * 0.125
                } else {
                    rng.gen::<f64>()
                };
                scores.insert(l, h, t, v);
            }
        }
    }
    Instance {
        prompt_len,
        len,
        seg,
        cands,
        scores,
        k: rng.gen_range(0..=25),
    }
}
