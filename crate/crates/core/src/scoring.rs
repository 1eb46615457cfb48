//! Token importance from the end-of-thinking probe and per-step aggregation.
//!
//! The score of a reasoning token at (layer, head) is the attention weight it
//! receives from the probe's final `</think>` token. A step's score at a
//! layer is the mean of those weights over every head and every live token of
//! the step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::candidates::Candidates;
use crate::trace::{ReasoningTrace, Segmentation};

/// Reserved vocabulary id of `</think>` in the built-in tiny vocabulary.
pub const DEFAULT_THINK_END_ID: u32 = 2;

/// Tolerance on `|sum(row) - 1|` for attention rows.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

pub const DEFAULT_PROBE_TEXT: &str = "Time is up. Given the time I've spent and the approaches I've tried, I should stop thinking and now write summarization in one sentence.</think>";

pub const DEFAULT_INTERVAL: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoringError {
    #[error("MissingHead: no attention row for layer {layer} head {head}")]
    MissingHead { layer: usize, head: usize },
    #[error("NonNormalizedRow: layer {layer} head {head} sums to {sum}")]
    NonNormalizedRow { layer: usize, head: usize, sum: f64 },
    #[error("attention row for layer {layer} head {head} has a negative or non-finite weight")]
    InvalidWeight { layer: usize, head: usize },
    #[error("probe text is empty")]
    EmptyProbe,
    #[error("probe interval must be at least 1")]
    ZeroInterval,
    #[error("probe tokenization does not end with the end-of-thinking id {expected}")]
    ProbeNotTerminated { expected: u32 },
    #[error("dump mismatch: {0}")]
    DumpMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub prompt_text: String,
    pub think_end_token_id: u32,
    pub interval_p: usize,
}

impl ProbeConfig {
    pub fn new(
        prompt_text: impl Into<String>,
        think_end_token_id: u32,
        interval_p: usize,
    ) -> Result<Self, ScoringError> {
        let prompt_text = prompt_text.into();
        if prompt_text.is_empty() {
            return Err(ScoringError::EmptyProbe);
        }
        if interval_p == 0 {
            return Err(ScoringError::ZeroInterval);
        }
        Ok(Self {
            prompt_text,
            think_end_token_id,
            interval_p,
        })
    }

    pub fn with_interval(mut self, interval_p: usize) -> Result<Self, ScoringError> {
        if interval_p == 0 {
            return Err(ScoringError::ZeroInterval);
        }
        self.interval_p = interval_p;
        Ok(self)
    }

    /// Checks that a tokenization of `prompt_text` ends with the end-of-thinking id.
    pub fn check_tokens(&self, ids: &[u32]) -> Result<(), ScoringError> {
        match ids.last() {
            Some(&last) if last == self.think_end_token_id => Ok(()),
            _ => Err(ScoringError::ProbeNotTerminated {
                expected: self.think_end_token_id,
            }),
        }
    }
}

pub fn default_probe() -> ProbeConfig {
    ProbeConfig::new(DEFAULT_PROBE_TEXT, DEFAULT_THINK_END_ID, DEFAULT_INTERVAL)
        .expect("default probe is valid")
}

/// Attention weights of one query at `(layer, head)`, keyed by token index.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    pub layer: usize,
    pub head: usize,
    /// `(token index, weight)` pairs, ascending by index.
    pub weights: Vec<(usize, f64)>,
}

impl AttentionRow {
    pub fn sum(&self) -> f64 {
        self.weights.iter().map(|&(_, w)| w).sum()
    }

    fn validate(&self) -> Result<(), ScoringError> {
        if self.weights.iter().any(|&(_, w)| !w.is_finite() || w < 0.0) {
            return Err(ScoringError::InvalidWeight {
                layer: self.layer,
                head: self.head,
            });
        }
        let sum = self.sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(ScoringError::NonNormalizedRow {
                layer: self.layer,
                head: self.head,
                sum,
            });
        }
        Ok(())
    }
}

/// Per-(layer, head) importance of every scored reasoning token.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    num_layers: usize,
    num_heads: usize,
    scores: Vec<BTreeMap<usize, f64>>,
}

impl ScoreTensor {
    pub fn new(num_layers: usize, num_heads: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            scores: vec![BTreeMap::new(); num_layers * num_heads],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head(&self, layer: usize, head: usize) -> &BTreeMap<usize, f64> {
        &self.scores[layer * self.num_heads + head]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut BTreeMap<usize, f64> {
        &mut self.scores[layer * self.num_heads + head]
    }

    pub fn get(&self, layer: usize, head: usize, token: usize) -> Option<f64> {
        self.head(layer, head).get(&token).copied()
    }

    pub fn insert(&mut self, layer: usize, head: usize, token: usize, score: f64) {
        self.head_mut(layer, head).insert(token, score);
    }

    /// Copy keeping only entries that are candidates at their (layer, head).
    pub fn restrict(&self, candidates: &Candidates) -> Self {
        let mut out = Self::new(self.num_layers(), self.num_heads());
        for l in 0..self.num_layers() {
            for h in 0..self.num_heads() {
                for (&t, &s) in self.head(l, h) {
                    if candidates.contains(l, h, t) {
                        out.insert(l, h, t, s);
                    }
                }
            }
        }
        out
    }

    pub fn entry_count(&self) -> usize {
        self.scores.iter().map(BTreeMap::len).sum()
    }

    /// Mean score of each token over the (layer, head) pairs that scored it.
    pub fn token_means(&self) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for head in &self.scores {
            for (&t, &s) in head {
                let e = acc.entry(t).or_insert((0.0, 0));
                e.0 += s;
                e.1 += 1;
            }
        }
        acc.into_iter()
            .map(|(t, (sum, n))| (t, sum / n as f64))
            .collect()
    }

    /// SHA-256 over `(layer, head, token, score bits)` in canonical order.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.num_layers as u64).to_le_bytes());
        hasher.update((self.num_heads as u64).to_le_bytes());
        for (i, head) in self.scores.iter().enumerate() {
            hasher.update((i as u64).to_le_bytes());
            for (&t, &s) in head {
                hasher.update((t as u64).to_le_bytes());
                hasher.update(s.to_bits().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_file(&self) -> ScoreFile {
        let mut scores = Vec::with_capacity(self.num_layers);
        for l in 0..self.num_layers {
            scores.push(
                (0..self.num_heads)
                    .map(|h| self.head(l, h).iter().map(|(&t, &s)| (t, s)).collect())
                    .collect(),
            );
        }
        ScoreFile {
            layers: self.num_layers,
            heads: self.num_heads,
            scores,
        }
    }
}

/// On-disk score tensor: `scores[layer][head]` is a list of `[token, score]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub layers: usize,
    pub heads: usize,
    pub scores: Vec<Vec<Vec<(usize, f64)>>>,
}

impl ScoreFile {
    pub fn into_tensor(self) -> Result<ScoreTensor, ScoringError> {
        if self.scores.len() != self.layers
            || self.scores.iter().any(|l| l.len() != self.heads)
        {
            return Err(ScoringError::DumpMismatch(format!(
                "scores shape does not match {} layers x {} heads",
                self.layers, self.heads
            )));
        }
        let mut out = ScoreTensor::new(self.layers, self.heads);
        for (l, layer) in self.scores.into_iter().enumerate() {
            for (h, head) in layer.into_iter().enumerate() {
                for (t, s) in head {
                    if !s.is_finite() || s < 0.0 {
                        return Err(ScoringError::InvalidWeight { layer: l, head: h });
                    }
                    out.insert(l, h, t, s);
                }
            }
        }
        Ok(out)
    }
}

/// Read per-token scores off the probe rows.
///
/// Only candidates inside the trace's reasoning region enter the tensor;
/// mass on prompt, probe and protected tokens is read but dropped.
pub fn extract_token_scores(
    rows: &[AttentionRow],
    trace: &ReasoningTrace,
    candidates: &Candidates,
) -> Result<ScoreTensor, ScoringError> {
    let (num_layers, num_heads) = (candidates.num_layers(), candidates.num_heads());
    let mut by_head: Vec<Option<&AttentionRow>> = vec![None; num_layers * num_heads];
    for row in rows {
        if row.layer < num_layers && row.head < num_heads {
            by_head[row.layer * num_heads + row.head] = Some(row);
        }
    }
    let region = trace.reason_start()..trace.len();
    let mut out = ScoreTensor::new(num_layers, num_heads);
    for l in 0..num_layers {
        for h in 0..num_heads {
            let row = by_head[l * num_heads + h].ok_or(ScoringError::MissingHead { layer: l, head: h })?;
            row.validate()?;
            let live = candidates.get(l, h);
            let head = out.head_mut(l, h);
            let mut seen = 0;
            for &(t, w) in &row.weights {
                if region.contains(&t) && live.contains(&t) {
                    head.insert(t, w);
                    seen += 1;
                }
            }
            // live candidates that the row does not mention received no mass
            if seen < live.len() {
                for &t in live.range(region.clone()) {
                    head.entry(t).or_insert(0.0);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub step: usize,
    pub value: f64,
}

/// `layers[l]` holds one entry per step with at least one scored token, in step order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScores {
    pub layers: Vec<Vec<StepScore>>,
}

impl StepScores {
    pub fn get(&self, layer: usize, step: usize) -> Option<f64> {
        self.layers[layer]
            .iter()
            .find(|s| s.step == step)
            .map(|s| s.value)
    }

    /// Entries of `layer` sorted ascending by score, ties by step id.
    pub fn ascending(&self, layer: usize) -> Vec<StepScore> {
        let mut v = self.layers[layer].clone();
        v.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.step.cmp(&b.step)));
        v
    }
}

/// Mean token score per step and layer over all heads and live tokens.
///
/// The divisor is the number of scored `(head, token)` entries in the step,
/// which equals `heads * live tokens` whenever every head holds the same
/// number of live tokens in that step.
pub fn aggregate_step_scores(scores: &ScoreTensor, seg: &Segmentation) -> StepScores {
    let layers = (0..scores.num_layers())
        .map(|l| {
            seg.steps
                .iter()
                .enumerate()
                .filter_map(|(id, step)| {
                    let mut sum = 0.0;
                    let mut count = 0usize;
                    for h in 0..scores.num_heads() {
                        for (_, &s) in scores.head(l, h).range(step.start..step.end) {
                            sum += s;
                            count += 1;
                        }
                    }
                    (count > 0).then(|| StepScore {
                        step: id,
                        value: sum / count as f64,
                    })
                })
                .collect()
        })
        .collect();
    StepScores { layers }
}

/// Attention dump exported by an external model (or the tiny engine).
///
/// `rows[layer][head]` is the dense weight vector of the probe's `</think>`
/// query over positions `0..=probe_position`. The optional `evicted` field
/// lists, per (layer, head), positions that were no longer live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub layers: usize,
    pub heads: usize,
    pub probe_position: usize,
    pub rows: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evicted: Option<Vec<Vec<Vec<usize>>>>,
}

impl AttentionDump {
    /// Shape checks against a trace. The probe must sit after every trace token.
    pub fn check(&self, trace: &ReasoningTrace) -> Result<(), ScoringError> {
        let mismatch = |m: String| Err(ScoringError::DumpMismatch(m));
        if self.layers == 0 || self.heads == 0 {
            return mismatch("layers and heads must be positive".into());
        }
        if self.rows.len() != self.layers {
            return mismatch(format!("rows has {} layers, header says {}", self.rows.len(), self.layers));
        }
        for (l, layer) in self.rows.iter().enumerate() {
            if layer.len() != self.heads {
                return mismatch(format!("layer {l} has {} heads, header says {}", layer.len(), self.heads));
            }
            for (h, row) in layer.iter().enumerate() {
                if row.len() != self.probe_position + 1 {
                    return mismatch(format!(
                        "row for layer {l} head {h} has {} weights, expected {}",
                        row.len(),
                        self.probe_position + 1
                    ));
                }
            }
        }
        if self.probe_position < trace.len() {
            return mismatch(format!(
                "probe_position {} lies inside the trace of {} tokens",
                self.probe_position,
                trace.len()
            ));
        }
        if let Some(ev) = &self.evicted {
            if ev.len() != self.layers || ev.iter().any(|l| l.len() != self.heads) {
                return mismatch("evicted shape does not match layers x heads".into());
            }
        }
        Ok(())
    }

    fn is_evicted(&self, layer: usize, head: usize, token: usize) -> bool {
        self.evicted
            .as_ref()
            .is_some_and(|e| e[layer][head].contains(&token))
    }

    pub fn attention_rows(&self) -> Vec<AttentionRow> {
        let mut out = Vec::with_capacity(self.layers * self.heads);
        for (l, layer) in self.rows.iter().enumerate() {
            for (h, row) in layer.iter().enumerate() {
                out.push(AttentionRow {
                    layer: l,
                    head: h,
                    weights: row
                        .iter()
                        .enumerate()
                        .filter(|&(t, _)| !self.is_evicted(l, h, t))
                        .map(|(t, &w)| (t, w))
                        .collect(),
                });
            }
        }
        out
    }

    /// Every non-evicted reasoning token of `trace`.
    pub fn candidates(&self, trace: &ReasoningTrace) -> Candidates {
        Candidates::from_fn(
            self.layers,
            self.heads,
            trace.reason_start()..trace.len(),
            |l, h, t| !self.is_evicted(l, h, t),
        )
    }

    pub fn scores(&self, trace: &ReasoningTrace) -> Result<ScoreTensor, ScoringError> {
        self.check(trace)?;
        extract_token_scores(&self.attention_rows(), trace, &self.candidates(trace))
    }
}
