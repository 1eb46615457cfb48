//! Per-(layer, head) KV storage with eviction bookkeeping.
//!
//! Token indices double as position ids: evicting a token never shifts the
//! positions of the survivors. Probe tokens are appended transiently after the
//! committed sequence and truncated away again.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::Candidates;
use crate::policy::{plan_for, EvictionBudget, EvictionPlan, PlanOutcome, PolicyError, PolicyInputs, PolicyKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CacheError {
    #[error("ProtectedTokenEviction: token {token} at layer {layer} head {head} is protected")]
    ProtectedTokenEviction { layer: usize, head: usize, token: usize },
    #[error("UnknownToken: token {token} is not live at layer {layer} head {head}")]
    UnknownToken { layer: usize, head: usize, token: usize },
    #[error("BudgetInfeasible: {0}")]
    BudgetInfeasible(String),
    #[error("invalid cache budget: {0}")]
    InvalidBudget(String),
    #[error("plan shape {plan_layers}x{plan_heads} does not match cache {layers}x{heads}")]
    ShapeMismatch {
        plan_layers: usize,
        plan_heads: usize,
        layers: usize,
        heads: usize,
    },
    #[error("out-of-order append: token {token} after {last} at layer {layer} head {head}")]
    OutOfOrder { layer: usize, head: usize, token: usize, last: usize },
    #[error("overflow of {needed} tokens cannot be met: only {available} candidates at layer {layer} head {head}")]
    OverflowUnresolved { layer: usize, head: usize, needed: usize, available: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProtectedRegions {
    pub prompt_len: usize,
    pub recent_window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    Periodic,
    Ratio,
}

/// Cap on live generated slots per (layer, head); the prompt is not counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheBudget {
    pub mode: BudgetMode,
    pub ratio: f64,
    pub max_slots: usize,
}

impl CacheBudget {
    pub fn unbounded() -> Self {
        Self {
            mode: BudgetMode::Periodic,
            ratio: 1.0,
            max_slots: usize::MAX,
        }
    }

    /// `max_slots = floor(ratio * full_avg_len)`, at least one slot.
    ///
    /// `full_avg_len` is the full-KV run's average generated-token cache length.
    pub fn from_ratio(ratio: f64, full_avg_len: f64) -> Result<Self, CacheError> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(CacheError::InvalidBudget(format!("ratio {ratio} is outside (0, 1]")));
        }
        if !full_avg_len.is_finite() || full_avg_len < 0.0 {
            return Err(CacheError::InvalidBudget(format!("full-KV length {full_avg_len} is invalid")));
        }
        let max_slots = ((ratio * full_avg_len).floor() as usize).max(1);
        Ok(Self {
            mode: BudgetMode::Ratio,
            ratio,
            max_slots,
        })
    }

    pub fn with_max_slots(max_slots: usize) -> Self {
        Self {
            mode: BudgetMode::Ratio,
            ratio: 1.0,
            max_slots,
        }
    }

    pub fn recent_window(&self) -> usize {
        match self.mode {
            BudgetMode::Ratio => self.max_slots / 2,
            BudgetMode::Periodic => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct HeadCache {
    tokens: Vec<usize>,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl HeadCache {
    fn new() -> Self {
        Self {
            tokens: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    fn position(&self, token: usize) -> Option<usize> {
        self.tokens.binary_search(&token).ok()
    }

    fn retain(&mut self, head_dim: usize, mut keep: impl FnMut(usize) -> bool) {
        let mut w = 0;
        for r in 0..self.tokens.len() {
            let t = self.tokens[r];
            if keep(t) {
                if w != r {
                    self.tokens[w] = t;
                    self.keys.copy_within(r * head_dim..(r + 1) * head_dim, w * head_dim);
                    self.values.copy_within(r * head_dim..(r + 1) * head_dim, w * head_dim);
                }
                w += 1;
            }
        }
        self.tokens.truncate(w);
        self.keys.truncate(w * head_dim);
        self.values.truncate(w * head_dim);
    }
}

/// Borrowed contiguous view of one (layer, head).
#[derive(Debug, Clone, Copy)]
pub struct HeadView<'a> {
    pub tokens: &'a [usize],
    pub keys: &'a [f64],
    pub values: &'a [f64],
    pub head_dim: usize,
}

impl HeadView<'_> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.head_dim..(i + 1) * self.head_dim]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.head_dim..(i + 1) * self.head_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheState {
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
    protected: ProtectedRegions,
    heads: Vec<HeadCache>,
    // next position of the committed sequence
    committed: usize,
    next: usize,
    probe_start: Option<usize>,
    evicted: Vec<BTreeSet<usize>>,
    appended: Vec<usize>,
    peak: usize,
}

impl KvCacheState {
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize, protected: ProtectedRegions) -> Self {
        let n = num_layers * num_heads;
        Self {
            num_layers,
            num_heads,
            head_dim,
            protected,
            heads: vec![HeadCache::new(); n],
            committed: 0,
            next: 0,
            probe_start: None,
            evicted: vec![BTreeSet::new(); n],
            appended: vec![0; n],
            peak: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn protected(&self) -> ProtectedRegions {
        self.protected
    }

    pub fn set_recent_window(&mut self, recent_window: usize) {
        self.protected.recent_window = recent_window;
    }

    pub fn prompt_len(&self) -> usize {
        self.protected.prompt_len
    }

    /// Length of the committed (non-probe) sequence.
    pub fn committed_len(&self) -> usize {
        self.committed
    }

    /// Position the next appended token will take.
    pub fn next_position(&self) -> usize {
        self.next
    }

    pub fn probe_start(&self) -> Option<usize> {
        self.probe_start
    }

    fn index(&self, layer: usize, head: usize) -> usize {
        layer * self.num_heads + head
    }

    pub fn head(&self, layer: usize, head: usize) -> HeadView<'_> {
        let hc = &self.heads[self.index(layer, head)];
        HeadView {
            tokens: &hc.tokens,
            keys: &hc.keys,
            values: &hc.values,
            head_dim: self.head_dim,
        }
    }

    pub fn live_tokens(&self, layer: usize, head: usize) -> &[usize] {
        &self.heads[self.index(layer, head)].tokens
    }

    pub fn is_live(&self, layer: usize, head: usize, token: usize) -> bool {
        self.heads[self.index(layer, head)].position(token).is_some()
    }

    pub fn live_count(&self, layer: usize, head: usize) -> usize {
        self.heads[self.index(layer, head)].tokens.len()
    }

    /// Live committed tokens past the prompt.
    pub fn generated_live(&self, layer: usize, head: usize) -> usize {
        let toks = &self.heads[self.index(layer, head)].tokens;
        let lo = toks.partition_point(|&t| t < self.protected.prompt_len);
        let hi = toks.partition_point(|&t| t < self.committed);
        hi - lo
    }

    pub fn evicted(&self, layer: usize, head: usize) -> &BTreeSet<usize> {
        &self.evicted[self.index(layer, head)]
    }

    pub fn evicted_total(&self) -> usize {
        self.evicted.iter().map(BTreeSet::len).sum()
    }

    /// Store the key/value of `token` at `(layer, head)`.
    ///
    /// Tokens must arrive in increasing order, and an evicted token cannot return.
    pub fn push(&mut self, layer: usize, head: usize, token: usize, key: &[f64], value: &[f64]) -> Result<(), CacheError> {
        assert_eq!(key.len(), self.head_dim);
        assert_eq!(value.len(), self.head_dim);
        let i = self.index(layer, head);
        let hc = &mut self.heads[i];
        if let Some(&last) = hc.tokens.last() {
            if token <= last {
                return Err(CacheError::OutOfOrder { layer, head, token, last });
            }
        }
        if self.evicted[i].contains(&token) {
            return Err(CacheError::OutOfOrder { layer, head, token, last: token });
        }
        hc.tokens.push(token);
        hc.keys.extend_from_slice(key);
        hc.values.extend_from_slice(value);
        if self.probe_start.is_none() {
            self.appended[i] += 1;
        }
        Ok(())
    }

    /// Mark `token` as fully appended at every (layer, head).
    pub fn commit(&mut self, token: usize) {
        self.next = self.next.max(token + 1);
        if self.probe_start.is_none() {
            self.committed = self.committed.max(token + 1);
            let max_live = (0..self.heads.len())
                .map(|i| self.heads[i].tokens.len())
                .max()
                .unwrap_or(0);
            self.peak = self.peak.max(max_live);
        }
    }

    pub fn begin_probe(&mut self) {
        self.probe_start = Some(self.committed);
    }

    /// Drop every probe token; returns how many entries were removed.
    pub fn end_probe(&mut self) -> usize {
        let Some(start) = self.probe_start.take() else {
            return 0;
        };
        self.next = start;
        let head_dim = self.head_dim;
        let mut removed = 0;
        for hc in &mut self.heads {
            let before = hc.tokens.len();
            hc.retain(head_dim, |t| t < start);
            removed += before - hc.tokens.len();
        }
        removed
    }

    /// First position that is still protected as part of the recent window.
    fn recent_start(&self, recent_window: usize) -> usize {
        self.committed
            .saturating_sub(recent_window)
            .max(self.protected.prompt_len)
    }

    /// Evictable tokens: live, past the prompt, before the recent window and before `region_end`.
    pub fn candidates(&self, region_end: Option<usize>) -> Candidates {
        self.candidates_with_window(region_end, self.protected.recent_window)
    }

    pub fn candidates_with_window(&self, region_end: Option<usize>, recent_window: usize) -> Candidates {
        let hi = self
            .recent_start(recent_window)
            .min(region_end.unwrap_or(usize::MAX));
        let lo = self.protected.prompt_len;
        let sets = self
            .heads
            .iter()
            .map(|hc| {
                let a = hc.tokens.partition_point(|&t| t < lo);
                let b = hc.tokens.partition_point(|&t| t < hi).max(a);
                hc.tokens[a..b].iter().copied().collect()
            })
            .collect();
        Candidates::from_sets(self.num_layers, self.num_heads, sets)
    }

    /// Remove every planned token. Validates the whole plan before touching anything.
    pub fn apply_plan(&mut self, plan: &EvictionPlan) -> Result<(), CacheError> {
        if plan.num_layers() != self.num_layers || plan.num_heads() != self.num_heads {
            return Err(CacheError::ShapeMismatch {
                plan_layers: plan.num_layers(),
                plan_heads: plan.num_heads(),
                layers: self.num_layers,
                heads: self.num_heads,
            });
        }
        let recent = self.recent_start(self.protected.recent_window);
        for (layer, head, set) in plan.iter() {
            for &token in set {
                if token < self.protected.prompt_len || token >= recent {
                    return Err(CacheError::ProtectedTokenEviction { layer, head, token });
                }
                if !self.is_live(layer, head, token) {
                    return Err(CacheError::UnknownToken { layer, head, token });
                }
            }
        }
        let head_dim = self.head_dim;
        for (layer, head, set) in plan.iter() {
            if set.is_empty() {
                continue;
            }
            let i = layer * self.num_heads + head;
            self.heads[i].retain(head_dim, |t| !set.contains(&t));
            self.evicted[i].extend(set.iter().copied());
        }
        Ok(())
    }

    /// Tokens that must go at each (layer, head) before one more token is appended.
    pub fn overflow(&self, budget: &CacheBudget) -> usize {
        (0..self.num_layers)
            .flat_map(|l| (0..self.num_heads).map(move |h| (l, h)))
            .map(|(l, h)| (self.generated_live(l, h) + 1).saturating_sub(budget.max_slots))
            .max()
            .unwrap_or(0)
    }

    /// Keep the cap ahead of an append.
    ///
    /// If appending one more token would push any (layer, head) past
    /// `budget.max_slots` generated slots, `policy` evicts exactly the overflow
    /// from tokens older than the recent window, so the window's tokens and the
    /// incoming one all survive.
    pub fn enforce_budget(
        &mut self,
        budget: &CacheBudget,
        policy: PolicyKind,
        inputs: PolicyInputs<'_>,
        region_end: Option<usize>,
    ) -> Result<Option<PlanOutcome>, CacheError> {
        let recent_window = self.protected.recent_window;
        if budget.max_slots <= recent_window {
            return Err(CacheError::BudgetInfeasible(format!(
                "max_slots {} cannot hold a recent window of {}",
                budget.max_slots, recent_window
            )));
        }
        let overflow = self.overflow(budget);
        if overflow == 0 {
            return Ok(None);
        }
        let candidates = self.candidates_with_window(region_end, recent_window);
        let outcome = plan_for(policy, inputs, &candidates, EvictionBudget::new(overflow))?;
        for l in 0..self.num_layers {
            for h in 0..self.num_heads {
                let needed = (self.generated_live(l, h) + 1).saturating_sub(budget.max_slots);
                let got = outcome.plan.head(l, h).len();
                if got < needed {
                    return Err(CacheError::OverflowUnresolved {
                        layer: l,
                        head: h,
                        needed,
                        available: candidates.get(l, h).len(),
                    });
                }
            }
        }
        self.apply_plan(&outcome.plan)?;
        Ok(Some(outcome))
    }

    pub fn stats(&self) -> CacheStats {
        let live: Vec<usize> = self.heads.iter().map(|h| h.tokens.len()).collect();
        let average = if live.is_empty() {
            0.0
        } else {
            live.iter().sum::<usize>() as f64 / live.len() as f64
        };
        let current_max = live.iter().copied().max().unwrap_or(0);
        CacheStats {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            live,
            average,
            peak: self.peak.max(current_max),
            evicted_total: self.evicted_total(),
            appended: self.appended.iter().sum(),
        }
    }

    pub fn compact(&self) -> CompactCache {
        let heads = self
            .heads
            .iter()
            .map(|hc| CompactHead {
                tokens: hc.tokens.clone(),
                keys: hc.keys.clone(),
                values: hc.values.clone(),
            })
            .collect::<Vec<_>>();
        let remap = heads
            .iter()
            .map(|h| h.tokens.iter().enumerate().map(|(new, &old)| (old, new)).collect())
            .collect();
        CompactCache {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            heads,
            remap,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactHead {
    pub tokens: Vec<usize>,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

/// Dense per-(layer, head) arrays of the live entries plus old-to-new slot maps.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactCache {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub heads: Vec<CompactHead>,
    pub remap: Vec<BTreeMap<usize, usize>>,
}

impl CompactCache {
    pub fn head(&self, layer: usize, head: usize) -> HeadView<'_> {
        let h = &self.heads[layer * self.num_heads + head];
        HeadView {
            tokens: &h.tokens,
            keys: &h.keys,
            values: &h.values,
            head_dim: self.head_dim,
        }
    }

    pub fn slot_of(&self, layer: usize, head: usize, token: usize) -> Option<usize> {
        self.remap[layer * self.num_heads + head].get(&token).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Live entries per (layer, head), row-major.
    pub live: Vec<usize>,
    pub average: f64,
    pub peak: usize,
    pub evicted_total: usize,
    pub appended: usize,
}

impl CacheStats {
    pub fn live_at(&self, layer: usize, head: usize) -> usize {
        self.live[layer * self.num_heads + head]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLive {
    pub layer: usize,
    pub live: Vec<usize>,
}

/// `{"avg_kv": float, "peak_kv": int, "evicted_total": int, "per_layer": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub avg_kv: f64,
    pub peak_kv: usize,
    pub evicted_total: usize,
    pub per_layer: Vec<LayerLive>,
}

impl StatsReport {
    pub fn from_stats(stats: &CacheStats) -> Self {
        Self::with_run_averages(stats, stats.average, stats.peak)
    }

    /// Report with run-level average/peak and the given final per-head occupancy.
    pub fn with_run_averages(stats: &CacheStats, avg_kv: f64, peak_kv: usize) -> Self {
        Self {
            avg_kv,
            peak_kv,
            evicted_total: stats.evicted_total,
            per_layer: (0..stats.num_layers)
                .map(|layer| LayerLive {
                    layer,
                    live: (0..stats.num_heads).map(|h| stats.live_at(layer, h)).collect(),
                })
                .collect(),
        }
    }
}
