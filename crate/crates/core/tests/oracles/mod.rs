//! Independent reference implementations used as test oracles.
//!
//! Each one is written from the rule statement, without calling the library
//! routine it checks.

#![allow(dead_code)]

pub mod corpus;

use std::collections::{BTreeMap, BTreeSet};

use kvprune::candidates::Candidates;
use kvprune::cache::KvCacheState;
use kvprune::engine::TinyModel;
use kvprune::scoring::{AttentionRow, ScoreTensor};
use kvprune::trace::{ReasoningTrace, Segmentation};

/// Quadratic scan: every byte offset against every phrase, then a left-to-right
/// sweep keeping the longest match and skipping anything that starts inside it.
pub fn segment_boundaries(trace: &ReasoningTrace, phrases: &[String]) -> Vec<usize> {
    let text = trace.reasoning_text();
    let base = trace.offset_of(trace.reason_start());
    let mut hits: Vec<(usize, usize)> = Vec::new();
    for i in 0..text.len() {
        if !text.is_char_boundary(i) {
            continue;
        }
        let before = text[..i].chars().next_back();
        if before.is_some_and(|c| c.is_alphanumeric()) {
            continue;
        }
        for p in phrases {
            if p.is_empty() || !text[i..].starts_with(p.as_str()) {
                continue;
            }
            let after = text[i + p.len()..].chars().next();
            if after.is_some_and(|c| c.is_alphabetic()) {
                continue;
            }
            hits.push((i, p.len()));
        }
    }
    let mut starts = BTreeSet::from([trace.reason_start()]);
    let mut free_from = 0;
    for i in 0..text.len() {
        if i < free_from {
            continue;
        }
        let longest = hits.iter().filter(|h| h.0 == i).map(|h| h.1).max();
        if let Some(len) = longest {
            free_from = i + len;
            // token whose byte span covers base + i
            let abs = base + i;
            let tok = (0..trace.len())
                .rev()
                .find(|&t| trace.offset_of(t) <= abs && !trace.tokens()[t].text.is_empty())
                .unwrap();
            starts.insert(tok);
        }
    }
    starts.into_iter().collect()
}

/// Step score by explicit loops: sum over heads and candidate tokens in the
/// step, divided by the number of (head, token) terms.
pub fn step_score(scores: &ScoreTensor, seg: &Segmentation, layer: usize, step: usize) -> Option<f64> {
    let s = &seg.steps[step];
    let mut sum = 0.0;
    let mut n = 0usize;
    for h in 0..scores.num_heads() {
        for t in s.start..s.end {
            if let Some(v) = scores.get(layer, h, t) {
                sum += v;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Output of the reference hierarchical planner.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePlan {
    /// Per layer, the (step, e) pairs in the order they were handed out.
    pub allocation: Vec<Vec<(usize, usize)>>,
    /// Per (layer, head), row-major.
    pub evict: Vec<BTreeSet<usize>>,
}

/// The hierarchical procedure executed one line at a time:
/// per layer compute every step's mean score, sort ascending (ties to the
/// earlier step), then give each step `min(|step|, k_rem)` and evict that many
/// of its lowest-scored tokens at every head.
pub fn hierarchical_plan(scores: &ScoreTensor, seg: &Segmentation, cands: &Candidates, k: usize) -> ReferencePlan {
    let (nl, nh) = (scores.num_layers(), scores.num_heads());
    let mut allocation = vec![Vec::new(); nl];
    let mut evict = vec![BTreeSet::new(); nl * nh];
    for l in 0..nl {
        let mut c: Vec<(f64, usize)> = Vec::new();
        for i in 0..seg.steps.len() {
            if let Some(v) = step_score(scores, seg, l, i) {
                c.push((v, i));
            }
        }
        c.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut k_rem = k;
        for &(_, i) in &c {
            if k_rem == 0 {
                break;
            }
            let r = &seg.steps[i];
            let size = (0..nh)
                .map(|h| (r.start..r.end).filter(|&t| cands.contains(l, h, t)).count())
                .min()
                .unwrap();
            let e = size.min(k_rem);
            if e == 0 {
                continue;
            }
            for h in 0..nh {
                let mut toks: Vec<(f64, usize)> = (r.start..r.end)
                    .filter(|&t| cands.contains(l, h, t))
                    .map(|t| (scores.get(l, h, t).unwrap_or(0.0), t))
                    .collect();
                toks.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                for &(_, t) in toks.iter().take(e) {
                    evict[l * nh + h].insert(t);
                }
            }
            allocation[l].push((i, e));
            k_rem -= e;
        }
    }
    ReferencePlan { allocation, evict }
}

/// Plain summation of every decode-step row per (layer, head, token).
pub fn accumulate(rows: &[AttentionRow]) -> BTreeMap<(usize, usize, usize), f64> {
    let mut acc = BTreeMap::new();
    for r in rows {
        for &(t, w) in &r.weights {
            *acc.entry((r.layer, r.head, t)).or_insert(0.0) += w;
        }
    }
    acc
}

/// Live sets per (layer, head), row-major.
pub fn live_sets(state: &KvCacheState) -> Vec<BTreeSet<usize>> {
    let mut out = Vec::new();
    for l in 0..state.num_layers() {
        for h in 0..state.num_heads() {
            out.push(state.live_tokens(l, h).iter().copied().collect());
        }
    }
    out
}

/// Largest `|a - b| / max(|b|, tiny)` over a logit vector, scaled by the vector's largest magnitude.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Feed `tokens` into a fresh cache while evicting random non-prompt tokens,
/// and compare every step against the batch forward pass with the same mask.
/// Returns the largest relative logit error seen.
pub fn dual_path_trial(model: &TinyModel, tokens: &[u32], prompt_len: usize, seed: u64) -> f64 {
    use kvprune::cache::ProtectedRegions;
    use kvprune::engine::AttentionMask;
    use kvprune::policy::EvictionPlan;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = KvCacheState::new(
        cfg.num_layers,
        cfg.num_heads,
        cfg.head_dim,
        ProtectedRegions { prompt_len, recent_window: 0 },
    );
    let mut mask = AttentionMask::new(cfg.num_heads);
    let mut incremental = Vec::new();
    for (pos, &tok) in tokens.iter().enumerate() {
        if pos > prompt_len && rng.gen_bool(0.4) {
            let mut plan = EvictionPlan::empty(cfg.num_layers, cfg.num_heads);
            for l in 0..cfg.num_layers {
                for h in 0..cfg.num_heads {
                    let live: Vec<usize> = state.live_tokens(l, h).iter().copied().filter(|&t| t >= prompt_len).collect();
                    for t in live {
                        if rng.gen_bool(0.25) {
                            plan.head_mut(l, h).insert(t);
                            mask.hide(l, h, t, pos);
                        }
                    }
                }
            }
            state.apply_plan(&plan).unwrap();
        }
        incremental.push(model.forward_token(&mut state, tok, false).unwrap().logits);
    }
    let batch = model.reference_forward(tokens, &mask);
    incremental
        .iter()
        .zip(&batch)
        .map(|(a, b)| rel_err(a, b))
        .fold(0.0, f64::max)
}
