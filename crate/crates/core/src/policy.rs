//! Eviction plans: step-aware hierarchical allocation plus baseline policies.
//!
//! The hierarchical policy sorts a layer's steps by ascending step score and
//! walks them, handing each step `min(live size, remaining budget)` evictions.
//! Each head then drops its own lowest-scored tokens inside each step, so the
//! per-step counts are shared by a layer while the members differ per head.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::Candidates;
use crate::scoring::{aggregate_step_scores, AttentionRow, ScoreTensor, StepScores};
use crate::trace::{Segmentation, Step};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("BudgetExceedsStep: {requested} evictions requested from a step with {available} live tokens (layer {layer}, head {head})")]
    BudgetExceedsStep {
        layer: usize,
        head: usize,
        requested: usize,
        available: usize,
    },
    #[error("policy {0} needs inputs that were not supplied")]
    MissingInputs(PolicyKind),
    #[error("unknown policy {0:?}; expected ours, random, h2o or streaming")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvictionBudget {
    pub k: usize,
}

impl EvictionBudget {
    pub fn new(k: usize) -> Self {
        Self { k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Step-aware allocation over end-of-thinking scores.
    #[serde(rename = "ours")]
    Hierarchical,
    Random,
    H2o,
    Streaming,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Hierarchical,
        PolicyKind::Random,
        PolicyKind::H2o,
        PolicyKind::Streaming,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Hierarchical => "ours",
            PolicyKind::Random => "random",
            PolicyKind::H2o => "h2o",
            PolicyKind::Streaming => "streaming",
        }
    }

    /// Whether the policy needs the end-of-thinking probe pass.
    pub fn uses_probe(self) -> bool {
        self == PolicyKind::Hierarchical
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| PolicyError::UnknownPolicy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepShare {
    pub step: usize,
    pub evict: usize,
}

/// Per layer, the steps that received evictions in greedy order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepAllocation {
    pub layers: Vec<Vec<StepShare>>,
}

impl StepAllocation {
    pub fn total(&self, layer: usize) -> usize {
        self.layers[layer].iter().map(|s| s.evict).sum()
    }
}

/// Token indices to evict at every (layer, head).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionPlan {
    num_layers: usize,
    num_heads: usize,
    sets: Vec<BTreeSet<usize>>,
}

impl EvictionPlan {
    pub fn empty(num_layers: usize, num_heads: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            sets: vec![BTreeSet::new(); num_layers * num_heads],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head(&self, layer: usize, head: usize) -> &BTreeSet<usize> {
        &self.sets[layer * self.num_heads + head]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut BTreeSet<usize> {
        &mut self.sets[layer * self.num_heads + head]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &BTreeSet<usize>)> {
        self.sets
            .iter()
            .enumerate()
            .map(|(i, s)| (i / self.num_heads, i % self.num_heads, s))
    }

    pub fn total(&self) -> usize {
        self.sets.iter().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.iter().all(BTreeSet::is_empty)
    }

    /// Evicted count per (layer, head), row-major.
    pub fn sizes(&self) -> Vec<usize> {
        self.sets.iter().map(BTreeSet::len).collect()
    }

    pub fn to_file(&self, allocation: Option<&StepAllocation>) -> PlanFile {
        PlanFile {
            layers: (0..self.num_layers)
                .map(|l| PlanLayer {
                    heads: (0..self.num_heads)
                        .map(|h| self.head(l, h).iter().copied().collect())
                        .collect(),
                })
                .collect(),
            allocation: allocation.map(|a| a.layers.clone()).unwrap_or_default(),
        }
    }
}

/// On-disk plan: `{"layers": [{"heads": [[idx, ...], ...]}, ...], "allocation": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanFile {
    pub layers: Vec<PlanLayer>,
    #[serde(default)]
    pub allocation: Vec<Vec<StepShare>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanLayer {
    pub heads: Vec<Vec<usize>>,
}

impl PlanFile {
    pub fn to_plan(&self) -> EvictionPlan {
        let num_layers = self.layers.len();
        let num_heads = self.layers.first().map_or(0, |l| l.heads.len());
        let mut plan = EvictionPlan::empty(num_layers, num_heads);
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate().take(num_heads) {
                plan.head_mut(l, h).extend(head.iter().copied());
            }
        }
        plan
    }
}

fn live_in_step(candidates: &Candidates, layer: usize, step: &Step) -> usize {
    (0..candidates.num_heads())
        .map(|h| candidates.count_in(layer, h, step.start..step.end))
        .min()
        .unwrap_or(0)
}

/// Greedy step-level budget split, most redundant step first.
pub fn allocate(
    step_scores: &StepScores,
    seg: &Segmentation,
    candidates: &Candidates,
    budget: EvictionBudget,
) -> StepAllocation {
    let layers = (0..step_scores.layers.len())
        .map(|l| {
            let mut remaining = budget.k;
            let mut shares = Vec::new();
            for entry in step_scores.ascending(l) {
                if remaining == 0 {
                    break;
                }
                let size = live_in_step(candidates, l, &seg.steps[entry.step]);
                let evict = size.min(remaining);
                if evict > 0 {
                    shares.push(StepShare {
                        step: entry.step,
                        evict,
                    });
                    remaining -= evict;
                }
            }
            shares
        })
        .collect();
    StepAllocation { layers }
}

/// The `count` lowest-scored live tokens of `step` at `(layer, head)`; ties evict the lower index.
pub fn select_within_step(
    scores: &ScoreTensor,
    step: &Step,
    count: usize,
    layer: usize,
    head: usize,
) -> Result<BTreeSet<usize>, PolicyError> {
    let mut live: Vec<(usize, f64)> = scores
        .head(layer, head)
        .range(step.start..step.end)
        .map(|(&t, &s)| (t, s))
        .collect();
    if count > live.len() {
        return Err(PolicyError::BudgetExceedsStep {
            layer,
            head,
            requested: count,
            available: live.len(),
        });
    }
    live.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(live.into_iter().take(count).map(|(t, _)| t).collect())
}

/// Full hierarchical plan: layer-level allocation, head-level selection.
pub fn build_plan(
    scores: &ScoreTensor,
    step_scores: &StepScores,
    seg: &Segmentation,
    candidates: &Candidates,
    budget: EvictionBudget,
) -> Result<(EvictionPlan, StepAllocation), PolicyError> {
    let allocation = allocate(step_scores, seg, candidates, budget);
    let mut plan = EvictionPlan::empty(scores.num_layers(), scores.num_heads());
    for (l, shares) in allocation.layers.iter().enumerate() {
        for share in shares {
            let step = &seg.steps[share.step];
            for h in 0..scores.num_heads() {
                let picked = select_within_step(scores, step, share.evict, l, h)?;
                plan.head_mut(l, h).extend(picked);
            }
        }
    }
    Ok((plan, allocation))
}

fn head_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over (seed, index)
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `k` candidates per (layer, head) drawn uniformly without replacement.
///
/// Each (layer, head) gets its own generator derived from `seed`, so the
/// plan does not depend on the order heads are visited.
pub fn plan_random(candidates: &Candidates, budget: EvictionBudget, seed: u64) -> EvictionPlan {
    let (num_layers, num_heads) = (candidates.num_layers(), candidates.num_heads());
    let mut plan = EvictionPlan::empty(num_layers, num_heads);
    for l in 0..num_layers {
        for h in 0..num_heads {
            let pool: Vec<usize> = candidates.get(l, h).iter().copied().collect();
            let k = budget.k.min(pool.len());
            let mut rng = ChaCha8Rng::seed_from_u64(head_seed(seed, (l * num_heads + h) as u64));
            plan.head_mut(l, h)
                .extend(sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]));
        }
    }
    plan
}

/// Attention received by every key, summed over decode steps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct H2oAccumulator {
    pub num_layers: usize,
    pub num_heads: usize,
    totals: Vec<BTreeMap<usize, f64>>,
}

impl H2oAccumulator {
    pub fn new(num_layers: usize, num_heads: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            totals: vec![BTreeMap::new(); num_layers * num_heads],
        }
    }

    pub fn observe(&mut self, row: &AttentionRow) {
        let acc = &mut self.totals[row.layer * self.num_heads + row.head];
        for &(t, w) in &row.weights {
            *acc.entry(t).or_insert(0.0) += w;
        }
    }

    pub fn total(&self, layer: usize, head: usize, token: usize) -> f64 {
        self.totals[layer * self.num_heads + head]
            .get(&token)
            .copied()
            .unwrap_or(0.0)
    }
}

/// Accumulated attention of every candidate; tokens never attended score 0.
pub fn h2o_scores(history: &H2oAccumulator, candidates: &Candidates) -> ScoreTensor {
    let mut out = ScoreTensor::new(candidates.num_layers(), candidates.num_heads());
    for l in 0..candidates.num_layers() {
        for h in 0..candidates.num_heads() {
            for &t in candidates.get(l, h) {
                out.insert(l, h, t, history.total(l, h, t));
            }
        }
    }
    out
}

/// The `k` lowest-scored candidates per head, ignoring step structure.
pub fn plan_lowest(scores: &ScoreTensor, candidates: &Candidates, budget: EvictionBudget) -> EvictionPlan {
    let mut plan = EvictionPlan::empty(candidates.num_layers(), candidates.num_heads());
    for l in 0..candidates.num_layers() {
        for h in 0..candidates.num_heads() {
            let mut pool: Vec<(usize, f64)> = candidates
                .get(l, h)
                .iter()
                .map(|&t| (t, scores.get(l, h, t).unwrap_or(0.0)))
                .collect();
            pool.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            plan.head_mut(l, h)
                .extend(pool.into_iter().take(budget.k).map(|(t, _)| t));
        }
    }
    plan
}

/// Evict every candidate outside the first `first_a` and last `recent_b` positions of `0..seq_len`.
pub fn plan_streaming(candidates: &Candidates, seq_len: usize, first_a: usize, recent_b: usize) -> EvictionPlan {
    let keep_from = seq_len.saturating_sub(recent_b);
    let mut plan = EvictionPlan::empty(candidates.num_layers(), candidates.num_heads());
    for l in 0..candidates.num_layers() {
        for h in 0..candidates.num_heads() {
            plan.head_mut(l, h).extend(
                candidates
                    .get(l, h)
                    .iter()
                    .copied()
                    .filter(|&t| t >= first_a && t < keep_from),
            );
        }
    }
    plan
}

/// Budgeted streaming eviction: the `k` oldest candidates per head.
pub fn plan_oldest(candidates: &Candidates, budget: EvictionBudget) -> EvictionPlan {
    let mut plan = EvictionPlan::empty(candidates.num_layers(), candidates.num_heads());
    for l in 0..candidates.num_layers() {
        for h in 0..candidates.num_heads() {
            plan.head_mut(l, h)
                .extend(candidates.get(l, h).iter().copied().take(budget.k));
        }
    }
    plan
}

/// Whatever a policy may need beyond the candidate set.
#[derive(Debug, Clone, Copy, Default)]
pub struct PolicyInputs<'a> {
    pub scores: Option<&'a ScoreTensor>,
    pub segmentation: Option<&'a Segmentation>,
    pub history: Option<&'a H2oAccumulator>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub plan: EvictionPlan,
    pub allocation: Option<StepAllocation>,
    pub step_scores: Option<StepScores>,
}

/// Build a `k`-token plan with the given policy.
pub fn plan_for(
    kind: PolicyKind,
    inputs: PolicyInputs<'_>,
    candidates: &Candidates,
    budget: EvictionBudget,
) -> Result<PlanOutcome, PolicyError> {
    let plain = |plan| PlanOutcome {
        plan,
        allocation: None,
        step_scores: None,
    };
    match kind {
        PolicyKind::Hierarchical => {
            let (Some(scores), Some(seg)) = (inputs.scores, inputs.segmentation) else {
                return Err(PolicyError::MissingInputs(kind));
            };
            let scores = scores.restrict(candidates);
            let step_scores = aggregate_step_scores(&scores, seg);
            let (plan, allocation) = build_plan(&scores, &step_scores, seg, candidates, budget)?;
            Ok(PlanOutcome {
                plan,
                allocation: Some(allocation),
                step_scores: Some(step_scores),
            })
        }
        PolicyKind::Random => Ok(plain(plan_random(candidates, budget, inputs.seed))),
        PolicyKind::H2o => {
            let scores = match (inputs.history, inputs.scores) {
                (Some(history), _) => h2o_scores(history, candidates),
                (None, Some(scores)) => scores.clone(),
                (None, None) => return Err(PolicyError::MissingInputs(kind)),
            };
            Ok(plain(plan_lowest(&scores, candidates, budget)))
        }
        PolicyKind::Streaming => Ok(plain(plan_oldest(candidates, budget))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::StepScore;

    fn seg(bounds: &[(usize, usize)]) -> Segmentation {
        Segmentation {
            steps: bounds
                .iter()
                .map(|&(start, end)| Step { start, end, marker: None })
                .collect(),
            trace_len: bounds.last().unwrap().1,
        }
    }

    #[test]
    fn allocation_hand_example() {
        // step sizes [3, 5, 2], c order step2 < step0 < step1
        let s = seg(&[(0, 3), (3, 8), (8, 10)]);
        let scores = StepScores {
            layers: vec![vec![
                StepScore { step: 0, value: 0.2 },
                StepScore { step: 1, value: 0.5 },
                StepScore { step: 2, value: 0.1 },
            ]],
        };
        let cands = Candidates::uniform(1, 1, 0..10);
        let a = allocate(&scores, &s, &cands, EvictionBudget::new(6));
        assert_eq!(
            a.layers[0],
            vec![
                StepShare { step: 2, evict: 2 },
                StepShare { step: 0, evict: 3 },
                StepShare { step: 1, evict: 1 }
            ]
        );
        assert!(allocate(&scores, &s, &cands, EvictionBudget::new(0)).layers[0].is_empty());
        let full = allocate(&scores, &s, &cands, EvictionBudget::new(99));
        assert_eq!(full.total(0), 10);
    }

    #[test]
    fn equal_step_scores_prefer_earlier_step() {
        let s = seg(&[(0, 2), (2, 4)]);
        let scores = StepScores {
            layers: vec![vec![
                StepScore { step: 0, value: 0.3 },
                StepScore { step: 1, value: 0.3 },
            ]],
        };
        let a = allocate(&scores, &s, &Candidates::uniform(1, 1, 0..4), EvictionBudget::new(1));
        assert_eq!(a.layers[0], vec![StepShare { step: 0, evict: 1 }]);
    }

    #[test]
    fn select_lowest_with_ties() {
        let mut sc = ScoreTensor::new(1, 1);
        for (t, v) in [(10, 0.3), (11, 0.1), (12, 0.2)] {
            sc.insert(0, 0, t, v);
        }
        let step = Step { start: 10, end: 13, marker: None };
        assert_eq!(select_within_step(&sc, &step, 2, 0, 0).unwrap(), BTreeSet::from([11, 12]));
        assert_eq!(select_within_step(&sc, &step, 3, 0, 0).unwrap().len(), 3);
        assert_eq!(
            select_within_step(&sc, &step, 4, 0, 0),
            Err(PolicyError::BudgetExceedsStep { layer: 0, head: 0, requested: 4, available: 3 })
        );
        let mut flat = ScoreTensor::new(1, 1);
        for t in 10..13 {
            flat.insert(0, 0, t, 0.5);
        }
        assert_eq!(select_within_step(&flat, &step, 1, 0, 0).unwrap(), BTreeSet::from([10]));
    }

    #[test]
    fn heads_share_counts_not_members() {
        let s = seg(&[(0, 3), (3, 6)]);
        let mut sc = ScoreTensor::new(1, 2);
        let h0 = [0.01, 0.02, 0.03, 0.5, 0.6, 0.7];
        let h1 = [0.03, 0.02, 0.01, 0.7, 0.6, 0.5];
        for t in 0..6 {
            sc.insert(0, 0, t, h0[t]);
            sc.insert(0, 1, t, h1[t]);
        }
        let cands = Candidates::uniform(1, 2, 0..6);
        let ss = aggregate_step_scores(&sc, &s);
        let (plan, alloc) = build_plan(&sc, &ss, &s, &cands, EvictionBudget::new(2)).unwrap();
        assert_eq!(alloc.layers[0], vec![StepShare { step: 0, evict: 2 }]);
        assert_eq!(plan.head(0, 0), &BTreeSet::from([0, 1]));
        assert_eq!(plan.head(0, 1), &BTreeSet::from([1, 2]));
    }

    #[test]
    fn single_step_degenerates_to_global_lowest() {
        let s = seg(&[(0, 5)]);
        let mut sc = ScoreTensor::new(1, 1);
        for (t, v) in [0.4, 0.1, 0.3, 0.05, 0.15].into_iter().enumerate() {
            sc.insert(0, 0, t, v);
        }
        let cands = Candidates::uniform(1, 1, 0..5);
        let ss = aggregate_step_scores(&sc, &s);
        let (plan, _) = build_plan(&sc, &ss, &s, &cands, EvictionBudget::new(3)).unwrap();
        assert_eq!(plan.head(0, 0), &BTreeSet::from([1, 3, 4]));
        assert_eq!(plan, plan_lowest(&sc, &cands, EvictionBudget::new(3)));
        let (empty, _) = build_plan(&sc, &ss, &s, &cands, EvictionBudget::new(0)).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn random_plans() {
        let cands = Candidates::uniform(2, 2, 3..20);
        assert!(plan_random(&cands, EvictionBudget::new(0), 1).is_empty());
        let a = plan_random(&cands, EvictionBudget::new(5), 42);
        assert_eq!(a, plan_random(&cands, EvictionBudget::new(5), 42));
        assert_ne!(a, plan_random(&cands, EvictionBudget::new(5), 43));
        assert!(a.sizes().iter().all(|&n| n == 5));
        let all = plan_random(&cands, EvictionBudget::new(100), 7);
        assert_eq!(all.head(1, 1), cands.get(1, 1));
    }

    #[test]
    fn h2o_accumulation() {
        let mut acc = H2oAccumulator::new(1, 1);
        acc.observe(&AttentionRow { layer: 0, head: 0, weights: vec![(0, 0.5), (1, 0.5)] });
        acc.observe(&AttentionRow { layer: 0, head: 0, weights: vec![(0, 1.0), (1, 0.0)] });
        let cands = Candidates::uniform(1, 1, 0..3);
        let sc = h2o_scores(&acc, &cands);
        assert_eq!(sc.get(0, 0, 0), Some(1.5));
        assert_eq!(sc.get(0, 0, 1), Some(0.5));
        // never attended
        assert_eq!(sc.get(0, 0, 2), Some(0.0));
        let plan = plan_lowest(&sc, &cands, EvictionBudget::new(1));
        assert_eq!(plan.head(0, 0), &BTreeSet::from([2]));
        let plan = plan_lowest(&sc, &Candidates::uniform(1, 1, 0..2), EvictionBudget::new(1));
        assert_eq!(plan.head(0, 0), &BTreeSet::from([1]));
    }

    #[test]
    fn streaming_windows() {
        let cands = Candidates::uniform(1, 2, 0..10);
        let p = plan_streaming(&cands, 10, 2, 3);
        assert_eq!(p.head(0, 0), &BTreeSet::from([2, 3, 4, 5, 6]));
        assert_eq!(p.head(0, 0), p.head(0, 1));
        assert!(plan_streaming(&cands, 10, 6, 4).is_empty());
        assert_eq!(plan_streaming(&cands, 10, 0, 0).head(0, 1).len(), 10);
        assert_eq!(plan_oldest(&cands, EvictionBudget::new(2)).head(0, 0), &BTreeSet::from([0, 1]));
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(p.name().parse::<PolicyKind>().unwrap(), p);
        }
        assert!("full".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn plan_file_round_trip() {
        let mut plan = EvictionPlan::empty(2, 1);
        plan.head_mut(1, 0).extend([4, 7]);
        let file = plan.to_file(None);
        let json = serde_json::to_string(&file).unwrap();
        assert_eq!(json, r#"{"layers":[{"heads":[[]]},{"heads":[[4,7]]}],"allocation":[]}"#);
        assert_eq!(file.to_plan(), plan);
    }
}
