//! Tiny decoder plus the probe-and-prune decode loop.
//!
//! Every `interval_p` sampled reasoning tokens, before the latest token is fed,
//! the summarization probe is appended to the cache and run forward. The
//! `</think>` query's attention rows become token scores, the active policy
//! builds a plan, the plan is applied and the probe entries are dropped. The
//! pending token is then fed over the pruned cache, so every later sample is
//! conditioned on the pruned sequence only.

pub mod model;
pub mod vocab;
pub mod weights;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheBudget, CacheError, CacheStats, KvCacheState, ProtectedRegions};
use crate::candidates::Candidates;
use crate::policy::{
    plan_for, EvictionBudget, EvictionPlan, H2oAccumulator, PolicyError, PolicyInputs, PolicyKind, StepAllocation,
};
use crate::scoring::{
    aggregate_step_scores, extract_token_scores, AttentionDump, ProbeConfig, ScoreTensor, ScoringError, StepScores,
};
use crate::trace::{default_marker_set, segment, MarkerSet, ReasoningTrace, Segmentation, TraceError, TraceFile};

pub use model::{attend, AttentionMask, StepOutput, TinyModel, TinyModelConfig};
pub use vocab::{Vocab, EOS_ID, THINK_END_ID, THINK_START_ID};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("SequenceTooLong: position {position} exceeds max_seq_len {max_seq_len}")]
    SequenceTooLong { position: usize, max_seq_len: usize },
    #[error("ProbeLeak: probe token {token} still live at layer {layer} head {head}")]
    ProbeLeak { layer: usize, head: usize, token: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("text cannot be tokenized near {0:?}")]
    UnknownText(String),
    #[error("weight file: {0}")]
    Weights(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Greedy,
    TopP { temperature: f64, top_p: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSetting {
    /// Full KV cache, no probes or evictions.
    Full,
    /// Evict `k` tokens per (layer, head) every `interval_p` reasoning tokens.
    Periodic { k: usize, recent_window: usize },
    /// Keep generated slots under a cap at every step.
    Ratio(CacheBudget),
}

impl BudgetSetting {
    pub fn label(&self) -> String {
        match self {
            BudgetSetting::Full => "none".to_string(),
            BudgetSetting::Periodic { k, .. } => format!("k={k}"),
            BudgetSetting::Ratio(b) => format!("ratio={} max_slots={}", b.ratio, b.max_slots),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    pub probe: ProbeConfig,
    pub markers: MarkerSet,
    pub policy: PolicyKind,
    pub budget: BudgetSetting,
    pub policy_seed: u64,
    /// `</think>` and `<eos>` are masked until this many reasoning tokens exist.
    pub min_reasoning_tokens: usize,
    /// Keep the probe trace and attention dump of every scored round.
    pub capture_probes: bool,
    pub record_timings: bool,
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize, policy: PolicyKind, budget: BudgetSetting) -> Self {
        Self {
            max_new_tokens,
            sampling: Sampling::Greedy,
            probe: crate::scoring::default_probe(),
            markers: default_marker_set(),
            policy,
            budget,
            policy_seed: 0,
            min_reasoning_tokens: 0,
            capture_probes: false,
            record_timings: false,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if let Sampling::TopP { temperature, top_p, .. } = self.sampling {
            if !(temperature > 0.0) {
                return Err(EngineError::InvalidConfig(format!("temperature {temperature} must be positive")));
            }
            if !(top_p > 0.0 && top_p <= 1.0) {
                return Err(EngineError::InvalidConfig(format!("top_p {top_p} is outside (0, 1]")));
            }
        }
        if self.probe.interval_p == 0 {
            return Err(ScoringError::ZeroInterval.into());
        }
        Ok(())
    }

    pub fn policy_label(&self) -> String {
        match self.budget {
            BudgetSetting::Full => "full".to_string(),
            _ => self.policy.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundTrigger {
    Schedule,
    Overflow,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub const BINS: usize = 10;

    /// Equal-width bins over `[0, max]`; the top edge falls in the last bin.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let values: Vec<f64> = values.into_iter().collect();
        let hi = values.iter().copied().fold(0.0, f64::max);
        let mut counts = vec![0; Self::BINS];
        for v in values {
            let bin = if hi > 0.0 {
                ((v / hi * Self::BINS as f64) as usize).min(Self::BINS - 1)
            } else {
                0
            };
            counts[bin] += 1;
        }
        Self { lo: 0.0, hi, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub start: usize,
    pub end: usize,
    pub marker: Option<String>,
    /// Step score averaged over the layers that scored the step.
    pub mean_score: Option<f64>,
    /// Evictions from this step summed over every (layer, head).
    pub evicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub round: usize,
    pub trigger: RoundTrigger,
    /// Committed sequence length when the round ran.
    pub position: usize,
    pub reasoning_tokens: usize,
    pub budget: usize,
    pub skipped: Option<String>,
    pub scores_digest: Option<String>,
    pub scored_tokens: usize,
    pub histogram: Option<Histogram>,
    pub steps: Vec<StepSummary>,
    pub allocation: Option<StepAllocation>,
    /// Evicted count per (layer, head), row-major.
    pub plan_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancySample {
    pub position: usize,
    pub avg_live: f64,
    pub max_live: usize,
    pub max_generated_live: usize,
    pub evicted_total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadEviction {
    pub layer: usize,
    pub head: usize,
    pub tokens: Vec<usize>,
}

/// Tokens removed right before the token at `position` was fed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionEvent {
    pub position: usize,
    pub heads: Vec<HeadEviction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Mean over decode steps of the average live length across (layer, head).
    pub avg_kv: f64,
    pub peak_kv: usize,
    pub max_generated_live: usize,
    pub evicted_total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub prefill_ms: f64,
    pub decode_ms: f64,
    pub probe_ms: f64,
}

impl PhaseTimings {
    pub fn total_ms(&self) -> f64 {
        self.prefill_ms + self.decode_ms + self.probe_ms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCapture {
    pub round: usize,
    pub trace: TraceFile,
    pub dump: AttentionDump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub policy: String,
    pub budget: String,
    pub prompt_len: usize,
    /// Every token fed to the model, prompt included.
    pub tokens: Vec<u32>,
    pub generated: Vec<u32>,
    pub reasoning_tokens: usize,
    pub think_end_at: Option<usize>,
    pub rounds: Vec<ProbeRecord>,
    pub occupancy: Vec<OccupancySample>,
    pub evictions: Vec<EvictionEvent>,
    pub final_stats: CacheStats,
    pub summary: RunSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<PhaseTimings>,
    #[serde(skip)]
    pub captures: Vec<ProbeCapture>,
}

impl RunRecord {
    /// Mask reproducing this run's evictions for [`TinyModel::reference_forward`].
    pub fn attention_mask(&self, num_heads: usize) -> AttentionMask {
        let mut mask = AttentionMask::new(num_heads);
        for ev in &self.evictions {
            for he in &ev.heads {
                for &t in &he.tokens {
                    mask.hide(he.layer, he.head, t, ev.position);
                }
            }
        }
        mask
    }
}

/// Everything one probe cycle needs besides the cache.
#[derive(Debug, Clone, Copy)]
pub struct ProbeRequest<'a> {
    pub model: &'a TinyModel,
    pub vocab: &'a Vocab,
    pub trace: &'a ReasoningTrace,
    pub markers: &'a MarkerSet,
    pub probe: &'a ProbeConfig,
    pub policy: PolicyKind,
    pub budget: EvictionBudget,
    pub history: Option<&'a H2oAccumulator>,
    pub seed: u64,
    pub capture: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub plan: EvictionPlan,
    pub scores: Option<ScoreTensor>,
    pub segmentation: Option<Segmentation>,
    pub step_scores: Option<StepScores>,
    pub allocation: Option<StepAllocation>,
    pub dump: Option<AttentionDump>,
    pub skipped: Option<String>,
}

fn check_no_probe_left(state: &KvCacheState) -> Result<(), EngineError> {
    let end = state.committed_len();
    for l in 0..state.num_layers() {
        for h in 0..state.num_heads() {
            if let Some(&t) = state.live_tokens(l, h).last() {
                if t >= end {
                    return Err(EngineError::ProbeLeak { layer: l, head: h, token: t });
                }
            }
        }
    }
    Ok(())
}

/// Append the probe, read the `</think>` rows, then drop every probe entry.
///
/// Returns scores for `candidates` and optionally a dense dump of the rows.
pub fn probe_scores(
    state: &mut KvCacheState,
    model: &TinyModel,
    vocab: &Vocab,
    trace: &ReasoningTrace,
    probe: &ProbeConfig,
    candidates: &Candidates,
    capture: bool,
) -> Result<(ScoreTensor, Option<AttentionDump>), EngineError> {
    if trace.len() != state.committed_len() {
        return Err(EngineError::InvalidConfig(format!(
            "trace has {} tokens but the cache holds {}",
            trace.len(),
            state.committed_len()
        )));
    }
    let ids = vocab.encode(&probe.prompt_text)?;
    probe.check_tokens(&ids)?;
    state.begin_probe();
    let mut rows = Vec::new();
    let mut result = Ok(());
    for (i, &id) in ids.iter().enumerate() {
        match model.forward_token(state, id, i + 1 == ids.len()) {
            Ok(out) => rows = out.rows,
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    let probe_position = state.next_position() - 1;
    state.end_probe();
    result?;
    check_no_probe_left(state)?;

    let dump = capture.then(|| {
        let (layers, heads) = (state.num_layers(), state.num_heads());
        let mut dense = vec![vec![vec![0.0; probe_position + 1]; heads]; layers];
        let mut evicted = vec![vec![Vec::new(); heads]; layers];
        for row in &rows {
            let mut live = vec![false; probe_position + 1];
            for &(t, w) in &row.weights {
                dense[row.layer][row.head][t] = w;
                live[t] = true;
            }
            evicted[row.layer][row.head] = (0..=probe_position).filter(|&t| !live[t]).collect();
        }
        AttentionDump {
            layers,
            heads,
            probe_position,
            rows: dense,
            evicted: Some(evicted),
        }
    });
    let scores = extract_token_scores(&rows, trace, candidates)?;
    Ok((scores, dump))
}

/// One probe-and-prune round over the committed sequence described by `req.trace`.
///
/// Skipped (nothing evicted) once the trace already holds a natural `</think>`.
pub fn probe_cycle(state: &mut KvCacheState, req: &ProbeRequest<'_>) -> Result<ProbeOutcome, EngineError> {
    let (layers, heads) = (state.num_layers(), state.num_heads());
    let ended = req.trace.tokens()[req.trace.reason_start()..]
        .iter()
        .any(|t| t.id == req.probe.think_end_token_id);
    if ended || req.trace.reason_start() == req.trace.len() {
        return Ok(ProbeOutcome {
            plan: EvictionPlan::empty(layers, heads),
            scores: None,
            segmentation: None,
            step_scores: None,
            allocation: None,
            dump: None,
            skipped: Some(if ended { "post-reasoning" } else { "empty-reasoning" }.to_string()),
        });
    }
    let candidates = state.candidates(Some(req.trace.len()));
    let seg = segment(req.trace, req.markers)?;
    let (scores, dump) = if req.policy.uses_probe() {
        let (s, d) = probe_scores(state, req.model, req.vocab, req.trace, req.probe, &candidates, req.capture)?;
        (Some(s), d)
    } else {
        (None, None)
    };
    let inputs = PolicyInputs {
        scores: scores.as_ref(),
        segmentation: Some(&seg),
        history: req.history,
        seed: req.seed,
    };
    let outcome = plan_for(req.policy, inputs, &candidates, req.budget)?;
    state.apply_plan(&outcome.plan)?;
    check_no_probe_left(state)?;
    let step_scores = match (&outcome.step_scores, &scores) {
        (Some(s), _) => Some(s.clone()),
        (None, Some(sc)) => Some(aggregate_step_scores(sc, &seg)),
        (None, None) => None,
    };
    Ok(ProbeOutcome {
        plan: outcome.plan,
        scores,
        segmentation: Some(seg),
        step_scores,
        allocation: outcome.allocation,
        dump,
        skipped: None,
    })
}

fn summarize_steps(outcome: &ProbeOutcome) -> Vec<StepSummary> {
    let Some(seg) = &outcome.segmentation else {
        return Vec::new();
    };
    seg.steps
        .iter()
        .enumerate()
        .map(|(id, step)| {
            let mean_score = outcome.step_scores.as_ref().and_then(|ss| {
                let vals: Vec<f64> = (0..ss.layers.len()).filter_map(|l| ss.get(l, id)).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            });
            let evicted = outcome
                .plan
                .iter()
                .map(|(_, _, set)| set.range(step.start..step.end).count())
                .sum();
            StepSummary {
                step: id,
                start: step.start,
                end: step.end,
                marker: step.marker.clone(),
                mean_score,
                evicted,
            }
        })
        .collect()
}

fn round_seed(seed: u64, position: usize) -> u64 {
    seed ^ (position as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Session<'a> {
    model: &'a TinyModel,
    vocab: &'a Vocab,
    cfg: &'a DecodeConfig,
    cache: KvCacheState,
    tokens: Vec<u32>,
    prompt_len: usize,
    history: Option<H2oAccumulator>,
    rounds: Vec<ProbeRecord>,
    occupancy: Vec<OccupancySample>,
    evictions: Vec<EvictionEvent>,
    captures: Vec<ProbeCapture>,
    timings: PhaseTimings,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl<'a> Session<'a> {
    fn new(model: &'a TinyModel, vocab: &'a Vocab, cfg: &'a DecodeConfig, prompt_len: usize) -> Result<Self, EngineError> {
        cfg.validate()?;
        let mc = &model.config;
        if vocab.len() != mc.vocab_size {
            return Err(EngineError::InvalidConfig(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                mc.vocab_size
            )));
        }
        let recent_window = match cfg.budget {
            BudgetSetting::Full => 0,
            BudgetSetting::Periodic { recent_window, .. } => recent_window,
            BudgetSetting::Ratio(b) => b.recent_window(),
        };
        let protected = ProtectedRegions {
            prompt_len,
            recent_window,
        };
        let history = (cfg.policy == PolicyKind::H2o && cfg.budget != BudgetSetting::Full)
            .then(|| H2oAccumulator::new(mc.num_layers, mc.num_heads));
        Ok(Self {
            model,
            vocab,
            cfg,
            cache: KvCacheState::new(mc.num_layers, mc.num_heads, mc.head_dim, protected),
            tokens: Vec::new(),
            prompt_len,
            history,
            rounds: Vec::new(),
            occupancy: Vec::new(),
            evictions: Vec::new(),
            captures: Vec::new(),
            timings: PhaseTimings::default(),
        })
    }

    fn feed(&mut self, token: u32, decoding: bool) -> Result<Vec<f64>, EngineError> {
        let observe = decoding && self.history.is_some();
        let out = self.model.forward_token(&mut self.cache, token, observe)?;
        self.tokens.push(token);
        if let Some(h) = self.history.as_mut().filter(|_| observe) {
            for row in &out.rows {
                h.observe(row);
            }
        }
        if decoding {
            let st = self.cache.stats();
            let max_generated_live = (0..self.cache.num_layers())
                .flat_map(|l| (0..self.cache.num_heads()).map(move |h| (l, h)))
                .map(|(l, h)| self.cache.generated_live(l, h))
                .max()
                .unwrap_or(0);
            self.occupancy.push(OccupancySample {
                position: self.tokens.len() - 1,
                avg_live: st.average,
                max_live: st.live.iter().copied().max().unwrap_or(0),
                max_generated_live,
                evicted_total: st.evicted_total,
            });
        }
        Ok(out.logits)
    }

    fn trace(&self) -> Result<ReasoningTrace, EngineError> {
        Ok(ReasoningTrace::new(
            self.prompt_len,
            self.tokens.iter().map(|&id| (id, self.vocab.text(id).to_string())),
        )?)
    }

    fn log_plan(&mut self, plan: &EvictionPlan) {
        if plan.is_empty() {
            return;
        }
        let heads = plan
            .iter()
            .filter(|(_, _, s)| !s.is_empty())
            .map(|(layer, head, s)| HeadEviction {
                layer,
                head,
                tokens: s.iter().copied().collect(),
            })
            .collect();
        self.evictions.push(EvictionEvent {
            position: self.cache.committed_len(),
            heads,
        });
    }

    fn record_round(&mut self, trigger: RoundTrigger, reasoning_tokens: usize, k: usize, outcome: ProbeOutcome, trace: &ReasoningTrace) {
        let round = self.rounds.len();
        self.log_plan(&outcome.plan);
        let steps = summarize_steps(&outcome);
        let (digest, scored, histogram) = match &outcome.scores {
            Some(sc) => {
                let means = sc.token_means();
                (Some(sc.digest()), means.len(), Some(Histogram::of(means.values().copied())))
            }
            None => (None, 0, None),
        };
        if let Some(dump) = outcome.dump.clone() {
            self.captures.push(ProbeCapture {
                round,
                trace: TraceFile::from(trace),
                dump,
            });
        }
        self.rounds.push(ProbeRecord {
            round,
            trigger,
            position: self.cache.committed_len(),
            reasoning_tokens,
            budget: k,
            skipped: outcome.skipped,
            scores_digest: digest,
            scored_tokens: scored,
            histogram,
            steps,
            allocation: outcome.allocation,
            plan_sizes: outcome.plan.sizes(),
        });
    }

    fn scheduled_round(&mut self, k: usize, reasoning_tokens: usize) -> Result<(), EngineError> {
        let started = Instant::now();
        let trace = self.trace()?;
        let seed = round_seed(self.cfg.policy_seed, self.cache.committed_len());
        let req = ProbeRequest {
            model: self.model,
            vocab: self.vocab,
            trace: &trace,
            markers: &self.cfg.markers,
            probe: &self.cfg.probe,
            policy: self.cfg.policy,
            budget: EvictionBudget::new(k),
            history: self.history.as_ref(),
            seed,
            capture: self.cfg.capture_probes,
        };
        let outcome = probe_cycle(&mut self.cache, &req)?;
        self.record_round(RoundTrigger::Schedule, reasoning_tokens, k, outcome, &trace);
        self.timings.probe_ms += elapsed_ms(started);
        Ok(())
    }

    fn overflow_round(&mut self, budget: &CacheBudget, region_end: Option<usize>, reasoning_tokens: usize) -> Result<(), EngineError> {
        let overflow = self.cache.overflow(budget);
        if overflow == 0 {
            return Ok(());
        }
        let started = Instant::now();
        let trace = self.trace()?;
        let seg = segment(&trace, &self.cfg.markers)?;
        let window = self.cache.protected().recent_window;
        let (scores, dump) = if self.cfg.policy.uses_probe() {
            let cands = self.cache.candidates_with_window(region_end, window);
            let (s, d) = probe_scores(
                &mut self.cache,
                self.model,
                self.vocab,
                &trace,
                &self.cfg.probe,
                &cands,
                self.cfg.capture_probes,
            )?;
            (Some(s), d)
        } else {
            (None, None)
        };
        let inputs = PolicyInputs {
            scores: scores.as_ref(),
            segmentation: Some(&seg),
            history: self.history.as_ref(),
            seed: round_seed(self.cfg.policy_seed, self.cache.committed_len()),
        };
        let applied = self
            .cache
            .enforce_budget(budget, self.cfg.policy, inputs, region_end)?
            .expect("overflow is positive");
        let outcome = ProbeOutcome {
            plan: applied.plan,
            step_scores: applied.step_scores.or_else(|| scores.as_ref().map(|s| aggregate_step_scores(s, &seg))),
            scores,
            segmentation: Some(seg),
            allocation: applied.allocation,
            dump,
            skipped: None,
        };
        self.record_round(RoundTrigger::Overflow, reasoning_tokens, overflow, outcome, &trace);
        self.timings.probe_ms += elapsed_ms(started);
        Ok(())
    }

    fn finish(self, generated: Vec<u32>, reasoning_tokens: usize, think_end_at: Option<usize>) -> RunRecord {
        let final_stats = self.cache.stats();
        let summary = RunSummary {
            avg_kv: if self.occupancy.is_empty() {
                final_stats.average
            } else {
                self.occupancy.iter().map(|o| o.avg_live).sum::<f64>() / self.occupancy.len() as f64
            },
            peak_kv: self
                .occupancy
                .iter()
                .map(|o| o.max_live)
                .max()
                .unwrap_or(final_stats.peak),
            max_generated_live: self.occupancy.iter().map(|o| o.max_generated_live).max().unwrap_or(0),
            evicted_total: final_stats.evicted_total,
        };
        RunRecord {
            policy: self.cfg.policy_label(),
            budget: self.cfg.budget.label(),
            prompt_len: self.prompt_len,
            tokens: self.tokens,
            generated,
            reasoning_tokens,
            think_end_at,
            rounds: self.rounds,
            occupancy: self.occupancy,
            evictions: self.evictions,
            final_stats,
            summary,
            timings: self.cfg.record_timings.then_some(self.timings),
            captures: self.captures,
        }
    }
}

struct Sampler {
    sampling: Sampling,
    rng: Option<ChaCha8Rng>,
}

impl Sampler {
    fn new(sampling: Sampling) -> Self {
        let rng = match sampling {
            Sampling::Greedy => None,
            Sampling::TopP { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self { sampling, rng }
    }

    fn sample(&mut self, logits: &[f64], banned: &[u32]) -> u32 {
        let allowed = |i: usize| !banned.contains(&(i as u32));
        match self.sampling {
            Sampling::Greedy => {
                let mut best = None;
                for (i, &l) in logits.iter().enumerate().filter(|&(i, _)| allowed(i)) {
                    if best.is_none_or(|(_, b)| l > b) {
                        best = Some((i, l));
                    }
                }
                best.map_or(0, |(i, _)| i as u32)
            }
            Sampling::TopP { temperature, top_p, .. } => {
                let mut cand: Vec<(usize, f64)> = logits
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| allowed(i))
                    .map(|(i, &l)| (i, l / temperature))
                    .collect();
                let max = cand.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
                for c in &mut cand {
                    c.1 = (c.1 - max).exp();
                }
                let total: f64 = cand.iter().map(|c| c.1).sum();
                cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let mut kept = Vec::new();
                let mut mass = 0.0;
                for (i, p) in cand {
                    kept.push((i, p / total));
                    mass += p / total;
                    if mass >= top_p {
                        break;
                    }
                }
                let draw: f64 = self.rng.as_mut().expect("seeded").gen::<f64>() * mass;
                let mut acc = 0.0;
                for &(i, p) in &kept {
                    acc += p;
                    if draw < acc {
                        return i as u32;
                    }
                }
                kept.last().map_or(0, |k| k.0 as u32)
            }
        }
    }
}

/// Generate from `prompt` with periodic probing or a cache cap, per `cfg.budget`.
pub fn run(model: &TinyModel, vocab: &Vocab, prompt: &[u32], cfg: &DecodeConfig) -> Result<RunRecord, EngineError> {
    if prompt.is_empty() {
        return Err(EngineError::InvalidConfig("prompt must not be empty".into()));
    }
    let mut s = Session::new(model, vocab, cfg, prompt.len())?;
    let started = Instant::now();
    let mut logits = Vec::new();
    for &t in prompt {
        logits = s.feed(t, false)?;
    }
    s.timings.prefill_ms = elapsed_ms(started);

    let mut sampler = Sampler::new(cfg.sampling);
    let mut generated = Vec::new();
    let mut reasoning = 0usize;
    let mut think_end_at = None;
    for _ in 0..cfg.max_new_tokens {
        let decode_started = Instant::now();
        let banned: &[u32] = if reasoning < cfg.min_reasoning_tokens {
            &[THINK_START_ID, EOS_ID, THINK_END_ID]
        } else {
            &[THINK_START_ID]
        };
        let token = sampler.sample(&logits, banned);
        generated.push(token);
        if token == EOS_ID {
            break;
        }
        let position = s.cache.committed_len();
        if think_end_at.is_none() {
            if token == cfg.probe.think_end_token_id {
                think_end_at = Some(position);
            } else {
                reasoning += 1;
                if let BudgetSetting::Periodic { k, .. } = cfg.budget {
                    if reasoning % cfg.probe.interval_p == 0 {
                        s.timings.decode_ms += elapsed_ms(decode_started);
                        s.scheduled_round(k, reasoning)?;
                    }
                }
            }
        }
        if let BudgetSetting::Ratio(budget) = cfg.budget {
            s.overflow_round(&budget, think_end_at, reasoning)?;
        }
        let fed = Instant::now();
        logits = s.feed(token, true)?;
        s.timings.decode_ms += elapsed_ms(fed);
    }
    Ok(s.finish(generated, reasoning, think_end_at))
}

/// Feed an existing trace through the model and run one round over it.
pub fn replay(model: &TinyModel, vocab: &Vocab, trace: &ReasoningTrace, cfg: &DecodeConfig) -> Result<RunRecord, EngineError> {
    let mut s = Session::new(model, vocab, cfg, trace.prompt_len())?;
    for id in trace.ids() {
        if id as usize >= vocab.len() {
            return Err(EngineError::InvalidConfig(format!("token id {id} outside vocabulary")));
        }
    }
    let started = Instant::now();
    for id in trace.ids() {
        s.feed(id, false)?;
    }
    s.timings.prefill_ms = elapsed_ms(started);
    let reasoning = trace.len() - trace.prompt_len();
    let k = match cfg.budget {
        BudgetSetting::Full => 0,
        BudgetSetting::Periodic { k, .. } => k,
        BudgetSetting::Ratio(b) => reasoning.saturating_sub(b.max_slots),
    };
    let started = Instant::now();
    let local = s.trace()?;
    let req = ProbeRequest {
        model,
        vocab,
        trace: &local,
        markers: &cfg.markers,
        probe: &cfg.probe,
        policy: cfg.policy,
        budget: EvictionBudget::new(k),
        history: s.history.as_ref(),
        seed: round_seed(cfg.policy_seed, s.cache.committed_len()),
        capture: cfg.capture_probes,
    };
    let outcome = probe_cycle(&mut s.cache, &req)?;
    s.record_round(RoundTrigger::Replay, reasoning, k, outcome, &local);
    s.timings.probe_ms = elapsed_ms(started);
    let think_end_at = trace
        .tokens()
        .iter()
        .skip(trace.prompt_len())
        .find(|t| t.id == cfg.probe.think_end_token_id)
        .map(|t| t.index);
    Ok(s.finish(Vec::new(), reasoning, think_end_at))
}
