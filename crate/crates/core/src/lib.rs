//! Step-aware KV-cache eviction for reasoning traces.
//!
//! A summarization probe ending in `</think>` is appended to the cache; the
//! attention that `</think>` pays to each reasoning token is its score. Tokens
//! are grouped into steps by marker phrases, the eviction budget is handed to
//! the lowest-scoring steps first, and each head drops its own lowest-scoring
//! tokens inside the chosen steps.

pub mod cache;
pub mod candidates;
pub mod engine;
pub mod policy;
pub mod scoring;
pub mod trace;

pub use cache::{BudgetMode, CacheBudget, CacheError, CacheStats, KvCacheState, ProtectedRegions};
pub use candidates::Candidates;
pub use policy::{EvictionBudget, EvictionPlan, PolicyError, PolicyKind, StepAllocation};
pub use scoring::{AttentionDump, ProbeConfig, ScoreTensor, ScoringError, StepScores};
pub use trace::{default_marker_set, segment, MarkerSet, ReasoningTrace, Segmentation, TraceError};
