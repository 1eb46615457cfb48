use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use kvprune::cache::CacheBudget;
use kvprune::engine::{self, weights, BudgetSetting, DecodeConfig, RunRecord, Sampling, TinyModel, TinyModelConfig, Vocab, THINK_START_ID};
use kvprune::policy::PolicyKind;
use kvprune::scoring::DEFAULT_INTERVAL;
use kvprune::trace::{MarkerSet, ReasoningTrace};

use crate::io::{read_markers, read_trace, to_json, write_file, CliError};

pub const DEFAULT_PROMPT: &str = "Question: find x such that x plus 2 equals 4.";

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Replay an existing trace instead of generating.
    #[arg(long, conflicts_with = "prompt")]
    pub trace: Option<PathBuf>,
    /// Prompt text for generation mode; `<think>` is appended.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub markers: Option<PathBuf>,
    /// Comma list of full, ours, random, h2o, streaming, or `all`.
    #[arg(long, default_value = "ours")]
    pub policy: String,
    /// Comma list of per-round eviction counts k.
    #[arg(long, conflicts_with = "ratio")]
    pub budget: Option<String>,
    /// Comma list of cache ratios in (0, 1] of a full run's generated length.
    #[arg(long)]
    pub ratio: Option<String>,
    /// Reasoning tokens between probe rounds.
    #[arg(long, default_value_t = DEFAULT_INTERVAL)]
    pub interval: usize,
    /// Most recent tokens never evicted in periodic mode.
    #[arg(long, default_value_t = 0)]
    pub recent: usize,
    /// Seeds as a comma list and/or `a..b` ranges.
    #[arg(long, default_value = "0")]
    pub seed: String,
    /// Model seed for every cell; defaults to each cell's seed.
    #[arg(long, conflicts_with = "weights")]
    pub model_seed: Option<u64>,
    /// Weight file written by `kvprune weights`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    #[arg(long, default_value_t = 0)]
    pub min_reasoning: usize,
    /// Sample with this temperature instead of greedy decoding.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 1.0, requires = "temperature")]
    pub top_p: f64,
    /// Record wall-clock phases; runtime_ms stays empty otherwise.
    #[arg(long)]
    pub timings: bool,
    /// Write each scored round's trace and attention dump.
    #[arg(long)]
    pub dump_probes: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, env = "KVPRUNE_OUT")]
    pub out: Option<PathBuf>,
}

/// A run record as written under `records/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: String,
    pub seed: u64,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub policy: String,
    pub budget: String,
    pub seed: u64,
    pub avg_kv: f64,
    pub peak_kv: usize,
    pub evicted_total: usize,
    pub tokens_generated: usize,
    pub probe_rounds: usize,
    pub runtime_ms: Option<f64>,
}

impl ReportRow {
    pub fn of(seed: u64, r: &RunRecord) -> Self {
        Self {
            policy: r.policy.clone(),
            budget: r.budget.clone(),
            seed,
            avg_kv: r.summary.avg_kv,
            peak_kv: r.summary.peak_kv,
            evicted_total: r.summary.evicted_total,
            tokens_generated: r.generated.len(),
            probe_rounds: r.rounds.len(),
            runtime_ms: r.timings.map(|t| t.total_ms()),
        }
    }
}

#[derive(Debug, Serialize)]
struct LayerStats {
    layer: usize,
    live: Vec<usize>,
    average: f64,
}

/// End-of-run cache statistics.
#[derive(Debug, Serialize)]
struct StatsFile {
    avg_kv: f64,
    peak_kv: usize,
    evicted_total: usize,
    final_avg_kv: f64,
    per_layer: Vec<LayerStats>,
}

impl StatsFile {
    fn of(r: &RunRecord) -> Self {
        let st = &r.final_stats;
        let per_layer = (0..st.num_layers)
            .map(|l| {
                let live = st.live[l * st.num_heads..(l + 1) * st.num_heads].to_vec();
                let average = live.iter().sum::<usize>() as f64 / st.num_heads.max(1) as f64;
                LayerStats { layer: l, live, average }
            })
            .collect();
        Self {
            avg_kv: r.summary.avg_kv,
            peak_kv: r.summary.peak_kv,
            evicted_total: r.summary.evicted_total,
            final_avg_kv: st.average,
            per_layer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CellBudget {
    Full,
    K(usize),
    Ratio(f64),
}

#[derive(Debug, Clone, PartialEq)]
struct Cell {
    seed: u64,
    policy: PolicyKind,
    budget: CellBudget,
}

impl Cell {
    fn name(&self) -> String {
        match self.budget {
            CellBudget::Full => format!("seed{}_full", self.seed),
            CellBudget::K(k) => format!("seed{}_{}_k{k}", self.seed, self.policy),
            CellBudget::Ratio(r) => format!("seed{}_{}_r{r}", self.seed, self.policy),
        }
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = |x: &str| CliError::Input(format!("--seed: cannot parse `{x}`"));
    let mut out = Vec::new();
    for part in split_list(s) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (a.parse().map_err(|_| bad(part))?, b.parse().map_err(|_| bad(part))?);
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| bad(part))?);
        }
    }
    if out.is_empty() {
        return Err(CliError::Input("--seed: no seeds given".into()));
    }
    Ok(out)
}

/// `(include_full, budgeted policies)` from the `--policy` list.
fn parse_policies(s: &str) -> Result<(bool, Vec<PolicyKind>), CliError> {
    let mut full = false;
    let mut kinds = Vec::new();
    for p in split_list(s) {
        match p {
            "full" => full = true,
            "all" => {
                full = true;
                kinds.extend(PolicyKind::ALL);
            }
            other => kinds.push(other.parse().map_err(|e| CliError::Input(format!("--policy: {e}")))?),
        }
    }
    let mut seen = Vec::new();
    kinds.retain(|k| {
        let fresh = !seen.contains(k);
        seen.push(*k);
        fresh
    });
    if !full && kinds.is_empty() {
        return Err(CliError::Input("--policy: no policies given".into()));
    }
    Ok((full, kinds))
}

fn parse_budgets(args: &RunArgs) -> Result<Vec<CellBudget>, CliError> {
    let mut out = Vec::new();
    if let Some(b) = &args.budget {
        for x in split_list(b) {
            out.push(CellBudget::K(x.parse().map_err(|_| CliError::Input(format!("--budget: cannot parse `{x}`")))?));
        }
    }
    if let Some(r) = &args.ratio {
        for x in split_list(r) {
            let v: f64 = x.parse().map_err(|_| CliError::Input(format!("--ratio: cannot parse `{x}`")))?;
            if !(v > 0.0 && v <= 1.0) {
                return Err(CliError::Input(format!("--ratio: {v} is outside (0, 1]")));
            }
            out.push(CellBudget::Ratio(v));
        }
    }
    Ok(out)
}

enum Input {
    Prompt(Vec<u32>),
    Trace(ReasoningTrace),
}

struct Setup {
    input: Input,
    markers: MarkerSet,
    weights: Option<TinyModel>,
    vocab_size: usize,
}

impl Setup {
    fn model(&self, args: &RunArgs, seed: u64) -> Result<(TinyModel, Vocab), CliError> {
        let model = match &self.weights {
            Some(m) => m.clone(),
            None => TinyModel::new(TinyModelConfig::small(self.vocab_size, args.model_seed.unwrap_or(seed)))?,
        };
        let vocab = Vocab::new(model.config.vocab_size)?;
        Ok((model, vocab))
    }

    fn config(&self, args: &RunArgs, seed: u64, policy: PolicyKind, budget: BudgetSetting) -> Result<DecodeConfig, CliError> {
        let mut cfg = DecodeConfig::greedy(args.max_new, policy, budget);
        cfg.probe = cfg
            .probe
            .clone()
            .with_interval(args.interval)
            .map_err(|e| CliError::Input(format!("--interval: {e}")))?;
        cfg.markers = self.markers.clone();
        cfg.policy_seed = seed;
        cfg.min_reasoning_tokens = args.min_reasoning;
        cfg.capture_probes = args.dump_probes;
        cfg.record_timings = args.timings;
        if let Some(temperature) = args.temperature {
            cfg.sampling = Sampling::TopP {
                temperature,
                top_p: args.top_p,
                seed,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn execute(&self, model: &TinyModel, vocab: &Vocab, cfg: &DecodeConfig) -> Result<RunRecord, CliError> {
        let out = match &self.input {
            Input::Prompt(p) => engine::run(model, vocab, p, cfg),
            Input::Trace(t) => engine::replay(model, vocab, t, cfg),
        };
        out.map_err(|e| CliError::Runtime(e.to_string()))
    }
}

fn load_setup(args: &RunArgs) -> Result<Setup, CliError> {
    let markers = read_markers(args.markers.as_deref())?;
    let weights = match &args.weights {
        Some(path) => {
            let f = File::open(path).map_err(|e| CliError::Input(format!("--weights {}: {e}", path.display())))?;
            Some(weights::load(BufReader::new(f)).map_err(|e| CliError::Input(format!("--weights: {e}")))?)
        }
        None => None,
    };
    let vocab_size = match (&weights, args.vocab_size) {
        (Some(m), _) => m.config.vocab_size,
        (None, Some(v)) => v,
        (None, None) => Vocab::base_size() + 16,
    };
    let vocab = Vocab::new(vocab_size).map_err(|e| CliError::Input(format!("--vocab-size: {e}")))?;
    let input = match &args.trace {
        Some(path) => {
            let trace = read_trace(path)?;
            if let Some(t) = trace.tokens().iter().find(|t| t.id as usize >= vocab.len()) {
                return Err(CliError::Input(format!("tokens[{}].id {} is outside the {}-entry vocabulary", t.index, t.id, vocab.len())));
            }
            Input::Trace(trace)
        }
        None => {
            let text = args.prompt.as_deref().unwrap_or(DEFAULT_PROMPT);
            let mut ids = vocab.encode(text).map_err(|e| CliError::Input(format!("--prompt: {e}")))?;
            ids.push(THINK_START_ID);
            Input::Prompt(ids)
        }
    };
    Ok(Setup {
        input,
        markers,
        weights,
        vocab_size,
    })
}

fn budget_setting(args: &RunArgs, budget: CellBudget, full: Option<&RunRecord>, setup: &Setup) -> Result<BudgetSetting, CliError> {
    Ok(match budget {
        CellBudget::Full => BudgetSetting::Full,
        CellBudget::K(k) => BudgetSetting::Periodic {
            k,
            recent_window: args.recent,
        },
        CellBudget::Ratio(r) => {
            // the cap is a share of the full run's generated cache length
            let base = match (&setup.input, full) {
                (Input::Trace(t), _) => t.len().saturating_sub(t.prompt_len()) as f64,
                (Input::Prompt(_), Some(f)) => (f.summary.avg_kv - f.prompt_len as f64).max(0.0),
                (Input::Prompt(_), None) => unreachable!("full run measured first"),
            };
            BudgetSetting::Ratio(CacheBudget::from_ratio(r, base).map_err(|e| CliError::Input(format!("--ratio: {e}")))?)
        }
    })
}

fn run_cell(args: &RunArgs, setup: &Setup, cell: &Cell, full: Option<&RunRecord>) -> Result<RunRecord, CliError> {
    let (model, vocab) = setup.model(args, cell.seed)?;
    let budget = budget_setting(args, cell.budget, full, setup)?;
    let cfg = setup.config(args, cell.seed, cell.policy, budget)?;
    setup.execute(&model, &vocab, &cfg)
}

fn write_cell(out: &Path, cell: &Cell, record: &RunRecord) -> Result<(), CliError> {
    let name = cell.name();
    for cap in &record.captures {
        let dir = out.join("probes").join(&name);
        write_file(&dir.join(format!("round{}_trace.json", cap.round)), to_json(&cap.trace))?;
        write_file(&dir.join(format!("round{}_dump.json", cap.round)), to_json(&cap.dump))?;
    }
    write_file(&out.join("stats").join(format!("{name}.json")), to_json(&StatsFile::of(record)))?;
    let wrapped = CellRecord {
        cell: name.clone(),
        seed: cell.seed,
        record: record.clone(),
    };
    write_file(&out.join("records").join(format!("{name}.json")), to_json(&wrapped))
}

pub fn write_rows(path: &Path, rows: &[ReportRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(path, bytes)
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let out = args
        .out
        .clone()
        .ok_or_else(|| CliError::Input("--out (or KVPRUNE_OUT) is required for run".into()))?;
    if args.jobs == 0 {
        return Err(CliError::Input("--jobs must be at least 1".into()));
    }
    let seeds = parse_seeds(&args.seed)?;
    let (include_full, policies) = parse_policies(&args.policy)?;
    let budgets = parse_budgets(args)?;
    if !policies.is_empty() && budgets.is_empty() {
        return Err(CliError::Input("--budget or --ratio is required for budgeted policies".into()));
    }
    let setup = load_setup(args)?;
    // fail on bad flags before any cell runs
    setup.config(args, 0, PolicyKind::Hierarchical, BudgetSetting::Full)?;
    crate::io::ensure_dir(&out)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let needs_full = include_full || budgets.iter().any(|b| matches!(b, CellBudget::Ratio(_)));
    let full_cells: Vec<Cell> = seeds
        .iter()
        .map(|&seed| Cell {
            seed,
            policy: PolicyKind::Hierarchical,
            budget: CellBudget::Full,
        })
        .collect();
    let full_runs: Vec<Option<Result<RunRecord, CliError>>> = if needs_full {
        pool.install(|| full_cells.par_iter().map(|c| Some(run_cell(args, &setup, c, None))).collect())
    } else {
        full_cells.iter().map(|_| None).collect()
    };

    let mut cells = Vec::new();
    for (i, &seed) in seeds.iter().enumerate() {
        for &policy in &policies {
            for &budget in &budgets {
                cells.push((i, Cell { seed, policy, budget }));
            }
        }
    }
    let results: Vec<Result<RunRecord, CliError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|(i, cell)| match &full_runs[*i] {
                Some(Err(e)) if matches!(cell.budget, CellBudget::Ratio(_)) => {
                    Err(CliError::Runtime(format!("full-KV reference failed: {e}")))
                }
                full => run_cell(args, &setup, cell, full.as_ref().and_then(|r| r.as_ref().ok())),
            })
            .collect()
    });

    // join point: everything below is sequential and ordered
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut emit_one = |cell: &Cell, res: &Result<RunRecord, CliError>| -> Result<(), CliError> {
        match res {
            Ok(record) => {
                write_cell(&out, cell, record)?;
                rows.push(ReportRow::of(cell.seed, record));
            }
            Err(e) => failures.push(format!("{}: {e}", cell.name())),
        }
        Ok(())
    };
    for (i, cell) in full_cells.iter().enumerate() {
        if include_full {
            if let Some(res) = &full_runs[i] {
                emit_one(cell, res)?;
            }
        }
        for ((_, c), res) in cells.iter().zip(&results).filter(|((j, _), _)| *j == i) {
            emit_one(c, res)?;
        }
    }
    write_rows(&out.join("report.csv"), &rows)?;
    if failures.is_empty() {
        eprintln!("kvprune: {} cells written to {}", rows.len(), out.display());
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{} of {} cells failed (partial results in {}): {}",
            failures.len(),
            failures.len() + rows.len(),
            out.display(),
            failures.join("; ")
        )))
    }
}
