use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use kvprune::candidates::Candidates;
use kvprune::engine::{weights, TinyModel, TinyModelConfig, Vocab};
use kvprune::policy::{plan_for, EvictionBudget, PolicyInputs, PolicyKind};
use kvprune::scoring::{aggregate_step_scores, extract_token_scores, AttentionDump, ScoreFile, ScoreTensor, StepScores};
use kvprune::trace::{segment as split_steps, ReasoningTrace, Segmentation, SegmentationFile};

use crate::io::{emit, read_json, read_markers, read_trace, to_json, write_file, CliError};

pub fn segment_trace(trace: &Path, markers: Option<&Path>) -> Result<(ReasoningTrace, Segmentation), CliError> {
    let trace = read_trace(trace)?;
    let markers = read_markers(markers)?;
    let seg = split_steps(&trace, &markers)?;
    Ok((trace, seg))
}

pub fn segment(trace: &Path, markers: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let (_, seg) = segment_trace(trace, markers)?;
    emit(out, "segmentation.json", &to_json(&SegmentationFile { steps: seg.steps }))
}

/// Candidates of a dump with the `recent` newest trace tokens held back.
fn dump_candidates(dump: &AttentionDump, trace: &ReasoningTrace, recent: usize) -> Candidates {
    let end = trace.len().saturating_sub(recent).max(trace.reason_start());
    dump.candidates(trace).restrict(trace.reason_start()..end)
}

fn scores_from_dump(dump_path: &Path, trace: &ReasoningTrace, recent: usize) -> Result<(ScoreTensor, Candidates), CliError> {
    let dump: AttentionDump = read_json(dump_path)?;
    dump.check(trace)?;
    let cands = dump_candidates(&dump, trace, recent);
    let scores = extract_token_scores(&dump.attention_rows(), trace, &cands)?;
    Ok((scores, cands))
}

pub fn step_table(seg: &Segmentation, step_scores: &StepScores, digest: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# step scores (ascending per layer), scores digest {digest}");
    for l in 0..step_scores.layers.len() {
        let _ = writeln!(s, "\nlayer {l}\n\n| step | tokens | marker | score |\n|---:|---|---|---:|");
        for sc in step_scores.ascending(l) {
            let step = &seg.steps[sc.step];
            let marker = step.marker.as_deref().unwrap_or("-");
            let _ = writeln!(s, "| {} | {}..{} | {} | {:.6e} |", sc.step, step.start, step.end, marker, sc.value);
        }
    }
    s
}

pub fn score(trace: &Path, dump: &Path, markers: Option<&Path>, recent: usize, out: Option<&Path>) -> Result<(), CliError> {
    let (trace, seg) = segment_trace(trace, markers)?;
    let (scores, _) = scores_from_dump(dump, &trace, recent)?;
    let step_scores = aggregate_step_scores(&scores, &seg);
    let table = step_table(&seg, &step_scores, &scores.digest());
    let json = to_json(&scores.to_file());
    match out {
        Some(dir) => {
            write_file(&dir.join("scores.json"), json)?;
            write_file(&dir.join("steps.md"), table)
        }
        None => {
            // keep stdout machine-readable
            print!("{json}");
            eprint!("{table}");
            Ok(())
        }
    }
}

pub struct PlanRequest<'a> {
    pub trace: &'a Path,
    pub scores: Option<&'a Path>,
    pub dump: Option<&'a Path>,
    pub markers: Option<&'a Path>,
    pub policy: &'a str,
    pub budget: usize,
    pub seed: u64,
    pub recent: usize,
    pub out: Option<&'a Path>,
}

pub fn plan(req: PlanRequest<'_>) -> Result<(), CliError> {
    let policy: PolicyKind = req.policy.parse()?;
    let (trace, seg) = segment_trace(req.trace, req.markers)?;
    let end = trace.len().saturating_sub(req.recent).max(trace.reason_start());
    let (scores, cands) = match (req.scores, req.dump) {
        (_, Some(dump)) => scores_from_dump(dump, &trace, req.recent)?,
        (Some(path), None) => {
            let file: ScoreFile = read_json(path)?;
            let scores = file.into_tensor()?;
            // the scored tokens are the candidates
            let sets = (0..scores.num_layers() * scores.num_heads())
                .map(|i| {
                    let head = scores.head(i / scores.num_heads(), i % scores.num_heads());
                    head.keys().copied().filter(|t| (trace.reason_start()..end).contains(t)).collect::<BTreeSet<_>>()
                })
                .collect();
            let cands = Candidates::from_sets(scores.num_layers(), scores.num_heads(), sets);
            (scores, cands)
        }
        (None, None) => return Err(CliError::Input("one of --scores or --dump is required".into())),
    };
    if scores.num_layers() != cands.num_layers() || scores.num_heads() != cands.num_heads() {
        return Err(CliError::Input("scores: layer/head shape differs from the candidates".into()));
    }
    let outside = (0..scores.num_layers() * scores.num_heads())
        .flat_map(|i| scores.head(i / scores.num_heads(), i % scores.num_heads()).keys())
        .find(|&&t| t >= trace.len());
    if let Some(t) = outside {
        return Err(CliError::Input(format!("scores: token {t} is outside the {}-token trace", trace.len())));
    }
    let inputs = PolicyInputs {
        scores: Some(&scores),
        segmentation: Some(&seg),
        history: None,
        seed: req.seed,
    };
    let outcome = plan_for(policy, inputs, &cands, EvictionBudget::new(req.budget))?;
    let file = outcome.plan.to_file(outcome.allocation.as_ref());
    emit(req.out, "plan.json", &to_json(&file))
}

pub fn weights(seed: u64, vocab_size: Option<usize>, file: &Path) -> Result<(), CliError> {
    let vocab = Vocab::new(vocab_size.unwrap_or(Vocab::base_size() + 16))?;
    let model = TinyModel::new(TinyModelConfig::small(vocab.len(), seed))?;
    if let Some(parent) = file.parent() {
        crate::io::ensure_dir(parent)?;
    }
    let f = File::create(file).map_err(|e| CliError::Input(format!("cannot create {}: {e}", file.display())))?;
    weights::save(&model, BufWriter::new(f))?;
    Ok(())
}
