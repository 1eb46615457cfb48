use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use kvprune::engine::{ProbeRecord, RunRecord};

use crate::experiment::{write_rows, CellRecord, ReportRow};
use crate::io::{collect_json, read_json, write_file, CliError};

#[derive(Debug, Serialize)]
struct OccupancyRow<'a> {
    cell: &'a str,
    position: usize,
    avg_live: f64,
    max_live: usize,
    max_generated_live: usize,
    evicted_total: usize,
}

#[derive(Debug, Serialize)]
struct StepRow<'a> {
    cell: &'a str,
    round: usize,
    step: usize,
    start: usize,
    end: usize,
    marker: Option<&'a str>,
    mean_score: Option<f64>,
    evicted: usize,
    /// Position of the step in layer 0's allocation order, if it received any.
    alloc_rank: Option<usize>,
}

#[derive(Debug, Serialize)]
struct HistogramRow<'a> {
    cell: &'a str,
    round: usize,
    bin: usize,
    lo: f64,
    hi: f64,
    count: usize,
}

fn load(path: &Path) -> Result<CellRecord, CliError> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("record").is_some() {
        return serde_json::from_value(value).map_err(|e| CliError::Input(format!("{}: {e}", path.display())));
    }
    // a bare record: name it after the file
    let record: RunRecord = serde_json::from_value(value).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let cell = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(CellRecord { cell, seed: 0, record })
}

fn first_step(round: &ProbeRecord) -> Option<usize> {
    round.allocation.as_ref()?.layers.first()?.first().map(|s| s.step)
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

fn comparison(records: &[CellRecord]) -> String {
    let mut groups: BTreeMap<(&str, &str), Vec<&RunRecord>> = BTreeMap::new();
    for c in records {
        groups.entry((&c.record.policy, &c.record.budget)).or_default().push(&c.record);
    }
    let mut s = String::from(
        "## Comparison by policy\n\n| policy | budget | runs | avg_kv | peak_kv | evicted_total | tokens_generated | probe_rounds |\n|---|---|---:|---:|---:|---:|---:|---:|\n",
    );
    for ((policy, budget), rs) in &groups {
        let n = rs.len() as f64;
        let mean = |f: &dyn Fn(&RunRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        let _ = writeln!(
            s,
            "| {policy} | {budget} | {} | {:.3} | {:.2} | {:.2} | {:.2} | {:.2} |",
            rs.len(),
            mean(&|r| r.summary.avg_kv),
            mean(&|r| r.summary.peak_kv as f64),
            mean(&|r| r.summary.evicted_total as f64),
            mean(&|r| r.generated.len() as f64),
            mean(&|r| r.rounds.len() as f64),
        );
    }
    s
}

fn section(c: &CellRecord) -> String {
    let r = &c.record;
    let mut s = String::new();
    let _ = writeln!(s, "## {}\n", c.cell);
    let _ = writeln!(
        s,
        "policy `{}`, budget `{}`, seed {}, prompt {} tokens, {} generated, {} reasoning, think end at {}\n",
        r.policy,
        r.budget,
        c.seed,
        r.prompt_len,
        r.generated.len(),
        r.reasoning_tokens,
        r.think_end_at.map_or("-".to_string(), |p| p.to_string()),
    );
    let _ = writeln!(
        s,
        "avg_kv {:.3}, peak_kv {}, max generated live {}, evicted {}\n",
        r.summary.avg_kv, r.summary.peak_kv, r.summary.max_generated_live, r.summary.evicted_total
    );
    for round in &r.rounds {
        let _ = write!(s, "### round {} ({:?} at position {}, k {})", round.round, round.trigger, round.position, round.budget);
        if let Some(why) = &round.skipped {
            let _ = writeln!(s, ": skipped, {why}\n");
            continue;
        }
        let first = first_step(round).map_or("-".to_string(), |f| f.to_string());
        let _ = writeln!(s, "\n\nscored tokens {}, first evicted step {first}\n", round.scored_tokens);
        if let Some(h) = &round.histogram {
            let width = if h.counts.is_empty() { 0.0 } else { (h.hi - h.lo) / h.counts.len() as f64 };
            let _ = writeln!(s, "score histogram (bin width {width:.3e}): {:?}\n", h.counts);
        }
        if !round.steps.is_empty() {
            s.push_str("| step | tokens | marker | mean score | evicted |\n|---:|---|---|---:|---:|\n");
            for st in &round.steps {
                let score = st.mean_score.map_or("-".to_string(), |v| format!("{v:.4e}"));
                let _ = writeln!(
                    s,
                    "| {} | {}..{} | {} | {score} | {} |",
                    st.step,
                    st.start,
                    st.end,
                    st.marker.as_deref().unwrap_or("-"),
                    st.evicted
                );
            }
            s.push('\n');
        }
    }
    s
}

pub fn report(paths: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let files = collect_json(paths)?;
    if files.is_empty() {
        return Err(CliError::Input("report: no run records given".into()));
    }
    let records = files.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;

    let mut md = format!("# kvprune report\n\n{} records\n\n", records.len());
    md.push_str(&comparison(&records));
    md.push('\n');
    for c in &records {
        md.push_str(&section(c));
    }
    let Some(out) = out else {
        print!("{md}");
        return Ok(());
    };
    write_file(&out.join("report.md"), &md)?;

    let rows: Vec<ReportRow> = records.iter().map(|c| ReportRow::of(c.seed, &c.record)).collect();
    write_rows(&out.join("summary.csv"), &rows)?;

    let occupancy = records.iter().flat_map(|c| {
        c.record.occupancy.iter().map(move |o| OccupancyRow {
            cell: &c.cell,
            position: o.position,
            avg_live: o.avg_live,
            max_live: o.max_live,
            max_generated_live: o.max_generated_live,
            evicted_total: o.evicted_total,
        })
    });
    write_file(&out.join("occupancy.csv"), csv_bytes(occupancy)?)?;

    let steps = records.iter().flat_map(|c| {
        c.record.rounds.iter().flat_map(move |round| {
            let order: Vec<usize> = round
                .allocation
                .as_ref()
                .and_then(|a| a.layers.first())
                .map(|l| l.iter().map(|s| s.step).collect())
                .unwrap_or_default();
            round.steps.iter().map(move |st| StepRow {
                cell: &c.cell,
                round: round.round,
                step: st.step,
                start: st.start,
                end: st.end,
                marker: st.marker.as_deref(),
                mean_score: st.mean_score,
                evicted: st.evicted,
                alloc_rank: order.iter().position(|&s| s == st.step),
            })
        })
    });
    write_file(&out.join("steps.csv"), csv_bytes(steps)?)?;

    let hist = records.iter().flat_map(|c| {
        c.record.rounds.iter().filter_map(move |round| {
            let h = round.histogram.as_ref()?;
            let width = (h.hi - h.lo) / h.counts.len().max(1) as f64;
            Some(h.counts.iter().enumerate().map(move |(bin, &count)| HistogramRow {
                cell: &c.cell,
                round: round.round,
                bin,
                lo: h.lo + bin as f64 * width,
                hi: h.lo + (bin + 1) as f64 * width,
                count,
            }))
        })
    });
    write_file(&out.join("histograms.csv"), csv_bytes(hist.flatten())?)?;
    Ok(())
}
