use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use kvprune::engine::RunRecord;
use kvprune::policy::PlanFile;
use kvprune::scoring::ScoreFile;
use kvprune::trace::{default_marker_set, segment, ReasoningTrace, SegmentationFile, TraceFile};

fn kvprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvprune"))
        .args(args)
        .env_remove("KVPRUNE_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = kvprune(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string(value).unwrap()).unwrap();
    p
}

fn word_trace(prompt: &[&str], reasoning: &[&str]) -> ReasoningTrace {
    let all = prompt.iter().chain(reasoning).map(|w| (7u32, w.to_string()));
    ReasoningTrace::new(prompt.len(), all).unwrap()
}

fn trace_json(trace: &ReasoningTrace) -> Value {
    serde_json::to_value(TraceFile::from(trace)).unwrap()
}

fn three_marker_trace() -> ReasoningTrace {
    word_trace(
        &["Solve", " it", "<think>"],
        &["Let me", " add", ".", " Wait", ",", " check", ".", " So", " done", "."],
    )
}

fn read<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn record(dir: &Path, cell: &str) -> RunRecord {
    let v: Value = read(&dir.join("records").join(format!("{cell}.json")));
    assert_eq!(v["cell"], cell);
    serde_json::from_value(v["record"].clone()).unwrap()
}

#[test]
fn segment_writes_oracle_steps() {
    let dir = tempfile::tempdir().unwrap();
    let trace = three_marker_trace();
    let tp = write(dir.path(), "t.json", &trace_json(&trace));
    let out = ok(&["segment", "--trace", s(&tp)]);
    let file: SegmentationFile = serde_json::from_slice(&out.stdout).unwrap();
    let want = segment(&trace, &default_marker_set()).unwrap();
    assert_eq!(file.steps, want.steps);
    assert_eq!(file.steps.len(), 3);
    let markers: Vec<_> = file.steps.iter().map(|s| s.marker.as_deref()).collect();
    assert_eq!(markers, [Some("Let me"), Some("Wait"), Some("So")]);

    // writes into --out, and KVPRUNE_OUT supplies the default
    let od = dir.path().join("o");
    ok(&["segment", "--trace", s(&tp), "--out", s(&od)]);
    let again: SegmentationFile = read(&od.join("segmentation.json"));
    assert_eq!(again, file);
    let ed = dir.path().join("env");
    let st = Command::new(env!("CARGO_BIN_EXE_kvprune"))
        .args(["segment", "--trace", s(&tp)])
        .env("KVPRUNE_OUT", &ed)
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(read::<SegmentationFile>(&ed.join("segmentation.json")), file);
}

#[test]
fn segment_input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = word_trace(&["a", "b"], &[]);
    let tp = write(dir.path(), "e.json", &trace_json(&empty));
    let out = kvprune(&["segment", "--trace", s(&tp)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("EmptyReasoningRegion"));

    let bad = write(dir.path(), "bad.json", &json!({"tokens": []}));
    let out = kvprune(&["segment", "--trace", s(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("prompt_len"));

    let typed = write(dir.path(), "typed.json", &json!({"prompt_len": 0, "tokens": [{"id": "x", "text": "a"}]}));
    assert_eq!(code(&kvprune(&["segment", "--trace", s(&typed)])), 2);
    assert_eq!(code(&kvprune(&["segment", "--trace", "/nonexistent/t.json"])), 2);
}

#[test]
fn custom_markers_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let trace = three_marker_trace();
    let tp = write(dir.path(), "t.json", &trace_json(&trace));
    for (name, contents) in [("m.txt", " check\n\n"), ("m.json", "[\" check\"]")] {
        let mp = dir.path().join(name);
        fs::write(&mp, contents).unwrap();
        let out = ok(&["segment", "--trace", s(&tp), "--markers", s(&mp)]);
        let file: SegmentationFile = serde_json::from_slice(&out.stdout).unwrap();
        let starts: Vec<_> = file.steps.iter().map(|s| (s.start, s.marker.clone())).collect();
        assert_eq!(starts, [(3, None), (8, Some(" check".to_string()))], "{name}");
    }
}

fn uniform_dump(trace: &ReasoningTrace, layers: usize, heads: usize) -> Value {
    let n = trace.len() + 1;
    let row = vec![1.0 / n as f64; n];
    json!({
        "layers": layers,
        "heads": heads,
        "probe_position": trace.len(),
        "rows": vec![vec![row; heads]; layers],
    })
}

#[test]
fn score_uniform_dump_gives_equal_steps() {
    let dir = tempfile::tempdir().unwrap();
    let trace = three_marker_trace();
    let tp = write(dir.path(), "t.json", &trace_json(&trace));
    let dp = write(dir.path(), "d.json", &uniform_dump(&trace, 2, 2));
    let od = dir.path().join("o");
    ok(&["score", "--trace", s(&tp), "--dump", s(&dp), "--out", s(&od)]);
    let scores = read::<ScoreFile>(&od.join("scores.json")).into_tensor().unwrap();
    let seg = segment(&trace, &default_marker_set()).unwrap();
    let c = kvprune::scoring::aggregate_step_scores(&scores, &seg);
    let all: Vec<f64> = (0..2).flat_map(|l| c.ascending(l)).map(|x| x.value).collect();
    assert_eq!(all.len(), 6);
    assert!(all.iter().all(|v| (v - all[0]).abs() <= 1e-9));
    let table = fs::read_to_string(od.join("steps.md")).unwrap();
    assert!(table.contains(&scores.digest()));
    assert!(table.contains("layer 1"));
}

#[test]
fn score_rejects_mismatched_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let trace = three_marker_trace();
    let tp = write(dir.path(), "t.json", &trace_json(&trace));
    let mut truncated = uniform_dump(&trace, 1, 1);
    truncated["rows"][0][0].as_array_mut().unwrap().truncate(4);
    let mut short = uniform_dump(&trace, 2, 2);
    short["rows"].as_array_mut().unwrap().pop();
    let mut early = uniform_dump(&trace, 1, 1);
    early["probe_position"] = json!(3);
    for (name, dump) in [("trunc", truncated), ("short", short), ("early", early)] {
        let dp = write(dir.path(), &format!("{name}.json"), &dump);
        let out = kvprune(&["score", "--trace", s(&tp), "--dump", s(&dp)]);
        assert_eq!(code(&out), 2, "{name}");
        let plan = kvprune(&["plan", "--trace", s(&tp), "--dump", s(&dp), "--budget", "1"]);
        assert_eq!(code(&plan), 2, "{name}");
    }
}

#[test]
fn plan_policies_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let trace = three_marker_trace();
    let tp = write(dir.path(), "t.json", &trace_json(&trace));
    let dp = write(dir.path(), "d.json", &uniform_dump(&trace, 1, 2));
    for policy in ["ours", "random", "h2o", "streaming"] {
        let out = ok(&["plan", "--trace", s(&tp), "--dump", s(&dp), "--policy", policy, "--budget", "3", "--recent", "2"]);
        let plan = serde_json::from_slice::<PlanFile>(&out.stdout).unwrap().to_plan();
        for (_, _, set) in plan.iter() {
            assert_eq!(set.len(), 3, "{policy}");
            assert!(set.iter().all(|&t| (3..11).contains(&t)), "{policy}: {set:?}");
        }
        if policy == "streaming" {
            assert_eq!(plan.head(0, 1).iter().copied().collect::<Vec<_>>(), [3, 4, 5]);
        }
        let again = ok(&["plan", "--trace", s(&tp), "--dump", s(&dp), "--policy", policy, "--budget", "3", "--recent", "2"]);
        assert_eq!(again.stdout, out.stdout);
    }
    assert_eq!(code(&kvprune(&["plan", "--trace", s(&tp), "--dump", s(&dp), "--policy", "best", "--budget", "1"])), 2);
    // clap usage errors share the input-error code
    assert_eq!(code(&kvprune(&["plan", "--trace", s(&tp), "--budget", "1"])), 2);
    let foreign = write(dir.path(), "s.json", &json!({"layers": 1, "heads": 1, "scores": [[[[99, 0.5]]]]}));
    assert_eq!(code(&kvprune(&["plan", "--trace", s(&tp), "--scores", s(&foreign), "--budget", "1"])), 2);
}

#[test]
fn probe_dumps_round_trip_to_engine_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let od = dir.path().join("run");
    ok(&[
        "run", "--policy", "ours", "--budget", "4", "--interval", "16", "--recent", "4", "--seed", "3",
        "--min-reasoning", "64", "--dump-probes", "--out", s(&od),
    ]);
    let rec = record(&od, "seed3_ours_k4");
    assert_eq!(rec.rounds.len(), 4);
    for round in &rec.rounds {
        let probes = od.join("probes").join("seed3_ours_k4");
        let tp = probes.join(format!("round{}_trace.json", round.round));
        let dp = probes.join(format!("round{}_dump.json", round.round));
        let sd = dir.path().join(format!("score{}", round.round));
        ok(&["score", "--trace", s(&tp), "--dump", s(&dp), "--recent", "4", "--out", s(&sd)]);
        let scores = read::<ScoreFile>(&sd.join("scores.json")).into_tensor().unwrap();
        assert_eq!(Some(scores.digest()), round.scores_digest, "round {}", round.round);

        let event = rec.evictions.iter().find(|e| e.position == round.position).expect("round evicted");
        let sp = sd.join("scores.json");
        for source in [["--dump", s(&dp)], ["--scores", s(&sp)]] {
            let out = ok(&[
                "plan", "--trace", s(&tp), source[0], source[1], "--budget", "4", "--recent", "4",
            ]);
            let file: PlanFile = serde_json::from_slice(&out.stdout).unwrap();
            let plan = file.to_plan();
            for he in &event.heads {
                assert_eq!(plan.head(he.layer, he.head).iter().copied().collect::<Vec<_>>(), he.tokens);
            }
            assert_eq!(plan.total(), event.heads.iter().map(|h| h.tokens.len()).sum::<usize>());
            assert_eq!(Some(&file.allocation), round.allocation.as_ref().map(|a| &a.layers));
        }
    }
}

fn run_sweep(out: &Path, jobs: &str) -> Vec<u8> {
    ok(&[
        "run", "--policy", "full,ours", "--budget", "8", "--interval", "16", "--recent", "4", "--seed", "0..3",
        "--min-reasoning", "64", "--jobs", jobs, "--out", s(out),
    ]);
    fs::read(out.join("report.csv")).unwrap()
}

#[test]
fn sweep_is_deterministic_and_ours_is_smaller() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_sweep(&dir.path().join("a"), "1");
    let b = run_sweep(&dir.path().join("b"), "4");
    assert_eq!(a, b);
    let mut rdr = csv::Reader::from_reader(a.as_slice());
    let rows: Vec<BTreeMap<String, String>> = rdr.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    for pair in rows.chunks(2) {
        assert_eq!(pair[0]["policy"], "full");
        assert_eq!(pair[1]["policy"], "ours");
        assert_eq!(pair[0]["seed"], pair[1]["seed"]);
        let (full, ours): (f64, f64) = (pair[0]["avg_kv"].parse().unwrap(), pair[1]["avg_kv"].parse().unwrap());
        assert!(ours < full, "{ours} vs {full}");
        assert_eq!(pair[1]["runtime_ms"], "");
    }
    for cell in ["seed0_full", "seed2_ours_k8"] {
        assert_eq!(
            fs::read(dir.path().join("a/records").join(format!("{cell}.json"))).unwrap(),
            fs::read(dir.path().join("b/records").join(format!("{cell}.json"))).unwrap()
        );
    }
}

#[test]
fn ratio_run_peak_stays_under_cap() {
    let dir = tempfile::tempdir().unwrap();
    let od = dir.path().join("r");
    ok(&["run", "--policy", "full,ours,streaming", "--ratio", "0.5", "--seed", "5", "--min-reasoning", "64", "--out", s(&od)]);
    let full = record(&od, "seed5_full");
    let base = full.summary.avg_kv - full.prompt_len as f64;
    for cell in ["seed5_ours_r0.5", "seed5_streaming_r0.5"] {
        let r = record(&od, cell);
        assert!((r.summary.peak_kv - r.prompt_len) as f64 <= (0.5 * base).floor(), "{cell}");
        assert!(r.summary.evicted_total > 0);
    }
    let stats: Value = read(&od.join("stats/seed5_ours_r0.5.json"));
    assert!(stats["per_layer"].as_array().unwrap().len() == 2);
    assert!(stats["avg_kv"].as_f64().unwrap() > 0.0);
}

#[test]
fn run_input_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let od = s(dir.path());
    assert_eq!(code(&kvprune(&["run", "--policy", "ours", "--out", od])), 2);
    assert_eq!(code(&kvprune(&["run", "--policy", "full", "--prompt", "zzz unknown", "--out", od])), 2);
    assert_eq!(code(&kvprune(&["run", "--policy", "ours", "--ratio", "1.5", "--out", od])), 2);
    assert_eq!(code(&kvprune(&["run", "--policy", "full", "--interval", "0", "--out", od])), 2);
    assert_eq!(code(&kvprune(&["run", "--policy", "full", "--temperature", "0", "--out", od])), 2);
    assert_eq!(code(&kvprune(&["run", "--policy", "full"])), 2);

    // sequences past the model's context fail at run time; finished cells are kept
    let rd = dir.path().join("long");
    let out = kvprune(&["run", "--policy", "full", "--seed", "0..12", "--max-new", "1100", "--out", s(&rd)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("partial"));
    let csv = fs::read_to_string(rd.join("report.csv")).unwrap();
    let written = fs::read_dir(rd.join("records")).map(|d| d.count()).unwrap_or(0);
    assert!((1..12).contains(&written), "{written} cells finished");
    assert_eq!(csv.lines().count(), 1 + written);
}

#[test]
fn replay_and_weight_files() {
    let dir = tempfile::tempdir().unwrap();
    let wp = dir.path().join("w.bin");
    ok(&["weights", "--seed", "9", "--vocab-size", "272", "--file", s(&wp)]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let common = ["run", "--policy", "ours", "--budget", "4", "--interval", "16", "--min-reasoning", "32", "--max-new", "32"];
    ok(&[&common[..], &["--weights", s(&wp), "--out", s(&a)]].concat());
    ok(&[&common[..], &["--model-seed", "9", "--vocab-size", "272", "--out", s(&b)]].concat());
    assert_eq!(fs::read(a.join("report.csv")).unwrap(), fs::read(b.join("report.csv")).unwrap());

    // replay the generated sequence as a trace
    let rec = record(&a, "seed0_ours_k4");
    let vocab = kvprune::engine::Vocab::new(272).unwrap();
    let trace = ReasoningTrace::new(rec.prompt_len, rec.tokens.iter().map(|&id| (id, vocab.text(id).to_string()))).unwrap();
    let tp = write(dir.path(), "t.json", &trace_json(&trace));
    let rd = dir.path().join("replay");
    ok(&["run", "--trace", s(&tp), "--policy", "ours,random", "--budget", "5", "--weights", s(&wp), "--out", s(&rd)]);
    for cell in ["seed0_ours_k5", "seed0_random_k5"] {
        let r = record(&rd, cell);
        assert_eq!(r.rounds.len(), 1);
        assert!(r.rounds[0].plan_sizes.iter().all(|&n| n == 5), "{cell}");
    }
    let bad = write(dir.path(), "big.json", &json!({"prompt_len": 1, "tokens": [{"id": 1, "text": "a"}, {"id": 999, "text": "b"}]}));
    assert_eq!(code(&kvprune(&["run", "--trace", s(&bad), "--policy", "full", "--out", s(&rd)])), 2);
}

#[test]
fn report_sections_tables_and_conservation() {
    let dir = tempfile::tempdir().unwrap();
    let od = dir.path().join("run");
    ok(&[
        "run", "--policy", "full,ours,random", "--budget", "6", "--interval", "16", "--recent", "2", "--seed", "1",
        "--min-reasoning", "48", "--max-new", "48", "--out", s(&od),
    ]);
    let rd = dir.path().join("one");
    ok(&["report", s(&od.join("records/seed1_ours_k6.json")), "--out", s(&rd)]);
    let md = fs::read_to_string(rd.join("report.md")).unwrap();
    assert_eq!(md.matches("\n## seed").count(), 1);

    let rd = dir.path().join("all");
    ok(&["report", s(&od.join("records")), "--out", s(&rd)]);
    let md = fs::read_to_string(rd.join("report.md")).unwrap();
    assert_eq!(md.matches("\n## seed").count(), 3);
    let table = md.split("## Comparison by policy").nth(1).unwrap();
    for policy in ["| full | none |", "| ours | k=6 |", "| random | k=6 |"] {
        assert!(table.contains(policy), "{policy}");
    }

    // histogram bins sum to the scored tokens of their round
    let rec = record(&od, "seed1_ours_k6");
    let mut sums: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(rd.join("histograms.csv")).unwrap();
    for row in rdr.deserialize::<BTreeMap<String, String>>() {
        let row = row.unwrap();
        if row["cell"] == "seed1_ours_k6" {
            *sums.entry(row["round"].parse().unwrap()).or_default() += row["count"].parse::<usize>().unwrap();
        }
    }
    assert_eq!(sums.len(), rec.rounds.len());
    for r in &rec.rounds {
        assert!(r.scored_tokens > 0);
        assert_eq!(sums[&r.round], r.scored_tokens);
    }
    let occ = fs::read_to_string(rd.join("occupancy.csv")).unwrap();
    assert_eq!(occ.lines().filter(|l| l.starts_with("seed1_full,")).count(), 48);
    assert!(fs::read_to_string(rd.join("steps.csv")).unwrap().lines().count() > 1);
    assert_eq!(fs::read_to_string(rd.join("summary.csv")).unwrap().lines().count(), 4);

    // report with nothing to read
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&kvprune(&["report", s(&empty)])), 2);
    assert_eq!(code(&kvprune(&["report"])), 2);
}
