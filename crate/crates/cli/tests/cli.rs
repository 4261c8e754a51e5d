use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mindrisk_core::fixtures::GoldenPaths;
use mindrisk_core::gateway::{request_key, Tape};
use serde_json::Value;

fn golden() -> GoldenPaths {
    GoldenPaths::new(Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/golden"))
}

fn schema() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/evaluation_report.schema.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn mindrisk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mindrisk"))
        .args(args)
        .env_remove("MINDRISK_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a config replaying `tape` over the golden inputs into `work`.
fn golden_config(dir: &Path, tape: &Path, labels: bool) -> PathBuf {
    let g = golden();
    let input = dir.join("input");
    fs::create_dir_all(&input).unwrap();
    for name in ["behavior.csv", "mental.csv", "sft_pairs.jsonl"] {
        fs::copy(g.input().join(name), input.join(name)).unwrap();
    }
    if labels {
        fs::copy(g.input().join("labels.csv"), input.join("labels.csv")).unwrap();
    }
    let config = format!(
        "profile = \"pmdata\"\n\
         [paths]\ninput_dir = \"input\"\nwork_dir = \"work\"\nsft_input = \"input/sft_pairs.jsonl\"\n\
         [gateway]\nbackend = \"tape\"\ntape = {tape:?}\n\
         [seeds]\naugment_seed = 11\nfold_seed = 7\n",
        tape = tape.display().to_string(),
    );
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    path
}

fn run_stages(config: &Path, stages: &[&str]) -> Vec<Output> {
    stages
        .iter()
        .map(|s| mindrisk(&["--config", config.to_str().unwrap(), s]))
        .collect()
}

#[test]
fn golden_replay_matches_expected_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = golden_config(dir.path(), &golden().tape(), true);
    for out in run_stages(&config, &["ingest", "refine", "assess", "augment"]) {
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let work = dir.path().join("work");
    for name in ["cases.jsonl", "refined.jsonl", "assessments.jsonl", "unanalyzable.jsonl", "augmented.jsonl"] {
        let got = fs::read(work.join(name)).unwrap();
        let want = fs::read(golden().expected().join(name)).unwrap();
        assert!(got == want, "{name} differs from the golden copy");
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(work.join("manifest.json")).unwrap()).unwrap();
    for stage in ["ingest", "refine", "assess", "augment"] {
        assert_eq!(manifest["stages"][stage]["outcome"], "complete");
    }
    assert!(manifest["stages"]["refine"]["tape_digest"].is_string());
}

#[test]
fn evaluation_report_matches_schema_and_golden() {
    let dir = tempfile::tempdir().unwrap();
    let config = golden_config(dir.path(), &golden().tape(), true);
    for out in run_stages(&config, &["ingest", "refine", "assess"]) {
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let out = mindrisk(&["--config", config.to_str().unwrap(), "evaluate", "--rows"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let reports = dir.path().join("work/reports");
    let report: Value = serde_json::from_str(&fs::read_to_string(reports.join("evaluation.json")).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema()).unwrap();
    assert!(validator.is_valid(&report), "{:?}", validator.iter_errors(&report).map(|e| e.to_string()).collect::<Vec<_>>());

    let expected: Value =
        serde_json::from_str(&fs::read_to_string(golden().expected().join("evaluation.json")).unwrap()).unwrap();
    assert_eq!(report, expected["report"]);
    let rows = fs::read_to_string(reports.join("evaluation_rows.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 20);
}

#[test]
fn schema_rejects_malformed_reports() {
    let validator = jsonschema::validator_for(&schema()).unwrap();
    let bad = serde_json::json!({
        "analyzable_cases": 3,
        "unanalyzable_cases": 0,
        "metrics": {"accuracy": 1.5, "precision": 0, "recall": 0, "f1": 0,
                    "counts": {"tp": 0, "fp": 0, "fn": 0, "tn": 3},
                    "excluded_cases": 0, "degenerate": []},
        "consistency": null,
        "join_misses": [],
        "notices": []
    });
    assert!(!validator.is_valid(&bad));
    let missing = serde_json::json!({"analyzable_cases": 3});
    assert!(!validator.is_valid(&missing));
}

#[test]
fn evaluate_without_labels_skips_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = golden_config(dir.path(), &golden().tape(), false);
    for out in run_stages(&config, &["ingest", "refine", "assess", "evaluate"]) {
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("work/reports/evaluation.json")).unwrap()).unwrap();
    assert!(report["metrics"].is_null());
    assert!(!report["notices"].as_array().unwrap().is_empty());
    assert!(report["consistency"].is_object());
    assert!(jsonschema::validator_for(&schema()).unwrap().is_valid(&report));
}

#[test]
fn zero_budget_keeps_initial_rendering() {
    let dir = tempfile::tempdir().unwrap();
    let config = golden_config(dir.path(), &golden().tape(), true);
    let c = config.to_str().unwrap();
    assert_eq!(code(&mindrisk(&["--config", c, "ingest"])), 0);
    let out = mindrisk(&["--config", c, "--k", "0", "refine"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cases: Vec<mindrisk_core::ingestion::AssessmentCase> =
        mindrisk_core::jsonl::read(&dir.path().join("work/cases.jsonl")).unwrap();
    let refined: Vec<mindrisk_core::refine::RefinedRecord> =
        mindrisk_core::jsonl::read(&dir.path().join("work/refined.jsonl")).unwrap();
    assert_eq!(refined.len(), cases.len());
    for (case, r) in cases.iter().zip(&refined) {
        assert_eq!(r.formatted.text, mindrisk_core::refine::render_initial(case).unwrap());
        assert_eq!(r.trace.iterations.len(), 1);
    }
}

#[test]
fn missing_input_dir_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "[paths]\ninput_dir = \"nowhere\"\n").unwrap();
    let out = mindrisk(&["--config", config.to_str().unwrap(), "ingest"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nowhere"), "{}", stderr(&out));
}

#[test]
fn bad_config_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "typo = true\n").unwrap();
    assert_eq!(code(&mindrisk(&["--config", config.to_str().unwrap(), "ingest"])), 2);
    assert_eq!(code(&mindrisk(&["--tau", "2", "ingest"])), 2);
    assert_eq!(code(&mindrisk(&["no-such-command"])), 2);
    assert_eq!(code(&mindrisk(&["fixture", "golden"])), 2);
}

#[test]
fn missing_tape_entry_makes_one_case_unanalyzable() {
    let dir = tempfile::tempdir().unwrap();
    let mut tape = Tape::load(&golden().tape()).unwrap();
    let victim = tape
        .entries()
        .find(|e| {
            golden_verdict_prompts()
                .iter()
                .any(|(p, t)| request_key(p, t) == e.key)
        })
        .map(|e| e.key.clone())
        .expect("a verdict entry");
    tape.remove(&victim).unwrap();
    let tape_path = dir.path().join("cut.jsonl");
    tape.save(&tape_path).unwrap();

    let config = golden_config(dir.path(), &tape_path, true);
    let outs = run_stages(&config, &["ingest", "refine", "assess"]);
    assert_eq!(code(&outs[1]), 0, "{}", stderr(&outs[1]));
    assert_eq!(code(&outs[2]), 1, "partial failure exit");
    let unanalyzable = fs::read_to_string(dir.path().join("work/unanalyzable.jsonl")).unwrap();
    assert_eq!(unanalyzable.lines().count(), 1);
}

/// (prompt, tag) of every verdict request issued in the golden run.
fn golden_verdict_prompts() -> Vec<(String, String)> {
    use mindrisk_core::causal::{assess_all, CausalConfig};
    use mindrisk_core::gateway::TapeBackend;
    use mindrisk_core::prompts::PromptSet;
    use mindrisk_core::{Execution, Gateway};
    let gw = Gateway::from_backend(TapeBackend::new(Tape::load(&golden().tape()).unwrap())).with_logging();
    let cases: Vec<mindrisk_core::ingestion::AssessmentCase> =
        mindrisk_core::jsonl::read(&golden().expected().join("cases.jsonl")).unwrap();
    let refined: Vec<mindrisk_core::refine::RefinedRecord> =
        mindrisk_core::jsonl::read(&golden().expected().join("refined.jsonl")).unwrap();
    let formatted: Vec<_> = refined.into_iter().map(|r| r.formatted).collect();
    assess_all(&cases, &formatted, &CausalConfig::default(), &gw, &PromptSet::default(), Execution::Sequential);
    gw.session_log()
        .unwrap()
        .rows
        .into_iter()
        .filter(|r| r.request_tag.ends_with("/verdict"))
        .map(|r| (r.prompt, r.request_tag))
        .collect()
}

#[test]
fn unreachable_backend_exits_with_transport_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = golden_config(dir.path(), &golden().tape(), true);
    let c = config.to_str().unwrap();
    assert_eq!(code(&mindrisk(&["--config", c, "ingest"])), 0);
    let live = dir.path().join("live.toml");
    let text = fs::read_to_string(&config)
        .unwrap()
        .replace("backend = \"tape\"", "backend = \"live\"")
        + "[gateway.live]\nbase_url = \"http://127.0.0.1:9\"\nretry_count = 1\nbackoff_base_ms = 0\ntimeout_secs = 2\nsupports_scoring = true\n";
    fs::write(&live, text).unwrap();
    let out = mindrisk(&["--config", live.to_str().unwrap(), "refine"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn recorded_log_becomes_a_replayable_tape() {
    let dir = tempfile::tempdir().unwrap();
    let config = golden_config(dir.path(), &golden().tape(), true);
    let sim = dir.path().join("sim.toml");
    let text = fs::read_to_string(&config)
        .unwrap()
        .replace("backend = \"tape\"", "backend = \"simulated\"");
    fs::write(&sim, text).unwrap();
    let s = sim.to_str().unwrap();
    let log = dir.path().join("session.jsonl");
    assert_eq!(code(&mindrisk(&["--config", s, "ingest"])), 0);
    let out = mindrisk(&["--config", s, "--record-log", log.to_str().unwrap(), "refine"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let first = fs::read(dir.path().join("work/refined.jsonl")).unwrap();

    let tape = dir.path().join("tape.jsonl");
    let out = mindrisk(&["record-tape", log.to_str().unwrap(), "--out", tape.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = mindrisk(&["--config", s, "--tape", tape.to_str().unwrap(), "refine"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(dir.path().join("work/refined.jsonl")).unwrap(), first);
}

#[test]
fn synthetic_fixture_then_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("globem");
    let out = mindrisk(&["--seed", "3", "--out", data.to_str().unwrap(), "fixture", "globem"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let config = dir.path().join("run.toml");
    fs::write(&config, "profile = \"globem\"\n[paths]\ninput_dir = \"globem\"\nwork_dir = \"work\"\n").unwrap();
    let out = mindrisk(&["--config", config.to_str().unwrap(), "ingest"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("work/reports/cohort_summary.json")).unwrap(),
    )
    .unwrap();
    let manifest: Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(summary["cases"], manifest["expected_cases"]);
}
