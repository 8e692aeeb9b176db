use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mrt_core::estimator::{estimate, EffectSpec};
use mrt_core::pipeline::export::{export, Format};
use mrt_core::pipeline::{assemble, Variant};
use mrt_core::sim::{run, EffectConfig, ScenarioConfig};

fn mrt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrt")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small() -> ScenarioConfig {
    let mut s = ScenarioConfig::standard(5);
    s.trial.participant_count = 5;
    s.trial.study_days = 10;
    s.effect = EffectConfig::constant(30.0);
    s
}

fn write_scenario(dir: &Path, s: &ScenarioConfig) -> String {
    let path = dir.join("scenario.json");
    fs::write(&path, serde_json::to_string_pretty(s).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn count_reports_the_default_design() {
    let o = mrt(&["count", "--config", "default", "--component", "suggestions"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "7770");
    let o = mrt(&["count"]);
    assert!(stdout(&o).contains("total          9324"), "{}", stdout(&o));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), &small());
    let (a, b) = (p(dir.path(), "a"), p(dir.path(), "b"));
    assert!(mrt(&["simulate", "--scenario", &scenario, "--seed", "7", "--out", &a]).status.success());
    assert!(mrt(&["simulate", "--scenario", &scenario, "--seed", "7", "--out", &b]).status.success());
    for f in ["events.jsonl", "ledger.json", "ledger.sha256"] {
        assert_eq!(fs::read(Path::new(&a).join(f)).unwrap(), fs::read(Path::new(&b).join(f)).unwrap(), "{f}");
    }
}

#[test]
fn malformed_scenario_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = p(dir.path(), "bad.json");
    fs::write(&path, "{\n  \"trial\": {\"participant_count\": \"many\"}\n}\n").unwrap();
    let o = mrt(&["simulate", "--scenario", &path, "--out", &p(dir.path(), "out")]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn unknown_flags_are_rejected() {
    assert_eq!(mrt(&["simulate", "--out", "x", "--frobnicate"]).status.code(), Some(1));
    assert_eq!(mrt(&["count", "--variant", "zero"]).status.code(), Some(1));
}

#[test]
fn file_stages_reproduce_the_in_process_result() {
    let dir = tempfile::tempdir().unwrap();
    let s = small();
    let scenario = write_scenario(dir.path(), &s);
    let out = p(dir.path(), "run");
    assert!(mrt(&["simulate", "--scenario", &scenario, "--out", &out]).status.success());
    let events = p(Path::new(&out), "events.jsonl");
    assert!(mrt(&["export", "--events", &events, "--out", &out, "--variant", "zero"]).status.success());
    let data = p(Path::new(&out), "dataset.zero.csv");
    let o = mrt(&["analyze", "--data", &data, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = mrt(&["audit", "--data", &data, "--events", &events]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    let (log, _) = run(&s).unwrap();
    assert_eq!(fs::read_to_string(&events).unwrap(), log.to_jsonl().unwrap());
    let d = assemble(&log).unwrap();
    let rows = d.variant(Variant::Zero);
    assert_eq!(fs::read_to_string(&data).unwrap(), export(&rows, &d.daily_measures, Format::Csv).unwrap());
    let est = estimate(&rows, &EffectSpec::main_effect("suggestions")).unwrap();
    let on_disk = fs::read_to_string(Path::new(&out).join("analysis.json")).unwrap();
    assert_eq!(on_disk.trim_end(), serde_json::to_string_pretty(&est).unwrap());
}

#[test]
fn replay_rebuilds_exports_and_audit_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), &small());
    let out = p(dir.path(), "run");
    assert!(mrt(&["simulate", "--scenario", &scenario, "--out", &out]).status.success());
    let events = p(Path::new(&out), "events.jsonl");
    assert!(mrt(&["export", "--events", &events, "--out", &out, "--variant", "redundant"]).status.success());
    let replayed = p(dir.path(), "replay");
    assert!(mrt(&["replay", "--events", &events, "--out", &replayed]).status.success());
    let original = fs::read_to_string(Path::new(&out).join("dataset.redundant.csv")).unwrap();
    assert_eq!(fs::read_to_string(Path::new(&replayed).join("dataset.redundant.csv")).unwrap(), original);

    // Blank one engagement cell.
    let mut lines: Vec<String> = original.lines().map(str::to_string).collect();
    let col = lines[0].split(',').position(|c| c == "engagement").unwrap();
    let mut cells: Vec<String> = lines[3].split(',').map(str::to_string).collect();
    cells[col].clear();
    lines[3] = cells.join(",");
    let bad = p(dir.path(), "bad.csv");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let o = mrt(&["audit", "--data", &bad, "--events", &events, "--out", &p(dir.path(), "report")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("row 2, column engagement"), "{}", stdout(&o));
    assert!(dir.path().join("report/audit.json").exists());
}
