use mrt_core::audit::inject::{catalog, Corruption};
use mrt_core::audit::{audit_text, run_audit, Locator, Status};
use mrt_core::model::ParticipantId;
use mrt_core::pipeline::export::{to_table, Format};
use mrt_core::pipeline::{assemble, Variant};
use mrt_core::sim::{run, EventLog, FaultKind, FaultSpec, FaultTargets, ScenarioConfig};
use mrt_core::time::Timestamp;

fn scenario(seed: u64) -> ScenarioConfig {
    let mut s = ScenarioConfig::standard(seed);
    s.trial.participant_count = 4;
    s.trial.study_days = 7;
    let at: Timestamp = "2025-03-04T15:00:00Z".parse().unwrap();
    let one = |p| FaultTargets::Participants(vec![ParticipantId(p)]);
    s.faults = vec![
        FaultSpec::window(FaultKind::BluetoothOff, one(0), at, at.plus_seconds(6 * 3600)),
        FaultSpec::window(FaultKind::AckLoss, one(1), at, at.plus_seconds(3 * 3600)),
        FaultSpec::window(FaultKind::AppSwipeKill, one(2), at, at.plus_seconds(5 * 3600)),
        FaultSpec::window(FaultKind::ConnectivityLoss, one(3), at, at.plus_seconds(20 * 3600)),
    ];
    s
}

fn clean(seed: u64) -> (mrt_core::pipeline::export::Table, EventLog) {
    let (log, _) = run(&scenario(seed)).unwrap();
    let data = assemble(&log).unwrap();
    (to_table(&data.variant(Variant::Zero), &data.daily_measures), log)
}

#[test]
fn clean_run_passes_every_item() {
    let (table, log) = clean(3);
    let report = run_audit(&table, &log);
    assert!(report.passed(), "{}", report.to_text(5));
    assert_eq!(report.checks.len(), 7);
    // The Bluetooth window makes item 7 fully applicable.
    assert!(report.check(7).unwrap().subchecks.iter().all(|s| s.status == Status::Pass));
}

#[test]
fn every_primitive_is_flagged_exactly_where_injected() {
    let (table, log) = clean(4);
    for seed in 0..3 {
        let plan = catalog(&table, &log, seed);
        assert!(plan.len() >= 12, "{plan:?}");
        for c in plan {
            let (t, l, expected) = c.apply(&table, &log).unwrap();
            let report = run_audit(&t, &l);
            assert_eq!(report.locators(), expected, "{}: {}", c.name(), report.to_text(5));
        }
    }
}

#[test]
fn blanked_response_fails_item_six_at_its_row() {
    let (table, log) = clean(5);
    let (t, l, _) = Corruption::BlankResponse { row: 17 }.apply(&table, &log).unwrap();
    let report = run_audit(&t, &l);
    let item6 = report.check(6).unwrap();
    assert_eq!(item6.status, Status::Fail);
    assert_eq!(item6.violations[0].locator, Locator::row(17, "engagement"));
}

#[test]
fn local_time_column_fails_item_five() {
    let (table, log) = clean(5);
    let (t, l, _) = Corruption::LocalTimeColumn.apply(&table, &log).unwrap();
    assert_eq!(run_audit(&t, &l).check(5).unwrap().status, Status::Fail);
}

#[test]
fn audit_is_read_only_and_deterministic() {
    let (table, log) = clean(6);
    let csv = table.write(Format::Csv).unwrap();
    let jsonl = log.to_jsonl().unwrap();
    let a = audit_text(&csv, Format::Csv, &jsonl);
    let b = audit_text(&csv, Format::Csv, &jsonl);
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(table.write(Format::Csv).unwrap(), csv);
    assert_eq!(log.to_jsonl().unwrap(), jsonl);
    assert!(a.passed(), "{}", a.to_text(5));
}

#[test]
fn travel_subcheck_is_not_applicable_without_travel() {
    let (table, log) = clean(7);
    let item5 = run_audit(&table, &log).check(5).cloned().unwrap();
    let travel = item5.subchecks.iter().find(|s| s.name.contains("travel")).unwrap();
    assert_eq!(travel.status, Status::NotApplicable);
}
