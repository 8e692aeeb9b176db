//! Data-quality checklist over an exported dataset and its event log.
//!
//! Seven check groups, numbered like the checklist they implement:
//! 1 proximal outcome, 2 randomization agent, 3 treatment delivery,
//! 4 contextual data, 5 time stamps, 6 unavailability and missing data,
//! 7 participant issues and data recovery.

pub mod inject;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;

use chrono::NaiveDateTime;
use serde::Serialize;

use crate::agents::{EngagementKind, Outcome};
use crate::availability::UnavailabilityReason;
use crate::model::{LocationCategory, ParticipantId, Probability, Weather};
use crate::pipeline::export::{enum_parse, Format, Table, CODES_COLUMN, NONE};
use crate::pipeline::{MissingnessCode, OutcomeSource};
use crate::sim::log::{EventBody, EventLog, RunHeader};
use crate::sim::scenario::FaultKind;
use crate::sync::{IngestResult, MessageId, Payload, PayloadKind};
use crate::time::Timestamp;

/// Where a violation sits.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Locator {
    /// Zero-based data row (header excluded) and column name.
    Row { row: usize, column: String },
    Column { column: String },
    Event { seq: u64 },
    Message { message_id: String },
    /// The input could not be read at all.
    Input { source: String },
}

impl Locator {
    pub fn row(row: usize, column: &str) -> Self {
        Locator::Row {
            row,
            column: column.to_string(),
        }
    }

    pub fn column(column: &str) -> Self {
        Locator::Column {
            column: column.to_string(),
        }
    }

    pub fn message(id: &MessageId) -> Self {
        Locator::Message {
            message_id: id.0.clone(),
        }
    }
}

impl fmt::Display for Locator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Locator::Row { row, column } => write!(f, "row {row}, column {column}"),
            Locator::Column { column } => write!(f, "column {column}"),
            Locator::Event { seq } => write!(f, "event {seq}"),
            Locator::Message { message_id } => write!(f, "message {message_id}"),
            Locator::Input { source } => write!(f, "input {source}"),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::NotApplicable => "NOT_APPLICABLE",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub locator: Locator,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SubCheck {
    pub name: String,
    pub status: Status,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    /// Checklist item number; 0 is the input-structure check.
    pub item: u8,
    pub title: String,
    pub status: Status,
    pub subchecks: Vec<SubCheck>,
    pub violations: Vec<Violation>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub pass: usize,
    pub fail: usize,
    pub not_applicable: usize,
    pub violations: usize,
    pub rows: usize,
    pub events: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub checks: Vec<CheckResult>,
    pub summary: Summary,
}

impl AuditReport {
    fn new(checks: Vec<CheckResult>, rows: usize, events: usize) -> Self {
        let count = |s| checks.iter().filter(|c| c.status == s).count();
        let summary = Summary {
            pass: count(Status::Pass),
            fail: count(Status::Fail),
            not_applicable: count(Status::NotApplicable),
            violations: checks.iter().map(|c| c.violations.len()).sum(),
            rows,
            events,
        };
        AuditReport { checks, summary }
    }

    pub fn passed(&self) -> bool {
        self.summary.fail == 0
    }

    pub fn check(&self, item: u8) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.item == item)
    }

    /// Every distinct flagged location, across all checks.
    pub fn locators(&self) -> BTreeSet<Locator> {
        self.checks
            .iter()
            .flat_map(|c| c.violations.iter().map(|v| v.locator.clone()))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text report; `max_listed` caps the violations printed per check.
    pub fn to_text(&self, max_listed: usize) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "[{}] item {} {}", c.status, c.item, c.title);
            for sub in &c.subchecks {
                let _ = writeln!(s, "    {:<40} {}", sub.name, sub.status);
            }
            for v in c.violations.iter().take(max_listed) {
                let _ = writeln!(s, "    - {}: {}", v.locator, v.detail);
            }
            if c.violations.len() > max_listed {
                let _ = writeln!(s, "    ... {} more", c.violations.len() - max_listed);
            }
        }
        let m = &self.summary;
        let _ = writeln!(
            s,
            "{} pass, {} fail, {} not applicable; {} violations over {} rows and {} events",
            m.pass, m.fail, m.not_applicable, m.violations, m.rows, m.events
        );
        s
    }
}

struct Builder {
    item: u8,
    title: &'static str,
    subchecks: Vec<SubCheck>,
    violations: Vec<Violation>,
}

impl Builder {
    fn new(item: u8, title: &'static str) -> Self {
        Builder {
            item,
            title,
            subchecks: Vec::new(),
            violations: Vec::new(),
        }
    }

    fn sub(&mut self, name: &str, applicable: bool, run: impl FnOnce(&mut Flags)) {
        let status = if applicable {
            let mut flags = Flags(Vec::new());
            run(&mut flags);
            let failed = !flags.0.is_empty();
            self.violations.extend(flags.0);
            if failed {
                Status::Fail
            } else {
                Status::Pass
            }
        } else {
            Status::NotApplicable
        };
        self.subchecks.push(SubCheck {
            name: name.to_string(),
            status,
        });
    }

    fn finish(self) -> CheckResult {
        let status = if !self.violations.is_empty() {
            Status::Fail
        } else if self.subchecks.iter().all(|s| s.status == Status::NotApplicable) {
            Status::NotApplicable
        } else {
            Status::Pass
        };
        CheckResult {
            item: self.item,
            title: self.title.to_string(),
            status,
            subchecks: self.subchecks,
            violations: self.violations,
        }
    }
}

struct Flags(Vec<Violation>);

impl Flags {
    fn add(&mut self, locator: Locator, detail: impl Into<String>) {
        self.0.push(Violation {
            locator,
            detail: detail.into(),
        });
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Cell<'a> {
    Value(&'a str),
    Coded(&'a str),
    Blank,
    /// Column missing from the table.
    Absent,
}

fn classify(s: Option<&str>) -> Cell<'_> {
    match s {
        None => Cell::Absent,
        Some("") => Cell::Blank,
        Some(s) => match s.strip_prefix("NA:") {
            Some(code) => Cell::Coded(code),
            None => Cell::Value(s),
        },
    }
}

struct Input<'a> {
    table: &'a Table,
    log: &'a EventLog,
    header: &'a RunHeader,
    index: BTreeMap<&'a str, usize>,
    /// Parsed `missingness_codes` per row; malformed entries are dropped here
    /// and flagged by item 6.
    codes: Vec<BTreeMap<String, String>>,
}

impl<'a> Input<'a> {
    fn cell(&self, row: usize, column: &str) -> Cell<'a> {
        classify(
            self.index
                .get(column)
                .and_then(|&c| self.table.rows[row].get(c))
                .map(String::as_str),
        )
    }

    fn value(&self, row: usize, column: &str) -> Option<&'a str> {
        match self.cell(row, column) {
            Cell::Value(v) => Some(v),
            _ => None,
        }
    }

    fn rows(&self) -> std::ops::Range<usize> {
        0..self.table.rows.len()
    }

    fn participant(&self, row: usize) -> Option<ParticipantId> {
        self.value(row, "participant_id").and_then(|v| v.parse().ok()).map(ParticipantId)
    }

    fn configured_probability(&self, component: &str) -> Option<Probability> {
        self.header
            .scenario
            .trial
            .components
            .iter()
            .find(|c| c.id.as_str() == component)
            .map(|c| c.randomization_probability)
    }

    fn require(&self, flags: &mut Flags, names: &[&str]) {
        for n in names {
            if !self.index.contains_key(n) {
                flags.add(Locator::column(n), "required column is missing");
            }
        }
    }
}

fn parse_codes(cell: &str) -> (BTreeMap<String, String>, bool) {
    let mut map = BTreeMap::new();
    if cell == NONE {
        return (map, true);
    }
    let mut ok = !cell.is_empty();
    for pair in cell.split(';') {
        match pair.split_once('=') {
            Some((f, c)) if !f.is_empty() && c.parse::<MissingnessCode>().is_ok() => {
                ok &= map.insert(f.to_string(), c.to_string()).is_none();
            }
            _ => ok = false,
        }
    }
    (map, ok)
}

fn looks_naive_local(s: &str) -> bool {
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"]
        .iter()
        .any(|f| NaiveDateTime::parse_from_str(s, f).is_ok())
}

fn looks_like_coordinates(s: &str) -> bool {
    let parts: Vec<&str> = s
        .split([',', ' ', ';'])
        .filter(|p| !p.is_empty())
        .collect();
    if parts.len() != 2 || !parts.iter().all(|p| p.contains('.')) {
        return false;
    }
    match (parts[0].parse::<f64>(), parts[1].parse::<f64>()) {
        (Ok(a), Ok(b)) => a.abs() <= 180.0 && b.abs() <= 180.0 && (a.abs() <= 90.0 || b.abs() <= 90.0),
        _ => false,
    }
}

const COORDINATE_TOKENS: [&str; 10] = [
    "lat", "latitude", "lon", "lng", "long", "longitude", "coord", "coords", "coordinates", "gps",
];

fn structural(source: &str, detail: String) -> AuditReport {
    let mut b = Builder::new(0, "Input structure");
    b.sub("inputs parse", true, |f| {
        f.add(
            Locator::Input {
                source: source.to_string(),
            },
            detail,
        )
    });
    AuditReport::new(vec![b.finish()], 0, 0)
}

/// Audit text inputs; anything unparseable yields a failing structure report.
pub fn audit_text(export: &str, format: Format, event_log: &str) -> AuditReport {
    let table = match Table::parse(export, format) {
        Ok(t) => t,
        Err(e) => return structural("export", e.to_string()),
    };
    let log = match EventLog::from_jsonl(event_log) {
        Ok(l) => l,
        Err(e) => return structural("event_log", e.to_string()),
    };
    run_audit(&table, &log)
}

/// Run all checks. Inputs are only read.
pub fn run_audit(table: &Table, log: &EventLog) -> AuditReport {
    let header = match log.header() {
        Ok(h) => h,
        Err(e) => return structural("event_log", e.to_string()),
    };
    if let Some(i) = table.rows.iter().position(|r| r.len() != table.columns.len()) {
        return structural("export", format!("row {i} has {} cells for {} columns", table.rows[i].len(), table.columns.len()));
    }
    let index = table.columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let codes_col = table.column(CODES_COLUMN);
    let codes = table
        .rows
        .iter()
        .map(|r| codes_col.map(|c| parse_codes(&r[c]).0).unwrap_or_default())
        .collect();
    let input = Input {
        table,
        log,
        header,
        index,
        codes,
    };
    let checks = vec![
        item1(&input),
        item2(&input),
        item3(&input),
        item4(&input),
        item5(&input),
        item6(&input),
        item7(&input),
    ];
    AuditReport::new(checks, table.rows.len(), log.events.len())
}

fn item1(x: &Input) -> CheckResult {
    let mut b = Builder::new(1, "Proximal outcome");
    b.sub("outcome present or coded", true, |f| {
        x.require(f, &["proximal_outcome", "outcome_source", "window_start_utc", "window_end_utc"]);
        for r in x.rows() {
            match x.cell(r, "proximal_outcome") {
                Cell::Value(v) if v.parse::<u64>().is_err() => {
                    f.add(Locator::row(r, "proximal_outcome"), format!("`{v}` is not a step count"))
                }
                Cell::Blank => f.add(Locator::row(r, "proximal_outcome"), "outcome is blank"),
                _ => {}
            }
        }
    });
    b.sub("outcome source", true, |f| {
        for r in x.rows() {
            let source = x.cell(r, "outcome_source");
            if let Cell::Value(v) = source {
                if v.parse::<OutcomeSource>().is_err() {
                    f.add(Locator::row(r, "outcome_source"), format!("unknown source `{v}`"));
                    continue;
                }
            }
            match (x.cell(r, "proximal_outcome"), source) {
                (Cell::Value(_), Cell::Coded(_)) => {
                    f.add(Locator::row(r, "outcome_source"), "outcome present without a source")
                }
                (Cell::Coded(_), Cell::Value(_)) => {
                    f.add(Locator::row(r, "outcome_source"), "source given for a missing outcome")
                }
                _ => {}
            }
        }
    });
    b.sub("outcome window", true, |f| {
        for r in x.rows() {
            let bound = |c| x.value(r, c).map(Timestamp::parse_iso);
            if let (Some(Ok(s)), Some(Ok(e))) = (bound("window_start_utc"), bound("window_end_utc")) {
                if e <= s {
                    f.add(Locator::row(r, "window_end_utc"), "window ends before it starts");
                }
            }
        }
    });
    b.finish()
}

fn item2(x: &Input) -> CheckResult {
    let mut b = Builder::new(2, "Randomization agent");
    let configured = x.header.scenario.agent;
    b.sub("agent recorded and consistent", true, |f| {
        x.require(f, &["agent"]);
        for r in x.rows() {
            match x.cell(r, "agent") {
                Cell::Value(v) if v != configured.as_str() => f.add(
                    Locator::row(r, "agent"),
                    format!("`{v}` but the trial randomizes on {}", configured.as_str()),
                ),
                Cell::Blank => f.add(Locator::row(r, "agent"), "agent is blank"),
                _ => {}
            }
        }
    });
    b.sub("log agent consistent", true, |f| {
        for e in &x.log.events {
            if let EventBody::Randomized { record } = &e.body {
                if record.agent != configured {
                    f.add(Locator::Event { seq: e.seq }, "randomized by an unexpected agent");
                }
            }
        }
    });
    b.finish()
}

fn item3(x: &Input) -> CheckResult {
    let mut b = Builder::new(3, "Treatment delivery");
    b.sub("randomization recorded", true, |f| {
        x.require(f, &["treatment", "available", "probability", "delivered_utc"]);
        for r in x.rows() {
            let available = x.value(r, "available");
            match x.cell(r, "treatment") {
                Cell::Value(v) if v != "0" && v != "1" => {
                    f.add(Locator::row(r, "treatment"), format!("`{v}` is not 0 or 1"))
                }
                Cell::Value(_) if available == Some("false") => {
                    f.add(Locator::row(r, "treatment"), "unavailable point carries a treatment")
                }
                Cell::Coded(_) if available == Some("true") => {
                    f.add(Locator::row(r, "treatment"), "available point has no randomization result")
                }
                Cell::Blank => f.add(Locator::row(r, "treatment"), "treatment is blank"),
                _ => {}
            }
        }
    });
    b.sub("probability recorded", true, |f| {
        for r in x.rows() {
            let Some(v) = x.value(r, "probability") else {
                if x.cell(r, "probability") != Cell::Absent {
                    f.add(Locator::row(r, "probability"), "probability is missing");
                }
                continue;
            };
            let want = x.value(r, "component_id").and_then(|c| x.configured_probability(c));
            match (v.parse::<Probability>(), want) {
                (Err(_), _) => f.add(Locator::row(r, "probability"), format!("`{v}` is not a probability")),
                (Ok(p), Some(w)) if p != w => {
                    f.add(Locator::row(r, "probability"), format!("{p} differs from the configured {w}"))
                }
                (Ok(_), None) => f.add(Locator::row(r, "component_id"), "component is not configured"),
                _ => {}
            }
        }
    });
    b.sub("delivery recorded", true, |f| {
        for r in x.rows() {
            if x.value(r, "treatment") == Some("0") && matches!(x.cell(r, "delivered_utc"), Cell::Value(_)) {
                f.add(Locator::row(r, "delivered_utc"), "delivery stamped for a no-treatment point");
            }
        }
    });
    b.sub("log probabilities", true, |f| {
        for e in &x.log.events {
            if let EventBody::Randomized { record } = &e.body {
                if x.configured_probability(record.component_id.as_str()) != Some(record.probability) {
                    f.add(Locator::Event { seq: e.seq }, "probability differs from the configuration");
                }
                if record.outcome == Outcome::NotRandomized && record.availability.available() {
                    f.add(Locator::Event { seq: e.seq }, "available point was not randomized");
                }
            }
        }
    });
    b.finish()
}

fn item4(x: &Input) -> CheckResult {
    let mut b = Builder::new(4, "Contextual data");
    b.sub("context present regardless of treatment", true, |f| {
        x.require(f, &["location_category", "weather", "context_staleness_secs"]);
        for r in x.rows() {
            for (c, ok) in [
                ("location_category", &(|v: &str| enum_parse::<LocationCategory>(v).is_ok()) as &dyn Fn(&str) -> bool),
                ("weather", &|v: &str| enum_parse::<Weather>(v).is_ok()),
            ] {
                match x.cell(r, c) {
                    Cell::Value(v) if !ok(v) => f.add(Locator::row(r, c), format!("unexpected value `{v}`")),
                    Cell::Blank => f.add(Locator::row(r, c), "context is blank"),
                    _ => {}
                }
            }
        }
    });
    let bound = x.header.scenario.pipeline.freshness_bound_secs;
    b.sub("tailoring context fresh", true, |f| {
        for r in x.rows() {
            let Some(v) = x.value(r, "context_staleness_secs") else { continue };
            match v.parse::<i64>() {
                Err(_) => f.add(Locator::row(r, "context_staleness_secs"), format!("`{v}` is not a duration")),
                Ok(s) if s < 0 => f.add(Locator::row(r, "context_staleness_secs"), "negative staleness"),
                Ok(s) if s > bound && x.value(r, "available") == Some("true") => f.add(
                    Locator::row(r, "context_staleness_secs"),
                    format!("{s} s old context used at an available point (bound {bound} s)"),
                ),
                _ => {}
            }
        }
    });
    b.sub("no raw coordinates", true, |f| {
        for (c, name) in x.table.columns.iter().enumerate() {
            let lower = name.to_ascii_lowercase();
            if lower.split(['_', '-', ' ']).any(|t| COORDINATE_TOKENS.contains(&t)) {
                f.add(Locator::column(name), "column name suggests raw location");
            } else if x.table.rows.iter().any(|row| looks_like_coordinates(&row[c])) {
                f.add(Locator::column(name), "column holds coordinate pairs");
            }
        }
    });
    b.finish()
}

fn item5(x: &Input) -> CheckResult {
    let mut b = Builder::new(5, "Time stamps");
    let utc_columns: Vec<&String> = x.table.columns.iter().filter(|c| c.ends_with("_utc")).collect();
    b.sub("stamps in UTC", true, |f| {
        x.require(f, &["scheduled_utc", "decision_utc"]);
        for r in x.rows() {
            for c in &utc_columns {
                if let Some(v) = x.value(r, c) {
                    if Timestamp::parse_iso(v).is_err() {
                        f.add(Locator::row(r, c), format!("`{v}` is not a UTC stamp"));
                    }
                }
            }
        }
    });
    b.sub("offsets recorded", true, |f| {
        x.require(f, &["tz_offset_minutes"]);
        for r in x.rows() {
            match x.cell(r, "tz_offset_minutes") {
                Cell::Value(v) if v.parse::<i32>().map_or(true, |o| o.abs() > 14 * 60) => {
                    f.add(Locator::row(r, "tz_offset_minutes"), format!("`{v}` is not an offset"))
                }
                Cell::Blank | Cell::Coded(_) => f.add(Locator::row(r, "tz_offset_minutes"), "offset is missing"),
                _ => {}
            }
        }
    });
    b.sub("no local-time columns", true, |f| {
        for (c, name) in x.table.columns.iter().enumerate() {
            if name.ends_with("_utc") {
                continue;
            }
            if x.table.rows.iter().any(|row| looks_naive_local(&row[c])) {
                f.add(Locator::column(name), "column holds stamps without a UTC marker");
            }
        }
    });
    b.sub("log in UTC order", true, |f| {
        for w in x.log.events.windows(2) {
            if w[1].utc < w[0].utc {
                f.add(Locator::Event { seq: w[1].seq }, "stamp earlier than the previous event");
            } else if w[1].seq != w[0].seq + 1 {
                f.add(Locator::Event { seq: w[1].seq }, "sequence number is not contiguous");
            }
        }
    });
    let travel = x.header.itineraries.overrides.values().chain([&x.header.itineraries.default]).any(|i| i.has_travel());
    b.sub("offsets match travel itinerary", travel, |f| {
        for r in x.rows() {
            let (Some(p), Some(Ok(t)), Some(Ok(o))) = (
                x.participant(r),
                x.value(r, "scheduled_utc").map(Timestamp::parse_iso),
                x.value(r, "tz_offset_minutes").map(str::parse::<i32>),
            ) else {
                continue;
            };
            let want = x.header.itineraries.get(p).offset_at(t);
            if o != want {
                f.add(Locator::row(r, "tz_offset_minutes"), format!("{o} but the itinerary says {want}"));
            }
        }
    });
    b.finish()
}

fn reason_known(s: &str) -> bool {
    s.parse::<UnavailabilityReason>().is_ok() || s.parse::<MissingnessCode>().is_ok()
}

fn item6(x: &Input) -> CheckResult {
    let mut b = Builder::new(6, "Unavailability and missing data");
    b.sub("unavailability reasons recorded", true, |f| {
        x.require(f, &["available", "availability_reasons"]);
        for r in x.rows() {
            let reasons = x.value(r, "availability_reasons");
            match x.value(r, "available") {
                Some("false") => match reasons {
                    Some(NONE) | None => f.add(Locator::row(r, "availability_reasons"), "unavailable without a reason"),
                    Some(list) if !list.split('|').all(reason_known) => {
                        f.add(Locator::row(r, "availability_reasons"), format!("unknown reason in `{list}`"))
                    }
                    _ => {}
                },
                Some("true") => {
                    if reasons.is_some_and(|v| v != NONE) {
                        f.add(Locator::row(r, "availability_reasons"), "available point lists reasons");
                    }
                }
                Some(v) => f.add(Locator::row(r, "available"), format!("`{v}` is not a boolean")),
                None => {}
            }
        }
    });
    b.sub("no blank fields", true, |f| {
        for (r, row) in x.table.rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if v.is_empty() {
                    f.add(Locator::row(r, &x.table.columns[c]), "blank field");
                }
            }
        }
    });
    b.sub("missingness codes present", true, |f| {
        x.require(f, &[CODES_COLUMN]);
        let known: BTreeSet<String> = x.table.columns.iter().cloned().chain(["row".to_string()]).collect();
        for r in x.rows() {
            if let Cell::Value(v) = x.cell(r, CODES_COLUMN) {
                let (map, ok) = parse_codes(v);
                if !ok || map.keys().any(|k| !known.contains(k)) {
                    f.add(Locator::row(r, CODES_COLUMN), format!("malformed code list `{v}`"));
                }
            }
            for name in &x.table.columns {
                if let Cell::Coded(code) = x.cell(r, name) {
                    if code.parse::<MissingnessCode>().is_err() {
                        f.add(Locator::row(r, name), format!("unknown missingness code `{code}`"));
                    } else if x.codes[r].get(name.as_str()).map(String::as_str) != Some(code) {
                        f.add(Locator::row(r, name), format!("NA:{code} is not listed in {CODES_COLUMN}"));
                    }
                }
            }
        }
    });
    b.sub("no-response recorded", true, |f| {
        for r in x.rows() {
            if let Cell::Value(v) = x.cell(r, "engagement") {
                if enum_parse::<EngagementKind>(v).is_err() {
                    f.add(Locator::row(r, "engagement"), format!("unknown engagement `{v}`"));
                }
            }
        }
    });
    b.sub("handshake ledger balanced", true, |f| handshake(x.log, f));
    b.finish()
}

/// Every enqueued message is stored at most once, and ends either removed
/// after a stored acknowledgement or still in the outbox at run end.
fn handshake(log: &EventLog, f: &mut Flags) {
    let mut enqueued = BTreeSet::new();
    let mut stored = BTreeSet::new();
    let mut removed = BTreeSet::new();
    let mut residual = BTreeSet::new();
    for e in &log.events {
        match &e.body {
            EventBody::Enqueued { message_id, .. } => {
                if !enqueued.insert(message_id.clone()) {
                    f.add(Locator::message(message_id), "enqueued twice");
                }
            }
            EventBody::Ingested {
                message_id,
                result: IngestResult::Stored,
                ..
            } => {
                if !enqueued.contains(message_id) {
                    f.add(Locator::message(message_id), "stored but never enqueued");
                }
                if !stored.insert(message_id.clone()) {
                    f.add(Locator::message(message_id), "stored more than once");
                }
            }
            EventBody::OutboxRemoved { message_id } => {
                if !stored.contains(message_id) {
                    f.add(Locator::message(message_id), "removed from the outbox before the server stored it");
                }
                if !removed.insert(message_id.clone()) {
                    f.add(Locator::message(message_id), "removed twice");
                }
            }
            EventBody::OutboxResidual { message_ids } => residual.extend(message_ids.iter().cloned()),
            _ => {}
        }
    }
    for id in &enqueued {
        match (removed.contains(id), residual.contains(id)) {
            (false, false) => f.add(Locator::message(id), "neither acknowledged nor left in the outbox"),
            (true, true) => f.add(Locator::message(id), "removed yet listed as residual"),
            _ => {}
        }
    }
    for id in residual.difference(&enqueued) {
        f.add(Locator::message(id), "residual message was never enqueued");
    }
}

fn item7(x: &Input) -> CheckResult {
    let mut b = Builder::new(7, "Participant issues and data recovery");
    let interval = i64::from(x.header.scenario.network.sync_interval_minutes) * 60;

    // Flush events, the message each became, and the batch the server stored.
    struct Flush {
        seq: u64,
        utc: Timestamp,
        samples: u32,
        recovered: bool,
        message: Option<MessageId>,
    }
    let mut flushes: Vec<Flush> = Vec::new();
    let mut open: BTreeMap<ParticipantId, usize> = BTreeMap::new();
    let mut batches: BTreeMap<MessageId, (bool, Vec<(Timestamp, u32)>)> = BTreeMap::new();
    let mut residual = BTreeSet::new();
    let mut down: BTreeMap<ParticipantId, u32> = BTreeMap::new();
    let mut flush_while_down = Vec::new();
    let mut any_window = false;
    let link_fault = |k: &FaultKind| matches!(k, FaultKind::BluetoothOff | FaultKind::TrackerBatteryDead);
    for e in &x.log.events {
        let Some(p) = e.participant_id else { continue };
        match &e.body {
            EventBody::TrackerFlush { samples, recovered, .. } => {
                if down.get(&p).copied().unwrap_or(0) > 0 {
                    flush_while_down.push(e.seq);
                }
                open.insert(p, flushes.len());
                flushes.push(Flush {
                    seq: e.seq,
                    utc: e.utc,
                    samples: *samples,
                    recovered: *recovered,
                    message: None,
                });
            }
            EventBody::Enqueued {
                message_id,
                kind: PayloadKind::TrackerBatch,
                ..
            } => {
                if let Some(i) = open.remove(&p) {
                    flushes[i].message = Some(message_id.clone());
                }
            }
            EventBody::Ingested {
                message_id,
                result: IngestResult::Stored,
                payload: Some(Payload::TrackerBatch(batch)),
                ..
            } => {
                batches.insert(message_id.clone(), (batch.recovered, batch.samples.clone()));
            }
            EventBody::OutboxResidual { message_ids } => residual.extend(message_ids.iter().cloned()),
            EventBody::FaultStart { kind } if link_fault(kind) => {
                any_window = true;
                *down.entry(p).or_default() += 1;
            }
            EventBody::FaultEnd { kind } if link_fault(kind) => {
                let d = down.entry(p).or_default();
                *d = d.saturating_sub(1);
            }
            _ => {}
        }
    }
    b.sub("flushed batches reach the server", !flushes.is_empty(), |f| {
        for fl in &flushes {
            let Some(id) = &fl.message else {
                f.add(Locator::Event { seq: fl.seq }, "flush was never enqueued");
                continue;
            };
            match batches.get(id) {
                Some((rec, samples)) => {
                    if samples.len() != fl.samples as usize || *rec != fl.recovered {
                        f.add(Locator::Event { seq: fl.seq }, "flush does not match the stored batch");
                    }
                }
                None if residual.contains(id) => {}
                None => f.add(Locator::Event { seq: fl.seq }, "flushed batch was neither stored nor pending"),
            }
        }
    });
    b.sub("recovered data marked", !flushes.is_empty(), |f| {
        for fl in &flushes {
            let Some((_, samples)) = fl.message.as_ref().and_then(|id| batches.get(id)) else { continue };
            let oldest = samples.iter().map(|s| s.0).min();
            let backlog = oldest.is_some_and(|o| o < fl.utc.plus_seconds(-interval));
            if backlog != fl.recovered {
                f.add(
                    Locator::Event { seq: fl.seq },
                    if backlog {
                        "backlog flushed after an outage is not marked recovered"
                    } else {
                        "fresh flush marked recovered"
                    },
                );
            }
            if samples.iter().any(|s| s.0 >= fl.utc) {
                f.add(Locator::Event { seq: fl.seq }, "batch holds samples from after the flush");
            }
        }
    });
    b.sub("no flush while the tracker link is down", any_window, |f| {
        for &seq in &flush_while_down {
            f.add(Locator::Event { seq }, "tracker flushed during a Bluetooth or battery outage");
        }
    });
    b.finish()
}
