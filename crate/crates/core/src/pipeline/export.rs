//! CSV and JSON-lines exports. Every cell is text; absent values are written
//! `NA:<CODE>` and the `missingness_codes` column lists `field=CODE` pairs.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{AnalysisRow, MissingnessCode, OutcomeSource};
use crate::error::{Error, Result};
use crate::model::{ComponentId, ParticipantId, Probability};
use crate::time::{Timestamp, WallClock};

pub const BASE_COLUMNS: [&str; 25] = [
    "participant_id",
    "component_id",
    "global_index",
    "day_index",
    "slot_index",
    "time_slot",
    "day_of_week",
    "scheduled_utc",
    "tz_offset_minutes",
    "travel_excluded",
    "agent",
    "decision_utc",
    "available",
    "availability_reasons",
    "treatment",
    "probability",
    "delivered_utc",
    "window_start_utc",
    "window_end_utc",
    "proximal_outcome",
    "outcome_source",
    "engagement",
    "location_category",
    "weather",
    "context_staleness_secs",
];

pub const CODES_COLUMN: &str = "missingness_codes";
pub const NONE: &str = "NONE";

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            _ => Err(Error::validation("format", format!("`{s}` is not csv or jsonl"))),
        }
    }
}

pub fn columns(daily_measures: &[String]) -> Vec<String> {
    BASE_COLUMNS
        .iter()
        .map(|c| c.to_string())
        .chain(daily_measures.iter().map(|m| format!("daily_{m}")))
        .chain([CODES_COLUMN.to_string()])
        .collect()
}

/// An export as text cells, the form the audit reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn cell(&self, row: usize, name: &str) -> Option<&str> {
        self.column(name).and_then(|c| self.rows[row].get(c)).map(String::as_str)
    }

    pub fn write(&self, format: Format) -> Result<String> {
        match format {
            Format::Csv => {
                let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
                w.write_record(&self.columns)?;
                for r in &self.rows {
                    w.write_record(r)?;
                }
                let bytes = w.into_inner().map_err(|e| Error::Export(e.to_string()))?;
                Ok(String::from_utf8(bytes).expect("cells are UTF-8"))
            }
            Format::Jsonl => {
                let mut out = String::new();
                for r in &self.rows {
                    out.push('{');
                    for (i, (c, v)) in self.columns.iter().zip(r).enumerate() {
                        if i > 0 {
                            out.push(',');
                        }
                        out.push_str(&serde_json::to_string(c)?);
                        out.push(':');
                        out.push_str(&serde_json::to_string(v)?);
                    }
                    out.push_str("}\n");
                }
                Ok(out)
            }
        }
    }

    pub fn parse(text: &str, format: Format) -> Result<Self> {
        match format {
            Format::Csv => {
                let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
                let columns: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
                let mut rows = Vec::new();
                for (i, rec) in r.records().enumerate() {
                    let rec = rec.map_err(|e| Error::Export(format!("row {}: {e}", i + 1)))?;
                    rows.push(rec.iter().map(str::to_string).collect());
                }
                Ok(Table { columns, rows })
            }
            Format::Jsonl => {
                let mut maps = Vec::new();
                for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let m: BTreeMap<String, String> = serde_json::from_str(line)
                        .map_err(|e| Error::Export(format!("line {}: {e}", i + 1)))?;
                    maps.push(m);
                }
                let keys: Vec<String> = maps.first().map(|m| m.keys().cloned().collect()).unwrap_or_default();
                let measures: Vec<String> = keys
                    .iter()
                    .filter_map(|k| k.strip_prefix("daily_").map(str::to_string))
                    .collect();
                let mut columns: Vec<String> =
                    columns(&measures).into_iter().filter(|c| keys.contains(c)).collect();
                columns.extend(keys.iter().filter(|k| !columns.contains(k)).cloned().collect::<Vec<_>>());
                let rows = maps
                    .into_iter()
                    .enumerate()
                    .map(|(i, mut m)| {
                        columns
                            .iter()
                            .map(|c| {
                                m.remove(c)
                                    .ok_or_else(|| Error::Export(format!("line {}: missing `{c}`", i + 1)))
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Table { columns, rows })
            }
        }
    }
}

fn enum_str<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

pub(crate) fn enum_parse<T: DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Export(format!("unexpected value `{s}`")))
}

fn cell<T>(v: Option<T>, field: &str, codes: &BTreeMap<String, MissingnessCode>, show: impl FnOnce(T) -> String) -> String {
    match v {
        Some(x) => show(x),
        None => codes.get(field).map(|c| format!("NA:{c}")).unwrap_or_default(),
    }
}

pub fn row_cells(r: &AnalysisRow, daily_measures: &[String]) -> Vec<String> {
    let c = &r.codes;
    let ts = |t: Timestamp| t.to_iso();
    let mut out = vec![
        r.participant_id.0.to_string(),
        r.component_id.as_str().to_string(),
        r.global_index.to_string(),
        r.day_index.to_string(),
        r.slot_index.to_string(),
        r.time_slot.to_string(),
        r.day_of_week.clone(),
        r.scheduled_utc.to_iso(),
        r.tz_offset_minutes.to_string(),
        r.travel_excluded.to_string(),
        cell(r.agent, "agent", c, |a| a.as_str().to_string()),
        cell(r.decision_utc, "decision_utc", c, ts),
        r.available.to_string(),
        if r.availability_reasons.is_empty() {
            NONE.to_string()
        } else {
            r.availability_reasons.join("|")
        },
        cell(r.treatment, "treatment", c, |t| t.to_string()),
        r.probability.to_string(),
        cell(r.delivered_utc, "delivered_utc", c, ts),
        cell(r.window_start, "window_start_utc", c, ts),
        cell(r.window_end, "window_end_utc", c, ts),
        cell(r.proximal_outcome, "proximal_outcome", c, |v| v.to_string()),
        cell(r.outcome_source, "outcome_source", c, |s| s.as_str().to_string()),
        cell(r.engagement, "engagement", c, |e| e.as_str().to_string()),
        cell(r.location_category, "location_category", c, |l| enum_str(&l)),
        cell(r.weather, "weather", c, |w| enum_str(&w)),
        cell(r.context_staleness_secs, "context_staleness_secs", c, |s| s.to_string()),
    ];
    for m in daily_measures {
        let field = format!("daily_{m}");
        out.push(cell(r.daily.get(m).copied().flatten(), &field, c, |v| v.to_string()));
    }
    out.push(if c.is_empty() {
        NONE.to_string()
    } else {
        c.iter().map(|(f, code)| format!("{f}={code}")).collect::<Vec<_>>().join(";")
    });
    out
}

pub fn to_table(rows: &[AnalysisRow], daily_measures: &[String]) -> Table {
    Table {
        columns: columns(daily_measures),
        rows: rows.iter().map(|r| row_cells(r, daily_measures)).collect(),
    }
}

pub fn export(rows: &[AnalysisRow], daily_measures: &[String], format: Format) -> Result<String> {
    to_table(rows, daily_measures).write(format)
}

fn opt<T>(s: &str, parse: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if s.starts_with("NA:") {
        Ok(None)
    } else {
        parse(s).map(Some)
    }
}

fn num<T: FromStr>(field: &'static str) -> impl Fn(&str) -> Result<T> {
    move |s| s.parse().map_err(|_| Error::Export(format!("{field}: `{s}` is not a number")))
}

/// Parse an exported table back into rows. Unknown columns are an error.
pub fn parse_rows(table: &Table) -> Result<(Vec<AnalysisRow>, Vec<String>)> {
    let measures: Vec<String> = table
        .columns
        .iter()
        .filter_map(|c| c.strip_prefix("daily_").map(str::to_string))
        .collect();
    if table.columns != columns(&measures) {
        return Err(Error::Export("columns do not match the dataset dictionary".into()));
    }
    let bool_of = |s: &str| match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Export(format!("`{s}` is not a boolean"))),
    };
    let mut rows = Vec::with_capacity(table.rows.len());
    for (i, cells) in table.rows.iter().enumerate() {
        let at = |name: &str| cells[table.column(name).expect("known column")].as_str();
        let wrap = |e: Error| Error::Export(format!("row {}: {e}", i + 1));
        let parse = || -> Result<AnalysisRow> {
            let mut codes = BTreeMap::new();
            if at(CODES_COLUMN) != NONE {
                for pair in at(CODES_COLUMN).split(';') {
                    let (f, c) = pair
                        .split_once('=')
                        .ok_or_else(|| Error::Export(format!("bad code entry `{pair}`")))?;
                    codes.insert(f.to_string(), c.parse()?);
                }
            }
            let mut daily = BTreeMap::new();
            for m in &measures {
                daily.insert(m.clone(), opt(at(&format!("daily_{m}")), num::<f64>("daily"))?);
            }
            let reasons = at("availability_reasons");
            Ok(AnalysisRow {
                participant_id: ParticipantId(num("participant_id")(at("participant_id"))?),
                component_id: ComponentId::new(at("component_id")),
                global_index: num("global_index")(at("global_index"))?,
                day_index: num("day_index")(at("day_index"))?,
                slot_index: num("slot_index")(at("slot_index"))?,
                time_slot: at("time_slot").parse::<WallClock>()?,
                day_of_week: at("day_of_week").to_string(),
                scheduled_utc: at("scheduled_utc").parse()?,
                tz_offset_minutes: num("tz_offset_minutes")(at("tz_offset_minutes"))?,
                travel_excluded: bool_of(at("travel_excluded"))?,
                agent: opt(at("agent"), enum_parse)?,
                decision_utc: opt(at("decision_utc"), Timestamp::parse_iso)?,
                available: bool_of(at("available"))?,
                availability_reasons: if reasons == NONE {
                    Vec::new()
                } else {
                    reasons.split('|').map(str::to_string).collect()
                },
                treatment: opt(at("treatment"), num("treatment"))?,
                probability: at("probability").parse::<Probability>()?,
                delivered_utc: opt(at("delivered_utc"), Timestamp::parse_iso)?,
                window_start: opt(at("window_start_utc"), Timestamp::parse_iso)?,
                window_end: opt(at("window_end_utc"), Timestamp::parse_iso)?,
                proximal_outcome: opt(at("proximal_outcome"), num("proximal_outcome"))?,
                outcome_source: opt(at("outcome_source"), OutcomeSource::from_str)?,
                engagement: opt(at("engagement"), enum_parse)?,
                location_category: opt(at("location_category"), enum_parse)?,
                weather: opt(at("weather"), enum_parse)?,
                context_staleness_secs: opt(at("context_staleness_secs"), num("context_staleness_secs"))?,
                daily,
                codes,
            })
        };
        rows.push(parse().map_err(wrap)?);
    }
    Ok((rows, measures))
}

pub fn import(text: &str, format: Format) -> Result<(Vec<AnalysisRow>, Vec<String>)> {
    parse_rows(&Table::parse(text, format)?)
}
