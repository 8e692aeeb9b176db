//! Seeded corruption of clean exports and logs, each with the exact set of
//! locations the audit must flag.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Locator;
use crate::agents::Agent;
use crate::error::{Error, Result};
use crate::model::Probability;
use crate::pipeline::export::{Table, CODES_COLUMN, NONE};
use crate::sim::log::{EventBody, EventLog};
use crate::sync::{IngestResult, MessageId, Payload};
use crate::time::Timestamp;

pub const LOCAL_TIME_COLUMN: &str = "scheduled_local";
pub const RAW_LOCATION_COLUMN: &str = "location_raw";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Corruption {
    /// Engagement response left blank.
    BlankResponse { row: usize },
    /// Probability rewritten to a value the trial never used.
    WrongProbability { row: usize },
    InvalidTreatment { row: usize },
    /// Agent swapped to the one the trial does not use.
    AgentSwap { row: usize },
    /// Staleness past the freshness bound on an available row.
    StaleContext { row: usize },
    /// Unavailable row with its reasons removed.
    DropReason { row: usize },
    /// Missing outcome whose code is removed from the code list.
    StripCode { row: usize },
    /// Decision stamp with its UTC marker removed.
    NaiveStamp { row: usize },
    /// Extra column of local wall-clock stamps.
    LocalTimeColumn,
    /// Extra column of home coordinates.
    RawCoordinates,
    /// One event stamped a second before its predecessor.
    EventOutOfOrder { seq: u64 },
    /// An outbox removal rewritten to name a message that never existed.
    ForgedRemoval { seq: u64 },
    /// A tracker flush with its recovered flag inverted.
    FlipRecovered { seq: u64 },
}

impl Corruption {
    pub fn name(&self) -> &'static str {
        match self {
            Corruption::BlankResponse { .. } => "blank_response",
            Corruption::WrongProbability { .. } => "wrong_probability",
            Corruption::InvalidTreatment { .. } => "invalid_treatment",
            Corruption::AgentSwap { .. } => "agent_swap",
            Corruption::StaleContext { .. } => "stale_context",
            Corruption::DropReason { .. } => "drop_reason",
            Corruption::StripCode { .. } => "strip_code",
            Corruption::NaiveStamp { .. } => "naive_stamp",
            Corruption::LocalTimeColumn => "local_time_column",
            Corruption::RawCoordinates => "raw_coordinates",
            Corruption::EventOutOfOrder { .. } => "event_out_of_order",
            Corruption::ForgedRemoval { .. } => "forged_removal",
            Corruption::FlipRecovered { .. } => "flip_recovered",
        }
    }

    /// Apply to copies of the inputs; returns them with the expected locators.
    pub fn apply(&self, table: &Table, log: &EventLog) -> Result<(Table, EventLog, BTreeSet<Locator>)> {
        let mut t = table.clone();
        let mut l = log.clone();
        let header = log.header()?;
        let col = |name: &str| {
            table
                .column(name)
                .ok_or_else(|| Error::validation("corruption", format!("no `{name}` column")))
        };
        let set = |t: &mut Table, row: usize, name: &str, value: String| -> Result<Locator> {
            let c = col(name)?;
            let cell = t
                .rows
                .get_mut(row)
                .ok_or_else(|| Error::validation("corruption", format!("no row {row}")))?;
            cell[c] = value;
            Ok(Locator::row(row, name))
        };
        let unsuitable = || Error::validation("corruption", format!("target is unsuitable for {}", self.name()));
        let mut expected = BTreeSet::new();
        match *self {
            Corruption::BlankResponse { row } => {
                expected.insert(set(&mut t, row, "engagement", String::new())?);
            }
            Corruption::WrongProbability { row } => {
                let p: Probability = table.cell(row, "probability").ok_or_else(unsuitable)?.parse()?;
                let shifted = Probability::from_ppm((p.ppm() + 100_000) % 1_000_000)?;
                expected.insert(set(&mut t, row, "probability", shifted.to_string())?);
            }
            Corruption::InvalidTreatment { row } => {
                expected.insert(set(&mut t, row, "treatment", "2".into())?);
            }
            Corruption::AgentSwap { row } => {
                let other = match header.scenario.agent {
                    Agent::Phone => Agent::Server,
                    Agent::Server => Agent::Phone,
                };
                expected.insert(set(&mut t, row, "agent", other.as_str().into())?);
            }
            Corruption::StaleContext { row } => {
                let bound = header.scenario.pipeline.freshness_bound_secs;
                expected.insert(set(&mut t, row, "context_staleness_secs", (bound + 1).to_string())?);
            }
            Corruption::DropReason { row } => {
                expected.insert(set(&mut t, row, "availability_reasons", NONE.into())?);
            }
            Corruption::StripCode { row } => {
                let codes = table.cell(row, CODES_COLUMN).ok_or_else(unsuitable)?;
                let kept: Vec<&str> = codes
                    .split(';')
                    .filter(|p| !p.starts_with("proximal_outcome="))
                    .collect();
                let text = if kept.is_empty() { NONE.to_string() } else { kept.join(";") };
                set(&mut t, row, CODES_COLUMN, text)?;
                expected.insert(Locator::row(row, "proximal_outcome"));
            }
            Corruption::NaiveStamp { row } => {
                let v = table.cell(row, "decision_utc").ok_or_else(unsuitable)?;
                let naive = v.strip_suffix('Z').ok_or_else(unsuitable)?.to_string();
                expected.insert(set(&mut t, row, "decision_utc", naive)?);
            }
            Corruption::LocalTimeColumn => {
                let (s, o) = (col("scheduled_utc")?, col("tz_offset_minutes")?);
                for r in &mut t.rows {
                    let utc = Timestamp::parse_iso(&r[s])?;
                    let off: i64 = r[o].parse().map_err(|_| unsuitable())?;
                    let local = utc.plus_minutes(off).to_iso();
                    r.push(local.trim_end_matches('Z').to_string());
                }
                t.columns.push(LOCAL_TIME_COLUMN.into());
                expected.insert(Locator::column(LOCAL_TIME_COLUMN));
            }
            Corruption::RawCoordinates => {
                let p = col("participant_id")?;
                for r in &mut t.rows {
                    let pid = crate::model::ParticipantId(r[p].parse().map_err(|_| unsuitable())?);
                    let home = &header.regions.get(&pid).ok_or_else(unsuitable)?.home.center;
                    r.push(format!("{:.5},{:.5}", home.lat, home.lon));
                }
                t.columns.push(RAW_LOCATION_COLUMN.into());
                expected.insert(Locator::column(RAW_LOCATION_COLUMN));
            }
            Corruption::EventOutOfOrder { seq } => {
                let i = l.events.iter().position(|e| e.seq == seq).filter(|&i| i > 0).ok_or_else(unsuitable)?;
                l.events[i].utc = l.events[i - 1].utc.plus_seconds(-1);
                expected.insert(Locator::Event { seq });
            }
            Corruption::ForgedRemoval { seq } => {
                let e = l.events.iter_mut().find(|e| e.seq == seq).ok_or_else(unsuitable)?;
                let EventBody::OutboxRemoved { message_id } = &mut e.body else {
                    return Err(unsuitable());
                };
                let forged = MessageId(format!("forged-{}", message_id.0));
                expected.insert(Locator::message(message_id));
                expected.insert(Locator::message(&forged));
                *message_id = forged;
            }
            Corruption::FlipRecovered { seq } => {
                let e = l.events.iter_mut().find(|e| e.seq == seq).ok_or_else(unsuitable)?;
                let EventBody::TrackerFlush { recovered, .. } = &mut e.body else {
                    return Err(unsuitable());
                };
                *recovered = !*recovered;
                expected.insert(Locator::Event { seq });
            }
        }
        Ok((t, l, expected))
    }
}

fn pick(rng: &mut ChaCha8Rng, candidates: &[usize]) -> Option<usize> {
    (!candidates.is_empty()).then(|| candidates[rng.random_range(0..candidates.len())])
}

/// One corruption of every kind whose target exists in the clean inputs,
/// targets drawn from `seed`.
pub fn catalog(table: &Table, log: &EventLog, seed: u64) -> Vec<Corruption> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows_where = |pred: &dyn Fn(usize) -> bool| (0..table.rows.len()).filter(|&r| pred(r)).collect::<Vec<_>>();
    let is = |r: usize, c: &str, v: &str| table.cell(r, c) == Some(v);
    let valued = |r: usize, c: &str| table.cell(r, c).is_some_and(|v| !v.starts_with("NA:") && !v.is_empty());
    let coded = |r: usize, c: &str| table.cell(r, c).is_some_and(|v| v.starts_with("NA:"));

    let mut out = Vec::new();
    let any = rows_where(&|_| true);
    if let Some(row) = pick(&mut rng, &any) {
        out.push(Corruption::BlankResponse { row });
        out.push(Corruption::WrongProbability {
            row: pick(&mut rng, &any).expect("non-empty"),
        });
    }
    let treated = rows_where(&|r| valued(r, "treatment"));
    if let Some(row) = pick(&mut rng, &treated) {
        out.push(Corruption::InvalidTreatment { row });
    }
    let with_agent = rows_where(&|r| valued(r, "agent"));
    if let Some(row) = pick(&mut rng, &with_agent) {
        out.push(Corruption::AgentSwap { row });
    }
    let fresh = rows_where(&|r| is(r, "available", "true") && valued(r, "context_staleness_secs"));
    if let Some(row) = pick(&mut rng, &fresh) {
        out.push(Corruption::StaleContext { row });
    }
    let unavailable = rows_where(&|r| is(r, "available", "false"));
    if let Some(row) = pick(&mut rng, &unavailable) {
        out.push(Corruption::DropReason { row });
    }
    let missing = rows_where(&|r| coded(r, "proximal_outcome"));
    if let Some(row) = pick(&mut rng, &missing) {
        out.push(Corruption::StripCode { row });
    }
    let decided = rows_where(&|r| valued(r, "decision_utc"));
    if let Some(row) = pick(&mut rng, &decided) {
        out.push(Corruption::NaiveStamp { row });
    }
    if !table.rows.is_empty() {
        out.push(Corruption::LocalTimeColumn);
        out.push(Corruption::RawCoordinates);
    }

    let events_where = |pred: &dyn Fn(&EventBody) -> bool| {
        log.events
            .iter()
            .enumerate()
            .filter(|(i, e)| *i > 1 && pred(&e.body))
            .map(|(_, e)| e.seq as usize)
            .collect::<Vec<_>>()
    };
    let sent = events_where(&|b| matches!(b, EventBody::Sent { .. }));
    if let Some(seq) = pick(&mut rng, &sent) {
        out.push(Corruption::EventOutOfOrder { seq: seq as u64 });
    }
    let removed = events_where(&|b| matches!(b, EventBody::OutboxRemoved { .. }));
    if let Some(seq) = pick(&mut rng, &removed) {
        out.push(Corruption::ForgedRemoval { seq: seq as u64 });
    }
    // Only flushes whose batch reached the server can be cross-checked.
    let stored_flushes = stored_flush_seqs(log);
    if let Some(seq) = pick(&mut rng, &stored_flushes) {
        out.push(Corruption::FlipRecovered { seq: seq as u64 });
    }
    out
}

fn stored_flush_seqs(log: &EventLog) -> Vec<usize> {
    let stored: BTreeSet<&MessageId> = log
        .events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::Ingested {
                message_id,
                result: IngestResult::Stored,
                payload: Some(Payload::TrackerBatch(_)),
                ..
            } => Some(message_id),
            _ => None,
        })
        .collect();
    let mut out = Vec::new();
    let mut open = std::collections::BTreeMap::new();
    for e in &log.events {
        match (&e.body, e.participant_id) {
            (EventBody::TrackerFlush { .. }, Some(p)) => {
                open.insert(p, e.seq);
            }
            (EventBody::Enqueued { message_id, .. }, Some(p)) if stored.contains(message_id) => {
                if let Some(seq) = open.remove(&p) {
                    out.push(seq as usize);
                }
            }
            _ => {}
        }
    }
    out
}
