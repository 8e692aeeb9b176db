//! Event log to analysis dataset: one row per scheduled decision point.
//!
//! The pipeline reads only what a study server would hold: the run header
//! (configuration and itineraries), payloads the server stored, the server's
//! own randomization records, and device power/dropout telemetry. It never
//! sees the ground-truth ledger.

pub mod export;
pub mod outcome;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agents::{Agent, EngagementKind, Outcome, RandomizationRecord};
use crate::error::{Error, Result};
use crate::model::{
    build_schedule, ComponentId, ContextSnapshot, DailyObservation, DecisionKey, LocationCategory, ObservationValue,
    ParticipantId, Probability, ProximalWindow, Region, Weather,
};
use crate::sim::log::{EventBody, EventLog, ParticipantRegions};
use crate::sim::scenario::FaultKind;
use crate::sync::{IngestResult, Payload, PayloadKind};
use crate::time::{local_day_bounds, localize_schedule, weekday_code, Timestamp, WallClock};
use outcome::{compute_window, Sample, SampleSet, WindowOutcome};

/// Why a field has no value. Written in place of the value as `NA:CODE`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MissingnessCode {
    NoResponse,
    SensorGapAmbiguous,
    DeviceOff,
    SyncPendingRecovered,
    DataQuarantined,
    Unavailable,
    TravelExcluded,
    UndeliveredTreatment,
    /// No daily observation before the decision point.
    NoPrior,
    /// The outcome window lies past the last study day.
    StudyEnd,
    Dropout,
    /// Expected data never reached the server.
    NotRecorded,
    NotTreated,
}

impl MissingnessCode {
    pub const ALL: [MissingnessCode; 13] = [
        MissingnessCode::NoResponse,
        MissingnessCode::SensorGapAmbiguous,
        MissingnessCode::DeviceOff,
        MissingnessCode::SyncPendingRecovered,
        MissingnessCode::DataQuarantined,
        MissingnessCode::Unavailable,
        MissingnessCode::TravelExcluded,
        MissingnessCode::UndeliveredTreatment,
        MissingnessCode::NoPrior,
        MissingnessCode::StudyEnd,
        MissingnessCode::Dropout,
        MissingnessCode::NotRecorded,
        MissingnessCode::NotTreated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MissingnessCode::NoResponse => "NO_RESPONSE",
            MissingnessCode::SensorGapAmbiguous => "SENSOR_GAP_AMBIGUOUS",
            MissingnessCode::DeviceOff => "DEVICE_OFF",
            MissingnessCode::SyncPendingRecovered => "SYNC_PENDING_RECOVERED",
            MissingnessCode::DataQuarantined => "DATA_QUARANTINED",
            MissingnessCode::Unavailable => "UNAVAILABLE",
            MissingnessCode::TravelExcluded => "TRAVEL_EXCLUDED",
            MissingnessCode::UndeliveredTreatment => "UNDELIVERED_TREATMENT",
            MissingnessCode::NoPrior => "NO_PRIOR",
            MissingnessCode::StudyEnd => "STUDY_END",
            MissingnessCode::Dropout => "DROPOUT",
            MissingnessCode::NotRecorded => "NOT_RECORDED",
            MissingnessCode::NotTreated => "NOT_TREATED",
        }
    }
}

impl fmt::Display for MissingnessCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MissingnessCode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Export(format!("unknown missingness code `{s}`")))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeSource {
    Tracker,
    TrackerZeroImputed,
    RedundantImputed,
}

impl OutcomeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeSource::Tracker => "TRACKER",
            OutcomeSource::TrackerZeroImputed => "TRACKER_ZERO_IMPUTED",
            OutcomeSource::RedundantImputed => "REDUNDANT_IMPUTED",
        }
    }
}

impl FromStr for OutcomeSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [OutcomeSource::Tracker, OutcomeSource::TrackerZeroImputed, OutcomeSource::RedundantImputed]
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Export(format!("unknown outcome source `{s}`")))
    }
}

/// Which imputation the exported outcomes carry.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Gaps left as coded missing values.
    Raw,
    Zero,
    /// Gaps filled from the phone step counter where it has coverage, the rest zero.
    Redundant,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Variant::Raw),
            "zero" => Ok(Variant::Zero),
            "redundant" => Ok(Variant::Redundant),
            _ => Err(Error::validation("variant", format!("`{s}` is not raw, zero or redundant"))),
        }
    }
}

/// One row per scheduled decision point.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisRow {
    pub participant_id: ParticipantId,
    pub component_id: ComponentId,
    pub global_index: u32,
    pub day_index: u32,
    pub slot_index: u32,
    pub time_slot: WallClock,
    pub day_of_week: String,
    pub scheduled_utc: Timestamp,
    pub tz_offset_minutes: i32,
    pub travel_excluded: bool,
    pub agent: Option<Agent>,
    pub decision_utc: Option<Timestamp>,
    pub available: bool,
    /// Empty exactly when available.
    pub availability_reasons: Vec<String>,
    pub treatment: Option<u8>,
    pub probability: Probability,
    pub delivered_utc: Option<Timestamp>,
    pub window_start: Option<Timestamp>,
    pub window_end: Option<Timestamp>,
    pub proximal_outcome: Option<u64>,
    pub outcome_source: Option<OutcomeSource>,
    pub engagement: Option<EngagementKind>,
    pub location_category: Option<LocationCategory>,
    pub weather: Option<Weather>,
    pub context_staleness_secs: Option<i64>,
    /// Most recent prior value of each daily measure, keyed by measure id.
    pub daily: BTreeMap<String, Option<f64>>,
    /// Field name to the code explaining its absence (or its provenance).
    pub codes: BTreeMap<String, MissingnessCode>,
}

impl AnalysisRow {
    pub fn key(&self) -> DecisionKey {
        DecisionKey {
            participant_id: self.participant_id,
            component_id: self.component_id.clone(),
            global_index: self.global_index,
        }
    }

    fn code(&mut self, field: &str, code: MissingnessCode) {
        self.codes.insert(field.to_string(), code);
    }

    pub fn is_weekend(&self) -> bool {
        matches!(self.day_of_week.as_str(), "SAT" | "SUN")
    }

    /// Numeric covariate by name, for the estimator. Supported: `day_index`,
    /// `slot_index`, `weekend`, `location_home`/`_work`/`_other`,
    /// `daily_<measure>`.
    pub fn covariate(&self, name: &str) -> Option<f64> {
        let indicator = |b: bool| if b { 1.0 } else { 0.0 };
        match name {
            "day_index" => Some(f64::from(self.day_index)),
            "slot_index" => Some(f64::from(self.slot_index)),
            "weekend" => Some(indicator(self.is_weekend())),
            "location_home" => self.location_category.map(|c| indicator(c == LocationCategory::Home)),
            "location_work" => self.location_category.map(|c| indicator(c == LocationCategory::Work)),
            "location_other" => self.location_category.map(|c| indicator(c == LocationCategory::Other)),
            _ => name.strip_prefix("daily_").and_then(|m| self.daily.get(m).copied().flatten()),
        }
    }
}

/// Region membership; no coordinates survive past this point.
pub fn coarsen_location(snapshot: &ContextSnapshot, home: &Region, work: &Region) -> LocationCategory {
    match &snapshot.location {
        None => LocationCategory::Unknown,
        Some(p) if home.contains(p) => LocationCategory::Home,
        Some(p) if work.contains(p) => LocationCategory::Work,
        Some(_) => LocationCategory::Other,
    }
}

/// SENSOR_GAP_AMBIGUOUS outcomes become 0. Idempotent.
pub fn zero_impute(rows: &[AnalysisRow]) -> Vec<AnalysisRow> {
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            if r.proximal_outcome.is_none() && r.codes.get("proximal_outcome") == Some(&MissingnessCode::SensorGapAmbiguous) {
                r.proximal_outcome = Some(0);
                r.outcome_source = Some(OutcomeSource::TrackerZeroImputed);
                r.codes.remove("outcome_source");
            }
            r
        })
        .collect()
}

/// Fill gap rows from the redundant stream where it overlaps the window.
pub fn impute_from_redundant(rows: &[AnalysisRow], redundant: &BTreeMap<ParticipantId, SampleSet>) -> Vec<AnalysisRow> {
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            let gap = r.proximal_outcome.is_none()
                && r.codes.get("proximal_outcome") == Some(&MissingnessCode::SensorGapAmbiguous);
            if let (true, Some(start), Some(end), Some(set)) =
                (gap, r.window_start, r.window_end, redundant.get(&r.participant_id))
            {
                if let Some((steps, _)) = set.prorated_sum(start, end) {
                    r.proximal_outcome = Some(steps);
                    r.outcome_source = Some(OutcomeSource::RedundantImputed);
                    r.codes.remove("outcome_source");
                }
            }
            r
        })
        .collect()
}

/// Attach to each row the latest observation of every measure recorded
/// strictly before the row's randomization instant (its scheduled instant
/// when it was never randomized).
pub fn merge_daily(rows: &mut [AnalysisRow], daily: &[DailyObservation]) {
    let mut by: BTreeMap<(ParticipantId, &str), Vec<&DailyObservation>> = BTreeMap::new();
    let mut measures = BTreeSet::new();
    for o in daily {
        by.entry((o.participant_id, o.measure_id.as_str())).or_default().push(o);
        measures.insert(o.measure_id.as_str());
    }
    for list in by.values_mut() {
        list.sort_by_key(|o| o.recorded_at);
    }
    for row in rows {
        let at = row.decision_utc.unwrap_or(row.scheduled_utc);
        for &m in &measures {
            let field = format!("daily_{m}");
            let prior = by
                .get(&(row.participant_id, m))
                .and_then(|list| list[..list.partition_point(|o| o.recorded_at < at)].last());
            let value = match prior.map(|o| &o.value) {
                Some(ObservationValue::Numeric(v)) => Some(*v),
                Some(ObservationValue::NoResponse) => {
                    row.code(&field, MissingnessCode::NoResponse);
                    None
                }
                Some(ObservationValue::Categorical(_)) => {
                    row.code(&field, MissingnessCode::NotRecorded);
                    None
                }
                None => {
                    row.code(&field, MissingnessCode::NoPrior);
                    None
                }
            };
            row.daily.insert(m.to_string(), value);
        }
    }
}

/// Half-open activity intervals per participant rebuilt from fault edges.
#[derive(Default)]
struct Telemetry {
    starts: BTreeMap<(ParticipantId, FaultKind), Vec<Timestamp>>,
    ends: BTreeMap<(ParticipantId, FaultKind), Vec<Timestamp>>,
}

impl Telemetry {
    fn active(&self, p: ParticipantId, kind: FaultKind, t: Timestamp) -> bool {
        let count = |m: &BTreeMap<(ParticipantId, FaultKind), Vec<Timestamp>>| {
            m.get(&(p, kind)).map_or(0, |v| v.iter().filter(|&&x| x <= t).count())
        };
        count(&self.starts) > count(&self.ends)
    }

    fn device_cause(&self, p: ParticipantId, t: Timestamp) -> Option<MissingnessCode> {
        if self.active(p, FaultKind::Dropout, t) {
            Some(MissingnessCode::Dropout)
        } else if self.active(p, FaultKind::PhonePowerOff, t) {
            Some(MissingnessCode::DeviceOff)
        } else {
            None
        }
    }
}

/// What the server side of a run knows, gathered from the log.
#[derive(Default)]
struct ServerView {
    records: BTreeMap<DecisionKey, RandomizationRecord>,
    contexts: BTreeMap<DecisionKey, ContextSnapshot>,
    engagements: BTreeMap<DecisionKey, EngagementKind>,
    tracker: BTreeMap<ParticipantId, Vec<Sample>>,
    fit: BTreeMap<ParticipantId, Vec<Sample>>,
    daily: Vec<DailyObservation>,
    quarantined: BTreeSet<(DecisionKey, PayloadKind)>,
    telemetry: Telemetry,
}

impl ServerView {
    fn gather(log: &EventLog, agent: Agent) -> Self {
        let mut v = ServerView::default();
        for e in &log.events {
            match &e.body {
                EventBody::Ingested {
                    result: IngestResult::Stored,
                    payload: Some(p),
                    ..
                } => v.store(p, agent),
                EventBody::Ingested {
                    result: IngestResult::Quarantined { .. },
                    kind,
                    locator: Some(k),
                    ..
                } => {
                    v.quarantined.insert((k.clone(), *kind));
                }
                EventBody::Randomized { record } if agent == Agent::Server && record.agent == Agent::Server => {
                    v.records.insert(record.key(), record.clone());
                }
                EventBody::FaultStart { kind } | EventBody::FaultEnd { kind }
                    if matches!(kind, FaultKind::PhonePowerOff | FaultKind::Dropout) =>
                {
                    if let Some(p) = e.participant_id {
                        let map = if matches!(e.body, EventBody::FaultStart { .. }) {
                            &mut v.telemetry.starts
                        } else {
                            &mut v.telemetry.ends
                        };
                        map.entry((p, *kind)).or_default().push(e.utc);
                    }
                }
                _ => {}
            }
        }
        v
    }

    fn store(&mut self, p: &Payload, agent: Agent) {
        match p {
            Payload::Randomization(r) if agent == Agent::Phone => {
                self.records.insert(r.key(), r.clone());
            }
            Payload::Randomization(_) => {}
            Payload::Engagement(e) => {
                self.engagements.insert(e.decision.clone(), e.kind);
            }
            Payload::Context(c) => {
                if let Some(k) = &c.decision {
                    self.contexts.insert(k.clone(), c.snapshot.clone());
                }
            }
            Payload::TrackerBatch(b) => {
                self.tracker.entry(b.participant_id).or_default().extend(b.sensor_samples().map(|s| Sample {
                    start: s.start,
                    end: s.end,
                    steps: s.steps,
                    recovered: b.recovered,
                }));
            }
            Payload::PhoneFitBatch(b) => {
                self.fit.entry(b.participant_id).or_default().extend(b.sensor_samples().map(|s| Sample {
                    start: s.start,
                    end: s.end,
                    steps: s.steps,
                    recovered: false,
                }));
            }
            Payload::Daily(o) => self.daily.push(o.clone()),
        }
    }

    /// Why a phone-side item for `key` at `t` never arrived.
    fn absence(&self, key: &DecisionKey, kind: PayloadKind, t: Timestamp) -> MissingnessCode {
        if let Some(c) = self.telemetry.device_cause(key.participant_id, t) {
            c
        } else if self.quarantined.contains(&(key.clone(), kind)) {
            MissingnessCode::DataQuarantined
        } else {
            MissingnessCode::NotRecorded
        }
    }
}

/// The assembled dataset before imputation, plus the redundant stream the
/// sensitivity variant needs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub rows: Vec<AnalysisRow>,
    pub daily_measures: Vec<String>,
    pub redundant: BTreeMap<ParticipantId, SampleSet>,
}

impl Dataset {
    pub fn variant(&self, v: Variant) -> Vec<AnalysisRow> {
        match v {
            Variant::Raw => self.rows.clone(),
            Variant::Zero => zero_impute(&self.rows),
            Variant::Redundant => zero_impute(&impute_from_redundant(&self.rows, &self.redundant)),
        }
    }
}

pub fn assemble(log: &EventLog) -> Result<Dataset> {
    let header = log.header()?;
    let scenario = &header.scenario;
    let trial = &scenario.trial;
    let agent = scenario.agent;
    let wear_secs = i64::from(scenario.pipeline.wear_window_minutes) * 60;
    let schedule = build_schedule(trial)?;
    let localized = localize_schedule(&schedule, trial, &header.itineraries)?;
    let view = ServerView::gather(log, agent);
    let tracker: BTreeMap<ParticipantId, SampleSet> =
        view.tracker.iter().map(|(p, s)| (*p, SampleSet::new(s.clone()))).collect();
    let redundant: BTreeMap<ParticipantId, SampleSet> =
        view.fit.iter().map(|(p, s)| (*p, SampleSet::new(s.clone()))).collect();
    let empty = SampleSet::default();

    let mut rows = Vec::with_capacity(schedule.len());
    for lp in &localized {
        let dp = &lp.point;
        let p = dp.participant_id;
        let key = dp.key();
        let spec = trial.component(&dp.component_id)?;
        let mut row = AnalysisRow {
            participant_id: p,
            component_id: dp.component_id.clone(),
            global_index: dp.global_index,
            day_index: dp.day_index,
            slot_index: dp.slot_index,
            time_slot: dp.scheduled_local_time,
            day_of_week: weekday_code(trial.local_date(dp.day_index)).to_string(),
            scheduled_utc: lp.scheduled_at,
            tz_offset_minutes: lp.tz_offset_minutes,
            travel_excluded: lp.travel_excluded,
            agent: None,
            decision_utc: None,
            available: false,
            availability_reasons: Vec::new(),
            treatment: None,
            probability: spec.randomization_probability,
            delivered_utc: None,
            window_start: None,
            window_end: None,
            proximal_outcome: None,
            outcome_source: None,
            engagement: None,
            location_category: None,
            weather: None,
            context_staleness_secs: None,
            daily: BTreeMap::new(),
            codes: BTreeMap::new(),
        };
        if lp.travel_excluded {
            row.code("row", MissingnessCode::TravelExcluded);
        }

        let record = view.records.get(&key);
        let anchor_default = record.map_or(lp.scheduled_at, |r| r.scheduled_at);
        match record {
            None => {
                let cause = view.absence(&key, PayloadKind::Randomization, lp.scheduled_at);
                row.availability_reasons = vec![cause.as_str().to_string()];
                for f in ["agent", "decision_utc", "treatment", "delivered_utc", "engagement", "context_staleness_secs"] {
                    row.code(f, cause);
                }
            }
            Some(r) => {
                row.agent = Some(r.agent);
                row.probability = r.probability;
                row.decision_utc = Some(r.randomized_at.unwrap_or(r.scheduled_at));
                row.available = r.availability.available();
                row.availability_reasons = r.availability.reasons().iter().map(|x| x.as_str().to_string()).collect();
                match r.context_staleness_secs {
                    Some(s) => row.context_staleness_secs = Some(s),
                    None => row.code("context_staleness_secs", MissingnessCode::NotRecorded),
                }
                match r.outcome {
                    Outcome::NotRandomized => {
                        for f in ["treatment", "delivered_utc", "engagement"] {
                            row.code(f, MissingnessCode::Unavailable);
                        }
                    }
                    Outcome::NoTreat => {
                        row.treatment = Some(0);
                        row.code("delivered_utc", MissingnessCode::NotTreated);
                        row.code("engagement", MissingnessCode::NotTreated);
                    }
                    Outcome::Treat => {
                        row.treatment = Some(1);
                        match r.delivered_at {
                            None => {
                                row.code("delivered_utc", MissingnessCode::UndeliveredTreatment);
                                row.code("engagement", MissingnessCode::UndeliveredTreatment);
                            }
                            Some(at) => {
                                row.delivered_utc = Some(at);
                                match view.engagements.get(&key) {
                                    Some(EngagementKind::NoResponse) => row.code("engagement", MissingnessCode::NoResponse),
                                    Some(k) => row.engagement = Some(*k),
                                    None => {
                                        let c = view.absence(&key, PayloadKind::Engagement, at);
                                        row.code("engagement", c);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        match view.contexts.get(&key) {
            Some(snap) => {
                let regions = header.regions.get(&p).ok_or_else(|| {
                    Error::EventLog(format!("header has no regions for participant {p}"))
                })?;
                let ParticipantRegions { home, work } = regions;
                row.location_category = Some(coarsen_location(snap, home, work));
                row.weather = Some(snap.weather);
            }
            None => {
                let c = view.absence(&key, PayloadKind::Context, anchor_default);
                row.code("location_category", c);
                row.code("weather", c);
            }
        }

        let window = match &spec.proximal_window {
            ProximalWindow::PostWindowMinutes { minutes } => {
                let start = row.delivered_utc.unwrap_or(anchor_default);
                Some((start, start.plus_minutes(i64::from(*minutes))))
            }
            ProximalWindow::NextDayTotal if dp.day_index + 1 < trial.study_days => {
                Some(local_day_bounds(trial, header.itineraries.get(p), dp.day_index + 1)?)
            }
            ProximalWindow::NextDayTotal => None,
        };
        match window {
            None => {
                for f in ["window_start_utc", "window_end_utc", "proximal_outcome", "outcome_source"] {
                    row.code(f, MissingnessCode::StudyEnd);
                }
            }
            Some((start, end)) => {
                row.window_start = Some(start);
                row.window_end = Some(end);
                match compute_window(tracker.get(&p).unwrap_or(&empty), start, end, wear_secs) {
                    WindowOutcome::Observed { steps, recovered } => {
                        row.proximal_outcome = Some(steps);
                        row.outcome_source = Some(OutcomeSource::Tracker);
                        if recovered {
                            row.code("proximal_outcome", MissingnessCode::SyncPendingRecovered);
                        }
                    }
                    WindowOutcome::TrueZero => {
                        row.proximal_outcome = Some(0);
                        row.outcome_source = Some(OutcomeSource::Tracker);
                    }
                    WindowOutcome::Gap => {
                        row.code("proximal_outcome", MissingnessCode::SensorGapAmbiguous);
                        row.code("outcome_source", MissingnessCode::SensorGapAmbiguous);
                    }
                }
            }
        }
        rows.push(row);
    }

    merge_daily(&mut rows, &view.daily);
    rows.sort_by(|a, b| {
        (a.participant_id, a.component_id.as_str(), a.global_index).cmp(&(
            b.participant_id,
            b.component_id.as_str(),
            b.global_index,
        ))
    });
    let daily_measures = view
        .daily
        .iter()
        .map(|o| o.measure_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(Dataset {
        rows,
        daily_measures,
        redundant,
    })
}
