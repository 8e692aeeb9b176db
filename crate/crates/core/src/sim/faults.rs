//! Per-participant fault windows, itineraries derived from travel faults, and
//! randomized fault schedules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scenario::{FaultKind, FaultSpec, FaultTargets, ScenarioConfig, TimezoneConfig};
use crate::error::{Error, Result};
use crate::model::{ParticipantId, TrialConfig};
use crate::time::{local_day_bounds, Itinerary, Segment, Timestamp};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaultWindow {
    pub kind: FaultKind,
    pub start: Timestamp,
    pub end: Option<Timestamp>,
}

impl FaultWindow {
    pub fn contains(&self, t: Timestamp) -> bool {
        t >= self.start && self.end.is_none_or(|e| t < e)
    }
}

/// The fault windows that touch one participant.
#[derive(Clone, Debug, Default)]
pub struct ParticipantFaults {
    windows: Vec<FaultWindow>,
}

impl ParticipantFaults {
    pub fn for_participant(faults: &[FaultSpec], participant: ParticipantId) -> Self {
        let mut windows: Vec<FaultWindow> = faults
            .iter()
            .filter(|f| f.targets.includes(participant))
            .map(|f| FaultWindow {
                kind: f.kind,
                start: f.start,
                end: f.effective_end(),
            })
            .collect();
        windows.sort_by_key(|w| (w.start, w.kind));
        ParticipantFaults { windows }
    }

    pub fn windows(&self) -> &[FaultWindow] {
        &self.windows
    }

    pub fn active(&self, kind: FaultKind, t: Timestamp) -> bool {
        self.windows.iter().any(|w| w.kind == kind && w.contains(t))
    }

    pub fn dropout_at(&self) -> Option<Timestamp> {
        self.windows
            .iter()
            .filter(|w| w.kind == FaultKind::Dropout)
            .map(|w| w.start)
            .min()
    }

    pub fn dropped_out(&self, t: Timestamp) -> bool {
        self.dropout_at().is_some_and(|d| t >= d)
    }

    /// Window ends of `kind` in `(after, until]`, ascending.
    pub fn ends_between(&self, after: Timestamp, until: Timestamp) -> Vec<Timestamp> {
        let mut out: Vec<Timestamp> = self
            .windows
            .iter()
            .filter_map(|w| w.end)
            .filter(|&e| e > after && e <= until)
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

/// The participant's true itinerary: home zone with its DST script, overridden
/// by travel legs. With `phone_view`, legs with a stale phone clock are left
/// out, which is what the phone's scheduler believes.
pub fn participant_itinerary(
    tz: &TimezoneConfig,
    faults: &[FaultSpec],
    participant: ParticipantId,
    phone_view: bool,
) -> Result<Itinerary> {
    let home = tz.home_itinerary()?;
    let mut legs: Vec<&FaultSpec> = faults
        .iter()
        .filter(|f| f.kind == FaultKind::TimezoneTravel && f.targets.includes(participant))
        .filter(|f| !(phone_view && f.stale_clock))
        .collect();
    legs.sort_by_key(|f| f.start);
    if legs.is_empty() {
        return Ok(home);
    }
    let spans: Vec<(Timestamp, Timestamp)> = legs
        .iter()
        .map(|f| (f.start, f.effective_end().expect("travel has an end")))
        .collect();
    if let Some(w) = spans.windows(2).find(|w| w[1].0 < w[0].1) {
        return Err(Error::validation(
            "faults",
            format!("participant {participant} has overlapping travel legs at {}", w[1].0),
        ));
    }
    let inside = |t: Timestamp| spans.iter().any(|&(s, e)| t >= s && t < e);
    let mut segments: Vec<Segment> = home
        .segments()
        .iter()
        .enumerate()
        .filter(|(i, s)| *i == 0 || !inside(s.effective_from))
        .map(|(_, s)| s.clone())
        .collect();
    for (leg, &(start, end)) in legs.iter().zip(&spans) {
        let offset = leg.tz_offset_minutes.expect("validated");
        segments.push(Segment {
            effective_from: start,
            tz_offset_minutes: offset,
            tz_name: leg.tz_name.clone().unwrap_or_else(|| offset_name(offset)),
            dst: false,
        });
        let back = home.segment_at(end);
        segments.push(Segment {
            effective_from: end,
            tz_offset_minutes: back.tz_offset_minutes,
            tz_name: back.tz_name.clone(),
            dst: false,
        });
    }
    segments.sort_by_key(|s| s.effective_from);
    // A return landing exactly on a DST instant replaces it.
    segments.dedup_by(|later, earlier| {
        if later.effective_from == earlier.effective_from {
            if !later.dst {
                std::mem::swap(later, earlier);
            }
            true
        } else {
            false
        }
    });
    Itinerary::new(segments)
}

fn offset_name(offset: i32) -> String {
    let sign = if offset < 0 { '-' } else { '+' };
    format!("UTC{sign}{:02}:{:02}", offset.abs() / 60, offset.abs() % 60)
}

/// UTC span of the study in the home zone: first local midnight to the local
/// midnight after the last day.
pub fn study_span(trial: &TrialConfig, tz: &TimezoneConfig) -> Result<(Timestamp, Timestamp)> {
    let home = tz.home_itinerary()?;
    let (start, _) = local_day_bounds(trial, &home, 0)?;
    let (_, end) = local_day_bounds(trial, &home, trial.study_days - 1)?;
    Ok((start, end))
}

/// A randomized schedule containing every fault kind at least once, plus a few
/// extra windows. Travel is limited to one leg per participant.
pub fn random_fault_schedule(scenario: &ScenarioConfig, schedule_seed: u64) -> Result<Vec<FaultSpec>> {
    let (start, end) = study_span(&scenario.trial, &scenario.timezone)?;
    let n = scenario.trial.participant_count;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule_seed);
    rng.set_stream(crate::rng::Purpose::Faults as u64);
    let mut kinds: Vec<FaultKind> = FaultKind::ALL.to_vec();
    let extra = rng.random_range(2..=6);
    for _ in 0..extra {
        let k = FaultKind::ALL[rng.random_range(0..FaultKind::ALL.len())];
        if !matches!(k, FaultKind::TimezoneTravel | FaultKind::Dropout) {
            kinds.push(k);
        }
    }
    let span = end.0 - start.0;
    let mut travelled = Vec::new();
    let mut out = Vec::new();
    for kind in kinds {
        let single = ParticipantId(rng.random_range(0..n));
        let everyone = rng.random_bool(0.15);
        let targets = match kind {
            FaultKind::TimezoneTravel | FaultKind::Dropout => {
                if kind == FaultKind::TimezoneTravel {
                    if travelled.contains(&single) {
                        continue;
                    }
                    travelled.push(single);
                }
                FaultTargets::Participants(vec![single])
            }
            _ if everyone => FaultTargets::All,
            _ => FaultTargets::Participants(vec![single]),
        };
        let (lo, hi): (i64, i64) = match kind {
            FaultKind::ConnectivityLoss => (3600, 12 * 3600),
            FaultKind::CaptivePortal => (1800, 4 * 3600),
            FaultKind::AppSwipeKill => (60, 600),
            FaultKind::PhonePowerOff => (3600, 10 * 3600),
            FaultKind::TrackerBatteryDead => (6 * 3600, 36 * 3600),
            FaultKind::BluetoothOff => (3600, 8 * 3600),
            FaultKind::GpsOff => (3600, 24 * 3600),
            FaultKind::AckLoss => (3600, 12 * 3600),
            FaultKind::PushDrop => (3600, 12 * 3600),
            FaultKind::TimezoneTravel => (2 * 86_400, 7 * 86_400),
            FaultKind::Dropout => (0, 1),
            FaultKind::PayloadCorruption => (1800, 6 * 3600),
        };
        let duration = rng.random_range(lo..hi);
        let latest = (span - duration).max(1);
        let at = Timestamp(start.0 + rng.random_range(0..latest) / 60 * 60);
        let mut f = FaultSpec::window(kind, targets, at, at.plus_seconds(duration));
        match kind {
            FaultKind::Dropout => {
                // Late enough that the participant contributes some data.
                f.start = Timestamp(start.0 + rng.random_range(span / 3..span) / 60 * 60);
                f.end = None;
            }
            FaultKind::TimezoneTravel => {
                let offsets = [(-600, "HST"), (-480, "PST"), (60, "CET"), (540, "JST")];
                let (o, name) = offsets[rng.random_range(0..offsets.len())];
                f.tz_offset_minutes = Some(o);
                f.tz_name = Some(name.to_string());
                f.stale_clock = rng.random_bool(0.5);
            }
            _ => {}
        }
        f.validate("faults")?;
        out.push(f);
    }
    Ok(out)
}
