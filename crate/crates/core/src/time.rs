//! UTC-first timestamps, fixed-offset itineraries and decision-point localization.
//!
//! Every instant in the system is a [`Timestamp`]: integer seconds since the
//! Unix epoch in UTC. Local wall-clock time only exists transiently, derived
//! from an instant plus the offset of the [`Itinerary`] segment in force.
//! Time zones are modelled as explicit fixed-offset segments (travel legs and
//! scripted DST transitions), never read from a system database.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, Weekday};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{DecisionPoint, ParticipantId, TimezonePolicy, TrialConfig};

/// Largest offset magnitude accepted, in minutes (UTC+14 / UTC-14).
pub const MAX_OFFSET_MINUTES: i32 = 14 * 60;

/// Seconds since the Unix epoch, UTC. Serialized as `YYYY-MM-DDTHH:MM:SSZ`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

impl Timestamp {
    /// 0000-01-01T00:00:00Z, the earliest stamp the text form can carry.
    pub const EARLIEST: Timestamp = Timestamp(-62_167_219_200);

    pub const fn seconds(self) -> i64 {
        self.0
    }

    pub const fn plus_seconds(self, secs: i64) -> Self {
        Timestamp(self.0 + secs)
    }

    pub const fn plus_minutes(self, minutes: i64) -> Self {
        Timestamp(self.0 + minutes * 60)
    }

    /// Start of the UTC minute containing this instant.
    pub const fn floor_minute(self) -> Self {
        Timestamp(self.0.div_euclid(60) * 60)
    }

    pub fn to_iso(self) -> String {
        self.to_string()
    }

    pub fn parse_iso(s: &str) -> Result<Self> {
        let bad = || Error::InvalidTimestamp(s.to_string());
        let b = s.as_bytes();
        if b.len() != 20 || b[4] != b'-' || b[7] != b'-' || b[10] != b'T' || b[13] != b':' || b[16] != b':' || b[19] != b'Z' {
            return Err(bad());
        }
        let num = |r: std::ops::Range<usize>| -> Result<u32> {
            b[r].iter().try_fold(0u32, |acc, &c| {
                c.is_ascii_digit().then(|| acc * 10 + u32::from(c - b'0')).ok_or_else(bad)
            })
        };
        let date = NaiveDate::from_ymd_opt(num(0..4)? as i32, num(5..7)?, num(8..10)?).ok_or_else(bad)?;
        let dt = date.and_hms_opt(num(11..13)?, num(14..16)?, num(17..19)?).ok_or_else(bad)?;
        Ok(Timestamp(dt.and_utc().timestamp()))
    }

    /// `YYYY-MM-DDTHH:MM:SSZ` for years 0 through 9999.
    fn iso_bytes(self) -> Option<[u8; 20]> {
        let days = self.0.div_euclid(86_400);
        let secs = self.0.rem_euclid(86_400) as u32;
        // Civil date from days since 1970-01-01 (proleptic Gregorian).
        let z = days + 719_468;
        let era = z.div_euclid(146_097);
        let doe = z.rem_euclid(146_097);
        let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
        let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
        let mp = (5 * doy + 2) / 153;
        let day = (doy - (153 * mp + 2) / 5 + 1) as u32;
        let month = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
        let year = yoe + era * 400 + i64::from(month <= 2);
        if !(0..=9999).contains(&year) {
            return None;
        }
        let mut out = *b"0000-00-00T00:00:00Z";
        let mut put = |at: usize, width: usize, mut v: u32| {
            for i in (0..width).rev() {
                out[at + i] = b'0' + (v % 10) as u8;
                v /= 10;
            }
        };
        put(0, 4, year as u32);
        put(5, 2, month);
        put(8, 2, day);
        put(11, 2, secs / 3600);
        put(14, 2, secs / 60 % 60);
        put(17, 2, secs % 60);
        Some(out)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.iso_bytes() {
            Some(b) => f.write_str(std::str::from_utf8(&b).expect("ASCII")),
            None => write!(f, "@{}", self.0),
        }
    }
}

impl FromStr for Timestamp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Timestamp::parse_iso(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self.iso_bytes() {
            Some(b) => serializer.serialize_str(std::str::from_utf8(&b).expect("ASCII")),
            None => serializer.serialize_str(&self.to_iso()),
        }
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct Iso;
        impl serde::de::Visitor<'_> for Iso {
            type Value = Timestamp;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a UTC timestamp like 2025-03-03T14:00:00Z")
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Timestamp, E> {
                Timestamp::parse_iso(v).map_err(E::custom)
            }
        }
        deserializer.deserialize_str(Iso)
    }
}

/// Local time of day in whole minutes since local midnight, serialized `HH:MM`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WallClock(u16);

impl WallClock {
    pub fn new(hour: u16, minute: u16) -> Result<Self> {
        if hour > 23 || minute > 59 {
            return Err(Error::validation(
                "wall_clock",
                format!("{hour:02}:{minute:02} is not a time of day"),
            ));
        }
        Ok(WallClock(hour * 60 + minute))
    }

    pub const fn from_minutes(minutes: u16) -> Self {
        WallClock(minutes % (24 * 60))
    }

    pub const fn minutes(self) -> u16 {
        self.0
    }
}

impl fmt::Display for WallClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.0 / 60, self.0 % 60)
    }
}

impl FromStr for WallClock {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::validation("wall_clock", format!("`{s}` is not HH:MM"));
        let (h, m) = s.split_once(':').ok_or_else(bad)?;
        WallClock::new(h.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?)
    }
}

impl Serialize for WallClock {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for WallClock {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Seconds since the epoch of a local wall-clock reading, as if the wall clock were UTC.
pub fn local_seconds(date: NaiveDate, wall: WallClock) -> i64 {
    let midnight = date.and_hms_opt(0, 0, 0).expect("midnight exists");
    midnight.and_utc().timestamp() + i64::from(wall.minutes()) * 60
}

/// A UTC instant together with the offset and zone name in force when it was taken.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub utc: Timestamp,
    pub tz_offset_minutes: i32,
    pub tz_name: Option<String>,
}

impl Stamp {
    pub fn local_wall(&self) -> NaiveDateTime {
        DateTime::from_timestamp(self.utc.0 + i64::from(self.tz_offset_minutes) * 60, 0)
            .expect("timestamp in range")
            .naive_utc()
    }
}

/// One leg of an itinerary: from `effective_from` onward, this offset applies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub effective_from: Timestamp,
    pub tz_offset_minutes: i32,
    pub tz_name: String,
    /// Marks a daylight-saving transition rather than physical travel.
    #[serde(default)]
    pub dst: bool,
}

/// Ordered, non-overlapping fixed-offset segments. Segments are half-open:
/// an instant exactly at a boundary belongs to the later segment. The first
/// segment also covers all instants before its `effective_from`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct Itinerary {
    segments: Vec<Segment>,
}

impl TryFrom<Vec<Segment>> for Itinerary {
    type Error = Error;
    fn try_from(segments: Vec<Segment>) -> Result<Self> {
        Itinerary::new(segments)
    }
}

impl From<Itinerary> for Vec<Segment> {
    fn from(it: Itinerary) -> Self {
        it.segments
    }
}

impl Itinerary {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::validation("itinerary", "needs at least one segment"));
        }
        for (i, s) in segments.iter().enumerate() {
            if s.tz_offset_minutes.abs() > MAX_OFFSET_MINUTES {
                return Err(Error::validation(
                    format!("itinerary[{i}].tz_offset_minutes"),
                    format!("{} is outside ±14 h", s.tz_offset_minutes),
                ));
            }
        }
        if let Some(i) = segments
            .windows(2)
            .position(|w| w[1].effective_from <= w[0].effective_from)
        {
            return Err(Error::validation(
                format!("itinerary[{}].effective_from", i + 1),
                "segments must be strictly increasing",
            ));
        }
        Ok(Itinerary { segments })
    }

    pub fn fixed(tz_offset_minutes: i32, tz_name: impl Into<String>) -> Result<Self> {
        Itinerary::new(vec![Segment {
            effective_from: Timestamp::EARLIEST,
            tz_offset_minutes,
            tz_name: tz_name.into(),
            dst: false,
        }])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Itinerary with all non-DST transitions removed: what a phone that was
    /// never rebooted keeps believing.
    pub fn without_travel(&self) -> Itinerary {
        let mut segments = vec![self.segments[0].clone()];
        segments.extend(self.segments[1..].iter().filter(|s| s.dst).cloned());
        Itinerary { segments }
    }

    pub fn segment_at(&self, t: Timestamp) -> &Segment {
        let idx = self.segments.partition_point(|s| s.effective_from <= t);
        &self.segments[idx.saturating_sub(1)]
    }

    pub fn offset_at(&self, t: Timestamp) -> i32 {
        self.segment_at(t).tz_offset_minutes
    }

    /// Resolve a local wall-clock reading (local epoch seconds) to a UTC instant.
    ///
    /// Nonexistent readings (spring-forward gaps, eastward jumps) roll forward to
    /// the next valid minute; ambiguous readings take the earliest instant.
    /// Returns the instant and whether a roll-forward happened.
    pub fn local_to_utc(&self, local: i64) -> Result<(Timestamp, bool)> {
        let mut offsets: Vec<i32> = self.segments.iter().map(|s| s.tz_offset_minutes).collect();
        offsets.sort_unstable();
        offsets.dedup();
        for step in 0..=(2 * MAX_OFFSET_MINUTES as i64) {
            let reading = local + step * 60;
            let best = offsets
                .iter()
                .filter_map(|&o| {
                    let u = Timestamp(reading - i64::from(o) * 60);
                    (self.offset_at(u) == o).then_some(u)
                })
                .min();
            if let Some(u) = best {
                return Ok((u, step > 0));
            }
        }
        Err(Error::ItineraryGap(format!("local reading {local}")))
    }

    /// True when a non-DST transition falls inside `[start, end)`.
    pub fn travels_within(&self, start: Timestamp, end: Timestamp) -> bool {
        self.segments[1..]
            .iter()
            .any(|s| !s.dst && s.effective_from >= start && s.effective_from < end)
    }

    pub fn has_travel(&self) -> bool {
        self.segments[1..].iter().any(|s| !s.dst)
    }
}

/// Stamp an instant with the offset of the segment containing it.
pub fn stamp(now: Timestamp, itinerary: &Itinerary) -> Stamp {
    let seg = itinerary.segment_at(now);
    Stamp {
        utc: now,
        tz_offset_minutes: seg.tz_offset_minutes,
        tz_name: Some(seg.tz_name.clone()),
    }
}

/// Per-participant itineraries with a shared default.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItinerarySet {
    pub default: Itinerary,
    #[serde(default)]
    pub overrides: BTreeMap<ParticipantId, Itinerary>,
}

impl ItinerarySet {
    pub fn uniform(default: Itinerary) -> Self {
        ItinerarySet {
            default,
            overrides: BTreeMap::new(),
        }
    }

    pub fn get(&self, participant: ParticipantId) -> &Itinerary {
        self.overrides.get(&participant).unwrap_or(&self.default)
    }
}

/// A decision point pinned to a concrete UTC instant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalizedPoint {
    pub point: DecisionPoint,
    pub scheduled_at: Timestamp,
    pub tz_offset_minutes: i32,
    /// The wall-clock slot did not exist that day and was rolled forward.
    pub rolled_forward: bool,
    /// Tagged for exclusion under [`TimezonePolicy::ExcludeTravel`].
    pub travel_excluded: bool,
}

/// UTC bounds `[start, end)` of local calendar day `day_index`.
pub fn local_day_bounds(
    config: &TrialConfig,
    itinerary: &Itinerary,
    day_index: u32,
) -> Result<(Timestamp, Timestamp)> {
    let midnight = WallClock::from_minutes(0);
    let day = config.local_date(day_index);
    let next = config.local_date(day_index + 1);
    let (start, _) = itinerary.local_to_utc(local_seconds(day, midnight))?;
    let (end, _) = itinerary.local_to_utc(local_seconds(next, midnight))?;
    Ok((start, end))
}

/// Pin every decision point to the UTC instant of its local wall-clock slot,
/// using the offset in force at that instant. Indices are never duplicated or
/// skipped: each scheduled point maps to exactly one instant.
pub fn localize_schedule(
    schedule: &[DecisionPoint],
    config: &TrialConfig,
    itineraries: &ItinerarySet,
) -> Result<Vec<LocalizedPoint>> {
    let mut travel_days: BTreeMap<(ParticipantId, u32), bool> = BTreeMap::new();
    schedule
        .iter()
        .map(|dp| {
            let itinerary = itineraries.get(dp.participant_id);
            let date = config.local_date(dp.day_index);
            let (utc, rolled) =
                itinerary.local_to_utc(local_seconds(date, dp.scheduled_local_time))?;
            let travel_excluded = match config.timezone_policy {
                TimezonePolicy::LocalIndexed => false,
                TimezonePolicy::ExcludeTravel => {
                    let key = (dp.participant_id, dp.day_index);
                    match travel_days.get(&key) {
                        Some(&t) => t,
                        None => {
                            let (start, end) = local_day_bounds(config, itinerary, dp.day_index)?;
                            let t = itinerary.travels_within(start, end);
                            travel_days.insert(key, t);
                            t
                        }
                    }
                }
            };
            Ok(LocalizedPoint {
                point: dp.clone(),
                scheduled_at: utc,
                tz_offset_minutes: itinerary.offset_at(utc),
                rolled_forward: rolled,
                travel_excluded,
            })
        })
        .collect()
}

pub fn weekday_code(date: NaiveDate) -> &'static str {
    match date.weekday() {
        Weekday::Mon => "MON",
        Weekday::Tue => "TUE",
        Weekday::Wed => "WED",
        Weekday::Thu => "THU",
        Weekday::Fri => "FRI",
        Weekday::Sat => "SAT",
        Weekday::Sun => "SUN",
    }
}

pub fn is_weekend(date: NaiveDate) -> bool {
    matches!(date.weekday(), Weekday::Sat | Weekday::Sun)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn iso_matches_chrono(secs in -62_167_219_200i64..253_402_300_800) {
            let t = Timestamp(secs);
            let want = DateTime::from_timestamp(secs, 0).unwrap().format("%Y-%m-%dT%H:%M:%SZ").to_string();
            prop_assert_eq!(t.to_iso(), want.clone());
            prop_assert_eq!(Timestamp::parse_iso(&want).unwrap(), t);
        }
    }

    #[test]
    fn malformed_iso_is_rejected() {
        for s in ["2025-02-30T00:00:00Z", "2025-03-03T24:00:00Z", "2025-03-03 10:00:00Z", "2025-03-03T10:00:00", "2025-3-03T10:00:00Z"] {
            assert!(Timestamp::parse_iso(s).is_err(), "{s}");
        }
    }

    fn ts(s: &str) -> Timestamp {
        s.parse().unwrap()
    }

    // Eastern daylight time to Hawaii: six hours.
    fn est_to_hst(at: &str) -> Itinerary {
        Itinerary::new(vec![
            Segment {
                effective_from: Timestamp::EARLIEST,
                tz_offset_minutes: -240,
                tz_name: "EDT".into(),
                dst: false,
            },
            Segment {
                effective_from: ts(at),
                tz_offset_minutes: -600,
                tz_name: "HST".into(),
                dst: false,
            },
        ])
        .unwrap()
    }

    #[test]
    fn iso_round_trip_requires_utc_marker() {
        let t = ts("2025-03-01T13:05:09Z");
        assert_eq!(t.to_iso(), "2025-03-01T13:05:09Z");
        assert!(Timestamp::parse_iso("2025-03-01T13:05:09").is_err());
        assert!(Timestamp::parse_iso("2025-03-01T13:05:09+01:00").is_err());
    }

    #[test]
    fn fixed_offset_local_evening_maps_to_utc() {
        let it = Itinerary::fixed(-300, "EST").unwrap();
        let date = NaiveDate::from_ymd_opt(2025, 3, 1).unwrap();
        let (utc, rolled) = it
            .local_to_utc(local_seconds(date, WallClock::new(18, 0).unwrap()))
            .unwrap();
        assert_eq!(utc, ts("2025-03-01T23:00:00Z"));
        assert!(!rolled);
        assert_eq!(stamp(utc, &it).local_wall().to_string(), "2025-03-01 18:00:00");
    }

    #[test]
    fn boundary_instant_takes_new_segment() {
        let it = est_to_hst("2025-03-10T15:00:00Z");
        assert_eq!(stamp(ts("2025-03-10T14:59:59Z"), &it).tz_offset_minutes, -240);
        assert_eq!(stamp(ts("2025-03-10T15:00:00Z"), &it).tz_offset_minutes, -600);
    }

    #[test]
    fn consecutive_stamps_across_flight_shift_by_six_hours() {
        let it = est_to_hst("2025-03-10T15:00:00Z");
        let a = stamp(ts("2025-03-10T14:00:00Z"), &it);
        let b = stamp(ts("2025-03-10T16:00:00Z"), &it);
        assert_eq!(b.tz_offset_minutes - a.tz_offset_minutes, -360);
        assert_eq!(a.tz_name.as_deref(), Some("EDT"));
        assert_eq!(b.tz_name.as_deref(), Some("HST"));
    }

    #[test]
    fn spring_forward_gap_rolls_to_next_valid_minute() {
        // 2025-03-09 02:00 EST -> 03:00 EDT (07:00Z).
        let it = Itinerary::new(vec![
            Segment {
                effective_from: Timestamp::EARLIEST,
                tz_offset_minutes: -300,
                tz_name: "EST".into(),
                dst: false,
            },
            Segment {
                effective_from: ts("2025-03-09T07:00:00Z"),
                tz_offset_minutes: -240,
                tz_name: "EDT".into(),
                dst: true,
            },
        ])
        .unwrap();
        let date = NaiveDate::from_ymd_opt(2025, 3, 9).unwrap();
        let (utc, rolled) = it
            .local_to_utc(local_seconds(date, WallClock::new(2, 30).unwrap()))
            .unwrap();
        assert!(rolled);
        assert_eq!(utc, ts("2025-03-09T07:00:00Z"));
        assert_eq!(stamp(utc, &it).local_wall().to_string(), "2025-03-09 03:00:00");
    }

    #[test]
    fn fall_back_ambiguity_takes_first_occurrence() {
        // 2025-11-02 02:00 EDT -> 01:00 EST (06:00Z). 01:30 happens twice.
        let it = Itinerary::new(vec![
            Segment {
                effective_from: Timestamp::EARLIEST,
                tz_offset_minutes: -240,
                tz_name: "EDT".into(),
                dst: false,
            },
            Segment {
                effective_from: ts("2025-11-02T06:00:00Z"),
                tz_offset_minutes: -300,
                tz_name: "EST".into(),
                dst: true,
            },
        ])
        .unwrap();
        let date = NaiveDate::from_ymd_opt(2025, 11, 2).unwrap();
        let (utc, rolled) = it
            .local_to_utc(local_seconds(date, WallClock::new(1, 30).unwrap()))
            .unwrap();
        assert!(!rolled);
        assert_eq!(utc, ts("2025-11-02T05:30:00Z"));
    }

    #[test]
    fn itinerary_rejects_unsorted_and_extreme_offsets() {
        let seg = |t: i64, o: i32| Segment {
            effective_from: Timestamp(t),
            tz_offset_minutes: o,
            tz_name: "X".into(),
            dst: false,
        };
        assert!(Itinerary::new(vec![seg(10, 0), seg(5, 60)]).is_err());
        assert!(Itinerary::new(vec![seg(0, 15 * 60)]).is_err());
        assert!(Itinerary::new(vec![]).is_err());
    }

    #[test]
    fn stamp_serialization_round_trips() {
        let it = est_to_hst("2025-03-10T15:00:00Z");
        let s = stamp(ts("2025-03-10T16:00:00Z"), &it);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(
            json,
            r#"{"utc":"2025-03-10T16:00:00Z","tz_offset_minutes":-600,"tz_name":"HST"}"#
        );
        assert_eq!(serde_json::from_str::<Stamp>(&json).unwrap(), s);
    }
}
