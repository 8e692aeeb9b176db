//! Trial protocol types and the decision-point schedule builder.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::time::{Timestamp, WallClock};

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct ParticipantId(pub u32);

// Accepts the string form too: map keys inside flattened log events arrive as strings.
impl<'de> Deserialize<'de> for ParticipantId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = ParticipantId;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a participant number")
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<ParticipantId, E> {
                u32::try_from(v).map(ParticipantId).map_err(E::custom)
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<ParticipantId, E> {
                v.parse().map(ParticipantId).map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentId(pub String);

impl ComponentId {
    pub fn new(id: impl Into<String>) -> Self {
        ComponentId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A randomization probability held exactly as parts per million.
///
/// Serialized as a minimal decimal string (`"0.6"`), never as a float.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Probability(u32);

impl Probability {
    pub const SCALE: u32 = 1_000_000;
    pub const ZERO: Probability = Probability(0);
    pub const ONE: Probability = Probability(Self::SCALE);

    pub fn from_ppm(ppm: u32) -> Result<Self> {
        if ppm > Self::SCALE {
            return Err(Error::InvalidProbability(format!("{ppm} ppm")));
        }
        Ok(Probability(ppm))
    }

    pub const fn ppm(self) -> u32 {
        self.0
    }

    pub fn as_scalar<T: Float + FromPrimitive>(self) -> T {
        T::from_u32(self.0).expect("ppm fits") / T::from_u32(Self::SCALE).expect("scale fits")
    }

    pub fn as_f64(self) -> f64 {
        self.as_scalar()
    }
}

impl fmt::Display for Probability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / Self::SCALE;
        let frac = self.0 % Self::SCALE;
        if frac == 0 {
            return write!(f, "{whole}");
        }
        let digits = format!("{frac:06}");
        write!(f, "{whole}.{}", digits.trim_end_matches('0'))
    }
}

impl FromStr for Probability {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidProbability(s.to_string());
        let (whole, frac) = s.split_once('.').unwrap_or((s, ""));
        if whole.is_empty()
            || !whole.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
            || frac.len() > 6
            || (s.contains('.') && frac.is_empty())
        {
            return Err(bad());
        }
        let whole: u64 = whole.parse().map_err(|_| bad())?;
        let frac_ppm: u64 = if frac.is_empty() {
            0
        } else {
            format!("{frac:0<6}").parse().map_err(|_| bad())?
        };
        let ppm = whole
            .checked_mul(u64::from(Self::SCALE))
            .and_then(|w| w.checked_add(frac_ppm))
            .ok_or_else(bad)?;
        if ppm > u64::from(Self::SCALE) {
            return Err(bad());
        }
        Ok(Probability(ppm as u32))
    }
}

impl Serialize for Probability {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Probability {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TimezonePolicy {
    /// Decision points follow the participant's local wall clock.
    #[default]
    LocalIndexed,
    /// Decision points on days with travel are tagged for exclusion.
    ExcludeTravel,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProximalWindow {
    PostWindowMinutes { minutes: u32 },
    NextDayTotal,
}

fn default_window_start() -> WallClock {
    WallClock::from_minutes(8 * 60)
}

fn default_window_end() -> WallClock {
    WallClock::from_minutes(20 * 60)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub id: ComponentId,
    pub decision_points_per_day: u32,
    pub randomization_probability: Probability,
    pub proximal_window: ProximalWindow,
    /// Explicit slot times; when absent, slots are spaced evenly over the waking window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_times: Option<Vec<WallClock>>,
    #[serde(default = "default_window_start")]
    pub window_start: WallClock,
    #[serde(default = "default_window_end")]
    pub window_end: WallClock,
}

impl ComponentSpec {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.id.0.is_empty() {
            return Err(Error::validation(format!("{field}.id"), "must not be empty"));
        }
        if self.decision_points_per_day == 0 {
            return Err(Error::validation(
                format!("{field}.decision_points_per_day"),
                "must be at least 1",
            ));
        }
        if let ProximalWindow::PostWindowMinutes { minutes: 0 } = self.proximal_window {
            return Err(Error::validation(
                format!("{field}.proximal_window.minutes"),
                "must be at least 1",
            ));
        }
        match &self.slot_times {
            Some(slots) => {
                if slots.len() != self.decision_points_per_day as usize {
                    return Err(Error::validation(
                        format!("{field}.slot_times"),
                        "must list exactly decision_points_per_day times",
                    ));
                }
                if slots.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::validation(
                        format!("{field}.slot_times"),
                        "must be strictly increasing",
                    ));
                }
            }
            None => {
                if self.window_end < self.window_start
                    || (self.decision_points_per_day > 1 && self.window_end == self.window_start)
                {
                    return Err(Error::validation(
                        format!("{field}.window_end"),
                        "must be later than window_start",
                    ));
                }
                let span = u32::from(self.window_end.minutes() - self.window_start.minutes());
                if self.decision_points_per_day > 1 && span < self.decision_points_per_day - 1 {
                    return Err(Error::validation(
                        format!("{field}.decision_points_per_day"),
                        "too many slots for the waking window",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Local slot times for one day.
    pub fn slots(&self) -> Vec<WallClock> {
        if let Some(slots) = &self.slot_times {
            return slots.clone();
        }
        let n = self.decision_points_per_day;
        if n == 1 {
            return vec![self.window_start];
        }
        let start = u32::from(self.window_start.minutes());
        let span = u32::from(self.window_end.minutes()) - start;
        (0..n)
            .map(|i| WallClock::from_minutes((start + i * span / (n - 1)) as u16))
            .collect()
    }
}

fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2025, 3, 3).expect("valid date")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub participant_count: u32,
    pub study_days: u32,
    pub components: Vec<ComponentSpec>,
    #[serde(default)]
    pub timezone_policy: TimezonePolicy,
    /// Local calendar date of study day 0.
    #[serde(default = "default_start_date")]
    pub start_date: NaiveDate,
}

impl TrialConfig {
    /// 37 participants for 42 days: activity suggestions five times a day at
    /// p = 0.6 and evening planning once a day at p = 0.5.
    pub fn standard() -> Self {
        TrialConfig {
            participant_count: 37,
            study_days: 42,
            components: vec![
                ComponentSpec {
                    id: ComponentId::new("suggestions"),
                    decision_points_per_day: 5,
                    randomization_probability: "0.6".parse().expect("valid"),
                    proximal_window: ProximalWindow::PostWindowMinutes { minutes: 30 },
                    slot_times: None,
                    window_start: default_window_start(),
                    window_end: default_window_end(),
                },
                ComponentSpec {
                    id: ComponentId::new("planning"),
                    decision_points_per_day: 1,
                    randomization_probability: "0.5".parse().expect("valid"),
                    proximal_window: ProximalWindow::NextDayTotal,
                    slot_times: Some(vec![WallClock::from_minutes(21 * 60)]),
                    window_start: default_window_start(),
                    window_end: default_window_end(),
                },
            ],
            timezone_policy: TimezonePolicy::LocalIndexed,
            start_date: default_start_date(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.participant_count == 0 {
            return Err(Error::validation("participant_count", "must be at least 1"));
        }
        if self.study_days == 0 {
            return Err(Error::validation("study_days", "must be at least 1"));
        }
        let mut seen = BTreeSet::new();
        for (i, c) in self.components.iter().enumerate() {
            c.validate(&format!("components[{i}]"))?;
            if !seen.insert(&c.id) {
                return Err(Error::validation(
                    format!("components[{i}].id"),
                    format!("duplicate component id `{}`", c.id),
                ));
            }
        }
        Ok(())
    }

    pub fn component(&self, id: &ComponentId) -> Result<&ComponentSpec> {
        self.components
            .iter()
            .find(|c| &c.id == id)
            .ok_or_else(|| Error::UnknownComponent(id.0.clone()))
    }

    pub fn participants(&self) -> impl Iterator<Item = ParticipantId> {
        (0..self.participant_count).map(ParticipantId)
    }

    pub fn local_date(&self, day_index: u32) -> NaiveDate {
        self.start_date + chrono::Days::new(u64::from(day_index))
    }
}

/// One scheduled randomization opportunity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub participant_id: ParticipantId,
    pub component_id: ComponentId,
    pub day_index: u32,
    pub slot_index: u32,
    pub scheduled_local_time: WallClock,
    pub global_index: u32,
}

impl DecisionPoint {
    pub fn key(&self) -> DecisionKey {
        DecisionKey {
            participant_id: self.participant_id,
            component_id: self.component_id.clone(),
            global_index: self.global_index,
        }
    }
}

/// Identity of a decision point across the whole trial.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DecisionKey {
    pub participant_id: ParticipantId,
    pub component_id: ComponentId,
    pub global_index: u32,
}

impl fmt::Display for DecisionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.participant_id, self.component_id, self.global_index)
    }
}

/// Every decision point of the trial, ordered by (participant, component, global_index).
pub fn build_schedule(config: &TrialConfig) -> Result<Vec<DecisionPoint>> {
    config.validate()?;
    let mut out = Vec::new();
    for participant in config.participants() {
        for component in &config.components {
            let slots = component.slots();
            for day in 0..config.study_days {
                for (slot_index, &time) in slots.iter().enumerate() {
                    let slot_index = slot_index as u32;
                    out.push(DecisionPoint {
                        participant_id: participant,
                        component_id: component.id.clone(),
                        day_index: day,
                        slot_index,
                        scheduled_local_time: time,
                        global_index: day * component.decision_points_per_day + slot_index,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Total decision points for a component across all participants.
pub fn count_decision_points(config: &TrialConfig, component: &ComponentId) -> Result<u64> {
    Ok(u64::from(config.participant_count) * per_participant_count(config, component)?)
}

pub fn per_participant_count(config: &TrialConfig, component: &ComponentId) -> Result<u64> {
    let spec = config.component(component)?;
    Ok(u64::from(config.study_days) * u64::from(spec.decision_points_per_day))
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Equirectangular distance in metres; accurate at city scale.
    pub fn distance_m(&self, other: &GeoPoint) -> f64 {
        const EARTH_RADIUS_M: f64 = 6_371_000.0;
        let mean_lat = ((self.lat + other.lat) / 2.0).to_radians();
        let dx = (other.lon - self.lon).to_radians() * mean_lat.cos();
        let dy = (other.lat - self.lat).to_radians();
        EARTH_RADIUS_M * (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: GeoPoint,
    pub radius_m: f64,
}

impl Region {
    pub fn contains(&self, p: &GeoPoint) -> bool {
        self.center.distance_m(p) <= self.radius_m
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LocationCategory {
    Home,
    Work,
    Other,
    Unknown,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Weather {
    Sunny,
    Cloudy,
    Rain,
    Snow,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Connection {
    Online,
    Offline,
    CaptivePortal,
}

/// Context captured on the phone around a decision point.
///
/// Raw coordinates stay here; analysis data only ever sees the coarsened
/// [`LocationCategory`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    pub captured_at: Timestamp,
    /// `None` when location capture failed (GPS off).
    pub location: Option<GeoPoint>,
    pub weather: Weather,
    /// Walking within the lookback before capture.
    pub recent_activity: bool,
    pub driving: bool,
    /// `None` when connection state could not be determined.
    pub connection: Option<Connection>,
}

impl ContextSnapshot {
    pub fn staleness_secs(&self, now: Timestamp) -> i64 {
        (now.0 - self.captured_at.0).max(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ObservationValue {
    Numeric(f64),
    Categorical(String),
    NoResponse,
}

/// A once-a-day measure (end-of-day survey item).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyObservation {
    pub participant_id: ParticipantId,
    pub day_index: u32,
    pub measure_id: String,
    pub value: ObservationValue,
    pub recorded_at: Timestamp,
}
