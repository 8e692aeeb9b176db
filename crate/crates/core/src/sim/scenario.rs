//! Scenario configuration: trial design, behavior and effect parameters, faults.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agents::{Agent, PushModel};
use crate::availability::DEFAULT_FRESHNESS_BOUND_SECS;
use crate::error::{Error, Result};
use crate::model::{GeoPoint, ParticipantId, Probability, TrialConfig};
use crate::time::{Itinerary, Segment, Timestamp, WallClock};

/// Two-state idle/bout activity process plus phone-use and response habits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorModel {
    pub wake_time: WallClock,
    pub sleep_time: WallClock,
    /// Per-minute probability of starting a bout while idle.
    pub bout_start_rate: f64,
    /// Per-minute probability of ending a bout.
    pub bout_end_rate: f64,
    /// Mean steps per minute inside a bout; minute counts are uniform on [mean/2, 3·mean/2].
    pub bout_steps_mean: f64,
    /// Lognormal sigma of the per-participant multiplier on the bout start rate.
    pub heterogeneity_sigma: f64,
    pub driving_probability: f64,
    /// Probability the phone is carried during a given waking hour.
    pub phone_carried_probability: f64,
    pub phone_fit_undercount: f64,
    /// Probability of being away from home and work at a decision point.
    pub other_location_probability: f64,
    pub workday_probability: f64,
    pub thumbs_probability: f64,
    pub thumbs_up_share: f64,
    pub snooze_probability: f64,
    pub survey_time: WallClock,
    pub survey_response_probability: f64,
}

impl Default for BehaviorModel {
    fn default() -> Self {
        BehaviorModel {
            wake_time: WallClock::from_minutes(7 * 60),
            sleep_time: WallClock::from_minutes(23 * 60),
            bout_start_rate: 0.02,
            bout_end_rate: 0.1,
            bout_steps_mean: 80.0,
            heterogeneity_sigma: 0.3,
            driving_probability: 0.05,
            phone_carried_probability: 0.8,
            phone_fit_undercount: 0.85,
            other_location_probability: 0.2,
            workday_probability: 0.8,
            thumbs_probability: 0.5,
            thumbs_up_share: 0.7,
            snooze_probability: 0.03,
            survey_time: WallClock::from_minutes(21 * 60),
            survey_response_probability: 0.85,
        }
    }
}

impl BehaviorModel {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("behavior.bout_start_rate", self.bout_start_rate),
            ("behavior.bout_end_rate", self.bout_end_rate),
            ("behavior.driving_probability", self.driving_probability),
            ("behavior.phone_carried_probability", self.phone_carried_probability),
            ("behavior.phone_fit_undercount", self.phone_fit_undercount),
            ("behavior.other_location_probability", self.other_location_probability),
            ("behavior.workday_probability", self.workday_probability),
            ("behavior.thumbs_probability", self.thumbs_probability),
            ("behavior.thumbs_up_share", self.thumbs_up_share),
            ("behavior.snooze_probability", self.snooze_probability),
            ("behavior.survey_response_probability", self.survey_response_probability),
        ];
        for (field, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(field, format!("{v} is not in [0, 1]")));
            }
        }
        if self.thumbs_probability + self.snooze_probability > 1.0 {
            return Err(Error::validation(
                "behavior.snooze_probability",
                "thumbs and snooze probabilities sum above 1",
            ));
        }
        if !(self.bout_steps_mean >= 0.0 && self.bout_steps_mean.is_finite()) {
            return Err(Error::validation("behavior.bout_steps_mean", "must be finite and >= 0"));
        }
        if !(self.heterogeneity_sigma >= 0.0 && self.heterogeneity_sigma.is_finite()) {
            return Err(Error::validation("behavior.heterogeneity_sigma", "must be finite and >= 0"));
        }
        if self.wake_time >= self.sleep_time {
            return Err(Error::validation("behavior.sleep_time", "must be after wake_time"));
        }
        Ok(())
    }

    pub fn is_awake(&self, wall_minute: u16) -> bool {
        wall_minute >= self.wake_time.minutes() && wall_minute < self.sleep_time.minutes()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum Decay {
    None,
    /// Effect multiplied by `max(0, 1 - day_index / zero_day)`.
    Linear { zero_day: u32 },
}

impl Decay {
    pub fn factor(&self, day_index: u32) -> f64 {
        match self {
            Decay::None => 1.0,
            Decay::Linear { zero_day } => {
                (1.0 - f64::from(day_index) / f64::from((*zero_day).max(1))).max(0.0)
            }
        }
    }
}

/// Steps added to the true step process after a delivered treatment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectConfig {
    /// Total steps added over the proximal window by a walking suggestion.
    pub walking_steps: f64,
    /// Total steps added by a sedentary-break suggestion.
    pub sedentary_steps: f64,
    /// Share of suggestions drawn from the walking library.
    pub walking_share: Probability,
    pub decay: Decay,
    /// Multiplier applied on weekend days.
    pub weekend_scale: f64,
    /// Total steps added over the next day's waking hours by a delivered plan.
    pub planning_next_day_steps: f64,
}

impl Default for EffectConfig {
    fn default() -> Self {
        EffectConfig {
            walking_steps: 40.0,
            sedentary_steps: 20.0,
            walking_share: Probability::from_ppm(500_000).expect("0.5"),
            decay: Decay::None,
            weekend_scale: 1.0,
            planning_next_day_steps: 500.0,
        }
    }
}

impl EffectConfig {
    /// The same total for every suggestion kind; the null scenario is `constant(0.0)`.
    pub fn constant(steps: f64) -> Self {
        EffectConfig {
            walking_steps: steps,
            sedentary_steps: steps,
            planning_next_day_steps: 0.0,
            ..EffectConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("effect.walking_steps", self.walking_steps),
            ("effect.sedentary_steps", self.sedentary_steps),
            ("effect.weekend_scale", self.weekend_scale),
            ("effect.planning_next_day_steps", self.planning_next_day_steps),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(field, "must be finite and >= 0"));
            }
        }
        if let Decay::Linear { zero_day: 0 } = self.decay {
            return Err(Error::validation("effect.decay.zero_day", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    ConnectivityLoss,
    CaptivePortal,
    AppSwipeKill,
    PhonePowerOff,
    TrackerBatteryDead,
    BluetoothOff,
    GpsOff,
    AckLoss,
    PushDrop,
    TimezoneTravel,
    Dropout,
    /// Envelope bodies truncated in transit while the window is open.
    PayloadCorruption,
}

impl FaultKind {
    pub const ALL: [FaultKind; 12] = [
        FaultKind::ConnectivityLoss,
        FaultKind::CaptivePortal,
        FaultKind::AppSwipeKill,
        FaultKind::PhonePowerOff,
        FaultKind::TrackerBatteryDead,
        FaultKind::BluetoothOff,
        FaultKind::GpsOff,
        FaultKind::AckLoss,
        FaultKind::PushDrop,
        FaultKind::TimezoneTravel,
        FaultKind::Dropout,
        FaultKind::PayloadCorruption,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::ConnectivityLoss => "CONNECTIVITY_LOSS",
            FaultKind::CaptivePortal => "CAPTIVE_PORTAL",
            FaultKind::AppSwipeKill => "APP_SWIPE_KILL",
            FaultKind::PhonePowerOff => "PHONE_POWER_OFF",
            FaultKind::TrackerBatteryDead => "TRACKER_BATTERY_DEAD",
            FaultKind::BluetoothOff => "BLUETOOTH_OFF",
            FaultKind::GpsOff => "GPS_OFF",
            FaultKind::AckLoss => "ACK_LOSS",
            FaultKind::PushDrop => "PUSH_DROP",
            FaultKind::TimezoneTravel => "TIMEZONE_TRAVEL",
            FaultKind::Dropout => "DROPOUT",
            FaultKind::PayloadCorruption => "PAYLOAD_CORRUPTION",
        }
    }
}

impl FromStr for FaultKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FaultKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::validation("fault.kind", format!("unknown fault kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "ids", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultTargets {
    All,
    Participants(Vec<ParticipantId>),
}

impl FaultTargets {
    pub fn includes(&self, p: ParticipantId) -> bool {
        match self {
            FaultTargets::All => true,
            FaultTargets::Participants(ids) => ids.contains(&p),
        }
    }
}

/// One injected fault. `end` is exclusive; DROPOUT takes no end (it lasts
/// for the rest of the run) and APP_SWIPE_KILL defaults to a one-minute outage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub targets: FaultTargets,
    pub start: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<Timestamp>,
    /// TIMEZONE_TRAVEL destination offset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tz_offset_minutes: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tz_name: Option<String>,
    /// TIMEZONE_TRAVEL: the phone clock keeps the home offset until the trip ends.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stale_clock: bool,
}

impl FaultSpec {
    pub fn window(kind: FaultKind, targets: FaultTargets, start: Timestamp, end: Timestamp) -> Self {
        FaultSpec {
            kind,
            targets,
            start,
            end: Some(end),
            tz_offset_minutes: None,
            tz_name: None,
            stale_clock: false,
        }
    }

    pub fn effective_end(&self) -> Option<Timestamp> {
        match (self.kind, self.end) {
            (FaultKind::Dropout, _) => None,
            (FaultKind::AppSwipeKill, None) => Some(self.start.plus_seconds(60)),
            (_, end) => end,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        match (self.kind, self.end) {
            (FaultKind::Dropout, Some(_)) => {
                return Err(Error::validation(format!("{field}.end"), "DROPOUT has no end"))
            }
            (FaultKind::Dropout | FaultKind::AppSwipeKill, None) => {}
            (_, None) => {
                return Err(Error::validation(
                    format!("{field}.end"),
                    format!("{} needs an end", self.kind.as_str()),
                ))
            }
            (_, Some(end)) if end <= self.start => {
                return Err(Error::validation(format!("{field}.end"), "window must end after it starts"))
            }
            _ => {}
        }
        let travel = self.kind == FaultKind::TimezoneTravel;
        if travel != self.tz_offset_minutes.is_some() {
            return Err(Error::validation(
                format!("{field}.tz_offset_minutes"),
                "required for TIMEZONE_TRAVEL and only there",
            ));
        }
        if !travel && (self.tz_name.is_some() || self.stale_clock) {
            return Err(Error::validation(
                format!("{field}.tz_name"),
                "only TIMEZONE_TRAVEL takes zone parameters",
            ));
        }
        if let Some(o) = self.tz_offset_minutes {
            if o.abs() > crate::time::MAX_OFFSET_MINUTES {
                return Err(Error::validation(format!("{field}.tz_offset_minutes"), "outside ±14 h"));
            }
        }
        if let FaultTargets::Participants(ids) = &self.targets {
            if ids.is_empty() {
                return Err(Error::validation(format!("{field}.targets"), "empty participant list"));
            }
        }
        Ok(())
    }

    pub fn active_at(&self, t: Timestamp) -> bool {
        t >= self.start && self.effective_end().is_none_or(|e| t < e)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DstTransition {
    pub at: Timestamp,
    pub tz_offset_minutes: i32,
    pub tz_name: String,
}

/// Home zone of every participant, with scripted daylight-saving transitions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimezoneConfig {
    pub home_offset_minutes: i32,
    pub home_name: String,
    pub dst_transitions: Vec<DstTransition>,
}

impl Default for TimezoneConfig {
    fn default() -> Self {
        TimezoneConfig {
            home_offset_minutes: -300,
            home_name: "EST".into(),
            dst_transitions: Vec::new(),
        }
    }
}

impl TimezoneConfig {
    pub fn home_itinerary(&self) -> Result<Itinerary> {
        let mut segments = vec![Segment {
            effective_from: Timestamp::EARLIEST,
            tz_offset_minutes: self.home_offset_minutes,
            tz_name: self.home_name.clone(),
            dst: false,
        }];
        segments.extend(self.dst_transitions.iter().map(|d| Segment {
            effective_from: d.at,
            tz_offset_minutes: d.tz_offset_minutes,
            tz_name: d.tz_name.clone(),
            dst: true,
        }));
        Itinerary::new(segments)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub push: PushModel,
    /// Round trip from transmission to ack arrival.
    pub ack_latency_secs: i64,
    pub sync_interval_minutes: u32,
    /// Extra days simulated after the study so outboxes can drain.
    pub drain_days: u32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            push: PushModel::default(),
            ack_latency_secs: 2,
            sync_interval_minutes: 60,
            drain_days: 3,
        }
    }
}

/// Conventions the dataset pipeline applies when replaying the log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// A gap bracketed by samples within this many minutes on both sides counts as a true zero.
    pub wear_window_minutes: u32,
    pub freshness_bound_secs: i64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            wear_window_minutes: 240,
            freshness_bound_secs: DEFAULT_FRESHNESS_BOUND_SECS,
        }
    }
}

/// Where participants live and work; each participant's regions are drawn
/// around `city`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeographyConfig {
    pub city: GeoPoint,
    pub spread_degrees: f64,
    pub region_radius_m: f64,
}

impl Default for GeographyConfig {
    fn default() -> Self {
        GeographyConfig {
            city: GeoPoint {
                lat: 42.2808,
                lon: -83.7430,
            },
            spread_degrees: 0.05,
            region_radius_m: 200.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub trial: TrialConfig,
    #[serde(default)]
    pub behavior: BehaviorModel,
    #[serde(default)]
    pub effect: EffectConfig,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default = "default_agent")]
    pub agent: Agent,
    pub seed: u64,
    #[serde(default)]
    pub timezone: TimezoneConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub geography: GeographyConfig,
}

fn default_agent() -> Agent {
    Agent::Phone
}

impl ScenarioConfig {
    /// The default 37-participant, 42-day design with no faults.
    pub fn standard(seed: u64) -> Self {
        ScenarioConfig {
            trial: TrialConfig::standard(),
            behavior: BehaviorModel::default(),
            effect: EffectConfig::default(),
            faults: Vec::new(),
            agent: Agent::Phone,
            seed,
            timezone: TimezoneConfig::default(),
            network: NetworkConfig::default(),
            pipeline: PipelineConfig::default(),
            geography: GeographyConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trial.validate()?;
        self.behavior.validate()?;
        self.effect.validate()?;
        self.timezone.home_itinerary()?;
        for (i, f) in self.faults.iter().enumerate() {
            f.validate(&format!("faults[{i}]"))?;
            if let FaultTargets::Participants(ids) = &f.targets {
                if let Some(bad) = ids.iter().find(|p| p.0 >= self.trial.participant_count) {
                    return Err(Error::validation(
                        format!("faults[{i}].targets"),
                        format!("participant {bad} is not enrolled"),
                    ));
                }
            }
        }
        if self.network.sync_interval_minutes == 0 {
            return Err(Error::validation("network.sync_interval_minutes", "must be positive"));
        }
        if self.network.ack_latency_secs < 0 {
            return Err(Error::validation("network.ack_latency_secs", "must be >= 0"));
        }
        if self.pipeline.freshness_bound_secs < 0 {
            return Err(Error::validation("pipeline.freshness_bound_secs", "must be >= 0"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: ScenarioConfig = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }
}

/// Add one fault to a scenario after checking it against the catalog rules.
pub fn inject_fault(scenario: &mut ScenarioConfig, fault: FaultSpec) -> Result<()> {
    fault.validate(&format!("faults[{}]", scenario.faults.len()))?;
    scenario.faults.push(fault);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> Timestamp {
        s.parse().unwrap()
    }

    #[test]
    fn default_scenario_round_trips_and_validates() {
        let s = ScenarioConfig::standard(7);
        s.validate().unwrap();
        let json = serde_json::to_string_pretty(&s).unwrap();
        assert_eq!(ScenarioConfig::from_json(&json).unwrap(), s);
    }

    #[test]
    fn minimal_scenario_fills_defaults() {
        let json = serde_json::json!({
            "trial": serde_json::to_value(TrialConfig::standard()).unwrap(),
            "seed": 3
        });
        let s = ScenarioConfig::from_json(&json.to_string()).unwrap();
        assert_eq!(s.agent, Agent::Phone);
        assert!(s.faults.is_empty());
    }

    #[test]
    fn unknown_field_is_rejected() {
        let mut v = serde_json::to_value(ScenarioConfig::standard(1)).unwrap();
        v["behaviour"] = serde_json::json!({});
        let err = ScenarioConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("behaviour"), "{err}");
    }

    #[test]
    fn fault_windows_must_be_well_formed() {
        let mut f = FaultSpec::window(
            FaultKind::BluetoothOff,
            FaultTargets::All,
            ts("2025-03-05T10:00:00Z"),
            ts("2025-03-05T09:00:00Z"),
        );
        assert!(f.validate("f").is_err());
        f.end = None;
        assert!(f.validate("f").is_err());
        f.kind = FaultKind::Dropout;
        f.validate("f").unwrap();
        assert!(f.active_at(ts("2025-04-30T00:00:00Z")));
        f.kind = FaultKind::AppSwipeKill;
        assert_eq!(f.effective_end(), Some(ts("2025-03-05T10:01:00Z")));
    }

    #[test]
    fn travel_needs_an_offset() {
        let mut f = FaultSpec::window(
            FaultKind::TimezoneTravel,
            FaultTargets::Participants(vec![ParticipantId(0)]),
            ts("2025-03-10T15:00:00Z"),
            ts("2025-03-17T15:00:00Z"),
        );
        assert!(f.validate("f").is_err());
        f.tz_offset_minutes = Some(-600);
        f.validate("f").unwrap();
        let mut g = f.clone();
        g.kind = FaultKind::GpsOff;
        assert!(g.validate("g").is_err());
    }

    #[test]
    fn fault_targets_must_be_enrolled() {
        let mut s = ScenarioConfig::standard(1);
        s.faults.push(FaultSpec::window(
            FaultKind::GpsOff,
            FaultTargets::Participants(vec![ParticipantId(99)]),
            ts("2025-03-05T10:00:00Z"),
            ts("2025-03-05T11:00:00Z"),
        ));
        assert!(s.validate().is_err());
    }

    #[test]
    fn linear_decay_reaches_zero() {
        let d = Decay::Linear { zero_day: 29 };
        assert_eq!(d.factor(0), 1.0);
        assert_eq!(d.factor(29), 0.0);
        assert_eq!(d.factor(40), 0.0);
        assert!((d.factor(10) - 19.0 / 29.0).abs() < 1e-15);
    }

    #[test]
    fn fault_kind_names_round_trip() {
        for k in FaultKind::ALL {
            assert_eq!(k.as_str().parse::<FaultKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
    }
}
