//! Protocolized availability with machine-readable reasons.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Connection, ContextSnapshot};
use crate::time::Timestamp;

/// Walking lookback before a decision point.
pub const WALKING_LOOKBACK_SECS: i64 = 90;
/// Longest snooze a participant can set.
pub const MAX_SNOOZE_MINUTES: u32 = 12 * 60;
/// Snapshots older than this are treated as failed captures.
pub const DEFAULT_FRESHNESS_BOUND_SECS: i64 = 10 * 60;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UnavailabilityReason {
    Driving,
    NoConnection,
    InterventionOff,
    RecentlyWalking,
}

impl UnavailabilityReason {
    pub const ALL: [UnavailabilityReason; 4] = [
        UnavailabilityReason::Driving,
        UnavailabilityReason::NoConnection,
        UnavailabilityReason::InterventionOff,
        UnavailabilityReason::RecentlyWalking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            UnavailabilityReason::Driving => "DRIVING",
            UnavailabilityReason::NoConnection => "NO_CONNECTION",
            UnavailabilityReason::InterventionOff => "INTERVENTION_OFF",
            UnavailabilityReason::RecentlyWalking => "RECENTLY_WALKING",
        }
    }
}

impl fmt::Display for UnavailabilityReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UnavailabilityReason {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        UnavailabilityReason::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Export(format!("unknown availability reason `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawAvailability")]
pub struct AvailabilityResult {
    available: bool,
    reasons: BTreeSet<UnavailabilityReason>,
    evaluated_at: Timestamp,
}

#[derive(Deserialize)]
struct RawAvailability {
    available: bool,
    reasons: BTreeSet<UnavailabilityReason>,
    evaluated_at: Timestamp,
}

impl TryFrom<RawAvailability> for AvailabilityResult {
    type Error = String;
    fn try_from(raw: RawAvailability) -> std::result::Result<Self, String> {
        if raw.available != raw.reasons.is_empty() {
            return Err("`available` must be true exactly when `reasons` is empty".into());
        }
        Ok(AvailabilityResult::from_reasons(raw.reasons, raw.evaluated_at))
    }
}

impl AvailabilityResult {
    pub fn from_reasons(reasons: BTreeSet<UnavailabilityReason>, evaluated_at: Timestamp) -> Self {
        AvailabilityResult {
            available: reasons.is_empty(),
            reasons,
            evaluated_at,
        }
    }

    pub fn available_at(evaluated_at: Timestamp) -> Self {
        Self::from_reasons(BTreeSet::new(), evaluated_at)
    }

    pub fn available(&self) -> bool {
        self.available
    }

    pub fn reasons(&self) -> &BTreeSet<UnavailabilityReason> {
        &self.reasons
    }

    pub fn evaluated_at(&self) -> Timestamp {
        self.evaluated_at
    }
}

/// Participant-initiated pause of the intervention.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnoozeState {
    pub expires_at: Option<Timestamp>,
}

impl SnoozeState {
    pub fn set(now: Timestamp, minutes: u32) -> Result<Self> {
        if minutes > MAX_SNOOZE_MINUTES {
            return Err(Error::SnoozeTooLong(minutes));
        }
        if minutes == 0 {
            return Ok(SnoozeState::default());
        }
        Ok(SnoozeState {
            expires_at: Some(now.plus_minutes(i64::from(minutes))),
        })
    }

    pub fn is_active(&self, now: Timestamp) -> bool {
        self.expires_at.is_some_and(|e| now < e)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityPolicy {
    pub freshness_bound_secs: i64,
}

impl Default for AvailabilityPolicy {
    fn default() -> Self {
        AvailabilityPolicy {
            freshness_bound_secs: DEFAULT_FRESHNESS_BOUND_SECS,
        }
    }
}

impl AvailabilityPolicy {
    /// Every violated criterion contributes its reason. A stale or missing
    /// snapshot counts as a failed capture, which surfaces as `NO_CONNECTION`.
    pub fn evaluate(
        &self,
        snapshot: Option<&ContextSnapshot>,
        snooze: &SnoozeState,
        now: Timestamp,
    ) -> AvailabilityResult {
        let mut reasons = BTreeSet::new();
        let fresh = snapshot.filter(|s| s.staleness_secs(now) <= self.freshness_bound_secs);
        match fresh {
            Some(s) => {
                if s.driving {
                    reasons.insert(UnavailabilityReason::Driving);
                }
                if s.recent_activity {
                    reasons.insert(UnavailabilityReason::RecentlyWalking);
                }
                if s.connection != Some(Connection::Online) {
                    reasons.insert(UnavailabilityReason::NoConnection);
                }
            }
            None => {
                reasons.insert(UnavailabilityReason::NoConnection);
            }
        }
        if snooze.is_active(now) {
            reasons.insert(UnavailabilityReason::InterventionOff);
        }
        AvailabilityResult::from_reasons(reasons, now)
    }
}

/// Evaluate with the default freshness bound.
pub fn evaluate_availability(
    snapshot: &ContextSnapshot,
    snooze: &SnoozeState,
    now: Timestamp,
) -> AvailabilityResult {
    AvailabilityPolicy::default().evaluate(Some(snapshot), snooze, now)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Weather;
    use UnavailabilityReason::*;

    const NOW: Timestamp = Timestamp(1_740_000_000);

    fn snapshot(walking: bool, driving: bool, connection: Option<Connection>) -> ContextSnapshot {
        ContextSnapshot {
            captured_at: NOW,
            location: None,
            weather: Weather::Sunny,
            recent_activity: walking,
            driving,
            connection,
        }
    }

    #[test]
    fn idle_online_is_available() {
        let r = evaluate_availability(
            &snapshot(false, false, Some(Connection::Online)),
            &SnoozeState::default(),
            NOW,
        );
        assert!(r.available());
        assert!(r.reasons().is_empty());
        assert_eq!(r.evaluated_at(), NOW);
    }

    #[test]
    fn recent_walking_blocks() {
        let r = evaluate_availability(
            &snapshot(true, false, Some(Connection::Online)),
            &SnoozeState::default(),
            NOW,
        );
        assert!(!r.available());
        assert_eq!(r.reasons().iter().copied().collect::<Vec<_>>(), [RecentlyWalking]);
    }

    #[test]
    fn snooze_set_three_hours_ago_still_active() {
        let snooze = SnoozeState::set(NOW.plus_minutes(-180), 12 * 60).unwrap();
        let r = evaluate_availability(
            &snapshot(false, false, Some(Connection::Online)),
            &snooze,
            NOW,
        );
        assert_eq!(r.reasons().iter().copied().collect::<Vec<_>>(), [InterventionOff]);
    }

    #[test]
    fn snooze_cannot_exceed_twelve_hours() {
        assert!(matches!(
            SnoozeState::set(NOW, 12 * 60 + 1),
            Err(Error::SnoozeTooLong(_))
        ));
    }

    #[test]
    fn offline_and_driving_records_both() {
        let r = evaluate_availability(
            &snapshot(false, true, Some(Connection::Offline)),
            &SnoozeState::default(),
            NOW,
        );
        assert_eq!(
            r.reasons().iter().copied().collect::<Vec<_>>(),
            [Driving, NoConnection]
        );
    }

    #[test]
    fn captive_portal_and_unknown_connection_count_as_no_connection() {
        for c in [Some(Connection::CaptivePortal), None] {
            let r = evaluate_availability(&snapshot(false, false, c), &SnoozeState::default(), NOW);
            assert_eq!(r.reasons().iter().copied().collect::<Vec<_>>(), [NoConnection]);
        }
    }

    #[test]
    fn stale_snapshot_is_a_failed_capture() {
        let mut s = snapshot(true, true, Some(Connection::Online));
        s.captured_at = NOW.plus_seconds(-DEFAULT_FRESHNESS_BOUND_SECS - 1);
        let r = evaluate_availability(&s, &SnoozeState::default(), NOW);
        assert_eq!(r.reasons().iter().copied().collect::<Vec<_>>(), [NoConnection]);
    }

    /// Rule table: each criterion maps to exactly one reason.
    fn expected(driving: bool, offline: bool, snoozed: bool, walking: bool) -> BTreeSet<UnavailabilityReason> {
        [(driving, Driving), (offline, NoConnection), (snoozed, InterventionOff), (walking, RecentlyWalking)]
            .into_iter()
            .filter_map(|(on, r)| on.then_some(r))
            .collect()
    }

    fn eval_mask(mask: u8) -> AvailabilityResult {
        let (driving, offline, snoozed, walking) =
            (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0, mask & 8 != 0);
        let conn = if offline { Connection::Offline } else { Connection::Online };
        let snooze = if snoozed {
            SnoozeState::set(NOW, 60).unwrap()
        } else {
            SnoozeState::default()
        };
        evaluate_availability(&snapshot(walking, driving, Some(conn)), &snooze, NOW)
    }

    #[test]
    fn exhaustive_criterion_combinations() {
        for mask in 0u8..16 {
            let r = eval_mask(mask);
            let want = expected(mask & 1 != 0, mask & 2 != 0, mask & 4 != 0, mask & 8 != 0);
            assert_eq!(r.reasons(), &want, "mask {mask:04b}");
            assert_eq!(r.available(), want.is_empty());
            for bit in 0..4 {
                let wider = eval_mask(mask | (1 << bit));
                assert!(wider.reasons().is_superset(r.reasons()));
                if !r.available() {
                    assert!(!wider.available());
                }
            }
        }
    }

    #[test]
    fn deserialization_enforces_invariant() {
        let bad = r#"{"available":true,"reasons":["DRIVING"],"evaluated_at":"2025-03-01T00:00:00Z"}"#;
        assert!(serde_json::from_str::<AvailabilityResult>(bad).is_err());
        let good = r#"{"available":false,"reasons":["DRIVING"],"evaluated_at":"2025-03-01T00:00:00Z"}"#;
        assert!(!serde_json::from_str::<AvailabilityResult>(good).unwrap().available());
    }
}
