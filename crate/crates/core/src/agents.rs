//! Phone-side and server-side randomization agents.
//!
//! Both agents emit the same [`RandomizationRecord`] schema. The phone agent
//! randomizes locally at the scheduled instant and can deliver prefetched
//! content offline; the server agent fills a pre-built table and delivers via
//! a push channel that adds delay and can drop messages.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::availability::{AvailabilityResult, SnoozeState};
use crate::error::{Error, Result};
use crate::model::{
    ComponentId, Connection, ContextSnapshot, DecisionKey, DecisionPoint, ParticipantId,
    Probability,
};
use crate::rng::{self, Purpose};
use crate::time::Timestamp;

/// Suggestions stay on the lock screen this long before timing out.
pub const ENGAGEMENT_TIMEOUT_SECS: i64 = 30 * 60;
/// Content is prefetched this long before the decision point.
pub const PREFETCH_LEAD_SECS: i64 = 30 * 60;
/// Phone-side tailoring and delivery happen within this window of the decision point.
pub const TAILORING_WINDOW_SECS: i64 = 90;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Treat,
    NoTreat,
    NotRandomized,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Agent {
    Phone,
    Server,
}

impl Agent {
    pub fn as_str(self) -> &'static str {
        match self {
            Agent::Phone => "PHONE",
            Agent::Server => "SERVER",
        }
    }
}

/// Why a TREAT draw did not reach the participant.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DataNote {
    /// Phone agent: offline at the decision point with nothing prefetched.
    UndeliverableOffline,
    /// Server agent: the push notification was dropped or expired.
    PushDropped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationRecord {
    pub participant_id: ParticipantId,
    pub component_id: ComponentId,
    pub global_index: u32,
    pub probability: Probability,
    pub outcome: Outcome,
    pub availability: AvailabilityResult,
    pub scheduled_at: Timestamp,
    pub randomized_at: Option<Timestamp>,
    pub delivered_at: Option<Timestamp>,
    pub agent: Agent,
    pub content_id: Option<String>,
    /// Age of the context used for tailoring, when any context was available.
    pub context_staleness_secs: Option<i64>,
    pub data_note: Option<DataNote>,
}

impl RandomizationRecord {
    pub fn key(&self) -> DecisionKey {
        DecisionKey {
            participant_id: self.participant_id,
            component_id: self.component_id.clone(),
            global_index: self.global_index,
        }
    }

    pub fn delivered(&self) -> bool {
        self.delivered_at.is_some()
    }

    /// Check the record-level invariants, naming the first one violated.
    pub fn check(&self) -> std::result::Result<(), &'static str> {
        if (self.outcome == Outcome::NotRandomized) == self.availability.available() {
            return Err("NOT_RANDOMIZED must coincide with unavailability");
        }
        if let Some(d) = self.delivered_at {
            if self.outcome != Outcome::Treat {
                return Err("only TREAT records can be delivered");
            }
            match self.randomized_at {
                Some(r) if d >= r => {}
                _ => return Err("delivery precedes randomization"),
            }
        }
        Ok(())
    }
}

/// Per-(participant, component) counter-based uniform draws in parts per million.
#[derive(Copy, Clone, Debug)]
pub struct RandomizationStream {
    seed: u64,
}

impl RandomizationStream {
    pub fn new(seed: u64) -> Self {
        RandomizationStream { seed }
    }

    pub fn draw(&self, key: &DecisionKey) -> u32 {
        let mut s = rng::stream_at(
            self.seed,
            Purpose::Randomization,
            key.participant_id,
            rng::component_hash(&key.component_id),
            u64::from(key.global_index),
        );
        rng::bounded(s.next_u64(), Probability::SCALE)
    }
}

/// Draw treatment for an available decision point; unavailable points are
/// recorded as NOT_RANDOMIZED with the probability still stored.
pub fn randomize(
    dp: &DecisionPoint,
    scheduled_at: Timestamp,
    avail: AvailabilityResult,
    p: Probability,
    stream: &RandomizationStream,
    agent: Agent,
) -> RandomizationRecord {
    let (outcome, randomized_at) = if avail.available() {
        let treat = stream.draw(&dp.key()) < p.ppm();
        let outcome = if treat { Outcome::Treat } else { Outcome::NoTreat };
        (outcome, Some(avail.evaluated_at()))
    } else {
        (Outcome::NotRandomized, None)
    };
    RandomizationRecord {
        participant_id: dp.participant_id,
        component_id: dp.component_id.clone(),
        global_index: dp.global_index,
        probability: p,
        outcome,
        availability: avail,
        scheduled_at,
        randomized_at,
        delivered_at: None,
        agent,
        content_id: None,
        context_staleness_secs: None,
        data_note: None,
    }
}

/// Opaque intervention content picked deterministically per decision point.
#[derive(Copy, Clone, Debug)]
pub struct ContentLibrary {
    seed: u64,
    /// Share of suggestion content that encourages walking (vs. breaking sedentary time).
    walking_share: Probability,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ContentKind {
    Walking,
    Sedentary,
    Planning,
}

impl ContentLibrary {
    pub fn new(seed: u64, walking_share: Probability) -> Self {
        ContentLibrary { seed, walking_share }
    }

    pub fn pick(&self, key: &DecisionKey, suggestion: bool) -> String {
        let mut s = rng::stream_at(
            self.seed,
            Purpose::Content,
            key.participant_id,
            rng::component_hash(&key.component_id),
            u64::from(key.global_index),
        );
        let kind = rng::bounded(s.next_u64(), Probability::SCALE);
        let variant = rng::bounded(s.next_u64(), 40);
        if !suggestion {
            format!("plan-{variant:03}")
        } else if kind < self.walking_share.ppm() {
            format!("walk-{variant:03}")
        } else {
            format!("sed-{variant:03}")
        }
    }

    pub fn kind_of(content_id: &str) -> ContentKind {
        if content_id.starts_with("walk-") {
            ContentKind::Walking
        } else if content_id.starts_with("sed-") {
            ContentKind::Sedentary
        } else {
            ContentKind::Planning
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefetchedContent {
    pub decision: DecisionKey,
    pub content_id: String,
    pub fetched_at: Timestamp,
    pub context_used: ContextSnapshot,
}

impl PrefetchedContent {
    pub fn new(
        decision: DecisionKey,
        content_id: String,
        fetched_at: Timestamp,
        context_used: ContextSnapshot,
        scheduled_at: Timestamp,
    ) -> Result<Self> {
        if fetched_at >= scheduled_at {
            return Err(Error::validation(
                "prefetch.fetched_at",
                "must precede the decision point",
            ));
        }
        Ok(PrefetchedContent {
            decision,
            content_id,
            fetched_at,
            context_used,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub decision: DecisionKey,
    pub at: Timestamp,
    pub content_id: String,
    pub from_cache: bool,
}

/// Phone-side step at the scheduled instant. Randomization never waits for
/// connectivity; offline TREAT draws fall back to prefetched content and, with
/// none cached, stay TREAT with no delivery and an explicit note.
#[allow(clippy::too_many_arguments)]
pub fn phone_agent_step(
    dp: &DecisionPoint,
    scheduled_at: Timestamp,
    avail: AvailabilityResult,
    p: Probability,
    stream: &RandomizationStream,
    connectivity: Connection,
    cache: Option<&PrefetchedContent>,
    content: &ContentLibrary,
    suggestion: bool,
) -> (RandomizationRecord, Option<Delivery>) {
    let mut record = randomize(dp, scheduled_at, avail, p, stream, Agent::Phone);
    record.context_staleness_secs = Some(0);
    if record.outcome != Outcome::Treat {
        return (record, None);
    }
    let key = dp.key();
    let choice = match (connectivity, cache.filter(|c| c.decision == key)) {
        (Connection::Online, _) => Some((content.pick(&key, suggestion), false)),
        (_, Some(cached)) => Some((cached.content_id.clone(), true)),
        (_, None) => None,
    };
    match choice {
        Some((content_id, from_cache)) => {
            let at = scheduled_at;
            record.delivered_at = Some(at);
            record.content_id = Some(content_id.clone());
            let delivery = Delivery {
                decision: key,
                at,
                content_id,
                from_cache,
            };
            (record, Some(delivery))
        }
        None => {
            record.data_note = Some(DataNote::UndeliverableOffline);
            (record, None)
        }
    }
}

/// The server's pre-built record table: one placeholder per decision point,
/// filled in place during the run and never extended.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerTable {
    rows: BTreeMap<DecisionKey, Option<RandomizationRecord>>,
}

impl ServerTable {
    pub fn prepare(schedule: &[DecisionPoint]) -> Self {
        ServerTable {
            rows: schedule.iter().map(|dp| (dp.key(), None)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn fill(&mut self, record: RandomizationRecord) -> Result<()> {
        let key = record.key();
        match self.rows.get_mut(&key) {
            None => Err(Error::UnknownDecisionPoint(key.to_string())),
            Some(Some(_)) => Err(Error::RowAlreadyFilled(key.to_string())),
            Some(slot) => {
                *slot = Some(record);
                Ok(())
            }
        }
    }

    pub fn get(&self, key: &DecisionKey) -> Option<&RandomizationRecord> {
        self.rows.get(key).and_then(Option::as_ref)
    }

    pub fn unfilled(&self) -> impl Iterator<Item = &DecisionKey> {
        self.rows.iter().filter(|(_, r)| r.is_none()).map(|(k, _)| k)
    }

    pub fn records(&self) -> impl Iterator<Item = &RandomizationRecord> {
        self.rows.values().flatten()
    }
}

/// Lognormal push latency with a drop probability.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushModel {
    pub enabled: bool,
    pub median_secs: f64,
    pub sigma: f64,
    pub drop_probability: Probability,
    /// Undeliverable pushes are held by the push service at most this long.
    pub ttl_secs: i64,
}

impl Default for PushModel {
    fn default() -> Self {
        PushModel {
            enabled: true,
            median_secs: 15.0,
            sigma: 1.0,
            drop_probability: Probability::from_ppm(10_000).expect("1%"),
            ttl_secs: 3600,
        }
    }
}

impl PushModel {
    /// Whole-second delay, or `None` when the push is dropped.
    pub fn sample(&self, rng: &mut impl RngCore) -> Option<i64> {
        if !self.enabled {
            return Some(0);
        }
        if rng::bounded(rng.next_u64(), Probability::SCALE) < self.drop_probability.ppm() {
            return None;
        }
        let dist = LogNormal::new(self.median_secs.max(1e-9).ln(), self.sigma.max(0.0))
            .expect("valid lognormal");
        Some(dist.sample(rng).round().max(0.0) as i64)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PushOutcome {
    Arrived(Timestamp),
    Dropped,
}

pub trait PushChannel {
    fn send(&mut self, decision: &DecisionKey, at: Timestamp) -> PushOutcome;
}

/// Push channel driven only by the delay model, reading one counter-addressed
/// block per decision point.
#[derive(Clone, Debug)]
pub struct ModelPushChannel {
    pub model: PushModel,
    pub seed: u64,
}

impl ModelPushChannel {
    pub fn delay_for(&self, decision: &DecisionKey) -> Option<i64> {
        let mut s = rng::stream_at(
            self.seed,
            Purpose::Push,
            decision.participant_id,
            rng::component_hash(&decision.component_id),
            u64::from(decision.global_index),
        );
        self.model.sample(&mut s)
    }
}

impl PushChannel for ModelPushChannel {
    fn send(&mut self, decision: &DecisionKey, at: Timestamp) -> PushOutcome {
        match self.delay_for(decision) {
            Some(d) => PushOutcome::Arrived(at.plus_seconds(d)),
            None => PushOutcome::Dropped,
        }
    }
}

/// Server-side step at the scheduled instant. Tailoring uses whatever context
/// the server last received, so its age is recorded.
#[allow(clippy::too_many_arguments)]
pub fn server_agent_step(
    dp: &DecisionPoint,
    scheduled_at: Timestamp,
    avail: AvailabilityResult,
    p: Probability,
    stream: &RandomizationStream,
    context: Option<&ContextSnapshot>,
    content: &ContentLibrary,
    suggestion: bool,
    push: &mut dyn PushChannel,
) -> RandomizationRecord {
    let mut record = randomize(dp, scheduled_at, avail, p, stream, Agent::Server);
    record.context_staleness_secs = context.map(|c| c.staleness_secs(scheduled_at));
    if record.outcome == Outcome::Treat {
        let key = dp.key();
        record.content_id = Some(content.pick(&key, suggestion));
        match push.send(&key, scheduled_at) {
            PushOutcome::Arrived(at) => record.delivered_at = Some(at),
            PushOutcome::Dropped => record.data_note = Some(DataNote::PushDropped),
        }
    }
    record
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EngagementKind {
    ThumbsUp,
    ThumbsDown,
    SnoozeSet,
    NoResponse,
    /// Planning prompt answered in the end-of-day survey.
    PlanCompleted,
}

impl EngagementKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EngagementKind::ThumbsUp => "THUMBS_UP",
            EngagementKind::ThumbsDown => "THUMBS_DOWN",
            EngagementKind::SnoozeSet => "SNOOZE_SET",
            EngagementKind::NoResponse => "NO_RESPONSE",
            EngagementKind::PlanCompleted => "PLAN_COMPLETED",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagementEvent {
    pub decision: DecisionKey,
    pub kind: EngagementKind,
    pub at: Timestamp,
    pub snooze_minutes: Option<u32>,
}

/// A participant action on a delivered prompt, relative to delivery.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct UserAction {
    pub after_secs: i64,
    pub kind: EngagementKind,
    pub snooze_minutes: Option<u32>,
}

/// Resolve the terminal engagement for a delivered treatment: the earliest
/// action inside the timeout wins, otherwise NO_RESPONSE at the timeout.
/// A snooze action also returns the resulting [`SnoozeState`].
pub fn engage(
    record: &RandomizationRecord,
    actions: &[UserAction],
) -> Result<(EngagementEvent, Option<SnoozeState>)> {
    let delivered = match (record.outcome, record.delivered_at) {
        (Outcome::Treat, Some(d)) => d,
        _ => {
            return Err(Error::validation(
                "engage.record",
                "engagement requires a delivered treatment",
            ))
        }
    };
    let first = actions
        .iter()
        .filter(|a| a.after_secs >= 0 && a.after_secs < ENGAGEMENT_TIMEOUT_SECS)
        .filter(|a| a.kind != EngagementKind::NoResponse)
        .min_by_key(|a| a.after_secs);
    let Some(action) = first else {
        let event = EngagementEvent {
            decision: record.key(),
            kind: EngagementKind::NoResponse,
            at: delivered.plus_seconds(ENGAGEMENT_TIMEOUT_SECS),
            snooze_minutes: None,
        };
        return Ok((event, None));
    };
    let at = delivered.plus_seconds(action.after_secs);
    let snooze = match action.kind {
        EngagementKind::SnoozeSet => Some(SnoozeState::set(at, action.snooze_minutes.unwrap_or(60))?),
        _ => None,
    };
    let event = EngagementEvent {
        decision: record.key(),
        kind: action.kind,
        at,
        snooze_minutes: snooze.map(|_| action.snooze_minutes.unwrap_or(60)),
    };
    Ok((event, snooze))
}

/// Draw a user action for a delivered prompt from the engagement stream.
pub fn sample_action(
    rng: &mut impl Rng,
    thumbs_probability: f64,
    thumbs_up_share: f64,
    snooze_probability: f64,
) -> Option<UserAction> {
    let u: f64 = rng.random();
    let after_secs = rng.random_range(30..ENGAGEMENT_TIMEOUT_SECS);
    if u < thumbs_probability {
        let kind = if rng.random::<f64>() < thumbs_up_share {
            EngagementKind::ThumbsUp
        } else {
            EngagementKind::ThumbsDown
        };
        Some(UserAction {
            after_secs,
            kind,
            snooze_minutes: None,
        })
    } else if u < thumbs_probability + snooze_probability {
        let minutes = [60, 240, 720][rng.random_range(0..3)];
        Some(UserAction {
            after_secs,
            kind: EngagementKind::SnoozeSet,
            snooze_minutes: Some(minutes),
        })
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::availability::UnavailabilityReason;
    use crate::model::Weather;
    use crate::time::WallClock;

    const T: Timestamp = Timestamp(1_741_000_000);

    fn dp(g: u32) -> DecisionPoint {
        DecisionPoint {
            participant_id: ParticipantId(1),
            component_id: ComponentId::new("suggestions"),
            day_index: g / 5,
            slot_index: g % 5,
            scheduled_local_time: WallClock::from_minutes(8 * 60),
            global_index: g,
        }
    }

    fn p(s: &str) -> Probability {
        s.parse().unwrap()
    }

    fn unavailable(reason: UnavailabilityReason) -> AvailabilityResult {
        AvailabilityResult::from_reasons([reason].into_iter().collect(), T)
    }

    fn lib() -> ContentLibrary {
        ContentLibrary::new(1, p("0.5"))
    }

    #[test]
    fn degenerate_probability_always_treats() {
        let s = RandomizationStream::new(9);
        for g in 0..200 {
            let r = randomize(&dp(g), T, AvailabilityResult::available_at(T), Probability::ONE, &s, Agent::Phone);
            assert_eq!(r.outcome, Outcome::Treat);
            assert!(r.check().is_ok());
        }
    }

    #[test]
    fn unavailable_keeps_probability() {
        let s = RandomizationStream::new(9);
        let r = randomize(
            &dp(3),
            T,
            unavailable(UnavailabilityReason::RecentlyWalking),
            p("0.6"),
            &s,
            Agent::Phone,
        );
        assert_eq!(r.outcome, Outcome::NotRandomized);
        assert_eq!(r.probability, p("0.6"));
        assert!(r.availability.reasons().contains(&UnavailabilityReason::RecentlyWalking));
        assert_eq!(r.randomized_at, None);
        assert!(r.check().is_ok());
    }

    fn snapshot() -> ContextSnapshot {
        ContextSnapshot {
            captured_at: T.plus_seconds(-PREFETCH_LEAD_SECS),
            location: None,
            weather: Weather::Cloudy,
            recent_activity: false,
            driving: false,
            connection: Some(Connection::Online),
        }
    }

    /// Find decision indices whose draw lands on each side of p.
    fn indices(stream: &RandomizationStream, prob: Probability) -> (u32, u32) {
        let treat = (0..).find(|&g| stream.draw(&dp(g).key()) < prob.ppm()).unwrap();
        let no = (0..).find(|&g| stream.draw(&dp(g).key()) >= prob.ppm()).unwrap();
        (treat, no)
    }

    #[test]
    fn phone_connectivity_grid() {
        let s = RandomizationStream::new(5);
        let prob = p("0.6");
        let (treat_g, no_g) = indices(&s, prob);
        for prefetch_online in [true, false] {
            for dp_online in [true, false] {
                for g in [treat_g, no_g] {
                    let d = dp(g);
                    let cache = prefetch_online.then(|| {
                        PrefetchedContent::new(
                            d.key(),
                            lib().pick(&d.key(), true),
                            T.plus_seconds(-PREFETCH_LEAD_SECS),
                            snapshot(),
                            T,
                        )
                        .unwrap()
                    });
                    let conn = if dp_online { Connection::Online } else { Connection::Offline };
                    let (rec, delivery) = phone_agent_step(
                        &d,
                        T,
                        AvailabilityResult::available_at(T),
                        prob,
                        &s,
                        conn,
                        cache.as_ref(),
                        &lib(),
                        true,
                    );
                    assert!(rec.check().is_ok());
                    if g == no_g {
                        assert_eq!(rec.outcome, Outcome::NoTreat);
                        assert!(delivery.is_none());
                        assert_eq!(rec.delivered_at, None);
                        continue;
                    }
                    assert_eq!(rec.outcome, Outcome::Treat);
                    if dp_online || prefetch_online {
                        let delivery = delivery.unwrap();
                        assert_eq!(rec.delivered_at, Some(T));
                        assert_eq!(delivery.from_cache, !dp_online);
                        assert!(delivery.at.0 - T.0 <= TAILORING_WINDOW_SECS);
                    } else {
                        assert!(delivery.is_none());
                        assert_eq!(rec.delivered_at, None);
                        assert_eq!(rec.data_note, Some(DataNote::UndeliverableOffline));
                    }
                }
            }
        }
    }

    #[test]
    fn prefetch_must_precede_decision() {
        let d = dp(0);
        assert!(PrefetchedContent::new(d.key(), "walk-001".into(), T, snapshot(), T).is_err());
    }

    struct FixedDelay(Option<i64>);
    impl PushChannel for FixedDelay {
        fn send(&mut self, _: &DecisionKey, at: Timestamp) -> PushOutcome {
            match self.0 {
                Some(d) => PushOutcome::Arrived(at.plus_seconds(d)),
                None => PushOutcome::Dropped,
            }
        }
    }

    #[test]
    fn server_delay_and_drop() {
        let s = RandomizationStream::new(5);
        let (g, _) = indices(&s, p("0.6"));
        let ctx = snapshot();
        for (delay, want) in [(Some(0), Some(T)), (Some(240), Some(T.plus_seconds(240))), (None, None)] {
            let rec = server_agent_step(
                &dp(g),
                T,
                AvailabilityResult::available_at(T),
                p("0.6"),
                &s,
                Some(&ctx),
                &lib(),
                true,
                &mut FixedDelay(delay),
            );
            assert_eq!(rec.outcome, Outcome::Treat);
            assert_eq!(rec.delivered_at, want);
            assert_eq!(rec.context_staleness_secs, Some(PREFETCH_LEAD_SECS));
            if delay.is_none() {
                assert_eq!(rec.data_note, Some(DataNote::PushDropped));
            }
            assert!(rec.check().is_ok());
        }
    }

    #[test]
    fn model_channel_reads_back_seeded_delay() {
        let ch = ModelPushChannel {
            model: PushModel {
                drop_probability: Probability::ZERO,
                ..PushModel::default()
            },
            seed: 77,
        };
        let key = dp(4).key();
        let expected = ch.delay_for(&key).unwrap();
        let mut ch2 = ch.clone();
        assert_eq!(ch2.send(&key, T), PushOutcome::Arrived(T.plus_seconds(expected)));
        let disabled = ModelPushChannel {
            model: PushModel {
                enabled: false,
                ..PushModel::default()
            },
            seed: 77,
        };
        assert_eq!(disabled.delay_for(&key), Some(0));
    }

    #[test]
    fn server_table_fills_once() {
        let schedule: Vec<_> = (0..10).map(dp).collect();
        let mut table = ServerTable::prepare(&schedule);
        assert_eq!(table.unfilled().count(), 10);
        let s = RandomizationStream::new(1);
        let rec = randomize(&dp(2), T, AvailabilityResult::available_at(T), p("0.6"), &s, Agent::Server);
        table.fill(rec.clone()).unwrap();
        assert!(matches!(table.fill(rec), Err(Error::RowAlreadyFilled(_))));
        let stray = randomize(&dp(99), T, AvailabilityResult::available_at(T), p("0.6"), &s, Agent::Server);
        assert!(matches!(table.fill(stray), Err(Error::UnknownDecisionPoint(_))));
        assert_eq!(table.unfilled().count(), 9);
        assert_eq!(table.len(), 10);
    }

    fn delivered_record() -> RandomizationRecord {
        let mut r = randomize(
            &dp(0),
            T,
            AvailabilityResult::available_at(T),
            Probability::ONE,
            &RandomizationStream::new(1),
            Agent::Phone,
        );
        r.delivered_at = Some(T);
        r
    }

    #[test]
    fn engagement_outcomes() {
        let rec = delivered_record();
        let up = UserAction { after_secs: 300, kind: EngagementKind::ThumbsUp, snooze_minutes: None };
        let (e, snooze) = engage(&rec, &[up]).unwrap();
        assert_eq!(e.kind, EngagementKind::ThumbsUp);
        assert_eq!(e.at, T.plus_seconds(300));
        assert!(snooze.is_none());

        let (e, _) = engage(&rec, &[]).unwrap();
        assert_eq!(e.kind, EngagementKind::NoResponse);
        assert_eq!(e.at, T.plus_seconds(ENGAGEMENT_TIMEOUT_SECS));

        let late = UserAction { after_secs: ENGAGEMENT_TIMEOUT_SECS, ..up };
        assert_eq!(engage(&rec, &[late]).unwrap().0.kind, EngagementKind::NoResponse);

        let snooze_action = UserAction {
            after_secs: 60,
            kind: EngagementKind::SnoozeSet,
            snooze_minutes: Some(720),
        };
        let (e, snooze) = engage(&rec, &[up, snooze_action]).unwrap();
        assert_eq!(e.kind, EngagementKind::SnoozeSet);
        let snooze = snooze.unwrap();
        assert!(snooze.is_active(T.plus_seconds(61)));
        assert!(!snooze.is_active(T.plus_seconds(60 + 720 * 60)));
    }

    #[test]
    fn engagement_requires_delivery() {
        let mut rec = delivered_record();
        rec.delivered_at = None;
        assert!(engage(&rec, &[]).is_err());
    }

    #[test]
    fn identical_draws_for_both_agents() {
        let s = RandomizationStream::new(42);
        let ctx = snapshot();
        for g in 0..100 {
            let d = dp(g);
            let avail = AvailabilityResult::available_at(T);
            let (phone, _) = phone_agent_step(&d, T, avail.clone(), p("0.6"), &s, Connection::Online, None, &lib(), true);
            let server = server_agent_step(&d, T, avail, p("0.6"), &s, Some(&ctx), &lib(), true, &mut FixedDelay(Some(10)));
            assert_eq!((phone.outcome, phone.probability), (server.outcome, server.probability));
        }
    }
}
