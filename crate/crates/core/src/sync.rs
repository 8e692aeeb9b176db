//! At-least-once phone-to-server transfer with acknowledgments.
//!
//! The phone appends every payload to a persisted [`Outbox`] before any send
//! attempt and removes an entry only when a positive [`Ack`] naming its
//! `message_id` comes back. The server deduplicates on `message_id`, so
//! retries after lost acks store nothing twice. Malformed bodies are
//! quarantined and negatively acknowledged; nothing is dropped silently.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agents::{EngagementEvent, RandomizationRecord};
use crate::error::{Error, Result};
use crate::model::{Connection, ContextSnapshot, DailyObservation, DecisionKey, ParticipantId};
use crate::time::Timestamp;

pub const BACKOFF_BASE_SECS: i64 = 30;
pub const BACKOFF_CAP_SECS: i64 = 3600;
/// An unacknowledged transmission may be resent after this long.
pub const ACK_TIMEOUT_SECS: i64 = 10;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageId(pub String);

impl MessageId {
    pub fn new(participant: ParticipantId, seq: u64) -> Self {
        MessageId(format!("p{}-{seq:08}", participant.0))
    }
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SensorStream {
    Tracker,
    PhoneFit,
}

/// One step-count observation over `[start, end)`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSample {
    pub stream: SensorStream,
    pub participant_id: ParticipantId,
    pub start: Timestamp,
    pub end: Timestamp,
    pub steps: u32,
}

/// Minute-level tracker samples moved from the wearable to the phone in one
/// Bluetooth sync. `recovered` marks a flush that carried backlog held on the
/// tracker while it could not reach the phone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerBatch {
    pub participant_id: ParticipantId,
    pub flush_id: u32,
    pub recovered: bool,
    /// `(minute start, steps)`; each sample covers one minute.
    pub samples: Vec<(Timestamp, u32)>,
}

impl TrackerBatch {
    pub fn sensor_samples(&self) -> impl Iterator<Item = SensorSample> + '_ {
        self.samples.iter().map(|&(start, steps)| SensorSample {
            stream: SensorStream::Tracker,
            participant_id: self.participant_id,
            start,
            end: start.plus_seconds(60),
            steps,
        })
    }
}

/// Bout-level phone step aggregates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitBatch {
    pub participant_id: ParticipantId,
    /// `(bout start, bout end, steps)`.
    pub bouts: Vec<(Timestamp, Timestamp, u32)>,
}

impl FitBatch {
    pub fn sensor_samples(&self) -> impl Iterator<Item = SensorSample> + '_ {
        self.bouts.iter().map(|&(start, end, steps)| SensorSample {
            stream: SensorStream::PhoneFit,
            participant_id: self.participant_id,
            start,
            end,
            steps,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextUpload {
    pub participant_id: ParticipantId,
    pub decision: Option<DecisionKey>,
    pub snapshot: ContextSnapshot,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PayloadKind {
    Randomization,
    Engagement,
    Context,
    TrackerBatch,
    PhoneFitBatch,
    Daily,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Payload {
    Randomization(RandomizationRecord),
    Engagement(EngagementEvent),
    Context(ContextUpload),
    TrackerBatch(TrackerBatch),
    PhoneFitBatch(FitBatch),
    Daily(DailyObservation),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Randomization(_) => PayloadKind::Randomization,
            Payload::Engagement(_) => PayloadKind::Engagement,
            Payload::Context(_) => PayloadKind::Context,
            Payload::TrackerBatch(_) => PayloadKind::TrackerBatch,
            Payload::PhoneFitBatch(_) => PayloadKind::PhoneFitBatch,
            Payload::Daily(_) => PayloadKind::Daily,
        }
    }

    pub fn participant(&self) -> ParticipantId {
        match self {
            Payload::Randomization(r) => r.participant_id,
            Payload::Engagement(e) => e.decision.participant_id,
            Payload::Context(c) => c.participant_id,
            Payload::TrackerBatch(b) => b.participant_id,
            Payload::PhoneFitBatch(b) => b.participant_id,
            Payload::Daily(d) => d.participant_id,
        }
    }

    /// The decision point this payload documents, when it documents one.
    pub fn locator(&self) -> Option<DecisionKey> {
        match self {
            Payload::Randomization(r) => Some(r.key()),
            Payload::Engagement(e) => Some(e.decision.clone()),
            Payload::Context(c) => c.decision.clone(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncEnvelope {
    pub message_id: MessageId,
    pub participant_id: ParticipantId,
    pub kind: PayloadKind,
    pub locator: Option<DecisionKey>,
    /// JSON-encoded [`Payload`].
    pub body: String,
    pub client_sent_at: Timestamp,
    pub attempt: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub message_id: MessageId,
    pub positive: bool,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutboxEntry {
    pub envelope: SyncEnvelope,
    pub persisted: bool,
    in_flight_until: Option<Timestamp>,
}

/// Doubling retry delay from 30 s, capped at one hour.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct Backoff {
    failures: u32,
}

impl Backoff {
    pub fn delay_secs(&self) -> i64 {
        let shift = self.failures.min(16);
        (BACKOFF_BASE_SECS << shift).min(BACKOFF_CAP_SECS)
    }

    pub fn record_failure(&mut self) {
        self.failures = self.failures.saturating_add(1);
    }

    pub fn reset(&mut self) {
        self.failures = 0;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SendReport {
    pub transmitted: usize,
    pub acked: usize,
    pub removed: usize,
    pub nacked: usize,
    pub lost_acks: usize,
}

/// Durable phone-side queue of envelopes awaiting acknowledgment.
#[derive(Clone, Debug)]
pub struct Outbox {
    participant: ParticipantId,
    next_seq: u64,
    entries: VecDeque<OutboxEntry>,
    pub backoff: Backoff,
}

impl Outbox {
    pub fn new(participant: ParticipantId) -> Self {
        Outbox {
            participant,
            next_seq: 0,
            entries: VecDeque::new(),
            backoff: Backoff::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &OutboxEntry> {
        self.entries.iter()
    }

    pub fn contains(&self, id: &MessageId) -> bool {
        self.entries.iter().any(|e| &e.envelope.message_id == id)
    }

    /// Append and persist a payload. The returned envelope has not been sent.
    pub fn enqueue(&mut self, payload: &Payload, now: Timestamp) -> Result<SyncEnvelope> {
        let envelope = SyncEnvelope {
            message_id: MessageId::new(self.participant, self.next_seq),
            participant_id: self.participant,
            kind: payload.kind(),
            locator: payload.locator(),
            body: serde_json::to_string(payload)?,
            client_sent_at: now,
            attempt: 0,
        };
        self.next_seq += 1;
        self.entries.push_back(OutboxEntry {
            envelope: envelope.clone(),
            persisted: true,
            in_flight_until: None,
        });
        Ok(envelope)
    }

    /// App process restart: volatile in-flight markers are lost, persisted
    /// entries remain.
    pub fn restart(&mut self) {
        for e in &mut self.entries {
            e.in_flight_until = None;
        }
    }

    /// Put every sendable entry on the wire, in order. Offline transmits
    /// nothing; a captive portal swallows whatever is transmitted.
    pub fn transmit(&mut self, now: Timestamp, network: Connection) -> Vec<SyncEnvelope> {
        if network == Connection::Offline {
            return Vec::new();
        }
        let mut out = Vec::new();
        for e in &mut self.entries {
            if e.in_flight_until.is_some_and(|until| now < until) {
                continue;
            }
            e.envelope.attempt += 1;
            e.envelope.client_sent_at = now;
            e.in_flight_until = Some(now.plus_seconds(ACK_TIMEOUT_SECS));
            out.push(e.envelope.clone());
        }
        out
    }

    /// Apply an acknowledgment. Returns true when an entry was removed.
    pub fn apply_ack(&mut self, ack: &Ack) -> bool {
        let Some(pos) = self
            .entries
            .iter()
            .position(|e| e.envelope.message_id == ack.message_id)
        else {
            return false;
        };
        if ack.positive {
            self.entries.remove(pos);
            true
        } else {
            self.entries[pos].in_flight_until = None;
            false
        }
    }

    /// One synchronous send round against a server. `ack_arrives` decides
    /// whether each acknowledgment makes it back to the phone.
    pub fn attempt_send(
        &mut self,
        now: Timestamp,
        network: Connection,
        server: &mut SyncServer,
        mut ack_arrives: impl FnMut(&Ack) -> bool,
    ) -> SendReport {
        let sent = self.transmit(now, network);
        let mut report = SendReport {
            transmitted: sent.len(),
            ..SendReport::default()
        };
        let reachable = network == Connection::Online;
        let mut clean = reachable || self.entries.is_empty();
        if reachable {
            for env in &sent {
                let (_, ack) = server.ingest(env, now);
                if !ack_arrives(&ack) {
                    report.lost_acks += 1;
                    clean = false;
                    continue;
                }
                if ack.positive {
                    report.acked += 1;
                } else {
                    report.nacked += 1;
                    clean = false;
                }
                if self.apply_ack(&ack) {
                    report.removed += 1;
                }
            }
        }
        if clean {
            self.backoff.reset();
        } else {
            self.backoff.record_failure();
        }
        report
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IngestResult {
    Stored,
    Duplicate,
    Quarantined { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredPayload {
    pub message_id: MessageId,
    pub participant_id: ParticipantId,
    pub stored_at: Timestamp,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineRow {
    pub envelope: SyncEnvelope,
    pub reason: String,
    pub received_at: Timestamp,
}

/// Server-side store keyed by `message_id`. Ingestion of distinct ids
/// commutes, so interleaving many participants is safe.
#[derive(Clone, Debug, Default)]
pub struct SyncServer {
    stored: BTreeMap<MessageId, StoredPayload>,
    quarantine: Vec<QuarantineRow>,
    duplicates: u64,
}

impl SyncServer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ingest(&mut self, envelope: &SyncEnvelope, now: Timestamp) -> (IngestResult, Ack) {
        let ack = |positive: bool, reason: Option<String>| Ack {
            message_id: envelope.message_id.clone(),
            positive,
            reason,
        };
        if self.stored.contains_key(&envelope.message_id) {
            self.duplicates += 1;
            return (IngestResult::Duplicate, ack(true, None));
        }
        match parse_body(envelope) {
            Ok(payload) => {
                self.stored.insert(
                    envelope.message_id.clone(),
                    StoredPayload {
                        message_id: envelope.message_id.clone(),
                        participant_id: envelope.participant_id,
                        stored_at: now,
                        payload,
                    },
                );
                (IngestResult::Stored, ack(true, None))
            }
            Err(reason) => {
                self.quarantine.push(QuarantineRow {
                    envelope: envelope.clone(),
                    reason: reason.clone(),
                    received_at: now,
                });
                (
                    IngestResult::Quarantined {
                        reason: reason.clone(),
                    },
                    ack(false, Some(reason)),
                )
            }
        }
    }

    pub fn get(&self, id: &MessageId) -> Option<&StoredPayload> {
        self.stored.get(id)
    }

    pub fn stored(&self) -> impl Iterator<Item = &StoredPayload> {
        self.stored.values()
    }

    pub fn stored_count(&self) -> usize {
        self.stored.len()
    }

    pub fn quarantine(&self) -> &[QuarantineRow] {
        &self.quarantine
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }
}

fn parse_body(envelope: &SyncEnvelope) -> std::result::Result<Payload, String> {
    let payload: Payload =
        serde_json::from_str(&envelope.body).map_err(|e| format!("malformed body: {e}"))?;
    if payload.kind() != envelope.kind {
        return Err(format!(
            "payload kind {:?} does not match envelope kind {:?}",
            payload.kind(),
            envelope.kind
        ));
    }
    if payload.participant() != envelope.participant_id {
        return Err("payload participant does not match envelope".into());
    }
    Ok(payload)
}

/// Encode one envelope as a 4-byte big-endian length followed by its JSON.
pub fn encode_frame(envelope: &SyncEnvelope) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(envelope)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Frame("envelope too large".into()))?;
    let mut out = Vec::with_capacity(4 + json.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn decode_frames(mut bytes: &[u8]) -> Result<Vec<SyncEnvelope>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 4 {
            return Err(Error::Frame("truncated length prefix".into()));
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let rest = &bytes[4..];
        if rest.len() < len {
            return Err(Error::Frame(format!(
                "frame declares {len} bytes, {} remain",
                rest.len()
            )));
        }
        out.push(serde_json::from_slice(&rest[..len]).map_err(|e| Error::Frame(e.to_string()))?);
        bytes = &rest[len..];
    }
    Ok(out)
}
