//! The JSON-lines event log: everything the pipeline may know about a run.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::scenario::{FaultKind, ScenarioConfig};
use crate::agents::{EngagementEvent, RandomizationRecord};
use crate::error::{Error, Result};
use crate::model::{Connection, DecisionKey, ParticipantId, Region};
use crate::sync::{IngestResult, MessageId, Payload, PayloadKind};
use crate::time::{ItinerarySet, Timestamp};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRegions {
    pub home: Region,
    pub work: Region,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub schema_version: u32,
    pub scenario: ScenarioConfig,
    /// True itineraries (what the participant experienced).
    pub itineraries: ItinerarySet,
    pub regions: BTreeMap<ParticipantId, ParticipantRegions>,
    pub run_start: Timestamp,
    pub run_end: Timestamp,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub decision_points: u64,
    pub randomization_records: u64,
    pub treatments_delivered: u64,
    pub faults_fired: u64,
    pub payloads_generated: u64,
    pub payloads_stored: u64,
    pub quarantined: u64,
    pub duplicates: u64,
    pub residual_outbox: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventBody {
    Header(Box<RunHeader>),
    FaultStart {
        kind: FaultKind,
    },
    FaultEnd {
        kind: FaultKind,
    },
    Randomized {
        record: RandomizationRecord,
    },
    DecisionMissed {
        decision: DecisionKey,
        cause: String,
    },
    PushDelivered {
        decision: DecisionKey,
    },
    Engaged {
        event: EngagementEvent,
    },
    Enqueued {
        message_id: MessageId,
        kind: PayloadKind,
        locator: Option<DecisionKey>,
    },
    Sent {
        message_id: MessageId,
        attempt: u32,
        network: Connection,
    },
    Ingested {
        message_id: MessageId,
        kind: PayloadKind,
        locator: Option<DecisionKey>,
        result: IngestResult,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        payload: Option<Payload>,
    },
    AckLost {
        message_id: MessageId,
    },
    AckDiscarded {
        message_id: MessageId,
    },
    OutboxRemoved {
        message_id: MessageId,
    },
    TrackerFlush {
        flush_id: u32,
        samples: u32,
        recovered: bool,
    },
    AppKilled,
    AppRestarted,
    OutboxResidual {
        message_ids: Vec<MessageId>,
    },
    RunEnd {
        summary: RunSummary,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub seq: u64,
    pub utc: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participant_id: Option<ParticipantId>,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<LogEvent>,
}

impl EventLog {
    pub fn header(&self) -> Result<&RunHeader> {
        match self.events.first().map(|e| &e.body) {
            Some(EventBody::Header(h)) => Ok(h),
            _ => Err(Error::EventLog("first event is not a header".into())),
        }
    }

    pub fn summary(&self) -> Option<&RunSummary> {
        match self.events.last().map(|e| &e.body) {
            Some(EventBody::RunEnd { summary }) => Some(summary),
            _ => None,
        }
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: LogEvent = serde_json::from_str(&line)
                .map_err(|err| Error::EventLog(format!("line {}: {err}", i + 1)))?;
            events.push(e);
        }
        let log = EventLog { events };
        let h = log.header()?;
        if h.schema_version != SCHEMA_VERSION {
            return Err(Error::EventLog(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                h.schema_version
            )));
        }
        Ok(log)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::read_jsonl(text.as_bytes())
    }

    /// Index of the first event whose UTC stamp or sequence number goes backwards.
    pub fn first_order_violation(&self) -> Option<usize> {
        self.events
            .windows(2)
            .position(|w| w[1].utc < w[0].utc || w[1].seq != w[0].seq + 1)
            .map(|i| i + 1)
    }

    /// Payloads the server stored, in log order.
    pub fn stored_payloads(&self) -> impl Iterator<Item = (&MessageId, &Payload)> {
        self.events.iter().filter_map(|e| match &e.body {
            EventBody::Ingested {
                message_id,
                result: IngestResult::Stored,
                payload: Some(p),
                ..
            } => Some((message_id, p)),
            _ => None,
        })
    }
}
