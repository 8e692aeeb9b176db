//! Simulator-private truth: per-minute steps, applied effects, causes of
//! missing data and every payload generated. Only tests read it.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DecisionKey, ParticipantId};
use crate::sync::{MessageId, PayloadKind};
use crate::time::Timestamp;

/// What happened to the tracker's reading of one minute.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum MinuteFate {
    /// Zero steps; the tracker stays silent.
    SuppressedZero,
    /// Held on the tracker, not yet handed to the phone.
    Buffered,
    /// Handed to the phone in a tracker flush.
    Synced,
    BatteryDead,
    /// Participant no longer wearing the tracker (after dropout).
    NotWorn,
}

impl MinuteFate {
    fn code(self) -> char {
        match self {
            MinuteFate::SuppressedZero => 'z',
            MinuteFate::Buffered => 'b',
            MinuteFate::Synced => 's',
            MinuteFate::BatteryDead => 'd',
            MinuteFate::NotWorn => 'n',
        }
    }

    fn from_code(c: char) -> Option<Self> {
        Some(match c {
            'z' => MinuteFate::SuppressedZero,
            'b' => MinuteFate::Buffered,
            's' => MinuteFate::Synced,
            'd' => MinuteFate::BatteryDead,
            'n' => MinuteFate::NotWorn,
            _ => return None,
        })
    }
}

mod fate_codes {
    use super::MinuteFate;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[MinuteFate], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.iter().map(|f| f.code()).collect::<String>())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<MinuteFate>, D::Error> {
        let s = String::deserialize(d)?;
        s.chars()
            .map(|c| MinuteFate::from_code(c).ok_or_else(|| serde::de::Error::custom(format!("bad fate `{c}`"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedEffect {
    pub decision: DecisionKey,
    pub delivered_at: Timestamp,
    pub first_minute: Timestamp,
    pub minutes: u32,
    pub steps: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingCause {
    pub at: Timestamp,
    /// What is missing, e.g. `randomization 3/suggestions/17` or `survey day 4`.
    pub item: String,
    pub cause: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedPayload {
    pub message_id: MessageId,
    pub participant_id: ParticipantId,
    pub kind: PayloadKind,
    pub locator: Option<DecisionKey>,
    /// FNV-1a 64 of the JSON body, hex.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantTruth {
    pub participant_id: ParticipantId,
    /// Start of minute 0.
    pub t0: Timestamp,
    steps: Vec<u32>,
    #[serde(with = "fate_codes")]
    fates: Vec<MinuteFate>,
    effects: Vec<AppliedEffect>,
    missing: Vec<MissingCause>,
}

impl ParticipantTruth {
    pub(crate) fn new(participant_id: ParticipantId, t0: Timestamp, steps: Vec<u32>, fates: Vec<MinuteFate>) -> Self {
        ParticipantTruth {
            participant_id,
            t0,
            steps,
            fates,
            effects: Vec::new(),
            missing: Vec::new(),
        }
    }

    pub(crate) fn set_steps(&mut self, steps: Vec<u32>) {
        self.steps = steps;
    }

    pub(crate) fn set_fates(&mut self, fates: Vec<MinuteFate>) {
        self.fates = fates;
    }

    pub(crate) fn record_effect(&mut self, e: AppliedEffect) {
        self.effects.push(e);
    }

    pub(crate) fn record_missing(&mut self, at: Timestamp, item: impl Into<String>, cause: impl Into<String>) {
        self.missing.push(MissingCause {
            at,
            item: item.into(),
            cause: cause.into(),
        });
    }

    pub fn steps(&self) -> &[u32] {
        &self.steps
    }

    pub fn fates(&self) -> &[MinuteFate] {
        &self.fates
    }

    pub fn effects(&self) -> &[AppliedEffect] {
        &self.effects
    }

    pub fn missing(&self) -> &[MissingCause] {
        &self.missing
    }

    pub fn minute_of(&self, t: Timestamp) -> Option<usize> {
        let d = t.0 - self.t0.0;
        (d >= 0 && ((d / 60) as usize) < self.steps.len()).then_some((d / 60) as usize)
    }

    /// True steps in `[start, end)`, each minute weighted by its overlap in
    /// seconds, total rounded half-up.
    pub fn steps_between(&self, start: Timestamp, end: Timestamp) -> u64 {
        let mut weighted: u128 = 0;
        for (m, &s) in self.steps.iter().enumerate() {
            let ms = self.t0.0 + 60 * m as i64;
            let overlap = (ms + 60).min(end.0) - ms.max(start.0);
            if overlap > 0 {
                weighted += u128::from(s) * overlap as u128;
            }
        }
        ((weighted + 30) / 60) as u64
    }

    /// Per-minute steps with every applied effect taken back out.
    pub fn baseline(&self) -> Vec<u32> {
        let mut out = self.steps.clone();
        for e in &self.effects {
            let Some(first) = self.minute_of(e.first_minute) else { continue };
            let n = e.minutes.max(1);
            let (q, r) = (e.steps / n, e.steps % n);
            let mut left = e.steps;
            for i in 0..n as usize {
                let Some(slot) = out.get_mut(first + i) else { break };
                let take = (q + u32::from((i as u32) < r)).min(left);
                *slot -= take;
                left -= take;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLedger {
    pub seed: u64,
    participants: Vec<ParticipantTruth>,
    generated: Vec<GeneratedPayload>,
}

impl GroundTruthLedger {
    pub(crate) fn new(seed: u64, participants: Vec<ParticipantTruth>, generated: Vec<GeneratedPayload>) -> Self {
        GroundTruthLedger {
            seed,
            participants,
            generated,
        }
    }

    pub fn participants(&self) -> &[ParticipantTruth] {
        &self.participants
    }

    pub fn participant(&self, p: ParticipantId) -> Option<&ParticipantTruth> {
        self.participants.iter().find(|t| t.participant_id == p)
    }

    pub fn generated(&self) -> &[GeneratedPayload] {
        &self.generated
    }

    /// Serialized ledger plus its SHA-256, hex.
    pub fn seal(&self) -> Result<(String, String)> {
        let json = serde_json::to_string(self)?;
        let hash = sha256_hex(json.as_bytes());
        Ok((json, hash))
    }

    pub fn open_sealed(json: &str, hash: &str) -> Result<Self> {
        let actual = sha256_hex(json.as_bytes());
        if actual != hash.trim() {
            return Err(Error::EventLog("ledger seal does not match its contents".into()));
        }
        Ok(serde_json::from_str(json)?)
    }
}

/// SHA-256 of `data`, lowercase hex.
pub fn sha256_hex(data: &[u8]) -> String {
    format!("{:x}", Sha256::digest(data))
}

/// FNV-1a 64 of a payload body, as fixed-width hex.
pub fn body_digest(body: &str) -> String {
    let h = body
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3));
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth() -> ParticipantTruth {
        let t0 = Timestamp(1_740_000_000);
        ParticipantTruth::new(
            ParticipantId(0),
            t0,
            vec![60, 0, 30, 90],
            vec![
                MinuteFate::Synced,
                MinuteFate::SuppressedZero,
                MinuteFate::Buffered,
                MinuteFate::BatteryDead,
            ],
        )
    }

    #[test]
    fn prorated_truth_rounds_half_up() {
        let t = truth();
        assert_eq!(t.steps_between(t.t0, t.t0.plus_minutes(4)), 180);
        // Half of minute 0 and half of minute 2 skipped: 30 + 0 + 15 -> 45.
        assert_eq!(t.steps_between(t.t0.plus_seconds(30), t.t0.plus_seconds(150)), 45);
        // 1 second of a 90-step minute is 1.5 -> 2.
        assert_eq!(t.steps_between(t.t0.plus_seconds(180), t.t0.plus_seconds(181)), 2);
    }

    #[test]
    fn seal_detects_tampering() {
        let ledger = GroundTruthLedger::new(1, vec![truth()], Vec::new());
        let (json, hash) = ledger.seal().unwrap();
        assert_eq!(GroundTruthLedger::open_sealed(&json, &hash).unwrap(), ledger);
        let tampered = json.replace("60,0,30", "61,0,30");
        assert!(GroundTruthLedger::open_sealed(&tampered, &hash).is_err());
    }

    #[test]
    fn baseline_removes_effects() {
        let mut t = truth();
        t.record_effect(AppliedEffect {
            decision: DecisionKey {
                participant_id: ParticipantId(0),
                component_id: crate::model::ComponentId::new("suggestions"),
                global_index: 0,
            },
            delivered_at: t.t0.plus_minutes(2),
            first_minute: t.t0.plus_minutes(2),
            minutes: 2,
            steps: 3,
        });
        assert_eq!(t.baseline(), vec![60, 0, 28, 89]);
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(body_digest(""), "cbf29ce484222325");
        assert_ne!(body_digest("a"), body_digest("b"));
    }
}
