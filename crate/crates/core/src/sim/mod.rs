//! Deterministic simulation of a trial: participants, phones, trackers, the
//! network and the server, with scheduled faults.

pub mod behavior;
pub mod faults;
pub mod ledger;
pub mod log;
pub mod scenario;
pub mod world;

pub use faults::random_fault_schedule;
pub use ledger::{sha256_hex, GroundTruthLedger, MinuteFate, ParticipantTruth};
pub use log::{EventBody, EventLog, LogEvent, RunHeader, RunSummary};
pub use scenario::{Decay, EffectConfig, FaultKind, FaultSpec, FaultTargets, ScenarioConfig};
pub use world::{run, run_with, RunOptions, RunOutput};
