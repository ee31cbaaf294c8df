//! Intrusion-tolerant composition of functionally equivalent SOAP services.
//!
//! Candidate services are penetration-probed for XML-specific weaknesses,
//! each client request is scanned for the attack classes it could carry,
//! and the request is then served by a `3f+1` replica set chosen to avoid
//! those weaknesses, with termination at `2f+1` responses and majority voting.

pub mod attack;
pub mod canonical;
pub mod config;
pub mod durations;
pub mod gateway;
pub mod http;
pub mod mock;
pub mod probe;
pub mod quorum;
pub mod registry;
pub mod replay;
pub mod scanner;
pub mod selector;
pub mod soap;

pub use attack::{AttackPayload, AttackVector};
pub use probe::{ProbeOutcome, ProbeSettings, ProbeVerdict};
pub use quorum::{QuorumError, QuorumResult, ReplicationSettings, invoke_quorum, vote};
pub use registry::{Registry, SelectionPolicy, ServiceRecord, SharedRegistry, Verdict};
pub use scanner::{ClientRequest, ScannerThresholds, ThreatProfile, scan};
pub use selector::{SelectionResult, select};
