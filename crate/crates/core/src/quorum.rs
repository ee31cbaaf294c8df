//! Concurrent fan-out to `3f+1` replicas, termination at `2f+1` responses,
//! majority voting, and whole-round re-execution when every replica fails.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use futures::StreamExt;
use futures::future::BoxFuture;
use futures::stream::FuturesUnordered;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::class_of;
use crate::http::{self, Endpoint};
use crate::registry::{InvocationOutcome, SharedRegistry};
use crate::scanner::ClientRequest;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VoteError {
    #[error("insufficient quorum: {got} responses, need {needed}")]
    InsufficientQuorum { got: usize, needed: usize },
}

/// Outcome of a vote over a multiset of responses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Vote {
    Winner { class: String, index: usize, tally: BTreeMap<String, usize> },
    NoMajority { tally: BTreeMap<String, usize> },
}

/// Groups responses by canonical class; the winner is the unique class with
/// at least `f+1` votes and strictly more votes than any other class.
pub fn vote(responses: &[Vec<u8>], f: usize) -> Result<Vote, VoteError> {
    let needed = 2 * f + 1;
    if responses.len() < needed {
        return Err(VoteError::InsufficientQuorum { got: responses.len(), needed });
    }
    let classes: Vec<String> = responses.iter().map(|r| class_of(r)).collect();
    Ok(vote_classes(&classes, f))
}

fn vote_classes(classes: &[String], f: usize) -> Vote {
    let mut tally: BTreeMap<String, usize> = BTreeMap::new();
    for c in classes {
        *tally.entry(c.clone()).or_default() += 1;
    }
    let best = tally.values().copied().max().unwrap_or(0);
    let leaders: Vec<&String> = tally.iter().filter(|(_, n)| **n == best).map(|(c, _)| c).collect();
    if best > f && leaders.len() == 1 {
        let class = leaders[0].clone();
        let index = classes.iter().position(|c| *c == class).expect("winner class present");
        Vote::Winner { class, index, tally }
    } else {
        Vote::NoMajority { tally }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicationSettings {
    pub f: usize,
    #[serde(with = "crate::durations::ms")]
    pub per_replica_timeout: Duration,
    pub max_reexecutions: usize,
    pub vote_extension: bool,
}

impl Default for ReplicationSettings {
    fn default() -> Self {
        ReplicationSettings {
            f: 1,
            per_replica_timeout: Duration::from_secs(10),
            max_reexecutions: 1,
            vote_extension: true,
        }
    }
}

impl ReplicationSettings {
    pub fn with_f(mut self, f: usize) -> Self {
        self.f = f;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.per_replica_timeout.is_zero() {
            return Err("per_replica_timeout must be positive".into());
        }
        Ok(())
    }
}

/// A replica to invoke.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaTarget {
    pub id: String,
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplicaFailure {
    #[error("timed out")]
    Timeout,
    #[error("transport: {0}")]
    Transport(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
}

/// How the orchestrator reaches a replica.
pub trait ReplicaTransport: Send + Sync {
    fn invoke<'a>(
        &'a self,
        replica: &'a ReplicaTarget,
        request: &'a ClientRequest,
    ) -> BoxFuture<'a, Result<Vec<u8>, ReplicaFailure>>;
}

/// Forwards the request body and transport headers over HTTP POST.
///
/// Any response with a well-formed XML body counts as an answer, SOAP
/// faults included; everything else is a replica failure.
#[derive(Debug, Clone, Copy, Default)]
pub struct HttpTransport;

impl ReplicaTransport for HttpTransport {
    fn invoke<'a>(
        &'a self,
        replica: &'a ReplicaTarget,
        request: &'a ClientRequest,
    ) -> BoxFuture<'a, Result<Vec<u8>, ReplicaFailure>> {
        Box::pin(async move {
            let ep = Endpoint::parse(&replica.endpoint).map_err(|e| ReplicaFailure::Transport(e.to_string()))?;
            let ex = http::send(&ep, "POST", request.transport_headers(), request.envelope_bytes())
                .await
                .map_err(|e| ReplicaFailure::Transport(e.to_string()))?;
            let body = ex.response.body;
            if crate::canonical::canonicalize(&body).is_none() {
                return Err(ReplicaFailure::InvalidResponse(format!(
                    "status {} with a non-XML body",
                    ex.response.status
                )));
            }
            Ok(body)
        })
    }
}

/// Receives one outcome per replica whose invocation completed.
pub trait InvocationRecorder: Send + Sync {
    fn record(&self, service_id: &str, outcome: InvocationOutcome);
}

impl InvocationRecorder for SharedRegistry {
    fn record(&self, service_id: &str, outcome: InvocationOutcome) {
        if let Err(e) = self.record_invocation(service_id, outcome) {
            tracing::warn!("cannot record invocation: {e}");
        }
    }
}

#[derive(Debug, Default)]
pub struct NoopRecorder;

impl InvocationRecorder for NoopRecorder {
    fn record(&self, _: &str, _: InvocationOutcome) {}
}

/// Keeps every recorded outcome in memory.
#[derive(Debug, Default)]
pub struct MemoryRecorder(Mutex<Vec<(String, InvocationOutcome)>>);

impl MemoryRecorder {
    pub fn entries(&self) -> Vec<(String, InvocationOutcome)> {
        self.0.lock().unwrap().clone()
    }
}

impl InvocationRecorder for MemoryRecorder {
    fn record(&self, service_id: &str, outcome: InvocationOutcome) {
        self.0.lock().unwrap().push((service_id.to_string(), outcome));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responder {
    pub service_id: String,
    /// `None` for a failed invocation.
    pub class: Option<String>,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuorumResult {
    pub winner: Vec<u8>,
    pub winner_class: String,
    pub tally: BTreeMap<String, usize>,
    pub responders: Vec<Responder>,
    pub retries_used: usize,
    /// Number of votes tallied: `2f+1`, or more after vote extension.
    pub quorum_size: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuorumError {
    #[error("replica set has {got} members, expected 3f+1 = {expected}")]
    InvalidReplicaSet { got: usize, expected: usize },
    #[error("all replicas failed after {rounds} round(s)")]
    TotalFailure { rounds: usize, responders: Vec<Responder> },
    #[error("no majority among {} responses", tally.values().sum::<usize>())]
    NoMajority { tally: BTreeMap<String, usize>, responders: Vec<Responder> },
    #[error("only {got} of the {needed} responses needed for a vote")]
    InsufficientResponses { got: usize, needed: usize, tally: BTreeMap<String, usize>, responders: Vec<Responder> },
}

impl QuorumError {
    pub fn tally(&self) -> BTreeMap<String, usize> {
        match self {
            QuorumError::NoMajority { tally, .. } | QuorumError::InsufficientResponses { tally, .. } => tally.clone(),
            _ => BTreeMap::new(),
        }
    }
}

/// What the collector wants after an arrival.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Continue,
    Decided { class: String, index: usize, tally: BTreeMap<String, usize> },
    NoMajority { tally: BTreeMap<String, usize> },
    AllFailed,
    Insufficient { got: usize, tally: BTreeMap<String, usize> },
}

impl Step {
    pub fn is_final(&self) -> bool {
        !matches!(self, Step::Continue)
    }
}

/// Arrival-driven decision logic for one execution round, independent of
/// transport and timing. Feed arrivals in the order they complete.
#[derive(Debug, Clone)]
pub struct QuorumCollector {
    f: usize,
    replicas: usize,
    vote_extension: bool,
    classes: Vec<String>,
    failures: usize,
    finished: bool,
}

impl QuorumCollector {
    pub fn new(f: usize, vote_extension: bool) -> Self {
        QuorumCollector { f, replicas: 3 * f + 1, vote_extension, classes: Vec::new(), failures: 0, finished: false }
    }

    pub fn successes(&self) -> usize {
        self.classes.len()
    }

    /// `Some(class)` for a response, `None` for a failed replica.
    pub fn arrive(&mut self, class: Option<String>) -> Step {
        assert!(!self.finished, "arrival after the round was decided");
        match class {
            Some(c) => self.classes.push(c),
            None => self.failures += 1,
        }
        let done = self.classes.len() + self.failures;
        let step = if self.classes.len() > 2 * self.f {
            match vote_classes(&self.classes, self.f) {
                Vote::Winner { class, index, tally } => Step::Decided { class, index, tally },
                Vote::NoMajority { .. } if self.vote_extension && done < self.replicas => Step::Continue,
                Vote::NoMajority { tally } => Step::NoMajority { tally },
            }
        } else if done < self.replicas {
            Step::Continue
        } else if self.classes.is_empty() {
            Step::AllFailed
        } else {
            Step::Insufficient { got: self.classes.len(), tally: tally_of(&self.classes) }
        };
        self.finished = step.is_final();
        step
    }
}

fn tally_of(classes: &[String]) -> BTreeMap<String, usize> {
    let mut t = BTreeMap::new();
    for c in classes {
        *t.entry(c.clone()).or_default() += 1;
    }
    t
}

/// Invokes all replicas concurrently and returns the voted response.
///
/// Collection stops as soon as the vote is decided; invocations still in
/// flight are dropped, which closes their connections. A round in which
/// every replica fails is re-executed up to `max_reexecutions` times.
pub async fn invoke_quorum<T: ReplicaTransport + ?Sized>(
    transport: &T,
    replicas: &[ReplicaTarget],
    request: &ClientRequest,
    settings: &ReplicationSettings,
    recorder: &dyn InvocationRecorder,
) -> Result<QuorumResult, QuorumError> {
    let expected = 3 * settings.f + 1;
    if replicas.len() != expected {
        return Err(QuorumError::InvalidReplicaSet { got: replicas.len(), expected });
    }
    let mut round = 0;
    loop {
        match run_round(transport, replicas, request, settings, recorder).await {
            Err(QuorumError::TotalFailure { responders, .. }) if round < settings.max_reexecutions => {
                tracing::debug!(round, failed = responders.len(), "every replica failed; re-executing");
                round += 1;
            }
            Err(QuorumError::TotalFailure { responders, .. }) => {
                return Err(QuorumError::TotalFailure { rounds: round + 1, responders });
            }
            Ok(mut result) => {
                result.retries_used = round;
                return Ok(result);
            }
            Err(e) => return Err(e),
        }
    }
}

async fn run_round<T: ReplicaTransport + ?Sized>(
    transport: &T,
    replicas: &[ReplicaTarget],
    request: &ClientRequest,
    settings: &ReplicationSettings,
    recorder: &dyn InvocationRecorder,
) -> Result<QuorumResult, QuorumError> {
    let started = Instant::now();
    let mut in_flight: FuturesUnordered<_> = replicas
        .iter()
        .enumerate()
        .map(|(i, replica)| async move {
            let out = tokio::time::timeout(settings.per_replica_timeout, transport.invoke(replica, request))
                .await
                .unwrap_or(Err(ReplicaFailure::Timeout));
            (i, out)
        })
        .collect();

    let mut collector = QuorumCollector::new(settings.f, settings.vote_extension);
    let mut responders: Vec<Responder> = Vec::new();
    let mut bodies: Vec<Vec<u8>> = Vec::new();
    let mut step = Step::Continue;
    while let Some((i, out)) = in_flight.next().await {
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;
        let id = replicas[i].id.clone();
        let class = match out {
            Ok(body) => {
                let class = class_of(&body);
                bodies.push(body);
                responders.push(Responder { service_id: id, class: Some(class.clone()), latency_ms, error: None });
                Some(class)
            }
            Err(e) => {
                responders.push(Responder { service_id: id, class: None, latency_ms, error: Some(e.to_string()) });
                None
            }
        };
        step = collector.arrive(class);
        if step.is_final() {
            break;
        }
    }
    // cancel stragglers
    drop(in_flight);

    let winner_class = match &step {
        Step::Decided { class, .. } => Some(class.as_str()),
        _ => None,
    };
    for r in &responders {
        let ok = match (&r.class, winner_class) {
            (None, _) => false,
            (Some(c), Some(w)) => c == w,
            (Some(_), None) => true,
        };
        recorder.record(&r.service_id, if ok { InvocationOutcome::Success } else { InvocationOutcome::Failure });
    }

    match step {
        Step::Decided { class, index, tally } => Ok(QuorumResult {
            winner: bodies.swap_remove(index),
            winner_class: class,
            quorum_size: tally.values().sum(),
            tally,
            responders,
            retries_used: 0,
        }),
        Step::NoMajority { tally } => Err(QuorumError::NoMajority { tally, responders }),
        Step::Insufficient { got, tally } => {
            Err(QuorumError::InsufficientResponses { got, needed: 2 * settings.f + 1, tally, responders })
        }
        Step::AllFailed | Step::Continue => Err(QuorumError::TotalFailure { rounds: 1, responders }),
    }
}

/// Scripted in-process replica behaviour.
#[derive(Debug, Clone)]
pub enum SimReply {
    Respond(Vec<u8>),
    Fail,
}

/// In-memory transport whose replicas answer after a fixed delay. Under a
/// paused tokio clock the arrival order is exactly the delay order.
#[derive(Debug, Default)]
pub struct SimulatedTransport {
    replies: HashMap<String, Vec<(Duration, SimReply)>>,
    calls: Mutex<HashMap<String, usize>>,
}

impl SimulatedTransport {
    pub fn new() -> Self {
        SimulatedTransport::default()
    }

    /// Same behaviour for every round.
    pub fn replica(mut self, id: &str, delay: Duration, reply: SimReply) -> Self {
        self.replies.insert(id.to_string(), vec![(delay, reply)]);
        self
    }

    /// Behaviour per round; the last entry repeats.
    pub fn replica_rounds(mut self, id: &str, rounds: Vec<(Duration, SimReply)>) -> Self {
        self.replies.insert(id.to_string(), rounds);
        self
    }

    pub fn calls(&self, id: &str) -> usize {
        self.calls.lock().unwrap().get(id).copied().unwrap_or(0)
    }
}

impl ReplicaTransport for SimulatedTransport {
    fn invoke<'a>(
        &'a self,
        replica: &'a ReplicaTarget,
        _request: &'a ClientRequest,
    ) -> BoxFuture<'a, Result<Vec<u8>, ReplicaFailure>> {
        let call = {
            let mut calls = self.calls.lock().unwrap();
            let n = calls.entry(replica.id.clone()).or_default();
            *n += 1;
            *n - 1
        };
        let script = self.replies.get(&replica.id).cloned().unwrap_or_default();
        Box::pin(async move {
            let Some((delay, reply)) = script.get(call).or(script.last()).cloned() else {
                return Err(ReplicaFailure::Transport("unknown replica".into()));
            };
            tokio::time::sleep(delay).await;
            match reply {
                SimReply::Respond(b) => Ok(b),
                SimReply::Fail => Err(ReplicaFailure::Transport("simulated crash".into())),
            }
        })
    }
}
