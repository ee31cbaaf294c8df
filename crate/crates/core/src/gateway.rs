//! The composite service: scan → select → quorum invocation per request.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::attack::AttackVector;
use crate::http::{self, HttpResponse};
use crate::quorum::{self, HttpTransport, QuorumError, ReplicaTarget, ReplicationSettings, Responder};
use crate::registry::{SelectionPolicy, SharedRegistry};
use crate::scanner::{self, ClientRequest, ScannerThresholds};
use crate::selector::{self, SelectionError};

pub const DEFAULT_FUNCTIONALITY: &str = "stock-purchase";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("registry has no services")]
    EmptyRegistry,
    #[error(
        "functionality `{functionality}` has {available} candidate(s) but f = {f} needs {needed}; register {} more or lower f",
        needed - available
    )]
    InsufficientDiversity { functionality: String, f: usize, needed: usize, available: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("decision log {path}: {source}")]
    DecisionLog { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub policy: SelectionPolicy,
    pub thresholds: ScannerThresholds,
    pub replication: ReplicationSettings,
    pub decision_log: Option<PathBuf>,
    pub default_functionality: String,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 0)),
            policy: SelectionPolicy::default(),
            thresholds: ScannerThresholds::default(),
            replication: ReplicationSettings::default(),
            decision_log: None,
            default_functionality: DEFAULT_FUNCTIONALITY.to_string(),
        }
    }
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub timestamp_ms: u128,
    pub request_id: String,
    pub functionality: String,
    pub threat: Vec<AttackVector>,
    pub chosen: Vec<String>,
    pub backfilled: Vec<(String, Vec<AttackVector>)>,
    pub tally: BTreeMap<String, usize>,
    pub winner_class: Option<String>,
    pub status: u16,
    pub latency_ms: f64,
    pub retries: usize,
    pub responders: Vec<Responder>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Shared {
    config: GatewayConfig,
    registry: SharedRegistry,
    log: Option<Mutex<File>>,
    decisions: Mutex<Vec<Decision>>,
    sequence: AtomicU64,
    prefix: u32,
}

impl Shared {
    fn record(&self, d: Decision) {
        if let Some(log) = &self.log {
            let mut line = serde_json::to_vec(&d).expect("decision serializes");
            line.push(b'\n');
            if let Err(e) = log.lock().unwrap().write_all(&line) {
                tracing::warn!("decision log write failed: {e}");
            }
        }
        self.decisions.lock().unwrap().push(d);
    }
}

/// A running gateway. Dropping the handle stops it.
pub struct GatewayHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: watch::Sender<bool>,
    task: Option<JoinHandle<()>>,
}

impl GatewayHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// URL clients post to for `functionality`.
    pub fn endpoint(&self, functionality: &str) -> String {
        if functionality == self.shared.config.default_functionality {
            format!("http://{}/", self.addr)
        } else {
            format!("http://{}/{functionality}", self.addr)
        }
    }

    /// Decisions made so far, oldest first.
    pub fn decisions(&self) -> Vec<Decision> {
        self.shared.decisions.lock().unwrap().clone()
    }

    pub fn registry(&self) -> &SharedRegistry {
        &self.shared.registry
    }

    pub async fn shutdown(mut self) {
        let _ = self.stop.send(true);
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    /// Runs until the gateway is stopped.
    pub async fn wait(mut self) {
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        let _ = self.stop.send(true);
        if let Some(task) = self.task.take() {
            task.abort();
        }
    }
}

/// Checks that every advertised functionality can field `3f+1` replicas.
pub fn check_diversity(registry: &SharedRegistry, policy: &SelectionPolicy) -> Result<(), GatewayError> {
    let snapshot = registry.snapshot();
    if snapshot.is_empty() {
        return Err(GatewayError::EmptyRegistry);
    }
    let needed = policy.replicas();
    for functionality in snapshot.functionalities() {
        let available = snapshot.candidates(&functionality).len();
        if available < needed {
            return Err(GatewayError::InsufficientDiversity { functionality, f: policy.f, needed, available });
        }
    }
    Ok(())
}

pub async fn serve(config: GatewayConfig, registry: SharedRegistry) -> Result<GatewayHandle, GatewayError> {
    config.policy.validate().map_err(GatewayError::Config)?;
    config.thresholds.validate().map_err(GatewayError::Config)?;
    config.replication.validate().map_err(GatewayError::Config)?;
    if config.policy.f != config.replication.f {
        return Err(GatewayError::Config(format!(
            "selection f = {} but replication f = {}",
            config.policy.f, config.replication.f
        )));
    }
    check_diversity(&registry, &config.policy)?;
    let log = match &config.decision_log {
        Some(path) => Some(Mutex::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| GatewayError::DecisionLog { path: path.clone(), source })?,
        )),
        None => None,
    };
    let listener =
        TcpListener::bind(config.listen).await.map_err(|source| GatewayError::Bind { addr: config.listen, source })?;
    let addr = listener.local_addr().map_err(|source| GatewayError::Bind { addr: config.listen, source })?;
    let shared = Arc::new(Shared {
        config,
        registry,
        log,
        decisions: Mutex::new(Vec::new()),
        sequence: AtomicU64::new(0),
        prefix: rand::random(),
    });
    let (stop, mut stop_rx) = watch::channel(false);
    let task = {
        let shared = shared.clone();
        tokio::spawn(async move {
            loop {
                tokio::select! {
                    accepted = listener.accept() => {
                        if let Ok((stream, _)) = accepted {
                            tokio::spawn(handle_connection(shared.clone(), stream));
                        }
                    }
                    _ = stop_rx.changed() => break,
                }
            }
        })
    };
    tracing::info!(%addr, "gateway listening");
    Ok(GatewayHandle { addr, shared, stop, task: Some(task) })
}

async fn handle_connection(shared: Arc<Shared>, mut stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let request = match http::read_request(&mut stream).await {
        Ok(Some(r)) => r,
        Ok(None) => return,
        Err(e) => {
            let _ = http::write_response(&mut stream, &HttpResponse::text(400, e.to_string())).await;
            return;
        }
    };
    if request.method != "POST" {
        let _ = http::write_response(&mut stream, &HttpResponse::text(405, "POST an envelope")).await;
        return;
    }
    let functionality = match request.path().trim_matches('/') {
        "" => shared.config.default_functionality.clone(),
        label => label.to_string(),
    };
    let work = process(&shared, functionality, request.body, request.headers);
    tokio::select! {
        response = work => {
            let _ = http::write_response(&mut stream, &response).await;
        }
        _ = http::peer_closed(&mut stream) => {
            tracing::debug!("client left before the vote; fan-out cancelled");
        }
    }
}

/// Runs one request through the pipeline and returns the client response.
async fn process(
    shared: &Shared,
    functionality: String,
    body: Vec<u8>,
    headers: Vec<(String, String)>,
) -> HttpResponse {
    let started = Instant::now();
    let n = shared.sequence.fetch_add(1, Ordering::Relaxed);
    let request_id = format!("{:08x}-{n}", shared.prefix);
    let mut decision = Decision {
        timestamp_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
        request_id: request_id.clone(),
        functionality: functionality.clone(),
        threat: Vec::new(),
        chosen: Vec::new(),
        backfilled: Vec::new(),
        tally: BTreeMap::new(),
        winner_class: None,
        status: 0,
        latency_ms: 0.0,
        retries: 0,
        responders: Vec::new(),
        error: None,
    };
    let response = pipeline(shared, &functionality, body, headers, &mut decision).await;
    decision.status = response.status;
    decision.latency_ms = started.elapsed().as_secs_f64() * 1e3;
    shared.record(decision);
    let mut response = response;
    response.headers.push(("X-Request-Id".into(), request_id));
    response
}

async fn pipeline(
    shared: &Shared,
    functionality: &str,
    body: Vec<u8>,
    headers: Vec<(String, String)>,
    decision: &mut Decision,
) -> HttpResponse {
    let request = match ClientRequest::new(body, headers) {
        Ok(r) => r,
        Err(e) => {
            decision.error = Some(e.to_string());
            return HttpResponse::text(400, e.to_string());
        }
    };
    let threat = scanner::scan(&request, &shared.config.thresholds);
    decision.threat = threat.vectors.iter().copied().collect();

    let candidates = shared.registry.candidates(functionality);
    if candidates.is_empty() {
        decision.error = Some(format!("unknown functionality `{functionality}`"));
        return HttpResponse::text(404, format!("no services offer `{functionality}`"));
    }
    let selection = match selector::select(&candidates, &threat, &shared.config.policy) {
        Ok(s) => s,
        Err(e @ SelectionError::InsufficientDiversity { .. }) => {
            decision.error = Some(e.to_string());
            return HttpResponse::text(503, e.to_string());
        }
        Err(e) => {
            decision.error = Some(e.to_string());
            return HttpResponse::text(500, e.to_string());
        }
    };
    decision.chosen = selection.chosen.clone();
    decision.backfilled = selection.backfilled.clone();
    let targets: Vec<ReplicaTarget> = selection
        .chosen
        .iter()
        .map(|id| {
            let endpoint = candidates.iter().find(|c| &c.id == id).expect("chosen from candidates").endpoint.clone();
            ReplicaTarget { id: id.clone(), endpoint }
        })
        .collect();

    let outcome =
        quorum::invoke_quorum(&HttpTransport, &targets, &request, &shared.config.replication, &shared.registry).await;
    match outcome {
        Ok(result) => {
            decision.tally = result.tally;
            decision.winner_class = Some(result.winner_class);
            decision.retries = result.retries_used;
            decision.responders = result.responders;
            HttpResponse::xml(200, result.winner)
        }
        Err(e) => {
            decision.tally = e.tally();
            decision.error = Some(e.to_string());
            let status = match &e {
                QuorumError::NoMajority { responders, .. } => {
                    decision.responders = responders.clone();
                    409
                }
                QuorumError::TotalFailure { rounds, responders } => {
                    decision.retries = rounds.saturating_sub(1);
                    decision.responders = responders.clone();
                    502
                }
                QuorumError::InsufficientResponses { responders, .. } => {
                    decision.responders = responders.clone();
                    502
                }
                QuorumError::InvalidReplicaSet { .. } => 500,
            };
            HttpResponse::text(status, e.to_string())
        }
    }
}
