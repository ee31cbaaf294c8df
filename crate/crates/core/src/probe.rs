//! Black-box penetration probes.
//!
//! DoS vectors are judged by timing: a benign test-probe stream runs while
//! parallel attack streams send tampered requests, and the ratio of the two
//! medians is compared with a neutrality band. Semantic vectors are judged
//! by looking for a marker in the response to a crafted request.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, LazyLock, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{self, AttackError, AttackPayload, AttackVector};
use crate::http::{self, Endpoint, HttpError};
use crate::registry::{LoggedVerdict, SharedRegistry, VulnerabilityLogEntry};
use crate::soap;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("probe aborted: {0}")]
    Aborted(String),
    #[error("probe invalid: {0}")]
    Invalid(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("a probe against {0} is already running")]
    Busy(String),
    #[error("vector {0} is not handled by this probe")]
    UnsupportedVector(AttackVector),
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub parallel_attack_streams: usize,
    pub requests_per_stream: usize,
    #[serde(with = "crate::durations::ms")]
    pub test_probe_interval: Duration,
    #[serde(with = "crate::durations::ms")]
    pub attack_request_interval: Duration,
    #[serde(with = "crate::durations::ms")]
    pub server_recovery_time: Duration,
    #[serde(with = "crate::durations::ms")]
    pub stop_after_last_tampered: Duration,
    pub coercive_depth: usize,
    pub oversize_bytes: usize,
    pub collision_key_count: usize,
    pub median_window: usize,
    /// Ratios inside `[lower, upper]` are neutral.
    pub neutrality_band: (f64, f64),
    #[serde(with = "crate::durations::ms")]
    pub request_timeout: Duration,
    /// Probe obfuscation by wrapping the coercive payload in an opaque region.
    pub probe_wrapped_obfuscation: bool,
}

impl Default for ProbeSettings {
    /// Reference probe timings at full length.
    fn default() -> Self {
        ProbeSettings {
            parallel_attack_streams: 2,
            requests_per_stream: 4,
            test_probe_interval: Duration::from_millis(500),
            attack_request_interval: Duration::from_millis(750),
            server_recovery_time: Duration::from_secs(4),
            stop_after_last_tampered: Duration::from_secs(5),
            coercive_depth: 75_000,
            oversize_bytes: 2 * 1024 * 1024,
            collision_key_count: 1000,
            median_window: 10,
            neutrality_band: (0.5, 2.0),
            request_timeout: Duration::from_secs(30),
            probe_wrapped_obfuscation: false,
        }
    }
}

pub const DEFAULT_SCALE: u32 = 10;

impl ProbeSettings {
    /// Default settings with every schedule duration divided by `factor`.
    /// The per-request timeout is not scaled.
    pub fn scaled(factor: u32) -> Self {
        ProbeSettings::default().with_scale(factor)
    }

    pub fn with_scale(mut self, factor: u32) -> Self {
        let k = factor.max(1);
        self.test_probe_interval /= k;
        self.attack_request_interval /= k;
        self.server_recovery_time /= k;
        self.stop_after_last_tampered /= k;
        self
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        let bad = |m: &str| Err(ProbeError::InvalidSettings(m.to_string()));
        if self.parallel_attack_streams == 0
            || self.requests_per_stream == 0
            || self.coercive_depth == 0
            || self.collision_key_count < 2
            || self.median_window == 0
        {
            return bad("counts must be at least 1 (collision keys at least 2)");
        }
        if [
            self.test_probe_interval,
            self.attack_request_interval,
            self.server_recovery_time,
            self.stop_after_last_tampered,
            self.request_timeout,
        ]
        .iter()
        .any(Duration::is_zero)
        {
            return bad("durations must be positive");
        }
        let (lo, hi) = self.neutrality_band;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= 1.0 && 1.0 <= hi) {
            return bad("neutrality band must satisfy 0 < lower <= 1 <= upper");
        }
        if self.oversize_bytes < attack::minimal_envelope_len() {
            return bad("oversize_bytes is below the minimal envelope size");
        }
        Ok(())
    }

    /// Stable fingerprint written next to every report line.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("settings serialize");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeVerdict {
    Vulnerable,
    NotVulnerable,
}

impl ProbeVerdict {
    /// Report encoding: 100 for vulnerable, 1 for not.
    pub fn percentage(self) -> u8 {
        match self {
            ProbeVerdict::Vulnerable => 100,
            ProbeVerdict::NotVulnerable => 1,
        }
    }
}

impl From<ProbeVerdict> for LoggedVerdict {
    fn from(v: ProbeVerdict) -> Self {
        match v {
            ProbeVerdict::Vulnerable => LoggedVerdict::Vulnerable,
            ProbeVerdict::NotVulnerable => LoggedVerdict::NotVulnerable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub vector: AttackVector,
    pub verdict: ProbeVerdict,
    pub percentage_encoding: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_tampered_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_untampered_ms: Option<f64>,
    pub tampered_samples: usize,
    pub untampered_samples: usize,
    #[serde(default)]
    pub failed_requests: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
}

impl ProbeOutcome {
    fn semantic(vector: AttackVector, verdict: ProbeVerdict, evidence: String) -> Self {
        ProbeOutcome {
            vector,
            verdict,
            percentage_encoding: verdict.percentage(),
            ratio: None,
            median_tampered_ms: None,
            median_untampered_ms: None,
            tampered_samples: 1,
            untampered_samples: 1,
            failed_requests: 0,
            evidence: Some(evidence),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Tampered,
    Untampered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleOutcome {
    Responded,
    TimedOut,
    ConnectionError,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingSample {
    pub kind: SampleKind,
    /// Present iff the outcome is `Responded`.
    pub response_time: Option<Duration>,
    pub sent_at: Instant,
    pub completed_at: Instant,
    pub outcome: SampleOutcome,
}

impl TimingSample {
    pub fn ms(&self) -> Option<f64> {
        self.response_time.map(|d| d.as_secs_f64() * 1e3)
    }
}

/// Middle order statistic, or the mean of the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Median of the last `min(window, len)` values.
pub fn windowed_median(values: &[f64], window: usize) -> Option<f64> {
    median(&values[values.len().saturating_sub(window)..])
}

/// Timing verdict; `None` ratio means the tampered side never answered.
pub fn timing_verdict(ratio: Option<f64>, any_failure: bool, band: (f64, f64)) -> ProbeVerdict {
    let outside = ratio.is_none_or(|r| r < band.0 || r > band.1);
    if any_failure || outside { ProbeVerdict::Vulnerable } else { ProbeVerdict::NotVulnerable }
}

/// Reduces a completed schedule to an outcome.
///
/// Untampered samples count only if they completed after the first tampered
/// request was sent. Samples are in completion order.
pub fn evaluate_samples(
    vector: AttackVector,
    samples: &[TimingSample],
    settings: &ProbeSettings,
) -> Result<ProbeOutcome, ProbeError> {
    let first_attack = samples
        .iter()
        .filter(|s| s.kind == SampleKind::Tampered)
        .map(|s| s.sent_at)
        .min()
        .ok_or_else(|| ProbeError::Invalid("no tampered request was sent".into()))?;
    let tampered: Vec<&TimingSample> = samples.iter().filter(|s| s.kind == SampleKind::Tampered).collect();
    let untampered: Vec<&TimingSample> =
        samples.iter().filter(|s| s.kind == SampleKind::Untampered && s.completed_at >= first_attack).collect();
    let failed = tampered.iter().chain(untampered.iter()).filter(|s| s.outcome != SampleOutcome::Responded).count();
    let t_ms: Vec<f64> = tampered.iter().filter_map(|s| s.ms()).collect();
    let u_ms: Vec<f64> = untampered.iter().filter_map(|s| s.ms()).collect();
    if u_ms.is_empty() && failed == 0 {
        return Err(ProbeError::Invalid("no untampered request responded during the attack".into()));
    }
    let med_t = windowed_median(&t_ms, settings.median_window);
    let med_u = windowed_median(&u_ms, settings.median_window);
    let ratio = match (med_t, med_u) {
        (Some(t), Some(u)) if u > 0.0 => Some(t / u),
        _ => None,
    };
    let verdict = timing_verdict(ratio, failed > 0, settings.neutrality_band);
    Ok(ProbeOutcome {
        vector,
        verdict,
        percentage_encoding: verdict.percentage(),
        ratio,
        median_tampered_ms: med_t,
        median_untampered_ms: med_u,
        tampered_samples: t_ms.len().min(settings.median_window),
        untampered_samples: u_ms.len().min(settings.median_window),
        failed_requests: failed,
        evidence: (failed > 0).then(|| format!("{failed} request(s) timed out or lost the connection")),
    })
}

static BUSY: LazyLock<Mutex<HashSet<String>>> = LazyLock::new(Default::default);

/// Marks an endpoint as under probe until dropped.
struct BusyGuard(String);

impl BusyGuard {
    fn acquire(endpoint: &Endpoint) -> Result<Self, ProbeError> {
        let key = endpoint.authority();
        if !BUSY.lock().unwrap().insert(key.clone()) {
            return Err(ProbeError::Busy(key));
        }
        Ok(BusyGuard(key))
    }
}

impl Drop for BusyGuard {
    fn drop(&mut self) {
        BUSY.lock().unwrap().remove(&self.0);
    }
}

/// One timed POST.
async fn timed_post(
    endpoint: &Endpoint,
    kind: SampleKind,
    headers: &[(String, String)],
    body: &[u8],
    timeout: Duration,
) -> TimingSample {
    let started = Instant::now();
    let (response_time, outcome, sent_at) =
        match http::send_with_timeout(endpoint, "POST", headers, body, timeout).await {
            Some(Ok(ex)) => (Some(ex.response_time), SampleOutcome::Responded, ex.request_sent_at),
            Some(Err(_)) => (None, SampleOutcome::ConnectionError, started),
            None => (None, SampleOutcome::TimedOut, started),
        };
    TimingSample { kind, response_time, sent_at, completed_at: Instant::now(), outcome }
}

async fn warm_up(endpoint: &Endpoint, settings: &ProbeSettings) -> Result<Vec<u8>, ProbeError> {
    match http::send_with_timeout(endpoint, "POST", &[], soap::benign_request().as_bytes(), settings.request_timeout)
        .await
    {
        Some(Ok(ex)) => Ok(ex.response.body),
        Some(Err(e)) => Err(ProbeError::Aborted(format!("{} unreachable: {e}", endpoint.authority()))),
        None => Err(ProbeError::Aborted(format!("{} did not answer the warm-up request", endpoint.authority()))),
    }
}

/// The tampered payload a timing probe sends for `vector`.
pub fn dos_payload(vector: AttackVector, settings: &ProbeSettings) -> Result<AttackPayload, ProbeError> {
    match vector {
        AttackVector::CoerciveParsing | AttackVector::OversizePayload | AttackVector::HashCollision => {
            Ok(attack::payload_for(
                vector,
                settings.coercive_depth,
                settings.oversize_bytes,
                settings.collision_key_count,
            )?)
        }
        AttackVector::AttackObfuscation => {
            Ok(attack::wrap_obfuscated(&attack::generate_coercive_payload(settings.coercive_depth)?))
        }
        other => Err(ProbeError::UnsupportedVector(other)),
    }
}

/// Timing probe for a DoS vector (or obfuscation, as a wrapped coercive payload).
pub async fn run_dos_probe(
    endpoint: &str,
    vector: AttackVector,
    settings: &ProbeSettings,
) -> Result<ProbeOutcome, ProbeError> {
    settings.validate()?;
    let payload = dos_payload(vector, settings)?;
    let ep = Endpoint::parse(endpoint).map_err(|e| ProbeError::Aborted(e.to_string()))?;
    let _guard = BusyGuard::acquire(&ep)?;
    warm_up(&ep, settings).await?;
    tokio::time::sleep(settings.server_recovery_time).await;
    let samples = run_schedule(&ep, &payload, settings).await;
    evaluate_samples(vector, &samples, settings)
}

/// Runs the overlapped untampered / tampered schedule and returns every
/// sample in completion order.
pub async fn run_schedule(endpoint: &Endpoint, payload: &AttackPayload, settings: &ProbeSettings) -> Vec<TimingSample> {
    let collector: Arc<Mutex<Vec<TimingSample>>> = Arc::default();
    let (stop_tx, mut stop_rx) = tokio::sync::watch::channel(false);
    let benign = soap::benign_request().into_bytes();

    let untampered = {
        let collector = collector.clone();
        let endpoint = endpoint.clone();
        let settings = settings.clone();
        tokio::spawn(async move {
            let mut ticks = tokio::time::interval(settings.test_probe_interval);
            ticks.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                tokio::select! {
                    _ = ticks.tick() => {}
                    _ = stop_rx.changed() => break,
                }
                if *stop_rx.borrow() {
                    break;
                }
                let s = timed_post(&endpoint, SampleKind::Untampered, &[], &benign, settings.request_timeout).await;
                collector.lock().unwrap().push(s);
            }
        })
    };

    // streams are spread evenly over one interval rather than fired together
    let stagger = settings.attack_request_interval / settings.parallel_attack_streams.max(1) as u32;
    let attacks: Vec<_> = (0..settings.parallel_attack_streams)
        .map(|k| {
            let collector = collector.clone();
            let endpoint = endpoint.clone();
            let settings = settings.clone();
            let payload = payload.clone();
            let start = tokio::time::Instant::now() + stagger * k as u32;
            tokio::spawn(async move {
                let mut ticks = tokio::time::interval_at(start, settings.attack_request_interval);
                ticks.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
                for _ in 0..settings.requests_per_stream {
                    ticks.tick().await;
                    let s = timed_post(
                        &endpoint,
                        SampleKind::Tampered,
                        &payload.transport_headers,
                        &payload.envelope_bytes,
                        settings.request_timeout,
                    )
                    .await;
                    collector.lock().unwrap().push(s);
                }
            })
        })
        .collect();
    for a in attacks {
        let _ = a.await;
    }
    tokio::time::sleep(settings.stop_after_last_tampered).await;
    let _ = stop_tx.send(true);
    let _ = untampered.await;

    let mut guard = collector.lock().unwrap();
    std::mem::take(&mut *guard)
}

/// Operations the service lists at `?wsdl`, one per line.
pub async fn discover_operations(endpoint: &Endpoint, timeout: Duration) -> Result<Vec<String>, ProbeError> {
    let path = format!("{}?wsdl", endpoint.path.split('?').next().unwrap_or("/"));
    let ex = match http::send_with_timeout(&endpoint.with_path(&path), "GET", &[], &[], timeout).await {
        Some(Ok(ex)) => ex,
        Some(Err(e)) => return Err(ProbeError::Aborted(e.to_string())),
        None => return Err(ProbeError::Aborted("operation listing timed out".into())),
    };
    if ex.response.status != 200 {
        return Err(ProbeError::Precondition(format!("operation listing returned status {}", ex.response.status)));
    }
    Ok(parse_operation_list(&ex.response.body))
}

/// Extracts `name` attributes of `operation` elements.
pub fn parse_operation_list(body: &[u8]) -> Vec<String> {
    use quick_xml::events::Event;
    let mut reader = quick_xml::Reader::from_reader(body);
    let mut ops = Vec::new();
    loop {
        match reader.read_event() {
            Ok(Event::Start(e)) | Ok(Event::Empty(e)) if e.local_name().as_ref() == b"operation" => {
                if let Ok(Some(a)) = e.try_get_attribute("name") {
                    if let Ok(v) = a.unescape_value() {
                        ops.push(v.into_owned());
                    }
                }
            }
            Ok(Event::Eof) | Err(_) => break,
            _ => {}
        }
    }
    ops
}

/// Marker-based probe for spoofing and injection.
pub async fn run_semantic_probe(
    endpoint: &str,
    vector: AttackVector,
    settings: &ProbeSettings,
) -> Result<ProbeOutcome, ProbeError> {
    if !vector.is_semantic() {
        return Err(ProbeError::UnsupportedVector(vector));
    }
    let ep = Endpoint::parse(endpoint).map_err(|e| ProbeError::Aborted(e.to_string()))?;
    let _guard = BusyGuard::acquire(&ep)?;
    warm_up(&ep, settings).await?;
    let payload = match vector {
        AttackVector::SoapActionSpoofing => {
            let ops = discover_operations(&ep, settings.request_timeout).await?;
            if ops.len() < 2 {
                return Err(ProbeError::Precondition(format!(
                    "service exposes {} operation(s); spoofing needs at least 2",
                    ops.len()
                )));
            }
            let body_op = if ops.iter().any(|o| o == soap::OP_GET_QUOTE) { soap::OP_GET_QUOTE } else { &ops[0] };
            let header_op = ops.iter().find(|o| *o != body_op).expect("two distinct operations");
            attack::generate_spoofed_action(body_op, header_op)?
        }
        _ => attack::generate_xml_injection(soap::benign_request().as_bytes(), "symbol")?,
    };
    let marker = payload.expected_marker.clone().unwrap_or_default();
    let response = match http::send_with_timeout(
        &ep,
        "POST",
        &payload.transport_headers,
        &payload.envelope_bytes,
        settings.request_timeout,
    )
    .await
    {
        Some(Ok(ex)) => ex.response,
        Some(Err(e)) => return Err(ProbeError::Aborted(e.to_string())),
        None => return Err(ProbeError::Aborted("crafted request timed out".into())),
    };
    let hit = soap::find(&response.body, marker.as_bytes()).is_some();
    let verdict = if hit { ProbeVerdict::Vulnerable } else { ProbeVerdict::NotVulnerable };
    let evidence = if hit {
        format!("response (status {}) contains `{marker}`", response.status)
    } else {
        format!("response (status {}) does not contain `{marker}`", response.status)
    };
    Ok(ProbeOutcome::semantic(vector, verdict, evidence))
}

/// Dispatches to the timing or marker probe.
pub async fn probe(endpoint: &str, vector: AttackVector, settings: &ProbeSettings) -> Result<ProbeOutcome, ProbeError> {
    if vector.is_semantic() {
        run_semantic_probe(endpoint, vector, settings).await
    } else {
        run_dos_probe(endpoint, vector, settings).await
    }
}

/// Probes every registered service for every vector, one at a time, and
/// applies the verdicts to the registry. Aborted probes become `Untested`.
pub async fn pentest_all(
    registry: &SharedRegistry,
    settings: &ProbeSettings,
    vectors: &[AttackVector],
) -> Result<Vec<VulnerabilityLogEntry>, ProbeError> {
    settings.validate()?;
    let services = registry.snapshot().services().to_vec();
    if services.is_empty() {
        return Err(ProbeError::Precondition("registry has no services".into()));
    }
    let mut entries = Vec::new();
    for service in &services {
        let mut first = true;
        for &vector in vectors {
            if vector == AttackVector::AttackObfuscation && !settings.probe_wrapped_obfuscation {
                entries.push(VulnerabilityLogEntry {
                    service_id: service.id.clone(),
                    vector,
                    verdict: LoggedVerdict::NotProbeable,
                    outcome: None,
                    note: Some("obfuscation has no direct probe; enable the wrapped probe to test it".into()),
                });
                continue;
            }
            if !first {
                tokio::time::sleep(settings.server_recovery_time).await;
            }
            first = false;
            let entry = match probe(&service.endpoint, vector, settings).await {
                Ok(outcome) => VulnerabilityLogEntry {
                    service_id: service.id.clone(),
                    vector,
                    verdict: outcome.verdict.into(),
                    note: outcome.evidence.clone(),
                    outcome: Some(outcome),
                },
                Err(e) => {
                    tracing::warn!(service = %service.id, %vector, "probe not completed: {e}");
                    VulnerabilityLogEntry {
                        service_id: service.id.clone(),
                        vector,
                        verdict: LoggedVerdict::Untested,
                        outcome: None,
                        note: Some(e.to_string()),
                    }
                }
            };
            entries.push(entry);
        }
    }
    let report = registry.apply_probe_results(&entries);
    for (id, why) in &report.rejected {
        tracing::warn!("probe result for {id} rejected: {why}");
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    #[serde(flatten)]
    pub entry: VulnerabilityLogEntry,
    pub settings_hash: String,
}

/// Writes one JSON object per line.
pub fn write_report(path: &Path, entries: &[VulnerabilityLogEntry], settings: &ProbeSettings) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let hash = settings.fingerprint();
    for entry in entries {
        let line = ReportLine { entry: entry.clone(), settings_hash: hash.clone() };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_report(path: &Path) -> std::io::Result<Vec<VulnerabilityLogEntry>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReportLine = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        entries.push(parsed.entry);
    }
    Ok(entries)
}

impl From<HttpError> for ProbeError {
    fn from(e: HttpError) -> Self {
        ProbeError::Aborted(e.to_string())
    }
}
