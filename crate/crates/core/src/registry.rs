//! Candidate services, their failure-rate log and their vulnerability log.
//!
//! The failure-rate estimate blends the SLA-stated rate with observed
//! outcomes as a pseudo-count prior:
//!
//! ```text
//! effective = (failures + sla_failure_rate * w) / (invocations + w)
//! ```
//!
//! so a fresh service reports exactly its SLA rate and the estimate drifts
//! toward `failures / invocations` as evidence accumulates.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackVector;
use crate::probe::ProbeOutcome;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("service `{0}` is already registered")]
    Conflict(String),
    #[error("service `{0}` is not registered")]
    NotFound(String),
    #[error("invalid service record: {0}")]
    Validation(String),
    #[error("registry file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("registry file {path} does not parse: {message}")]
    Parse { path: String, message: String },
}

/// Per-vector verdict held in the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Verdict {
    Vulnerable,
    NotVulnerable,
    #[default]
    Untested,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InvocationOutcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRecord {
    pub id: String,
    pub endpoint: String,
    pub functionality: String,
    #[serde(default)]
    pub framework_label: String,
    #[serde(default)]
    pub sla_failure_rate: f64,
    #[serde(default)]
    pub invocations: u64,
    #[serde(default)]
    pub failures: u64,
    #[serde(default)]
    pub vulnerabilities: BTreeMap<AttackVector, Verdict>,
}

impl ServiceRecord {
    pub fn new(id: &str, endpoint: &str, functionality: &str) -> Self {
        ServiceRecord {
            id: id.to_string(),
            endpoint: endpoint.to_string(),
            functionality: functionality.to_string(),
            framework_label: String::new(),
            sla_failure_rate: 0.0,
            invocations: 0,
            failures: 0,
            vulnerabilities: BTreeMap::new(),
        }
    }

    pub fn with_sla(mut self, rate: f64) -> Self {
        self.sla_failure_rate = rate;
        self
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.framework_label = label.to_string();
        self
    }

    pub fn with_verdict(mut self, vector: AttackVector, verdict: Verdict) -> Self {
        self.vulnerabilities.insert(vector, verdict);
        self
    }

    pub fn verdict(&self, vector: AttackVector) -> Verdict {
        self.vulnerabilities.get(&vector).copied().unwrap_or_default()
    }

    pub fn effective_failure_rate(&self, prior_weight: f64) -> f64 {
        let denom = self.invocations as f64 + prior_weight;
        if denom <= 0.0 {
            return self.sla_failure_rate;
        }
        (self.failures as f64 + self.sla_failure_rate * prior_weight) / denom
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        if self.id.trim().is_empty() {
            return Err(RegistryError::Validation("id must not be empty".into()));
        }
        validate_endpoint(&self.endpoint)?;
        if !(0.0..=1.0).contains(&self.sla_failure_rate) {
            return Err(RegistryError::Validation(format!(
                "{}: sla_failure_rate {} is outside [0, 1]",
                self.id, self.sla_failure_rate
            )));
        }
        if self.failures > self.invocations {
            return Err(RegistryError::Validation(format!(
                "{}: failures ({}) exceed invocations ({})",
                self.id, self.failures, self.invocations
            )));
        }
        Ok(())
    }
}

pub fn validate_endpoint(endpoint: &str) -> Result<url::Url, RegistryError> {
    if endpoint.trim().is_empty() {
        return Err(RegistryError::Validation("endpoint must not be empty".into()));
    }
    let url =
        url::Url::parse(endpoint).map_err(|e| RegistryError::Validation(format!("endpoint `{endpoint}`: {e}")))?;
    if url.scheme() != "http" || url.host().is_none() {
        return Err(RegistryError::Validation(format!("endpoint `{endpoint}` must be an http:// address with a host")));
    }
    Ok(url)
}

/// Verdict as written by the probe harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoggedVerdict {
    Vulnerable,
    NotVulnerable,
    Untested,
    NotProbeable,
}

impl LoggedVerdict {
    /// The registry verdict this entry overwrites with, if any.
    pub fn as_verdict(self) -> Option<Verdict> {
        match self {
            LoggedVerdict::Vulnerable => Some(Verdict::Vulnerable),
            LoggedVerdict::NotVulnerable => Some(Verdict::NotVulnerable),
            LoggedVerdict::Untested | LoggedVerdict::NotProbeable => None,
        }
    }
}

/// One (service, vector) result of a penetration-test run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityLogEntry {
    pub service_id: String,
    pub vector: AttackVector,
    pub verdict: LoggedVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ProbeOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ApplyReport {
    pub applied: usize,
    pub rejected: Vec<(String, String)>,
}

/// Selection knobs owned by the system operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    /// Number of faulty replicas to tolerate.
    pub f: usize,
    /// Most important to avoid first.
    pub vulnerability_priority: Vec<AttackVector>,
    pub sla_prior_weight: f64,
    pub untested_is_clean: bool,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            f: 1,
            vulnerability_priority: AttackVector::ALL.to_vec(),
            sla_prior_weight: 10.0,
            untested_is_clean: true,
        }
    }
}

impl SelectionPolicy {
    pub fn with_f(mut self, f: usize) -> Self {
        self.f = f;
        self
    }

    pub fn replicas(&self) -> usize {
        3 * self.f + 1
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut sorted = self.vulnerability_priority.clone();
        sorted.sort();
        if sorted != AttackVector::ALL {
            return Err("vulnerability_priority must list each attack vector exactly once".into());
        }
        if !(self.sla_prior_weight.is_finite() && self.sla_prior_weight >= 0.0) {
            return Err("sla_prior_weight must be a non-negative number".into());
        }
        Ok(())
    }

    /// Larger is worse: the highest-priority vector gets the largest severity.
    pub fn severity(&self, vector: AttackVector) -> usize {
        let pos = self.vulnerability_priority.iter().position(|v| *v == vector).unwrap_or(0);
        self.vulnerability_priority.len() - pos
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    #[serde(default = "default_prior_weight")]
    pub sla_prior_weight: f64,
    #[serde(default, rename = "service")]
    services: Vec<ServiceRecord>,
}

fn default_prior_weight() -> f64 {
    10.0
}

impl Default for Registry {
    fn default() -> Self {
        Registry::new(default_prior_weight())
    }
}

impl Registry {
    pub fn new(sla_prior_weight: f64) -> Self {
        Registry { sla_prior_weight, services: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.services.len()
    }

    pub fn is_empty(&self) -> bool {
        self.services.is_empty()
    }

    pub fn services(&self) -> &[ServiceRecord] {
        &self.services
    }

    pub fn get(&self, id: &str) -> Option<&ServiceRecord> {
        self.services.iter().find(|s| s.id == id)
    }

    fn get_mut(&mut self, id: &str) -> Result<&mut ServiceRecord, RegistryError> {
        self.services.iter_mut().find(|s| s.id == id).ok_or_else(|| RegistryError::NotFound(id.to_string()))
    }

    pub fn candidates(&self, functionality: &str) -> Vec<ServiceRecord> {
        self.services.iter().filter(|s| s.functionality == functionality).cloned().collect()
    }

    pub fn functionalities(&self) -> Vec<String> {
        let mut f: Vec<String> = self.services.iter().map(|s| s.functionality.clone()).collect();
        f.sort();
        f.dedup();
        f
    }

    /// Adds a new service with zeroed invocation counters.
    pub fn register_service(&mut self, mut record: ServiceRecord) -> Result<(), RegistryError> {
        record.invocations = 0;
        record.failures = 0;
        record.validate()?;
        if self.get(&record.id).is_some() {
            return Err(RegistryError::Conflict(record.id));
        }
        self.services.push(record);
        Ok(())
    }

    /// Updates counters and returns the new effective failure rate.
    pub fn record_invocation(&mut self, id: &str, outcome: InvocationOutcome) -> Result<f64, RegistryError> {
        let w = self.sla_prior_weight;
        let rec = self.get_mut(id)?;
        rec.invocations += 1;
        if outcome == InvocationOutcome::Failure {
            rec.failures += 1;
        }
        Ok(rec.effective_failure_rate(w))
    }

    pub fn effective_failure_rate(&self, id: &str) -> Result<f64, RegistryError> {
        self.get(id)
            .map(|r| r.effective_failure_rate(self.sla_prior_weight))
            .ok_or_else(|| RegistryError::NotFound(id.to_string()))
    }

    /// Overwrites verdicts with the newest probe results. Untested and
    /// not-probeable entries keep whatever verdict was there before.
    pub fn apply_probe_results(&mut self, entries: &[VulnerabilityLogEntry]) -> ApplyReport {
        let mut report = ApplyReport::default();
        for entry in entries {
            match self.get_mut(&entry.service_id) {
                Ok(rec) => {
                    if let Some(v) = entry.verdict.as_verdict() {
                        rec.vulnerabilities.insert(entry.vector, v);
                    }
                    report.applied += 1;
                }
                Err(e) => report.rejected.push((entry.service_id.clone(), e.to_string())),
            }
        }
        report
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("registry is always representable as TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let reg: Registry = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut seen = std::collections::HashSet::new();
        for s in &reg.services {
            s.validate().map_err(|e| e.to_string())?;
            if !seen.insert(s.id.as_str()) {
                return Err(format!("duplicate service id `{}`", s.id));
            }
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text = fs::read_to_string(path)
            .map_err(|source| RegistryError::Io { path: path.display().to_string(), source })?;
        Registry::from_toml(&text).map_err(|message| RegistryError::Parse { path: path.display().to_string(), message })
    }

    pub fn save(&self, path: &Path) -> Result<(), RegistryError> {
        fs::write(path, self.to_toml()).map_err(|source| RegistryError::Io { path: path.display().to_string(), source })
    }
}

/// Registry handle shared between the gateway's request tasks.
///
/// Readers take cloned snapshots; writers are serialized by the lock.
#[derive(Debug, Clone, Default)]
pub struct SharedRegistry(Arc<RwLock<Registry>>);

impl SharedRegistry {
    pub fn new(registry: Registry) -> Self {
        SharedRegistry(Arc::new(RwLock::new(registry)))
    }

    pub fn snapshot(&self) -> Registry {
        self.0.read().expect("registry lock poisoned").clone()
    }

    pub fn candidates(&self, functionality: &str) -> Vec<ServiceRecord> {
        self.0.read().expect("registry lock poisoned").candidates(functionality)
    }

    pub fn record_invocation(&self, id: &str, outcome: InvocationOutcome) -> Result<f64, RegistryError> {
        self.0.write().expect("registry lock poisoned").record_invocation(id, outcome)
    }

    pub fn apply_probe_results(&self, entries: &[VulnerabilityLogEntry]) -> ApplyReport {
        self.0.write().expect("registry lock poisoned").apply_probe_results(entries)
    }

    pub fn with_mut<R>(&self, f: impl FnOnce(&mut Registry) -> R) -> R {
        f(&mut self.0.write().expect("registry lock poisoned"))
    }
}
