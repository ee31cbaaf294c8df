//! One-command reproduction of the coercive-parsing experiment: probe each
//! service of a fleet, compose them behind the gateway, probe the gateway.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackVector;
use crate::config::{ConfigError, RunConfig};
use crate::gateway::{self, GatewayConfig};
use crate::mock;
use crate::probe::{self, ProbeOutcome};
use crate::registry::{LoggedVerdict, SharedRegistry, VulnerabilityLogEntry};

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {message}")]
pub struct ReplayError {
    pub stage: &'static str,
    pub message: String,
}

impl ReplayError {
    fn at(stage: &'static str) -> impl FnOnce(String) -> ReplayError {
        move |message| ReplayError { stage, message }
    }
}

impl From<ConfigError> for ReplayError {
    fn from(e: ConfigError) -> Self {
        ReplayError { stage: "config", message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub id: String,
    pub label: String,
    pub verdict: LoggedVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ProbeOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ReplayRow {
    pub fn percentage(&self) -> Option<u8> {
        self.outcome.as_ref().map(|o| o.percentage_encoding)
    }

    fn cell(&self) -> String {
        match self.percentage() {
            Some(p) => format!("{p}%"),
            None => format!("{:?}", self.verdict),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub vector: AttackVector,
    pub services: Vec<ReplayRow>,
    pub composite: ReplayRow,
    /// Replicas the gateway chose for a tampered request.
    pub composite_replicas: Vec<String>,
    pub scale: u32,
    pub settings_hash: String,
    pub elapsed_s: f64,
}

impl ReplayReport {
    /// Percentages in column order, composite last.
    pub fn pattern(&self) -> Vec<Option<u8>> {
        self.services.iter().chain(std::iter::once(&self.composite)).map(ReplayRow::percentage).collect()
    }

    pub fn table(&self) -> String {
        let mut header = format!("{:<18}", "Attack");
        let mut row = format!("{:<18}", format!("{:?}", self.vector));
        let mut ratio = format!("{:<18}", "ratio");
        for r in self.services.iter().chain(std::iter::once(&self.composite)) {
            let width = r.id.len().max(10) + 2;
            header.push_str(&format!("{:>width$}", r.id));
            row.push_str(&format!("{:>width$}", r.cell()));
            let q = r.outcome.as_ref().and_then(|o| o.ratio).map(|x| format!("{x:.2}")).unwrap_or("-".into());
            ratio.push_str(&format!("{q:>width$}"));
        }
        format!(
            "{header}\n{row}\n{ratio}\ncomposite replicas for a tampered request: {}\n",
            self.composite_replicas.join(", ")
        )
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("replay-table2.json"), serde_json::to_vec_pretty(self)?)?;
        std::fs::write(dir.join("replay-table2.txt"), self.table())
    }
}

fn row(entry: &VulnerabilityLogEntry, label: &str) -> ReplayRow {
    ReplayRow {
        id: entry.service_id.clone(),
        label: label.to_string(),
        verdict: entry.verdict,
        outcome: entry.outcome.clone(),
        note: entry.note.clone(),
    }
}

/// Runs the experiment. The fleet and gateway are torn down on every path.
pub async fn cmd_replay_table2(config: &RunConfig) -> Result<ReplayReport, ReplayError> {
    config.validate()?;
    let started = Instant::now();
    let vector = AttackVector::CoerciveParsing;
    let settings = config.probe_settings();
    let fleet_cfg = config.fleet_config()?;

    let fleet = mock::spawn_fleet(fleet_cfg.profiles(), fleet_cfg.listen_base())
        .map_err(|e| ReplayError::at("fleet")(e.to_string()))?;
    let registry = fleet_cfg.registry(&fleet.endpoints(), config.policy.sla_prior_weight)?;
    let labels: Vec<(String, String)> =
        registry.services().iter().map(|s| (s.id.clone(), s.framework_label.clone())).collect();
    let registry = SharedRegistry::new(registry);
    tracing::info!(services = labels.len(), "fleet up; probing services");

    let entries = probe::pentest_all(&registry, &settings, &[vector])
        .await
        .map_err(|e| ReplayError::at("pentest")(e.to_string()))?;
    let services: Vec<ReplayRow> = entries
        .iter()
        .map(|e| {
            let label = labels.iter().find(|(id, _)| *id == e.service_id).map(|(_, l)| l.as_str()).unwrap_or("");
            row(e, label)
        })
        .collect();

    let gw_cfg = GatewayConfig {
        listen: config.gateway_listen,
        policy: config.policy.clone(),
        thresholds: config.thresholds,
        replication: config.replication,
        ..GatewayConfig::default()
    };
    let gw = gateway::serve(gw_cfg, registry.clone()).await.map_err(|e| ReplayError::at("gateway")(e.to_string()))?;
    tracing::info!(addr = %gw.local_addr(), "gateway up; probing the composite");
    tokio::time::sleep(settings.server_recovery_time).await;
    let composite = probe::run_dos_probe(&gw.endpoint(gateway::DEFAULT_FUNCTIONALITY), vector, &settings).await;
    let composite_replicas =
        gw.decisions().iter().rev().find(|d| d.threat.contains(&vector)).map(|d| d.chosen.clone()).unwrap_or_default();
    gw.shutdown().await;
    drop(fleet);

    let composite = match composite {
        Ok(outcome) => ReplayRow {
            id: "composite".into(),
            label: "gateway".into(),
            verdict: outcome.verdict.into(),
            note: outcome.evidence.clone(),
            outcome: Some(outcome),
        },
        Err(e) => return Err(ReplayError::at("composite-probe")(e.to_string())),
    };
    Ok(ReplayReport {
        vector,
        services,
        composite,
        composite_replicas,
        scale: config.scale,
        settings_hash: settings.fingerprint(),
        elapsed_s: started.elapsed().as_secs_f64(),
    })
}
