//! Fleet and run configuration files.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::DEFAULT_FUNCTIONALITY;
use crate::mock::{self, MockServiceProfile, ParserModel};
use crate::probe::{DEFAULT_SCALE, ProbeSettings};
use crate::quorum::ReplicationSettings;
use crate::registry::{Registry, RegistryError, SelectionPolicy, ServiceRecord};
use crate::scanner::ScannerThresholds;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })
}

/// One simulated service plus the registry fields it is advertised with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetEntry {
    #[serde(flatten)]
    pub profile: MockServiceProfile,
    #[serde(default = "default_functionality")]
    pub functionality: String,
    #[serde(default)]
    pub sla_failure_rate: f64,
}

fn default_functionality() -> String {
    DEFAULT_FUNCTIONALITY.to_string()
}

impl From<MockServiceProfile> for FleetEntry {
    fn from(profile: MockServiceProfile) -> Self {
        FleetEntry { profile, functionality: default_functionality(), sla_failure_rate: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    #[serde(default = "default_host")]
    pub listen_host: IpAddr,
    /// 0 picks an ephemeral port per mock; otherwise mock `i` uses `base_port + i`.
    #[serde(default)]
    pub base_port: u16,
    #[serde(default, rename = "mock")]
    pub mocks: Vec<FleetEntry>,
}

fn default_host() -> IpAddr {
    IpAddr::V4(Ipv4Addr::LOCALHOST)
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig::from_profiles(mock::table2_fleet())
    }
}

impl FleetConfig {
    pub fn from_profiles(profiles: Vec<MockServiceProfile>) -> Self {
        FleetConfig {
            listen_host: default_host(),
            base_port: 0,
            mocks: profiles.into_iter().map(FleetEntry::from).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: FleetConfig = parse(path, &read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.mocks.is_empty() {
            return Err(ConfigError::Invalid("fleet has no mocks".into()));
        }
        for m in &self.mocks {
            m.profile.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if !(0.0..=1.0).contains(&m.sla_failure_rate) {
                return Err(ConfigError::Invalid(format!("{}: sla_failure_rate outside [0, 1]", m.profile.id)));
            }
        }
        Ok(())
    }

    pub fn listen_base(&self) -> SocketAddr {
        SocketAddr::new(self.listen_host, self.base_port)
    }

    pub fn profiles(&self) -> Vec<MockServiceProfile> {
        self.mocks.iter().map(|m| m.profile.clone()).collect()
    }

    /// Endpoints the fleet will listen on, when ports are fixed.
    pub fn static_endpoints(&self) -> Option<Vec<(String, String)>> {
        self.mocks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let port = match (m.profile.port, self.base_port) {
                    (Some(p), _) => p,
                    (None, 0) => return None,
                    (None, b) => b + i as u16,
                };
                Some((m.profile.id.clone(), mock::endpoint_url(SocketAddr::new(self.listen_host, port))))
            })
            .collect()
    }

    /// Registry describing a running fleet.
    pub fn registry(&self, endpoints: &[(String, String)], sla_prior_weight: f64) -> Result<Registry, ConfigError> {
        let mut registry = Registry::new(sla_prior_weight);
        for m in &self.mocks {
            let endpoint = endpoints
                .iter()
                .find(|(id, _)| *id == m.profile.id)
                .map(|(_, e)| e.clone())
                .ok_or_else(|| ConfigError::Invalid(format!("no endpoint for {}", m.profile.id)))?;
            let label = match m.profile.parser_model {
                ParserModel::EagerTree => "eager-tree",
                ParserModel::Streaming => "streaming",
            };
            registry.register_service(
                ServiceRecord::new(&m.profile.id, &endpoint, &m.functionality)
                    .with_sla(m.sla_failure_rate)
                    .with_label(label),
            )?;
        }
        Ok(registry)
    }
}

/// Settings for `serve`, `pentest` and `replay-table2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub registry: Option<PathBuf>,
    pub fleet: Option<PathBuf>,
    pub policy: SelectionPolicy,
    pub thresholds: ScannerThresholds,
    pub replication: ReplicationSettings,
    /// Reference probe schedule unless overridden; durations are divided by `scale`.
    pub probe: ProbeSettings,
    pub scale: u32,
    pub gateway_listen: SocketAddr,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            registry: None,
            fleet: None,
            policy: SelectionPolicy::default(),
            thresholds: ScannerThresholds::default(),
            replication: ReplicationSettings::default(),
            probe: ProbeSettings::default(),
            scale: DEFAULT_SCALE,
            gateway_listen: SocketAddr::from(([127, 0, 0, 1], 0)),
            out_dir: PathBuf::from("replay-out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = parse(path, &read(path)?)?;
        // relative paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.registry, &mut cfg.fleet].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.scale == 0 {
            return Err(ConfigError::Invalid("scale must be at least 1".into()));
        }
        self.policy.validate().map_err(ConfigError::Invalid)?;
        self.thresholds.validate().map_err(ConfigError::Invalid)?;
        self.replication.validate().map_err(ConfigError::Invalid)?;
        if self.policy.f != self.replication.f {
            return Err(ConfigError::Invalid(format!(
                "policy.f = {} but replication.f = {}",
                self.policy.f, self.replication.f
            )));
        }
        self.probe_settings().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for p in [&self.registry, &self.fleet].into_iter().flatten() {
            if !p.exists() {
                return Err(ConfigError::Invalid(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn with_f(mut self, f: usize) -> Self {
        self.policy.f = f;
        self.replication.f = f;
        self
    }

    /// Probe settings after scaling.
    pub fn probe_settings(&self) -> ProbeSettings {
        self.probe.clone().with_scale(self.scale)
    }

    pub fn fleet_config(&self) -> Result<FleetConfig, ConfigError> {
        match &self.fleet {
            Some(p) => FleetConfig::load(p),
            None => Ok(FleetConfig::default()),
        }
    }
}
