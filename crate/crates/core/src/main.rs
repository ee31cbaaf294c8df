use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use quorumgate::attack::{self, AttackVector};
use quorumgate::config::{FleetConfig, RunConfig};
use quorumgate::gateway::{self, GatewayConfig};
use quorumgate::http::{self, Endpoint};
use quorumgate::mock::{self, MockStats};
use quorumgate::probe::{self, DEFAULT_SCALE, ProbeSettings};
use quorumgate::registry::{LoggedVerdict, Registry, ServiceRecord, SharedRegistry};
use quorumgate::replay;
use quorumgate::scanner::{self, ClientRequest};

#[derive(Parser)]
#[command(name = "quorumgate", version, about = "Vulnerability-aware quorum gateway for SOAP services")]
struct Cli {
    /// Log filter, e.g. `info` or `quorumgate=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run or inspect a simulated service fleet.
    #[command(subcommand)]
    Fleet(FleetCmd),
    /// Probe every registered service for the given vectors.
    Pentest(PentestArgs),
    /// Run the composite-service gateway.
    Serve(ServeArgs),
    /// Print the threat profile of a request file, or emit an attack payload.
    Scan(ScanArgs),
    /// Inspect or edit a registry file.
    #[command(subcommand)]
    Registry(RegistryCmd),
    /// Probe each fleet service and the composite for coercive parsing.
    #[command(name = "replay-table2")]
    ReplayTable2(ReplayArgs),
}

#[derive(Subcommand)]
enum FleetCmd {
    /// Start the mocks and keep them running until interrupted.
    Up {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write a registry file describing the running fleet.
        #[arg(long)]
        registry_out: Option<PathBuf>,
    },
    /// Query the counters of a fleet started with fixed ports.
    Stats {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct PentestArgs {
    #[arg(long)]
    registry: PathBuf,
    /// Comma-separated vectors; all six when omitted.
    #[arg(long, value_delimiter = ',')]
    vectors: Vec<AttackVector>,
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    scale: u32,
    /// Run the full-length probe timings (overrides --scale).
    #[arg(long)]
    faithful: bool,
    /// TOML file with probe setting overrides.
    #[arg(long)]
    settings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write verdicts back into the registry file.
    #[arg(long)]
    apply: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Run configuration (policy, thresholds, replication).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides f from the configuration.
    #[arg(long)]
    f: Option<usize>,
    #[arg(long)]
    decision_log: Option<PathBuf>,
}

#[derive(Args)]
struct ScanArgs {
    /// Request envelope to scan.
    file: Option<PathBuf>,
    /// Transport header as NAME=VALUE, repeatable.
    #[arg(long = "header")]
    headers: Vec<String>,
    /// Generate this vector's payload at default probe scale instead of reading a file.
    #[arg(long)]
    emit: Option<AttackVector>,
    /// Where `--emit` writes the payload.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Wrap the emitted payload in an opaque region.
    #[arg(long)]
    obfuscate: bool,
}

#[derive(Subcommand)]
enum RegistryCmd {
    Show {
        #[arg(long)]
        registry: PathBuf,
    },
    Add {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        endpoint: String,
        #[arg(long, default_value = gateway::DEFAULT_FUNCTIONALITY)]
        functionality: String,
        #[arg(long, default_value_t = 0.0)]
        sla: f64,
        #[arg(long, default_value = "")]
        label: String,
    },
    /// Apply a pentest report to the registry.
    ImportProbes {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fleet file replacing the default five services.
    #[arg(long)]
    fleet: Option<PathBuf>,
    #[arg(long)]
    faithful: bool,
    #[arg(long)]
    scale: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure of a pipeline stage; maps to exit code 2.
#[derive(Debug)]
struct StageError(String);

impl<E: std::fmt::Display> From<E> for StageError {
    fn from(e: E) -> Self {
        StageError(e.to_string())
    }
}

type Outcome = Result<(), StageError>;

/// `println!` that ends the process quietly when stdout is closed early.
macro_rules! out {
    ($($arg:tt)*) => {
        match writeln!(std::io::stdout().lock(), $($arg)*) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
            r => r.map_err(StageError::from),
        }?
    };
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_default())
        .with_writer(std::io::stderr)
        .init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(2);
        }
    };
    match runtime.block_on(run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(StageError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

async fn run(command: Command) -> Outcome {
    match command {
        Command::Fleet(cmd) => fleet(cmd).await,
        Command::Pentest(args) => pentest(args).await,
        Command::Serve(args) => serve(args).await,
        Command::Scan(args) => scan(args),
        Command::Registry(cmd) => registry(cmd),
        Command::ReplayTable2(args) => replay_table2(args).await,
    }
}

async fn fleet(cmd: FleetCmd) -> Outcome {
    match cmd {
        FleetCmd::Up { config, registry_out } => {
            let cfg = match config {
                Some(p) => FleetConfig::load(&p)?,
                None => FleetConfig::default(),
            };
            let fleet = mock::spawn_fleet(cfg.profiles(), cfg.listen_base())?;
            for (id, ep) in fleet.endpoints() {
                out!("{id}\t{ep}");
            }
            if let Some(path) = registry_out {
                cfg.registry(&fleet.endpoints(), 10.0)?.save(&path)?;
                out!("registry written to {}", path.display());
            }
            tokio::signal::ctrl_c().await?;
            fleet.shutdown();
            Ok(())
        }
        FleetCmd::Stats { config } => {
            let cfg = FleetConfig::load(&config)?;
            let endpoints = cfg
                .static_endpoints()
                .ok_or_else(|| StageError("fleet stats needs fixed ports (set base_port or port)".into()))?;
            for (id, ep) in endpoints {
                let ep = Endpoint::parse(&ep)?.with_path("/stats");
                match http::send(&ep, "GET", &[], &[]).await {
                    Ok(ex) => {
                        let stats: MockStats = serde_json::from_slice(&ex.response.body)?;
                        out!("{id}\t{}", serde_json::to_string(&stats)?);
                    }
                    Err(e) => out!("{id}\tunreachable: {e}"),
                }
            }
            Ok(())
        }
    }
}

fn probe_settings(scale: u32, faithful: bool, overrides: Option<&Path>) -> Result<ProbeSettings, StageError> {
    let base = match overrides {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => ProbeSettings::default(),
    };
    if scale == 0 {
        return Err(StageError("--scale must be at least 1".into()));
    }
    Ok(if faithful { base } else { base.with_scale(scale) })
}

async fn pentest(args: PentestArgs) -> Outcome {
    let settings = probe_settings(args.scale, args.faithful, args.settings.as_deref())?;
    let vectors = if args.vectors.is_empty() { AttackVector::ALL.to_vec() } else { args.vectors };
    let shared = SharedRegistry::new(Registry::load(&args.registry)?);
    let entries = probe::pentest_all(&shared, &settings, &vectors).await?;
    probe::write_report(&args.out, &entries, &settings)?;
    for e in &entries {
        let pct = e.outcome.as_ref().map(|o| format!("{}%", o.percentage_encoding)).unwrap_or("-".into());
        out!("{}\t{}\t{:?}\t{pct}", e.service_id, e.vector, e.verdict);
        if e.verdict == LoggedVerdict::Untested {
            eprintln!("warning: {} / {} untested: {}", e.service_id, e.vector, e.note.as_deref().unwrap_or(""));
        }
    }
    if args.apply {
        shared.snapshot().save(&args.registry)?;
    }
    Ok(())
}

async fn serve(args: ServeArgs) -> Outcome {
    let mut run = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(f) = args.f {
        run = run.with_f(f);
    }
    let cfg = GatewayConfig {
        listen: args.listen,
        policy: run.policy,
        thresholds: run.thresholds,
        replication: run.replication,
        decision_log: args.decision_log,
        ..GatewayConfig::default()
    };
    let registry = SharedRegistry::new(Registry::load(&args.registry)?);
    let handle = gateway::serve(cfg, registry).await?;
    out!("gateway listening on http://{}/", handle.local_addr());
    tokio::select! {
        _ = tokio::signal::ctrl_c() => handle.shutdown().await,
    }
    Ok(())
}

fn scan(args: ScanArgs) -> Outcome {
    let mut headers = Vec::new();
    for h in &args.headers {
        let (k, v) = h.split_once('=').ok_or_else(|| StageError(format!("header `{h}` is not NAME=VALUE")))?;
        headers.push((k.trim().to_string(), v.trim().to_string()));
    }
    let bytes = if let Some(vector) = args.emit {
        let s = ProbeSettings::default();
        let mut payload = attack::payload_for(vector, s.coercive_depth, s.oversize_bytes, s.collision_key_count)?;
        if args.obfuscate {
            payload = attack::wrap_obfuscated(&payload);
        }
        let out = args.out.or(args.file).ok_or_else(|| StageError("--emit needs --out".into()))?;
        std::fs::write(&out, &payload.envelope_bytes)?;
        out!("wrote {} bytes to {}", payload.envelope_bytes.len(), out.display());
        headers.extend(payload.transport_headers);
        payload.envelope_bytes
    } else {
        let file = args.file.ok_or_else(|| StageError("nothing to scan: give a file or --emit".into()))?;
        std::fs::read(&file)?
    };
    let request = ClientRequest::new(bytes, headers)?;
    let profile = scanner::scan(&request, &Default::default());
    out!("{}", serde_json::to_string_pretty(&profile)?);
    Ok(())
}

fn registry(cmd: RegistryCmd) -> Outcome {
    match cmd {
        RegistryCmd::Show { registry } => {
            let reg = Registry::load(&registry)?;
            out!("{:<16} {:<12} {:>8} {:>6} {:>6}  vulnerabilities", "id", "label", "rate", "inv", "fail");
            for s in reg.services() {
                let vulns: Vec<String> = s.vulnerabilities.iter().map(|(v, d)| format!("{v}={d:?}")).collect();
                out!(
                    "{:<16} {:<12} {:>8.4} {:>6} {:>6}  {}",
                    s.id,
                    s.framework_label,
                    s.effective_failure_rate(reg.sla_prior_weight),
                    s.invocations,
                    s.failures,
                    vulns.join(" ")
                );
            }
            Ok(())
        }
        RegistryCmd::Add { registry, id, endpoint, functionality, sla, label } => {
            let mut reg = if registry.exists() { Registry::load(&registry)? } else { Registry::default() };
            reg.register_service(ServiceRecord::new(&id, &endpoint, &functionality).with_sla(sla).with_label(&label))?;
            reg.save(&registry)?;
            Ok(())
        }
        RegistryCmd::ImportProbes { registry, report } => {
            let mut reg = Registry::load(&registry)?;
            let entries = probe::read_report(&report)?;
            let result = reg.apply_probe_results(&entries);
            for (id, why) in &result.rejected {
                eprintln!("warning: entry for {id} rejected: {why}");
            }
            reg.save(&registry)?;
            out!("applied {} of {} entries", result.applied, entries.len());
            Ok(())
        }
    }
}

async fn replay_table2(args: ReplayArgs) -> Outcome {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(f) = args.fleet {
        cfg.fleet = Some(f);
    }
    if let Some(s) = args.scale {
        cfg.scale = s;
    }
    if args.faithful {
        cfg.scale = 1;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    let report = replay::cmd_replay_table2(&cfg).await?;
    out!("{}", report.table().trim_end());
    report.write(&cfg.out_dir)?;
    out!("report written to {}", cfg.out_dir.display());
    Ok(())
}
