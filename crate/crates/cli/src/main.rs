//! `meshplay` command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use meshplay::analyzer::{self, AnalyzerError};
use meshplay::harness::LinkParams;
use meshplay::orchestrator::server::AgentServer;
use meshplay::orchestrator::{self, OrchestratorError, RunConfig, RunRecord};
use meshplay::pcap::{self, PcapError};
use meshplay::replay::{DuplicatePolicy, DEFAULT_INACTIVITY_TIMEOUT_US};
use meshplay::splitter::{self, HostMapping, SplitError};

const EXIT_FAILURE: u8 = 1;
const EXIT_MAPPING: u8 = 2;
const EXIT_BIND: u8 = 3;
const EXIT_REPLAY: u8 = 4;
const EXIT_MISSING: u8 = 5;

#[derive(Parser)]
#[command(name = "meshplay", version, about = "Replay captured TCP traffic across a set of nodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut a capture into per-node connection files.
    Split {
        pcap: PathBuf,
        /// Host mapping file: `<ip> <node-id>` per line.
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value_t = splitter::DEFAULT_BASE_PORT)]
        base_port: u16,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve replay requests from a controller.
    Agent {
        #[arg(long, default_value = "0.0.0.0:7878")]
        listen: SocketAddr,
    },
    /// Replay a capture on running agents.
    Run {
        pcap: PathBuf,
        #[arg(long)]
        map: PathBuf,
        /// Agent list: `<node-id> <host:port>` per line.
        #[arg(long, env = "MESHPLAY_AGENTS")]
        agents: PathBuf,
        #[arg(long, default_value_t = 3000)]
        lead_ms: u64,
        #[command(flatten)]
        common: ReplayArgs,
    },
    /// Replay a capture on in-process agents over simulated links.
    Simulate {
        pcap: PathBuf,
        #[arg(long)]
        map: PathBuf,
        /// One-way link delay.
        #[arg(long, default_value_t = 0)]
        delay_us: u64,
        /// Uniform delay variation in [-jitter, +jitter].
        #[arg(long, default_value_t = 0)]
        jitter_us: u64,
        /// Per-frame loss probability.
        #[arg(long, default_value_t = 0.0)]
        loss: f64,
        /// Per-frame duplication probability.
        #[arg(long, default_value_t = 0.0)]
        duplicate: f64,
        /// Let jitter reorder frames.
        #[arg(long)]
        reorder: bool,
        #[command(flatten)]
        common: ReplayArgs,
    },
    /// Compute timing deviations for a run directory.
    Analyze { run_dir: PathBuf },
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Remove retransmissions from the schedules before replaying.
    #[arg(long)]
    drop_duplicates: bool,
    #[arg(long, default_value_t = splitter::DEFAULT_BASE_PORT)]
    base_port: u16,
    /// Abort a connection after this long without progress.
    #[arg(long, default_value_t = DEFAULT_INACTIVITY_TIMEOUT_US / 1000)]
    timeout_ms: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ReplayArgs {
    fn config(&self) -> RunConfig {
        RunConfig {
            base_port: self.base_port,
            seed: self.seed,
            duplicate_policy: if self.drop_duplicates {
                DuplicatePolicy::DropScheduledDuplicates
            } else {
                DuplicatePolicy::Strict
            },
            inactivity_timeout_us: self.timeout_ms * 1000,
            ..RunConfig::default()
        }
    }
}

/// An error with the exit code it maps to.
#[derive(Debug)]
struct Exit(u8, anyhow::Error);

fn default_out(kind: &str) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    PathBuf::from("runs").join(format!("{stamp}-{kind}"))
}

fn load_mapping(path: &Path) -> Result<HostMapping> {
    HostMapping::load(path).with_context(|| format!("mapping {}", path.display()))
}

/// Parse `<node-id> <host:port>` lines; `#` starts a comment.
fn parse_agents(text: &str) -> Result<BTreeMap<String, SocketAddr>, Exit> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |why: String| Exit(EXIT_MAPPING, anyhow!("agents line {}: {why}", n + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [node, addr] = fields[..] else {
            return Err(bad("expected `<node-id> <host:port>`".into()));
        };
        let addr = addr
            .to_socket_addrs()
            .ok()
            .and_then(|mut a| a.next())
            .ok_or_else(|| bad(format!("cannot resolve {addr:?}")))?;
        if out.insert(node.to_string(), addr).is_some() {
            return Err(bad(format!("node {node} listed twice")));
        }
    }
    Ok(out)
}

fn split_code(e: &SplitError) -> u8 {
    match e {
        SplitError::Unmapped(_) | SplitError::MappingSyntax { .. } | SplitError::BadNodeId(_) => EXIT_MAPPING,
        SplitError::Pcap(p) => pcap_code(p),
        SplitError::Io(io) if io.kind() == ErrorKind::NotFound => EXIT_MISSING,
        _ => EXIT_FAILURE,
    }
}

fn pcap_code(e: &PcapError) -> u8 {
    match e {
        PcapError::Io(io) if io.kind() == ErrorKind::NotFound => EXIT_MISSING,
        _ => EXIT_FAILURE,
    }
}

/// Exit code for an error from anywhere in the pipeline.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<OrchestratorError>() {
            return match e {
                OrchestratorError::Split(s) => split_code(s),
                OrchestratorError::Pcap(p) => pcap_code(p),
                OrchestratorError::Bind(_) => EXIT_BIND,
                OrchestratorError::MissingAgent(_) => EXIT_MAPPING,
                OrchestratorError::Unreachable { .. } | OrchestratorError::Protocol { .. } => EXIT_REPLAY,
                _ => EXIT_FAILURE,
            };
        }
        if let Some(e) = cause.downcast_ref::<SplitError>() {
            return split_code(e);
        }
        if let Some(e) = cause.downcast_ref::<PcapError>() {
            return pcap_code(e);
        }
        if let Some(AnalyzerError::MissingInput(_)) = cause.downcast_ref::<AnalyzerError>() {
            return EXIT_MISSING;
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == ErrorKind::NotFound {
                return EXIT_MISSING;
            }
        }
    }
    EXIT_FAILURE
}

impl<E: Into<anyhow::Error>> From<E> for Exit {
    fn from(e: E) -> Self {
        let e = e.into();
        Exit(classify(&e), e)
    }
}

fn split(pcap_path: &Path, map: &Path, base_port: u16, out: &Path) -> Result<(), Exit> {
    let mapping = load_mapping(map)?;
    let trace = pcap::read_pcap(pcap_path).with_context(|| format!("reading {}", pcap_path.display()))?;
    let stem = pcap_path.file_stem().and_then(|s| s.to_str()).unwrap_or("capture");
    let outcome = splitter::split_trace(&trace, stem, &mapping, base_port)?;
    splitter::write_plan(&outcome.plan, out)?;
    println!(
        "{} packets: kept {} connections, dropped {}",
        outcome.input_packets,
        outcome.kept(),
        outcome.dropped.len()
    );
    for d in &outcome.dropped {
        log::info!("dropped stream {} ({} packets): {}", d.stream_index, d.packets, d.reason);
    }
    println!("{}", out.display());
    Ok(())
}

fn agent(listen: SocketAddr) -> Result<(), Exit> {
    let server = AgentServer::bind(listen)?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::Release)).context("installing signal handler")?;
    println!("agent listening on {}", server.local_addr());
    server.serve(&stop)?;
    log::info!("agent stopped");
    Ok(())
}

/// Analyze a finished run, print the summary, and fail if any
/// connection did not complete.
fn finish_run(record: &RunRecord, run_dir: &Path) -> Result<(), Exit> {
    let report = analyzer::analyze_run_dir(run_dir)?;
    analyzer::write_reports(&report, run_dir)?;
    print!("{}", analyzer::summary_text(&report));
    println!("{}", run_dir.display());
    if record.failed() || !record.all_completed() {
        let bad: Vec<String> = record
            .connections
            .iter()
            .flat_map(|c| c.outcomes.iter().map(move |o| (c, o)))
            .filter(|(_, o)| !o.completed())
            .map(|(c, o)| format!("{} on {}: {} {}", c.name, o.node, o.state, o.reason))
            .chain(record.failures.iter().cloned())
            .collect();
        return Err(Exit(EXIT_REPLAY, anyhow!("replay incomplete:\n  {}", bad.join("\n  "))));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Exit> {
    match cli.command {
        Command::Split {
            pcap,
            map,
            base_port,
            out,
        } => split(&pcap, &map, base_port, &out.unwrap_or_else(|| default_out("split"))),
        Command::Agent { listen } => agent(listen),
        Command::Run {
            pcap,
            map,
            agents,
            lead_ms,
            common,
        } => {
            let mapping = load_mapping(&map)?;
            let text = fs::read_to_string(&agents).with_context(|| format!("agents {}", agents.display()))?;
            let agents = parse_agents(&text)?;
            let cfg = RunConfig {
                lead_time_us: lead_ms * 1000,
                ..common.config()
            };
            let out = common.out.unwrap_or_else(|| default_out("run"));
            let record = orchestrator::run_live(&pcap, &mapping, &agents, &cfg, &out)?;
            finish_run(&record, &out)
        }
        Command::Simulate {
            pcap,
            map,
            delay_us,
            jitter_us,
            loss,
            duplicate,
            reorder,
            common,
        } => {
            let mapping = load_mapping(&map)?;
            let link = LinkParams {
                one_way_delay_us: delay_us,
                jitter_us,
                loss_prob: loss,
                duplicate_prob: duplicate,
                reorder,
                seed: common.seed,
            };
            link.validate().map_err(|e| Exit(EXIT_FAILURE, anyhow!("link parameters: {e}")))?;
            let cfg = RunConfig {
                link,
                ..common.config()
            };
            let out = common.out.unwrap_or_else(|| default_out("simulate"));
            let record = orchestrator::simulate(&pcap, &mapping, &cfg, &out)?;
            finish_run(&record, &out)
        }
        Command::Analyze { run_dir } => {
            let report = analyzer::analyze_run_dir(&run_dir)?;
            analyzer::write_reports(&report, &run_dir)?;
            print!("{}", analyzer::summary_text(&report));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
