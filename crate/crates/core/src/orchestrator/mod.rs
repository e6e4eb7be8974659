//! Controller/agent coordination and the end-to-end run pipeline.
//!
//! A run splits the input capture, uploads each node's share to its
//! agent, starts every agent at one sync epoch, waits for the engines,
//! fetches the captures and writes a run directory:
//!
//! ```text
//! run.json               parameters and per-connection outcomes
//! split/<node>/...       connection files and manifest per node
//! captures/<node>.pcap   what each node recorded
//! ```

pub mod agent;
pub mod controller;
pub mod server;
pub mod wire;

use std::collections::BTreeMap;
use std::fs;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::LinkParams;
use crate::pcap::{self, PcapError};
use crate::replay::{DuplicatePolicy, DEFAULT_INACTIVITY_TIMEOUT_US};
use crate::splitter::{self, encode_name, HostMapping, NodePlan, SplitError, SplitOutcome};

pub use agent::{Agent, ReplayJob, Runtime, SharedWorld, SimRuntime, SimWorld, UdpRuntime};
pub use controller::{
    drive_run, AgentClient, Clients, ControllerConfig, ControllerEnv, InProcessClient, NodeResult, RunResults, SimEnv,
    SystemEnv, TcpAgentClient,
};
pub use server::{run_agent, AgentServer};
pub use wire::{AgentMessage, PeerInfo};

pub const RUN_FILE: &str = "run.json";
pub const SPLIT_DIR: &str = "split";
pub const CAPTURE_DIR: &str = "captures";
pub const DEFAULT_LEAD_TIME_US: u64 = 3_000_000;

/// Virtual wall-clock reading at which every simulation starts, so that
/// simulated runs are reproducible to the byte.
pub const SIM_EPOCH_US: u64 = 1_700_000_000_000_000;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
    #[error("cannot bind {0}")]
    Bind(String),
    #[error("no agent address for node {0}")]
    MissingAgent(String),
    #[error("agent {node} unreachable: {reason}")]
    Unreachable { node: String, reason: String },
    #[error("agent {node}: {message}")]
    Protocol { node: String, message: String },
    #[error("run record: {0}")]
    Record(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// splitmix64 finalizer.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce5_e9b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one side of one connection.
pub fn connection_seed(seed: u64, stream_index: u32, initiator: bool) -> u64 {
    mix_seed(seed, ((stream_index as u64) << 1) | initiator as u64)
}

/// Address used for the `index`-th node (in sorted node order) inside
/// replayed packets: 10.200.0.1 upwards.
pub fn replay_ip(index: usize) -> Ipv4Addr {
    Ipv4Addr::from(u32::from(Ipv4Addr::new(10, 200, 0, 1)) + index as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Simulate,
    Live,
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: RunMode,
    pub input: String,
    pub source_name: String,
    /// Original IP to node.
    pub mapping: BTreeMap<Ipv4Addr, String>,
    /// Node to control address, or "in-process".
    pub agents: BTreeMap<String, String>,
    pub base_port: u16,
    pub seed: u64,
    pub lead_time_us: u64,
    pub duplicate_policy: DuplicatePolicy,
    pub inactivity_timeout_us: u64,
    pub link: Option<LinkParams>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub node: String,
    pub initiator: bool,
    pub state: String,
    pub sent: u32,
    pub received: u32,
    pub unexpected: u32,
    pub duplicate: u32,
    pub missed: u32,
    pub first_send_us: Option<u64>,
    pub reason: String,
}

impl OutcomeRecord {
    pub fn completed(&self) -> bool {
        self.state == wire::ConnectionState::Completed.as_str()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionRecord {
    pub name: String,
    pub stream_index: u32,
    pub initiator_node: String,
    pub responder_node: String,
    pub replay_port: u16,
    pub offset_us: u64,
    pub packets: usize,
    pub outcomes: Vec<OutcomeRecord>,
}

impl ConnectionRecord {
    /// Both sides reported and both completed.
    pub fn completed(&self) -> bool {
        self.outcomes.len() == 2 && self.outcomes.iter().all(OutcomeRecord::completed)
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub manifest: RunManifest,
    pub sync_epoch_us: u64,
    pub input_packets: usize,
    pub dropped_flows: usize,
    pub connections: Vec<ConnectionRecord>,
    pub clock_offsets_us: BTreeMap<String, i64>,
    pub failures: Vec<String>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }

    pub fn all_completed(&self) -> bool {
        !self.failed() && self.connections.iter().all(ConnectionRecord::completed)
    }

    pub fn load(run_dir: impl AsRef<Path>) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(run_dir.as_ref().join(RUN_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Knobs shared by simulated and live runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub base_port: u16,
    pub seed: u64,
    pub lead_time_us: u64,
    pub duplicate_policy: DuplicatePolicy,
    pub inactivity_timeout_us: u64,
    /// Used by simulated runs only.
    pub link: LinkParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            base_port: splitter::DEFAULT_BASE_PORT,
            seed: 1,
            lead_time_us: DEFAULT_LEAD_TIME_US,
            duplicate_policy: DuplicatePolicy::Strict,
            inactivity_timeout_us: DEFAULT_INACTIVITY_TIMEOUT_US,
            link: LinkParams::default(),
        }
    }
}

impl RunConfig {
    fn controller(&self) -> ControllerConfig {
        ControllerConfig {
            lead_time_us: self.lead_time_us,
            seed: self.seed,
            duplicate_policy: self.duplicate_policy,
            inactivity_timeout_us: self.inactivity_timeout_us,
        }
    }
}

/// Peer list for a plan: every node gets a replay address, and a
/// datagram address when one is known.
pub fn peers_for(plan: &NodePlan, datagram: &BTreeMap<String, SocketAddr>) -> Vec<PeerInfo> {
    plan.nodes
        .iter()
        .enumerate()
        .map(|(i, n)| PeerInfo {
            node: n.to_string(),
            replay_ip: replay_ip(i),
            datagram_addr: datagram.get(n.as_str()).copied(),
        })
        .collect()
}

fn source_stem(input: &Path) -> String {
    input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("capture")
        .to_string()
}

fn load_and_split(input: &Path, mapping: &HostMapping, cfg: &RunConfig) -> Result<SplitOutcome, OrchestratorError> {
    let trace = pcap::read_pcap(input)?;
    Ok(splitter::split_trace(&trace, &source_stem(input), mapping, cfg.base_port)?)
}

/// Replay `input` on in-process agents over simulated links and write
/// the run directory.
pub fn simulate(
    input: &Path,
    mapping: &HostMapping,
    cfg: &RunConfig,
    run_dir: &Path,
) -> Result<RunRecord, OrchestratorError> {
    let split = load_and_split(input, mapping, cfg)?;
    let world = SimWorld::new(SIM_EPOCH_US, split.plan.link_type, cfg.link).shared();
    let mut clients: Clients<'_> = BTreeMap::new();
    for node in &split.plan.nodes {
        let agent = Agent::new(SimRuntime::new(world.clone()));
        clients.insert(node.to_string(), Box::new(InProcessClient::new(agent)));
    }
    let peers = peers_for(&split.plan, &BTreeMap::new());
    let mut env = SimEnv::new(world.clone());
    let results = drive_run(&split.plan, &peers, &mut clients, &mut env, &cfg.controller())?;
    let agents = clients.keys().map(|n| (n.clone(), "in-process".to_string())).collect();
    let manifest = manifest(RunMode::Simulate, input, &split, mapping, agents, cfg, Some(cfg.link));
    write_run_dir(run_dir, manifest, &split, &results)
}

/// Replay `input` on remote agents (control address per node; datagrams
/// go to the same address over UDP).
pub fn run_live(
    input: &Path,
    mapping: &HostMapping,
    agents: &BTreeMap<String, SocketAddr>,
    cfg: &RunConfig,
    run_dir: &Path,
) -> Result<RunRecord, OrchestratorError> {
    let split = load_and_split(input, mapping, cfg)?;
    let mut clients: Clients<'_> = BTreeMap::new();
    for node in &split.plan.nodes {
        let addr = agents
            .get(node.as_str())
            .ok_or_else(|| OrchestratorError::MissingAgent(node.to_string()))?;
        clients.insert(node.to_string(), Box::new(TcpAgentClient::new(*addr)));
    }
    let peers = peers_for(&split.plan, agents);
    let mut env = SystemEnv::default();
    let results = drive_run(&split.plan, &peers, &mut clients, &mut env, &cfg.controller())?;
    let agents = agents.iter().map(|(n, a)| (n.clone(), a.to_string())).collect();
    let manifest = manifest(RunMode::Live, input, &split, mapping, agents, cfg, None);
    write_run_dir(run_dir, manifest, &split, &results)
}

fn manifest(
    mode: RunMode,
    input: &Path,
    split: &SplitOutcome,
    mapping: &HostMapping,
    agents: BTreeMap<String, String>,
    cfg: &RunConfig,
    link: Option<LinkParams>,
) -> RunManifest {
    RunManifest {
        mode,
        input: input.display().to_string(),
        source_name: split.plan.source_name.clone(),
        mapping: mapping.iter().map(|(ip, n)| (*ip, n.to_string())).collect(),
        agents,
        base_port: cfg.base_port,
        seed: cfg.seed,
        lead_time_us: cfg.lead_time_us,
        duplicate_policy: cfg.duplicate_policy,
        inactivity_timeout_us: cfg.inactivity_timeout_us,
        link,
    }
}

/// Combine the plan and the agents' reports into a run record.
pub fn build_record(manifest: RunManifest, split: &SplitOutcome, results: &RunResults) -> RunRecord {
    let connections = split
        .plan
        .entries
        .iter()
        .map(|e| {
            let name = encode_name(&e.connection);
            let outcomes = results
                .nodes
                .iter()
                .filter_map(|(node, r)| r.status.as_ref().map(|s| (node, s)))
                .flat_map(|(node, s)| {
                    s.connections.iter().filter(|c| c.name == name).map(move |c| OutcomeRecord {
                        node: node.clone(),
                        initiator: c.initiator,
                        state: c.state.as_str().to_string(),
                        sent: c.sent,
                        received: c.received,
                        unexpected: c.unexpected,
                        duplicate: c.duplicate,
                        missed: c.missed,
                        first_send_us: (c.first_send_us != 0).then_some(c.first_send_us),
                        reason: c.reason.clone(),
                    })
                })
                .collect();
            ConnectionRecord {
                name,
                stream_index: e.connection.stream_index,
                initiator_node: e.initiator_node.to_string(),
                responder_node: e.responder_node.to_string(),
                replay_port: e.connection.replay_port,
                offset_us: e.connection.offset_us,
                packets: e.connection.packets.len(),
                outcomes,
            }
        })
        .collect();
    RunRecord {
        manifest,
        sync_epoch_us: results.sync_epoch_us,
        input_packets: split.input_packets,
        dropped_flows: split.dropped.len(),
        connections,
        clock_offsets_us: results
            .nodes
            .iter()
            .filter_map(|(n, r)| r.clock_offset_us.map(|o| (n.clone(), o)))
            .collect(),
        failures: results.failures.clone(),
    }
}

pub fn capture_path(run_dir: &Path, node: &str) -> PathBuf {
    run_dir.join(CAPTURE_DIR).join(format!("{node}.pcap"))
}

/// Write split files, captures and `run.json` into `run_dir`.
pub fn write_run_dir(
    run_dir: &Path,
    manifest: RunManifest,
    split: &SplitOutcome,
    results: &RunResults,
) -> Result<RunRecord, OrchestratorError> {
    fs::create_dir_all(run_dir.join(CAPTURE_DIR))?;
    splitter::write_plan(&split.plan, run_dir.join(SPLIT_DIR))?;
    for (node, r) in &results.nodes {
        if let Some(trace) = &r.capture {
            pcap::write_pcap(trace, capture_path(run_dir, node))?;
        }
    }
    let record = build_record(manifest, split, results);
    fs::write(run_dir.join(RUN_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_by_role_and_stream() {
        let a = connection_seed(7, 0, true);
        assert_ne!(a, connection_seed(7, 0, false));
        assert_ne!(a, connection_seed(7, 1, true));
        assert_eq!(a, connection_seed(7, 0, true));
    }

    #[test]
    fn replay_ips_count_up() {
        assert_eq!(replay_ip(0), Ipv4Addr::new(10, 200, 0, 1));
        assert_eq!(replay_ip(300), Ipv4Addr::new(10, 200, 1, 45));
    }
}
