//! Controller: pushes workloads to agents, issues the synchronized start,
//! waits for the engines, and collects captures.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use super::agent::{Agent, Runtime, SharedWorld};
use super::wire::{self, AgentMessage, AgentPhase, PeerInfo, StartCommand, StatusReport, Upload};
use super::OrchestratorError;
use crate::clock::{Clock, SystemClock};
use crate::pcap::{encode_pcap, Trace};
use crate::replay::DuplicatePolicy;
use crate::splitter::{encode_name, format_manifest, NodePlan};

/// Request/response channel to one agent.
pub trait AgentClient {
    fn request(&mut self, msg: &AgentMessage) -> Result<AgentMessage, OrchestratorError>;
}

/// Agent in the same process. Messages still go through the wire codec
/// so both modes exercise identical bytes.
#[derive(Debug)]
pub struct InProcessClient<R: Runtime> {
    agent: Agent<R>,
}

impl<R: Runtime> InProcessClient<R> {
    pub fn new(agent: Agent<R>) -> Self {
        InProcessClient { agent }
    }

    pub fn agent(&self) -> &Agent<R> {
        &self.agent
    }
}

impl<R: Runtime> AgentClient for InProcessClient<R> {
    fn request(&mut self, msg: &AgentMessage) -> Result<AgentMessage, OrchestratorError> {
        let incoming = wire::decode(&wire::encode(msg))?;
        let reply = self.agent.handle(incoming);
        Ok(wire::decode(&wire::encode(&reply))?)
    }
}

/// Agent reached over TCP; the connection is opened on first use and kept.
#[derive(Debug)]
pub struct TcpAgentClient {
    addr: SocketAddr,
    timeout: Duration,
    stream: Option<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
}

impl TcpAgentClient {
    pub fn new(addr: SocketAddr) -> Self {
        TcpAgentClient {
            addr,
            timeout: Duration::from_secs(30),
            stream: None,
        }
    }

    fn connect(&mut self) -> Result<(), OrchestratorError> {
        if self.stream.is_none() {
            let s = TcpStream::connect_timeout(&self.addr, Duration::from_secs(3))?;
            s.set_read_timeout(Some(self.timeout))?;
            s.set_nodelay(true)?;
            self.stream = Some((BufReader::new(s.try_clone()?), BufWriter::new(s)));
        }
        Ok(())
    }
}

impl AgentClient for TcpAgentClient {
    fn request(&mut self, msg: &AgentMessage) -> Result<AgentMessage, OrchestratorError> {
        self.connect()?;
        let (r, w) = self.stream.as_mut().unwrap();
        let result = wire::write_message(w, msg).and_then(|_| wire::read_message(r));
        match result {
            Ok(Some(reply)) => Ok(reply),
            Ok(None) => {
                self.stream = None;
                Err(OrchestratorError::Io(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "agent closed the connection",
                )))
            }
            Err(e) => {
                self.stream = None;
                Err(e.into())
            }
        }
    }
}

/// The controller's notion of time.
pub trait ControllerEnv {
    fn now_us(&mut self) -> u64;
    fn wait_until(&mut self, abs_us: u64);
    /// How long to wait between status polls.
    fn poll_interval_us(&self) -> u64;
}

/// Time is the shared simulator's; waiting runs the simulation.
#[derive(Debug)]
pub struct SimEnv {
    world: SharedWorld,
}

impl SimEnv {
    pub fn new(world: SharedWorld) -> Self {
        SimEnv { world }
    }
}

impl ControllerEnv for SimEnv {
    fn now_us(&mut self) -> u64 {
        self.world.borrow().sim.now_us()
    }

    fn wait_until(&mut self, abs_us: u64) {
        self.world.borrow_mut().sim.run_until(abs_us);
    }

    fn poll_interval_us(&self) -> u64 {
        100_000
    }
}

#[derive(Debug, Default)]
pub struct SystemEnv {
    clock: SystemClock,
}

impl ControllerEnv for SystemEnv {
    fn now_us(&mut self) -> u64 {
        self.clock.now_us()
    }

    fn wait_until(&mut self, abs_us: u64) {
        self.clock.sleep_until(abs_us);
    }

    fn poll_interval_us(&self) -> u64 {
        200_000
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControllerConfig {
    pub lead_time_us: u64,
    pub seed: u64,
    pub duplicate_policy: DuplicatePolicy,
    pub inactivity_timeout_us: u64,
}

/// What came back from one agent.
#[derive(Debug, Clone, Default)]
pub struct NodeResult {
    pub status: Option<StatusReport>,
    pub capture: Option<Trace>,
    pub error: Option<String>,
    pub clock_offset_us: Option<i64>,
}

#[derive(Debug, Clone)]
pub struct RunResults {
    pub sync_epoch_us: u64,
    pub nodes: BTreeMap<String, NodeResult>,
    /// Agent-level problems; any entry marks the run failed.
    pub failures: Vec<String>,
}

impl RunResults {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }
}

pub type Clients<'a> = BTreeMap<String, Box<dyn AgentClient + 'a>>;

fn expect_status(node: &str, reply: AgentMessage) -> Result<StatusReport, OrchestratorError> {
    match reply {
        AgentMessage::Status(s) => Ok(s),
        AgentMessage::Error(message) => Err(OrchestratorError::Protocol {
            node: node.to_string(),
            message,
        }),
        other => Err(OrchestratorError::Protocol {
            node: node.to_string(),
            message: format!("unexpected reply {other:?}"),
        }),
    }
}

/// Build the upload for `node`.
pub fn upload_for(plan: &NodePlan, node: &str, peers: &[PeerInfo], cfg: &ControllerConfig) -> Upload {
    let id = plan.nodes.iter().find(|n| n.as_str() == node).expect("node in plan");
    let files = plan
        .node_connections(id)
        .map(|e| {
            let trace = Trace::new(e.connection.link_type, e.connection.packets.clone());
            (encode_name(&e.connection), encode_pcap(&trace))
        })
        .collect();
    Upload {
        node: node.to_string(),
        manifest: format_manifest(&plan.manifest_for(id)),
        peers: peers.to_vec(),
        duplicate_policy: cfg.duplicate_policy,
        inactivity_timeout_us: cfg.inactivity_timeout_us,
        seed: cfg.seed,
        files,
    }
}

/// Latest time by which every engine must have finished, even if each
/// one ran into its inactivity timeout.
fn run_deadline(plan: &NodePlan, sync_epoch_us: u64, cfg: &ControllerConfig) -> u64 {
    let longest = plan
        .entries
        .iter()
        .map(|e| e.connection.offset_us + (e.connection.packets.last().map_or(0, |p| p.ts_us) - e.connection.first_ts()))
        .max()
        .unwrap_or(0);
    sync_epoch_us + longest + 3 * cfg.inactivity_timeout_us + 10_000_000
}

/// Execute a split plan on the given agents.
///
/// Every agent must answer a status probe and accept its upload before
/// any Start is sent; otherwise nothing is started and an error returns.
pub fn drive_run(
    plan: &NodePlan,
    peers: &[PeerInfo],
    clients: &mut Clients<'_>,
    env: &mut dyn ControllerEnv,
    cfg: &ControllerConfig,
) -> Result<RunResults, OrchestratorError> {
    let nodes: Vec<String> = plan.nodes.iter().map(|n| n.to_string()).collect();
    for node in &nodes {
        let client = clients
            .get_mut(node)
            .ok_or_else(|| OrchestratorError::MissingAgent(node.clone()))?;
        client
            .request(&AgentMessage::StatusRequest)
            .and_then(|r| expect_status(node, r))
            .map_err(|e| OrchestratorError::Unreachable {
                node: node.clone(),
                reason: e.to_string(),
            })?;
    }

    let mut results = RunResults {
        sync_epoch_us: 0,
        nodes: BTreeMap::new(),
        failures: Vec::new(),
    };
    for node in &nodes {
        let upload = upload_for(plan, node, peers, cfg);
        let status = clients.get_mut(node).unwrap().request(&AgentMessage::Upload(upload));
        let status = status.and_then(|r| expect_status(node, r))?;
        for (file, why) in &status.rejections {
            results.failures.push(format!("{node}: rejected {file}: {why}"));
        }
        results.nodes.insert(node.clone(), NodeResult::default());
    }

    let sync_epoch_us = env.now_us() + cfg.lead_time_us;
    results.sync_epoch_us = sync_epoch_us;
    let start = AgentMessage::Start(StartCommand {
        sync_epoch_us,
        lead_time_us: cfg.lead_time_us,
    });
    let mut pending = Vec::new();
    for node in &nodes {
        match clients.get_mut(node).unwrap().request(&start).and_then(|r| expect_status(node, r)) {
            Ok(_) => pending.push(node.clone()),
            Err(e) => {
                results.failures.push(format!("{node}: start failed: {e}"));
                results.nodes.get_mut(node).unwrap().error = Some(e.to_string());
            }
        }
    }

    let deadline = run_deadline(plan, sync_epoch_us, cfg);
    while !pending.is_empty() {
        let now = env.now_us();
        if now > deadline {
            for node in pending.drain(..) {
                results.failures.push(format!("{node}: did not finish in time"));
            }
            break;
        }
        env.wait_until(now + env.poll_interval_us());
        let mut still = Vec::new();
        for node in pending.drain(..) {
            let before = env.now_us();
            let reply = clients.get_mut(&node).unwrap().request(&AgentMessage::StatusRequest);
            let after = env.now_us();
            let r = results.nodes.get_mut(&node).unwrap();
            match reply.and_then(|m| expect_status(&node, m)) {
                Ok(status) => {
                    let midpoint = before + (after - before) / 2;
                    r.clock_offset_us = Some(status.agent_clock_us as i64 - midpoint as i64);
                    let done = status.phase == AgentPhase::Finished;
                    r.status = Some(status);
                    if !done {
                        still.push(node);
                    }
                }
                Err(e) => {
                    results.failures.push(format!("{node}: lost during replay: {e}"));
                    r.error = Some(e.to_string());
                }
            }
        }
        pending = still;
    }

    for node in &nodes {
        let r = results.nodes.get_mut(node).unwrap();
        if r.error.is_some() || r.status.as_ref().is_none_or(|s| s.phase != AgentPhase::Finished) {
            continue;
        }
        match clients.get_mut(node).unwrap().request(&AgentMessage::FetchRequest) {
            Ok(AgentMessage::Capture(bytes)) => match crate::pcap::parse_pcap(&bytes) {
                Ok((trace, _)) => r.capture = Some(trace),
                Err(e) => results.failures.push(format!("{node}: unreadable capture: {e}")),
            },
            Ok(other) => results.failures.push(format!("{node}: fetch failed: {other:?}")),
            Err(e) => results.failures.push(format!("{node}: fetch failed: {e}")),
        }
    }
    Ok(results)
}
