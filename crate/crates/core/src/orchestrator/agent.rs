//! Agent: receives a node's workload, starts its engines at the
//! synchronized epoch, reports progress and hands back the capture.
//!
//! The protocol logic in [`Agent`] is independent of how engines run;
//! a [`Runtime`] supplies that, either on the shared simulator
//! ([`SimRuntime`]) or on real UDP sockets and threads ([`UdpRuntime`]).

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use super::wire::{
    AgentMessage, AgentPhase, ConnectionState, ConnectionStatus, PeerInfo, StartCommand, StatusReport, Upload,
};
use super::{connection_seed, mix_seed};
use crate::clock::{Clock, SystemClock};
use crate::harness::{DatagramHub, EndpointId, EngineId, LinkParams, Simulation, TapFilter, TapId, TransportError};
use crate::harness::{capture, DEFAULT_MTU};
use crate::packet::LinkType;
use crate::pcap::{self, Trace};
use crate::replay::{apply_policy, run_engine, DuplicatePolicy, EngineSnapshot, ReplayConfig, ReplayEngine, ReplayStatus};
use crate::schedule::{build_schedule, Schedule};
use crate::splitter::{connection_from_parts, parse_manifest, validate_connection, ConnectionTrace};

/// One side of one connection, ready to run.
#[derive(Debug)]
pub struct ReplayJob {
    pub name: String,
    pub initiator: bool,
    pub peer: PeerInfo,
    pub schedule: Schedule,
    pub cfg: ReplayConfig,
}

/// Execution backend for an agent's engines.
pub trait Runtime {
    fn now_us(&self) -> u64;

    /// Start all jobs. Each schedule already carries its start time.
    fn launch(&mut self, node: &str, link_type: LinkType, jobs: Vec<ReplayJob>) -> Result<(), String>;

    /// Engine states, in launch order.
    fn snapshots(&self) -> Vec<EngineSnapshot>;

    /// Everything recorded for locally initiated connections.
    fn capture(&self) -> Trace;
}

#[derive(Debug)]
struct Prepared {
    name: String,
    connection: ConnectionTrace,
    initiator_node: String,
    responder_node: String,
}

#[derive(Debug)]
struct Workload {
    node: String,
    peers: Vec<PeerInfo>,
    policy: DuplicatePolicy,
    inactivity_timeout_us: u64,
    seed: u64,
    connections: Vec<Prepared>,
}

#[derive(Debug)]
pub struct Agent<R: Runtime> {
    runtime: R,
    phase: AgentPhase,
    node: String,
    workload: Option<Workload>,
    /// (file name, initiator role) per launched engine.
    launched: Vec<(String, bool)>,
    warnings: Vec<String>,
    rejections: Vec<(String, String)>,
}

impl<R: Runtime> Agent<R> {
    pub fn new(runtime: R) -> Self {
        Agent {
            runtime,
            phase: AgentPhase::Idle,
            node: String::new(),
            workload: None,
            launched: Vec::new(),
            warnings: Vec::new(),
            rejections: Vec::new(),
        }
    }

    pub fn runtime(&self) -> &R {
        &self.runtime
    }

    pub fn phase(&self) -> AgentPhase {
        self.phase
    }

    /// Answer one control message.
    pub fn handle(&mut self, msg: AgentMessage) -> AgentMessage {
        match msg {
            AgentMessage::Upload(u) => self.upload(u),
            AgentMessage::Start(s) => self.start(s),
            AgentMessage::StatusRequest => AgentMessage::Status(self.status()),
            AgentMessage::FetchRequest => self.fetch(),
            other => AgentMessage::Error(format!("unexpected message from controller: {}", kind(&other))),
        }
    }

    fn upload(&mut self, u: Upload) -> AgentMessage {
        if self.phase == AgentPhase::Running {
            return AgentMessage::Error("upload rejected: replay in progress".into());
        }
        let manifest = match parse_manifest(&u.manifest) {
            Ok(m) => m,
            Err(e) => return AgentMessage::Error(format!("bad manifest: {e}")),
        };
        if !u.peers.iter().any(|p| p.node == u.node) {
            return AgentMessage::Error(format!("node {} missing from peer list", u.node));
        }
        self.node = u.node.clone();
        self.launched.clear();
        self.warnings.clear();
        self.rejections.clear();

        let known: BTreeSet<&str> = u.peers.iter().map(|p| p.node.as_str()).collect();
        let mut files: HashMap<&str, &[u8]> = u.files.iter().map(|(n, d)| (n.as_str(), d.as_slice())).collect();
        let mut connections = Vec::new();
        for line in &manifest {
            let name = line.name.as_str();
            let Some(bytes) = files.remove(name) else {
                self.rejections.push((name.to_string(), "listed in manifest but not uploaded".into()));
                continue;
            };
            let (init, resp) = (line.initiator_node.as_str(), line.responder_node.as_str());
            let verdict = (|| {
                if init != u.node && resp != u.node {
                    return Err(format!("node {} takes no part in this connection", u.node));
                }
                if let Some(n) = [init, resp].into_iter().find(|n| !known.contains(n)) {
                    return Err(format!("no address for node {n}"));
                }
                let (trace, _) = pcap::parse_pcap(bytes).map_err(|e| e.to_string())?;
                let c = connection_from_parts(name, trace.link_type, trace.packets).map_err(|e| e.to_string())?;
                validate_connection(&c)?;
                Ok(c)
            })();
            match verdict {
                Ok(connection) => connections.push(Prepared {
                    name: name.to_string(),
                    connection,
                    initiator_node: init.to_string(),
                    responder_node: resp.to_string(),
                }),
                Err(reason) => self.rejections.push((name.to_string(), reason)),
            }
        }
        for name in files.keys() {
            self.rejections.push((name.to_string(), "not listed in manifest".into()));
        }
        self.rejections.sort();
        self.workload = Some(Workload {
            node: u.node,
            peers: u.peers,
            policy: u.duplicate_policy,
            inactivity_timeout_us: u.inactivity_timeout_us,
            seed: u.seed,
            connections,
        });
        self.phase = AgentPhase::Uploaded;
        AgentMessage::Status(self.status())
    }

    fn start(&mut self, s: StartCommand) -> AgentMessage {
        match self.phase {
            AgentPhase::Idle => return AgentMessage::Error("start before upload".into()),
            AgentPhase::Running | AgentPhase::Finished => {
                self.warnings.push("duplicate start ignored".into());
                return AgentMessage::Status(self.status());
            }
            AgentPhase::Uploaded => {}
        }
        let w = self.workload.as_ref().expect("uploaded agent has a workload");
        let peer = |n: &str| w.peers.iter().find(|p| p.node == n).cloned().expect("peers checked on upload");
        let me = peer(&w.node);
        let cfg = ReplayConfig {
            inactivity_timeout_us: w.inactivity_timeout_us,
            duplicate_policy: w.policy,
            ..ReplayConfig::default()
        };
        let mut link_type = LinkType::Ethernet;
        let mut jobs = Vec::new();
        for p in &w.connections {
            link_type = p.connection.link_type;
            let replayed = apply_policy(&p.connection, w.policy);
            let start = s.sync_epoch_us + p.connection.offset_us;
            let roles = [(true, &p.initiator_node, &p.responder_node), (false, &p.responder_node, &p.initiator_node)];
            for (initiator, mine, other) in roles {
                if *mine != w.node {
                    continue;
                }
                let remote = peer(other);
                let seed = connection_seed(w.seed, p.connection.stream_index, initiator);
                let schedule = build_schedule(&replayed, initiator, me.replay_ip, remote.replay_ip, start, seed);
                jobs.push(ReplayJob {
                    name: p.name.clone(),
                    initiator,
                    peer: remote,
                    schedule,
                    cfg,
                });
            }
        }
        self.launched = jobs.iter().map(|j| (j.name.clone(), j.initiator)).collect();
        let node = w.node.clone();
        if let Err(e) = self.runtime.launch(&node, link_type, jobs) {
            self.launched.clear();
            return AgentMessage::Error(format!("launch failed: {e}"));
        }
        self.phase = AgentPhase::Running;
        AgentMessage::Status(self.status())
    }

    pub fn status(&mut self) -> StatusReport {
        let snaps = if self.phase == AgentPhase::Running || self.phase == AgentPhase::Finished {
            self.runtime.snapshots()
        } else {
            Vec::new()
        };
        if self.phase == AgentPhase::Running && snaps.iter().all(|s| s.status.is_some()) {
            self.phase = AgentPhase::Finished;
        }
        let connections = self
            .launched
            .iter()
            .zip(&snaps)
            .map(|((name, initiator), s)| connection_status(name, *initiator, s))
            .collect();
        StatusReport {
            node: self.node.clone(),
            phase: self.phase,
            agent_clock_us: self.runtime.now_us(),
            connections,
            warnings: self.warnings.clone(),
            rejections: self.rejections.clone(),
        }
    }

    fn fetch(&mut self) -> AgentMessage {
        self.status();
        match self.phase {
            AgentPhase::Finished => AgentMessage::Capture(pcap::encode_pcap(&self.runtime.capture())),
            AgentPhase::Running => AgentMessage::Error("replay still running".into()),
            _ => AgentMessage::Error("nothing has been replayed".into()),
        }
    }
}

fn kind(m: &AgentMessage) -> &'static str {
    match m {
        AgentMessage::Upload(_) => "upload",
        AgentMessage::Start(_) => "start",
        AgentMessage::StatusRequest | AgentMessage::Status(_) => "status",
        AgentMessage::FetchRequest | AgentMessage::Capture(_) => "fetch",
        AgentMessage::Error(_) => "error",
    }
}

fn connection_status(name: &str, initiator: bool, s: &EngineSnapshot) -> ConnectionStatus {
    let (state, reason) = match &s.status {
        None if s.cursor == 0 && s.first_send_us.is_none() => (ConnectionState::Pending, String::new()),
        None => (ConnectionState::Running, String::new()),
        Some(ReplayStatus::Completed) => (ConnectionState::Completed, String::new()),
        Some(ReplayStatus::TimedOut) => (ConnectionState::TimedOut, "inactivity timeout".to_string()),
        Some(ReplayStatus::Aborted(r)) => (ConnectionState::Aborted, r.to_string()),
    };
    let n = |v: usize| v.min(u32::MAX as usize) as u32;
    ConnectionStatus {
        name: name.to_string(),
        initiator,
        state,
        sent: n(s.sent_count),
        received: n(s.received_count),
        unexpected: n(s.unexpected_count),
        duplicate: n(s.duplicate_count),
        missed: n(s.missed_count),
        first_send_us: s.first_send_us.unwrap_or(0),
        reason,
    }
}

/// The simulator shared by every in-process agent of a run, plus one link
/// per pair of nodes.
#[derive(Debug)]
pub struct SimWorld {
    pub sim: Simulation,
    link: LinkParams,
    links: BTreeMap<(String, String), (EndpointId, EndpointId)>,
}

pub type SharedWorld = Rc<RefCell<SimWorld>>;

impl SimWorld {
    pub fn new(start_us: u64, link_type: LinkType, link: LinkParams) -> Self {
        SimWorld {
            sim: Simulation::new(start_us, link_type),
            link,
            links: BTreeMap::new(),
        }
    }

    pub fn shared(self) -> SharedWorld {
        Rc::new(RefCell::new(self))
    }

    /// Endpoint on `me`'s side of the link to `peer`. Both ends of a
    /// loopback link belong to `me`; the initiator gets the first. Loopback
    /// links are unimpaired, like the in-memory pairs of a live agent.
    fn endpoint(&mut self, me: &str, peer: &str, initiator: bool) -> Result<EndpointId, TransportError> {
        let key = if me <= peer {
            (me.to_string(), peer.to_string())
        } else {
            (peer.to_string(), me.to_string())
        };
        let ends = match self.links.get(&key) {
            Some(e) => *e,
            None => {
                let base = if me == peer { LinkParams::default() } else { self.link };
                let params = LinkParams {
                    seed: mix_seed(self.link.seed, self.links.len() as u64),
                    ..base
                };
                let e = self.sim.simulated_link(params)?;
                self.links.insert(key.clone(), e);
                e
            }
        };
        Ok(match (me == peer, initiator, key.0 == me) {
            (true, true, _) | (false, _, true) => ends.0,
            _ => ends.1,
        })
    }
}

#[derive(Debug)]
pub struct SimRuntime {
    world: SharedWorld,
    engines: Vec<EngineId>,
    tap: Option<TapId>,
}

impl SimRuntime {
    pub fn new(world: SharedWorld) -> Self {
        SimRuntime {
            world,
            engines: Vec::new(),
            tap: None,
        }
    }
}

impl Runtime for SimRuntime {
    fn now_us(&self) -> u64 {
        self.world.borrow().sim.now_us()
    }

    fn launch(&mut self, node: &str, _link_type: LinkType, jobs: Vec<ReplayJob>) -> Result<(), String> {
        let mut world = self.world.borrow_mut();
        let mut tapped = BTreeSet::new();
        let mut ports = BTreeSet::new();
        for job in jobs {
            let ep = world
                .endpoint(node, &job.peer.node, job.initiator)
                .map_err(|e| e.to_string())?;
            if job.initiator {
                tapped.insert(ep);
                ports.insert(job.schedule.replay_port);
            }
            let engine = ReplayEngine::new(job.schedule, job.cfg);
            self.engines.push(world.sim.add_engine(ep, engine).map_err(|e| e.to_string())?);
        }
        let tapped: Vec<EndpointId> = tapped.into_iter().collect();
        self.tap = Some(world.sim.add_tap(&tapped, TapFilter::Ports(ports)));
        Ok(())
    }

    fn snapshots(&self) -> Vec<EngineSnapshot> {
        let world = self.world.borrow();
        self.engines.iter().map(|id| world.sim.engine(*id).snapshot()).collect()
    }

    fn capture(&self) -> Trace {
        let world = self.world.borrow();
        match self.tap {
            Some(t) => world.sim.capture(t),
            None => Trace::empty(world.sim.link_type()),
        }
    }
}

/// Engines on threads, packets over a UDP socket, wall-clock time.
pub struct UdpRuntime {
    hub: DatagramHub,
    clock: Arc<SystemClock>,
    slots: Vec<Arc<Mutex<EngineSnapshot>>>,
    threads: Vec<JoinHandle<()>>,
    tap: Option<usize>,
    link_type: LinkType,
}

impl std::fmt::Debug for UdpRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UdpRuntime").field("hub", &self.hub).finish_non_exhaustive()
    }
}

impl UdpRuntime {
    pub fn bind(addr: SocketAddr) -> Result<Self, TransportError> {
        let clock = Arc::new(SystemClock::new());
        let hub = DatagramHub::bind(addr, LinkType::Ethernet, DEFAULT_MTU, clock.clone())?;
        Ok(UdpRuntime {
            hub,
            clock,
            slots: Vec::new(),
            threads: Vec::new(),
            tap: None,
            link_type: LinkType::Ethernet,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        self.hub.local_addr()
    }
}

impl Runtime for UdpRuntime {
    fn now_us(&self) -> u64 {
        self.clock.now_us()
    }

    fn launch(&mut self, node: &str, link_type: LinkType, jobs: Vec<ReplayJob>) -> Result<(), String> {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.slots.clear();
        self.link_type = link_type;
        self.hub.set_link_type(link_type);
        let ports: BTreeSet<u16> = jobs.iter().filter(|j| j.initiator).map(|j| j.schedule.replay_port).collect();
        self.tap = Some(self.hub.add_tap(TapFilter::Ports(ports)));

        // Open every port before any engine starts so no early frame is lost.
        let mut loopback = HashMap::new();
        let mut ready = Vec::new();
        for job in jobs {
            let port = job.schedule.replay_port;
            let transport = if job.peer.node == node {
                match loopback.remove(&port) {
                    Some(other_half) => other_half,
                    None => {
                        let (mine, other) = self.hub.loopback_pair(port);
                        loopback.insert(port, other);
                        mine
                    }
                }
            } else {
                let addr = job
                    .peer
                    .datagram_addr
                    .ok_or_else(|| format!("node {} has no datagram address", job.peer.node))?;
                self.hub.connect(port, addr).map_err(|e| e.to_string())?
            };
            ready.push((job, transport));
        }
        for (job, mut transport) in ready {
            let mut engine = ReplayEngine::new(job.schedule, job.cfg);
            let slot = Arc::new(Mutex::new(engine.snapshot()));
            self.slots.push(slot.clone());
            let clock = self.clock.clone();
            let handle = thread::Builder::new()
                .name(format!("replay-{}", job.name))
                .spawn(move || {
                    run_engine(&mut engine, &mut transport, &*clock, |e| *slot.lock().unwrap() = e.snapshot());
                })
                .map_err(|e| e.to_string())?;
            self.threads.push(handle);
        }
        Ok(())
    }

    fn snapshots(&self) -> Vec<EngineSnapshot> {
        self.slots.iter().map(|s| s.lock().unwrap().clone()).collect()
    }

    fn capture(&self) -> Trace {
        match self.tap {
            Some(t) => capture(&self.hub.tap(t)),
            None => Trace::empty(self.link_type),
        }
    }
}
