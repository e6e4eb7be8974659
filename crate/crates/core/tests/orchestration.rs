use std::cell::RefCell;
use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use meshplay::analyzer;
use meshplay::harness::LinkParams;
use meshplay::orchestrator::agent::{Agent, SimRuntime, SimWorld};
use meshplay::orchestrator::controller::{drive_run, upload_for, AgentClient, Clients, ControllerConfig, InProcessClient, SimEnv};
use meshplay::orchestrator::server::AgentServer;
use meshplay::orchestrator::wire::{AgentMessage, AgentPhase, StartCommand};
use meshplay::orchestrator::{self, peers_for, OrchestratorError, RunConfig, RunRecord, SIM_EPOCH_US};
use meshplay::pcap::{self, Trace};
use meshplay::replay::DuplicatePolicy;
use meshplay::splitter::{split_trace, NodePlan};
use meshplay::synth::{self, PublicStyle};

fn controller_cfg() -> ControllerConfig {
    ControllerConfig {
        lead_time_us: 3_000_000,
        seed: 5,
        duplicate_policy: DuplicatePolicy::Strict,
        inactivity_timeout_us: 10_000_000,
    }
}

fn small_plan(nodes: usize) -> NodePlan {
    let style = PublicStyle {
        connections: 10,
        hosts: 4,
        ..Default::default()
    };
    split_trace(&style.build(), "lab", &style.mapping(nodes), 20000).unwrap().plan
}

/// Forwards to an inner client and records every message kind it saw.
struct Recording<'a, C> {
    inner: C,
    log: Rc<RefCell<Vec<String>>>,
    node: &'a str,
}

impl<C: AgentClient> AgentClient for Recording<'_, C> {
    fn request(&mut self, msg: &AgentMessage) -> Result<AgentMessage, OrchestratorError> {
        let kind = match msg {
            AgentMessage::Upload(_) => "upload",
            AgentMessage::Start(_) => "start",
            AgentMessage::StatusRequest => "status",
            AgentMessage::FetchRequest => "fetch",
            _ => "other",
        };
        self.log.borrow_mut().push(format!("{}:{kind}", self.node));
        self.inner.request(msg)
    }
}

struct Down;

impl AgentClient for Down {
    fn request(&mut self, _: &AgentMessage) -> Result<AgentMessage, OrchestratorError> {
        Err(OrchestratorError::Io(std::io::Error::new(std::io::ErrorKind::ConnectionRefused, "refused")))
    }
}

#[test]
fn captures_of_all_agents_cover_every_packet() {
    let plan = small_plan(2);
    let world = SimWorld::new(SIM_EPOCH_US, plan.link_type, LinkParams::default()).shared();
    let mut clients: Clients<'_> = BTreeMap::new();
    for n in &plan.nodes {
        clients.insert(n.to_string(), Box::new(InProcessClient::new(Agent::new(SimRuntime::new(world.clone())))));
    }
    let peers = peers_for(&plan, &BTreeMap::new());
    let results = drive_run(&plan, &peers, &mut clients, &mut SimEnv::new(world), &controller_cfg()).unwrap();
    assert!(!results.failed(), "{:?}", results.failures);
    let captured: usize = results.nodes.values().map(|r| r.capture.as_ref().unwrap().len()).sum();
    let original: usize = plan.entries.iter().map(|e| e.connection.packets.len()).sum();
    assert_eq!(captured, original);
    for r in results.nodes.values() {
        let s = r.status.as_ref().unwrap();
        assert_eq!(s.phase, AgentPhase::Finished);
        assert!(s.connections.iter().all(|c| c.state.as_str() == "completed"));
    }
}

#[test]
fn unreachable_agent_means_nothing_starts() {
    let plan = small_plan(3);
    let world = SimWorld::new(SIM_EPOCH_US, plan.link_type, LinkParams::default()).shared();
    let log = Rc::new(RefCell::new(Vec::new()));
    let names: Vec<String> = plan.nodes.iter().map(|n| n.to_string()).collect();
    let mut clients: Clients<'_> = BTreeMap::new();
    for (i, n) in names.iter().enumerate() {
        let client: Box<dyn AgentClient> = if i == 1 {
            Box::new(Recording {
                inner: Down,
                log: log.clone(),
                node: n,
            })
        } else {
            Box::new(Recording {
                inner: InProcessClient::new(Agent::new(SimRuntime::new(world.clone()))),
                log: log.clone(),
                node: n,
            })
        };
        clients.insert(n.clone(), client);
    }
    let peers = peers_for(&plan, &BTreeMap::new());
    let err = drive_run(&plan, &peers, &mut clients, &mut SimEnv::new(world.clone()), &controller_cfg()).unwrap_err();
    assert!(matches!(err, OrchestratorError::Unreachable { ref node, .. } if *node == names[1]), "{err}");
    let log = log.borrow();
    assert!(log.iter().all(|m| !m.ends_with(":start") && !m.ends_with(":upload")), "{log:?}");
    // No engine was ever created.
    assert_eq!(world.borrow().sim.engine_count(), 0);
}

#[test]
fn agent_rejects_out_of_order_commands() {
    let plan = small_plan(2);
    let world = SimWorld::new(SIM_EPOCH_US, plan.link_type, LinkParams::default()).shared();
    let mut agent = Agent::new(SimRuntime::new(world.clone()));
    let start = AgentMessage::Start(StartCommand {
        sync_epoch_us: SIM_EPOCH_US + 1_000_000,
        lead_time_us: 1_000_000,
    });
    assert!(matches!(agent.handle(start.clone()), AgentMessage::Error(_)));
    assert!(matches!(agent.handle(AgentMessage::FetchRequest), AgentMessage::Error(_)));

    let peers = peers_for(&plan, &BTreeMap::new());
    let node = plan.nodes.iter().next().unwrap().to_string();
    let mut upload = upload_for(&plan, &node, &peers, &controller_cfg());
    let name = upload.files[0].0.clone();
    upload.files[0].0 = "not-a-connection.pcap".into();
    upload.manifest = upload.manifest.replace(&name, "not-a-connection.pcap");
    let AgentMessage::Status(s) = agent.handle(AgentMessage::Upload(upload.clone())) else {
        panic!("upload refused");
    };
    assert_eq!(s.rejections.len(), 1);
    assert_eq!(s.rejections[0].0, "not-a-connection.pcap");
    assert_eq!(s.phase, AgentPhase::Uploaded);

    assert!(matches!(agent.handle(start.clone()), AgentMessage::Status(_)));
    // Still running: no capture yet, no re-upload.
    assert!(matches!(agent.handle(AgentMessage::FetchRequest), AgentMessage::Error(_)));
    assert!(matches!(agent.handle(AgentMessage::Upload(upload)), AgentMessage::Error(_)));
    let AgentMessage::Status(s) = agent.handle(start) else { panic!() };
    assert!(s.warnings.iter().any(|w| w.contains("duplicate start")));
}

fn serve(shutdown: &Arc<AtomicBool>) -> (SocketAddr, thread::JoinHandle<()>) {
    let server = AgentServer::bind("127.0.0.1:0".parse().unwrap()).unwrap();
    let addr = server.local_addr();
    let flag = shutdown.clone();
    let h = thread::spawn(move || server.serve(&flag).unwrap());
    (addr, h)
}

#[test]
fn live_run_against_two_agents_on_localhost() {
    let shutdown = Arc::new(AtomicBool::new(false));
    let (a, ha) = serve(&shutdown);
    let (b, hb) = serve(&shutdown);
    let agents: BTreeMap<String, SocketAddr> = [("a".to_string(), a), ("b".to_string(), b)].into();

    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("desk.pcap");
    pcap::write_pcap(&synth::offsets_trace(&[0, 50_000]), &input).unwrap();
    let cfg = RunConfig {
        lead_time_us: 300_000,
        base_port: 26000,
        ..Default::default()
    };
    let run_dir = dir.path().join("run");
    let record = orchestrator::run_live(&input, &synth::two_node_mapping(), &agents, &cfg, &run_dir).unwrap();
    shutdown.store(true, Ordering::Release);
    ha.join().unwrap();
    hb.join().unwrap();

    assert!(record.all_completed(), "{record:#?}");
    assert_eq!(RunRecord::load(&run_dir).unwrap(), record);
    let cap: Trace = pcap::read_pcap(orchestrator::capture_path(&run_dir, "a")).unwrap();
    assert_eq!(cap.len(), record.connections.iter().map(|c| c.packets).sum::<usize>());
    let report = analyzer::analyze_run_dir(&run_dir).unwrap();
    assert_eq!(report.missing_count(), 0);
    // Local packets leave on time; wall-clock scheduling stays well inside 50 ms.
    for d in report.deviations() {
        assert!(d.deviation_us.abs() < 50_000, "{d:?}");
    }
}

#[test]
fn missing_agent_address_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x.pcap");
    pcap::write_pcap(&synth::handshake_trace(), &input).unwrap();
    let agents: BTreeMap<String, SocketAddr> = [("a".to_string(), "127.0.0.1:9".parse().unwrap())].into();
    let err = orchestrator::run_live(&input, &synth::two_node_mapping(), &agents, &RunConfig::default(), &dir.path().join("r"))
        .unwrap_err();
    assert!(matches!(err, OrchestratorError::MissingAgent(ref n) if n == "b"), "{err}");
}
