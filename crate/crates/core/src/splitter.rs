//! Splitting a capture into per-connection workloads.
//!
//! The pipeline is `extract_flows` → `filter_handshakes` → `assign_ports`
//! → `compute_offsets` → `partition`. Connection files are named with
//! [`encode_name`] so a node can recover every replay parameter from the
//! file name alone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::checksum;
use crate::packet::{FlowKey, LinkType, PacketRecord};
use crate::pcap::{self, PcapError, Trace};

pub const DEFAULT_BASE_PORT: u16 = 20000;
pub const MANIFEST_FILE: &str = "manifest.txt";

/// A single TCP connection cut out of a capture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionTrace {
    /// Order of first appearance in the input capture.
    pub stream_index: u32,
    pub packets: Vec<PacketRecord>,
    pub initiator_ip: Ipv4Addr,
    pub responder_ip: Ipv4Addr,
    /// Port used on both sides during replay; 0 until assigned.
    pub replay_port: u16,
    /// Start delay relative to the earliest connection of the capture.
    pub offset_us: u64,
    pub source_name: String,
    pub link_type: LinkType,
}

impl ConnectionTrace {
    pub fn first_ts(&self) -> u64 {
        self.packets.first().map_or(0, |p| p.ts_us)
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    /// Whether `p` travels from the initiator to the responder.
    pub fn is_from_initiator(&self, p: &PacketRecord) -> bool {
        p.src_ip == self.initiator_ip
    }

    pub fn file_name(&self) -> String {
        encode_name(self)
    }
}

/// Reasons a flow does not become a replayable connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    /// Fewer than three packets: there is no complete handshake.
    TooShort,
    /// The first packet is not a connection-opening SYN.
    NoInitialSyn,
    /// Both endpoints share one IP; direction would be lost by re-porting.
    SameHost,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::TooShort => "fewer than 3 packets",
            DropReason::NoInitialSyn => "no initial SYN",
            DropReason::SameHost => "both endpoints on one IP",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedFlow {
    pub stream_index: u32,
    pub packets: usize,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Default)]
pub struct FilterReport {
    pub kept: Vec<ConnectionTrace>,
    pub dropped: Vec<DroppedFlow>,
}

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("port space exhausted: base port {base} plus {flows} connections exceeds 65535")]
    PortSpaceExhausted { base: u16, flows: usize },
    #[error("no node mapping for {}", list_ips(.0))]
    Unmapped(Vec<Ipv4Addr>),
    #[error("mapping line {line}: {reason}")]
    MappingSyntax { line: usize, reason: String },
    #[error("invalid node id {0:?}")]
    BadNodeId(String),
    #[error(transparent)]
    Name(#[from] NameError),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn list_ips(ips: &[Ipv4Addr]) -> String {
    ips.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Group packets into streams by flow key, starting a new stream when a
/// fresh SYN (different initial sequence number) reuses a 4-tuple.
pub fn extract_flows(trace: &Trace, source_name: &str) -> Vec<ConnectionTrace> {
    struct Open {
        flow: usize,
        syn_seq: Option<u32>,
    }
    let mut flows: Vec<ConnectionTrace> = Vec::new();
    let mut open: HashMap<FlowKey, Open> = HashMap::new();

    for p in &trace.packets {
        let key = p.flow_key();
        let opening = p.flags.is_initial_syn();
        let reuse = match open.get(&key) {
            Some(o) => opening && o.syn_seq != Some(p.seq),
            None => true,
        };
        if reuse {
            flows.push(ConnectionTrace {
                stream_index: flows.len() as u32,
                packets: Vec::new(),
                initiator_ip: p.src_ip,
                responder_ip: p.dst_ip,
                replay_port: 0,
                offset_us: 0,
                source_name: source_name.to_string(),
                link_type: trace.link_type,
            });
            open.insert(
                key,
                Open {
                    flow: flows.len() - 1,
                    syn_seq: opening.then_some(p.seq),
                },
            );
        }
        let flow = open[&key].flow;
        flows[flow].packets.push(p.clone());
    }
    flows
}

/// Keep flows that start with a SYN and hold at least three packets.
pub fn filter_handshakes(flows: Vec<ConnectionTrace>) -> FilterReport {
    let mut report = FilterReport::default();
    for flow in flows {
        let reason = if flow.packets.len() < 3 {
            Some(DropReason::TooShort)
        } else if !flow.packets[0].flags.is_initial_syn() {
            Some(DropReason::NoInitialSyn)
        } else if flow.initiator_ip == flow.responder_ip {
            Some(DropReason::SameHost)
        } else {
            None
        };
        match reason {
            Some(reason) => report.dropped.push(DroppedFlow {
                stream_index: flow.stream_index,
                packets: flow.packets.len(),
                reason,
            }),
            None => report.kept.push(flow),
        }
    }
    report
}

/// Give connection `i` the port `base_port + i` on both sides and
/// recompute checksums.
pub fn assign_ports(
    mut flows: Vec<ConnectionTrace>,
    base_port: u16,
) -> Result<Vec<ConnectionTrace>, SplitError> {
    if u32::from(base_port) + flows.len() as u32 > u32::from(u16::MAX) {
        return Err(SplitError::PortSpaceExhausted {
            base: base_port,
            flows: flows.len(),
        });
    }
    for (i, flow) in flows.iter_mut().enumerate() {
        let port = base_port + i as u16;
        flow.replay_port = port;
        for p in &mut flow.packets {
            p.src_port = port;
            p.dst_port = port;
            checksum::fix_checksums_in_place(p);
        }
    }
    Ok(flows)
}

/// Offset of each flow's first packet from the earliest first packet.
pub fn compute_offsets(mut flows: Vec<ConnectionTrace>) -> Vec<ConnectionTrace> {
    let Some(start) = flows.iter().map(ConnectionTrace::first_ts).min() else {
        return flows;
    };
    for flow in &mut flows {
        flow.offset_us = flow.first_ts() - start;
    }
    flows
}

/// Checks every invariant of a kept, re-ported connection.
pub fn validate_connection(c: &ConnectionTrace) -> Result<(), String> {
    if c.packets.len() < 3 {
        return Err(format!("stream {} has {} packets", c.stream_index, c.packets.len()));
    }
    let first = &c.packets[0];
    if !first.flags.is_initial_syn() {
        return Err(format!("stream {} does not open with SYN", c.stream_index));
    }
    if first.src_ip != c.initiator_ip {
        return Err(format!("stream {} first packet not from initiator", c.stream_index));
    }
    let key = first.flow_key();
    for (i, p) in c.packets.iter().enumerate() {
        if p.flow_key() != key {
            return Err(format!("stream {} packet {i} has a different flow key", c.stream_index));
        }
        if c.replay_port != 0 && (p.src_port != c.replay_port || p.dst_port != c.replay_port) {
            return Err(format!("stream {} packet {i} not on replay port", c.stream_index));
        }
        if !checksum::checksums_valid(p) {
            return Err(format!("stream {} packet {i} has a bad checksum", c.stream_index));
        }
    }
    Ok(())
}

/// Name of a replay node (an agent endpoint).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Result<Self, SplitError> {
        let id = id.into();
        let ok = !id.is_empty()
            && id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
        if ok {
            Ok(NodeId(id))
        } else {
            Err(SplitError::BadNodeId(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for NodeId {
    type Err = SplitError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeId::new(s)
    }
}

/// Which replay node stands in for each original IP.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HostMapping {
    map: BTreeMap<Ipv4Addr, NodeId>,
}

impl HostMapping {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, ip: Ipv4Addr, node: NodeId) {
        self.map.insert(ip, node);
    }

    pub fn node_of(&self, ip: Ipv4Addr) -> Option<&NodeId> {
        self.map.get(&ip)
    }

    pub fn nodes(&self) -> BTreeSet<NodeId> {
        self.map.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Ipv4Addr, &NodeId)> {
        self.map.iter()
    }

    /// Parse `<ip> <node-id>` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, SplitError> {
        let mut mapping = HostMapping::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |reason: String| SplitError::MappingSyntax { line: n + 1, reason };
            let mut fields = line.split_whitespace();
            let (Some(ip), Some(node), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(syntax("expected `<ip> <node-id>`".into()));
            };
            let ip: Ipv4Addr = ip.parse().map_err(|_| syntax(format!("bad IPv4 address {ip:?}")))?;
            let node = NodeId::new(node)?;
            if let Some(prev) = mapping.node_of(ip) {
                if *prev != node {
                    return Err(syntax(format!("{ip} already mapped to {prev}")));
                }
            }
            mapping.insert(ip, node);
        }
        Ok(mapping)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SplitError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Every IP of `flows` that has no node, sorted and deduplicated.
    pub fn unmapped(&self, flows: &[ConnectionTrace]) -> Vec<Ipv4Addr> {
        let missing: BTreeSet<Ipv4Addr> = flows
            .iter()
            .flat_map(|f| [f.initiator_ip, f.responder_ip])
            .filter(|ip| !self.map.contains_key(ip))
            .collect();
        missing.into_iter().collect()
    }
}

/// One connection with the nodes that replay its two ends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanEntry {
    pub connection: ConnectionTrace,
    pub initiator_node: NodeId,
    pub responder_node: NodeId,
}

impl PlanEntry {
    pub fn involves(&self, node: &NodeId) -> bool {
        self.initiator_node == *node || self.responder_node == *node
    }
}

/// Per-node assignment of connections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodePlan {
    pub link_type: LinkType,
    pub source_name: String,
    pub nodes: BTreeSet<NodeId>,
    pub entries: Vec<PlanEntry>,
}

impl NodePlan {
    /// Connections a node takes part in, in stream order.
    pub fn node_connections<'a>(&'a self, node: &'a NodeId) -> impl Iterator<Item = &'a PlanEntry> {
        self.entries.iter().filter(move |e| e.involves(node))
    }

    pub fn initiator_count(&self, node: &NodeId) -> usize {
        self.entries.iter().filter(|e| e.initiator_node == *node).count()
    }

    pub fn manifest_for(&self, node: &NodeId) -> Vec<ManifestLine> {
        self.node_connections(node)
            .map(|e| ManifestLine {
                name: encode_name(&e.connection),
                initiator_node: e.initiator_node.clone(),
                responder_node: e.responder_node.clone(),
            })
            .collect()
    }
}

/// Place every connection with the nodes of both of its endpoints.
pub fn partition(
    flows: Vec<ConnectionTrace>,
    mapping: &HostMapping,
    link_type: LinkType,
    source_name: &str,
) -> Result<NodePlan, SplitError> {
    let missing = mapping.unmapped(&flows);
    if !missing.is_empty() {
        return Err(SplitError::Unmapped(missing));
    }
    let entries = flows
        .into_iter()
        .map(|connection| PlanEntry {
            initiator_node: mapping.node_of(connection.initiator_ip).unwrap().clone(),
            responder_node: mapping.node_of(connection.responder_ip).unwrap().clone(),
            connection,
        })
        .collect();
    Ok(NodePlan {
        link_type,
        source_name: source_name.to_string(),
        nodes: mapping.nodes(),
        entries,
    })
}

/// Totals from a full split run.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub plan: NodePlan,
    pub input_packets: usize,
    pub dropped: Vec<DroppedFlow>,
}

impl SplitOutcome {
    pub fn kept(&self) -> usize {
        self.plan.entries.len()
    }
}

/// Run the whole splitting pipeline on a loaded trace.
pub fn split_trace(
    trace: &Trace,
    source_name: &str,
    mapping: &HostMapping,
    base_port: u16,
) -> Result<SplitOutcome, SplitError> {
    let source_name = sanitize_source_name(source_name);
    let flows = extract_flows(trace, &source_name);
    let report = filter_handshakes(flows);
    let flows = assign_ports(report.kept, base_port)?;
    let flows = compute_offsets(flows);
    let plan = partition(flows, mapping, trace.link_type, &source_name)?;
    Ok(SplitOutcome {
        plan,
        input_packets: trace.len(),
        dropped: report.dropped,
    })
}

/// Restrict a capture stem to characters that survive file names and the
/// whitespace-separated manifest.
pub fn sanitize_source_name(stem: &str) -> String {
    let cleaned: String = stem
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '-'
            }
        })
        .collect();
    if cleaned.is_empty() {
        "capture".to_string()
    } else {
        cleaned
    }
}

/// Replay parameters recovered from a connection file name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameMeta {
    pub initiator_ip: Ipv4Addr,
    pub responder_ip: Ipv4Addr,
    pub stream_index: u32,
    pub source_name: String,
    pub replay_port: u16,
    pub offset_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("not a connection file name: {name:?} ({reason})")]
pub struct NameError {
    pub name: String,
    pub reason: &'static str,
}

/// `<initiator_ip>_<responder_ip>_s<stream>_<source>_p<port>_o<offset>.pcap`
pub fn encode_name(c: &ConnectionTrace) -> String {
    format!(
        "{}_{}_s{}_{}_p{}_o{}.pcap",
        c.initiator_ip, c.responder_ip, c.stream_index, c.source_name, c.replay_port, c.offset_us
    )
}

pub fn decode_name(name: &str) -> Result<NameMeta, NameError> {
    let err = |reason| NameError {
        name: name.to_string(),
        reason,
    };
    let stem = name.strip_suffix(".pcap").ok_or_else(|| err("missing .pcap suffix"))?;
    let (rest, offset) = stem.rsplit_once("_o").ok_or_else(|| err("missing _o<offset>"))?;
    let offset_us = offset.parse().map_err(|_| err("bad offset"))?;
    let (rest, port) = rest.rsplit_once("_p").ok_or_else(|| err("missing _p<port>"))?;
    let replay_port = port.parse().map_err(|_| err("bad port"))?;
    let mut head = rest.splitn(4, '_');
    let initiator_ip = head
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err("bad initiator IP"))?;
    let responder_ip = head
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err("bad responder IP"))?;
    let stream_index = head
        .next()
        .and_then(|s| s.strip_prefix('s'))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| err("bad stream index"))?;
    let source_name = head.next().ok_or_else(|| err("missing source name"))?;
    if source_name.contains('/') {
        return Err(err("source name contains a path separator"));
    }
    Ok(NameMeta {
        initiator_ip,
        responder_ip,
        stream_index,
        source_name: source_name.to_string(),
        replay_port,
        offset_us,
    })
}

/// One manifest line: file name plus the nodes replaying each end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestLine {
    pub name: String,
    pub initiator_node: NodeId,
    pub responder_node: NodeId,
}

pub fn format_manifest(lines: &[ManifestLine]) -> String {
    lines
        .iter()
        .map(|l| format!("{} {} {}\n", l.name, l.initiator_node, l.responder_node))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestLine>, SplitError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, init, resp] = fields[..] else {
            return Err(SplitError::Manifest {
                line: n + 1,
                reason: "expected `<file> <initiator-node> <responder-node>`".into(),
            });
        };
        out.push(ManifestLine {
            name: name.to_string(),
            initiator_node: NodeId::new(init)?,
            responder_node: NodeId::new(resp)?,
        });
    }
    Ok(out)
}

/// Rebuild a connection from its file name and packets.
pub fn connection_from_parts(
    name: &str,
    link_type: LinkType,
    packets: Vec<PacketRecord>,
) -> Result<ConnectionTrace, NameError> {
    let meta = decode_name(name)?;
    Ok(ConnectionTrace {
        stream_index: meta.stream_index,
        packets,
        initiator_ip: meta.initiator_ip,
        responder_ip: meta.responder_ip,
        replay_port: meta.replay_port,
        offset_us: meta.offset_us,
        source_name: meta.source_name,
        link_type,
    })
}

pub fn load_connection(path: impl AsRef<Path>) -> Result<ConnectionTrace, SplitError> {
    let path = path.as_ref();
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| NameError {
            name: path.display().to_string(),
            reason: "not a UTF-8 file name",
        })?;
    let trace = pcap::read_pcap(path)?;
    Ok(connection_from_parts(name, trace.link_type, trace.packets)?)
}

/// Write one directory per node with its connection files and manifest.
pub fn write_plan(plan: &NodePlan, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, SplitError> {
    let out_dir = out_dir.as_ref();
    let mut dirs = Vec::new();
    for node in &plan.nodes {
        let dir = out_dir.join(node.as_str());
        fs::create_dir_all(&dir)?;
        for entry in plan.node_connections(node) {
            let trace = Trace::new(entry.connection.link_type, entry.connection.packets.clone());
            pcap::write_pcap(&trace, dir.join(encode_name(&entry.connection)))?;
        }
        fs::write(dir.join(MANIFEST_FILE), format_manifest(&plan.manifest_for(node)))?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn flow_with(n: usize, start_ts: u64, client: &str, server: &str, cport: u16) -> Vec<PacketRecord> {
        synth::ConnectionBuilder::new((ip(client), cport), (ip(server), 80), start_ts)
            .handshake()
            .exchange(n.saturating_sub(3))
            .packets()
            .into_iter()
            .take(n)
            .collect()
    }

    #[test]
    fn empty_trace_has_no_flows() {
        assert!(extract_flows(&Trace::empty(LinkType::Ethernet), "x").is_empty());
    }

    #[test]
    fn interleaved_streams_separate() {
        let a = flow_with(5, 0, "10.0.0.1", "10.0.0.2", 4000);
        let b = flow_with(4, 10, "10.0.0.3", "10.0.0.2", 4001);
        let mut packets: Vec<_> = a.iter().chain(b.iter()).cloned().collect();
        packets.sort_by_key(|p| p.ts_us);
        let flows = extract_flows(&Trace::new(LinkType::Ethernet, packets), "lab");
        assert_eq!(flows.len(), 2);
        assert_eq!(flows[0].packets.len(), 5);
        assert_eq!(flows[1].packets.len(), 4);
        assert_eq!(flows[0].initiator_ip, ip("10.0.0.1"));
    }

    #[test]
    fn reused_tuple_after_fin_starts_new_stream() {
        let first = flow_with(6, 0, "10.0.0.1", "10.0.0.2", 4000);
        let mut second = flow_with(5, 10_000_000, "10.0.0.1", "10.0.0.2", 4000);
        for p in &mut second {
            // A different ISN on the reused tuple.
            p.seq = p.seq.wrapping_add(7777);
        }
        let packets = first.into_iter().chain(second).collect();
        let flows = extract_flows(&Trace::new(LinkType::Ethernet, packets), "lab");
        assert_eq!(flows.len(), 2);
        assert_eq!((flows[0].len(), flows[1].len()), (6, 5));
    }

    #[test]
    fn retransmitted_syn_stays_in_stream() {
        let mut packets = flow_with(4, 0, "10.0.0.1", "10.0.0.2", 4000);
        let mut again = packets[0].clone();
        again.ts_us += 1;
        packets.insert(1, again);
        let flows = extract_flows(&Trace::new(LinkType::Ethernet, packets), "lab");
        assert_eq!(flows.len(), 1);
        assert_eq!(flows[0].len(), 5);
    }

    #[test]
    fn filter_boundaries() {
        let t = Trace::new(
            LinkType::Ethernet,
            [
                flow_with(2, 0, "10.0.0.1", "10.0.0.2", 1),
                flow_with(3, 1, "10.0.0.1", "10.0.0.2", 2),
            ]
            .concat(),
        );
        let report = filter_handshakes(extract_flows(&t, "x"));
        assert_eq!(report.kept.len(), 1);
        assert_eq!(report.kept[0].len(), 3);
        assert_eq!(report.dropped[0].reason, DropReason::TooShort);
    }

    #[test]
    fn midstream_flow_dropped() {
        let mut packets = flow_with(6, 0, "10.0.0.1", "10.0.0.2", 1);
        packets.drain(..3);
        let report = filter_handshakes(extract_flows(&Trace::new(LinkType::Ethernet, packets), "x"));
        assert!(report.kept.is_empty());
        assert_eq!(report.dropped[0].reason, DropReason::NoInitialSyn);
    }

    #[test]
    fn ports_and_capacity() {
        let flows: Vec<_> = (0..3)
            .map(|i| ConnectionTrace {
                stream_index: i,
                packets: flow_with(3, 0, "10.0.0.1", "10.0.0.2", 100 + i as u16),
                initiator_ip: ip("10.0.0.1"),
                responder_ip: ip("10.0.0.2"),
                replay_port: 0,
                offset_us: 0,
                source_name: "x".into(),
                link_type: LinkType::Ethernet,
            })
            .collect();
        let ported = assign_ports(flows.clone(), 20000).unwrap();
        let ports: Vec<u16> = ported.iter().map(|f| f.replay_port).collect();
        assert_eq!(ports, vec![20000, 20001, 20002]);
        for f in &ported {
            validate_connection(f).unwrap();
        }
        assert!(assign_ports(Vec::new(), 20000).unwrap().is_empty());
        assert!(matches!(
            assign_ports(flows, 65534),
            Err(SplitError::PortSpaceExhausted { .. })
        ));
    }

    #[test]
    fn offsets() {
        let mk = |ts| ConnectionTrace {
            stream_index: 0,
            packets: flow_with(3, ts, "10.0.0.1", "10.0.0.2", 1),
            initiator_ip: ip("10.0.0.1"),
            responder_ip: ip("10.0.0.2"),
            replay_port: 0,
            offset_us: 0,
            source_name: "x".into(),
            link_type: LinkType::Ethernet,
        };
        let t = 1_600_000_000_000_000;
        let out = compute_offsets(vec![mk(t + 2_500_000), mk(t)]);
        assert_eq!(out[0].offset_us, 2_500_000);
        assert_eq!(out[1].offset_us, 0);
        let out = compute_offsets(vec![mk(t), mk(t)]);
        assert!(out.iter().all(|f| f.offset_us == 0));
        assert_eq!(compute_offsets(vec![mk(t)])[0].offset_us, 0);
    }

    #[test]
    fn name_template() {
        let c = ConnectionTrace {
            stream_index: 4,
            packets: vec![],
            initiator_ip: ip("10.0.0.1"),
            responder_ip: ip("10.0.0.2"),
            replay_port: 20004,
            offset_us: 1_250_000,
            source_name: "lab".into(),
            link_type: LinkType::Ethernet,
        };
        let name = encode_name(&c);
        assert_eq!(name, "10.0.0.1_10.0.0.2_s4_lab_p20004_o1250000.pcap");
        let meta = decode_name(&name).unwrap();
        assert_eq!(meta.stream_index, 4);
        assert_eq!(meta.replay_port, 20004);
        assert!(decode_name("garbage.pcap").is_err());
        assert!(decode_name("10.0.0.1_10.0.0.2_s4_lab_p20004_o1250000").is_err());
    }

    #[test]
    fn source_names_with_underscores_decode() {
        let meta = decode_name("1.1.1.1_2.2.2.2_s0_my_p_trace_o1_p9_o3.pcap").unwrap();
        assert_eq!(meta.source_name, "my_p_trace_o1");
        assert_eq!((meta.replay_port, meta.offset_us), (9, 3));
    }

    #[test]
    fn mapping_parse() {
        let m = HostMapping::parse("# nodes\n10.0.0.1 a\n\n10.0.0.2   b # server\n").unwrap();
        assert_eq!(m.node_of(ip("10.0.0.2")).unwrap().as_str(), "b");
        assert!(HostMapping::parse("10.0.0.1").is_err());
        assert!(HostMapping::parse("nonsense a").is_err());
        assert!(HostMapping::parse("10.0.0.1 a\n10.0.0.1 b").is_err());
        assert!(HostMapping::parse("10.0.0.1 a/b").is_err());
    }

    #[test]
    fn partition_places_both_ends() {
        let packets = flow_with(3, 0, "10.0.0.1", "10.0.0.2", 1);
        let trace = Trace::new(LinkType::Ethernet, packets);
        let mapping = HostMapping::parse("10.0.0.1 a\n10.0.0.2 b").unwrap();
        let out = split_trace(&trace, "lab", &mapping, 20000).unwrap();
        let a = NodeId::new("a").unwrap();
        let b = NodeId::new("b").unwrap();
        assert_eq!(out.plan.node_connections(&a).count(), 1);
        assert_eq!(out.plan.node_connections(&b).count(), 1);
        assert_eq!(out.plan.initiator_count(&a), 1);
        assert_eq!(out.plan.initiator_count(&b), 0);

        let one = HostMapping::parse("10.0.0.1 a\n10.0.0.2 a").unwrap();
        let out = split_trace(&trace, "lab", &one, 20000).unwrap();
        assert_eq!(out.plan.node_connections(&a).count(), 1);
        assert_eq!(out.plan.nodes.len(), 1);

        let partial = HostMapping::parse("10.0.0.1 a").unwrap();
        match split_trace(&trace, "lab", &partial, 20000) {
            Err(SplitError::Unmapped(ips)) => assert_eq!(ips, vec![ip("10.0.0.2")]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let lines = vec![ManifestLine {
            name: "x.pcap".into(),
            initiator_node: NodeId::new("a").unwrap(),
            responder_node: NodeId::new("b").unwrap(),
        }];
        assert_eq!(parse_manifest(&format_manifest(&lines)).unwrap(), lines);
        assert!(parse_manifest("only two").is_err());
    }

    #[test]
    fn same_host_flows_are_dropped() {
        let packets = flow_with(3, 0, "10.0.0.1", "10.0.0.1", 1);
        let report = filter_handshakes(extract_flows(&Trace::new(LinkType::Ethernet, packets), "x"));
        assert_eq!(report.dropped[0].reason, DropReason::SameHost);
    }
}
