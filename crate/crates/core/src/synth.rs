//! Synthetic TCP captures for fixtures, benchmarks and tests.

use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::packet::{LinkType, PacketRecord, TcpFlags};
use crate::pcap::Trace;
use crate::splitter::{HostMapping, NodeId};

/// 2020-09-13, a fixed origin for synthetic timestamps.
pub const BASE_TS_US: u64 = 1_600_000_000_000_000;

/// Builds one well-formed TCP conversation packet by packet.
#[derive(Debug, Clone)]
pub struct ConnectionBuilder {
    link: LinkType,
    client: (Ipv4Addr, u16),
    server: (Ipv4Addr, u16),
    client_seq: u32,
    server_seq: u32,
    ts_us: u64,
    started: bool,
    turn_gap_us: u64,
    burst_gap_us: u64,
    last_from_client: Option<bool>,
    packets: Vec<PacketRecord>,
}

impl ConnectionBuilder {
    pub fn new(client: (Ipv4Addr, u16), server: (Ipv4Addr, u16), start_ts_us: u64) -> Self {
        let isn = |ep: (Ipv4Addr, u16)| u32::from(ep.0).rotate_left(7) ^ (u32::from(ep.1) << 13) ^ 0x5eed;
        ConnectionBuilder {
            link: LinkType::Ethernet,
            client,
            server,
            client_seq: isn(client),
            server_seq: isn(server).wrapping_mul(2_654_435_761),
            ts_us: start_ts_us,
            started: false,
            turn_gap_us: 50_000,
            burst_gap_us: 1_000,
            last_from_client: None,
            packets: Vec::new(),
        }
    }

    pub fn link(mut self, link: LinkType) -> Self {
        self.link = link;
        self
    }

    pub fn isns(mut self, client: u32, server: u32) -> Self {
        self.client_seq = client;
        self.server_seq = server;
        self
    }

    /// Gap before a packet that changes direction, and before one that
    /// follows a packet from the same side.
    pub fn gaps(mut self, turn_gap_us: u64, burst_gap_us: u64) -> Self {
        self.turn_gap_us = turn_gap_us;
        self.burst_gap_us = burst_gap_us;
        self
    }

    fn advance(&mut self, from_client: bool, gap_override: Option<u64>) {
        if self.started {
            let gap = gap_override.unwrap_or(if self.last_from_client == Some(from_client) {
                self.burst_gap_us
            } else {
                self.turn_gap_us
            });
            self.ts_us += gap;
        }
        self.started = true;
        self.last_from_client = Some(from_client);
    }

    fn emit(&mut self, from_client: bool, flags: TcpFlags, payload: Vec<u8>, gap: Option<u64>) -> &PacketRecord {
        self.advance(from_client, gap);
        let (src, dst, seq, ack) = if from_client {
            (self.client, self.server, self.client_seq, self.server_seq)
        } else {
            (self.server, self.client, self.server_seq, self.client_seq)
        };
        let ack = if flags.contains(TcpFlags::ACK) { ack } else { 0 };
        let p = PacketRecord::synthesize(self.link, self.ts_us, src, dst, seq, ack, flags, payload);
        let used = p.seq_len();
        if from_client {
            self.client_seq = self.client_seq.wrapping_add(used);
        } else {
            self.server_seq = self.server_seq.wrapping_add(used);
        }
        self.packets.push(p);
        self.packets.last().unwrap()
    }

    pub fn handshake(mut self) -> Self {
        self.emit(true, TcpFlags::SYN, Vec::new(), None);
        self.emit(false, TcpFlags::SYN | TcpFlags::ACK, Vec::new(), None);
        self.emit(true, TcpFlags::ACK, Vec::new(), None);
        self
    }

    /// A data segment carrying `len` bytes.
    pub fn data(mut self, from_client: bool, len: usize) -> Self {
        let fill = (self.packets.len() % 251) as u8;
        self.emit(from_client, TcpFlags::PSH | TcpFlags::ACK, vec![fill; len], None);
        self
    }

    pub fn data_after(mut self, from_client: bool, len: usize, gap_us: u64) -> Self {
        let fill = (self.packets.len() % 251) as u8;
        self.emit(from_client, TcpFlags::PSH | TcpFlags::ACK, vec![fill; len], Some(gap_us));
        self
    }

    pub fn pure_ack(mut self, from_client: bool) -> Self {
        self.emit(from_client, TcpFlags::ACK, Vec::new(), None);
        self
    }

    /// `n` data packets alternating client and server.
    pub fn exchange(mut self, n: usize) -> Self {
        for i in 0..n {
            let len = 1 + (i * 37) % 200;
            self = self.data(i % 2 == 0, len);
        }
        self
    }

    /// FIN from the client, FIN/ACK from the server, final ACK.
    pub fn close(mut self) -> Self {
        self.emit(true, TcpFlags::FIN | TcpFlags::ACK, Vec::new(), None);
        self.emit(false, TcpFlags::FIN | TcpFlags::ACK, Vec::new(), None);
        self.emit(true, TcpFlags::ACK, Vec::new(), None);
        self
    }

    /// Resend the most recent data packet from `from_client` unchanged,
    /// as an original-capture retransmission.
    pub fn retransmit(mut self, from_client: bool, gap_us: u64) -> Self {
        let src = if from_client { self.client } else { self.server };
        let original = self
            .packets
            .iter()
            .rev()
            .find(|p| (p.src_ip, p.src_port) == src && !p.payload.is_empty())
            .cloned()
            .expect("no data packet to retransmit");
        self.advance(from_client, Some(gap_us));
        let mut again = original;
        again.ts_us = self.ts_us;
        self.packets.push(again);
        self
    }

    pub fn packets(self) -> Vec<PacketRecord> {
        self.packets
    }

    pub fn end_ts(&self) -> u64 {
        self.ts_us
    }
}

fn trace_of(mut packets: Vec<PacketRecord>) -> Trace {
    packets.sort_by_key(|p| p.ts_us);
    Trace::new(LinkType::Ethernet, packets)
}

pub fn client_ip() -> Ipv4Addr {
    Ipv4Addr::new(10, 0, 0, 1)
}

pub fn server_ip() -> Ipv4Addr {
    Ipv4Addr::new(10, 0, 0, 2)
}

/// SYN, SYN/ACK, ACK between 10.0.0.1:5000 and 10.0.0.2:80.
pub fn handshake_trace() -> Trace {
    trace_of(
        ConnectionBuilder::new((client_ip(), 5000), (server_ip(), 80), BASE_TS_US)
            .handshake()
            .packets(),
    )
}

/// Maps 10.0.0.1 to node `a` and 10.0.0.2 to node `b`.
pub fn two_node_mapping() -> HostMapping {
    let mut m = HostMapping::new();
    m.insert(client_ip(), NodeId::new("a").unwrap());
    m.insert(server_ip(), NodeId::new("b").unwrap());
    m
}

/// A request/response connection with one data packet resent verbatim.
pub fn retransmission_trace() -> Trace {
    trace_of(
        ConnectionBuilder::new((client_ip(), 5001), (server_ip(), 80), BASE_TS_US)
            .handshake()
            .data(true, 120)
            .retransmit(true, 200_000)
            .data(false, 800)
            .pure_ack(true)
            .close()
            .packets(),
    )
}

/// One connection sending `pps` packets per second for `duration_us`,
/// as a client upload with periodic server acknowledgements.
pub fn rate_trace(pps: u64, duration_us: u64) -> Trace {
    let gap = 1_000_000 / pps;
    let mut b = ConnectionBuilder::new((client_ip(), 5002), (server_ip(), 80), BASE_TS_US)
        .gaps(gap, gap)
        .handshake();
    let total = pps * duration_us / 1_000_000;
    let mut i = 3;
    while i < total {
        b = if i % 10 == 9 { b.pure_ack(false) } else { b.data(true, 512) };
        i += 1;
    }
    trace_of(b.close().packets())
}

/// Short request/response connections starting at the given offsets.
pub fn offsets_trace(offsets_us: &[u64]) -> Trace {
    let packets = offsets_us
        .iter()
        .enumerate()
        .flat_map(|(i, off)| {
            ConnectionBuilder::new(
                (client_ip(), 6000 + i as u16),
                (server_ip(), 80),
                BASE_TS_US + off,
            )
            .handshake()
            .exchange(2)
            .close()
            .packets()
        })
        .collect();
    trace_of(packets)
}

/// A mixed multi-host capture shaped like public sample traces.
///
/// Connection lengths span all analysis buckets; gaps between packets that
/// change direction are at least `min_turn_gap_us`, so replays over links
/// with smaller one-way delay never fall behind schedule.
#[derive(Debug, Clone)]
pub struct PublicStyle {
    pub connections: usize,
    pub hosts: u8,
    pub seed: u64,
    pub min_turn_gap_us: u64,
    pub max_turn_gap_us: u64,
    pub spread_us: u64,
}

impl Default for PublicStyle {
    fn default() -> Self {
        PublicStyle {
            connections: 50,
            hosts: 8,
            seed: 7,
            min_turn_gap_us: 70_000,
            max_turn_gap_us: 250_000,
            spread_us: 20_000_000,
        }
    }
}

impl PublicStyle {
    pub fn build(&self) -> Trace {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let host = |h: u8| Ipv4Addr::new(192, 168, 1, 10 + h);
        let mut packets = Vec::new();
        for i in 0..self.connections {
            let client = rng.gen_range(0..self.hosts);
            let mut server = rng.gen_range(0..self.hosts);
            if server == client {
                server = (server + 1) % self.hosts;
            }
            let start = BASE_TS_US + rng.gen_range(0..=self.spread_us);
            let turn = rng.gen_range(self.min_turn_gap_us..=self.max_turn_gap_us);
            let burst = rng.gen_range(200..=3_000);
            let target = match i % 4 {
                0 => rng.gen_range(3..=10),
                1 => rng.gen_range(11..=50),
                2 => rng.gen_range(51..=100),
                _ => rng.gen_range(101..=160),
            };
            let mut b = ConnectionBuilder::new(
                (host(client), 30000 + i as u16),
                (host(server), [80, 443, 1883, 502][i % 4]),
                start,
            )
            .gaps(turn, burst)
            .handshake();
            let mut count = 3;
            let mut from_client = true;
            // Leave room for the closing exchange when there is space.
            let body = if target >= 6 { target - 3 } else { target };
            while count < body {
                let burst_len = rng.gen_range(1..=4).min(body - count);
                for _ in 0..burst_len {
                    b = b.data(from_client, rng.gen_range(1..=1400));
                }
                count += burst_len;
                from_client = !from_client;
            }
            if target >= 6 {
                b = b.close();
            }
            packets.extend(b.packets());
        }
        trace_of(packets)
    }

    /// Spread the hosts round-robin over `nodes` replay nodes.
    pub fn mapping(&self, nodes: usize) -> HostMapping {
        let mut m = HostMapping::new();
        for h in 0..self.hosts {
            let node = NodeId::new(format!("node{}", usize::from(h) % nodes)).unwrap();
            m.insert(Ipv4Addr::new(192, 168, 1, 10 + h), node);
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checksum::checksums_valid;

    #[test]
    fn handshake_shape() {
        let t = handshake_trace();
        let flags: Vec<TcpFlags> = t.packets.iter().map(|p| p.flags).collect();
        assert_eq!(flags, vec![TcpFlags::SYN, TcpFlags::SYN | TcpFlags::ACK, TcpFlags::ACK]);
        assert_eq!(t.packets[1].ack, t.packets[0].seq.wrapping_add(1));
        assert_eq!(t.packets[2].ack, t.packets[1].seq.wrapping_add(1));
        assert!(t.packets.iter().all(checksums_valid));
    }

    #[test]
    fn retransmission_is_verbatim() {
        let t = retransmission_trace();
        assert_eq!(t.packets[3].payload, t.packets[4].payload);
        assert_eq!(t.packets[3].seq, t.packets[4].seq);
        assert!(t.packets[4].ts_us > t.packets[3].ts_us);
    }

    #[test]
    fn public_style_is_deterministic() {
        let style = PublicStyle::default();
        assert_eq!(style.build(), style.build());
        assert!(style.build().len() > 50 * 3);
    }
}
