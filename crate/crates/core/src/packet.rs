//! TCP/IPv4 packet records and their on-wire frame encoding.
//!
//! A [`PacketRecord`] keeps every header field needed to reproduce the
//! captured frame byte for byte, so a record can be rewritten (addresses,
//! ports, sequence numbers) and serialized again without losing the
//! untouched parts of the original packet.

use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::checksum;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;
const IPPROTO_TCP: u8 = 6;

const ETHERNET_HEADER_LEN: usize = 14;
const VLAN_HEADER_LEN: usize = 18;
const SLL_HEADER_LEN: usize = 16;
const MIN_IP_HEADER_LEN: usize = 20;
const MIN_TCP_HEADER_LEN: usize = 20;

/// Link-layer framing of a capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkType {
    Ethernet,
    /// Linux "cooked" capture (SLL).
    LinuxSll,
}

impl LinkType {
    pub fn from_pcap(network: u32) -> Option<Self> {
        match network {
            1 => Some(LinkType::Ethernet),
            113 => Some(LinkType::LinuxSll),
            _ => None,
        }
    }

    pub fn to_pcap(self) -> u32 {
        match self {
            LinkType::Ethernet => 1,
            LinkType::LinuxSll => 113,
        }
    }

    /// Header length and ethertype of `frame`, if the link header is complete.
    fn header(self, frame: &[u8]) -> Option<(usize, u16)> {
        let be16 = |at: usize| u16::from_be_bytes([frame[at], frame[at + 1]]);
        match self {
            LinkType::Ethernet => {
                if frame.len() < ETHERNET_HEADER_LEN {
                    return None;
                }
                let ethertype = be16(12);
                if ethertype == ETHERTYPE_VLAN {
                    if frame.len() < VLAN_HEADER_LEN {
                        return None;
                    }
                    Some((VLAN_HEADER_LEN, be16(16)))
                } else {
                    Some((ETHERNET_HEADER_LEN, ethertype))
                }
            }
            LinkType::LinuxSll => {
                if frame.len() < SLL_HEADER_LEN {
                    return None;
                }
                Some((SLL_HEADER_LEN, be16(14)))
            }
        }
    }

    /// A neutral link header carrying an IPv4 payload.
    pub fn synthetic_header(self) -> Vec<u8> {
        match self {
            LinkType::Ethernet => {
                let mut h = vec![0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01];
                h.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
                h
            }
            LinkType::LinuxSll => {
                let mut h = vec![0; SLL_HEADER_LEN];
                h[14..16].copy_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
                h
            }
        }
    }
}

/// TCP control bits, as found in byte 13 of the TCP header.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TcpFlags(u8);

impl TcpFlags {
    pub const FIN: TcpFlags = TcpFlags(0x01);
    pub const SYN: TcpFlags = TcpFlags(0x02);
    pub const RST: TcpFlags = TcpFlags(0x04);
    pub const PSH: TcpFlags = TcpFlags(0x08);
    pub const ACK: TcpFlags = TcpFlags(0x10);
    pub const URG: TcpFlags = TcpFlags(0x20);
    pub const ECE: TcpFlags = TcpFlags(0x40);
    pub const CWR: TcpFlags = TcpFlags(0x80);

    pub const fn from_bits(bits: u8) -> Self {
        TcpFlags(bits)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn empty() -> Self {
        TcpFlags(0)
    }

    pub const fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    /// A connection-opening SYN: SYN set, ACK clear.
    pub const fn is_initial_syn(self) -> bool {
        self.contains(Self::SYN) && !self.contains(Self::ACK)
    }
}

impl std::ops::BitOr for TcpFlags {
    type Output = TcpFlags;
    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | rhs.0)
    }
}

impl std::ops::BitOrAssign for TcpFlags {
    fn bitor_assign(&mut self, rhs: TcpFlags) {
        self.0 |= rhs.0;
    }
}

impl fmt::Debug for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; 8] = ["FIN", "SYN", "RST", "PSH", "ACK", "URG", "ECE", "CWR"];
        let set: Vec<&str> = NAMES
            .iter()
            .enumerate()
            .filter(|(bit, _)| self.0 & (1 << bit) != 0)
            .map(|(_, name)| *name)
            .collect();
        if set.is_empty() {
            f.write_str("-")
        } else {
            f.write_str(&set.join("|"))
        }
    }
}

/// IPv4 header fields that are carried through unchanged by rewriting.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ipv4Fields {
    pub tos: u8,
    pub identification: u16,
    /// Flags (3 bits) and fragment offset (13 bits).
    pub flags_fragment: u16,
    pub ttl: u8,
    pub checksum: u16,
    /// Raw option bytes; length is a multiple of 4, at most 40.
    pub options: Vec<u8>,
}

impl Default for Ipv4Fields {
    fn default() -> Self {
        Ipv4Fields {
            tos: 0,
            identification: 0,
            flags_fragment: 0x4000, // DF
            ttl: 64,
            checksum: 0,
            options: Vec::new(),
        }
    }
}

/// TCP header fields other than ports, sequence numbers and flags.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TcpFields {
    /// Low nibble of byte 12 (reserved bits and NS).
    pub reserved: u8,
    pub window: u16,
    pub checksum: u16,
    pub urgent: u16,
    /// Raw option bytes; length is a multiple of 4, at most 40.
    pub options: Vec<u8>,
}

impl Default for TcpFields {
    fn default() -> Self {
        TcpFields {
            reserved: 0,
            window: 65535,
            checksum: 0,
            urgent: 0,
            options: Vec::new(),
        }
    }
}

/// One captured TCP/IPv4 packet.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PacketRecord {
    /// Capture timestamp, microseconds since the Unix epoch.
    pub ts_us: u64,
    /// Link header bytes exactly as captured.
    pub link_header: Vec<u8>,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: TcpFlags,
    pub payload: Vec<u8>,
    pub ip: Ipv4Fields,
    pub tcp: TcpFields,
}

/// Why a frame could not be turned into a [`PacketRecord`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame shorter than its link header")]
    ShortLinkHeader,
    #[error("IPv6 packet")]
    Ipv6,
    #[error("non-IP ethertype {0:#06x}")]
    NotIp(u16),
    #[error("IP protocol {0} is not TCP")]
    NotTcp(u8),
    #[error("IP fragment")]
    Fragment,
    #[error("frame cut short by the capture snap length")]
    Snapped,
    #[error("malformed header: {0}")]
    Malformed(&'static str),
}

impl PacketRecord {
    /// A TCP packet with default header fields and valid checksums.
    #[allow(clippy::too_many_arguments)]
    pub fn synthesize(
        link: LinkType,
        ts_us: u64,
        src: (Ipv4Addr, u16),
        dst: (Ipv4Addr, u16),
        seq: u32,
        ack: u32,
        flags: TcpFlags,
        payload: Vec<u8>,
    ) -> Self {
        let mut p = PacketRecord {
            ts_us,
            link_header: link.synthetic_header(),
            src_ip: src.0,
            dst_ip: dst.0,
            src_port: src.1,
            dst_port: dst.1,
            seq,
            ack,
            flags,
            payload,
            ip: Ipv4Fields::default(),
            tcp: TcpFields::default(),
        };
        checksum::fix_checksums_in_place(&mut p);
        p
    }

    pub fn ip_header_len(&self) -> usize {
        MIN_IP_HEADER_LEN + self.ip.options.len()
    }

    pub fn tcp_header_len(&self) -> usize {
        MIN_TCP_HEADER_LEN + self.tcp.options.len()
    }

    /// Total on-wire length: link + IP header + TCP header + payload.
    pub fn raw_len(&self) -> usize {
        self.link_header.len() + self.ip_header_len() + self.tcp_header_len() + self.payload.len()
    }

    /// Sequence space consumed by this segment (payload plus SYN/FIN).
    pub fn seq_len(&self) -> u32 {
        let mut len = self.payload.len() as u32;
        if self.flags.contains(TcpFlags::SYN) {
            len += 1;
        }
        if self.flags.contains(TcpFlags::FIN) {
            len += 1;
        }
        len
    }

    pub fn flow_key(&self) -> FlowKey {
        FlowKey::new((self.src_ip, self.src_port), (self.dst_ip, self.dst_port))
    }

    /// The same packet travelling the other way.
    pub fn reversed(&self) -> Self {
        let mut p = self.clone();
        std::mem::swap(&mut p.src_ip, &mut p.dst_ip);
        std::mem::swap(&mut p.src_port, &mut p.dst_port);
        p
    }

    /// IPv4 header bytes, checksum field as stored.
    pub fn ip_header_bytes(&self) -> Vec<u8> {
        let ihl = self.ip_header_len();
        let total_len = (ihl + self.tcp_header_len() + self.payload.len()) as u16;
        let mut h = Vec::with_capacity(ihl);
        h.push(0x40 | (ihl / 4) as u8);
        h.push(self.ip.tos);
        h.extend_from_slice(&total_len.to_be_bytes());
        h.extend_from_slice(&self.ip.identification.to_be_bytes());
        h.extend_from_slice(&self.ip.flags_fragment.to_be_bytes());
        h.push(self.ip.ttl);
        h.push(IPPROTO_TCP);
        h.extend_from_slice(&self.ip.checksum.to_be_bytes());
        h.extend_from_slice(&self.src_ip.octets());
        h.extend_from_slice(&self.dst_ip.octets());
        h.extend_from_slice(&self.ip.options);
        h
    }

    /// TCP header plus payload, checksum field as stored.
    pub fn tcp_segment_bytes(&self) -> Vec<u8> {
        let thl = self.tcp_header_len();
        let mut s = Vec::with_capacity(thl + self.payload.len());
        s.extend_from_slice(&self.src_port.to_be_bytes());
        s.extend_from_slice(&self.dst_port.to_be_bytes());
        s.extend_from_slice(&self.seq.to_be_bytes());
        s.extend_from_slice(&self.ack.to_be_bytes());
        s.push((((thl / 4) as u8) << 4) | (self.tcp.reserved & 0x0f));
        s.push(self.flags.bits());
        s.extend_from_slice(&self.tcp.window.to_be_bytes());
        s.extend_from_slice(&self.tcp.checksum.to_be_bytes());
        s.extend_from_slice(&self.tcp.urgent.to_be_bytes());
        s.extend_from_slice(&self.tcp.options);
        s.extend_from_slice(&self.payload);
        s
    }

    /// Serialize to the full link-layer frame.
    pub fn to_frame(&self) -> Vec<u8> {
        let mut f = Vec::with_capacity(self.raw_len());
        f.extend_from_slice(&self.link_header);
        f.extend_from_slice(&self.ip_header_bytes());
        f.extend_from_slice(&self.tcp_segment_bytes());
        f
    }

    /// Parse a captured frame. Trailing link padding beyond the IP total
    /// length is discarded.
    pub fn from_frame(link: LinkType, ts_us: u64, frame: &[u8]) -> Result<Self, FrameError> {
        let (link_len, ethertype) = link.header(frame).ok_or(FrameError::ShortLinkHeader)?;
        match ethertype {
            ETHERTYPE_IPV4 => {}
            ETHERTYPE_IPV6 => return Err(FrameError::Ipv6),
            other => return Err(FrameError::NotIp(other)),
        }
        let ip = &frame[link_len..];
        if ip.len() < MIN_IP_HEADER_LEN {
            return Err(FrameError::Snapped);
        }
        if ip[0] >> 4 != 4 {
            return Err(FrameError::Malformed("IP version field is not 4"));
        }
        let ihl = usize::from(ip[0] & 0x0f) * 4;
        if ihl < MIN_IP_HEADER_LEN {
            return Err(FrameError::Malformed("IPv4 header length below 20"));
        }
        let total_len = usize::from(u16::from_be_bytes([ip[2], ip[3]]));
        if total_len < ihl {
            return Err(FrameError::Malformed("IPv4 total length below header length"));
        }
        if ip[9] != IPPROTO_TCP {
            return Err(FrameError::NotTcp(ip[9]));
        }
        let flags_fragment = u16::from_be_bytes([ip[6], ip[7]]);
        if flags_fragment & 0x3fff != 0 {
            return Err(FrameError::Fragment);
        }
        if ip.len() < total_len {
            return Err(FrameError::Snapped);
        }
        let tcp = &ip[ihl..total_len];
        if tcp.len() < MIN_TCP_HEADER_LEN {
            return Err(FrameError::Malformed("TCP segment shorter than 20 bytes"));
        }
        let thl = usize::from(tcp[12] >> 4) * 4;
        if thl < MIN_TCP_HEADER_LEN || thl > tcp.len() {
            return Err(FrameError::Malformed("bad TCP data offset"));
        }
        let be16 = |b: &[u8], at: usize| u16::from_be_bytes([b[at], b[at + 1]]);
        let be32 = |b: &[u8], at: usize| u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]);

        Ok(PacketRecord {
            ts_us,
            link_header: frame[..link_len].to_vec(),
            src_ip: Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]),
            dst_ip: Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]),
            src_port: be16(tcp, 0),
            dst_port: be16(tcp, 2),
            seq: be32(tcp, 4),
            ack: be32(tcp, 8),
            flags: TcpFlags::from_bits(tcp[13]),
            payload: tcp[thl..].to_vec(),
            ip: Ipv4Fields {
                tos: ip[1],
                identification: be16(ip, 4),
                flags_fragment,
                ttl: ip[8],
                checksum: be16(ip, 10),
                options: ip[MIN_IP_HEADER_LEN..ihl].to_vec(),
            },
            tcp: TcpFields {
                reserved: tcp[12] & 0x0f,
                window: be16(tcp, 14),
                checksum: be16(tcp, 16),
                urgent: be16(tcp, 18),
                options: tcp[MIN_TCP_HEADER_LEN..thl].to_vec(),
            },
        })
    }
}

/// Source and destination TCP ports of a frame without a full parse.
pub fn peek_ports(link: LinkType, frame: &[u8]) -> Option<(u16, u16)> {
    let (link_len, ethertype) = link.header(frame)?;
    if ethertype != ETHERTYPE_IPV4 {
        return None;
    }
    let ip = frame.get(link_len..)?;
    if ip.len() < MIN_IP_HEADER_LEN || ip[9] != IPPROTO_TCP {
        return None;
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    let tcp = ip.get(ihl..ihl + 4)?;
    Some((
        u16::from_be_bytes([tcp[0], tcp[1]]),
        u16::from_be_bytes([tcp[2], tcp[3]]),
    ))
}

/// Direction-independent identity of a TCP conversation.
///
/// The endpoint that sorts lower by `(ip, port)` is stored first, so both
/// directions of a stream map to the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub low: (Ipv4Addr, u16),
    pub high: (Ipv4Addr, u16),
}

impl FlowKey {
    pub fn new(a: (Ipv4Addr, u16), b: (Ipv4Addr, u16)) -> Self {
        if a <= b {
            FlowKey { low: a, high: b }
        } else {
            FlowKey { low: b, high: a }
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{} <-> {}:{}", self.low.0, self.low.1, self.high.0, self.high.1)
    }
}

/// Canonical flow key of a packet.
pub fn flow_key(p: &PacketRecord) -> FlowKey {
    p.flow_key()
}
