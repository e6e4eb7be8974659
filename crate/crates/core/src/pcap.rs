//! Classic libpcap file reading and writing.
//!
//! Input may use either byte order and either the microsecond
//! (`0xa1b2c3d4`) or nanosecond (`0xa1b23c4d`) magic. Nanosecond
//! timestamps are truncated to microseconds. Output is always the
//! little-endian microsecond format.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::packet::{FrameError, LinkType, PacketRecord};

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
const WRITE_SNAPLEN: u32 = 262_144;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsResolution {
    Micro,
    Nano,
}

/// An in-memory capture: IPv4/TCP packets in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub link_type: LinkType,
    pub ts_resolution: TsResolution,
    pub packets: Vec<PacketRecord>,
}

impl Trace {
    pub fn new(link_type: LinkType, packets: Vec<PacketRecord>) -> Self {
        Trace {
            link_type,
            ts_resolution: TsResolution::Micro,
            packets,
        }
    }

    pub fn empty(link_type: LinkType) -> Self {
        Trace::new(link_type, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }
}

/// Records that were present in the file but are not part of the trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipStats {
    pub ipv6: usize,
    pub non_ip: usize,
    pub non_tcp: usize,
    pub fragments: usize,
    pub snapped: usize,
    pub malformed: usize,
}

impl SkipStats {
    pub fn total(&self) -> usize {
        self.ipv6 + self.non_ip + self.non_tcp + self.fragments + self.snapped + self.malformed
    }

    fn count(&mut self, err: &FrameError) {
        match err {
            FrameError::Ipv6 => self.ipv6 += 1,
            FrameError::NotIp(_) => self.non_ip += 1,
            FrameError::NotTcp(_) => self.non_tcp += 1,
            FrameError::Fragment => self.fragments += 1,
            FrameError::Snapped => self.snapped += 1,
            FrameError::ShortLinkHeader | FrameError::Malformed(_) => self.malformed += 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("not a pcap file: {0}")]
    Format(String),
    #[error("unsupported link type {0} (only Ethernet and Linux cooked captures)")]
    UnsupportedLinkType(u32),
    #[error("record {index} is truncated")]
    Truncated { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        let arr = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(arr),
            Endian::Big => u32::from_be_bytes(arr),
        }
    }
}

pub fn read_pcap(path: impl AsRef<Path>) -> Result<Trace, PcapError> {
    let bytes = fs::read(path)?;
    parse_pcap(&bytes).map(|(trace, _)| trace)
}

/// Parse pcap bytes, also reporting which records were skipped.
pub fn parse_pcap(bytes: &[u8]) -> Result<(Trace, SkipStats), PcapError> {
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(PcapError::Format(format!(
            "global header needs {GLOBAL_HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let magic_le = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let magic_be = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (endian, resolution) = match (magic_le, magic_be) {
        (MAGIC_MICROS, _) => (Endian::Little, TsResolution::Micro),
        (MAGIC_NANOS, _) => (Endian::Little, TsResolution::Nano),
        (_, MAGIC_MICROS) => (Endian::Big, TsResolution::Micro),
        (_, MAGIC_NANOS) => (Endian::Big, TsResolution::Nano),
        _ => return Err(PcapError::Format(format!("bad magic {magic_le:#010x}"))),
    };
    let network = endian.u32(&bytes[20..24]);
    let link_type = LinkType::from_pcap(network).ok_or(PcapError::UnsupportedLinkType(network))?;

    let mut packets = Vec::new();
    let mut skipped = SkipStats::default();
    let mut pos = GLOBAL_HEADER_LEN;
    let mut index = 0;
    while pos < bytes.len() {
        let header = bytes
            .get(pos..pos + RECORD_HEADER_LEN)
            .ok_or(PcapError::Truncated { index })?;
        let ts_sec = u64::from(endian.u32(&header[0..4]));
        let ts_frac = u64::from(endian.u32(&header[4..8]));
        let incl_len = endian.u32(&header[8..12]) as usize;
        pos += RECORD_HEADER_LEN;
        let frame = bytes
            .get(pos..pos + incl_len)
            .ok_or(PcapError::Truncated { index })?;
        pos += incl_len;

        let ts_us = match resolution {
            TsResolution::Micro => ts_sec * 1_000_000 + ts_frac,
            TsResolution::Nano => ts_sec * 1_000_000 + ts_frac / 1_000,
        };
        match PacketRecord::from_frame(link_type, ts_us, frame) {
            Ok(p) => packets.push(p),
            Err(e) => skipped.count(&e),
        }
        index += 1;
    }

    Ok((
        Trace {
            link_type,
            ts_resolution: resolution,
            packets,
        },
        skipped,
    ))
}

/// Serialize a trace in little-endian microsecond pcap format.
pub fn encode_pcap(trace: &Trace) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        GLOBAL_HEADER_LEN
            + trace
                .packets
                .iter()
                .map(|p| RECORD_HEADER_LEN + p.raw_len())
                .sum::<usize>(),
    );
    out.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&WRITE_SNAPLEN.to_le_bytes());
    out.extend_from_slice(&trace.link_type.to_pcap().to_le_bytes());
    for p in &trace.packets {
        let frame = p.to_frame();
        out.extend_from_slice(&((p.ts_us / 1_000_000) as u32).to_le_bytes());
        out.extend_from_slice(&((p.ts_us % 1_000_000) as u32).to_le_bytes());
        out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.extend_from_slice(&frame);
    }
    out
}

pub fn write_pcap(trace: &Trace, path: impl AsRef<Path>) -> Result<(), PcapError> {
    fs::write(path, encode_pcap(trace))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::TcpFlags;

    fn header(magic: [u8; 4], big_endian: bool, network: u32) -> Vec<u8> {
        let mut h = magic.to_vec();
        let push16 = |h: &mut Vec<u8>, v: u16| {
            h.extend_from_slice(&if big_endian { v.to_be_bytes() } else { v.to_le_bytes() })
        };
        push16(&mut h, 2);
        push16(&mut h, 4);
        h.extend_from_slice(&[0; 8]);
        let snap = 65535u32;
        h.extend_from_slice(&if big_endian { snap.to_be_bytes() } else { snap.to_le_bytes() });
        h.extend_from_slice(&if big_endian {
            network.to_be_bytes()
        } else {
            network.to_le_bytes()
        });
        h
    }

    fn syn() -> PacketRecord {
        PacketRecord::synthesize(
            LinkType::Ethernet,
            0,
            ("10.0.0.1".parse().unwrap(), 1),
            ("10.0.0.2".parse().unwrap(), 2),
            1,
            0,
            TcpFlags::SYN,
            vec![],
        )
    }

    #[test]
    fn empty_capture() {
        let t = Trace::empty(LinkType::Ethernet);
        let bytes = encode_pcap(&t);
        assert_eq!(bytes.len(), 24);
        let (back, skipped) = parse_pcap(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(skipped.total(), 0);
    }

    #[test]
    fn big_endian_nanosecond_truncates() {
        let mut bytes = header(MAGIC_NANOS.to_be_bytes(), true, 1);
        let frame = syn().to_frame();
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&500u32.to_be_bytes());
        bytes.extend_from_slice(&(frame.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&(frame.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&frame);
        let (t, _) = parse_pcap(&bytes).unwrap();
        assert_eq!(t.ts_resolution, TsResolution::Nano);
        assert_eq!(t.packets[0].ts_us, 1_000_000);
    }

    #[test]
    fn bad_magic_and_short_header() {
        assert!(matches!(parse_pcap(&[0; 10]), Err(PcapError::Format(_))));
        assert!(matches!(parse_pcap(&[0; 24]), Err(PcapError::Format(_))));
    }

    #[test]
    fn unsupported_link_type() {
        let bytes = header(MAGIC_MICROS.to_le_bytes(), false, 101);
        assert!(matches!(parse_pcap(&bytes), Err(PcapError::UnsupportedLinkType(101))));
    }

    #[test]
    fn truncated_record_names_index() {
        let t = Trace::new(LinkType::Ethernet, vec![syn(), syn()]);
        let bytes = encode_pcap(&t);
        match parse_pcap(&bytes[..bytes.len() - 3]) {
            Err(PcapError::Truncated { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_pcap(&bytes[..24 + 8]) {
            Err(PcapError::Truncated { index }) => assert_eq!(index, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_tcp_records_are_counted() {
        let mut bytes = encode_pcap(&Trace::new(LinkType::Ethernet, vec![syn()]));
        let mut udp = syn().to_frame();
        udp[14 + 9] = 17;
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&(udp.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&(udp.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&udp);
        let (t, skipped) = parse_pcap(&bytes).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(skipped.non_tcp, 1);
    }

    #[test]
    fn order_is_preserved_for_non_monotonic_timestamps() {
        let mut a = syn();
        a.ts_us = 5_000_000;
        let mut b = syn();
        b.ts_us = 1_000_000;
        let t = Trace::new(LinkType::Ethernet, vec![a.clone(), b.clone()]);
        let (back, _) = parse_pcap(&encode_pcap(&t)).unwrap();
        assert_eq!(back.packets, vec![a, b]);
    }
}
