//! Internet checksum (RFC 1071) and IPv4/TCP checksum repair.

use std::net::Ipv4Addr;

use crate::packet::PacketRecord;

const IPPROTO_TCP: u8 = 6;

/// Ones-complement sum of 16-bit big-endian words, not yet complemented.
/// An odd trailing byte is padded with zero.
fn ones_complement_sum(initial: u32, bytes: &[u8]) -> u16 {
    let mut sum = initial as u64;
    let mut chunks = bytes.chunks_exact(2);
    for word in &mut chunks {
        sum += u64::from(u16::from_be_bytes([word[0], word[1]]));
    }
    if let [last] = chunks.remainder() {
        sum += u64::from(*last) << 8;
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    sum as u16
}

/// RFC 1071 checksum of `bytes`.
pub fn internet_checksum(bytes: &[u8]) -> u16 {
    !ones_complement_sum(0, bytes)
}

fn pseudo_header_sum(src: Ipv4Addr, dst: Ipv4Addr, segment_len: usize) -> u32 {
    let s = src.octets();
    let d = dst.octets();
    u32::from(u16::from_be_bytes([s[0], s[1]]))
        + u32::from(u16::from_be_bytes([s[2], s[3]]))
        + u32::from(u16::from_be_bytes([d[0], d[1]]))
        + u32::from(u16::from_be_bytes([d[2], d[3]]))
        + u32::from(IPPROTO_TCP)
        + segment_len as u32
}

/// TCP checksum over the pseudo-header and `segment` (header + payload).
/// The checksum field inside `segment` must be zero for computing, or hold
/// the transmitted value for verifying (result 0 means valid).
pub fn tcp_checksum(src: Ipv4Addr, dst: Ipv4Addr, segment: &[u8]) -> u16 {
    !ones_complement_sum(pseudo_header_sum(src, dst, segment.len()), segment)
}

/// Recompute the IPv4 header checksum and TCP checksum of `p`.
pub fn fix_checksums(p: &PacketRecord) -> PacketRecord {
    let mut out = p.clone();
    fix_checksums_in_place(&mut out);
    out
}

pub fn fix_checksums_in_place(p: &mut PacketRecord) {
    p.ip.checksum = 0;
    p.ip.checksum = internet_checksum(&p.ip_header_bytes());
    p.tcp.checksum = 0;
    p.tcp.checksum = tcp_checksum(p.src_ip, p.dst_ip, &p.tcp_segment_bytes());
}

/// True when both stored checksums verify.
pub fn checksums_valid(p: &PacketRecord) -> bool {
    internet_checksum(&p.ip_header_bytes()) == 0
        && tcp_checksum(p.src_ip, p.dst_ip, &p.tcp_segment_bytes()) == 0
}
