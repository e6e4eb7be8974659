//! Reference implementations used as test oracles. Nothing here calls
//! into the library's own checksum or statistics code.

#![allow(dead_code)]

use etherparse::{NetSlice, SlicedPacket, TransportSlice};
use meshplay::packet::PacketRecord;

/// Checksum by summing 16-bit words into a u64 and folding at the end,
/// written independently of the library's incremental fold.
pub fn naive_checksum(data: &[u8]) -> u16 {
    let mut sum: u64 = 0;
    let mut i = 0;
    while i < data.len() {
        let hi = data[i] as u64;
        let lo = if i + 1 < data.len() { data[i + 1] as u64 } else { 0 };
        sum += (hi << 8) | lo;
        i += 2;
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Verify IP and TCP checksums of a packet's wire bytes with the naive
/// sum: a correct header sums to zero after complementing.
pub fn naive_checksums_ok(p: &PacketRecord) -> bool {
    let frame = p.to_frame();
    let ip = &frame[p.link_header.len()..];
    let ihl = ((ip[0] & 0x0f) as usize) * 4;
    let total = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    if naive_checksum(&ip[..ihl]) != 0 {
        return false;
    }
    let segment = &ip[ihl..total];
    let mut pseudo = Vec::new();
    pseudo.extend_from_slice(&ip[12..20]);
    pseudo.extend_from_slice(&[0, 6]);
    pseudo.extend_from_slice(&(segment.len() as u16).to_be_bytes());
    pseudo.extend_from_slice(segment);
    naive_checksum(&pseudo) == 0
}

/// Verify checksums with the etherparse dissector.
pub fn dissector_checksums_ok(p: &PacketRecord) -> bool {
    let frame = p.to_frame();
    let Ok(sliced) = SlicedPacket::from_ip(&frame[p.link_header.len()..]) else {
        return false;
    };
    let (Some(NetSlice::Ipv4(ip)), Some(TransportSlice::Tcp(tcp))) = (sliced.net, sliced.transport) else {
        return false;
    };
    let h = ip.header();
    if h.to_header().calc_header_checksum() != h.header_checksum() {
        return false;
    }
    match tcp.calc_checksum_ipv4(h.source(), h.destination()) {
        Ok(sum) => sum == tcp.checksum(),
        Err(_) => false,
    }
}

/// Brute-force statistics: (min, max, mean, lower median, population stddev).
pub fn brute_stats(v: &[i64]) -> (i64, i64, f64, i64, f64) {
    let mut s = v.to_vec();
    // Insertion sort keeps this independent of the library's sort calls.
    for i in 1..s.len() {
        let mut j = i;
        while j > 0 && s[j - 1] > s[j] {
            s.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = s.len() as f64;
    let mean = s.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = s.iter().map(|&x| (x as f64 - mean) * (x as f64 - mean)).sum::<f64>() / n;
    (s[0], s[s.len() - 1], mean, s[(s.len() - 1) / 2], var.sqrt())
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
