//! Replay schedule for one side of one connection.
//!
//! Every packet of the connection becomes a [`ScheduleEntry`]: packets the
//! local side originally sent are `Local` (to be sent), the others are
//! `Remote` (to be expected). Local sequence numbers are shifted by a
//! random offset; once the peer's real initial sequence number is known,
//! [`Schedule::rebase_remote`] shifts local acknowledgments and remote
//! expectations by the same modular delta.
//!
//! Expected values are always recomputed from the original header values
//! and the two offsets, never accumulated incrementally.

use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checksum;
use crate::packet::{LinkType, PacketRecord, TcpFlags};
use crate::splitter::ConnectionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub direction: Direction,
    /// The packet as it is sent (Local) or expected to arrive (Remote).
    pub packet: PacketRecord,
    /// Due time relative to the connection start.
    pub due_us: u64,
    pub expected_seq: u32,
    pub expected_ack: u32,
    original_seq: u32,
    original_ack: u32,
}

impl ScheduleEntry {
    pub fn original_seq(&self) -> u32 {
        self.original_seq
    }

    pub fn original_ack(&self) -> u32 {
        self.original_ack
    }

    /// Header match used to recognise an incoming packet. `check_seq` is
    /// false only while the peer's sequence space is still unknown.
    pub fn matches(&self, p: &PacketRecord, check_seq: bool) -> bool {
        (!check_seq || p.seq == self.expected_seq)
            && p.ack == self.expected_ack
            && p.flags == self.packet.flags
            && p.payload.len() == self.packet.payload.len()
    }
}

/// What the schedule wants next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextDue {
    /// Send the cursor entry at this absolute time (epoch µs).
    SendAt(u64),
    AwaitRemote,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("remote sequence space already rebased")]
    AlreadyRebased,
    #[error("schedule has no remote packets to rebase against")]
    NoRemotePackets,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    entries: Vec<ScheduleEntry>,
    cursor: usize,
    local_seq_offset: u32,
    remote_rebase: Option<u32>,
    /// Original sequence number of the first remote packet (its SYN or
    /// SYN/ACK), the anchor for the rebase delta.
    remote_isn: Option<u32>,
    pub local_ip: Ipv4Addr,
    pub remote_ip: Ipv4Addr,
    pub replay_port: u16,
    pub start_epoch_us: u64,
    pub initiator: bool,
    pub link_type: LinkType,
    pub stream_index: u32,
}

/// Build the schedule for the side selected by `initiator`.
pub fn build_schedule(
    c: &ConnectionTrace,
    initiator: bool,
    local_ip: Ipv4Addr,
    remote_ip: Ipv4Addr,
    start_epoch_us: u64,
    rng_seed: u64,
) -> Schedule {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let local_seq_offset = rng.gen_range(1..=u32::MAX);
    let local_orig_ip = if initiator { c.initiator_ip } else { c.responder_ip };
    let t0 = c.first_ts();

    let mut due_prev = 0;
    let entries: Vec<ScheduleEntry> = c
        .packets
        .iter()
        .map(|p| {
            // Clamped so due times never decrease on out-of-order captures.
            let due_us = p.ts_us.saturating_sub(t0).max(due_prev);
            due_prev = due_us;
            ScheduleEntry {
                direction: if p.src_ip == local_orig_ip {
                    Direction::Local
                } else {
                    Direction::Remote
                },
                packet: p.clone(),
                due_us,
                expected_seq: p.seq,
                expected_ack: p.ack,
                original_seq: p.seq,
                original_ack: p.ack,
            }
        })
        .collect();
    let remote_isn = entries
        .iter()
        .find(|e| e.direction == Direction::Remote)
        .map(|e| e.original_seq);

    let mut s = Schedule {
        entries,
        cursor: 0,
        local_seq_offset,
        remote_rebase: None,
        remote_isn,
        local_ip,
        remote_ip,
        replay_port: c.replay_port,
        start_epoch_us,
        initiator,
        link_type: c.link_type,
        stream_index: c.stream_index,
    };
    s.recompute();
    s
}

impl Schedule {
    fn recompute(&mut self) {
        let seq_offset = self.local_seq_offset;
        let delta = self.remote_rebase.unwrap_or(0);
        for e in &mut self.entries {
            let acks = e.packet.flags.contains(TcpFlags::ACK);
            let p = &mut e.packet;
            match e.direction {
                Direction::Local => {
                    e.expected_seq = e.original_seq.wrapping_add(seq_offset);
                    e.expected_ack = if acks { e.original_ack.wrapping_add(delta) } else { e.original_ack };
                    p.src_ip = self.local_ip;
                    p.dst_ip = self.remote_ip;
                }
                Direction::Remote => {
                    e.expected_seq = e.original_seq.wrapping_add(delta);
                    e.expected_ack = if acks { e.original_ack.wrapping_add(seq_offset) } else { e.original_ack };
                    p.src_ip = self.remote_ip;
                    p.dst_ip = self.local_ip;
                }
            }
            p.seq = e.expected_seq;
            p.ack = e.expected_ack;
            p.src_port = self.replay_port;
            p.dst_port = self.replay_port;
            checksum::fix_checksums_in_place(p);
        }
    }

    /// Adopt the peer's actual initial sequence number. Allowed once.
    pub fn rebase_remote(&mut self, observed_remote_seq: u32) -> Result<(), ScheduleError> {
        if self.remote_rebase.is_some() {
            return Err(ScheduleError::AlreadyRebased);
        }
        let isn = self.remote_isn.ok_or(ScheduleError::NoRemotePackets)?;
        self.remote_rebase = Some(observed_remote_seq.wrapping_sub(isn));
        self.recompute();
        Ok(())
    }

    pub fn next_due(&self) -> NextDue {
        match self.entries.get(self.cursor) {
            None => NextDue::Done,
            Some(e) if e.direction == Direction::Local => NextDue::SendAt(self.start_epoch_us + e.due_us),
            Some(_) => NextDue::AwaitRemote,
        }
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn current(&self) -> Option<&ScheduleEntry> {
        self.entries.get(self.cursor)
    }

    pub fn is_done(&self) -> bool {
        self.cursor == self.entries.len()
    }

    /// Move past the cursor entry.
    pub fn advance(&mut self) {
        if self.cursor < self.entries.len() {
            self.cursor += 1;
        }
    }

    pub fn local_seq_offset(&self) -> u32 {
        self.local_seq_offset
    }

    pub fn remote_rebase(&self) -> Option<u32> {
        self.remote_rebase
    }

    pub fn is_rebased(&self) -> bool {
        self.remote_rebase.is_some()
    }

    /// Index of the first remote entry, whose arrival triggers the rebase.
    pub fn rebase_anchor(&self) -> Option<usize> {
        self.entries.iter().position(|e| e.direction == Direction::Remote)
    }

    pub fn local_count(&self) -> usize {
        self.entries.iter().filter(|e| e.direction == Direction::Local).count()
    }
}
