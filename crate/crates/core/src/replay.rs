//! Replay engine for one schedule.
//!
//! [`ReplayEngine`] is a pure state machine: the caller feeds it the
//! current time and incoming frames, and it answers with the next action
//! (send a frame, wait until a deadline, or finish). Waiting for a send
//! deadline and waiting for a packet are the same wait, so an arriving
//! packet is always handled as soon as it is delivered.
//!
//! [`run_connection`] drives an engine over a blocking
//! [`PacketTransport`]; the simulator in [`crate::harness`] drives many
//! engines from one event loop.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::harness::PacketTransport;
use crate::packet::{PacketRecord, TcpFlags};
use crate::schedule::{Direction, NextDue, Schedule};
use crate::splitter::ConnectionTrace;

pub const DEFAULT_INACTIVITY_TIMEOUT_US: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DuplicatePolicy {
    /// Replay the capture verbatim, retransmissions included.
    #[default]
    Strict,
    /// Remove packets that repeat an earlier packet of the same direction
    /// before building schedules.
    DropScheduledDuplicates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayConfig {
    /// Abort when nothing was sent or received for this long while waiting
    /// on the peer.
    pub inactivity_timeout_us: u64,
    pub duplicate_policy: DuplicatePolicy,
    /// Sends later than this past their due time are counted as late.
    pub max_clock_slip_us: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            inactivity_timeout_us: DEFAULT_INACTIVITY_TIMEOUT_US,
            duplicate_policy: DuplicatePolicy::Strict,
            max_clock_slip_us: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    /// The peer sent a RST that is not part of the schedule.
    Reset,
    Transport(String),
    /// The peer skipped ahead; this many remote packets never arrived.
    Desync { missed: usize },
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::Reset => f.write_str("reset by peer"),
            AbortReason::Transport(e) => write!(f, "transport: {e}"),
            AbortReason::Desync { missed } => write!(f, "{missed} remote packets missed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayStatus {
    Completed,
    TimedOut,
    Aborted(AbortReason),
}

impl fmt::Display for ReplayStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplayStatus::Completed => f.write_str("completed"),
            ReplayStatus::TimedOut => f.write_str("timed out"),
            ReplayStatus::Aborted(r) => write!(f, "aborted ({r})"),
        }
    }
}

/// A packet sent or received by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketEvent {
    pub entry: usize,
    pub direction: Direction,
    pub ts_us: u64,
    /// How far past its due time a send went out; 0 for receives.
    pub late_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub status: ReplayStatus,
    pub sent_count: usize,
    pub received_count: usize,
    pub unexpected_count: usize,
    pub duplicate_count: usize,
    pub missed_count: usize,
    pub late_count: usize,
    pub events: Vec<PacketEvent>,
}

/// How an incoming packet relates to the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Expected,
    ScheduledLater(usize),
    DuplicateOfPast(usize),
    Unexpected,
}

/// Classify `p` against the remote expectations of `s`.
///
/// A packet that repeats an already consumed remote entry counts as a
/// duplicate even when the cursor entry carries identical headers: a
/// retransmission in the capture cannot be told apart from a duplicate
/// on the wire.
pub fn classify_incoming(s: &Schedule, p: &PacketRecord) -> Classification {
    let entries = s.entries();
    let cursor = s.cursor();
    if !s.is_rebased() {
        // Before the peer's sequence space is known only the rebase anchor
        // can be recognised, by everything but its sequence number.
        return match (s.rebase_anchor(), entries.get(cursor)) {
            (Some(anchor), Some(e)) if anchor == cursor && e.matches(p, false) => Classification::Expected,
            _ => Classification::Unexpected,
        };
    }
    let is_remote_match = |i: &usize| {
        let e = &entries[*i];
        e.direction == Direction::Remote && e.matches(p, true)
    };
    if let Some(i) = (0..cursor).rev().find(is_remote_match) {
        return Classification::DuplicateOfPast(i);
    }
    if cursor < entries.len() && is_remote_match(&cursor) {
        return Classification::Expected;
    }
    match (cursor + 1..entries.len()).find(is_remote_match) {
        Some(i) => Classification::ScheduledLater(i),
        None => Classification::Unexpected,
    }
}

/// Block until `abs_us` on `clock`; immediate for past targets.
pub fn sleep_until(clock: &dyn Clock, abs_us: u64) {
    clock.sleep_until(abs_us);
}

/// Drop packets that repeat an earlier packet of the same direction
/// (same sequence, acknowledgment, flags and payload length). Returns the
/// filtered connection and the number of packets removed.
pub fn drop_scheduled_duplicates(c: &ConnectionTrace) -> (ConnectionTrace, usize) {
    let mut seen = HashSet::new();
    let mut out = c.clone();
    out.packets = c
        .packets
        .iter()
        .filter(|p| seen.insert((p.src_ip, p.seq, p.ack, p.flags.bits(), p.payload.len())))
        .cloned()
        .collect();
    let removed = c.packets.len() - out.packets.len();
    (out, removed)
}

/// The connection as it will actually be replayed under `policy`.
pub fn apply_policy(c: &ConnectionTrace, policy: DuplicatePolicy) -> ConnectionTrace {
    match policy {
        DuplicatePolicy::Strict => c.clone(),
        DuplicatePolicy::DropScheduledDuplicates => drop_scheduled_duplicates(c).0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineAction {
    /// Put this frame on the wire now.
    Send(Vec<u8>),
    /// Nothing to do before this absolute time unless a packet arrives.
    WaitUntil(u64),
    Finished,
}

/// Point-in-time view of an engine, cheap to copy out for status reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineSnapshot {
    pub status: Option<ReplayStatus>,
    pub cursor: usize,
    pub total: usize,
    pub sent_count: usize,
    pub received_count: usize,
    pub unexpected_count: usize,
    pub duplicate_count: usize,
    pub missed_count: usize,
    pub first_send_us: Option<u64>,
}

#[derive(Debug)]
pub struct ReplayEngine {
    schedule: Schedule,
    cfg: ReplayConfig,
    last_activity_us: u64,
    outbox: VecDeque<Vec<u8>>,
    status: Option<ReplayStatus>,
    sent_count: usize,
    received_count: usize,
    unexpected_count: usize,
    duplicate_count: usize,
    missed_count: usize,
    late_count: usize,
    events: Vec<PacketEvent>,
}

impl ReplayEngine {
    pub fn new(schedule: Schedule, cfg: ReplayConfig) -> Self {
        ReplayEngine {
            last_activity_us: schedule.start_epoch_us,
            schedule,
            cfg,
            outbox: VecDeque::new(),
            status: None,
            sent_count: 0,
            received_count: 0,
            unexpected_count: 0,
            duplicate_count: 0,
            missed_count: 0,
            late_count: 0,
            events: Vec::new(),
        }
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn replay_port(&self) -> u16 {
        self.schedule.replay_port
    }

    pub fn is_finished(&self) -> bool {
        self.status.is_some() && self.outbox.is_empty()
    }

    fn inactivity_deadline(&self) -> u64 {
        self.last_activity_us.max(self.schedule.start_epoch_us) + self.cfg.inactivity_timeout_us
    }

    /// Emit the cursor entry (a Local one) at `now`.
    fn send_cursor(&mut self, now: u64) -> Vec<u8> {
        let entry = self.schedule.cursor();
        let e = self.schedule.current().expect("send past end of schedule");
        let due = self.schedule.start_epoch_us + e.due_us;
        let frame = e.packet.to_frame();
        let late_us = now.saturating_sub(due);
        if late_us > self.cfg.max_clock_slip_us {
            self.late_count += 1;
        }
        self.events.push(PacketEvent {
            entry,
            direction: Direction::Local,
            ts_us: now,
            late_us,
        });
        self.sent_count += 1;
        self.last_activity_us = now;
        self.schedule.advance();
        frame
    }

    fn finish(&mut self, status: ReplayStatus) {
        if self.status.is_none() {
            self.status = Some(status);
        }
    }

    /// Stop the engine, e.g. after a transport failure.
    pub fn abort(&mut self, reason: AbortReason) {
        self.outbox.clear();
        self.finish(ReplayStatus::Aborted(reason));
    }

    pub fn poll(&mut self, now: u64) -> EngineAction {
        if let Some(frame) = self.outbox.pop_front() {
            return EngineAction::Send(frame);
        }
        if self.status.is_some() {
            return EngineAction::Finished;
        }
        match self.schedule.next_due() {
            NextDue::Done => {
                let status = if self.missed_count == 0 {
                    ReplayStatus::Completed
                } else {
                    ReplayStatus::Aborted(AbortReason::Desync {
                        missed: self.missed_count,
                    })
                };
                self.finish(status);
                EngineAction::Finished
            }
            NextDue::SendAt(due) if now >= due => EngineAction::Send(self.send_cursor(now)),
            NextDue::SendAt(due) => EngineAction::WaitUntil(due),
            NextDue::AwaitRemote => {
                let deadline = self.inactivity_deadline();
                if now >= deadline {
                    self.finish(ReplayStatus::TimedOut);
                    EngineAction::Finished
                } else {
                    EngineAction::WaitUntil(deadline)
                }
            }
        }
    }

    /// Handle a frame delivered at `now`.
    pub fn on_frame(&mut self, now: u64, frame: &[u8]) -> Classification {
        if self.status.is_some() {
            return Classification::Unexpected;
        }
        let Ok(p) = PacketRecord::from_frame(self.schedule.link_type, now, frame) else {
            self.unexpected_count += 1;
            return Classification::Unexpected;
        };
        self.last_activity_us = now;
        let class = classify_incoming(&self.schedule, &p);
        match class {
            Classification::Expected => {
                if !self.schedule.is_rebased() {
                    self.schedule
                        .rebase_remote(p.seq)
                        .expect("anchor reached before rebase");
                }
                self.receive_cursor(now);
            }
            Classification::ScheduledLater(target) => {
                while self.schedule.cursor() < target {
                    match self.schedule.current().map(|e| e.direction) {
                        Some(Direction::Local) => {
                            let frame = self.send_cursor(now);
                            self.outbox.push_back(frame);
                        }
                        _ => {
                            log::debug!(
                                "port {}: remote entry {} missed",
                                self.schedule.replay_port,
                                self.schedule.cursor()
                            );
                            self.missed_count += 1;
                            self.schedule.advance();
                        }
                    }
                }
                self.receive_cursor(now);
            }
            Classification::DuplicateOfPast(_) => self.duplicate_count += 1,
            Classification::Unexpected => {
                self.unexpected_count += 1;
                if p.flags.contains(TcpFlags::RST) {
                    self.finish(ReplayStatus::Aborted(AbortReason::Reset));
                }
            }
        }
        class
    }

    fn receive_cursor(&mut self, now: u64) {
        self.events.push(PacketEvent {
            entry: self.schedule.cursor(),
            direction: Direction::Remote,
            ts_us: now,
            late_us: 0,
        });
        self.received_count += 1;
        self.schedule.advance();
    }

    pub fn snapshot(&self) -> EngineSnapshot {
        EngineSnapshot {
            status: self.status.clone(),
            cursor: self.schedule.cursor(),
            total: self.schedule.len(),
            sent_count: self.sent_count,
            received_count: self.received_count,
            unexpected_count: self.unexpected_count,
            duplicate_count: self.duplicate_count,
            missed_count: self.missed_count,
            first_send_us: self.first_send_us(),
        }
    }

    pub fn first_send_us(&self) -> Option<u64> {
        self.events.iter().find(|e| e.direction == Direction::Local).map(|e| e.ts_us)
    }

    /// Final outcome; an engine that never finished reports `TimedOut`.
    pub fn outcome(&self) -> ReplayOutcome {
        ReplayOutcome {
            status: self.status.clone().unwrap_or(ReplayStatus::TimedOut),
            sent_count: self.sent_count,
            received_count: self.received_count,
            unexpected_count: self.unexpected_count,
            duplicate_count: self.duplicate_count,
            missed_count: self.missed_count,
            late_count: self.late_count,
            events: self.events.clone(),
        }
    }
}

/// Replay `schedule` over a blocking transport until it finishes.
pub fn run_connection<T: PacketTransport + ?Sized>(
    schedule: Schedule,
    transport: &mut T,
    clock: &dyn Clock,
    cfg: ReplayConfig,
) -> ReplayOutcome {
    let mut engine = ReplayEngine::new(schedule, cfg);
    run_engine(&mut engine, transport, clock, |_| {});
    engine.outcome()
}

/// Drive `engine` to completion, calling `observe` after every step.
pub fn run_engine<T: PacketTransport + ?Sized>(
    engine: &mut ReplayEngine,
    transport: &mut T,
    clock: &dyn Clock,
    mut observe: impl FnMut(&ReplayEngine),
) {
    loop {
        match engine.poll(clock.now_us()) {
            EngineAction::Send(frame) => {
                if let Err(e) = transport.send(&frame) {
                    engine.abort(AbortReason::Transport(e.to_string()));
                }
            }
            EngineAction::WaitUntil(deadline) => match transport.recv_until(clock, deadline) {
                Ok(Some(frame)) => {
                    engine.on_frame(clock.now_us(), &frame);
                }
                Ok(None) => {}
                Err(e) => engine.abort(AbortReason::Transport(e.to_string())),
            },
            EngineAction::Finished => {
                observe(engine);
                return;
            }
        }
        observe(engine);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::harness::ScriptedTransport;
    use crate::schedule::build_schedule;
    use crate::splitter::{assign_ports, compute_offsets, extract_flows, filter_handshakes};
    use crate::synth;
    use std::net::Ipv4Addr;

    const START: u64 = synth::BASE_TS_US;

    fn conn(trace: &crate::pcap::Trace) -> ConnectionTrace {
        let flows = filter_handshakes(extract_flows(trace, "t")).kept;
        compute_offsets(assign_ports(flows, 20000).unwrap()).remove(0)
    }

    fn a() -> Ipv4Addr {
        Ipv4Addr::new(172, 16, 0, 1)
    }
    fn b() -> Ipv4Addr {
        Ipv4Addr::new(172, 16, 0, 2)
    }

    #[test]
    fn classification_of_handshake() {
        let c = conn(&synth::handshake_trace());
        let init = build_schedule(&c, true, a(), b(), START, 1);
        let mut resp = build_schedule(&c, false, b(), a(), START, 2);

        // Responder sees the initiator's SYN.
        let syn = init.entries()[0].packet.clone();
        assert_eq!(classify_incoming(&resp, &syn), Classification::Expected);
        resp.rebase_remote(syn.seq).unwrap();
        resp.advance();
        assert_eq!(classify_incoming(&resp, &syn), Classification::DuplicateOfPast(0));

        let mut corrupted = syn.clone();
        corrupted.seq ^= 0x55;
        assert_eq!(classify_incoming(&resp, &corrupted), Classification::Unexpected);
    }

    #[test]
    fn responder_alone_times_out_after_ten_virtual_seconds() {
        let c = conn(&synth::handshake_trace());
        let s = build_schedule(&c, false, b(), a(), START, 2);
        let clock = VirtualClock::new(START - 500);
        let mut t = ScriptedTransport::new(clock.clone());
        let out = run_connection(s, &mut t, &clock, ReplayConfig::default());
        assert_eq!(out.status, ReplayStatus::TimedOut);
        assert_eq!(clock.now_us(), START + DEFAULT_INACTIVITY_TIMEOUT_US);
    }

    #[test]
    fn all_local_schedule_completes() {
        let mut c = conn(&synth::handshake_trace());
        // Make every packet originate from the initiator.
        for p in &mut c.packets {
            p.src_ip = c.initiator_ip;
            p.dst_ip = c.responder_ip;
        }
        let s = build_schedule(&c, true, a(), b(), START, 3);
        let clock = VirtualClock::new(START);
        let mut t = ScriptedTransport::new(clock.clone());
        let out = run_connection(s.clone(), &mut t, &clock, ReplayConfig::default());
        assert_eq!(out.status, ReplayStatus::Completed);
        assert_eq!((out.sent_count, out.received_count), (3, 0));
        let expected: Vec<Vec<u8>> = s.entries().iter().map(|e| e.packet.to_frame()).collect();
        let sent: Vec<Vec<u8>> = t.sent().iter().map(|(_, f)| f.clone()).collect();
        assert_eq!(sent, expected);
        // No early sends under the virtual clock.
        for (ev, e) in out.events.iter().zip(s.entries()) {
            assert_eq!(ev.ts_us, START + e.due_us);
        }
    }

    #[test]
    fn unscheduled_rst_aborts() {
        let c = conn(&synth::handshake_trace());
        let s = build_schedule(&c, true, a(), b(), START, 3);
        let mut rst = s.entries()[1].packet.clone();
        rst.flags = TcpFlags::RST;
        let clock = VirtualClock::new(START);
        let mut t = ScriptedTransport::new(clock.clone());
        t.deliver_at(START + 10, rst.to_frame());
        let out = run_connection(s, &mut t, &clock, ReplayConfig::default());
        assert_eq!(out.status, ReplayStatus::Aborted(AbortReason::Reset));
    }

    #[test]
    fn skip_ahead_fast_forwards() {
        let t = synth::offsets_trace(&[0]);
        let c = conn(&t);
        let mut s = build_schedule(&c, true, a(), b(), START, 4);
        let mut resp = build_schedule(&c, false, b(), a(), START, 5);
        // Both sides learn each other's offsets as in a real handshake.
        resp.rebase_remote(s.entries()[0].packet.seq).unwrap();
        s.rebase_remote(resp.entries()[1].packet.seq).unwrap();
        let mut engine = ReplayEngine::new(s, ReplayConfig::default());
        assert!(matches!(engine.poll(START), EngineAction::Send(_)));
        // Skip the SYN/ACK and deliver the responder's first data packet.
        let later = resp
            .entries()
            .iter()
            .position(|e| e.direction == Direction::Local && !e.packet.payload.is_empty())
            .unwrap();
        let class = engine.on_frame(START + 1, &resp.entries()[later].packet.to_frame());
        assert_eq!(class, Classification::ScheduledLater(later));
        assert!(engine.snapshot().cursor > later);
        assert_eq!(engine.outcome().missed_count, 1);
    }

    #[test]
    fn duplicate_filter_removes_retransmission() {
        let c = conn(&synth::retransmission_trace());
        let (filtered, removed) = drop_scheduled_duplicates(&c);
        assert_eq!(removed, 1);
        assert_eq!(filtered.len(), c.len() - 1);
        assert_eq!(apply_policy(&c, DuplicatePolicy::Strict), c);
    }
}
