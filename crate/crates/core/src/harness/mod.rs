//! Packet transports and capture taps.
//!
//! Three transports share one blocking interface, [`PacketTransport`]:
//! a scripted in-memory transport for single-engine tests, the simulated
//! network ([`Simulation`], driven by virtual time), and UDP datagram
//! encapsulation for real hosts ([`DatagramHub`]).

mod datagram;
mod sim;

use std::collections::{BTreeSet, VecDeque};

use thiserror::Error;

use crate::clock::{Clock, VirtualClock};
use crate::packet::{peek_ports, LinkType, PacketRecord};
use crate::pcap::Trace;

pub use datagram::{DatagramHub, DatagramPort, DatagramStats, DEFAULT_MTU};
pub use sim::{EndpointId, EngineId, Simulation, TapId};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("endpoint closed")]
    Closed,
    #[error("packet of {size} bytes exceeds MTU {mtu}")]
    Oversized { size: usize, mtu: usize },
    #[error("invalid link parameters: {0}")]
    InvalidParams(String),
    #[error("replay port {0} already registered on this endpoint")]
    PortInUse(u16),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Blocking frame transport for one replay engine.
pub trait PacketTransport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError>;

    /// Wait for the next frame until `deadline_us` on `clock`. Returns
    /// `Ok(None)` only once the clock has reached the deadline.
    fn recv_until(&mut self, clock: &dyn Clock, deadline_us: u64) -> Result<Option<Vec<u8>>, TransportError>;
}

/// Simulated link characteristics, applied independently per direction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinkParams {
    pub one_way_delay_us: u64,
    /// Uniform jitter in `[-jitter_us, +jitter_us]`.
    pub jitter_us: u64,
    pub loss_prob: f64,
    pub duplicate_prob: f64,
    pub reorder: bool,
    pub seed: u64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            one_way_delay_us: 0,
            jitter_us: 0,
            loss_prob: 0.0,
            duplicate_prob: 0.0,
            reorder: false,
            seed: 0,
        }
    }
}

impl LinkParams {
    pub fn validate(&self) -> Result<(), TransportError> {
        for (name, p) in [("loss_prob", self.loss_prob), ("duplicate_prob", self.duplicate_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TransportError::InvalidParams(format!("{name} {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Which frames a tap records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TapFilter {
    All,
    Nothing,
    /// Frames whose source or destination port is in the set.
    Ports(BTreeSet<u16>),
}

/// Recorder attached to one or more endpoints.
#[derive(Debug, Clone)]
pub struct CaptureTap {
    pub link_type: LinkType,
    pub filter: TapFilter,
    records: Vec<(u64, Vec<u8>)>,
}

impl CaptureTap {
    pub fn new(link_type: LinkType, filter: TapFilter) -> Self {
        CaptureTap {
            link_type,
            filter,
            records: Vec::new(),
        }
    }

    pub fn wants(&self, frame: &[u8]) -> bool {
        match &self.filter {
            TapFilter::All => true,
            TapFilter::Nothing => false,
            TapFilter::Ports(ports) => match peek_ports(self.link_type, frame) {
                Some((s, d)) => ports.contains(&s) || ports.contains(&d),
                None => false,
            },
        }
    }

    pub fn observe(&mut self, ts_us: u64, frame: &[u8]) {
        if self.wants(frame) {
            self.records.push((ts_us, frame.to_vec()));
        }
    }

    pub fn records(&self) -> &[(u64, Vec<u8>)] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Everything a tap saw, as a trace. Frames that do not parse as TCP/IPv4
/// are left out.
pub fn capture(tap: &CaptureTap) -> Trace {
    let packets = tap
        .records
        .iter()
        .filter_map(|(ts, f)| PacketRecord::from_frame(tap.link_type, *ts, f).ok())
        .collect();
    Trace::new(tap.link_type, packets)
}

/// In-memory transport with a fixed script of arrivals, for driving one
/// engine under a [`VirtualClock`].
#[derive(Debug)]
pub struct ScriptedTransport {
    clock: VirtualClock,
    inbound: VecDeque<(u64, Vec<u8>)>,
    sent: Vec<(u64, Vec<u8>)>,
}

impl ScriptedTransport {
    pub fn new(clock: VirtualClock) -> Self {
        ScriptedTransport {
            clock,
            inbound: VecDeque::new(),
            sent: Vec::new(),
        }
    }

    /// Queue a frame for delivery at `ts_us`. Arrivals must be queued in
    /// time order.
    pub fn deliver_at(&mut self, ts_us: u64, frame: Vec<u8>) {
        self.inbound.push_back((ts_us, frame));
    }

    pub fn sent(&self) -> &[(u64, Vec<u8>)] {
        &self.sent
    }
}

impl PacketTransport for ScriptedTransport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.sent.push((self.clock.now_us(), frame.to_vec()));
        Ok(())
    }

    fn recv_until(&mut self, clock: &dyn Clock, deadline_us: u64) -> Result<Option<Vec<u8>>, TransportError> {
        match self.inbound.front() {
            Some((ts, _)) if *ts <= deadline_us => {
                clock.sleep_until(*ts);
                Ok(self.inbound.pop_front().map(|(_, f)| f))
            }
            _ => {
                clock.sleep_until(deadline_us);
                Ok(None)
            }
        }
    }
}
