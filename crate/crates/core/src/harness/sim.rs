//! Discrete-event network simulator.
//!
//! Links, endpoints and replay engines share one event queue ordered by
//! (virtual time, insertion order), so a run is fully determined by the
//! link seeds and the schedules.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{capture, CaptureTap, LinkParams, TapFilter, TransportError};
use crate::clock::{Clock, VirtualClock};
use crate::packet::{peek_ports, LinkType};
use crate::pcap::Trace;
use crate::replay::{AbortReason, EngineAction, ReplayEngine, ReplayOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EndpointId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EngineId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TapId(usize);

#[derive(Debug)]
enum Event {
    Wake { engine: usize, generation: u64 },
    Deliver { endpoint: usize, frame: Vec<u8> },
}

#[derive(Debug)]
struct Queued {
    at: u64,
    order: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.order) == (other.at, other.order)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.order).cmp(&(other.at, other.order))
    }
}

#[derive(Debug)]
struct Link {
    params: LinkParams,
    rng: ChaCha8Rng,
    ends: [usize; 2],
    /// Latest scheduled arrival per direction, for FIFO clamping.
    last_arrival: [u64; 2],
}

#[derive(Debug)]
struct Endpoint {
    link: usize,
    side: usize,
    closed: bool,
    engines: HashMap<u16, usize>,
    inbox: Vec<(u64, Vec<u8>)>,
    taps: Vec<usize>,
}

#[derive(Debug)]
struct EngineSlot {
    engine: ReplayEngine,
    endpoint: usize,
    generation: u64,
}

#[derive(Debug)]
pub struct Simulation {
    clock: VirtualClock,
    link_type: LinkType,
    queue: BinaryHeap<Reverse<Queued>>,
    order: u64,
    links: Vec<Link>,
    endpoints: Vec<Endpoint>,
    engines: Vec<EngineSlot>,
    taps: Vec<CaptureTap>,
}

impl Simulation {
    pub fn new(start_us: u64, link_type: LinkType) -> Self {
        Simulation {
            clock: VirtualClock::new(start_us),
            link_type,
            queue: BinaryHeap::new(),
            order: 0,
            links: Vec::new(),
            endpoints: Vec::new(),
            engines: Vec::new(),
            taps: Vec::new(),
        }
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn now_us(&self) -> u64 {
        self.clock.now_us()
    }

    pub fn link_type(&self) -> LinkType {
        self.link_type
    }

    fn push(&mut self, at: u64, event: Event) {
        self.order += 1;
        self.queue.push(Reverse(Queued {
            at,
            order: self.order,
            event,
        }));
    }

    /// Create a bidirectional link and return its two endpoints.
    pub fn simulated_link(&mut self, params: LinkParams) -> Result<(EndpointId, EndpointId), TransportError> {
        params.validate()?;
        let link = self.links.len();
        let a = self.endpoints.len();
        for side in 0..2 {
            self.endpoints.push(Endpoint {
                link,
                side,
                closed: false,
                engines: HashMap::new(),
                inbox: Vec::new(),
                taps: Vec::new(),
            });
        }
        self.links.push(Link {
            params,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            ends: [a, a + 1],
            last_arrival: [0, 0],
        });
        Ok((EndpointId(a), EndpointId(a + 1)))
    }

    /// Attach an engine to `endpoint`; frames for its replay port are
    /// routed to it. The engine is first polled at the current time.
    pub fn add_engine(&mut self, endpoint: EndpointId, engine: ReplayEngine) -> Result<EngineId, TransportError> {
        let port = engine.replay_port();
        let ep = &mut self.endpoints[endpoint.0];
        if ep.engines.contains_key(&port) {
            return Err(TransportError::PortInUse(port));
        }
        let id = self.engines.len();
        ep.engines.insert(port, id);
        self.engines.push(EngineSlot {
            engine,
            endpoint: endpoint.0,
            generation: 0,
        });
        let now = self.now_us();
        self.push(now, Event::Wake { engine: id, generation: 0 });
        Ok(EngineId(id))
    }

    pub fn add_tap(&mut self, endpoints: &[EndpointId], filter: TapFilter) -> TapId {
        let id = self.taps.len();
        self.taps.push(CaptureTap::new(self.link_type, filter));
        for e in endpoints {
            self.endpoints[e.0].taps.push(id);
        }
        TapId(id)
    }

    pub fn tap(&self, tap: TapId) -> &CaptureTap {
        &self.taps[tap.0]
    }

    pub fn capture(&self, tap: TapId) -> Trace {
        capture(&self.taps[tap.0])
    }

    /// Put a raw frame on the wire from `endpoint` at the current time.
    pub fn send(&mut self, endpoint: EndpointId, frame: Vec<u8>) -> Result<(), TransportError> {
        self.transmit(endpoint.0, frame)
    }

    pub fn close(&mut self, endpoint: EndpointId) {
        self.endpoints[endpoint.0].closed = true;
    }

    /// Frames that arrived for ports without an engine.
    pub fn take_inbox(&mut self, endpoint: EndpointId) -> Vec<(u64, Vec<u8>)> {
        std::mem::take(&mut self.endpoints[endpoint.0].inbox)
    }

    fn observe(&mut self, endpoint: usize, frame: &[u8]) {
        let now = self.now_us();
        for t in self.endpoints[endpoint].taps.clone() {
            self.taps[t].observe(now, frame);
        }
    }

    fn transmit(&mut self, from: usize, frame: Vec<u8>) -> Result<(), TransportError> {
        if self.endpoints[from].closed {
            return Err(TransportError::Closed);
        }
        self.observe(from, &frame);
        let now = self.now_us();
        let (link_id, side) = (self.endpoints[from].link, self.endpoints[from].side);
        let link = &mut self.links[link_id];
        let p = link.params;
        if p.loss_prob > 0.0 && link.rng.gen_bool(p.loss_prob) {
            return Ok(());
        }
        let mut arrival = now + p.one_way_delay_us;
        if p.jitter_us > 0 {
            let j = link.rng.gen_range(-(p.jitter_us as i64)..=p.jitter_us as i64);
            arrival = arrival.saturating_add_signed(j).max(now);
        }
        if !p.reorder {
            arrival = arrival.max(link.last_arrival[side]);
        }
        link.last_arrival[side] = link.last_arrival[side].max(arrival);
        let duplicate = p.duplicate_prob > 0.0 && link.rng.gen_bool(p.duplicate_prob);
        let to = link.ends[1 - side];
        if duplicate {
            self.push(arrival, Event::Deliver { endpoint: to, frame: frame.clone() });
        }
        self.push(arrival, Event::Deliver { endpoint: to, frame });
        Ok(())
    }

    fn drive(&mut self, id: usize) {
        loop {
            let now = self.now_us();
            match self.engines[id].engine.poll(now) {
                EngineAction::Send(frame) => {
                    let from = self.engines[id].endpoint;
                    if let Err(e) = self.transmit(from, frame) {
                        self.engines[id].engine.abort(AbortReason::Transport(e.to_string()));
                    }
                }
                EngineAction::WaitUntil(t) => {
                    let slot = &mut self.engines[id];
                    slot.generation += 1;
                    let generation = slot.generation;
                    self.push(t, Event::Wake { engine: id, generation });
                    return;
                }
                EngineAction::Finished => return,
            }
        }
    }

    fn deliver(&mut self, endpoint: usize, frame: Vec<u8>) {
        if self.endpoints[endpoint].closed {
            return;
        }
        self.observe(endpoint, &frame);
        let now = self.now_us();
        let target = peek_ports(self.link_type, &frame).and_then(|(_, dst)| self.endpoints[endpoint].engines.get(&dst).copied());
        match target {
            Some(id) => {
                self.engines[id].engine.on_frame(now, &frame);
                self.drive(id);
            }
            None => self.endpoints[endpoint].inbox.push((now, frame)),
        }
    }

    pub fn next_event_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(q)| q.at)
    }

    /// Process one event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(q)) = self.queue.pop() else {
            return false;
        };
        self.clock.advance_to(q.at);
        match q.event {
            Event::Wake { engine, generation } => {
                if self.engines[engine].generation == generation {
                    self.drive(engine);
                }
            }
            Event::Deliver { endpoint, frame } => self.deliver(endpoint, frame),
        }
        true
    }

    /// Process every event due at or before `limit_us`, then move the clock
    /// to `limit_us`.
    pub fn run_until(&mut self, limit_us: u64) {
        while self.next_event_time().is_some_and(|t| t <= limit_us) {
            self.step();
        }
        self.clock.advance_to(limit_us);
    }

    /// Run until no events remain.
    pub fn run(&mut self) {
        while self.step() {}
    }

    pub fn engine_count(&self) -> usize {
        self.engines.len()
    }

    pub fn engine(&self, id: EngineId) -> &ReplayEngine {
        &self.engines[id.0].engine
    }

    pub fn outcome(&self, id: EngineId) -> ReplayOutcome {
        self.engines[id.0].engine.outcome()
    }

    pub fn all_finished(&self) -> bool {
        self.engines.iter().all(|s| s.engine.is_finished())
    }
}
