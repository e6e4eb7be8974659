//! UDP encapsulation: each crafted frame travels as one datagram, prefixed
//! by its 4-byte big-endian length. A receive thread demultiplexes frames
//! to connections by the destination port of the inner TCP header.

use std::collections::HashMap;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::{CaptureTap, PacketTransport, TapFilter, TransportError};
use crate::clock::Clock;
use crate::packet::{peek_ports, LinkType};

pub const DEFAULT_MTU: usize = 65507;

const POLL_INTERVAL: Duration = Duration::from_millis(50);

#[derive(Debug, Default)]
struct Counters {
    sent: AtomicU64,
    received: AtomicU64,
    framing_errors: AtomicU64,
    unrouted: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DatagramStats {
    pub sent: u64,
    pub received: u64,
    /// Datagrams whose length prefix disagreed with their size.
    pub framing_errors: u64,
    /// Frames for a port with no registered connection.
    pub unrouted: u64,
}

struct Inner {
    socket: UdpSocket,
    clock: Arc<dyn Clock>,
    link_type: Mutex<LinkType>,
    mtu: usize,
    routes: Mutex<HashMap<u16, Sender<Vec<u8>>>>,
    taps: Mutex<Vec<CaptureTap>>,
    counters: Counters,
    shutdown: AtomicBool,
}

impl Inner {
    fn observe(&self, frame: &[u8]) {
        let now = self.clock.now_us();
        for t in self.taps.lock().unwrap().iter_mut() {
            t.observe(now, frame);
        }
    }
}

/// One bound UDP socket shared by all connections of a node.
pub struct DatagramHub {
    inner: Arc<Inner>,
    receiver: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for DatagramHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DatagramHub")
            .field("local_addr", &self.inner.socket.local_addr().ok())
            .finish_non_exhaustive()
    }
}

/// Encode one frame as a datagram payload.
pub fn frame_datagram(frame: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.len() + 4);
    out.extend_from_slice(&(frame.len() as u32).to_be_bytes());
    out.extend_from_slice(frame);
    out
}

/// Inner frame of a datagram, or `None` when the length prefix is wrong.
pub fn unframe_datagram(datagram: &[u8]) -> Option<&[u8]> {
    let len = u32::from_be_bytes(datagram.get(..4)?.try_into().ok()?) as usize;
    (datagram.len() - 4 == len).then(|| &datagram[4..])
}

impl DatagramHub {
    pub fn bind(addr: SocketAddr, link_type: LinkType, mtu: usize, clock: Arc<dyn Clock>) -> Result<Self, TransportError> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(POLL_INTERVAL))?;
        let inner = Arc::new(Inner {
            socket,
            clock,
            link_type: Mutex::new(link_type),
            mtu,
            routes: Mutex::new(HashMap::new()),
            taps: Mutex::new(Vec::new()),
            counters: Counters::default(),
            shutdown: AtomicBool::new(false),
        });
        let rx_inner = Arc::clone(&inner);
        let receiver = thread::Builder::new()
            .name("datagram-rx".into())
            .spawn(move || receive_loop(&rx_inner))?;
        Ok(DatagramHub {
            inner,
            receiver: Some(receiver),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.inner.socket.local_addr()?)
    }

    /// Register a connection by replay port, sending to `peer`.
    pub fn connect(&self, replay_port: u16, peer: SocketAddr) -> Result<DatagramPort, TransportError> {
        let (tx, rx) = mpsc::channel();
        let mut routes = self.inner.routes.lock().unwrap();
        if routes.contains_key(&replay_port) {
            return Err(TransportError::PortInUse(replay_port));
        }
        routes.insert(replay_port, tx);
        Ok(DatagramPort {
            inner: Arc::clone(&self.inner),
            replay_port,
            peer: Some(peer),
            rx,
            loop_tx: None,
        })
    }

    /// Two in-process ports wired to each other, for connections whose
    /// endpoints both live on this node. Frames are tapped once, when sent.
    pub fn loopback_pair(&self, replay_port: u16) -> (DatagramPort, DatagramPort) {
        let (tx_a, rx_a) = mpsc::channel();
        let (tx_b, rx_b) = mpsc::channel();
        let port = |rx, tx| DatagramPort {
            inner: Arc::clone(&self.inner),
            replay_port,
            peer: None,
            rx,
            loop_tx: Some(tx),
        };
        (port(rx_a, tx_b), port(rx_b, tx_a))
    }

    /// Link layer of the frames carried from now on.
    pub fn set_link_type(&self, link_type: LinkType) {
        *self.inner.link_type.lock().unwrap() = link_type;
    }

    pub fn add_tap(&self, filter: TapFilter) -> usize {
        let link_type = *self.inner.link_type.lock().unwrap();
        let mut taps = self.inner.taps.lock().unwrap();
        taps.push(CaptureTap::new(link_type, filter));
        taps.len() - 1
    }

    pub fn tap(&self, id: usize) -> CaptureTap {
        self.inner.taps.lock().unwrap()[id].clone()
    }

    pub fn stats(&self) -> DatagramStats {
        let c = &self.inner.counters;
        DatagramStats {
            sent: c.sent.load(Ordering::Relaxed),
            received: c.received.load(Ordering::Relaxed),
            framing_errors: c.framing_errors.load(Ordering::Relaxed),
            unrouted: c.unrouted.load(Ordering::Relaxed),
        }
    }

    pub fn shutdown(&mut self) {
        self.inner.shutdown.store(true, Ordering::Release);
        if let Some(h) = self.receiver.take() {
            let _ = h.join();
        }
    }
}

impl Drop for DatagramHub {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn receive_loop(inner: &Inner) {
    let mut buf = vec![0u8; 65536];
    while !inner.shutdown.load(Ordering::Acquire) {
        let n = match inner.socket.recv_from(&mut buf) {
            Ok((n, _)) => n,
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => continue,
            Err(e) => {
                log::warn!("datagram receive failed: {e}");
                continue;
            }
        };
        let Some(frame) = unframe_datagram(&buf[..n]) else {
            inner.counters.framing_errors.fetch_add(1, Ordering::Relaxed);
            continue;
        };
        inner.counters.received.fetch_add(1, Ordering::Relaxed);
        inner.observe(frame);
        let link_type = *inner.link_type.lock().unwrap();
        let route = peek_ports(link_type, frame).and_then(|(_, dst)| inner.routes.lock().unwrap().get(&dst).cloned());
        match route {
            Some(tx) if tx.send(frame.to_vec()).is_ok() => {}
            _ => {
                inner.counters.unrouted.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}

/// One connection's view of a [`DatagramHub`].
pub struct DatagramPort {
    inner: Arc<Inner>,
    replay_port: u16,
    peer: Option<SocketAddr>,
    rx: Receiver<Vec<u8>>,
    loop_tx: Option<Sender<Vec<u8>>>,
}

impl DatagramPort {
    pub fn replay_port(&self) -> u16 {
        self.replay_port
    }
}

impl Drop for DatagramPort {
    fn drop(&mut self) {
        if self.peer.is_some() {
            self.inner.routes.lock().unwrap().remove(&self.replay_port);
        }
    }
}

// Waits shorter than this poll the channel instead of blocking on it, so
// that the deadline is not overshot by the channel's timer resolution.
const SPIN_BELOW_US: u64 = 1_000;

impl PacketTransport for DatagramPort {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        if frame.len() > self.inner.mtu {
            return Err(TransportError::Oversized {
                size: frame.len(),
                mtu: self.inner.mtu,
            });
        }
        self.inner.observe(frame);
        match (&self.loop_tx, self.peer) {
            (Some(tx), _) => tx.send(frame.to_vec()).map_err(|_| TransportError::Closed)?,
            (None, Some(peer)) => {
                self.inner.socket.send_to(&frame_datagram(frame), peer)?;
            }
            (None, None) => return Err(TransportError::Closed),
        }
        self.inner.counters.sent.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn recv_until(&mut self, clock: &dyn Clock, deadline_us: u64) -> Result<Option<Vec<u8>>, TransportError> {
        loop {
            let now = clock.now_us();
            if now >= deadline_us {
                return match self.rx.try_recv() {
                    Ok(f) => Ok(Some(f)),
                    Err(_) => Ok(None),
                };
            }
            let remaining = deadline_us - now;
            if remaining > SPIN_BELOW_US {
                match self.rx.recv_timeout(Duration::from_micros(remaining - SPIN_BELOW_US)) {
                    Ok(f) => return Ok(Some(f)),
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => {
                        // Nobody can send to us any more; just let the deadline pass.
                        clock.sleep_until(deadline_us);
                        return Ok(None);
                    }
                }
            } else {
                match self.rx.try_recv() {
                    Ok(f) => return Ok(Some(f)),
                    Err(TryRecvError::Empty) => std::hint::spin_loop(),
                    Err(TryRecvError::Disconnected) => {
                        clock.sleep_until(deadline_us);
                        return Ok(None);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_round_trip() {
        let f = vec![1u8, 2, 3, 4, 5];
        let d = frame_datagram(&f);
        assert_eq!(&d[..4], &[0, 0, 0, 5]);
        assert_eq!(unframe_datagram(&d), Some(&f[..]));
        assert_eq!(unframe_datagram(&d[..7]), None);
        assert_eq!(unframe_datagram(&[0, 0]), None);
    }
}
