//! Control-channel messages.
//!
//! Every message is `u32 length | u8 tag | body`, where `length` counts the
//! tag and body. Integers are big-endian, strings are `u16 length | UTF-8`,
//! files are `u16 name length | name | u32 data length | data`.
//!
//! Tags: 1 Upload, 2 Start, 3 Status, 4 Fetch, 5 Error. Status and Fetch
//! requests have an empty body; the replies reuse the tag with a body.

use std::io::{Read, Write};
use std::net::{Ipv4Addr, SocketAddr};

use thiserror::Error;

use crate::replay::DuplicatePolicy;

pub const TAG_UPLOAD: u8 = 1;
pub const TAG_START: u8 = 2;
pub const TAG_STATUS: u8 = 3;
pub const TAG_FETCH: u8 = 4;
pub const TAG_ERROR: u8 = 5;

/// Upper bound on a single message, to reject garbage length prefixes.
pub const MAX_MESSAGE_LEN: usize = 1 << 30;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("message truncated")]
    Truncated,
    #[error("{0} trailing bytes after message body")]
    Trailing(usize),
    #[error("message length {0} exceeds limit")]
    TooLarge(usize),
    #[error("invalid field: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A node as seen by its peers: the address used inside replayed packets
/// and, for live runs, where its datagrams go.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerInfo {
    pub node: String,
    pub replay_ip: Ipv4Addr,
    pub datagram_addr: Option<SocketAddr>,
}

pub fn format_peers(peers: &[PeerInfo]) -> String {
    peers
        .iter()
        .map(|p| {
            let addr = p.datagram_addr.map_or_else(|| "-".to_string(), |a| a.to_string());
            format!("{} {} {}\n", p.node, p.replay_ip, addr)
        })
        .collect()
}

pub fn parse_peers(text: &str) -> Result<Vec<PeerInfo>, WireError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let bad = || WireError::Invalid(format!("peer line {l:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(PeerInfo {
                node: f[0].to_string(),
                replay_ip: f[1].parse().map_err(|_| bad())?,
                datagram_addr: match f[2] {
                    "-" => None,
                    a => Some(a.parse().map_err(|_| bad())?),
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Upload {
    pub node: String,
    /// Manifest text as written by the splitter.
    pub manifest: String,
    pub peers: Vec<PeerInfo>,
    pub duplicate_policy: DuplicatePolicy,
    pub inactivity_timeout_us: u64,
    pub seed: u64,
    pub files: Vec<(String, Vec<u8>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StartCommand {
    pub sync_epoch_us: u64,
    pub lead_time_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentPhase {
    Idle = 0,
    Uploaded = 1,
    Running = 2,
    Finished = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionState {
    Pending = 0,
    Running = 1,
    Completed = 2,
    TimedOut = 3,
    Aborted = 4,
}

impl ConnectionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, ConnectionState::Completed | ConnectionState::TimedOut | ConnectionState::Aborted)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConnectionState::Pending => "pending",
            ConnectionState::Running => "running",
            ConnectionState::Completed => "completed",
            ConnectionState::TimedOut => "timed_out",
            ConnectionState::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionStatus {
    pub name: String,
    pub initiator: bool,
    pub state: ConnectionState,
    pub sent: u32,
    pub received: u32,
    pub unexpected: u32,
    pub duplicate: u32,
    pub missed: u32,
    /// Time of the first packet sent, 0 if none yet.
    pub first_send_us: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusReport {
    pub node: String,
    pub phase: AgentPhase,
    pub agent_clock_us: u64,
    pub connections: Vec<ConnectionStatus>,
    pub warnings: Vec<String>,
    /// Uploaded files that could not be used, with the reason.
    pub rejections: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentMessage {
    Upload(Upload),
    Start(StartCommand),
    StatusRequest,
    Status(StatusReport),
    FetchRequest,
    /// pcap bytes of the agent's capture.
    Capture(Vec<u8>),
    Error(String),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn str(&mut self, s: &str) {
        let b = s.as_bytes();
        let n = b.len().min(u16::MAX as usize);
        self.u16(n as u16);
        self.0.extend_from_slice(&b[..n]);
    }
    fn blob(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn long_str(&mut self, s: &str) {
        self.blob(s.as_bytes());
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.0.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        utf8(self.take(n)?)
    }
    fn blob(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn long_str(&mut self) -> Result<String, WireError> {
        let n = self.u32()? as usize;
        utf8(self.take(n)?)
    }
    fn finish(self) -> Result<(), WireError> {
        match self.0.len() {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}

fn utf8(b: &[u8]) -> Result<String, WireError> {
    String::from_utf8(b.to_vec()).map_err(|_| WireError::Invalid("non-UTF-8 string".into()))
}

fn policy_code(p: DuplicatePolicy) -> u8 {
    match p {
        DuplicatePolicy::Strict => 0,
        DuplicatePolicy::DropScheduledDuplicates => 1,
    }
}

fn policy_from(code: u8) -> Result<DuplicatePolicy, WireError> {
    match code {
        0 => Ok(DuplicatePolicy::Strict),
        1 => Ok(DuplicatePolicy::DropScheduledDuplicates),
        c => Err(WireError::Invalid(format!("duplicate policy {c}"))),
    }
}

fn phase_from(code: u8) -> Result<AgentPhase, WireError> {
    Ok(match code {
        0 => AgentPhase::Idle,
        1 => AgentPhase::Uploaded,
        2 => AgentPhase::Running,
        3 => AgentPhase::Finished,
        c => return Err(WireError::Invalid(format!("phase {c}"))),
    })
}

fn state_from(code: u8) -> Result<ConnectionState, WireError> {
    Ok(match code {
        0 => ConnectionState::Pending,
        1 => ConnectionState::Running,
        2 => ConnectionState::Completed,
        3 => ConnectionState::TimedOut,
        4 => ConnectionState::Aborted,
        c => return Err(WireError::Invalid(format!("connection state {c}"))),
    })
}

/// Serialize `msg` including its length prefix.
pub fn encode(msg: &AgentMessage) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match msg {
        AgentMessage::Upload(u) => {
            w.u8(TAG_UPLOAD);
            w.str(&u.node);
            w.long_str(&u.manifest);
            w.long_str(&format_peers(&u.peers));
            w.u8(policy_code(u.duplicate_policy));
            w.u64(u.inactivity_timeout_us);
            w.u64(u.seed);
            w.u32(u.files.len() as u32);
            for (name, data) in &u.files {
                w.str(name);
                w.blob(data);
            }
        }
        AgentMessage::Start(s) => {
            w.u8(TAG_START);
            w.u64(s.sync_epoch_us);
            w.u64(s.lead_time_us);
        }
        AgentMessage::StatusRequest => w.u8(TAG_STATUS),
        AgentMessage::Status(r) => {
            w.u8(TAG_STATUS);
            w.str(&r.node);
            w.u8(r.phase as u8);
            w.u64(r.agent_clock_us);
            w.u32(r.connections.len() as u32);
            for c in &r.connections {
                w.str(&c.name);
                w.u8(c.initiator as u8);
                w.u8(c.state as u8);
                for v in [c.sent, c.received, c.unexpected, c.duplicate, c.missed] {
                    w.u32(v);
                }
                w.u64(c.first_send_us);
                w.str(&c.reason);
            }
            w.u16(r.warnings.len() as u16);
            for s in &r.warnings {
                w.str(s);
            }
            w.u16(r.rejections.len() as u16);
            for (name, why) in &r.rejections {
                w.str(name);
                w.str(why);
            }
        }
        AgentMessage::FetchRequest => w.u8(TAG_FETCH),
        AgentMessage::Capture(bytes) => {
            w.u8(TAG_FETCH);
            w.blob(bytes);
        }
        AgentMessage::Error(text) => {
            w.u8(TAG_ERROR);
            w.str(text);
        }
    }
    let body = w.0;
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Parse one message body (tag included, length prefix already removed).
pub fn decode_body(bytes: &[u8]) -> Result<AgentMessage, WireError> {
    let mut r = Reader(bytes);
    let tag = r.u8()?;
    let empty = r.0.is_empty();
    let msg = match tag {
        TAG_UPLOAD => {
            let node = r.str()?;
            let manifest = r.long_str()?;
            let peers = parse_peers(&r.long_str()?)?;
            let duplicate_policy = policy_from(r.u8()?)?;
            let inactivity_timeout_us = r.u64()?;
            let seed = r.u64()?;
            let n = r.u32()?;
            let mut files = Vec::new();
            for _ in 0..n {
                let name = r.str()?;
                files.push((name, r.blob()?));
            }
            AgentMessage::Upload(Upload {
                node,
                manifest,
                peers,
                duplicate_policy,
                inactivity_timeout_us,
                seed,
                files,
            })
        }
        TAG_START => AgentMessage::Start(StartCommand {
            sync_epoch_us: r.u64()?,
            lead_time_us: r.u64()?,
        }),
        TAG_STATUS if empty => AgentMessage::StatusRequest,
        TAG_STATUS => {
            let node = r.str()?;
            let phase = phase_from(r.u8()?)?;
            let agent_clock_us = r.u64()?;
            let n = r.u32()?;
            let mut connections = Vec::new();
            for _ in 0..n {
                let name = r.str()?;
                let initiator = r.u8()? != 0;
                let state = state_from(r.u8()?)?;
                let (sent, received, unexpected, duplicate, missed) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                connections.push(ConnectionStatus {
                    name,
                    initiator,
                    state,
                    sent,
                    received,
                    unexpected,
                    duplicate,
                    missed,
                    first_send_us: r.u64()?,
                    reason: r.str()?,
                });
            }
            let warnings = (0..r.u16()?).map(|_| r.str()).collect::<Result<_, _>>()?;
            let mut rejections = Vec::new();
            for _ in 0..r.u16()? {
                let name = r.str()?;
                rejections.push((name, r.str()?));
            }
            AgentMessage::Status(StatusReport {
                node,
                phase,
                agent_clock_us,
                connections,
                warnings,
                rejections,
            })
        }
        TAG_FETCH if empty => AgentMessage::FetchRequest,
        TAG_FETCH => AgentMessage::Capture(r.blob()?),
        TAG_ERROR => AgentMessage::Error(r.str()?),
        t => return Err(WireError::UnknownTag(t)),
    };
    r.finish()?;
    Ok(msg)
}

/// Parse a complete length-prefixed message.
pub fn decode(bytes: &[u8]) -> Result<AgentMessage, WireError> {
    let len = u32::from_be_bytes(bytes.get(..4).ok_or(WireError::Truncated)?.try_into().unwrap()) as usize;
    let body = bytes.get(4..).ok_or(WireError::Truncated)?;
    match body.len().cmp(&len) {
        std::cmp::Ordering::Less => Err(WireError::Truncated),
        std::cmp::Ordering::Greater => Err(WireError::Trailing(body.len() - len)),
        std::cmp::Ordering::Equal => decode_body(body),
    }
}

pub fn write_message(w: &mut impl Write, msg: &AgentMessage) -> Result<(), WireError> {
    w.write_all(&encode(msg))?;
    w.flush()?;
    Ok(())
}

/// Read one message; `Ok(None)` on a clean end of stream.
pub fn read_message(r: &mut impl Read) -> Result<Option<AgentMessage>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_MESSAGE_LEN {
        return Err(WireError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => e.into(),
    })?;
    decode_body(&body).map(Some)
}
