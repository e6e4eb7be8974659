//! TCP service loop around an [`Agent`] with a [`UdpRuntime`].

use std::io::{BufReader, BufWriter, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::agent::{Agent, UdpRuntime};
use super::wire::{self, AgentMessage};
use super::OrchestratorError;

#[derive(Debug)]
pub struct AgentServer {
    listener: TcpListener,
    agent: Arc<Mutex<Agent<UdpRuntime>>>,
}

impl AgentServer {
    /// Bind the control listener (TCP) and the datagram socket (UDP) on
    /// the same address.
    pub fn bind(addr: SocketAddr) -> Result<Self, OrchestratorError> {
        let bind_err = |e: &dyn std::fmt::Display| OrchestratorError::Bind(format!("{addr}: {e}"));
        let listener = TcpListener::bind(addr).map_err(|e| bind_err(&e))?;
        let actual = listener.local_addr()?;
        let runtime = UdpRuntime::bind(actual).map_err(|e| bind_err(&e))?;
        Ok(AgentServer {
            listener,
            agent: Arc::new(Mutex::new(Agent::new(runtime))),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Serve controllers until `shutdown` is set.
    pub fn serve(&self, shutdown: &AtomicBool) -> Result<(), OrchestratorError> {
        self.listener.set_nonblocking(true)?;
        while !shutdown.load(Ordering::Acquire) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    log::info!("controller connected from {peer}");
                    let agent = Arc::clone(&self.agent);
                    thread::spawn(move || {
                        if let Err(e) = serve_connection(stream, &agent) {
                            log::warn!("control connection from {peer}: {e}");
                        }
                    });
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }
}

fn serve_connection(stream: TcpStream, agent: &Mutex<Agent<UdpRuntime>>) -> Result<(), OrchestratorError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let reply = match wire::read_message(&mut reader) {
            Ok(None) => return Ok(()),
            Ok(Some(msg)) => agent.lock().unwrap().handle(msg),
            Err(wire::WireError::Io(e)) => return Err(e.into()),
            Err(e) => AgentMessage::Error(e.to_string()),
        };
        wire::write_message(&mut writer, &reply)?;
    }
}

/// Run an agent on `addr` until the process is terminated.
pub fn run_agent(addr: SocketAddr) -> Result<(), OrchestratorError> {
    AgentServer::bind(addr)?.serve(&AtomicBool::new(false))
}
