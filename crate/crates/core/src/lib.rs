//! Split a TCP capture into connections, replay them between nodes with
//! the original timing, and measure how far the replay drifted.
//!
//! Pipeline: [`pcap`] loads a capture, [`splitter`] cuts it into
//! per-connection traces and per-node plans, [`schedule`] and [`replay`]
//! run one side of a connection, [`harness`] carries the packets,
//! [`orchestrator`] coordinates nodes, and [`analyzer`] computes timing
//! deviations.

pub mod checksum;
pub mod clock;
pub mod harness;
pub mod packet;
pub mod pcap;
pub mod replay;
pub mod schedule;
pub mod splitter;
pub mod synth;
pub mod orchestrator;
pub mod analyzer;
