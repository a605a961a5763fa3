//! Deterministic discrete-event network simulator.
//!
//! A [`Network`] owns a single logical clock, one seeded RNG and an event
//! queue ordered by `(time, sequence)`. Endpoints exchange lossy datagrams
//! and reliable frame streams; every processed event is folded into a
//! SHA-256 trace so two runs with the same seed and call sequence can be
//! compared by their [`TraceDigest`].
//!
//! Protocol code is written against the [`Transport`] trait so the same
//! state machines run over [`SimPort`] in tests and over real sockets in
//! the daemon.

mod addr;
mod network;
mod policy;
pub mod scenario;
mod transport;

pub use addr::{EndpointAddr, NodeId};
pub use network::{
    Datagram, Endpoint, EndpointStats, Network, RunLimit, SimEvent, SimPort, TraceDigest,
};
pub use policy::{Fault, LinkPolicy};
pub use transport::{StreamEvent, StreamId, Transport, MAX_DATAGRAM};

/// Simulated (or wall-clock) time in milliseconds.
pub type SimTime = u64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("invalid link policy field `{0}`")]
    InvalidPolicy(&'static str),
    #[error("endpoint {0} listed in more than one partition group")]
    OverlappingPartition(EndpointAddr),
    #[error("endpoint {0} already attached")]
    DuplicateEndpoint(EndpointAddr),
    #[error("endpoint {0} is not attached")]
    UnknownEndpoint(EndpointAddr),
    #[error("payload of {0} bytes exceeds the datagram limit")]
    Oversize(usize),
    #[error("{0} is not open")]
    StreamClosed(StreamId),
    #[error("malformed address {0}")]
    BadAddress(String),
    #[error("i/o: {0}")]
    Io(String),
}
