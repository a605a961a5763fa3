use std::fmt;

use crate::{EndpointAddr, NetError, SimTime};

/// Largest datagram payload either transport accepts.
pub const MAX_DATAGRAM: usize = 8 * 1024;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct StreamId(pub u64);

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stream#{}", self.0)
    }
}

/// Notification about a reliable ordered stream, as seen by one side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StreamEvent {
    /// A peer opened a stream to us.
    Opened { id: StreamId, peer: EndpointAddr },
    /// One frame, in send order.
    Data { id: StreamId, frame: Vec<u8> },
    /// The stream ended. `reset` is true for connection failures and kills.
    Closed { id: StreamId, reset: bool },
}

impl StreamEvent {
    pub fn id(&self) -> StreamId {
        match self {
            StreamEvent::Opened { id, .. }
            | StreamEvent::Data { id, .. }
            | StreamEvent::Closed { id, .. } => *id,
        }
    }
}

/// What a protocol stack may do with the network.
///
/// Implemented by the simulator and by the real UDP/TCP adapter. Protocol
/// code reads time only through [`Transport::now`].
pub trait Transport {
    fn local_addr(&self) -> EndpointAddr;

    /// Milliseconds on the transport's clock.
    fn now(&self) -> SimTime;

    /// Unreliable, unordered datagram of at most [`MAX_DATAGRAM`] bytes.
    fn send_datagram(&mut self, dst: EndpointAddr, payload: &[u8]) -> Result<(), NetError>;

    /// Opens a reliable ordered frame stream. Failure to connect is reported
    /// later as [`StreamEvent::Closed`] with `reset: true`.
    fn open_stream(&mut self, dst: EndpointAddr) -> Result<StreamId, NetError>;

    fn stream_send(&mut self, id: StreamId, frame: Vec<u8>) -> Result<(), NetError>;

    fn close_stream(&mut self, id: StreamId);
}
