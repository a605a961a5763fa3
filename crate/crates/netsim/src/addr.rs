use std::fmt;
use std::net::{IpAddr, Ipv6Addr, SocketAddr};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::NetError;

/// Opaque 16-byte node identifier.
///
/// Real transports store the IPv6 (or IPv4-mapped) address here, so a
/// simulated address and a socket address share one representation.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub [u8; 16]);

impl NodeId {
    /// Simulation helper: a node id whose last eight bytes hold `n`.
    pub fn from_index(n: u64) -> Self {
        let mut id = [0u8; 16];
        id[8..].copy_from_slice(&n.to_be_bytes());
        NodeId(id)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", hex::encode(self.0))
    }
}

/// A network endpoint: node plus port. Totally ordered by bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct EndpointAddr {
    pub node: NodeId,
    pub port: u16,
}

impl EndpointAddr {
    pub const WIRE_LEN: usize = 18;

    pub fn new(node: NodeId, port: u16) -> Self {
        Self { node, port }
    }

    pub fn sim(index: u64, port: u16) -> Self {
        Self::new(NodeId::from_index(index), port)
    }

    pub fn to_bytes(&self) -> [u8; Self::WIRE_LEN] {
        let mut out = [0u8; Self::WIRE_LEN];
        out[..16].copy_from_slice(&self.node.0);
        out[16..].copy_from_slice(&self.port.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        if bytes.len() != Self::WIRE_LEN {
            return Err(NetError::BadAddress(hex::encode(bytes)));
        }
        let mut node = [0u8; 16];
        node.copy_from_slice(&bytes[..16]);
        Ok(Self::new(
            NodeId(node),
            u16::from_be_bytes([bytes[16], bytes[17]]),
        ))
    }

    pub fn to_socket_addr(&self) -> SocketAddr {
        let v6 = Ipv6Addr::from(self.node.0);
        let ip = match v6.to_ipv4_mapped() {
            Some(v4) => IpAddr::V4(v4),
            None => IpAddr::V6(v6),
        };
        SocketAddr::new(ip, self.port)
    }

    pub fn is_loopback(&self) -> bool {
        self.to_socket_addr().ip().is_loopback()
    }
}

impl From<SocketAddr> for EndpointAddr {
    fn from(sa: SocketAddr) -> Self {
        let v6 = match sa.ip() {
            IpAddr::V4(v4) => v4.to_ipv6_mapped(),
            IpAddr::V6(v6) => v6,
        };
        Self::new(NodeId(v6.octets()), sa.port())
    }
}

impl fmt::Display for EndpointAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_socket_addr())
    }
}

impl fmt::Debug for EndpointAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EndpointAddr({self})")
    }
}

impl FromStr for EndpointAddr {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<SocketAddr>()
            .map(Self::from)
            .map_err(|_| NetError::BadAddress(s.to_string()))
    }
}

impl Serialize for EndpointAddr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EndpointAddr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
