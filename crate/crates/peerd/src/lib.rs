//! Peer daemon: configuration, real UDP/TCP transport, the protocol thread
//! and the loopback control API.

pub mod api;
pub mod config;
pub mod daemon;
pub mod transport;

pub use config::{load_config, ConfigError, PeerConfig};
pub use daemon::{Daemon, Handle, StartError};

/// Process exit codes shared by the binaries.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const BIND: i32 = 3;
}
