pub mod fileshare;
pub mod group;
pub mod identity;
pub mod membership;
pub mod node;
pub mod ordcast;
pub mod p2p;
pub mod presence;
pub mod secure;
pub mod sgl;
pub mod sim;
pub mod wire;
