//! Secure group layer: per-view group Diffie-Hellman, HKDF key schedule and
//! ChaCha20-Poly1305 sealing with replay protection.

mod algebra;
mod gdh;
mod seal;

pub use algebra::{Element, GroupAlgebra, ModPGroup, Scalar};
pub use gdh::{FlowKind, FlowMessage, KeyAgreementState, Phase, Step};
pub use seal::{
    derive_keys, open, seal, KeyMaterial, OpenStats, Opener, ReplayWindow, SealedMessage, Sealer,
    REPLAY_WINDOW,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum SglError {
    #[error("AUTH_FAIL")]
    AuthFail,
    #[error("STALE_EPOCH")]
    StaleEpoch,
    #[error("replayed nonce")]
    Replay,
    #[error("nonce counter exhausted; rekey required")]
    NonceExhausted,
    #[error("invalid group element")]
    BadElement,
    #[error("flow is missing a partial value")]
    MissingPartial,
    #[error("flow belongs to another view")]
    WrongView,
    #[error("process is not a member of the view")]
    NotMember,
    #[error("flow signature invalid")]
    BadSignature,
}
