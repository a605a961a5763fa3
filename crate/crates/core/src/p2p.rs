//! Authenticated, encrypted point-to-point sessions over streams.
//!
//! Each side opens with a signed HELLO carrying its certificate, process id
//! and a fresh nonce. The channel key comes from static X25519 between the
//! two identity keys, salted with both nonces, so a replayed HELLO yields
//! keys the replayer cannot compute. Every later frame is sealed with a
//! per-direction counter nonce.

use std::collections::{BTreeMap, VecDeque};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use curve25519_dalek::montgomery::MontgomeryPoint;
use ed25519_dalek::VerifyingKey;
use hkdf::Hkdf;
use netsim::{SimTime, StreamEvent, StreamId};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::Sha256;
use zeroize::Zeroizing;

use crate::group::Ctx;
use crate::identity::{verify_signature, Fingerprint, Identity, IdentityCert};
use crate::membership::ProcessId;
use crate::wire::{Reader, WireError, Writer};

const HELLO_MAGIC: &[u8; 4] = b"AHL1";
const HELLO_CONTEXT: &[u8] = b"adhoc-hello-v1";
const KEY_INFO: &[u8] = b"adhoc-p2p-v1";
pub const HANDSHAKE_TIMEOUT: SimTime = 10_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub cert: IdentityCert,
    pub pid: ProcessId,
    pub nonce: [u8; 16],
    pub signature: [u8; 64],
}

impl Hello {
    fn tbs(pid: &ProcessId, nonce: &[u8; 16]) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(HELLO_CONTEXT);
        pid.encode(&mut w);
        w.raw(nonce);
        w.finish()
    }

    pub fn new(identity: &Identity, pid: ProcessId, nonce: [u8; 16]) -> Self {
        Self {
            cert: identity.cert().clone(),
            pid,
            nonce,
            signature: identity.sign(&Self::tbs(&pid, &nonce)),
        }
    }

    pub fn verify(&self) -> bool {
        self.cert.fingerprint() == self.pid.fingerprint
            && verify_signature(
                &self.cert,
                &Self::tbs(&self.pid, &self.nonce),
                &self.signature,
            )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(HELLO_MAGIC).bytes16(&self.cert.to_bytes());
        self.pid.encode(&mut w);
        w.raw(&self.nonce).raw(&self.signature);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != HELLO_MAGIC {
            return Err(WireError::BadMagic);
        }
        let cert = IdentityCert::from_bytes(r.bytes16()?)?;
        let pid = ProcessId::decode(&mut r)?;
        let nonce = r.array()?;
        let signature = r.array()?;
        r.finish()?;
        Ok(Self {
            cert,
            pid,
            nonce,
            signature,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum P2pError {
    #[error("no such session")]
    NoSession,
    #[error("session closed")]
    Closed,
    #[error("transport refused the stream")]
    Transport,
}

struct Channel {
    tx: ChaCha20Poly1305,
    rx: ChaCha20Poly1305,
    tx_ctr: u64,
    rx_ctr: u64,
}

fn counter_nonce(ctr: u64) -> Nonce {
    let mut n = [0u8; 12];
    n[4..].copy_from_slice(&ctr.to_be_bytes());
    Nonce::from(n)
}

impl Channel {
    fn derive(
        identity: &Identity,
        peer: &IdentityCert,
        initiator: bool,
        my_nonce: &[u8; 16],
        peer_nonce: &[u8; 16],
    ) -> Option<Self> {
        let peer_key = VerifyingKey::from_bytes(&peer.public_key).ok()?;
        let peer_mont: MontgomeryPoint = peer_key.to_montgomery();
        let shared = Zeroizing::new(peer_mont.mul_clamped(identity.dh_scalar()).to_bytes());
        if shared.iter().all(|b| *b == 0) {
            return None;
        }
        let (init_nonce, resp_nonce) = if initiator {
            (my_nonce, peer_nonce)
        } else {
            (peer_nonce, my_nonce)
        };
        let (init_fp, resp_fp) = if initiator {
            (identity.fingerprint(), peer.fingerprint())
        } else {
            (peer.fingerprint(), identity.fingerprint())
        };
        let mut salt = [0u8; 32];
        salt[..16].copy_from_slice(init_nonce);
        salt[16..].copy_from_slice(resp_nonce);
        let mut info = KEY_INFO.to_vec();
        info.extend_from_slice(&init_fp.0);
        info.extend_from_slice(&resp_fp.0);
        let mut okm = Zeroizing::new([0u8; 64]);
        Hkdf::<Sha256>::new(Some(&salt), shared.as_slice())
            .expand(&info, okm.as_mut_slice())
            .ok()?;
        let i2r = ChaCha20Poly1305::new(Key::from_slice(&okm[..32]));
        let r2i = ChaCha20Poly1305::new(Key::from_slice(&okm[32..]));
        let (tx, rx) = if initiator { (i2r, r2i) } else { (r2i, i2r) };
        Some(Self {
            tx,
            rx,
            tx_ctr: 0,
            rx_ctr: 0,
        })
    }

    fn seal(&mut self, plaintext: &[u8]) -> Vec<u8> {
        let nonce = counter_nonce(self.tx_ctr);
        self.tx_ctr += 1;
        self.tx
            .encrypt(
                &nonce,
                Payload {
                    msg: plaintext,
                    aad: b"p2p",
                },
            )
            .expect("in-memory encryption cannot fail")
    }

    fn open(&mut self, frame: &[u8]) -> Option<Vec<u8>> {
        let nonce = counter_nonce(self.rx_ctr);
        let pt = self
            .rx
            .decrypt(
                &nonce,
                Payload {
                    msg: frame,
                    aad: b"p2p",
                },
            )
            .ok()?;
        self.rx_ctr += 1;
        Some(pt)
    }
}

/// What a session is used for on the side that opened it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Purpose {
    General,
    Transfer(u64),
}

struct Session {
    initiator: bool,
    expected: Option<Fingerprint>,
    peer: Option<ProcessId>,
    purpose: Purpose,
    my_nonce: [u8; 16],
    channel: Option<Channel>,
    outbox: VecDeque<Vec<u8>>,
    opened_at: SimTime,
    last_active: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionEvent {
    Established {
        id: StreamId,
        peer: ProcessId,
        purpose: Purpose,
    },
    Message {
        id: StreamId,
        peer: ProcessId,
        bytes: Vec<u8>,
    },
    /// The session ended; `unsent` holds messages that never left.
    Closed {
        id: StreamId,
        peer: Option<ProcessId>,
        purpose: Purpose,
        reset: bool,
        unsent: Vec<Vec<u8>>,
    },
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct SessionStats {
    pub opened: u64,
    pub accepted: u64,
    pub established: u64,
    pub rejected_hello: u64,
    pub bad_frames: u64,
    pub frames_sent: u64,
    pub bytes_sent: u64,
}

pub struct Sessions {
    me: ProcessId,
    sessions: BTreeMap<StreamId, Session>,
    rng: ChaCha8Rng,
    idle_timeout: SimTime,
    pub stats: SessionStats,
}

impl std::fmt::Debug for Sessions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sessions")
            .field("open", &self.sessions.len())
            .finish_non_exhaustive()
    }
}

impl Sessions {
    pub fn new(me: ProcessId, seed: u64) -> Self {
        Self {
            me,
            sessions: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            idle_timeout: 60_000,
            stats: SessionStats::default(),
        }
    }

    fn nonce(&mut self) -> [u8; 16] {
        let mut n = [0u8; 16];
        self.rng.fill_bytes(&mut n);
        n
    }

    /// Opens a session to `peer`; messages sent before the handshake
    /// completes are queued.
    pub fn open(
        &mut self,
        ctx: &mut Ctx<'_>,
        peer: ProcessId,
        purpose: Purpose,
    ) -> Result<StreamId, P2pError> {
        let id = ctx
            .io
            .open_stream(peer.addr)
            .map_err(|_| P2pError::Transport)?;
        let nonce = self.nonce();
        let hello = Hello::new(ctx.identity, self.me, nonce).encode();
        let _ = ctx.io.stream_send(id, hello);
        let now = ctx.now();
        self.stats.opened += 1;
        self.sessions.insert(
            id,
            Session {
                initiator: true,
                expected: Some(peer.fingerprint),
                peer: None,
                purpose,
                my_nonce: nonce,
                channel: None,
                outbox: VecDeque::new(),
                opened_at: now,
                last_active: now,
            },
        );
        Ok(id)
    }

    /// An established or pending general-purpose session with `peer`.
    pub fn general_with(&self, peer: &Fingerprint) -> Option<StreamId> {
        self.sessions
            .iter()
            .find(|(_, s)| {
                s.purpose == Purpose::General
                    && (s.peer.map(|p| p.fingerprint) == Some(*peer)
                        || (s.peer.is_none() && s.expected == Some(*peer)))
            })
            .map(|(id, _)| *id)
    }

    pub fn peer(&self, id: StreamId) -> Option<ProcessId> {
        self.sessions.get(&id).and_then(|s| s.peer)
    }

    pub fn is_established(&self, id: StreamId) -> bool {
        self.sessions.get(&id).is_some_and(|s| s.channel.is_some())
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn send(&mut self, ctx: &mut Ctx<'_>, id: StreamId, msg: Vec<u8>) -> Result<(), P2pError> {
        let now = ctx.now();
        let s = self.sessions.get_mut(&id).ok_or(P2pError::NoSession)?;
        s.last_active = now;
        match s.channel.as_mut() {
            None => {
                s.outbox.push_back(msg);
                Ok(())
            }
            Some(ch) => {
                let frame = ch.seal(&msg);
                self.stats.frames_sent += 1;
                self.stats.bytes_sent += frame.len() as u64;
                ctx.io.stream_send(id, frame).map_err(|_| P2pError::Closed)
            }
        }
    }

    /// Gracefully closes a session.
    pub fn close(&mut self, ctx: &mut Ctx<'_>, id: StreamId) {
        if self.sessions.remove(&id).is_some() {
            ctx.io.close_stream(id);
        }
    }

    pub fn handle(&mut self, ctx: &mut Ctx<'_>, ev: StreamEvent) -> Vec<SessionEvent> {
        let now = ctx.now();
        let mut out = Vec::new();
        match ev {
            StreamEvent::Opened { id, .. } => {
                let nonce = self.nonce();
                let hello = Hello::new(ctx.identity, self.me, nonce).encode();
                let _ = ctx.io.stream_send(id, hello);
                self.stats.accepted += 1;
                self.sessions.insert(
                    id,
                    Session {
                        initiator: false,
                        expected: None,
                        peer: None,
                        purpose: Purpose::General,
                        my_nonce: nonce,
                        channel: None,
                        outbox: VecDeque::new(),
                        opened_at: now,
                        last_active: now,
                    },
                );
            }
            StreamEvent::Data { id, frame } => {
                let Some(s) = self.sessions.get_mut(&id) else {
                    return out;
                };
                s.last_active = now;
                if let Some(ch) = s.channel.as_mut() {
                    match ch.open(&frame) {
                        Some(bytes) => out.push(SessionEvent::Message {
                            id,
                            peer: s.peer.expect("established"),
                            bytes,
                        }),
                        None => {
                            self.stats.bad_frames += 1;
                            out.extend(self.abort(ctx, id));
                        }
                    }
                    return out;
                }
                let ok = Hello::decode(&frame).ok().filter(|h| {
                    h.verify()
                        && s.expected.is_none_or(|fp| fp == h.pid.fingerprint)
                        && ctx.certs.admit(&h.cert, ctx.trust, now).is_ok()
                });
                let Some(hello) = ok else {
                    self.stats.rejected_hello += 1;
                    out.extend(self.abort(ctx, id));
                    return out;
                };
                let Some(mut ch) = Channel::derive(
                    ctx.identity,
                    &hello.cert,
                    s.initiator,
                    &s.my_nonce,
                    &hello.nonce,
                ) else {
                    self.stats.rejected_hello += 1;
                    out.extend(self.abort(ctx, id));
                    return out;
                };
                s.peer = Some(hello.pid);
                for msg in s.outbox.drain(..) {
                    let frame = ch.seal(&msg);
                    self.stats.frames_sent += 1;
                    self.stats.bytes_sent += frame.len() as u64;
                    let _ = ctx.io.stream_send(id, frame);
                }
                s.channel = Some(ch);
                self.stats.established += 1;
                out.push(SessionEvent::Established {
                    id,
                    peer: hello.pid,
                    purpose: s.purpose,
                });
            }
            StreamEvent::Closed { id, reset } => {
                if let Some(s) = self.sessions.remove(&id) {
                    out.push(SessionEvent::Closed {
                        id,
                        peer: s.peer,
                        purpose: s.purpose,
                        reset,
                        unsent: s.outbox.into_iter().collect(),
                    });
                }
            }
        }
        out
    }

    fn abort(&mut self, ctx: &mut Ctx<'_>, id: StreamId) -> Option<SessionEvent> {
        let s = self.sessions.remove(&id)?;
        ctx.io.close_stream(id);
        Some(SessionEvent::Closed {
            id,
            peer: s.peer,
            purpose: s.purpose,
            reset: true,
            unsent: s.outbox.into_iter().collect(),
        })
    }

    /// Drops sessions stuck in the handshake or idle for too long.
    pub fn tick(&mut self, ctx: &mut Ctx<'_>) -> Vec<SessionEvent> {
        let now = ctx.now();
        let stale: Vec<StreamId> = self
            .sessions
            .iter()
            .filter(|(_, s)| {
                (s.channel.is_none() && now.saturating_sub(s.opened_at) > HANDSHAKE_TIMEOUT)
                    || now.saturating_sub(s.last_active) > self.idle_timeout
            })
            .map(|(id, _)| *id)
            .collect();
        stale
            .into_iter()
            .filter_map(|id| self.abort(ctx, id))
            .collect()
    }
}
