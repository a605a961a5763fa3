//! A group whose application traffic is sealed under a per-view key.
//!
//! Every installed view runs a fresh key agreement over the view's own
//! FIFO channel. Flows are signed by their sender. Application payloads are
//! sealed with the view's key; anything submitted before the key is ready
//! waits in a queue, and sealed messages that arrive early wait until the
//! key for their view is known.

use std::collections::VecDeque;
use std::sync::Arc;

use netsim::SimTime;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::group::{Ctx, GroupEngine, GroupError, GroupEvent, SendOutcome};
use crate::membership::{ProcessId, View, ViewId};
use crate::ordcast::{Mode, SeqMsg, MAX_PAYLOAD};
use crate::sgl::{
    derive_keys, FlowKind, FlowMessage, GroupAlgebra, KeyAgreementState, KeyMaterial, Opener,
    Phase, SealedMessage, Sealer, SglError,
};

const TAG_UPFLOW: u8 = 0x01;
const TAG_DOWNFLOW: u8 = 0x02;
const TAG_SEALED: u8 = 0x10;

/// Tag byte plus the sealed envelope around a plaintext.
pub const SEAL_OVERHEAD: usize = 1 + 8 + 12 + 4 + 16;
pub const MAX_PLAINTEXT: usize = MAX_PAYLOAD - SEAL_OVERHEAD;

/// Where a message sits in the group's delivery order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Position {
    pub epoch: u64,
    pub lamport_ts: u64,
    pub sender_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppMessage {
    pub sender: ProcessId,
    pub mode: Mode,
    pub view_id: ViewId,
    pub position: Position,
    pub plaintext: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SecureEvent {
    ViewInstalled(View),
    KeyReady {
        epoch: u64,
    },
    Message(AppMessage),
    JoinFailed,
    Left,
    KeyAgreementFailed {
        epoch: u64,
        culprit: Option<ProcessId>,
        reason: SglError,
    },
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct SecureStats {
    pub keys_established: u64,
    pub flows_rejected: u64,
    pub sealed_sent: u64,
    pub opened: u64,
    pub auth_fail: u64,
    pub stale_epoch: u64,
    pub replayed: u64,
    pub index_mismatch: u64,
    pub rekeys_requested: u64,
    pub dropped_unkeyed: u64,
}

fn aad(group: &str, epoch: u64, mode: Mode) -> Vec<u8> {
    let mut a = Vec::with_capacity(3 + group.len() + 9);
    a.extend_from_slice(b"sgl");
    a.extend_from_slice(group.as_bytes());
    a.extend_from_slice(&epoch.to_be_bytes());
    a.push(match mode {
        Mode::ReliableFifo => 0,
        Mode::Agreed => 1,
    });
    a
}

pub struct SecureGroup {
    engine: GroupEngine,
    algebra: Arc<dyn GroupAlgebra>,
    rng: ChaCha8Rng,
    ka: Option<KeyAgreementState>,
    /// Last view handed up; the engine's own view may already be newer.
    installed: Option<View>,
    ka_started: SimTime,
    keys: Option<Arc<KeyMaterial>>,
    sealer: Option<Sealer>,
    opener: Option<Opener>,
    nonce_limit: Option<u64>,
    key_timeout: SimTime,
    pending_out: VecDeque<(Vec<u8>, Mode)>,
    pending_in: Vec<SeqMsg>,
    events: VecDeque<SecureEvent>,
    pub stats: SecureStats,
}

impl std::fmt::Debug for SecureGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecureGroup")
            .field("group", self.engine.group())
            .field("view", &self.engine.view().map(|v| v.id))
            .field("keyed", &self.keys.is_some())
            .finish_non_exhaustive()
    }
}

impl SecureGroup {
    pub fn new(engine: GroupEngine, algebra: Arc<dyn GroupAlgebra>, seed: u64) -> Self {
        Self {
            engine,
            algebra,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ka: None,
            installed: None,
            ka_started: 0,
            keys: None,
            sealer: None,
            opener: None,
            nonce_limit: None,
            key_timeout: 5_000,
            pending_out: VecDeque::new(),
            pending_in: Vec::new(),
            events: VecDeque::new(),
            stats: SecureStats::default(),
        }
    }

    /// Caps messages per sender per key (forces early rekeys in tests).
    pub fn set_nonce_limit(&mut self, limit: u64) {
        self.nonce_limit = Some(limit);
    }

    pub fn engine(&self) -> &GroupEngine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut GroupEngine {
        &mut self.engine
    }

    pub fn view(&self) -> Option<&View> {
        self.installed.as_ref()
    }

    /// Epoch of the key currently in use, if any.
    pub fn key_epoch(&self) -> Option<u64> {
        self.keys.as_ref().map(|k| k.epoch)
    }

    /// The current key, for diagnostics and exclusion tests.
    pub fn key_material(&self) -> Option<Arc<KeyMaterial>> {
        self.keys.clone()
    }

    pub fn is_keyed(&self) -> bool {
        self.keys.is_some()
    }

    pub fn pending_out(&self) -> usize {
        self.pending_out.len()
    }

    pub fn drain_events(&mut self) -> Vec<SecureEvent> {
        self.events.drain(..).collect()
    }

    pub fn join(
        &mut self,
        ctx: &mut Ctx<'_>,
        contact: Option<netsim::EndpointAddr>,
    ) -> Result<(), GroupError> {
        let r = self.engine.join(ctx, contact);
        self.pump(ctx);
        r
    }

    pub fn leave(&mut self, ctx: &mut Ctx<'_>) -> Result<(), GroupError> {
        let r = self.engine.leave(ctx);
        self.pump(ctx);
        r
    }

    /// Seals and multicasts, or queues until the current view is keyed.
    pub fn send(
        &mut self,
        ctx: &mut Ctx<'_>,
        plaintext: Vec<u8>,
        mode: Mode,
    ) -> Result<SendOutcome, GroupError> {
        if plaintext.len() > MAX_PLAINTEXT {
            return Err(GroupError::TooLarge(plaintext.len()));
        }
        if self.engine.view().is_none() {
            return Err(GroupError::NotInView);
        }
        if self.keys.is_none() || self.engine.is_flushing() || !self.pending_out.is_empty() {
            self.pending_out.push_back((plaintext, mode));
            self.flush_out(ctx);
            return Ok(SendOutcome::Queued);
        }
        match self.seal_and_send(ctx, &plaintext, mode) {
            Ok(o) => {
                self.pump(ctx);
                Ok(o)
            }
            Err(SglError::NonceExhausted) => {
                self.pending_out.push_back((plaintext, mode));
                Ok(SendOutcome::Queued)
            }
            Err(_) => unreachable!("sealing only fails on exhaustion"),
        }
    }

    fn seal_and_send(
        &mut self,
        ctx: &mut Ctx<'_>,
        plaintext: &[u8],
        mode: Mode,
    ) -> Result<SendOutcome, SglError> {
        let sealer = self.sealer.as_mut().expect("keyed");
        let a = aad(self.engine.group().as_str(), sealer.epoch(), mode);
        let sealed = match sealer.seal(plaintext, &a) {
            Ok(s) => s,
            Err(e) => {
                self.stats.rekeys_requested += 1;
                self.engine.request_rekey();
                return Err(e);
            }
        };
        let mut payload = Vec::with_capacity(plaintext.len() + SEAL_OVERHEAD);
        payload.push(TAG_SEALED);
        payload.extend_from_slice(&sealed.encode());
        self.stats.sealed_sent += 1;
        Ok(self
            .engine
            .multicast(ctx, payload, mode)
            .expect("size checked and view present"))
    }

    fn flush_out(&mut self, ctx: &mut Ctx<'_>) {
        while self.keys.is_some() && !self.engine.is_flushing() {
            let Some((pt, mode)) = self.pending_out.pop_front() else {
                break;
            };
            if self.seal_and_send(ctx, &pt, mode).is_err() {
                self.pending_out.push_front((pt, mode));
                break;
            }
        }
    }

    pub fn handle_frame(&mut self, ctx: &mut Ctx<'_>, src: netsim::EndpointAddr, frame: &[u8]) {
        self.engine.handle_frame(ctx, src, frame);
        self.pump(ctx);
    }

    pub fn tick(&mut self, ctx: &mut Ctx<'_>) {
        self.engine.tick(ctx);
        let now = ctx.now();
        if self.ka.as_ref().is_some_and(|k| k.phase() != Phase::Done)
            && now.saturating_sub(self.ka_started) > self.key_timeout
            && !self.engine.is_flushing()
        {
            // Restart with a fresh epoch; the coordinator acts on this.
            self.ka_started = now;
            self.stats.rekeys_requested += 1;
            self.engine.request_rekey();
        }
        self.pump(ctx);
    }

    /// Processes engine events until none are left.
    fn pump(&mut self, ctx: &mut Ctx<'_>) {
        loop {
            let evs = self.engine.drain_events();
            if evs.is_empty() {
                break;
            }
            for ev in evs {
                match ev {
                    GroupEvent::Installed(view) => self.on_installed(ctx, view),
                    GroupEvent::Delivered(msg) => self.on_delivered(ctx, msg),
                    GroupEvent::JoinFailed { .. } => self.events.push_back(SecureEvent::JoinFailed),
                    GroupEvent::Left => {
                        self.clear_keys();
                        self.ka = None;
                        self.installed = None;
                        self.pending_out.clear();
                        self.pending_in.clear();
                        self.events.push_back(SecureEvent::Left);
                    }
                    GroupEvent::Suspected(_) => {}
                }
            }
        }
        self.flush_out(ctx);
    }

    fn clear_keys(&mut self) {
        if let Some(o) = self.opener.take() {
            self.stats.auth_fail += o.stats.auth_fail;
            self.stats.stale_epoch += o.stats.stale_epoch;
            self.stats.replayed += o.stats.replayed;
        }
        self.sealer = None;
        self.keys = None;
    }

    fn on_installed(&mut self, ctx: &mut Ctx<'_>, view: View) {
        self.clear_keys();
        let stale = self.pending_in.len();
        self.pending_in.clear();
        self.stats.dropped_unkeyed += stale as u64;
        self.installed = Some(view.clone());
        self.events
            .push_back(SecureEvent::ViewInstalled(view.clone()));
        if self.engine.view().map(|v| v.id) != Some(view.id) {
            // Already superseded; flows for it would land in the newer view.
            self.ka = None;
            return;
        }
        let me = *self.engine.me();
        let secret = self.algebra.random_scalar(&mut self.rng);
        let mut ka = match KeyAgreementState::new(self.algebra.clone(), &view, &me, secret) {
            Ok(k) => k,
            Err(_) => return,
        };
        self.ka_started = ctx.now();
        let step = ka.start();
        self.ka = Some(ka);
        self.apply_step(ctx, step);
    }

    fn apply_step(&mut self, ctx: &mut Ctx<'_>, step: Result<crate::sgl::Step, SglError>) {
        let epoch = self.installed.as_ref().map_or(0, |v| v.id.epoch);
        let step = match step {
            Ok(s) => s,
            Err(reason) => {
                self.events.push_back(SecureEvent::KeyAgreementFailed {
                    epoch,
                    culprit: None,
                    reason,
                });
                return;
            }
        };
        let current = self.engine.view().map(|v| v.id) == self.installed.as_ref().map(|v| v.id);
        if let Some(flow) = step.send.filter(|_| current) {
            let tag = match flow.kind {
                FlowKind::Upflow => TAG_UPFLOW,
                FlowKind::Downflow => TAG_DOWNFLOW,
            };
            let mut payload = vec![tag];
            payload.extend_from_slice(&flow.sign(ctx.identity).encode());
            if let Err(e) = self.engine.multicast(ctx, payload, Mode::ReliableFifo) {
                tracing::warn!("key agreement flow not sent: {e}");
            }
        }
        if let Some(shared) = step.shared {
            let group = self.engine.group().clone();
            let keys = Arc::new(derive_keys(&shared, &group, epoch));
            let view = self.installed.as_ref().expect("keyed views exist");
            let index = view.index_of(self.engine.me()).expect("member") as u32;
            self.sealer = Some(match self.nonce_limit {
                Some(l) => Sealer::with_limit(keys.clone(), index, l),
                None => Sealer::new(keys.clone(), index),
            });
            self.opener = Some(Opener::new(keys.clone()));
            self.keys = Some(keys);
            self.stats.keys_established += 1;
            self.events.push_back(SecureEvent::KeyReady { epoch });
            for msg in std::mem::take(&mut self.pending_in) {
                self.open_sealed(msg);
            }
        }
    }

    fn on_delivered(&mut self, ctx: &mut Ctx<'_>, msg: SeqMsg) {
        let Some((&tag, body)) = msg.payload.split_first() else {
            return;
        };
        match tag {
            TAG_UPFLOW | TAG_DOWNFLOW => self.on_flow(ctx, &msg, body),
            TAG_SEALED => {
                let keyed_for_msg = self
                    .keys
                    .as_ref()
                    .is_some_and(|k| k.epoch == msg.view_id.epoch);
                if keyed_for_msg {
                    self.open_sealed(msg);
                } else if self.view().is_some_and(|v| v.id == msg.view_id) {
                    self.pending_in.push(msg);
                } else {
                    self.stats.dropped_unkeyed += 1;
                }
            }
            _ => self.stats.flows_rejected += 1,
        }
    }

    fn on_flow(&mut self, ctx: &mut Ctx<'_>, msg: &SeqMsg, body: &[u8]) {
        if msg.sender == *self.engine.me() {
            return;
        }
        let epoch = msg.view_id.epoch;
        let Some(ka) = self.ka.as_mut().filter(|k| k.view_id() == msg.view_id) else {
            return;
        };
        let flow = match FlowMessage::decode(body) {
            Ok(f) => f,
            Err(_) => return self.reject_flow(ctx, msg.sender, epoch, SglError::BadElement),
        };
        let verified = flow.sender == msg.sender
            && flow.view_id == msg.view_id
            && ctx
                .certs
                .get(&flow.sender.fingerprint)
                .is_some_and(|c| flow.verify(c));
        if !verified {
            return self.reject_flow(ctx, msg.sender, epoch, SglError::BadSignature);
        }
        match ka.handle(&flow) {
            Ok(step) => self.apply_step(ctx, Ok(step)),
            Err(reason) => self.reject_flow(ctx, msg.sender, epoch, reason),
        }
    }

    fn reject_flow(&mut self, ctx: &mut Ctx<'_>, culprit: ProcessId, epoch: u64, reason: SglError) {
        self.stats.flows_rejected += 1;
        self.events.push_back(SecureEvent::KeyAgreementFailed {
            epoch,
            culprit: Some(culprit),
            reason,
        });
        self.engine.suspect(culprit, ctx.now());
    }

    fn open_sealed(&mut self, msg: SeqMsg) {
        let Some(view) = self.installed.as_ref().filter(|v| v.id == msg.view_id) else {
            self.stats.dropped_unkeyed += 1;
            return;
        };
        let Ok(sealed) = SealedMessage::decode(&msg.payload[1..]) else {
            self.stats.auth_fail += 1;
            return;
        };
        if view.index_of(&msg.sender) != Some(sealed.sender_index() as usize) {
            self.stats.index_mismatch += 1;
            return;
        }
        let a = aad(self.engine.group().as_str(), msg.view_id.epoch, msg.mode);
        let Some(opener) = self.opener.as_mut() else {
            return;
        };
        match opener.open(&sealed, &a) {
            Ok(plaintext) => {
                self.stats.opened += 1;
                self.events.push_back(SecureEvent::Message(AppMessage {
                    sender: msg.sender,
                    mode: msg.mode,
                    view_id: msg.view_id,
                    position: Position {
                        epoch: msg.view_id.epoch,
                        lamport_ts: msg.lamport_ts,
                        sender_seq: msg.sender_seq,
                    },
                    plaintext,
                }));
            }
            Err(e) => tracing::debug!(sender = ?msg.sender, "sealed message rejected: {e}"),
        }
    }

    /// Open-path counters including the live opener.
    pub fn open_counters(&self) -> SecureStats {
        let mut s = self.stats;
        if let Some(o) = &self.opener {
            s.auth_fail += o.stats.auth_fail;
            s.stale_epoch += o.stats.stale_epoch;
            s.replayed += o.stats.replayed;
        }
        s
    }
}
