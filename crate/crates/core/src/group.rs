//! One process's membership and delivery state for one group.
//!
//! View changes use a two-phase coordinator protocol. The coordinator (the
//! smallest live process it knows of, members and probing outsiders alike)
//! sends VIEW_PROPOSE; each proposed member freezes delivery and answers
//! VIEW_ACK carrying, per sender, the highest contiguous seq it holds in
//! its old view. Once every member acked, the coordinator sends
//! VIEW_INSTALL with one cut per old view: the max over that view's
//! survivors plus a holder for each entry. Members fetch what they lack,
//! deliver exactly the cut and install. Partitions heal because members
//! keep heartbeating former peers and contacts; a coordinator that hears
//! outsiders proposes the union.
//!
//! Control frames are signed by their sender; DATA and NACK frames are not
//! (payloads are sealed one layer up).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use netsim::{EndpointAddr, SimTime, Transport};
use serde::Serialize;

use crate::identity::{
    verify_signature, CertBook, Fingerprint, Identity, IdentityCert, TrustStore,
};
use crate::membership::{suspicion_check, GroupId, ProcessId, SuspicionState, View, ViewId};
use crate::ordcast::{
    compute_cut, DataFrame, DeliveryState, Mode, NackFrame, NackTiming, SeqMsg, MAX_PAYLOAD,
};
use crate::wire::{envelope, kind, split_envelope, Reader, WireError, Writer};

type Cut = BTreeMap<ProcessId, (u64, ProcessId)>;

#[derive(Debug, Clone)]
pub struct GroupConfig {
    pub heartbeat: SimTime,
    pub suspect_timeout: SimTime,
    pub confirm_pings: u32,
    pub ping_interval: SimTime,
    pub nack: NackTiming,
    pub propose_retry: SimTime,
    pub ack_timeout: SimTime,
    pub ack_retry: SimTime,
    pub install_timeout: SimTime,
    pub flush_timeout: SimTime,
    pub join_retry: SimTime,
    pub join_retries: u32,
    pub probe_forget: SimTime,
    pub exclusion_cooldown: SimTime,
    pub prev_retention: SimTime,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            heartbeat: 500,
            suspect_timeout: 1_500,
            confirm_pings: 3,
            ping_interval: 150,
            nack: NackTiming::default(),
            propose_retry: 300,
            ack_timeout: 2_000,
            ack_retry: 500,
            install_timeout: 4_000,
            flush_timeout: 4_000,
            join_retry: 500,
            join_retries: 6,
            probe_forget: 600_000,
            exclusion_cooldown: 5_000,
            prev_retention: 10_000,
        }
    }
}

/// Who may be admitted into views of this group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    Open,
    AllowList(BTreeSet<Fingerprint>),
}

impl Admission {
    pub fn admits(&self, p: &ProcessId) -> bool {
        match self {
            Admission::Open => true,
            Admission::AllowList(set) => set.contains(&p.fingerprint),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GroupError {
    #[error("not a member of an installed view")]
    NotInView,
    #[error("not a member")]
    NotMember,
    #[error("already a member")]
    AlreadyMember,
    #[error("payload of {0} bytes exceeds the 64 KiB limit")]
    TooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupEvent {
    Installed(View),
    Delivered(SeqMsg),
    JoinFailed { contact: EndpointAddr },
    Suspected(ProcessId),
    Left,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendOutcome {
    Sent { sender_seq: u64, lamport_ts: u64 },
    Queued,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct GroupStats {
    pub views_installed: u64,
    pub proposals: u64,
    pub join_failures: u64,
    pub suspicions: u64,
    pub bad_frames: u64,
    pub unknown_signer: u64,
    pub flush_aborts: u64,
    pub frames_sent: u64,
}

/// Everything the engine needs from its host for one call.
pub struct Ctx<'a> {
    pub io: &'a mut dyn Transport,
    pub identity: &'a Identity,
    pub trust: &'a mut TrustStore,
    pub certs: &'a mut CertBook,
}

impl Ctx<'_> {
    pub fn now(&self) -> SimTime {
        self.io.now()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Control {
    Heartbeat {
        view_id: Option<ViewId>,
        rekey: bool,
        clock: u64,
        last_seq: u64,
        delivered: Vec<u64>,
        cert: Option<IdentityCert>,
    },
    JoinReq {
        cert: IdentityCert,
    },
    Propose {
        view: View,
        certs: Vec<IdentityCert>,
    },
    Ack {
        view_id: ViewId,
        old_view: Option<ViewId>,
        vector: Vec<(ProcessId, u64)>,
        cert: IdentityCert,
    },
    Install {
        view: View,
        cuts: Vec<(ViewId, Cut)>,
    },
    Leave {
        epoch: u64,
    },
    Ping {
        nonce: u64,
    },
    Pong {
        nonce: u64,
    },
}

impl Control {
    fn kind(&self) -> u8 {
        match self {
            Control::Heartbeat { .. } => kind::HEARTBEAT,
            Control::JoinReq { .. } => kind::JOIN_REQ,
            Control::Propose { .. } => kind::VIEW_PROPOSE,
            Control::Ack { .. } => kind::VIEW_ACK,
            Control::Install { .. } => kind::VIEW_INSTALL,
            Control::Leave { .. } => kind::LEAVE,
            Control::Ping { .. } => kind::PING,
            Control::Pong { .. } => kind::PONG,
        }
    }

    fn certs(&self) -> Vec<&IdentityCert> {
        match self {
            Control::Heartbeat { cert, .. } => cert.iter().collect(),
            Control::JoinReq { cert } | Control::Ack { cert, .. } => vec![cert],
            Control::Propose { certs, .. } => certs.iter().collect(),
            _ => Vec::new(),
        }
    }
}

fn put_opt_view_id(w: &mut Writer, v: &Option<ViewId>) {
    match v {
        Some(id) => {
            w.u8(1);
            id.encode(w);
        }
        None => {
            w.u8(0);
        }
    }
}

fn get_opt_view_id(r: &mut Reader<'_>) -> Result<Option<ViewId>, WireError> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(ViewId::decode(r)?)),
        _ => Err(WireError::Invalid("flag")),
    }
}

fn get_cert(r: &mut Reader<'_>) -> Result<IdentityCert, WireError> {
    IdentityCert::from_bytes(r.bytes16()?)
}

fn put_cut(w: &mut Writer, cut: &Cut) {
    w.u16(cut.len() as u16);
    for (sender, (seq, holder)) in cut {
        sender.encode(w);
        w.u64(*seq);
        holder.encode(w);
    }
}

fn get_cut(r: &mut Reader<'_>) -> Result<Cut, WireError> {
    let n = r.u16()? as usize;
    let mut cut = Cut::new();
    for _ in 0..n {
        let sender = ProcessId::decode(r)?;
        let seq = r.u64()?;
        let holder = ProcessId::decode(r)?;
        cut.insert(sender, (seq, holder));
    }
    Ok(cut)
}

/// Encodes and signs a control frame.
fn encode_control(
    group: &GroupId,
    signer: &ProcessId,
    body: &Control,
    identity: &Identity,
) -> Vec<u8> {
    let mut w = envelope(body.kind());
    group.encode(&mut w);
    signer.encode(&mut w);
    match body {
        Control::Heartbeat {
            view_id,
            rekey,
            clock,
            last_seq,
            delivered,
            cert,
        } => {
            put_opt_view_id(&mut w, view_id);
            w.u8(*rekey as u8)
                .u64(*clock)
                .u64(*last_seq)
                .u16(delivered.len() as u16);
            for d in delivered {
                w.u64(*d);
            }
            match cert {
                Some(c) => w.u8(1).bytes16(&c.to_bytes()),
                None => w.u8(0),
            };
        }
        Control::JoinReq { cert } => {
            w.bytes16(&cert.to_bytes());
        }
        Control::Propose { view, certs } => {
            view.encode(&mut w);
            w.u16(certs.len() as u16);
            for c in certs {
                w.bytes16(&c.to_bytes());
            }
        }
        Control::Ack {
            view_id,
            old_view,
            vector,
            cert,
        } => {
            view_id.encode(&mut w);
            put_opt_view_id(&mut w, old_view);
            w.u16(vector.len() as u16);
            for (p, seq) in vector {
                p.encode(&mut w);
                w.u64(*seq);
            }
            w.bytes16(&cert.to_bytes());
        }
        Control::Install { view, cuts } => {
            view.encode(&mut w);
            w.u16(cuts.len() as u16);
            for (old, cut) in cuts {
                old.encode(&mut w);
                put_cut(&mut w, cut);
            }
        }
        Control::Leave { epoch } => {
            w.u64(*epoch);
        }
        Control::Ping { nonce } | Control::Pong { nonce } => {
            w.u64(*nonce);
        }
    }
    let sig = identity.sign(w.as_slice());
    w.raw(&sig);
    w.finish()
}

struct SignedControl {
    group: GroupId,
    signer: ProcessId,
    body: Control,
    signed: Vec<u8>,
    signature: [u8; 64],
}

fn decode_control(frame: &[u8]) -> Result<SignedControl, WireError> {
    if frame.len() < 64 + 5 {
        return Err(WireError::Truncated);
    }
    let (signed, sig) = frame.split_at(frame.len() - 64);
    let (k, body) = split_envelope(signed)?;
    let mut r = Reader::new(body);
    let group = GroupId::decode(&mut r)?;
    let signer = ProcessId::decode(&mut r)?;
    let body = match k {
        kind::HEARTBEAT => {
            let view_id = get_opt_view_id(&mut r)?;
            let rekey = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(WireError::Invalid("flag")),
            };
            let clock = r.u64()?;
            let last_seq = r.u64()?;
            let n = r.u16()? as usize;
            let mut delivered = Vec::with_capacity(n);
            for _ in 0..n {
                delivered.push(r.u64()?);
            }
            let cert = match r.u8()? {
                0 => None,
                1 => Some(get_cert(&mut r)?),
                _ => return Err(WireError::Invalid("flag")),
            };
            Control::Heartbeat {
                view_id,
                rekey,
                clock,
                last_seq,
                delivered,
                cert,
            }
        }
        kind::JOIN_REQ => Control::JoinReq {
            cert: get_cert(&mut r)?,
        },
        kind::VIEW_PROPOSE => {
            let view = View::decode(&mut r)?;
            let n = r.u16()? as usize;
            let mut certs = Vec::with_capacity(n);
            for _ in 0..n {
                certs.push(get_cert(&mut r)?);
            }
            Control::Propose { view, certs }
        }
        kind::VIEW_ACK => {
            let view_id = ViewId::decode(&mut r)?;
            let old_view = get_opt_view_id(&mut r)?;
            let n = r.u16()? as usize;
            let mut vector = Vec::with_capacity(n);
            for _ in 0..n {
                vector.push((ProcessId::decode(&mut r)?, r.u64()?));
            }
            let cert = get_cert(&mut r)?;
            Control::Ack {
                view_id,
                old_view,
                vector,
                cert,
            }
        }
        kind::VIEW_INSTALL => {
            let view = View::decode(&mut r)?;
            let n = r.u16()? as usize;
            let mut cuts = Vec::with_capacity(n);
            for _ in 0..n {
                cuts.push((ViewId::decode(&mut r)?, get_cut(&mut r)?));
            }
            Control::Install { view, cuts }
        }
        kind::LEAVE => Control::Leave { epoch: r.u64()? },
        kind::PING => Control::Ping { nonce: r.u64()? },
        kind::PONG => Control::Pong { nonce: r.u64()? },
        other => return Err(WireError::UnknownKind(other)),
    };
    r.finish()?;
    Ok(SignedControl {
        group,
        signer,
        body,
        signed: signed.to_vec(),
        signature: sig.try_into().expect("64 bytes"),
    })
}

/// Reads the group name of any group frame without full decoding.
pub fn frame_group(frame: &[u8]) -> Result<GroupId, WireError> {
    let (_, body) = split_envelope(frame)?;
    GroupId::decode(&mut Reader::new(body))
}

#[derive(Debug, Clone, Copy)]
struct PeerInfo {
    last_heard: SimTime,
    view_id: Option<ViewId>,
    in_sync_at: SimTime,
}

#[derive(Debug, Clone, Copy)]
struct Confirm {
    pings: u32,
    next: SimTime,
}

#[derive(Debug, Clone, Copy)]
struct JoinAttempt {
    contact: EndpointAddr,
    tries: u32,
    next: SimTime,
}

#[derive(Debug, Clone)]
struct ProposerState {
    view: View,
    frame: Vec<u8>,
    acks: BTreeMap<ProcessId, (Option<ViewId>, Vec<(ProcessId, u64)>)>,
    started: SimTime,
    next_retry: SimTime,
    install_frame: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
struct FlushState {
    target: View,
    coordinator: ProcessId,
    acked_at: SimTime,
    next_ack: SimTime,
    ack_frame: Vec<u8>,
    cut: Option<(Cut, SimTime)>,
}

#[derive(Debug)]
pub struct GroupEngine {
    cfg: GroupConfig,
    group: GroupId,
    me: ProcessId,
    admission: Admission,
    active: bool,
    view: Option<View>,
    delivery: Option<DeliveryState>,
    prev: Option<(DeliveryState, SimTime)>,
    max_epoch: u64,
    highest_acked: Option<ViewId>,
    installed_at: SimTime,
    peers: BTreeMap<ProcessId, PeerInfo>,
    suspicion: SuspicionState,
    confirm: BTreeMap<ProcessId, Confirm>,
    confirmed: BTreeSet<ProcessId>,
    excluded: BTreeMap<ProcessId, SimTime>,
    ack_failures: BTreeMap<ProcessId, u32>,
    joiners: BTreeMap<ProcessId, SimTime>,
    leavers: BTreeSet<ProcessId>,
    contacts: BTreeSet<EndpointAddr>,
    join: Option<JoinAttempt>,
    proposal: Option<ProposerState>,
    flush: Option<FlushState>,
    future: Vec<DataFrame>,
    pending: VecDeque<(Vec<u8>, Mode)>,
    next_hb: SimTime,
    ping_nonce: u64,
    rekey_requested: bool,
    events: VecDeque<GroupEvent>,
    pub stats: GroupStats,
}

const MAX_FUTURE: usize = 4_096;

impl GroupEngine {
    pub fn new(cfg: GroupConfig, group: GroupId, me: ProcessId) -> Self {
        Self {
            cfg,
            group,
            me,
            admission: Admission::Open,
            active: false,
            view: None,
            delivery: None,
            prev: None,
            max_epoch: 0,
            highest_acked: None,
            installed_at: 0,
            peers: BTreeMap::new(),
            suspicion: SuspicionState::default(),
            confirm: BTreeMap::new(),
            confirmed: BTreeSet::new(),
            excluded: BTreeMap::new(),
            ack_failures: BTreeMap::new(),
            joiners: BTreeMap::new(),
            leavers: BTreeSet::new(),
            contacts: BTreeSet::new(),
            join: None,
            proposal: None,
            flush: None,
            future: Vec::new(),
            pending: VecDeque::new(),
            next_hb: 0,
            ping_nonce: 0,
            rekey_requested: false,
            events: VecDeque::new(),
            stats: GroupStats::default(),
        }
    }

    pub fn group(&self) -> &GroupId {
        &self.group
    }

    pub fn me(&self) -> &ProcessId {
        &self.me
    }

    pub fn view(&self) -> Option<&View> {
        self.view.as_ref()
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn is_flushing(&self) -> bool {
        self.flush.is_some()
    }

    pub fn delivery(&self) -> Option<&DeliveryState> {
        self.delivery.as_ref()
    }

    pub fn suspects(&self) -> &BTreeSet<ProcessId> {
        &self.confirmed
    }

    pub fn set_admission(&mut self, admission: Admission) {
        self.admission = admission;
    }

    pub fn admission(&self) -> &Admission {
        &self.admission
    }

    /// Extra addresses to keep probing (bootstrap peers).
    pub fn add_contact(&mut self, addr: EndpointAddr) {
        if addr != self.me.addr {
            self.contacts.insert(addr);
        }
    }

    pub fn drain_events(&mut self) -> Vec<GroupEvent> {
        self.events.drain(..).collect()
    }

    /// Marks `p` as failed (e.g. a bad key-agreement signature).
    pub fn suspect(&mut self, p: ProcessId, now: SimTime) {
        if p != self.me && self.confirmed.insert(p) {
            self.excluded.insert(p, now + self.cfg.exclusion_cooldown);
            self.stats.suspicions += 1;
            self.events.push_back(GroupEvent::Suspected(p));
        }
    }

    /// Asks for a fresh view with the same membership (new epoch, new key).
    /// Non-coordinators pass the request on in their heartbeats.
    pub fn request_rekey(&mut self) {
        self.rekey_requested = true;
    }

    /// Joins the group: alone with no contact, otherwise through `contact`.
    pub fn join(
        &mut self,
        ctx: &mut Ctx<'_>,
        contact: Option<EndpointAddr>,
    ) -> Result<(), GroupError> {
        if self.active {
            return Err(GroupError::AlreadyMember);
        }
        self.active = true;
        let now = ctx.now();
        self.next_hb = now;
        match contact {
            None => self.install_singleton(ctx),
            Some(addr) => {
                self.add_contact(addr);
                self.join = Some(JoinAttempt {
                    contact: addr,
                    tries: 0,
                    next: now,
                });
                self.tick(ctx);
            }
        }
        Ok(())
    }

    /// Sends a leave notice and discards all group state.
    pub fn leave(&mut self, ctx: &mut Ctx<'_>) -> Result<(), GroupError> {
        if !self.active {
            return Err(GroupError::NotMember);
        }
        if let Some(view) = &self.view {
            let frame = self.control(
                ctx,
                &Control::Leave {
                    epoch: view.id.epoch,
                },
            );
            let others: Vec<_> = view
                .members()
                .iter()
                .filter(|m| **m != self.me)
                .map(|m| m.addr)
                .collect();
            for addr in others {
                // Two copies: a lost notice only costs a suspicion timeout.
                self.send(ctx, addr, &frame);
                self.send(ctx, addr, &frame);
            }
        }
        let stats = self.stats;
        let (cfg, group, me, contacts) = (
            self.cfg.clone(),
            self.group.clone(),
            self.me,
            std::mem::take(&mut self.contacts),
        );
        let max_epoch = self
            .max_epoch
            .max(self.highest_acked.map_or(0, |h| h.epoch));
        *self = Self::new(cfg, group, me);
        self.contacts = contacts;
        self.max_epoch = max_epoch;
        self.stats = stats;
        self.events.push_back(GroupEvent::Left);
        Ok(())
    }

    pub fn multicast(
        &mut self,
        ctx: &mut Ctx<'_>,
        payload: Vec<u8>,
        mode: Mode,
    ) -> Result<SendOutcome, GroupError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(GroupError::TooLarge(payload.len()));
        }
        if self.view.is_none() {
            return Err(GroupError::NotInView);
        }
        if self.flush.is_some() {
            self.pending.push_back((payload, mode));
            return Ok(SendOutcome::Queued);
        }
        let d = self.delivery.as_mut().expect("view has delivery state");
        let (msg, frames) = match d.multicast(payload, mode) {
            Ok(x) => x,
            Err(crate::ordcast::OrdError::TooLarge(n)) => return Err(GroupError::TooLarge(n)),
            Err(crate::ordcast::OrdError::Frozen) => unreachable!("frozen only while flushing"),
        };
        let others: Vec<_> = self.others();
        for addr in others {
            for f in &frames {
                self.send(ctx, addr, f);
            }
        }
        self.collect();
        Ok(SendOutcome::Sent {
            sender_seq: msg.sender_seq,
            lamport_ts: msg.lamport_ts,
        })
    }

    fn others(&self) -> Vec<EndpointAddr> {
        self.view
            .as_ref()
            .map(|v| {
                v.members()
                    .iter()
                    .filter(|m| **m != self.me)
                    .map(|m| m.addr)
                    .collect()
            })
            .unwrap_or_default()
    }

    fn send(&mut self, ctx: &mut Ctx<'_>, addr: EndpointAddr, frame: &[u8]) {
        if addr == self.me.addr {
            return;
        }
        self.stats.frames_sent += 1;
        if let Err(e) = ctx.io.send_datagram(addr, frame) {
            tracing::debug!(group = %self.group, %addr, "send failed: {e}");
        }
    }

    fn control(&self, ctx: &Ctx<'_>, body: &Control) -> Vec<u8> {
        encode_control(&self.group, &self.me, body, ctx.identity)
    }

    fn collect(&mut self) {
        if let Some(d) = self.delivery.as_mut() {
            for m in d.take_delivered() {
                self.events.push_back(GroupEvent::Delivered(m));
            }
        }
    }

    fn install_singleton(&mut self, ctx: &mut Ctx<'_>) {
        let epoch = self
            .max_epoch
            .max(self.highest_acked.map_or(0, |h| h.epoch))
            + 1;
        let view = View::new(
            self.group.clone(),
            ViewId {
                epoch,
                initiator: self.me,
            },
            [self.me],
        )
        .expect("non-empty");
        self.highest_acked = Some(view.id);
        self.install(ctx, view);
    }

    fn install(&mut self, ctx: &mut Ctx<'_>, view: View) {
        let now = ctx.now();
        debug_assert!(view.contains(&self.me));
        debug_assert!(self
            .view
            .as_ref()
            .is_none_or(|v| v.id.epoch < view.id.epoch));
        if let Some(old) = self.delivery.take() {
            self.prev = Some((old, now + self.cfg.prev_retention));
        }
        self.delivery = Some(DeliveryState::new(view.clone(), &self.me, self.cfg.nack));
        self.max_epoch = self.max_epoch.max(view.id.epoch);
        self.installed_at = now;
        self.flush = None;
        self.join = None;
        if self.proposal.as_ref().is_some_and(|p| p.view.id < view.id) {
            self.proposal = None;
        }
        self.suspicion.reset(&view, &self.me, now);
        self.confirm.clear();
        self.confirmed.clear();
        self.ack_failures.clear();
        self.rekey_requested = false;
        self.joiners.retain(|j, _| !view.contains(j));
        self.leavers.retain(|l| view.contains(l));
        for m in view.members() {
            if let Some(p) = self.peers.get_mut(m) {
                p.in_sync_at = now;
                p.last_heard = p.last_heard.max(now);
            }
        }
        self.stats.views_installed += 1;
        self.view = Some(view.clone());
        self.events.push_back(GroupEvent::Installed(view.clone()));
        let future = std::mem::take(&mut self.future);
        if let Some(d) = self.delivery.as_mut() {
            for f in future.into_iter().filter(|f| f.view_id == view.id) {
                d.handle_data(f, now);
            }
        }
        self.collect();
        let pending: Vec<_> = self.pending.drain(..).collect();
        for (payload, mode) in pending {
            let _ = self.multicast(ctx, payload, mode);
        }
    }

    /// Handles one inbound group frame from `src`.
    pub fn handle_frame(&mut self, ctx: &mut Ctx<'_>, src: EndpointAddr, frame: &[u8]) {
        if !self.active {
            return;
        }
        let Ok((k, body)) = split_envelope(frame) else {
            self.stats.bad_frames += 1;
            return;
        };
        match k {
            kind::DATA => match DataFrame::decode(body) {
                Ok(f) if f.group == self.group => self.on_data(ctx, f),
                _ => self.stats.bad_frames += 1,
            },
            kind::NACK => match NackFrame::decode(body) {
                Ok(n) if n.group == self.group => self.on_nack(ctx, src, n),
                _ => self.stats.bad_frames += 1,
            },
            _ => self.on_control(ctx, src, frame),
        }
    }

    fn heard(&mut self, p: &ProcessId, now: SimTime) {
        if *p == self.me {
            return;
        }
        self.suspicion.heard(p, now);
        self.confirm.remove(p);
        self.confirmed.remove(p);
        let e = self.peers.entry(*p).or_insert(PeerInfo {
            last_heard: now,
            view_id: None,
            in_sync_at: now,
        });
        e.last_heard = e.last_heard.max(now);
    }

    fn on_data(&mut self, ctx: &mut Ctx<'_>, f: DataFrame) {
        let now = ctx.now();
        let cur = self.view.as_ref().map(|v| v.id);
        if Some(f.view_id) == cur {
            if self.view.as_ref().is_some_and(|v| v.contains(&f.sender)) {
                self.heard(&f.sender, now);
            }
            if let Some(d) = self.delivery.as_mut() {
                d.handle_data(f, now);
            }
            self.collect();
        } else if self
            .flush
            .as_ref()
            .is_some_and(|fl| fl.target.id == f.view_id)
        {
            if self.future.len() < MAX_FUTURE {
                self.future.push(f);
            }
        } else if let Some(d) = self.delivery.as_mut() {
            d.counters.wrong_view += 1;
        }
    }

    fn on_nack(&mut self, ctx: &mut Ctx<'_>, src: EndpointAddr, n: NackFrame) {
        let frames = match (&mut self.delivery, &mut self.prev) {
            (Some(d), _) if d.view().id == n.view_id => d.retransmit(&n.target, &n.ranges),
            (_, Some((p, _))) if p.view().id == n.view_id => p.retransmit(&n.target, &n.ranges),
            _ => return,
        };
        for f in frames {
            self.send(ctx, src, &f);
        }
    }

    fn on_control(&mut self, ctx: &mut Ctx<'_>, src: EndpointAddr, frame: &[u8]) {
        let now = ctx.now();
        let Ok(sc) = decode_control(frame) else {
            self.stats.bad_frames += 1;
            return;
        };
        if sc.group != self.group || sc.signer == self.me {
            return;
        }
        for cert in sc.body.certs() {
            if ctx.certs.admit(cert, ctx.trust, now).is_err() {
                self.stats.bad_frames += 1;
                return;
            }
        }
        let Some(cert) = ctx.certs.get(&sc.signer.fingerprint) else {
            self.stats.unknown_signer += 1;
            return;
        };
        if !verify_signature(cert, &sc.signed, &sc.signature) {
            self.stats.bad_frames += 1;
            return;
        }
        let signer = sc.signer;
        match sc.body {
            Control::Leave { .. } => {
                if self.view.as_ref().is_some_and(|v| v.contains(&signer)) {
                    self.leavers.insert(signer);
                }
                self.peers.remove(&signer);
                self.joiners.remove(&signer);
                // Late heartbeats from the leaver must not look like a prober.
                self.excluded
                    .insert(signer, now + self.cfg.exclusion_cooldown);
                return;
            }
            _ => self.heard(&signer, now),
        }
        match sc.body {
            Control::Heartbeat {
                view_id,
                rekey,
                clock,
                last_seq,
                delivered,
                ..
            } => {
                if let Some(id) = view_id {
                    self.max_epoch = self.max_epoch.max(id.epoch);
                }
                let cur = self.view.as_ref().map(|v| v.id);
                if let Some(p) = self.peers.get_mut(&signer) {
                    p.view_id = view_id;
                    if view_id.is_some() && view_id == cur {
                        p.in_sync_at = now;
                    }
                }
                if view_id.is_some() && view_id == cur {
                    if rekey {
                        self.rekey_requested = true;
                    }
                    if let Some(d) = self.delivery.as_mut() {
                        d.on_heartbeat(&signer, clock, last_seq, &delivered, now);
                    }
                    self.collect();
                }
            }
            Control::JoinReq { .. } => {
                if self.view.is_none() || !self.admission.admits(&signer) {
                    return;
                }
                self.excluded.remove(&signer);
                self.joiners.insert(signer, now);
                if let Some(c) = self.coordinator(now) {
                    if c != self.me {
                        self.send(ctx, c.addr, frame);
                    }
                }
            }
            Control::Propose { view, .. } => self.on_propose(ctx, signer, view),
            Control::Ack {
                view_id,
                old_view,
                vector,
                ..
            } => self.on_ack(ctx, signer, view_id, old_view, vector),
            Control::Install { view, cuts } => self.on_install(ctx, signer, view, cuts),
            Control::Ping { nonce } => {
                let pong = self.control(ctx, &Control::Pong { nonce });
                self.send(ctx, src, &pong);
            }
            Control::Pong { .. } | Control::Leave { .. } => {}
        }
    }

    fn on_propose(&mut self, ctx: &mut Ctx<'_>, signer: ProcessId, view: View) {
        let now = ctx.now();
        if signer != view.id.initiator || !view.contains(&self.me) || view.group != self.group {
            return;
        }
        if self
            .view
            .as_ref()
            .is_some_and(|v| v.id.epoch >= view.id.epoch)
        {
            return;
        }
        if !view
            .members()
            .iter()
            .all(|m| self.admission.admits(m) || *m == self.me)
        {
            return;
        }
        if let Some(h) = self.highest_acked {
            if view.id < h {
                return;
            }
            if view.id == h {
                if let Some(f) = &self.flush {
                    if f.target.id == view.id && f.cut.is_none() {
                        let (addr, frame) = (f.coordinator.addr, f.ack_frame.clone());
                        self.send(ctx, addr, &frame);
                    }
                }
                return;
            }
        }
        self.max_epoch = self.max_epoch.max(view.id.epoch);
        self.highest_acked = Some(view.id);
        self.join = None;
        if self.proposal.as_ref().is_some_and(|p| p.view.id < view.id) {
            self.proposal = None;
        }
        let old_view = self.view.as_ref().map(|v| v.id);
        let vector = match self.delivery.as_mut() {
            Some(d) => {
                d.freeze();
                d.flush_vector()
            }
            None => Vec::new(),
        };
        self.future.retain(|f| f.view_id == view.id);
        let ack = Control::Ack {
            view_id: view.id,
            old_view,
            vector: vector.clone(),
            cert: ctx.identity.cert().clone(),
        };
        let ack_frame = self.control(ctx, &ack);
        self.flush = Some(FlushState {
            target: view.clone(),
            coordinator: signer,
            acked_at: now,
            next_ack: now + self.cfg.ack_retry,
            ack_frame: ack_frame.clone(),
            cut: None,
        });
        if signer == self.me {
            self.on_ack(ctx, self.me, view.id, old_view, vector);
        } else {
            self.send(ctx, signer.addr, &ack_frame);
        }
    }

    fn on_ack(
        &mut self,
        ctx: &mut Ctx<'_>,
        acker: ProcessId,
        view_id: ViewId,
        old_view: Option<ViewId>,
        vector: Vec<(ProcessId, u64)>,
    ) {
        let Some(p) = self.proposal.as_mut() else {
            return;
        };
        if p.view.id != view_id || !p.view.contains(&acker) {
            return;
        }
        if let Some(install) = &p.install_frame {
            let install = install.clone();
            self.send(ctx, acker.addr, &install);
            return;
        }
        p.acks.insert(acker, (old_view, vector));
        if p.acks.len() < p.view.len() {
            return;
        }
        let mut by_old: BTreeMap<ViewId, Vec<(ProcessId, &[(ProcessId, u64)])>> = BTreeMap::new();
        for (a, (old, vec)) in &p.acks {
            if let Some(old) = old {
                by_old.entry(*old).or_default().push((*a, vec.as_slice()));
            }
        }
        let cuts: Vec<(ViewId, Cut)> = by_old
            .into_iter()
            .map(|(old, vs)| (old, compute_cut(vs)))
            .collect();
        let view = p.view.clone();
        let frame = encode_control(
            &self.group,
            &self.me,
            &Control::Install {
                view: view.clone(),
                cuts: cuts.clone(),
            },
            ctx.identity,
        );
        p.install_frame = Some(frame.clone());
        let others: Vec<_> = view
            .members()
            .iter()
            .filter(|m| **m != self.me)
            .map(|m| m.addr)
            .collect();
        for addr in others {
            self.send(ctx, addr, &frame);
        }
        let me = self.me;
        self.on_install(ctx, me, view, cuts);
    }

    fn on_install(
        &mut self,
        ctx: &mut Ctx<'_>,
        signer: ProcessId,
        view: View,
        cuts: Vec<(ViewId, Cut)>,
    ) {
        let now = ctx.now();
        let Some(f) = self.flush.as_mut() else { return };
        if f.target.id != view.id
            || signer != view.id.initiator
            || f.target != view
            || f.cut.is_some()
        {
            return;
        }
        let my_old = self.view.as_ref().map(|v| v.id);
        let cut = cuts
            .into_iter()
            .find(|(old, _)| Some(*old) == my_old)
            .map(|(_, c)| c)
            .unwrap_or_default();
        if let Some(d) = self.delivery.as_mut() {
            d.set_flush_target(&cut, now);
        }
        f.cut = Some((cut, now));
        self.try_complete_flush(ctx);
    }

    fn try_complete_flush(&mut self, ctx: &mut Ctx<'_>) {
        let Some(f) = &self.flush else { return };
        let Some((cut, _)) = &f.cut else { return };
        if let Some(d) = self.delivery.as_mut() {
            if !d.flush_complete(cut) {
                return;
            }
            let report = d.finish_flush(cut);
            for m in report.delivered {
                self.events.push_back(GroupEvent::Delivered(m));
            }
        }
        let target = f.target.clone();
        self.install(ctx, target);
    }

    /// The smallest live process with a view that this member knows of,
    /// view members and probing outsiders alike. Joiners without a view
    /// never coordinate.
    fn coordinator(&self, now: SimTime) -> Option<ProcessId> {
        self.electors(now).into_iter().next()
    }

    fn electors(&self, now: SimTime) -> BTreeSet<ProcessId> {
        let Some(view) = &self.view else {
            return BTreeSet::new();
        };
        let mut all: BTreeSet<ProcessId> = view
            .members()
            .iter()
            .filter(|m| **m == self.me || !self.confirmed.contains(m))
            .copied()
            .collect();
        for (p, info) in &self.peers {
            if view.contains(p)
                || self.is_excluded(p, now)
                || !self.admission.admits(p)
                || info.view_id.is_none()
            {
                continue;
            }
            if now.saturating_sub(info.last_heard) <= self.cfg.suspect_timeout {
                all.insert(*p);
            }
        }
        all
    }

    fn is_excluded(&self, p: &ProcessId, now: SimTime) -> bool {
        self.excluded.get(p).is_some_and(|t| *t > now)
    }

    fn maybe_propose(&mut self, ctx: &mut Ctx<'_>) {
        let now = ctx.now();
        if self.flush.is_some()
            || self
                .proposal
                .as_ref()
                .is_some_and(|p| p.install_frame.is_none())
        {
            return;
        }
        let Some(view) = self.view.clone() else {
            return;
        };
        let mut everyone = self.electors(now);
        if everyone.first() != Some(&self.me) {
            return;
        }
        for (p, at) in &self.joiners {
            if now.saturating_sub(*at) <= 4 * self.cfg.suspect_timeout && !self.is_excluded(p, now)
            {
                everyone.insert(*p);
            }
        }
        let desired: Vec<ProcessId> = everyone
            .into_iter()
            .filter(|p| !self.leavers.contains(p))
            .collect();
        let stale = view.members().iter().any(|m| {
            *m != self.me
                && !self.confirmed.contains(m)
                && self.peers.get(m).is_some_and(|p| {
                    p.view_id != Some(view.id)
                        && now.saturating_sub(p.in_sync_at.max(self.installed_at))
                            > self.cfg.suspect_timeout
                        && now.saturating_sub(p.last_heard) <= self.cfg.suspect_timeout
                })
        });
        if desired.as_slice() != view.members() || stale || self.rekey_requested {
            self.propose(ctx, desired);
        }
    }

    fn propose(&mut self, ctx: &mut Ctx<'_>, members: Vec<ProcessId>) {
        let now = ctx.now();
        let epoch = self
            .max_epoch
            .max(self.highest_acked.map_or(0, |h| h.epoch))
            .max(self.view.as_ref().map_or(0, |v| v.id.epoch))
            + 1;
        self.max_epoch = epoch;
        let view = View::new(
            self.group.clone(),
            ViewId {
                epoch,
                initiator: self.me,
            },
            members,
        )
        .expect("coordinator is always included");
        let certs: Vec<IdentityCert> = view
            .members()
            .iter()
            .filter_map(|m| {
                ctx.certs
                    .get(&m.fingerprint)
                    .cloned()
                    .or_else(|| (*m == self.me).then(|| ctx.identity.cert().clone()))
            })
            .collect();
        let frame = self.control(
            ctx,
            &Control::Propose {
                view: view.clone(),
                certs,
            },
        );
        self.stats.proposals += 1;
        tracing::debug!(group = %self.group, me = %self.me, ?view, "proposing");
        self.proposal = Some(ProposerState {
            view: view.clone(),
            frame: frame.clone(),
            acks: BTreeMap::new(),
            started: now,
            next_retry: now + self.cfg.propose_retry,
            install_frame: None,
        });
        let others: Vec<_> = view
            .members()
            .iter()
            .filter(|m| **m != self.me)
            .map(|m| m.addr)
            .collect();
        for addr in others {
            self.send(ctx, addr, &frame);
        }
        let me = self.me;
        self.on_propose(ctx, me, view);
    }

    /// Periodic work; call at least every few tens of milliseconds.
    pub fn tick(&mut self, ctx: &mut Ctx<'_>) {
        if !self.active {
            return;
        }
        let now = ctx.now();
        self.tick_join(ctx, now);
        self.tick_flush(ctx, now);
        if self.view.is_none() {
            return;
        }
        if now >= self.next_hb {
            self.next_hb = now + self.cfg.heartbeat;
            self.send_heartbeats(ctx);
        }
        self.tick_suspicion(ctx, now);
        self.tick_proposal(ctx, now);
        self.maybe_propose(ctx);
        if let Some(d) = self.delivery.as_mut() {
            for req in d.tick(now) {
                for t in req.targets {
                    if t != self.me {
                        self.stats.frames_sent += 1;
                        let _ = ctx.io.send_datagram(t.addr, &req.frame);
                    }
                }
            }
        }
        if self.prev.as_ref().is_some_and(|(_, until)| *until <= now) {
            self.prev = None;
        }
        self.excluded.retain(|_, t| *t > now);
        self.joiners
            .retain(|_, at| now.saturating_sub(*at) <= 4 * self.cfg.suspect_timeout);
    }

    fn tick_join(&mut self, ctx: &mut Ctx<'_>, now: SimTime) {
        let Some(j) = self.join else { return };
        if now < j.next {
            return;
        }
        if j.tries < self.cfg.join_retries {
            let frame = self.control(
                ctx,
                &Control::JoinReq {
                    cert: ctx.identity.cert().clone(),
                },
            );
            self.send(ctx, j.contact, &frame);
            self.join = Some(JoinAttempt {
                tries: j.tries + 1,
                next: now + self.cfg.join_retry,
                ..j
            });
        } else {
            self.join = None;
            self.stats.join_failures += 1;
            self.events
                .push_back(GroupEvent::JoinFailed { contact: j.contact });
            if self.view.is_none() && self.flush.is_none() {
                self.install_singleton(ctx);
            }
        }
    }

    fn tick_flush(&mut self, ctx: &mut Ctx<'_>, now: SimTime) {
        let Some(f) = self.flush.as_mut() else { return };
        match &f.cut {
            None => {
                if now.saturating_sub(f.acked_at) > self.cfg.install_timeout {
                    let coordinator = f.coordinator;
                    self.abort_flush(ctx, [coordinator]);
                } else if now >= f.next_ack {
                    f.next_ack = now + self.cfg.ack_retry;
                    let (addr, frame) = (f.coordinator.addr, f.ack_frame.clone());
                    if f.coordinator != self.me {
                        self.send(ctx, addr, &frame);
                    }
                }
            }
            Some((cut, at)) => {
                if now.saturating_sub(*at) > self.cfg.flush_timeout {
                    let holders: Vec<ProcessId> = cut.values().map(|(_, h)| *h).collect();
                    self.abort_flush(ctx, holders);
                } else {
                    self.try_complete_flush(ctx);
                }
            }
        }
    }

    fn abort_flush(&mut self, ctx: &mut Ctx<'_>, blame: impl IntoIterator<Item = ProcessId>) {
        let now = ctx.now();
        self.stats.flush_aborts += 1;
        self.flush = None;
        self.future.clear();
        for p in blame {
            self.suspect(p, now);
        }
        if let Some(d) = self.delivery.as_mut() {
            d.unfreeze();
        }
        self.collect();
        if self.view.is_none() {
            self.install_singleton(ctx);
        } else {
            let pending: Vec<_> = self.pending.drain(..).collect();
            for (payload, mode) in pending {
                let _ = self.multicast(ctx, payload, mode);
            }
        }
    }

    fn tick_proposal(&mut self, ctx: &mut Ctx<'_>, now: SimTime) {
        let Some(p) = self.proposal.as_mut() else {
            return;
        };
        if p.install_frame.is_some() {
            return;
        }
        if now.saturating_sub(p.started) > self.cfg.ack_timeout {
            let silent: Vec<ProcessId> = p
                .view
                .members()
                .iter()
                .filter(|m| !p.acks.contains_key(m))
                .copied()
                .collect();
            self.proposal = None;
            // A silent process we still hear from was probably busy with a
            // competing proposal; give it one more round before excluding.
            let silent: Vec<ProcessId> = silent
                .into_iter()
                .filter(|s| {
                    let failures = self.ack_failures.entry(*s).or_default();
                    *failures += 1;
                    let heard = self.peers.get(s).is_some_and(|i| {
                        now.saturating_sub(i.last_heard) <= self.cfg.suspect_timeout
                    });
                    !heard || *failures >= 2
                })
                .collect();
            // Our own flush for the abandoned proposal is void too.
            if self
                .flush
                .as_ref()
                .is_some_and(|f| f.coordinator == self.me)
            {
                self.abort_flush(ctx, silent);
            } else {
                for s in silent {
                    self.suspect(s, now);
                }
            }
            return;
        }
        if now >= p.next_retry {
            p.next_retry = now + self.cfg.propose_retry;
            let frame = p.frame.clone();
            let targets: Vec<_> = p
                .view
                .members()
                .iter()
                .filter(|m| **m != self.me && !p.acks.contains_key(m))
                .map(|m| m.addr)
                .collect();
            for addr in targets {
                self.send(ctx, addr, &frame);
            }
        }
    }

    fn tick_suspicion(&mut self, ctx: &mut Ctx<'_>, now: SimTime) {
        for p in suspicion_check(&mut self.suspicion, now, self.cfg.suspect_timeout) {
            self.confirm.insert(
                p,
                Confirm {
                    pings: 0,
                    next: now,
                },
            );
        }
        let due: Vec<ProcessId> = self
            .confirm
            .iter()
            .filter(|(_, c)| c.next <= now)
            .map(|(p, _)| *p)
            .collect();
        for p in due {
            let c = self.confirm[&p];
            if c.pings < self.cfg.confirm_pings {
                self.ping_nonce += 1;
                let frame = self.control(
                    ctx,
                    &Control::Ping {
                        nonce: self.ping_nonce,
                    },
                );
                self.send(ctx, p.addr, &frame);
                self.confirm.insert(
                    p,
                    Confirm {
                        pings: c.pings + 1,
                        next: now + self.cfg.ping_interval,
                    },
                );
            } else {
                self.confirm.remove(&p);
                if self.confirmed.insert(p) {
                    self.stats.suspicions += 1;
                    self.events.push_back(GroupEvent::Suspected(p));
                }
            }
        }
    }

    fn send_heartbeats(&mut self, ctx: &mut Ctx<'_>) {
        let now = ctx.now();
        let Some(view) = self.view.clone() else {
            return;
        };
        let (clock, last_seq, delivered) = match &self.delivery {
            Some(d) => (d.lamport(), d.last_seq(), d.delivered_vector()),
            None => (0, 0, Vec::new()),
        };
        let member_hb = self.control(
            ctx,
            &Control::Heartbeat {
                view_id: Some(view.id),
                rekey: self.rekey_requested,
                clock,
                last_seq,
                delivered: delivered.clone(),
                cert: None,
            },
        );
        for m in view.members() {
            if *m != self.me {
                self.send(ctx, m.addr, &member_hb);
            }
        }
        // Probes carry our certificate so strangers can verify us.
        let mut probe_targets: BTreeSet<EndpointAddr> = self
            .peers
            .iter()
            .filter(|(p, info)| {
                !view.contains(p)
                    && self.admission.admits(p)
                    && now.saturating_sub(info.last_heard) <= self.cfg.probe_forget
            })
            .map(|(p, _)| p.addr)
            .collect();
        let member_addrs: BTreeSet<EndpointAddr> = view.members().iter().map(|m| m.addr).collect();
        probe_targets.extend(
            self.contacts
                .iter()
                .filter(|a| !member_addrs.contains(a))
                .copied(),
        );
        if probe_targets.is_empty() {
            return;
        }
        let probe = self.control(
            ctx,
            &Control::Heartbeat {
                view_id: Some(view.id),
                rekey: false,
                clock,
                last_seq,
                delivered,
                cert: Some(ctx.identity.cert().clone()),
            },
        );
        for addr in probe_targets {
            self.send(ctx, addr, &probe);
        }
    }
}
