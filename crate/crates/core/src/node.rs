//! One peer: presence in the lobby group, venues, notes and file sharing,
//! driven by a single transport.
//!
//! The node is a passive state machine. Its host feeds it datagrams,
//! stream events and periodic ticks; every change an API client can
//! observe is recorded first as a [`ControlEvent`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;
use std::sync::Arc;

use netsim::{EndpointAddr, SimTime, StreamEvent, StreamId, Transport};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::fileshare::{
    normalize_query, serve, HitEntry, Locator, Progress, Query, QueryHit, ServeStats, ShareEntry,
    ShareIndex, TransferJob, TransferState, MAX_ACTIVE_JOBS,
};
use crate::group::{frame_group, Admission, Ctx, GroupConfig, GroupEngine, GroupError};
use crate::identity::{
    authorize, collect_attributes, AttributeAssertion, AuthzDecision, CertBook, Fingerprint,
    Identity, PolicyDocument, PolicySet, TrustStore,
};
use crate::membership::{GroupId, ProcessId};
use crate::ordcast::Mode;
use crate::p2p::{Purpose, SessionEvent, Sessions};
use crate::presence::{
    validate_chat_body, Availability, ChatMessage, ChatPosition, Note, NoteEnvelope, NoteStore,
    PresenceBeacon, Roster, UserProfile, Venue, VenueSummary, Visibility, BEACON_INTERVAL,
    DEFAULT_RELAY_CAP, MAX_NAME, MAX_NOTE_BODY,
};
use crate::secure::{AppMessage, SecureEvent, SecureGroup};
use crate::sgl::{GroupAlgebra, ModPGroup};

const NOTE_RETRY: SimTime = 5_000;
const P2P_RETRY: SimTime = 1_000;
const P2P_ATTEMPTS: u32 = 3;
const EVENT_CAPACITY: usize = 10_000;

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub display_name: String,
    pub location: String,
    pub lobby_group: String,
    pub bootstrap: Vec<EndpointAddr>,
    pub relay_notes: bool,
    pub hits_via_group: bool,
    /// Notes, share manifest and downloads live here; `None` keeps
    /// everything in memory.
    pub data_dir: Option<PathBuf>,
    pub beacon_interval: SimTime,
    pub relay_cap: usize,
    pub max_jobs: usize,
    pub group: GroupConfig,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            display_name: String::new(),
            location: String::new(),
            lobby_group: "lobby".into(),
            bootstrap: Vec::new(),
            relay_notes: true,
            hits_via_group: false,
            data_dir: None,
            beacon_interval: BEACON_INTERVAL,
            relay_cap: DEFAULT_RELAY_CAP,
            max_jobs: MAX_ACTIVE_JOBS,
            group: GroupConfig::default(),
        }
    }
}

/// Policies and attribute assertions this peer enforces.
#[derive(Debug, Clone, Default)]
pub struct Authz {
    pub policies: PolicySet,
    pub assertions: Vec<AttributeAssertion>,
}

impl Authz {
    /// Self-signed policies letting anyone create venues, leave notes and
    /// fetch any shared file.
    pub fn permissive(identity: &Identity) -> Self {
        let mut policies = PolicySet::new();
        for pattern in ["venue:create", "note:leave", "file:*"] {
            policies.push_verified(
                PolicyDocument::signed(pattern, &["*"], &[], identity),
                &identity.verifying_key(),
            );
        }
        Self {
            policies,
            assertions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Roster,
    Venue,
    Message,
    Note,
    Hit,
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub payload: serde_json::Value,
}

/// Bounded log of control events with strictly increasing sequence numbers.
#[derive(Debug)]
pub struct EventLog {
    events: VecDeque<ControlEvent>,
    next_seq: u64,
    capacity: usize,
}

impl EventLog {
    pub fn new(capacity: usize) -> Self {
        Self {
            events: VecDeque::new(),
            next_seq: 1,
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, kind: EventKind, payload: &impl Serialize) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        let payload = serde_json::to_value(payload).expect("event payload serializes");
        if self.events.len() == self.capacity {
            self.events.pop_front();
        }
        self.events.push_back(ControlEvent { seq, kind, payload });
        seq
    }

    /// Events with `seq > since`, oldest first.
    pub fn since(&self, since: u64) -> Vec<ControlEvent> {
        let start = self.events.partition_point(|e| e.seq <= since);
        self.events.range(start..).cloned().collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("denied: {0}")]
    Denied(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl NodeError {
    /// HTTP status the control API answers with.
    pub fn status(&self) -> u16 {
        match self {
            NodeError::Invalid(_) => 400,
            NodeError::Denied(_) => 403,
            NodeError::NotFound(_) => 404,
            NodeError::Conflict(_) => 409,
            NodeError::Io(_) => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VenueView {
    pub venue_id: String,
    pub name: String,
    pub visibility: Visibility,
    pub creator: Fingerprint,
    pub created: u64,
    pub invited: Vec<Fingerprint>,
    pub joined: bool,
    pub members: Vec<Fingerprint>,
    pub invited_by: Option<Fingerprint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NoteView {
    #[serde(flatten)]
    pub note: Note,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PostedMessage {
    pub venue_id: String,
    pub author: Fingerprint,
    pub body: String,
    pub queued: bool,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct NodeStats {
    pub beacons_sent: u64,
    pub queries_multicast: u64,
    pub queries_answered: u64,
    pub hits_sent_p2p: u64,
    pub hits_sent_group: u64,
    pub hits_received: u64,
    pub notes_relayed: u64,
    pub note_deliveries_sent: u64,
    pub notes_received: u64,
    pub note_duplicates: u64,
    pub lobby_rejected: u64,
    pub unroutable_frames: u64,
    pub p2p_dropped: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LobbyMsg {
    Beacon(PresenceBeacon),
    Query(Query),
    Hit(QueryHit),
    NoteRelay(NoteEnvelope),
    NoteReceipt {
        note_id: String,
        recipient: Fingerprint,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum VenueMsg {
    Chat { body: String },
    Update(Venue),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invitation {
    pub venue: Venue,
    pub contact: EndpointAddr,
}

mod tag {
    pub const INVITATION: u8 = 1;
    pub const NOTE_DELIVER: u8 = 2;
    pub const NOTE_ACK: u8 = 3;
    pub const QUERY_HIT: u8 = 4;
    pub const HTTP_REQUEST: u8 = 5;
    pub const HTTP_RESPONSE: u8 = 6;
}

fn p2p_msg(tag: u8, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 1);
    out.push(tag);
    out.extend_from_slice(body);
    out
}

fn p2p_json(tag: u8, value: &impl Serialize) -> Vec<u8> {
    p2p_msg(tag, &serde_json::to_vec(value).expect("message serializes"))
}

#[derive(Debug, Serialize, Deserialize)]
struct NoteAck {
    note_id: String,
}

/// Identity and trust state, split out so groups can borrow it alongside
/// themselves.
struct Sec {
    identity: Identity,
    trust: TrustStore,
    certs: CertBook,
}

impl Sec {
    fn ctx<'a>(&'a mut self, io: &'a mut dyn Transport) -> Ctx<'a> {
        Ctx {
            io,
            identity: &self.identity,
            trust: &mut self.trust,
            certs: &mut self.certs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VenueSource {
    Own,
    Invited {
        by: Fingerprint,
        contact: EndpointAddr,
    },
    Advertised,
}

struct VenueState {
    venue: Venue,
    group: Option<SecureGroup>,
    source: VenueSource,
    members: Vec<Fingerprint>,
    transcript: Vec<ChatMessage>,
}

struct QueryState {
    hits: Vec<QueryHit>,
}

struct Outgoing {
    peer: ProcessId,
    msg: Vec<u8>,
    attempts: u32,
    not_before: SimTime,
}

pub struct Node {
    cfg: NodeConfig,
    sec: Sec,
    authz: Authz,
    me: ProcessId,
    rng: ChaCha20Rng,
    algebra: Arc<dyn GroupAlgebra>,
    lobby: SecureGroup,
    venues: BTreeMap<String, VenueState>,
    venue_groups: BTreeMap<GroupId, String>,
    sessions: Sessions,
    general_targets: BTreeMap<StreamId, ProcessId>,
    outbox: Vec<Outgoing>,
    roster: Roster,
    availability: Availability,
    notes: NoteStore,
    note_attempts: BTreeMap<String, SimTime>,
    pending_invites: Vec<(Fingerprint, Invitation)>,
    shares: ShareIndex,
    queries: BTreeMap<String, QueryState>,
    seen_queries: BTreeSet<(Fingerprint, String)>,
    locators: BTreeMap<(Fingerprint, String), (Locator, HitEntry)>,
    jobs: BTreeMap<u64, TransferJob>,
    job_sessions: BTreeMap<StreamId, u64>,
    next_job: u64,
    serve_stats: ServeStats,
    stats: NodeStats,
    events: EventLog,
    last_beacon: Option<SimTime>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("me", &self.me)
            .finish_non_exhaustive()
    }
}

impl Node {
    pub fn new(
        identity: Identity,
        trust: TrustStore,
        authz: Authz,
        cfg: NodeConfig,
        addr: EndpointAddr,
        seed: u64,
    ) -> Result<Self, NodeError> {
        Self::with_algebra(
            identity,
            trust,
            authz,
            cfg,
            addr,
            seed,
            Arc::new(ModPGroup::modp2048()),
        )
    }

    pub fn with_algebra(
        identity: Identity,
        trust: TrustStore,
        authz: Authz,
        cfg: NodeConfig,
        addr: EndpointAddr,
        seed: u64,
        algebra: Arc<dyn GroupAlgebra>,
    ) -> Result<Self, NodeError> {
        let lobby_id = GroupId::new(cfg.lobby_group.clone())
            .map_err(|_| NodeError::Invalid("lobby group name is empty or too long".into()))?;
        let me = ProcessId::new(identity.fingerprint(), addr);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut engine = GroupEngine::new(cfg.group.clone(), lobby_id, me);
        engine.set_admission(Admission::Open);
        let lobby = SecureGroup::new(engine, algebra.clone(), rng.next_u64());
        let sessions = Sessions::new(me, rng.next_u64());
        let (notes, shares) = match &cfg.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                (
                    NoteStore::open(&dir.join("notes.jsonl"), cfg.relay_cap)?,
                    ShareIndex::open(&dir.join("shares.jsonl"))?,
                )
            }
            None => (NoteStore::in_memory(cfg.relay_cap), ShareIndex::in_memory()),
        };
        let mut certs = CertBook::default();
        certs.insert_trusted(identity.cert().clone());
        Ok(Self {
            roster: Roster::new(cfg.beacon_interval),
            cfg,
            sec: Sec {
                identity,
                trust,
                certs,
            },
            authz,
            me,
            rng,
            algebra,
            lobby,
            venues: BTreeMap::new(),
            venue_groups: BTreeMap::new(),
            sessions,
            general_targets: BTreeMap::new(),
            outbox: Vec::new(),
            availability: Availability::Available,
            notes,
            note_attempts: BTreeMap::new(),
            pending_invites: Vec::new(),
            shares,
            queries: BTreeMap::new(),
            seen_queries: BTreeSet::new(),
            locators: BTreeMap::new(),
            jobs: BTreeMap::new(),
            job_sessions: BTreeMap::new(),
            next_job: 1,
            serve_stats: ServeStats::default(),
            stats: NodeStats::default(),
            events: EventLog::new(EVENT_CAPACITY),
            last_beacon: None,
        })
    }

    pub fn me(&self) -> ProcessId {
        self.me
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.me.fingerprint
    }

    pub fn identity(&self) -> &Identity {
        &self.sec.identity
    }

    /// Pinned keys and roots, for persisting across restarts.
    pub fn trust(&self) -> &TrustStore {
        &self.sec.trust
    }

    pub fn lobby(&self) -> &SecureGroup {
        &self.lobby
    }

    pub fn venue_group(&self, venue_id: &str) -> Option<&SecureGroup> {
        self.venues.get(venue_id).and_then(|v| v.group.as_ref())
    }

    pub fn stats(&self) -> NodeStats {
        self.stats
    }

    pub fn set_authz(&mut self, authz: Authz) {
        self.authz = authz;
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn serve_stats(&self) -> &ServeStats {
        &self.serve_stats
    }

    pub fn session_stats(&self) -> crate::p2p::SessionStats {
        self.sessions.stats
    }

    pub fn roster_rejected(&self) -> u64 {
        self.roster.rejected
    }

    pub fn notes_evicted(&self) -> u64 {
        self.notes.evicted
    }

    /// The stream carrying a transfer job's current attempt.
    pub fn transfer_session(&self, job_id: u64) -> Option<StreamId> {
        self.job_sessions
            .iter()
            .find(|(_, j)| **j == job_id)
            .map(|(s, _)| *s)
    }

    fn download_dir(&self) -> Option<PathBuf> {
        self.cfg.data_dir.as_ref().map(|d| d.join("downloads"))
    }

    fn stakeholder_key(&self, subject: &str) -> Option<ed25519_dalek::VerifyingKey> {
        if subject == self.sec.identity.subject() {
            return Some(self.sec.identity.verifying_key());
        }
        self.sec
            .certs
            .by_subject(subject)
            .or_else(|| self.sec.trust.roots().iter().find(|c| c.subject == subject))
            .and_then(|c| c.verifying_key().ok())
    }

    /// Authorization decision for `subject` on `resource`.
    pub fn authorize(&self, resource: &str, subject: &str) -> AuthzDecision {
        let attrs =
            collect_attributes(subject, &self.authz.assertions, |s| self.stakeholder_key(s));
        authorize(resource, subject, &attrs, &self.authz.policies)
    }

    fn subject_of(&self, fp: &Fingerprint) -> Option<String> {
        self.sec.certs.get(fp).map(|c| c.subject.clone())
    }

    // ----- driving -------------------------------------------------------

    /// Joins the lobby through the bootstrap contacts, or alone.
    pub fn start(&mut self, io: &mut dyn Transport) {
        for c in &self.cfg.bootstrap {
            self.lobby.engine_mut().add_contact(*c);
        }
        let contact = self.cfg.bootstrap.first().copied();
        let mut ctx = self.sec.ctx(io);
        if let Err(e) = self.lobby.join(&mut ctx, contact) {
            tracing::warn!(error = %e, "lobby join refused");
        }
        self.pump(io);
    }

    pub fn handle_datagram(&mut self, io: &mut dyn Transport, src: EndpointAddr, bytes: &[u8]) {
        let Ok(gid) = frame_group(bytes) else {
            self.stats.unroutable_frames += 1;
            return;
        };
        if gid == *self.lobby.engine().group() {
            let mut ctx = self.sec.ctx(io);
            self.lobby.handle_frame(&mut ctx, src, bytes);
        } else if let Some(vid) = self.venue_groups.get(&gid).cloned() {
            if let Some(g) = self.venues.get_mut(&vid).and_then(|v| v.group.as_mut()) {
                let mut ctx = self.sec.ctx(io);
                g.handle_frame(&mut ctx, src, bytes);
            }
        } else {
            self.stats.unroutable_frames += 1;
        }
        self.pump(io);
    }

    pub fn handle_stream(&mut self, io: &mut dyn Transport, ev: StreamEvent) {
        let evs = {
            let mut ctx = self.sec.ctx(io);
            self.sessions.handle(&mut ctx, ev)
        };
        for e in evs {
            self.on_session(io, e);
        }
        self.pump(io);
    }

    pub fn tick(&mut self, io: &mut dyn Transport) {
        let now = io.now();
        {
            let mut ctx = self.sec.ctx(io);
            self.lobby.tick(&mut ctx);
            for v in self.venues.values_mut() {
                if let Some(g) = v.group.as_mut() {
                    g.tick(&mut ctx);
                }
            }
        }
        let evs = {
            let mut ctx = self.sec.ctx(io);
            self.sessions.tick(&mut ctx)
        };
        for e in evs {
            self.on_session(io, e);
        }
        if self
            .last_beacon
            .is_none_or(|t| now.saturating_sub(t) >= self.cfg.beacon_interval)
        {
            self.send_beacon(io);
        }
        for fp in self.roster.expire(now) {
            let view = self.roster.get(&fp).expect("just expired").view();
            self.events.push(EventKind::Roster, &view);
        }
        self.retry_notes(io, None);
        self.retry_outbox(io);
        self.schedule_jobs(io);
        self.pump(io);
    }

    /// Processes group events until none remain.
    fn pump(&mut self, io: &mut dyn Transport) {
        for _ in 0..64 {
            let mut busy = false;
            let lobby_events = self.lobby.drain_events();
            busy |= !lobby_events.is_empty();
            for e in lobby_events {
                self.on_lobby(io, e);
            }
            let ids: Vec<String> = self.venues.keys().cloned().collect();
            for vid in ids {
                let evs = match self.venues.get_mut(&vid).and_then(|v| v.group.as_mut()) {
                    Some(g) => g.drain_events(),
                    None => continue,
                };
                busy |= !evs.is_empty();
                for e in evs {
                    self.on_venue(io, &vid, e);
                }
            }
            if !busy {
                break;
            }
        }
    }

    // ----- lobby ---------------------------------------------------------

    fn profile(&self) -> UserProfile {
        let venues = self
            .venues
            .values()
            .filter(|v| v.group.is_some() && v.venue.visibility == Visibility::Public)
            .map(|v| v.venue.summary())
            .collect();
        UserProfile {
            fingerprint: self.fingerprint(),
            display_name: self.cfg.display_name.clone(),
            location: self.cfg.location.clone(),
            availability: self.availability,
            venues,
        }
    }

    fn lobby_send(&mut self, io: &mut dyn Transport, msg: &LobbyMsg) -> Result<(), GroupError> {
        let bytes = serde_json::to_vec(msg).expect("lobby message serializes");
        let mut ctx = self.sec.ctx(io);
        self.lobby
            .send(&mut ctx, bytes, Mode::ReliableFifo)
            .map(|_| ())
    }

    fn send_beacon(&mut self, io: &mut dyn Transport) {
        if !self.lobby.is_keyed() {
            return;
        }
        self.last_beacon = Some(io.now());
        let beacon = PresenceBeacon::signed(self.profile(), &self.sec.identity);
        if self.lobby_send(io, &LobbyMsg::Beacon(beacon)).is_ok() {
            self.stats.beacons_sent += 1;
        }
    }

    /// Changes the availability advertised in beacons.
    pub fn set_presence(
        &mut self,
        io: &mut dyn Transport,
        availability: Availability,
        location: Option<String>,
    ) -> Result<(), NodeError> {
        if availability == Availability::Offline {
            return Err(NodeError::Invalid(
                "OFFLINE is reserved for expired beacons".into(),
            ));
        }
        self.availability = availability;
        if let Some(l) = location {
            self.cfg.location = l;
        }
        self.send_beacon(io);
        self.pump(io);
        Ok(())
    }

    fn on_lobby(&mut self, io: &mut dyn Transport, e: SecureEvent) {
        match e {
            SecureEvent::KeyReady { .. } => self.send_beacon(io),
            SecureEvent::Message(m) => match serde_json::from_slice::<LobbyMsg>(&m.plaintext) {
                Ok(msg) => self.on_lobby_msg(io, &m, msg),
                Err(_) => self.stats.lobby_rejected += 1,
            },
            SecureEvent::JoinFailed => tracing::info!("lobby bootstrap failed, running alone"),
            SecureEvent::KeyAgreementFailed { epoch, reason, .. } => {
                tracing::warn!(epoch, %reason, "lobby key agreement failed")
            }
            SecureEvent::ViewInstalled(_) | SecureEvent::Left => {}
        }
    }

    fn on_lobby_msg(&mut self, io: &mut dyn Transport, m: &AppMessage, msg: LobbyMsg) {
        let now = io.now();
        match msg {
            LobbyMsg::Beacon(b) => {
                let was_online = self.roster.is_online(&m.sender.fingerprint);
                let cert = self.sec.certs.get(&m.sender.fingerprint).cloned();
                match self.roster.update(&b, &m.sender, cert.as_ref(), now) {
                    Ok(changed) => {
                        if changed {
                            self.events.push(EventKind::Roster, &b.profile);
                        }
                        for s in &b.profile.venues {
                            self.learn_advertised(s);
                        }
                        if !was_online && m.sender != self.me {
                            self.on_peer_online(io, m.sender.fingerprint);
                        }
                    }
                    Err(e) => tracing::debug!(sender = %m.sender, error = %e, "beacon rejected"),
                }
            }
            LobbyMsg::Query(q) => self.on_query(io, m.sender, q),
            LobbyMsg::Hit(h) => {
                if h.responder == m.sender.fingerprint {
                    self.record_hit(h);
                }
            }
            LobbyMsg::NoteRelay(env) => {
                let author = env.author();
                if self.cfg.relay_notes
                    && author == m.sender.fingerprint
                    && author != self.fingerprint()
                    && env.recipient != self.fingerprint()
                    && env.verify()
                {
                    match self.notes.add_relay(env.clone()) {
                        Ok(true) => {
                            self.stats.notes_relayed += 1;
                            if self.roster.is_online(&env.recipient) {
                                self.retry_notes(io, Some(env.recipient));
                            }
                        }
                        Ok(false) => {}
                        Err(e) => tracing::warn!(error = %e, "cannot store relayed note"),
                    }
                }
            }
            LobbyMsg::NoteReceipt { note_id, recipient } => {
                if recipient == m.sender.fingerprint
                    && self
                        .notes
                        .held_note(&note_id)
                        .is_some_and(|h| h.envelope.recipient == recipient)
                {
                    self.note_delivered(&note_id);
                }
            }
        }
    }

    fn learn_advertised(&mut self, s: &VenueSummary) {
        if s.visibility != Visibility::Public {
            return;
        }
        match self.venues.get_mut(&s.venue_id) {
            Some(v) => {
                if v.venue.visibility != Visibility::Public && v.venue.name == s.name {
                    v.venue.visibility = Visibility::Public;
                    let admission = v.venue.admission();
                    if let Some(g) = v.group.as_mut() {
                        g.engine_mut().set_admission(admission);
                    }
                    let view = self.venue_view(&s.venue_id).expect("known");
                    self.events.push(EventKind::Venue, &view);
                }
            }
            None => {
                // The creator and creation time are unknown until we join;
                // the descriptor arrives with the first venue update.
                let venue = Venue {
                    venue_id: s.venue_id.clone(),
                    name: s.name.clone(),
                    visibility: Visibility::Public,
                    creator: Fingerprint::default(),
                    created: 0,
                    invited: BTreeSet::new(),
                };
                self.insert_venue(venue, VenueSource::Advertised);
            }
        }
    }

    fn insert_venue(&mut self, venue: Venue, source: VenueSource) {
        let vid = venue.venue_id.clone();
        self.venue_groups.insert(venue.group_id(), vid.clone());
        self.venues.insert(
            vid.clone(),
            VenueState {
                venue,
                group: None,
                source,
                members: Vec::new(),
                transcript: Vec::new(),
            },
        );
        let view = self.venue_view(&vid).expect("just inserted");
        self.events.push(EventKind::Venue, &view);
    }

    fn on_peer_online(&mut self, io: &mut dyn Transport, fp: Fingerprint) {
        self.retry_notes(io, Some(fp));
        let (due, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending_invites)
            .into_iter()
            .partition(|(f, _)| *f == fp);
        self.pending_invites = rest;
        for (fp, inv) in due {
            self.send_invitation(io, fp, inv);
        }
    }

    // ----- venues --------------------------------------------------------

    fn venue_view(&self, venue_id: &str) -> Option<VenueView> {
        let v = self.venues.get(venue_id)?;
        Some(VenueView {
            venue_id: v.venue.venue_id.clone(),
            name: v.venue.name.clone(),
            visibility: v.venue.visibility,
            creator: v.venue.creator,
            created: v.venue.created,
            invited: v.venue.invited.iter().copied().collect(),
            joined: v.group.is_some(),
            members: v.members.clone(),
            invited_by: match v.source {
                VenueSource::Invited { by, .. } => Some(by),
                _ => None,
            },
        })
    }

    pub fn venues(&self) -> Vec<VenueView> {
        self.venues
            .keys()
            .filter_map(|id| self.venue_view(id))
            .collect()
    }

    pub fn venue(&self, venue_id: &str) -> Result<VenueView, NodeError> {
        self.venue_view(venue_id)
            .ok_or_else(|| NodeError::NotFound(format!("unknown venue {venue_id}")))
    }

    fn new_venue_group(&mut self, venue: &Venue) -> SecureGroup {
        let mut engine = GroupEngine::new(self.cfg.group.clone(), venue.group_id(), self.me);
        engine.set_admission(venue.admission());
        SecureGroup::new(engine, self.algebra.clone(), self.rng.next_u64())
    }

    pub fn create_venue(
        &mut self,
        io: &mut dyn Transport,
        name: &str,
        visibility: Visibility,
    ) -> Result<VenueView, NodeError> {
        let name = name.trim();
        if name.is_empty() || name.len() > MAX_NAME {
            return Err(NodeError::Invalid(
                "venue name must be 1 to 100 bytes".into(),
            ));
        }
        let d = self.authorize("venue:create", self.sec.identity.subject());
        if !d.allow {
            return Err(NodeError::Denied(d.reason));
        }
        let venue = Venue::new(name, visibility, self.fingerprint(), io.now());
        if self.venues.contains_key(&venue.venue_id) {
            return Err(NodeError::Conflict("venue already exists".into()));
        }
        let vid = venue.venue_id.clone();
        let mut group = self.new_venue_group(&venue);
        {
            let mut ctx = self.sec.ctx(io);
            group
                .join(&mut ctx, None)
                .map_err(|e| NodeError::Conflict(e.to_string()))?;
        }
        self.venue_groups.insert(venue.group_id(), vid.clone());
        self.venues.insert(
            vid.clone(),
            VenueState {
                venue,
                group: Some(group),
                source: VenueSource::Own,
                members: Vec::new(),
                transcript: Vec::new(),
            },
        );
        let view = self.venue_view(&vid).expect("just created");
        self.events.push(EventKind::Venue, &view);
        self.pump(io);
        if visibility == Visibility::Public {
            self.send_beacon(io);
            self.pump(io);
        }
        Ok(self.venue_view(&vid).expect("just created"))
    }

    /// Joins a venue we were invited to or saw advertised.
    pub fn join_venue(
        &mut self,
        io: &mut dyn Transport,
        venue_id: &str,
    ) -> Result<VenueView, NodeError> {
        let v = self
            .venues
            .get(venue_id)
            .ok_or_else(|| NodeError::NotFound(format!("unknown venue {venue_id}")))?;
        if v.group.is_some() {
            return Ok(self.venue_view(venue_id).expect("known"));
        }
        let contact = match v.source {
            VenueSource::Invited { contact, .. } => Some(contact),
            _ => self
                .roster
                .entries()
                .filter(|e| !e.expired && e.profile.fingerprint != self.fingerprint())
                .find(|e| e.profile.venues.iter().any(|s| s.venue_id == venue_id))
                .map(|e| e.addr),
        };
        let Some(contact) = contact else {
            return Err(NodeError::Conflict(
                "no reachable member of this venue".into(),
            ));
        };
        if v.venue.visibility == Visibility::Private && !v.venue.admits(&self.fingerprint()) {
            return Err(NodeError::Conflict(
                "not invited to this private venue".into(),
            ));
        }
        let venue = v.venue.clone();
        let mut group = self.new_venue_group(&venue);
        {
            let mut ctx = self.sec.ctx(io);
            group
                .join(&mut ctx, Some(contact))
                .map_err(|e| NodeError::Conflict(e.to_string()))?;
        }
        self.venues.get_mut(venue_id).expect("known").group = Some(group);
        let view = self.venue_view(venue_id).expect("known");
        self.events.push(EventKind::Venue, &view);
        self.pump(io);
        Ok(self.venue_view(venue_id).expect("known"))
    }

    fn joined_venue(&mut self, venue_id: &str) -> Result<&mut VenueState, NodeError> {
        let v = self
            .venues
            .get_mut(venue_id)
            .ok_or_else(|| NodeError::NotFound(format!("unknown venue {venue_id}")))?;
        if v.group.as_ref().is_none_or(|g| g.view().is_none()) {
            return Err(NodeError::Conflict("not a member of this venue".into()));
        }
        Ok(v)
    }

    fn venue_send(
        &mut self,
        io: &mut dyn Transport,
        venue_id: &str,
        msg: &VenueMsg,
        mode: Mode,
    ) -> Result<bool, NodeError> {
        let bytes = serde_json::to_vec(msg).expect("venue message serializes");
        let v = self.venues.get_mut(venue_id).expect("checked by caller");
        let g = v.group.as_mut().expect("checked by caller");
        let mut ctx = Ctx {
            io,
            identity: &self.sec.identity,
            trust: &mut self.sec.trust,
            certs: &mut self.sec.certs,
        };
        match g.send(&mut ctx, bytes, mode) {
            Ok(crate::group::SendOutcome::Queued) => Ok(true),
            Ok(_) => Ok(false),
            Err(e) => Err(NodeError::Conflict(e.to_string())),
        }
    }

    fn publish_venue_update(
        &mut self,
        io: &mut dyn Transport,
        venue_id: &str,
    ) -> Result<(), NodeError> {
        let v = self.venues.get_mut(venue_id).expect("checked by caller");
        let admission = v.venue.admission();
        v.group
            .as_mut()
            .expect("member")
            .engine_mut()
            .set_admission(admission);
        let venue = v.venue.clone();
        self.venue_send(io, venue_id, &VenueMsg::Update(venue), Mode::ReliableFifo)?;
        let view = self.venue_view(venue_id).expect("known");
        self.events.push(EventKind::Venue, &view);
        Ok(())
    }

    pub fn invite(
        &mut self,
        io: &mut dyn Transport,
        venue_id: &str,
        invitee: Fingerprint,
    ) -> Result<VenueView, NodeError> {
        let v = self.joined_venue(venue_id)?;
        if v.venue.creator == invitee || !v.venue.invited.insert(invitee) {
            return Ok(self.venue_view(venue_id).expect("known"));
        }
        let inv = Invitation {
            venue: v.venue.clone(),
            contact: self.me.addr,
        };
        self.publish_venue_update(io, venue_id)?;
        if self.roster.is_online(&invitee) {
            self.send_invitation(io, invitee, inv);
        } else {
            self.pending_invites.push((invitee, inv));
        }
        self.pump(io);
        Ok(self.venue_view(venue_id).expect("known"))
    }

    fn send_invitation(
        &mut self,
        io: &mut dyn Transport,
        invitee: Fingerprint,
        mut inv: Invitation,
    ) {
        let Some(entry) = self.roster.get(&invitee) else {
            self.pending_invites.push((invitee, inv));
            return;
        };
        let peer = ProcessId::new(invitee, entry.addr);
        if let Some(v) = self.venues.get(&inv.venue.venue_id) {
            inv.venue = v.venue.clone();
        }
        self.send_p2p(io, peer, p2p_json(tag::INVITATION, &inv));
    }

    /// Opens the venue to everyone. Irreversible.
    pub fn make_public(
        &mut self,
        io: &mut dyn Transport,
        venue_id: &str,
    ) -> Result<VenueView, NodeError> {
        let v = self.joined_venue(venue_id)?;
        if v.venue.visibility == Visibility::Public {
            return Ok(self.venue_view(venue_id).expect("known"));
        }
        v.venue.visibility = Visibility::Public;
        self.publish_venue_update(io, venue_id)?;
        self.send_beacon(io);
        self.pump(io);
        Ok(self.venue_view(venue_id).expect("known"))
    }

    pub fn post_message(
        &mut self,
        io: &mut dyn Transport,
        venue_id: &str,
        body: &str,
    ) -> Result<PostedMessage, NodeError> {
        validate_chat_body(body).map_err(|e| NodeError::Invalid(e.into()))?;
        self.joined_venue(venue_id)?;
        let queued = self.venue_send(
            io,
            venue_id,
            &VenueMsg::Chat {
                body: body.to_string(),
            },
            Mode::Agreed,
        )?;
        self.pump(io);
        Ok(PostedMessage {
            venue_id: venue_id.to_string(),
            author: self.fingerprint(),
            body: body.to_string(),
            queued,
        })
    }

    pub fn messages(&self, venue_id: &str) -> Result<Vec<ChatMessage>, NodeError> {
        self.venues
            .get(venue_id)
            .map(|v| v.transcript.clone())
            .ok_or_else(|| NodeError::NotFound(format!("unknown venue {venue_id}")))
    }

    fn on_venue(&mut self, io: &mut dyn Transport, venue_id: &str, e: SecureEvent) {
        match e {
            SecureEvent::ViewInstalled(view) => {
                let coordinator = view.members().first().copied();
                let v = self.venues.get_mut(venue_id).expect("known");
                v.members = view.members().iter().map(|p| p.fingerprint).collect();
                let view_out = self.venue_view(venue_id).expect("known");
                self.events.push(EventKind::Venue, &view_out);
                if coordinator == Some(self.me) && view.len() > 1 {
                    let venue = self.venues[venue_id].venue.clone();
                    let _ =
                        self.venue_send(io, venue_id, &VenueMsg::Update(venue), Mode::ReliableFifo);
                }
            }
            SecureEvent::Message(m) => match serde_json::from_slice::<VenueMsg>(&m.plaintext) {
                Ok(VenueMsg::Chat { body })
                    if m.mode == Mode::Agreed && validate_chat_body(&body).is_ok() =>
                {
                    let msg = ChatMessage {
                        venue_id: venue_id.to_string(),
                        author: m.sender.fingerprint,
                        body,
                        position: ChatPosition::new(m.position, m.sender.fingerprint),
                    };
                    self.events.push(EventKind::Message, &msg);
                    self.venues
                        .get_mut(venue_id)
                        .expect("known")
                        .transcript
                        .push(msg);
                }
                Ok(VenueMsg::Update(update))
                    if update.is_well_formed() && update.venue_id == venue_id =>
                {
                    let v = self.venues.get_mut(venue_id).expect("known");
                    let adopted = v.venue.created == 0 && v.venue.creator == Fingerprint::default();
                    let mut changed = false;
                    if adopted {
                        let visibility = v.venue.visibility;
                        v.venue = update.clone();
                        if visibility == Visibility::Public {
                            v.venue.visibility = Visibility::Public;
                        }
                        changed = true;
                    }
                    changed |= v.venue.merge(&update);
                    if changed {
                        let admission = v.venue.admission();
                        if let Some(g) = v.group.as_mut() {
                            g.engine_mut().set_admission(admission);
                        }
                        let view = self.venue_view(venue_id).expect("known");
                        self.events.push(EventKind::Venue, &view);
                        if self.venues[venue_id].venue.visibility == Visibility::Public {
                            self.send_beacon(io);
                        }
                    }
                }
                _ => tracing::debug!(venue = %venue_id, "ignoring malformed venue message"),
            },
            SecureEvent::Left => {
                let v = self.venues.get_mut(venue_id).expect("known");
                v.group = None;
                v.members.clear();
                let view = self.venue_view(venue_id).expect("known");
                self.events.push(EventKind::Venue, &view);
            }
            SecureEvent::JoinFailed => {
                tracing::info!(venue = %venue_id, "venue contact unreachable")
            }
            SecureEvent::KeyAgreementFailed { epoch, reason, .. } => {
                tracing::warn!(venue = %venue_id, epoch, %reason, "venue key agreement failed")
            }
            SecureEvent::KeyReady { .. } => {}
        }
    }

    fn on_invitation(&mut self, from: Fingerprint, inv: Invitation) {
        let venue = inv.venue;
        let me = self.fingerprint();
        if !venue.is_well_formed()
            || !venue.admits(&me)
            || !(from == venue.creator || venue.invited.contains(&from))
        {
            tracing::debug!(%from, "ignoring invitation");
            return;
        }
        let vid = venue.venue_id.clone();
        match self.venues.get_mut(&vid) {
            Some(v) => {
                let adopted = v.venue.created == 0 && v.venue.creator == Fingerprint::default();
                if adopted {
                    v.venue = venue;
                } else {
                    v.venue.merge(&venue);
                }
                if v.group.is_none() {
                    v.source = VenueSource::Invited {
                        by: from,
                        contact: inv.contact,
                    };
                }
                let view = self.venue_view(&vid).expect("known");
                self.events.push(EventKind::Venue, &view);
            }
            None => self.insert_venue(
                venue,
                VenueSource::Invited {
                    by: from,
                    contact: inv.contact,
                },
            ),
        }
    }

    // ----- point-to-point ------------------------------------------------

    fn send_p2p(&mut self, io: &mut dyn Transport, peer: ProcessId, msg: Vec<u8>) {
        self.send_p2p_attempt(io, peer, msg, 1);
    }

    fn send_p2p_attempt(
        &mut self,
        io: &mut dyn Transport,
        peer: ProcessId,
        msg: Vec<u8>,
        attempts: u32,
    ) {
        let mut ctx = self.sec.ctx(io);
        let id = match self.sessions.general_with(&peer.fingerprint) {
            Some(id) => id,
            None => match self.sessions.open(&mut ctx, peer, Purpose::General) {
                Ok(id) => {
                    self.general_targets.insert(id, peer);
                    id
                }
                Err(_) => {
                    let now = ctx.now();
                    self.requeue(peer, msg, attempts, now);
                    return;
                }
            },
        };
        if self.sessions.send(&mut ctx, id, msg.clone()).is_err() {
            let now = ctx.now();
            self.requeue(peer, msg, attempts, now);
        }
    }

    fn requeue(&mut self, peer: ProcessId, msg: Vec<u8>, attempts: u32, now: SimTime) {
        if attempts >= P2P_ATTEMPTS {
            self.stats.p2p_dropped += 1;
            return;
        }
        self.outbox.push(Outgoing {
            peer,
            msg,
            attempts: attempts + 1,
            not_before: now + P2P_RETRY,
        });
    }

    fn retry_outbox(&mut self, io: &mut dyn Transport) {
        let now = io.now();
        let (due, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.outbox)
            .into_iter()
            .partition(|o| o.not_before <= now);
        self.outbox = rest;
        for o in due {
            self.send_p2p_attempt(io, o.peer, o.msg, o.attempts);
        }
    }

    fn on_session(&mut self, io: &mut dyn Transport, e: SessionEvent) {
        match e {
            SessionEvent::Established { id, purpose, .. } => {
                if let Purpose::Transfer(job_id) = purpose {
                    self.pump_job(io, job_id, id);
                }
            }
            SessionEvent::Message { id, peer, bytes } => self.on_p2p(io, id, peer, bytes),
            SessionEvent::Closed {
                id,
                purpose,
                unsent,
                ..
            } => {
                let target = self.general_targets.remove(&id);
                if let Purpose::Transfer(job_id) = purpose {
                    self.job_sessions.remove(&id);
                    let now = io.now();
                    if let Some(job) = self.jobs.get_mut(&job_id) {
                        if job.is_active() {
                            job.fail(crate::fileshare::FailReason::Connect, now);
                            let snap = job.clone();
                            self.events.push(EventKind::Transfer, &snap);
                        }
                    }
                } else if let Some(peer) = target {
                    let now = io.now();
                    for msg in unsent {
                        self.requeue(peer, msg, 1, now);
                    }
                }
            }
        }
    }

    fn on_p2p(&mut self, io: &mut dyn Transport, id: StreamId, peer: ProcessId, bytes: Vec<u8>) {
        let Some((&t, body)) = bytes.split_first() else {
            return;
        };
        match t {
            tag::INVITATION => {
                if let Ok(inv) = serde_json::from_slice::<Invitation>(body) {
                    self.on_invitation(peer.fingerprint, inv);
                }
            }
            tag::NOTE_DELIVER => {
                if let Ok(env) = serde_json::from_slice::<NoteEnvelope>(body) {
                    self.on_note_delivery(io, id, env);
                }
            }
            tag::NOTE_ACK => {
                if let Ok(ack) = serde_json::from_slice::<NoteAck>(body) {
                    if self
                        .notes
                        .held_note(&ack.note_id)
                        .is_some_and(|h| h.envelope.recipient == peer.fingerprint)
                    {
                        self.note_delivered(&ack.note_id);
                    }
                }
            }
            tag::QUERY_HIT => {
                if let Ok(hit) = serde_json::from_slice::<QueryHit>(body) {
                    if hit.responder == peer.fingerprint {
                        self.record_hit(hit);
                    }
                }
            }
            tag::HTTP_REQUEST => {
                let requester = peer.fingerprint;
                let subject = self.subject_of(&requester);
                let decisions: BTreeMap<String, bool> = self
                    .shares
                    .entries()
                    .map(|e| {
                        let allow = subject
                            .as_deref()
                            .is_some_and(|s| self.authorize(&format!("file:{}", e.name), s).allow);
                        (e.entry_id.clone(), allow)
                    })
                    .collect();
                let resp = serve(
                    &mut self.shares,
                    body,
                    &requester,
                    |e| decisions.get(&e.entry_id).copied().unwrap_or(false),
                    &mut self.serve_stats,
                );
                let mut ctx = self.sec.ctx(io);
                let _ = self
                    .sessions
                    .send(&mut ctx, id, p2p_msg(tag::HTTP_RESPONSE, &resp));
            }
            tag::HTTP_RESPONSE => {
                if let Some(&job_id) = self.job_sessions.get(&id) {
                    self.on_job_response(io, id, job_id, body);
                }
            }
            _ => tracing::debug!(%peer, tag = t, "unknown point-to-point message"),
        }
    }

    // ----- notes ---------------------------------------------------------

    pub fn leave_note(
        &mut self,
        io: &mut dyn Transport,
        recipient: Fingerprint,
        body: &str,
    ) -> Result<NoteView, NodeError> {
        if body.is_empty() || body.len() > MAX_NOTE_BODY {
            return Err(NodeError::Invalid(
                "note body must be 1 to 8192 bytes".into(),
            ));
        }
        let d = self.authorize("note:leave", self.sec.identity.subject());
        if !d.allow {
            return Err(NodeError::Denied(d.reason));
        }
        let now = io.now();
        let recipient_cert = self.sec.certs.get(&recipient).cloned();
        let (note, env) = NoteEnvelope::seal(
            &self.sec.identity,
            recipient,
            recipient_cert.as_ref(),
            now,
            body,
            &mut self.rng,
        );
        if self.notes.held_note(&note.note_id).is_some() {
            return Err(NodeError::Conflict("identical note already left".into()));
        }
        self.notes.add_authored(note.clone(), env.clone())?;
        self.events.push(
            EventKind::Note,
            &NoteView {
                note: note.clone(),
                direction: Direction::Out,
            },
        );
        if recipient == self.fingerprint() {
            let received = env
                .open(&self.sec.identity)
                .map_err(|e| NodeError::Invalid(e.to_string()))?;
            if self.notes.receive(received.clone())? {
                self.stats.notes_received += 1;
                self.events.push(
                    EventKind::Note,
                    &NoteView {
                        note: received,
                        direction: Direction::In,
                    },
                );
            }
            self.note_delivered(&note.note_id);
        } else {
            if self.lobby.view().is_some() {
                let _ = self.lobby_send(io, &LobbyMsg::NoteRelay(env));
            }
            self.retry_notes(io, Some(recipient));
        }
        self.pump(io);
        let current = self
            .notes
            .sent()
            .find(|n| n.note_id == note.note_id)
            .cloned()
            .unwrap_or(note);
        Ok(NoteView {
            note: current,
            direction: Direction::Out,
        })
    }

    pub fn notes(&self) -> Vec<NoteView> {
        let mut out: Vec<NoteView> = self
            .notes
            .inbox()
            .map(|n| NoteView {
                note: n.clone(),
                direction: Direction::In,
            })
            .collect();
        out.extend(self.notes.sent().map(|n| NoteView {
            note: n.clone(),
            direction: Direction::Out,
        }));
        out.sort_by(|a, b| {
            a.note
                .created
                .cmp(&b.note.created)
                .then_with(|| a.note.note_id.cmp(&b.note.note_id))
        });
        out
    }

    /// Number of notes we hold for others, delivered or not.
    pub fn held_notes(&self) -> usize {
        self.notes.held().count()
    }

    /// Attempts delivery of held notes whose recipient is online, limited
    /// to `only` when given. Each note is retried at most every few seconds.
    fn retry_notes(&mut self, io: &mut dyn Transport, only: Option<Fingerprint>) {
        let now = io.now();
        let mut due: Vec<(ProcessId, NoteEnvelope)> = Vec::new();
        for h in self.notes.held() {
            let r = h.envelope.recipient;
            if h.delivered || only.is_some_and(|o| o != r) || r == self.fingerprint() {
                continue;
            }
            let Some(entry) = self.roster.get(&r).filter(|e| !e.expired) else {
                continue;
            };
            let last = self.note_attempts.get(&h.envelope.note_id).copied();
            if only.is_none() && last.is_some_and(|t| now.saturating_sub(t) < NOTE_RETRY) {
                continue;
            }
            due.push((ProcessId::new(r, entry.addr), h.envelope.clone()));
        }
        for (peer, env) in due {
            self.note_attempts.insert(env.note_id.clone(), now);
            self.stats.note_deliveries_sent += 1;
            self.send_p2p(io, peer, p2p_json(tag::NOTE_DELIVER, &env));
        }
    }

    fn on_note_delivery(&mut self, io: &mut dyn Transport, id: StreamId, env: NoteEnvelope) {
        let note = match env.open(&self.sec.identity) {
            Ok(n) => n,
            Err(e) => {
                tracing::debug!(error = %e, "rejecting note delivery");
                return;
            }
        };
        let note_id = note.note_id.clone();
        match self.notes.receive(note.clone()) {
            Ok(true) => {
                self.stats.notes_received += 1;
                self.events.push(
                    EventKind::Note,
                    &NoteView {
                        note,
                        direction: Direction::In,
                    },
                );
                let receipt = LobbyMsg::NoteReceipt {
                    note_id: note_id.clone(),
                    recipient: self.fingerprint(),
                };
                if self.lobby.view().is_some() {
                    let _ = self.lobby_send(io, &receipt);
                }
            }
            Ok(false) => self.stats.note_duplicates += 1,
            Err(e) => {
                // Not durable, so no ack; the holder will retry.
                tracing::warn!(error = %e, "cannot store received note");
                return;
            }
        }
        let mut ctx = self.sec.ctx(io);
        let _ = self
            .sessions
            .send(&mut ctx, id, p2p_json(tag::NOTE_ACK, &NoteAck { note_id }));
    }

    fn note_delivered(&mut self, note_id: &str) {
        match self.notes.mark_delivered(note_id) {
            Ok(Some(n)) => {
                self.events.push(
                    EventKind::Note,
                    &NoteView {
                        note: n,
                        direction: Direction::Out,
                    },
                );
            }
            Ok(None) => {}
            Err(e) => tracing::warn!(error = %e, "cannot persist note delivery"),
        }
    }

    // ----- file sharing --------------------------------------------------

    pub fn add_share(
        &mut self,
        io: &mut dyn Transport,
        path: &std::path::Path,
        tags: &[String],
    ) -> Result<ShareEntry, NodeError> {
        Ok(self.shares.add_share(path, tags, io.now())?)
    }

    /// Adds an entry without reading a file. Fetches of it will fail.
    pub fn add_share_entry(&mut self, entry: ShareEntry) {
        self.shares.insert(entry);
    }

    pub fn shares(&self) -> Vec<ShareEntry> {
        self.shares.entries().cloned().collect()
    }

    fn allowed_hits(&self, originator: &Fingerprint, terms: &[String]) -> Vec<HitEntry> {
        let Some(subject) = self.subject_of(originator) else {
            return Vec::new();
        };
        self.shares
            .match_query(terms)
            .into_iter()
            .filter(|e| self.authorize(&format!("file:{}", e.name), &subject).allow)
            .map(ShareEntry::hit)
            .collect()
    }

    /// Floods a query to the lobby; hits accumulate under the returned id.
    pub fn search(&mut self, io: &mut dyn Transport, q: &str) -> Result<String, NodeError> {
        let terms = normalize_query(q);
        if terms.is_empty() {
            return Err(NodeError::Invalid("query has no terms".into()));
        }
        if self.lobby.view().is_none() {
            return Err(NodeError::Conflict("not in the sharing group".into()));
        }
        let mut raw = [0u8; 16];
        self.rng.fill_bytes(&mut raw);
        let query = Query {
            query_id: hex::encode(raw),
            originator: self.fingerprint(),
            terms,
            issued: io.now(),
        };
        let qid = query.query_id.clone();
        self.queries
            .insert(qid.clone(), QueryState { hits: Vec::new() });
        self.seen_queries.insert((self.fingerprint(), qid.clone()));
        let local = self.allowed_hits(&self.fingerprint(), &query.terms);
        if !local.is_empty() {
            self.record_hit(QueryHit {
                query_id: qid.clone(),
                responder: self.fingerprint(),
                locator: Locator {
                    addr: self.me.addr,
                    fingerprint: self.fingerprint(),
                },
                entries: local,
            });
        }
        self.lobby_send(io, &LobbyMsg::Query(query))
            .map_err(|e| NodeError::Conflict(e.to_string()))?;
        self.stats.queries_multicast += 1;
        self.pump(io);
        Ok(qid)
    }

    fn on_query(&mut self, io: &mut dyn Transport, sender: ProcessId, q: Query) {
        if q.originator != sender.fingerprint
            || !self.seen_queries.insert((q.originator, q.query_id.clone()))
        {
            return;
        }
        if q.terms.is_empty() {
            return;
        }
        self.stats.queries_answered += 1;
        let entries = self.allowed_hits(&q.originator, &q.terms);
        if entries.is_empty() {
            return;
        }
        let hit = QueryHit {
            query_id: q.query_id,
            responder: self.fingerprint(),
            locator: Locator {
                addr: self.me.addr,
                fingerprint: self.fingerprint(),
            },
            entries,
        };
        if self.cfg.hits_via_group {
            if self.lobby_send(io, &LobbyMsg::Hit(hit)).is_ok() {
                self.stats.hits_sent_group += 1;
            }
        } else {
            self.stats.hits_sent_p2p += 1;
            self.send_p2p(io, sender, p2p_json(tag::QUERY_HIT, &hit));
        }
    }

    fn record_hit(&mut self, hit: QueryHit) {
        let Some(q) = self.queries.get_mut(&hit.query_id) else {
            return;
        };
        if q.hits.iter().any(|h| h.responder == hit.responder) {
            return;
        }
        self.stats.hits_received += 1;
        for e in &hit.entries {
            self.locators.insert(
                (hit.responder, e.entry_id.clone()),
                (hit.locator, e.clone()),
            );
        }
        self.events.push(EventKind::Hit, &hit);
        q.hits.push(hit);
    }

    pub fn hits(&self, query_id: &str) -> Result<Vec<QueryHit>, NodeError> {
        self.queries
            .get(query_id)
            .map(|q| q.hits.clone())
            .ok_or_else(|| NodeError::NotFound(format!("unknown query {query_id}")))
    }

    /// Queues a download of an entry named in a hit.
    pub fn fetch(
        &mut self,
        io: &mut dyn Transport,
        responder: Fingerprint,
        entry_id: &str,
        dest: Option<PathBuf>,
    ) -> Result<TransferJob, NodeError> {
        let (locator, entry) = self
            .locators
            .get(&(responder, entry_id.to_string()))
            .cloned()
            .ok_or_else(|| {
                NodeError::NotFound("no hit names this entry at this responder".into())
            })?;
        if responder == self.fingerprint() {
            return Err(NodeError::Conflict(
                "entry is already shared locally".into(),
            ));
        }
        let dest = match dest {
            Some(d) => d,
            None => {
                let dir = self.download_dir().ok_or_else(|| {
                    NodeError::Invalid("dest is required without a data directory".into())
                })?;
                let name = std::path::Path::new(&entry.name)
                    .file_name()
                    .map(|n| n.to_owned())
                    .ok_or_else(|| NodeError::Invalid("entry name is not a file name".into()))?;
                dir.join(name)
            }
        };
        let job_id = self.next_job;
        self.next_job += 1;
        let job = TransferJob::new(job_id, &entry, locator, dest);
        self.events.push(EventKind::Transfer, &job);
        self.jobs.insert(job_id, job);
        self.schedule_jobs(io);
        self.pump(io);
        Ok(self.jobs[&job_id].clone())
    }

    pub fn transfers(&self) -> Vec<TransferJob> {
        self.jobs.values().cloned().collect()
    }

    pub fn transfer(&self, job_id: u64) -> Option<&TransferJob> {
        self.jobs.get(&job_id)
    }

    fn schedule_jobs(&mut self, io: &mut dyn Transport) {
        let now = io.now();
        let mut changed = Vec::new();
        for job in self.jobs.values_mut() {
            if job.requeue_if_due(now) {
                changed.push(job.clone());
            }
        }
        for j in changed {
            self.events.push(EventKind::Transfer, &j);
        }
        let mut active = self.jobs.values().filter(|j| j.is_active()).count();
        let queued: Vec<u64> = self
            .jobs
            .values()
            .filter(|j| j.state == TransferState::Queued)
            .map(|j| j.job_id)
            .collect();
        for job_id in queued {
            if active >= self.cfg.max_jobs {
                break;
            }
            let job = self.jobs.get_mut(&job_id).expect("listed");
            job.begin_attempt(now);
            let peer = ProcessId::new(job.source.fingerprint, job.source.addr);
            let mut ctx = self.sec.ctx(io);
            match self
                .sessions
                .open(&mut ctx, peer, Purpose::Transfer(job_id))
            {
                Ok(sid) => {
                    self.job_sessions.insert(sid, job_id);
                }
                Err(_) => job.fail(crate::fileshare::FailReason::Connect, now),
            }
            let snap = job.clone();
            self.events.push(EventKind::Transfer, &snap);
            active += 1;
        }
    }

    fn pump_job(&mut self, io: &mut dyn Transport, job_id: u64, sid: StreamId) {
        let Some(job) = self.jobs.get_mut(&job_id) else {
            return;
        };
        let was = job.state;
        let reqs = job.next_requests();
        let snap = (job.state != was).then(|| job.clone());
        let mut ctx = self.sec.ctx(io);
        for r in reqs {
            let _ = self
                .sessions
                .send(&mut ctx, sid, p2p_msg(tag::HTTP_REQUEST, &r));
        }
        if let Some(s) = snap {
            self.events.push(EventKind::Transfer, &s);
        }
    }

    fn on_job_response(&mut self, io: &mut dyn Transport, sid: StreamId, job_id: u64, body: &[u8]) {
        let now = io.now();
        let Some(job) = self.jobs.get_mut(&job_id) else {
            return;
        };
        if job.state != TransferState::Transferring {
            return;
        }
        match job.on_response(body) {
            Progress::Chunk => {
                let snap = job.clone();
                self.events.push(EventKind::Transfer, &snap);
                self.pump_job(io, job_id, sid);
            }
            Progress::Complete => {
                let snap = job.clone();
                self.events.push(EventKind::Transfer, &snap);
                job.verify(now);
                let snap = job.clone();
                self.events.push(EventKind::Transfer, &snap);
                self.finish_job_session(io, sid);
            }
            Progress::Failed(reason) => {
                job.fail(reason, now);
                let snap = job.clone();
                self.events.push(EventKind::Transfer, &snap);
                self.finish_job_session(io, sid);
            }
        }
        self.schedule_jobs(io);
    }

    fn finish_job_session(&mut self, io: &mut dyn Transport, sid: StreamId) {
        self.job_sessions.remove(&sid);
        let mut ctx = self.sec.ctx(io);
        self.sessions.close(&mut ctx, sid);
    }

    // ----- snapshots -----------------------------------------------------

    pub fn roster(&self) -> Vec<UserProfile> {
        self.roster.snapshot()
    }

    pub fn events_since(&self, since: u64) -> Vec<ControlEvent> {
        self.events.since(since)
    }

    pub fn last_event_seq(&self) -> u64 {
        self.events.last_seq()
    }

    /// Leaves every group; the host should keep ticking briefly so the
    /// departure reaches the others.
    pub fn shutdown(&mut self, io: &mut dyn Transport) {
        let mut ctx = self.sec.ctx(io);
        for v in self.venues.values_mut() {
            if let Some(g) = v.group.as_mut() {
                let _ = g.leave(&mut ctx);
            }
        }
        let _ = self.lobby.leave(&mut ctx);
        self.pump(io);
    }
}
