//! Presence roster, venues, chat messages and store-and-forward notes.
//!
//! Everything here is transport-free; [`crate::node`] wires it to groups
//! and sessions.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use curve25519_dalek::montgomery::MontgomeryPoint;
use ed25519_dalek::VerifyingKey;
use hkdf::Hkdf;
use netsim::{EndpointAddr, SimTime};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zeroize::Zeroizing;

use crate::group::Admission;
use crate::identity::{verify_signature, Fingerprint, Identity, IdentityCert};
use crate::membership::{GroupId, ProcessId};
use crate::secure::Position;

pub const BEACON_INTERVAL: SimTime = 2_000;
pub const OFFLINE_INTERVALS: u64 = 3;
pub const MAX_CHAT_BODY: usize = 4 * 1024;
pub const MAX_NOTE_BODY: usize = 8 * 1024;
pub const MAX_NAME: usize = 100;
pub const DEFAULT_RELAY_CAP: usize = 1_000;

const NOTE_CONTEXT: &[u8] = b"adhoc-note-v1";
const BEACON_CONTEXT: &[u8] = b"adhoc-beacon-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Availability {
    Available,
    Away,
    Busy,
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Visibility {
    Public,
    Private,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VenueSummary {
    pub venue_id: String,
    pub name: String,
    pub visibility: Visibility,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub fingerprint: Fingerprint,
    pub display_name: String,
    pub location: String,
    pub availability: Availability,
    pub venues: Vec<VenueSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceBeacon {
    pub profile: UserProfile,
    pub signature: String,
}

impl PresenceBeacon {
    fn tbs(profile: &UserProfile) -> Vec<u8> {
        let mut out = BEACON_CONTEXT.to_vec();
        out.extend_from_slice(&serde_json::to_vec(profile).expect("profile serializes"));
        out
    }

    pub fn signed(profile: UserProfile, identity: &Identity) -> Self {
        let signature = hex::encode(identity.sign(&Self::tbs(&profile)));
        Self { profile, signature }
    }

    pub fn verify(&self, cert: &IdentityCert) -> bool {
        let Ok(sig) = hex::decode(&self.signature) else {
            return false;
        };
        let Ok(sig) = <[u8; 64]>::try_from(sig.as_slice()) else {
            return false;
        };
        cert.fingerprint() == self.profile.fingerprint
            && verify_signature(cert, &Self::tbs(&self.profile), &sig)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RosterEntry {
    pub profile: UserProfile,
    pub addr: EndpointAddr,
    pub last_seen: SimTime,
    pub expired: bool,
}

impl RosterEntry {
    /// The profile as others should see it: OFFLINE once the beacon expired.
    pub fn view(&self) -> UserProfile {
        let mut p = self.profile.clone();
        if self.expired {
            p.availability = Availability::Offline;
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum BeaconError {
    #[error("beacon signature does not verify")]
    BadSignature,
    #[error("sender certificate unknown")]
    UnknownSender,
}

#[derive(Debug, Clone)]
pub struct Roster {
    entries: BTreeMap<Fingerprint, RosterEntry>,
    interval: SimTime,
    pub rejected: u64,
}

impl Default for Roster {
    fn default() -> Self {
        Self::new(BEACON_INTERVAL)
    }
}

impl Roster {
    pub fn new(interval: SimTime) -> Self {
        Self {
            entries: BTreeMap::new(),
            interval,
            rejected: 0,
        }
    }

    pub fn interval(&self) -> SimTime {
        self.interval
    }

    /// Upserts the beacon's profile. Returns whether the visible profile
    /// changed. Forged beacons leave the roster untouched.
    pub fn update(
        &mut self,
        beacon: &PresenceBeacon,
        sender: &ProcessId,
        cert: Option<&IdentityCert>,
        now: SimTime,
    ) -> Result<bool, BeaconError> {
        let Some(cert) = cert else {
            self.rejected += 1;
            return Err(BeaconError::UnknownSender);
        };
        if sender.fingerprint != beacon.profile.fingerprint || !beacon.verify(cert) {
            self.rejected += 1;
            return Err(BeaconError::BadSignature);
        }
        let entry = RosterEntry {
            profile: beacon.profile.clone(),
            addr: sender.addr,
            last_seen: now,
            expired: false,
        };
        let changed = match self.entries.get(&beacon.profile.fingerprint) {
            Some(old) => old.view() != entry.view() || old.addr != entry.addr,
            None => true,
        };
        self.entries.insert(beacon.profile.fingerprint, entry);
        Ok(changed)
    }

    /// Marks silent entries OFFLINE; returns those that just expired.
    pub fn expire(&mut self, now: SimTime) -> Vec<Fingerprint> {
        let limit = OFFLINE_INTERVALS * self.interval;
        let mut out = Vec::new();
        for (fp, e) in &mut self.entries {
            if !e.expired && now.saturating_sub(e.last_seen) > limit {
                e.expired = true;
                out.push(*fp);
            }
        }
        out
    }

    pub fn get(&self, fp: &Fingerprint) -> Option<&RosterEntry> {
        self.entries.get(fp)
    }

    pub fn is_online(&self, fp: &Fingerprint) -> bool {
        self.entries.get(fp).is_some_and(|e| !e.expired)
    }

    pub fn entries(&self) -> impl Iterator<Item = &RosterEntry> {
        self.entries.values()
    }

    pub fn snapshot(&self) -> Vec<UserProfile> {
        self.entries.values().map(RosterEntry::view).collect()
    }
}

/// Hex SHA-256 of (creator, name, creation time).
pub fn venue_id(creator: &Fingerprint, name: &str, created: u64) -> String {
    let mut h = Sha256::new();
    h.update(creator.0);
    h.update((name.len() as u32).to_be_bytes());
    h.update(name.as_bytes());
    h.update(created.to_be_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Venue {
    pub venue_id: String,
    pub name: String,
    pub visibility: Visibility,
    pub creator: Fingerprint,
    pub created: u64,
    pub invited: BTreeSet<Fingerprint>,
}

impl Venue {
    pub fn new(name: &str, visibility: Visibility, creator: Fingerprint, created: u64) -> Self {
        Self {
            venue_id: venue_id(&creator, name, created),
            name: name.to_string(),
            visibility,
            creator,
            created,
            invited: BTreeSet::new(),
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.venue_id == venue_id(&self.creator, &self.name, self.created)
    }

    pub fn group_id(&self) -> GroupId {
        GroupId::new(format!("v:{}", self.venue_id)).expect("venue group names are short")
    }

    pub fn summary(&self) -> VenueSummary {
        VenueSummary {
            venue_id: self.venue_id.clone(),
            name: self.name.clone(),
            visibility: self.visibility,
        }
    }

    pub fn admission(&self) -> Admission {
        match self.visibility {
            Visibility::Public => Admission::Open,
            Visibility::Private => {
                let mut allowed = self.invited.clone();
                allowed.insert(self.creator);
                Admission::AllowList(allowed)
            }
        }
    }

    pub fn admits(&self, fp: &Fingerprint) -> bool {
        self.visibility == Visibility::Public || *fp == self.creator || self.invited.contains(fp)
    }

    /// Folds in another member's descriptor. Invitations only grow and
    /// PUBLIC is absorbing, so merging in any order converges.
    pub fn merge(&mut self, other: &Venue) -> bool {
        if other.venue_id != self.venue_id {
            return false;
        }
        let before = (self.visibility, self.invited.len());
        self.invited.extend(other.invited.iter().copied());
        if other.visibility == Visibility::Public {
            self.visibility = Visibility::Public;
        }
        before != (self.visibility, self.invited.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChatPosition {
    pub epoch: u64,
    pub ts: u64,
    pub author: Fingerprint,
    pub seq: u64,
}

impl ChatPosition {
    pub fn new(pos: Position, author: Fingerprint) -> Self {
        Self {
            epoch: pos.epoch,
            ts: pos.lamport_ts,
            author,
            seq: pos.sender_seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub venue_id: String,
    pub author: Fingerprint,
    pub body: String,
    pub position: ChatPosition,
}

pub fn validate_chat_body(body: &str) -> Result<(), &'static str> {
    if body.is_empty() {
        Err("message body is empty")
    } else if body.len() > MAX_CHAT_BODY {
        Err("message body exceeds 4 KiB")
    } else {
        Ok(())
    }
}

/// Hex SHA-256 of (author, recipient, created, body).
pub fn note_id(author: &Fingerprint, recipient: &Fingerprint, created: u64, body: &str) -> String {
    let mut h = Sha256::new();
    h.update(author.0);
    h.update(recipient.0);
    h.update(created.to_be_bytes());
    h.update(body.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub note_id: String,
    pub author: Fingerprint,
    pub recipient: Fingerprint,
    pub created: u64,
    pub body: String,
    pub delivered: bool,
}

/// A note body as it travels: readable only by the recipient when the
/// author knew the recipient's certificate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NotePayload {
    Plain {
        body: String,
    },
    Sealed {
        ephemeral: String,
        ciphertext: String,
    },
}

impl NotePayload {
    fn signed_bytes(&self) -> Vec<u8> {
        match self {
            NotePayload::Plain { body } => [&[0u8][..], body.as_bytes()].concat(),
            NotePayload::Sealed {
                ephemeral,
                ciphertext,
            } => [
                &[1u8][..],
                ephemeral.as_bytes(),
                b"|",
                ciphertext.as_bytes(),
            ]
            .concat(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteEnvelope {
    pub note_id: String,
    pub author_cert: IdentityCert,
    pub recipient: Fingerprint,
    pub created: u64,
    pub payload: NotePayload,
    pub signature: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum NoteError {
    #[error("note signature does not verify")]
    BadSignature,
    #[error("note is addressed to someone else")]
    WrongRecipient,
    #[error("note payload cannot be opened")]
    Undecryptable,
    #[error("note id does not match its contents")]
    IdMismatch,
}

fn note_key(
    shared: &[u8; 32],
    ephemeral: &[u8; 32],
    recipient: &Fingerprint,
) -> Zeroizing<[u8; 32]> {
    let mut info = NOTE_CONTEXT.to_vec();
    info.extend_from_slice(&recipient.0);
    let mut key = Zeroizing::new([0u8; 32]);
    Hkdf::<Sha256>::new(Some(ephemeral), shared)
        .expand(&info, key.as_mut_slice())
        .expect("32 bytes is a valid HKDF length");
    key
}

impl NoteEnvelope {
    fn tbs(note_id: &str, recipient: &Fingerprint, created: u64, payload: &NotePayload) -> Vec<u8> {
        let mut out = NOTE_CONTEXT.to_vec();
        out.extend_from_slice(note_id.as_bytes());
        out.extend_from_slice(&recipient.0);
        out.extend_from_slice(&created.to_be_bytes());
        out.extend_from_slice(&payload.signed_bytes());
        out
    }

    /// Builds a signed envelope, sealing the body to `recipient_cert` when
    /// it is known.
    pub fn seal<R: RngCore + CryptoRng>(
        author: &Identity,
        recipient: Fingerprint,
        recipient_cert: Option<&IdentityCert>,
        created: u64,
        body: &str,
        rng: &mut R,
    ) -> (Note, Self) {
        let id = note_id(&author.fingerprint(), &recipient, created, body);
        let payload =
            match recipient_cert.and_then(|c| VerifyingKey::from_bytes(&c.public_key).ok()) {
                Some(vk) => {
                    let mut eph = Zeroizing::new([0u8; 32]);
                    rng.fill_bytes(eph.as_mut_slice());
                    let eph_pub = MontgomeryPoint::mul_base_clamped(*eph).to_bytes();
                    let shared = Zeroizing::new(vk.to_montgomery().mul_clamped(*eph).to_bytes());
                    let key = note_key(&shared, &eph_pub, &recipient);
                    let ct = ChaCha20Poly1305::new(Key::from_slice(key.as_slice()))
                        .encrypt(
                            &Nonce::default(),
                            Payload {
                                msg: body.as_bytes(),
                                aad: id.as_bytes(),
                            },
                        )
                        .expect("in-memory encryption cannot fail");
                    NotePayload::Sealed {
                        ephemeral: hex::encode(eph_pub),
                        ciphertext: hex::encode(ct),
                    }
                }
                None => NotePayload::Plain {
                    body: body.to_string(),
                },
            };
        let signature = hex::encode(author.sign(&Self::tbs(&id, &recipient, created, &payload)));
        let note = Note {
            note_id: id.clone(),
            author: author.fingerprint(),
            recipient,
            created,
            body: body.to_string(),
            delivered: false,
        };
        let env = Self {
            note_id: id,
            author_cert: author.cert().clone(),
            recipient,
            created,
            payload,
            signature,
        };
        (note, env)
    }

    pub fn author(&self) -> Fingerprint {
        self.author_cert.fingerprint()
    }

    /// Checks the author's signature; anyone holding the envelope can.
    pub fn verify(&self) -> bool {
        let Ok(sig) = hex::decode(&self.signature) else {
            return false;
        };
        let Ok(sig) = <[u8; 64]>::try_from(sig.as_slice()) else {
            return false;
        };
        verify_signature(
            &self.author_cert,
            &Self::tbs(&self.note_id, &self.recipient, self.created, &self.payload),
            &sig,
        )
    }

    /// Opens the envelope as its recipient.
    pub fn open(&self, me: &Identity) -> Result<Note, NoteError> {
        if !self.verify() {
            return Err(NoteError::BadSignature);
        }
        if self.recipient != me.fingerprint() {
            return Err(NoteError::WrongRecipient);
        }
        let body = match &self.payload {
            NotePayload::Plain { body } => body.clone(),
            NotePayload::Sealed {
                ephemeral,
                ciphertext,
            } => {
                let eph: [u8; 32] = hex::decode(ephemeral)
                    .ok()
                    .and_then(|v| v.try_into().ok())
                    .ok_or(NoteError::Undecryptable)?;
                let ct = hex::decode(ciphertext).map_err(|_| NoteError::Undecryptable)?;
                let shared =
                    Zeroizing::new(MontgomeryPoint(eph).mul_clamped(me.dh_scalar()).to_bytes());
                let key = note_key(&shared, &eph, &self.recipient);
                let pt = ChaCha20Poly1305::new(Key::from_slice(key.as_slice()))
                    .decrypt(
                        &Nonce::default(),
                        Payload {
                            msg: &ct,
                            aad: self.note_id.as_bytes(),
                        },
                    )
                    .map_err(|_| NoteError::Undecryptable)?;
                String::from_utf8(pt).map_err(|_| NoteError::Undecryptable)?
            }
        };
        let author = self.author();
        if note_id(&author, &self.recipient, self.created, &body) != self.note_id {
            return Err(NoteError::IdMismatch);
        }
        Ok(Note {
            note_id: self.note_id.clone(),
            author,
            recipient: self.recipient,
            created: self.created,
            body,
            delivered: true,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldNote {
    pub envelope: NoteEnvelope,
    pub delivered: bool,
    /// True when we only hold it for someone else.
    pub relay: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum NoteRecord {
    Held(HeldNote),
    Inbox(Note),
    Sent(Note),
    Dropped { note_id: String },
}

/// Notes we hold for delivery, notes we received and notes we wrote.
///
/// Backed by an append-only JSON-lines file; replaying the file with
/// last-record-wins rebuilds the state.
#[derive(Debug)]
pub struct NoteStore {
    path: Option<PathBuf>,
    held: BTreeMap<String, HeldNote>,
    relay_order: VecDeque<String>,
    inbox: BTreeMap<String, Note>,
    sent: BTreeMap<String, Note>,
    relay_cap: usize,
    pub evicted: u64,
}

impl NoteStore {
    pub fn in_memory(relay_cap: usize) -> Self {
        Self {
            path: None,
            held: BTreeMap::new(),
            relay_order: VecDeque::new(),
            inbox: BTreeMap::new(),
            sent: BTreeMap::new(),
            relay_cap,
            evicted: 0,
        }
    }

    pub fn open(path: &Path, relay_cap: usize) -> std::io::Result<Self> {
        let mut store = Self::in_memory(relay_cap);
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<NoteRecord>(&line) {
                    Ok(rec) => store.apply(rec),
                    Err(e) => {
                        tracing::warn!(line = n + 1, error = %e, "skipping corrupt note record")
                    }
                }
            }
        }
        store.path = Some(path.to_path_buf());
        Ok(store)
    }

    fn apply(&mut self, rec: NoteRecord) {
        match rec {
            NoteRecord::Held(h) => {
                let id = h.envelope.note_id.clone();
                if h.relay && !self.held.contains_key(&id) {
                    self.relay_order.push_back(id.clone());
                }
                self.held.insert(id, h);
            }
            NoteRecord::Inbox(n) => {
                self.inbox.insert(n.note_id.clone(), n);
            }
            NoteRecord::Sent(n) => {
                self.sent.insert(n.note_id.clone(), n);
            }
            NoteRecord::Dropped { note_id } => {
                self.held.remove(&note_id);
                self.relay_order.retain(|i| *i != note_id);
            }
        }
    }

    fn persist(&mut self, rec: NoteRecord) -> std::io::Result<()> {
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_vec(&rec).expect("note record serializes");
            line.push(b'\n');
            f.write_all(&line)?;
            f.sync_data()?;
        }
        self.apply(rec);
        Ok(())
    }

    /// Records a note we authored; we are its first holder.
    pub fn add_authored(&mut self, note: Note, envelope: NoteEnvelope) -> std::io::Result<()> {
        self.persist(NoteRecord::Sent(note))?;
        self.persist(NoteRecord::Held(HeldNote {
            envelope,
            delivered: false,
            relay: false,
        }))
    }

    /// Takes relay duty for someone else's note. Returns false if already
    /// held. Evicts the oldest relayed note past the cap.
    pub fn add_relay(&mut self, envelope: NoteEnvelope) -> std::io::Result<bool> {
        if self.held.contains_key(&envelope.note_id) {
            return Ok(false);
        }
        while self.relay_order.len() >= self.relay_cap {
            let Some(old) = self.relay_order.front().cloned() else {
                break;
            };
            tracing::info!(note_id = %old, "relay store full, evicting oldest note");
            self.evicted += 1;
            self.persist(NoteRecord::Dropped { note_id: old })?;
        }
        self.persist(NoteRecord::Held(HeldNote {
            envelope,
            delivered: false,
            relay: true,
        }))?;
        Ok(true)
    }

    /// Marks a held note delivered. Returns the updated sent copy if we
    /// authored it and it changed.
    pub fn mark_delivered(&mut self, note_id: &str) -> std::io::Result<Option<Note>> {
        if let Some(h) = self.held.get(note_id).filter(|h| !h.delivered).cloned() {
            self.persist(NoteRecord::Held(HeldNote {
                delivered: true,
                ..h
            }))?;
        }
        match self.sent.get(note_id).filter(|n| !n.delivered).cloned() {
            Some(n) => {
                let n = Note {
                    delivered: true,
                    ..n
                };
                self.persist(NoteRecord::Sent(n.clone()))?;
                Ok(Some(n))
            }
            None => Ok(None),
        }
    }

    /// Stores a received note. Returns false for a duplicate.
    pub fn receive(&mut self, note: Note) -> std::io::Result<bool> {
        if self.inbox.contains_key(&note.note_id) {
            return Ok(false);
        }
        self.persist(NoteRecord::Inbox(note))?;
        Ok(true)
    }

    pub fn has_received(&self, note_id: &str) -> bool {
        self.inbox.contains_key(note_id)
    }

    pub fn held(&self) -> impl Iterator<Item = &HeldNote> {
        self.held.values()
    }

    pub fn held_note(&self, note_id: &str) -> Option<&HeldNote> {
        self.held.get(note_id)
    }

    pub fn pending_for(&self, recipient: &Fingerprint) -> Vec<NoteEnvelope> {
        self.held
            .values()
            .filter(|h| !h.delivered && h.envelope.recipient == *recipient)
            .map(|h| h.envelope.clone())
            .collect()
    }

    pub fn inbox(&self) -> impl Iterator<Item = &Note> {
        self.inbox.values()
    }

    pub fn sent(&self) -> impl Iterator<Item = &Note> {
        self.sent.values()
    }

    pub fn relay_count(&self) -> usize {
        self.relay_order.len()
    }
}
