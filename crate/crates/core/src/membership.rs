//! Group identities, views and failure suspicion.
//!
//! The view-change protocol itself runs inside [`crate::group::GroupEngine`],
//! which owns both membership and delivery state for one group.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use netsim::{EndpointAddr, SimTime};
use serde::{Deserialize, Serialize};

use crate::identity::Fingerprint;
use crate::wire::{Reader, WireError, Writer};

pub const MAX_GROUP_NAME: usize = 128;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GroupId(String);

impl GroupId {
    pub fn new(name: impl Into<String>) -> Result<Self, WireError> {
        let name = name.into();
        if name.is_empty() || name.len() > MAX_GROUP_NAME {
            return Err(WireError::Invalid("group name"));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn encode(&self, w: &mut Writer) {
        w.short_bytes(self.0.as_bytes());
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let raw = r.short_bytes()?;
        let s = std::str::from_utf8(raw).map_err(|_| WireError::Invalid("group name"))?;
        Self::new(s)
    }
}

impl TryFrom<String> for GroupId {
    type Error = WireError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

impl From<GroupId> for String {
    fn from(g: GroupId) -> Self {
        g.0
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// A process in a group: its identity fingerprint plus where it listens.
/// Ordered by fingerprint bytes, then address bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProcessId {
    pub fingerprint: Fingerprint,
    pub addr: EndpointAddr,
}

impl ProcessId {
    pub const WIRE_LEN: usize = 32 + EndpointAddr::WIRE_LEN;

    pub fn new(fingerprint: Fingerprint, addr: EndpointAddr) -> Self {
        Self { fingerprint, addr }
    }

    pub fn encode(&self, w: &mut Writer) {
        w.raw(&self.fingerprint.0).raw(&self.addr.to_bytes());
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let fingerprint = Fingerprint(r.array()?);
        let addr = EndpointAddr::from_bytes(r.take(EndpointAddr::WIRE_LEN)?)
            .map_err(|_| WireError::Invalid("address"))?;
        Ok(Self { fingerprint, addr })
    }
}

impl fmt::Debug for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.fingerprint.short(), self.addr)
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ViewId {
    pub epoch: u64,
    pub initiator: ProcessId,
}

impl ViewId {
    pub fn encode(&self, w: &mut Writer) {
        w.u64(self.epoch);
        self.initiator.encode(w);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            epoch: r.u64()?,
            initiator: ProcessId::decode(r)?,
        })
    }
}

impl fmt::Debug for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {:?})", self.epoch, self.initiator)
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct View {
    pub group: GroupId,
    pub id: ViewId,
    members: Vec<ProcessId>,
}

impl fmt::Debug for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "View{{{} e{} {:?}}}",
            self.group, self.id.epoch, self.members
        )
    }
}

impl View {
    /// Sorts and dedupes `members`; rejects an empty list.
    pub fn new(
        group: GroupId,
        id: ViewId,
        members: impl IntoIterator<Item = ProcessId>,
    ) -> Result<Self, WireError> {
        let members: Vec<ProcessId> = members
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if members.is_empty() {
            return Err(WireError::Invalid("empty view"));
        }
        if members.len() > u16::MAX as usize {
            return Err(WireError::Invalid("view too large"));
        }
        Ok(Self { group, id, members })
    }

    pub fn members(&self) -> &[ProcessId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, p: &ProcessId) -> bool {
        self.members.binary_search(p).is_ok()
    }

    pub fn index_of(&self, p: &ProcessId) -> Option<usize> {
        self.members.binary_search(p).ok()
    }

    pub fn encode(&self, w: &mut Writer) {
        self.group.encode(w);
        self.id.encode(w);
        w.u16(self.members.len() as u16);
        for m in &self.members {
            m.encode(w);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let group = GroupId::decode(r)?;
        let id = ViewId::decode(r)?;
        let n = r.u16()? as usize;
        let mut members = Vec::with_capacity(n);
        for _ in 0..n {
            members.push(ProcessId::decode(r)?);
        }
        if !members.windows(2).all(|w| w[0] < w[1]) {
            return Err(WireError::Invalid("members not sorted"));
        }
        Self::new(group, id, members)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish()
    }
}

/// Heartbeat bookkeeping for the current view.
#[derive(Debug, Clone, Default)]
pub struct SuspicionState {
    pub last_heard: BTreeMap<ProcessId, SimTime>,
    pub suspects: BTreeSet<ProcessId>,
}

impl SuspicionState {
    /// Tracks exactly `view`'s members other than `me`, all fresh at `now`
    /// unless already tracked.
    pub fn reset(&mut self, view: &View, me: &ProcessId, now: SimTime) {
        let keep: BTreeSet<ProcessId> = view
            .members()
            .iter()
            .filter(|m| *m != me)
            .copied()
            .collect();
        self.last_heard.retain(|p, _| keep.contains(p));
        for p in &keep {
            let t = self.last_heard.entry(*p).or_insert(now);
            *t = (*t).max(now);
        }
        self.suspects.retain(|p| keep.contains(p));
    }

    pub fn heard(&mut self, p: &ProcessId, now: SimTime) {
        if let Some(t) = self.last_heard.get_mut(p) {
            *t = (*t).max(now);
            self.suspects.remove(p);
        }
    }

    pub fn clear(&mut self) {
        self.last_heard.clear();
        self.suspects.clear();
    }
}

/// Returns the members newly suspected at `now`: those silent for more
/// than `timeout`.
pub fn suspicion_check(
    state: &mut SuspicionState,
    now: SimTime,
    timeout: SimTime,
) -> BTreeSet<ProcessId> {
    let mut fresh = BTreeSet::new();
    for (p, heard) in &state.last_heard {
        if now.saturating_sub(*heard) > timeout && state.suspects.insert(*p) {
            fresh.insert(*p);
        }
    }
    fresh
}

/// A proposal being collected by the coordinator.
#[derive(Debug, Clone)]
pub struct ViewProposal {
    pub view: View,
    pub acks: BTreeSet<ProcessId>,
}

impl ViewProposal {
    pub fn complete(&self) -> bool {
        self.view.members().iter().all(|m| self.acks.contains(m))
    }
}

/// The smallest process not suspected, or `None` if all are.
pub fn coordinator<'a>(
    candidates: impl IntoIterator<Item = &'a ProcessId>,
    suspects: &BTreeSet<ProcessId>,
) -> Option<ProcessId> {
    candidates
        .into_iter()
        .filter(|p| !suspects.contains(p))
        .min()
        .copied()
}

/// `current ∪ joiners ∖ leavers ∖ suspects`, sorted.
pub fn next_membership(
    current: &[ProcessId],
    joiners: &BTreeSet<ProcessId>,
    leavers: &BTreeSet<ProcessId>,
    suspects: &BTreeSet<ProcessId>,
) -> Vec<ProcessId> {
    current
        .iter()
        .chain(joiners)
        .filter(|p| !leavers.contains(p) && !suspects.contains(p))
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
