//! Reliable FIFO and agreed (total-order) delivery within one view.
//!
//! Every member stamps its messages with a per-view sequence number and a
//! Lamport timestamp. FIFO messages are delivered as soon as they are the
//! sender's next. AGREED messages wait until no member can still emit a
//! smaller timestamp, then go out in `(ts, sender index)` order; quiet
//! members advance their entry of the heard vector through heartbeats.
//! Losses are repaired by NACKs to the sender and one alternate member, and
//! retransmission copies are purged once every member reports delivery.

use std::collections::{BTreeMap, BTreeSet};

use netsim::{SimTime, MAX_DATAGRAM};
use serde::Serialize;

use crate::membership::{GroupId, ProcessId, View, ViewId};
use crate::wire::{envelope, kind, Reader, WireError};

pub const MAX_PAYLOAD: usize = 64 * 1024;
const MAX_FRAGMENTS: u16 = 16;
const MAX_NACK_RANGES: usize = 64;
const MAX_RETRANSMIT_PER_NACK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Mode {
    ReliableFifo,
    Agreed,
}

impl Mode {
    fn to_u8(self) -> u8 {
        match self {
            Mode::ReliableFifo => 0,
            Mode::Agreed => 1,
        }
    }

    fn from_u8(v: u8) -> Result<Self, WireError> {
        match v {
            0 => Ok(Mode::ReliableFifo),
            1 => Ok(Mode::Agreed),
            _ => Err(WireError::Invalid("mode")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqMsg {
    pub group: GroupId,
    pub view_id: ViewId,
    pub sender: ProcessId,
    pub sender_seq: u64,
    pub lamport_ts: u64,
    pub mode: Mode,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFrame {
    pub group: GroupId,
    pub view_id: ViewId,
    pub sender: ProcessId,
    pub seq: u64,
    pub ts: u64,
    pub mode: Mode,
    pub frag_index: u16,
    pub frag_count: u16,
    pub payload: Vec<u8>,
}

/// Bytes of a DATA frame before its payload.
pub fn data_header_len(group: &GroupId) -> usize {
    4 + 1 + 1 + group.as_str().len() + 8 + 2 * ProcessId::WIRE_LEN + 8 + 8 + 1 + 2 + 2 + 2
}

impl DataFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = envelope(kind::DATA);
        self.group.encode(&mut w);
        self.view_id.encode(&mut w);
        self.sender.encode(&mut w);
        w.u64(self.seq)
            .u64(self.ts)
            .u8(self.mode.to_u8())
            .u16(self.frag_index)
            .u16(self.frag_count)
            .bytes16(&self.payload);
        w.finish()
    }

    /// Decodes the body following the envelope.
    pub fn decode(body: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(body);
        let f = Self {
            group: GroupId::decode(&mut r)?,
            view_id: ViewId::decode(&mut r)?,
            sender: ProcessId::decode(&mut r)?,
            seq: r.u64()?,
            ts: r.u64()?,
            mode: Mode::from_u8(r.u8()?)?,
            frag_index: r.u16()?,
            frag_count: r.u16()?,
            payload: r.bytes16()?.to_vec(),
        };
        r.finish()?;
        if f.seq == 0
            || f.frag_count == 0
            || f.frag_count > MAX_FRAGMENTS
            || f.frag_index >= f.frag_count
        {
            return Err(WireError::Invalid("fragment header"));
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NackFrame {
    pub group: GroupId,
    pub view_id: ViewId,
    pub target: ProcessId,
    pub ranges: Vec<(u64, u64)>,
}

impl NackFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = envelope(kind::NACK);
        self.group.encode(&mut w);
        self.view_id.encode(&mut w);
        self.target.encode(&mut w);
        w.u16(self.ranges.len() as u16);
        for (a, b) in &self.ranges {
            w.u64(*a).u64(*b);
        }
        w.finish()
    }

    pub fn decode(body: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(body);
        let group = GroupId::decode(&mut r)?;
        let view_id = ViewId::decode(&mut r)?;
        let target = ProcessId::decode(&mut r)?;
        let n = r.u16()? as usize;
        if n > MAX_NACK_RANGES {
            return Err(WireError::Invalid("too many ranges"));
        }
        let mut ranges = Vec::with_capacity(n);
        for _ in 0..n {
            let (a, b) = (r.u64()?, r.u64()?);
            if a == 0 || a > b {
                return Err(WireError::Invalid("range"));
            }
            ranges.push((a, b));
        }
        r.finish()?;
        Ok(Self {
            group,
            view_id,
            target,
            ranges,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OrdError {
    #[error("payload of {0} bytes exceeds the 64 KiB limit")]
    TooLarge(usize),
    #[error("delivery state is frozen for a view change")]
    Frozen,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OrdCounters {
    pub malformed: u64,
    pub wrong_view: u64,
    pub duplicates: u64,
    pub retransmitted: u64,
    pub nacks_sent: u64,
    pub purged: u64,
}

/// Result of the view-change flush at one member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlushReport {
    pub old_view: ViewId,
    pub cut: BTreeMap<ProcessId, u64>,
    pub retransmitted: u64,
    pub delivered: Vec<SeqMsg>,
}

/// A NACK to send: the frame and the member indices to send it to.
#[derive(Debug, Clone)]
pub struct NackRequest {
    pub targets: Vec<ProcessId>,
    pub frame: Vec<u8>,
}

#[derive(Debug, Clone, Copy)]
pub struct NackTiming {
    pub delay: SimTime,
    pub max_backoff: SimTime,
}

impl Default for NackTiming {
    fn default() -> Self {
        Self {
            delay: 200,
            max_backoff: 3_200,
        }
    }
}

#[derive(Debug, Clone)]
struct Partial {
    ts: u64,
    mode: Mode,
    count: u16,
    parts: BTreeMap<u16, Vec<u8>>,
}

#[derive(Debug, Clone, Copy)]
struct NackTimer {
    due: SimTime,
    backoff: SimTime,
    attempts: u32,
}

#[derive(Debug, Clone, Default)]
struct SenderState {
    contiguous: u64,
    delivered: u64,
    known_max: u64,
    partial: BTreeMap<u64, Partial>,
    /// Latest `(last_seq, clock)` heartbeat not yet applicable.
    null: Option<(u64, u64)>,
    nack: Option<NackTimer>,
    /// During a flush: the member known to hold the cut.
    holder: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DeliveryState {
    group: GroupId,
    view: View,
    me: usize,
    lamport: u64,
    next_seq: u64,
    senders: Vec<SenderState>,
    heard: Vec<u64>,
    /// Received messages not yet stable, keyed by (sender index, seq).
    log: BTreeMap<(usize, u64), SeqMsg>,
    agreed: BTreeSet<(u64, usize, u64)>,
    reported: Vec<Vec<u64>>,
    stable: Vec<u64>,
    frozen: bool,
    ready: Vec<SeqMsg>,
    timing: NackTiming,
    pub counters: OrdCounters,
}

impl DeliveryState {
    pub fn new(view: View, me: &ProcessId, timing: NackTiming) -> Self {
        let n = view.len();
        let me = view.index_of(me).expect("installing process is a member");
        Self {
            group: view.group.clone(),
            view,
            me,
            lamport: 0,
            next_seq: 1,
            senders: vec![SenderState::default(); n],
            heard: vec![0; n],
            log: BTreeMap::new(),
            agreed: BTreeSet::new(),
            reported: vec![vec![0; n]; n],
            stable: vec![0; n],
            frozen: false,
            ready: Vec::new(),
            timing,
            counters: OrdCounters::default(),
        }
    }

    pub fn view(&self) -> &View {
        &self.view
    }

    pub fn lamport(&self) -> u64 {
        self.lamport
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn heard_vector(&self) -> Vec<u64> {
        let mut h = self.heard.clone();
        h[self.me] = self.lamport;
        h
    }

    pub fn delivered_vector(&self) -> Vec<u64> {
        self.senders.iter().map(|s| s.delivered).collect()
    }

    pub fn stability_vector(&self) -> &[u64] {
        &self.stable
    }

    pub fn buffered(&self) -> usize {
        self.log.len()
    }

    /// Per-sender highest contiguous seq held, for the flush acknowledgement.
    pub fn flush_vector(&self) -> Vec<(ProcessId, u64)> {
        self.senders
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contiguous > 0)
            .map(|(i, s)| (self.view.members()[i], s.contiguous))
            .collect()
    }

    /// Messages delivered since the last call, in delivery order.
    pub fn take_delivered(&mut self) -> Vec<SeqMsg> {
        std::mem::take(&mut self.ready)
    }

    /// Stamps and stores a new message; returns it with the frames to send
    /// to the other members. Own messages are delivered through the normal
    /// ordering path.
    pub fn multicast(
        &mut self,
        payload: Vec<u8>,
        mode: Mode,
    ) -> Result<(SeqMsg, Vec<Vec<u8>>), OrdError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(OrdError::TooLarge(payload.len()));
        }
        if self.frozen {
            return Err(OrdError::Frozen);
        }
        self.lamport += 1;
        let msg = SeqMsg {
            group: self.group.clone(),
            view_id: self.view.id,
            sender: self.view.members()[self.me],
            sender_seq: self.next_seq,
            lamport_ts: self.lamport,
            mode,
            payload,
        };
        self.next_seq += 1;
        let frames = self.frames_for(&msg);
        let me = self.me;
        self.senders[me].known_max = msg.sender_seq;
        self.store(me, msg.clone());
        self.try_deliver();
        Ok((msg, frames))
    }

    fn frames_for(&self, msg: &SeqMsg) -> Vec<Vec<u8>> {
        let chunk = MAX_DATAGRAM - data_header_len(&self.group);
        let count = msg.payload.len().div_ceil(chunk).max(1);
        (0..count)
            .map(|i| {
                let end = ((i + 1) * chunk).min(msg.payload.len());
                DataFrame {
                    group: self.group.clone(),
                    view_id: msg.view_id,
                    sender: msg.sender,
                    seq: msg.sender_seq,
                    ts: msg.lamport_ts,
                    mode: msg.mode,
                    frag_index: i as u16,
                    frag_count: count as u16,
                    payload: msg.payload[i * chunk..end].to_vec(),
                }
                .encode()
            })
            .collect()
    }

    /// Handles one DATA frame for this view.
    pub fn handle_data(&mut self, frame: DataFrame, now: SimTime) {
        if frame.view_id != self.view.id || frame.group != self.group {
            self.counters.wrong_view += 1;
            return;
        }
        let Some(s) = self.view.index_of(&frame.sender) else {
            self.counters.malformed += 1;
            return;
        };
        if s == self.me {
            return;
        }
        self.lamport = self.lamport.max(frame.ts);
        let st = &mut self.senders[s];
        if frame.seq <= st.delivered || self.log.contains_key(&(s, frame.seq)) {
            self.counters.duplicates += 1;
            return;
        }
        st.known_max = st.known_max.max(frame.seq);
        let msg = if frame.frag_count == 1 {
            frame.payload
        } else {
            let p = st.partial.entry(frame.seq).or_insert_with(|| Partial {
                ts: frame.ts,
                mode: frame.mode,
                count: frame.frag_count,
                parts: BTreeMap::new(),
            });
            if p.count != frame.frag_count || p.ts != frame.ts || p.mode != frame.mode {
                self.counters.malformed += 1;
                return;
            }
            if p.parts.insert(frame.frag_index, frame.payload).is_some() {
                self.counters.duplicates += 1;
            }
            if p.parts.len() < p.count as usize {
                self.ensure_nack(s, now);
                return;
            }
            let p = st.partial.remove(&frame.seq).expect("present");
            let payload: Vec<u8> = p.parts.into_values().flatten().collect();
            if payload.len() > MAX_PAYLOAD {
                self.counters.malformed += 1;
                return;
            }
            payload
        };
        let before = self.senders[s].contiguous;
        self.store(
            s,
            SeqMsg {
                group: self.group.clone(),
                view_id: self.view.id,
                sender: frame.sender,
                sender_seq: frame.seq,
                lamport_ts: frame.ts,
                mode: frame.mode,
                payload: msg,
            },
        );
        let st = &mut self.senders[s];
        if st.contiguous > before {
            if let Some(t) = st.nack.as_mut() {
                t.due = now + self.timing.delay;
                t.backoff = self.timing.delay;
            }
        }
        if self.missing(s) {
            self.ensure_nack(s, now);
        }
        self.try_deliver();
    }

    fn store(&mut self, s: usize, msg: SeqMsg) {
        self.log.insert((s, msg.sender_seq), msg);
        let st = &mut self.senders[s];
        while let Some(m) = self.log.get(&(s, st.contiguous + 1)) {
            st.contiguous += 1;
            if m.mode == Mode::Agreed {
                self.agreed.insert((m.lamport_ts, s, m.sender_seq));
            }
            self.heard[s] = self.heard[s].max(m.lamport_ts);
        }
        if let Some((seq, clock)) = st.null {
            if st.contiguous >= seq {
                self.heard[s] = self.heard[s].max(clock);
                st.null = None;
            }
        }
    }

    fn missing(&self, s: usize) -> bool {
        let st = &self.senders[s];
        st.known_max > st.contiguous
    }

    fn ensure_nack(&mut self, s: usize, now: SimTime) {
        if s == self.me {
            return;
        }
        let delay = self.timing.delay;
        self.senders[s].nack.get_or_insert(NackTimer {
            due: now + delay,
            backoff: delay,
            attempts: 0,
        });
    }

    /// Applies a heartbeat: the sender's clock and last seq (a null message)
    /// and its delivered vector (for stability).
    pub fn on_heartbeat(
        &mut self,
        sender: &ProcessId,
        clock: u64,
        last_seq: u64,
        delivered: &[u64],
        now: SimTime,
    ) {
        let Some(s) = self.view.index_of(sender) else {
            return;
        };
        if s == self.me {
            return;
        }
        self.lamport = self.lamport.max(clock);
        let st = &mut self.senders[s];
        st.known_max = st.known_max.max(last_seq);
        if st.contiguous >= last_seq {
            self.heard[s] = self.heard[s].max(clock);
        } else if st.null.is_none_or(|(q, _)| last_seq >= q) {
            st.null = Some((last_seq, clock));
        }
        if delivered.len() == self.view.len() {
            for (r, d) in self.reported[s].iter_mut().zip(delivered) {
                *r = (*r).max(*d);
            }
        }
        if self.missing(s) {
            self.ensure_nack(s, now);
        }
        self.try_deliver();
        self.gc_stable();
    }

    fn min_heard(&self) -> u64 {
        self.heard_vector().into_iter().min().unwrap_or(0)
    }

    fn deliver(&mut self, s: usize, seq: u64) {
        let msg = self
            .log
            .get(&(s, seq))
            .expect("deliverable message is logged")
            .clone();
        if msg.mode == Mode::Agreed {
            self.agreed.remove(&(msg.lamport_ts, s, seq));
        }
        self.senders[s].delivered = seq;
        self.ready.push(msg);
    }

    /// Delivers every FIFO message at the head of its sender's queue and
    /// every AGREED message no member can still precede.
    fn try_deliver(&mut self) {
        if self.frozen {
            return;
        }
        loop {
            let mut progress = self.deliver_fifo_heads(None);
            let bound = self.min_heard();
            if let Some(&(ts, s, seq)) = self.agreed.first() {
                if ts <= bound && seq == self.senders[s].delivered + 1 {
                    self.deliver(s, seq);
                    progress = true;
                }
            }
            if !progress {
                break;
            }
        }
    }

    fn deliver_fifo_heads(&mut self, cut: Option<&[u64]>) -> bool {
        let mut progress = false;
        for s in 0..self.senders.len() {
            loop {
                let st = &self.senders[s];
                let next = st.delivered + 1;
                let limit = cut.map_or(st.contiguous, |c| c[s].min(st.contiguous));
                if next > limit {
                    break;
                }
                match self.log.get(&(s, next)) {
                    Some(m) if m.mode == Mode::ReliableFifo => {
                        self.deliver(s, next);
                        progress = true;
                    }
                    _ => break,
                }
            }
        }
        progress
    }

    /// Messages stamped in `(ts, sender index)` order that are deliverable
    /// now. Exposed for inspection; delivery happens automatically.
    pub fn total_order_deliverable(&self) -> Vec<&SeqMsg> {
        let bound = self.min_heard();
        self.agreed
            .iter()
            .take_while(|(ts, _, _)| *ts <= bound)
            .filter_map(|(_, s, seq)| self.log.get(&(*s, *seq)))
            .collect()
    }

    /// Timer work: NACKs whose delay has elapsed.
    pub fn tick(&mut self, now: SimTime) -> Vec<NackRequest> {
        let mut out = Vec::new();
        let n = self.senders.len();
        for s in 0..n {
            if s == self.me {
                continue;
            }
            if !self.missing(s) {
                self.senders[s].nack = None;
                continue;
            }
            let Some(timer) = self.senders[s].nack else {
                self.ensure_nack(s, now);
                continue;
            };
            if timer.due > now {
                continue;
            }
            let ranges = self.missing_ranges(s);
            let mut targets = vec![self.view.members()[s]];
            if let Some(h) = self.senders[s].holder {
                if h != self.me && h != s {
                    targets.push(self.view.members()[h]);
                }
            }
            if n > 2 {
                // One alternate, rotating with each attempt.
                let mut k = (s + 1 + timer.attempts as usize) % n;
                while k == s || k == self.me {
                    k = (k + 1) % n;
                }
                let alt = self.view.members()[k];
                if !targets.contains(&alt) {
                    targets.push(alt);
                }
            }
            out.push(NackRequest {
                targets,
                frame: NackFrame {
                    group: self.group.clone(),
                    view_id: self.view.id,
                    target: self.view.members()[s],
                    ranges,
                }
                .encode(),
            });
            self.counters.nacks_sent += 1;
            let backoff = (timer.backoff * 2).min(self.timing.max_backoff);
            self.senders[s].nack = Some(NackTimer {
                due: now + timer.backoff,
                backoff,
                attempts: timer.attempts + 1,
            });
        }
        out
    }

    fn missing_ranges(&self, s: usize) -> Vec<(u64, u64)> {
        let st = &self.senders[s];
        let mut ranges: Vec<(u64, u64)> = Vec::new();
        for seq in st.contiguous + 1..=st.known_max {
            if self.log.contains_key(&(s, seq)) {
                continue;
            }
            match ranges.last_mut() {
                Some((_, b)) if *b + 1 == seq => *b = seq,
                _ => {
                    if ranges.len() == MAX_NACK_RANGES {
                        break;
                    }
                    ranges.push((seq, seq));
                }
            }
        }
        ranges
    }

    /// Frames answering a NACK for `target`'s messages.
    pub fn retransmit(&mut self, target: &ProcessId, ranges: &[(u64, u64)]) -> Vec<Vec<u8>> {
        let Some(s) = self.view.index_of(target) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut served = 0;
        for &(a, b) in ranges {
            for seq in a..=b {
                if served == MAX_RETRANSMIT_PER_NACK {
                    return out;
                }
                if let Some(m) = self.log.get(&(s, seq)) {
                    out.extend(self.frames_for(m));
                    served += 1;
                    self.counters.retransmitted += 1;
                }
            }
            if b - a > MAX_RETRANSMIT_PER_NACK as u64 {
                break;
            }
        }
        out
    }

    /// Drops retransmission copies every member has delivered.
    pub fn gc_stable(&mut self) -> usize {
        let n = self.senders.len();
        let mine = self.delivered_vector();
        for s in 0..n {
            let min = (0..n)
                .map(|m| {
                    if m == self.me {
                        mine[s]
                    } else {
                        self.reported[m][s]
                    }
                })
                .min()
                .unwrap_or(0);
            self.stable[s] = self.stable[s].max(min);
        }
        let before = self.log.len();
        let stable = &self.stable;
        self.log.retain(|(s, seq), _| *seq > stable[*s]);
        let purged = before - self.log.len();
        self.counters.purged += purged as u64;
        purged
    }

    /// Stops delivery ahead of a view change.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Resumes normal delivery after an abandoned view change.
    pub fn unfreeze(&mut self) {
        self.frozen = false;
        for st in &mut self.senders {
            st.holder = None;
        }
        self.try_deliver();
    }

    /// Records the agreed cut so NACKs cover everything it names.
    pub fn set_flush_target(&mut self, cut: &BTreeMap<ProcessId, (u64, ProcessId)>, now: SimTime) {
        for (pid, (seq, holder)) in cut {
            let Some(s) = self.view.index_of(pid) else {
                continue;
            };
            let h = self.view.index_of(holder);
            let st = &mut self.senders[s];
            st.known_max = st.known_max.max(*seq);
            st.holder = h;
            if st.contiguous < *seq {
                if let Some(t) = st.nack.as_mut() {
                    t.due = t.due.min(now);
                }
                self.ensure_nack(s, now);
            }
        }
    }

    /// True when every sender's contiguous prefix reaches the cut.
    pub fn flush_complete(&self, cut: &BTreeMap<ProcessId, (u64, ProcessId)>) -> bool {
        cut.iter()
            .all(|(pid, (seq, _))| match self.view.index_of(pid) {
                Some(s) => self.senders[s].contiguous >= *seq,
                None => true,
            })
    }

    /// Delivers exactly the messages up to the cut: remaining FIFO messages
    /// in sender order and the AGREED residue in `(ts, sender)` order.
    pub fn finish_flush(&mut self, cut: &BTreeMap<ProcessId, (u64, ProcessId)>) -> FlushReport {
        let mut limits = vec![0u64; self.senders.len()];
        for (pid, (seq, _)) in cut {
            if let Some(s) = self.view.index_of(pid) {
                limits[s] = *seq;
            }
        }
        // Our own contiguous prefix may exceed the cut only if messages were
        // lost everywhere else; those are discarded.
        loop {
            let mut progress = self.deliver_fifo_heads(Some(&limits));
            let next = self
                .agreed
                .iter()
                .find(|(_, s, seq)| *seq <= limits[*s].min(self.senders[*s].contiguous))
                .copied();
            if let Some((_, s, seq)) = next {
                if seq == self.senders[s].delivered + 1 {
                    self.deliver(s, seq);
                    progress = true;
                }
            }
            if !progress {
                break;
            }
        }
        self.frozen = true;
        FlushReport {
            old_view: self.view.id,
            cut: cut.iter().map(|(p, (seq, _))| (*p, *seq)).collect(),
            retransmitted: self.counters.retransmitted,
            delivered: self.take_delivered(),
        }
    }
}

/// The coordinator's cut for one old view: per sender the highest seq any
/// acknowledging survivor holds, and one survivor holding it.
pub fn compute_cut<'a>(
    vectors: impl IntoIterator<Item = (ProcessId, &'a [(ProcessId, u64)])>,
) -> BTreeMap<ProcessId, (u64, ProcessId)> {
    let mut cut: BTreeMap<ProcessId, (u64, ProcessId)> = BTreeMap::new();
    for (acker, vec) in vectors {
        for (sender, seq) in vec {
            let e = cut.entry(*sender).or_insert((0, acker));
            if *seq > e.0 {
                *e = (*seq, acker);
            }
        }
    }
    cut.retain(|_, (seq, _)| *seq > 0);
    cut
}
