use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::policy::check_disjoint;
use crate::{
    EndpointAddr, Fault, LinkPolicy, NetError, SimTime, StreamEvent, StreamId, Transport,
    MAX_DATAGRAM,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Datagram {
    pub src: EndpointAddr,
    pub dst: EndpointAddr,
    pub payload: Vec<u8>,
    pub send_time: SimTime,
}

/// An event handed to the caller of [`Network::next_event`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SimEvent {
    Datagram(Datagram),
    Stream {
        to: EndpointAddr,
        event: StreamEvent,
    },
    Timer {
        addr: EndpointAddr,
        token: u64,
    },
}

/// Summary of an event log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceDigest {
    pub event_count: u64,
    pub final_time: SimTime,
    pub hash: [u8; 32],
}

impl fmt::Display for TraceDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "events={} t={} hash={}",
            self.event_count,
            self.final_time,
            hex::encode(self.hash)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunLimit {
    /// Process every event scheduled at or before this time.
    At(SimTime),
    /// Process until the queue drains, but never past `max`.
    Quiescence { max: SimTime },
}

/// Handle returned by [`Network::attach`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    addr: EndpointAddr,
}

impl Endpoint {
    pub fn addr(&self) -> EndpointAddr {
        self.addr
    }
}

/// Per-endpoint traffic counters. Kept after detach.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EndpointStats {
    pub datagrams_sent: u64,
    pub datagram_bytes: u64,
    /// Datagrams whose destination was a different endpoint.
    pub remote_datagrams: u64,
    pub datagrams_delivered: u64,
    pub streams_opened: u64,
    pub stream_frames: u64,
    pub stream_bytes: u64,
    /// Stream frames sent to a different endpoint.
    pub remote_stream_frames: u64,
}

enum Pending {
    Datagram(Datagram),
    StreamOpen {
        id: StreamId,
        to: EndpointAddr,
    },
    StreamData {
        id: StreamId,
        to: EndpointAddr,
        frame: Vec<u8>,
    },
    StreamClose {
        id: StreamId,
        to: EndpointAddr,
        reset: bool,
    },
    Timer {
        addr: EndpointAddr,
        token: u64,
    },
}

struct EndpointState {
    attached_at: SimTime,
    inbox: VecDeque<Datagram>,
    stream_inbox: VecDeque<StreamEvent>,
    timers: VecDeque<u64>,
}

struct StreamState {
    ends: [EndpointAddr; 2],
    /// Last scheduled delivery per direction, index = sending end.
    last_at: [SimTime; 2],
    reset: bool,
    closing: [bool; 2],
}

impl StreamState {
    fn alive(&self) -> bool {
        !self.reset && !self.closing.iter().all(|c| *c)
    }

    fn side(&self, addr: &EndpointAddr) -> Option<usize> {
        self.ends.iter().position(|e| e == addr)
    }
}

/// Single-threaded simulated network.
///
/// Randomness is drawn from one ChaCha8 stream seeded by the caller. Each
/// datagram send consumes, in order: one `f64` for loss; when kept, one
/// delay in `delay_min..=delay_max`; then, when `duplicate_prob > 0`, one
/// `f64` for duplication and, if duplicated, a second delay. Cross-partition
/// sends are dropped before any draw.
pub struct Network {
    rng: ChaCha8Rng,
    policy: LinkPolicy,
    now: SimTime,
    next_seq: u64,
    queue: BTreeMap<(SimTime, u64), Pending>,
    endpoints: BTreeMap<EndpointAddr, EndpointState>,
    streams: BTreeMap<StreamId, StreamState>,
    next_stream: u64,
    link_last: BTreeMap<(EndpointAddr, EndpointAddr), SimTime>,
    stats: BTreeMap<EndpointAddr, EndpointStats>,
    hasher: Sha256,
    event_count: u64,
}

impl Network {
    pub fn new(seed: u64, policy: LinkPolicy) -> Result<Self, NetError> {
        policy.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            policy,
            now: 0,
            next_seq: 0,
            queue: BTreeMap::new(),
            endpoints: BTreeMap::new(),
            streams: BTreeMap::new(),
            next_stream: 1,
            link_last: BTreeMap::new(),
            stats: BTreeMap::new(),
            hasher: Sha256::new(),
            event_count: 0,
        })
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn policy(&self) -> &LinkPolicy {
        &self.policy
    }

    pub fn endpoint_count(&self) -> usize {
        self.endpoints.len()
    }

    pub fn is_attached(&self, addr: &EndpointAddr) -> bool {
        self.endpoints.contains_key(addr)
    }

    pub fn stats(&self, addr: &EndpointAddr) -> EndpointStats {
        self.stats.get(addr).copied().unwrap_or_default()
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn attach(&mut self, addr: EndpointAddr) -> Result<Endpoint, NetError> {
        if self.endpoints.contains_key(&addr) {
            return Err(NetError::DuplicateEndpoint(addr));
        }
        self.endpoints.insert(
            addr,
            EndpointState {
                attached_at: self.now,
                inbox: VecDeque::new(),
                stream_inbox: VecDeque::new(),
                timers: VecDeque::new(),
            },
        );
        self.stats.entry(addr).or_default();
        Ok(Endpoint { addr })
    }

    /// Takes an endpoint offline. Its streams are reset and anything still
    /// in flight towards it is discarded.
    pub fn detach(&mut self, addr: &EndpointAddr) -> Result<(), NetError> {
        self.endpoints
            .remove(addr)
            .ok_or(NetError::UnknownEndpoint(*addr))?;
        let ids: Vec<StreamId> = self
            .streams
            .iter()
            .filter(|(_, s)| !s.reset && s.side(addr).is_some())
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            self.reset_stream(id);
        }
        Ok(())
    }

    pub fn transport(&mut self, addr: EndpointAddr) -> SimPort<'_> {
        SimPort { net: self, addr }
    }

    fn schedule(&mut self, at: SimTime, p: Pending) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at, seq), p);
    }

    fn sample_delay(&mut self) -> SimTime {
        self.rng
            .gen_range(self.policy.delay_min..=self.policy.delay_max)
    }

    fn delivery_time(&mut self, src: EndpointAddr, dst: EndpointAddr, delay: SimTime) -> SimTime {
        let mut at = self.now + delay;
        if !self.policy.reorder {
            let last = self.link_last.entry((src, dst)).or_insert(0);
            at = at.max(*last);
            *last = at;
        }
        at
    }

    pub fn send(
        &mut self,
        from: &Endpoint,
        dst: EndpointAddr,
        payload: &[u8],
    ) -> Result<(), NetError> {
        self.send_from(from.addr, dst, payload)
    }

    fn send_from(
        &mut self,
        src: EndpointAddr,
        dst: EndpointAddr,
        payload: &[u8],
    ) -> Result<(), NetError> {
        if !self.endpoints.contains_key(&src) {
            return Err(NetError::UnknownEndpoint(src));
        }
        if payload.len() > MAX_DATAGRAM {
            return Err(NetError::Oversize(payload.len()));
        }
        let st = self.stats.entry(src).or_default();
        st.datagrams_sent += 1;
        st.datagram_bytes += payload.len() as u64;
        if src != dst {
            st.remote_datagrams += 1;
        }
        if !self.policy.connected(&src, &dst) {
            return Ok(());
        }
        let lost = self.rng.gen::<f64>() < self.policy.loss_prob;
        if lost {
            return Ok(());
        }
        let delay = self.sample_delay();
        let dg = Datagram {
            src,
            dst,
            payload: payload.to_vec(),
            send_time: self.now,
        };
        let at = self.delivery_time(src, dst, delay);
        if self.policy.duplicate_prob > 0.0 && self.rng.gen::<f64>() < self.policy.duplicate_prob {
            let d2 = self.sample_delay();
            let at2 = self.delivery_time(src, dst, d2);
            self.schedule(at2, Pending::Datagram(dg.clone()));
        }
        self.schedule(at, Pending::Datagram(dg));
        Ok(())
    }

    /// Pops one datagram from the endpoint's inbox (filled by [`run_until`]).
    ///
    /// [`run_until`]: Network::run_until
    pub fn recv(&mut self, ep: &Endpoint) -> Option<Datagram> {
        self.endpoints.get_mut(&ep.addr)?.inbox.pop_front()
    }

    pub fn recv_stream(&mut self, ep: &Endpoint) -> Option<StreamEvent> {
        self.endpoints.get_mut(&ep.addr)?.stream_inbox.pop_front()
    }

    pub fn recv_timer(&mut self, ep: &Endpoint) -> Option<u64> {
        self.endpoints.get_mut(&ep.addr)?.timers.pop_front()
    }

    pub fn set_timer(&mut self, addr: EndpointAddr, at: SimTime, token: u64) {
        let at = at.max(self.now);
        self.schedule(at, Pending::Timer { addr, token });
    }

    pub fn open_stream(
        &mut self,
        from: EndpointAddr,
        to: EndpointAddr,
    ) -> Result<StreamId, NetError> {
        if !self.endpoints.contains_key(&from) {
            return Err(NetError::UnknownEndpoint(from));
        }
        let id = StreamId(self.next_stream);
        self.next_stream += 1;
        self.stats.entry(from).or_default().streams_opened += 1;
        let delay = self.sample_delay();
        let at = self.now + delay;
        self.streams.insert(
            id,
            StreamState {
                ends: [from, to],
                last_at: [at, at],
                reset: false,
                closing: [false, false],
            },
        );
        if self.policy.connected(&from, &to) {
            self.schedule(at, Pending::StreamOpen { id, to });
        } else {
            self.reset_stream_at(id, at);
        }
        Ok(id)
    }

    pub fn stream_send(
        &mut self,
        from: EndpointAddr,
        id: StreamId,
        frame: Vec<u8>,
    ) -> Result<(), NetError> {
        let (side, to) = match self.streams.get(&id) {
            Some(s) if !s.reset => match s.side(&from) {
                Some(side) if !s.closing[side] => (side, s.ends[1 - side]),
                _ => return Err(NetError::StreamClosed(id)),
            },
            _ => return Err(NetError::StreamClosed(id)),
        };
        let st = self.stats.entry(from).or_default();
        st.stream_frames += 1;
        st.stream_bytes += frame.len() as u64;
        if from != to {
            st.remote_stream_frames += 1;
        }
        if !self.policy.connected(&from, &to) {
            self.reset_stream(id);
            return Ok(());
        }
        let delay = self.sample_delay();
        let s = self.streams.get_mut(&id).expect("checked above");
        let at = (self.now + delay).max(s.last_at[side]);
        s.last_at[side] = at;
        self.schedule(at, Pending::StreamData { id, to, frame });
        Ok(())
    }

    /// Graceful close from one side; the peer sees `Closed` after any data
    /// already sent.
    pub fn close_stream(&mut self, from: EndpointAddr, id: StreamId) {
        let Some(s) = self.streams.get_mut(&id) else {
            return;
        };
        let Some(side) = s.side(&from) else { return };
        if s.reset || s.closing[side] {
            return;
        }
        s.closing[side] = true;
        let to = s.ends[1 - side];
        let at = s.last_at[side].max(self.now);
        self.schedule(
            at,
            Pending::StreamClose {
                id,
                to,
                reset: false,
            },
        );
    }

    /// Kills a stream abruptly: both ends see a reset and in-flight frames
    /// are lost.
    pub fn reset_stream(&mut self, id: StreamId) {
        let at = self.now;
        self.reset_stream_at(id, at);
    }

    fn reset_stream_at(&mut self, id: StreamId, at: SimTime) {
        let Some(s) = self.streams.get_mut(&id) else {
            return;
        };
        if s.reset {
            return;
        }
        s.reset = true;
        let ends = s.ends;
        for to in ends {
            self.schedule(
                at,
                Pending::StreamClose {
                    id,
                    to,
                    reset: true,
                },
            );
        }
    }

    pub fn stream_alive(&self, id: StreamId) -> bool {
        self.streams.get(&id).is_some_and(|s| s.alive())
    }

    pub fn streams_between(&self, a: &EndpointAddr, b: &EndpointAddr) -> Vec<StreamId> {
        self.streams
            .iter()
            .filter(|(_, s)| s.alive() && s.side(a).is_some() && s.side(b).is_some())
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn apply_fault(&mut self, fault: Fault) -> Result<(), NetError> {
        match fault {
            Fault::Partition(groups) => {
                check_disjoint(&groups)?;
                self.policy.partition = groups;
            }
            Fault::Heal => self.policy.partition.clear(),
            Fault::SetLoss(p) => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(NetError::InvalidPolicy("loss_prob"));
                }
                self.policy.loss_prob = p;
            }
        }
        Ok(())
    }

    fn deliverable(&mut self, p: Pending) -> Option<SimEvent> {
        match p {
            Pending::Datagram(dg) => {
                let ep = self.endpoints.get(&dg.dst)?;
                if ep.attached_at > dg.send_time {
                    return None;
                }
                self.stats.entry(dg.dst).or_default().datagrams_delivered += 1;
                Some(SimEvent::Datagram(dg))
            }
            Pending::Timer { addr, token } => {
                self.endpoints.get(&addr)?;
                Some(SimEvent::Timer { addr, token })
            }
            Pending::StreamOpen { id, to } => {
                if self.streams.get(&id).is_none_or(|s| s.reset) {
                    return None;
                }
                if !self.endpoints.contains_key(&to) {
                    self.reset_stream(id);
                    return None;
                }
                let peer = self.streams[&id].ends[0];
                Some(SimEvent::Stream {
                    to,
                    event: StreamEvent::Opened { id, peer },
                })
            }
            Pending::StreamData { id, to, frame } => {
                if self.streams.get(&id).is_none_or(|s| s.reset) {
                    return None;
                }
                self.endpoints.get(&to)?;
                Some(SimEvent::Stream {
                    to,
                    event: StreamEvent::Data { id, frame },
                })
            }
            Pending::StreamClose { id, to, reset } => {
                self.endpoints.get(&to)?;
                Some(SimEvent::Stream {
                    to,
                    event: StreamEvent::Closed { id, reset },
                })
            }
        }
    }

    fn log(&mut self, ev: &SimEvent) {
        self.event_count += 1;
        let h = &mut self.hasher;
        h.update(self.now.to_be_bytes());
        match ev {
            SimEvent::Datagram(dg) => {
                h.update([1u8]);
                h.update(dg.src.to_bytes());
                h.update(dg.dst.to_bytes());
                h.update((dg.payload.len() as u64).to_be_bytes());
                h.update(&dg.payload);
            }
            SimEvent::Timer { addr, token } => {
                h.update([2u8]);
                h.update(addr.to_bytes());
                h.update(token.to_be_bytes());
            }
            SimEvent::Stream { to, event } => {
                h.update([3u8]);
                h.update(to.to_bytes());
                h.update(event.id().0.to_be_bytes());
                match event {
                    StreamEvent::Opened { peer, .. } => {
                        h.update([0u8]);
                        h.update(peer.to_bytes());
                    }
                    StreamEvent::Data { frame, .. } => {
                        h.update([1u8]);
                        h.update((frame.len() as u64).to_be_bytes());
                        h.update(frame);
                    }
                    StreamEvent::Closed { reset, .. } => h.update([2u8, *reset as u8]),
                }
            }
        }
    }

    /// Advances to and returns the next deliverable event at or before
    /// `limit`, or `None` when nothing is left in that window.
    pub fn next_event(&mut self, limit: SimTime) -> Option<SimEvent> {
        loop {
            let (&(at, seq), _) = self.queue.first_key_value()?;
            if at > limit {
                return None;
            }
            let pending = self.queue.remove(&(at, seq)).expect("key just seen");
            self.now = at;
            if let Some(ev) = self.deliverable(pending) {
                self.log(&ev);
                return Some(ev);
            }
        }
    }

    /// Time of the next queued event, deliverable or not.
    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.first_key_value().map(|(k, _)| k.0)
    }

    /// Moves the clock forward without processing anything.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Drains events into endpoint inboxes.
    pub fn run_until(&mut self, limit: RunLimit) -> TraceDigest {
        let max = match limit {
            RunLimit::At(t) | RunLimit::Quiescence { max: t } => t,
        };
        while let Some(ev) = self.next_event(max) {
            match ev {
                SimEvent::Datagram(dg) => {
                    if let Some(ep) = self.endpoints.get_mut(&dg.dst) {
                        ep.inbox.push_back(dg);
                    }
                }
                SimEvent::Stream { to, event } => {
                    if let Some(ep) = self.endpoints.get_mut(&to) {
                        ep.stream_inbox.push_back(event);
                    }
                }
                SimEvent::Timer { addr, token } => {
                    if let Some(ep) = self.endpoints.get_mut(&addr) {
                        ep.timers.push_back(token);
                    }
                }
            }
        }
        if let RunLimit::At(t) = limit {
            self.advance_to(t);
        }
        self.digest()
    }

    pub fn digest(&self) -> TraceDigest {
        TraceDigest {
            event_count: self.event_count,
            final_time: self.now,
            hash: self.hasher.clone().finalize().into(),
        }
    }
}

/// [`Transport`] view of one endpoint on a [`Network`].
pub struct SimPort<'a> {
    net: &'a mut Network,
    addr: EndpointAddr,
}

impl Transport for SimPort<'_> {
    fn local_addr(&self) -> EndpointAddr {
        self.addr
    }

    fn now(&self) -> SimTime {
        self.net.now
    }

    fn send_datagram(&mut self, dst: EndpointAddr, payload: &[u8]) -> Result<(), NetError> {
        self.net.send_from(self.addr, dst, payload)
    }

    fn open_stream(&mut self, dst: EndpointAddr) -> Result<StreamId, NetError> {
        self.net.open_stream(self.addr, dst)
    }

    fn stream_send(&mut self, id: StreamId, frame: Vec<u8>) -> Result<(), NetError> {
        self.net.stream_send(self.addr, id, frame)
    }

    fn close_stream(&mut self, id: StreamId) {
        self.net.close_stream(self.addr, id)
    }
}
