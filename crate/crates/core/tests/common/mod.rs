#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use adhoc::group::{Ctx, GroupConfig, GroupEngine};
use adhoc::identity::{new_identity, CertBook, Identity, TrustMode, TrustStore};
use adhoc::membership::{GroupId, ProcessId};
use adhoc::secure::{SecureEvent, SecureGroup};
use adhoc::sgl::GroupAlgebra;
use netsim::{EndpointAddr, LinkPolicy, NetError, Network, RunLimit, SimTime, StreamId, Transport};
use rand::SeedableRng;

/// Transport that records every datagram it sends.
pub struct Recording<'a, T: Transport> {
    pub inner: T,
    pub sent: &'a mut Vec<(EndpointAddr, Vec<u8>)>,
}

impl<T: Transport> Transport for Recording<'_, T> {
    fn local_addr(&self) -> EndpointAddr {
        self.inner.local_addr()
    }
    fn now(&self) -> SimTime {
        self.inner.now()
    }
    fn send_datagram(&mut self, dst: EndpointAddr, payload: &[u8]) -> Result<(), NetError> {
        self.sent.push((dst, payload.to_vec()));
        self.inner.send_datagram(dst, payload)
    }
    fn open_stream(&mut self, dst: EndpointAddr) -> Result<StreamId, NetError> {
        self.inner.open_stream(dst)
    }
    fn stream_send(&mut self, id: StreamId, frame: Vec<u8>) -> Result<(), NetError> {
        self.inner.stream_send(id, frame)
    }
    fn close_stream(&mut self, id: StreamId) {
        self.inner.close_stream(id)
    }
}

pub struct Host {
    pub identity: Identity,
    pub trust: TrustStore,
    pub certs: CertBook,
    pub group: SecureGroup,
    pub addr: EndpointAddr,
    pub ep: netsim::Endpoint,
    pub log: Vec<(SimTime, SecureEvent)>,
    pub sent: Vec<(EndpointAddr, Vec<u8>)>,
    pub up: bool,
}

impl Host {
    pub fn pid(&self) -> ProcessId {
        ProcessId::new(self.identity.fingerprint(), self.addr)
    }

    pub fn messages(&self) -> Vec<&adhoc::secure::AppMessage> {
        self.log
            .iter()
            .filter_map(|(_, e)| match e {
                SecureEvent::Message(m) => Some(m),
                _ => None,
            })
            .collect()
    }
}

pub struct SecureSim {
    pub net: Network,
    pub hosts: Vec<Host>,
}

impl SecureSim {
    pub fn new(seed: u64, n: usize, policy: LinkPolicy, algebra: Arc<dyn GroupAlgebra>) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let mut net = Network::new(seed, policy).unwrap();
        let hosts = (0..n)
            .map(|i| {
                let addr = EndpointAddr::sim(i as u64 + 1, 7000);
                let ep = net.attach(addr).unwrap();
                let identity = new_identity(&format!("cn=p{i}"), 0, &mut rng).unwrap();
                let me = ProcessId::new(identity.fingerprint(), addr);
                let engine =
                    GroupEngine::new(GroupConfig::default(), GroupId::new("sec").unwrap(), me);
                Host {
                    group: SecureGroup::new(
                        engine,
                        algebra.clone(),
                        seed.wrapping_mul(31) + i as u64,
                    ),
                    identity,
                    trust: TrustStore::new(TrustMode::Incremental),
                    certs: CertBook::default(),
                    addr,
                    ep,
                    log: Vec::new(),
                    sent: Vec::new(),
                    up: true,
                }
            })
            .collect();
        Self { net, hosts }
    }

    pub fn with<R>(&mut self, i: usize, f: impl FnOnce(&mut SecureGroup, &mut Ctx<'_>) -> R) -> R {
        let h = &mut self.hosts[i];
        let port = self.net.transport(h.addr);
        let mut rec = Recording {
            inner: port,
            sent: &mut h.sent,
        };
        let mut ctx = Ctx {
            io: &mut rec,
            identity: &h.identity,
            trust: &mut h.trust,
            certs: &mut h.certs,
        };
        let r = f(&mut h.group, &mut ctx);
        let now = self.net.now();
        h.log
            .extend(h.group.drain_events().into_iter().map(|e| (now, e)));
        r
    }

    pub fn run_to(&mut self, until: SimTime) {
        while self.net.now() < until {
            let t = (self.net.now() + 10).min(until);
            self.net.run_until(RunLimit::At(t));
            for i in 0..self.hosts.len() {
                let ep = self.hosts[i].ep;
                while let Some(dg) = self.net.recv(&ep) {
                    if self.hosts[i].up {
                        self.with(i, |g, ctx| g.handle_frame(ctx, dg.src, &dg.payload));
                    }
                }
                if self.hosts[i].up {
                    self.with(i, |g, ctx| g.tick(ctx));
                }
            }
        }
    }

    pub fn form(&mut self, members: &[usize]) {
        let contact = self.hosts[members[0]].addr;
        self.with(members[0], |g, ctx| g.join(ctx, None)).unwrap();
        for &i in &members[1..] {
            self.with(i, |g, ctx| g.join(ctx, Some(contact))).unwrap();
        }
        let t = self.net.now() + 6_000;
        self.run_to(t);
    }

    pub fn members(&self, i: usize) -> BTreeSet<usize> {
        let v = self.hosts[i].group.view().expect("has a view");
        v.members()
            .iter()
            .map(|m| self.hosts.iter().position(|h| h.addr == m.addr).unwrap())
            .collect()
    }

    pub fn crash(&mut self, i: usize) {
        self.hosts[i].up = false;
        self.net.detach(&self.hosts[i].addr).unwrap();
    }
}
