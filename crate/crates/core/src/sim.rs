//! Simulated clusters of full nodes over one [`Network`].
//!
//! Every peer keeps its identity and durable stores under its own data
//! directory, so a crashed peer restarts as the same process with the
//! same notes and shares.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use netsim::scenario::{Scenario, ScenarioError};
use netsim::{
    Endpoint, EndpointAddr, LinkPolicy, NetError, Network, RunLimit, SimTime, TraceDigest,
    Transport,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::identity::{new_identity, Fingerprint, Identity, IdentityError, TrustMode, TrustStore};
use crate::node::{Authz, Node, NodeConfig, NodeError};
use crate::presence::Visibility;
use crate::sgl::{GroupAlgebra, ModPGroup};

/// Simulation step: the network runs this long between node ticks.
pub const STEP_MS: SimTime = 10;

const PEER_PORT: u16 = 7000;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Setup(String),
}

pub struct SimPeer {
    pub addr: EndpointAddr,
    pub data_dir: PathBuf,
    pub node: Option<Node>,
    ep: Option<Endpoint>,
    fingerprint: Fingerprint,
}

impl SimPeer {
    pub fn is_up(&self) -> bool {
        self.node.is_some()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }
}

pub struct SimCluster {
    pub net: Network,
    pub peers: Vec<SimPeer>,
    template: NodeConfig,
    algebra: Arc<dyn GroupAlgebra>,
    seed: u64,
    starts: u64,
}

impl SimCluster {
    /// Creates `n` peers with fresh identities under `root`. No peer is
    /// started yet.
    pub fn new(
        seed: u64,
        policy: LinkPolicy,
        root: &Path,
        n: usize,
        template: NodeConfig,
    ) -> Result<Self, SimError> {
        Self::with_algebra(
            seed,
            policy,
            root,
            n,
            template,
            Arc::new(ModPGroup::modp2048()),
        )
    }

    pub fn with_algebra(
        seed: u64,
        policy: LinkPolicy,
        root: &Path,
        n: usize,
        template: NodeConfig,
        algebra: Arc<dyn GroupAlgebra>,
    ) -> Result<Self, SimError> {
        let net = Network::new(seed, policy)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x005e_ed1d);
        let mut peers = Vec::with_capacity(n);
        for i in 0..n {
            let data_dir = root.join(format!("peer{i}"));
            std::fs::create_dir_all(&data_dir)?;
            let identity = new_identity(&format!("cn=peer{i}"), 0, &mut rng)?;
            identity.save(&data_dir.join("identity.json"))?;
            peers.push(SimPeer {
                addr: EndpointAddr::sim(i as u64 + 1, PEER_PORT),
                data_dir,
                node: None,
                ep: None,
                fingerprint: identity.fingerprint(),
            });
        }
        Ok(Self {
            net,
            peers,
            template,
            algebra,
            seed,
            starts: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    pub fn now(&self) -> SimTime {
        self.net.now()
    }

    pub fn addr(&self, i: usize) -> EndpointAddr {
        self.peers[i].addr
    }

    pub fn fingerprint(&self, i: usize) -> Fingerprint {
        self.peers[i].fingerprint
    }

    pub fn index_of(&self, fp: &Fingerprint) -> Option<usize> {
        self.peers.iter().position(|p| p.fingerprint == *fp)
    }

    pub fn node(&self, i: usize) -> &Node {
        self.peers[i].node.as_ref().expect("peer is up")
    }

    /// Loads the peer's identity from disk, attaches it and joins the
    /// lobby through `bootstrap`.
    pub fn start(&mut self, i: usize, bootstrap: &[usize]) -> Result<(), SimError> {
        if self.peers[i].is_up() {
            return Err(SimError::Setup(format!("peer {i} already running")));
        }
        let identity = Identity::load(&self.peers[i].data_dir.join("identity.json"))?;
        let authz = Authz::permissive(&identity);
        let mut cfg = self.template.clone();
        cfg.display_name = format!("peer{i}");
        cfg.bootstrap = bootstrap.iter().map(|&b| self.peers[b].addr).collect();
        cfg.data_dir = Some(self.peers[i].data_dir.clone());
        self.starts += 1;
        let seed = self
            .seed
            .wrapping_mul(0x9e37_79b9)
            .wrapping_add(self.starts * 1_000 + i as u64);
        let addr = self.peers[i].addr;
        let node = Node::with_algebra(
            identity,
            TrustStore::new(TrustMode::Incremental),
            authz,
            cfg,
            addr,
            seed,
            self.algebra.clone(),
        )?;
        let ep = self.net.attach(addr)?;
        self.peers[i].ep = Some(ep);
        self.peers[i].node = Some(node);
        self.with(i, |n, io| n.start(io));
        Ok(())
    }

    /// Starts every peer, each bootstrapping through peer 0.
    pub fn start_all(&mut self) -> Result<(), SimError> {
        for i in 0..self.peers.len() {
            let boot: &[usize] = if i == 0 { &[] } else { &[0] };
            self.start(i, boot)?;
        }
        Ok(())
    }

    /// Stops the peer abruptly; in-memory state is lost.
    pub fn crash(&mut self, i: usize) {
        if self.peers[i].node.take().is_some() {
            self.peers[i].ep = None;
            self.net
                .detach(&self.peers[i].addr)
                .expect("attached while up");
        }
    }

    /// Runs `f` against a live node with its transport.
    pub fn with<R>(&mut self, i: usize, f: impl FnOnce(&mut Node, &mut dyn Transport) -> R) -> R {
        let peer = &mut self.peers[i];
        let node = peer.node.as_mut().expect("peer is up");
        let mut port = self.net.transport(peer.addr);
        f(node, &mut port)
    }

    /// Advances the network one step and lets every live node react.
    pub fn step(&mut self) {
        self.step_by(STEP_MS);
    }

    /// Advances `ms` of simulated time, then lets every peer handle what
    /// arrived and tick once.
    pub fn step_by(&mut self, ms: SimTime) {
        let t = self.net.now() + ms.max(1);
        self.net.run_until(RunLimit::At(t));
        for i in 0..self.peers.len() {
            let Some(ep) = self.peers[i].ep else { continue };
            while let Some(ev) = self.net.recv_stream(&ep) {
                self.with(i, |n, io| n.handle_stream(io, ev));
            }
            while let Some(dg) = self.net.recv(&ep) {
                self.with(i, |n, io| n.handle_datagram(io, dg.src, &dg.payload));
            }
            self.with(i, |n, io| n.tick(io));
        }
    }

    pub fn run_for(&mut self, ms: SimTime) {
        let until = self.net.now() + ms;
        while self.net.now() < until {
            self.step();
        }
    }

    /// Steps until `done` holds or `max_ms` elapses; reports whether it held.
    pub fn run_until(
        &mut self,
        max_ms: SimTime,
        mut done: impl FnMut(&SimCluster) -> bool,
    ) -> bool {
        let until = self.net.now() + max_ms;
        loop {
            if done(self) {
                return true;
            }
            if self.net.now() >= until {
                return false;
            }
            self.step();
        }
    }

    /// True when every live peer's lobby view holds exactly the live peers.
    pub fn lobby_converged(&self) -> bool {
        let live: BTreeSet<EndpointAddr> = self
            .peers
            .iter()
            .filter(|p| p.is_up())
            .map(|p| p.addr)
            .collect();
        self.peers.iter().filter_map(|p| p.node.as_ref()).all(|n| {
            n.lobby().is_keyed()
                && n.lobby().view().is_some_and(|v| {
                    v.members().iter().map(|m| m.addr).collect::<BTreeSet<_>>() == live
                })
        })
    }

    /// True when every live peer lists every other live peer as online.
    pub fn rosters_converged(&self) -> bool {
        let live: Vec<Fingerprint> = self
            .peers
            .iter()
            .filter(|p| p.is_up())
            .map(|p| p.fingerprint)
            .collect();
        self.peers.iter().filter_map(|p| p.node.as_ref()).all(|n| {
            live.iter().all(|fp| {
                n.roster().iter().any(|u| {
                    u.fingerprint == *fp && u.availability != crate::presence::Availability::Offline
                })
            })
        })
    }

    pub fn digest(&self) -> TraceDigest {
        self.net.digest()
    }
}

/// Outcome of [`run_scenario`].
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub digest: TraceDigest,
    pub sent: usize,
    /// Chat transcript length per peer, in peer order.
    pub delivered: Vec<usize>,
    /// True when every pair of transcripts orders their common messages
    /// identically.
    pub consistent: bool,
}

/// Runs a scenario's workload on a cluster of full nodes.
///
/// Peer 0 creates a public venue and the others join it through the
/// lobby. Once every peer is in the venue the scenario clock starts:
/// fault times and the workload's `start_ms` are relative to that point.
/// Senders are peers `0..senders`, posting round-robin every `interval_ms`.
pub fn run_scenario(sc: &Scenario, root: &Path) -> Result<ScenarioReport, SimError> {
    let w = &sc.workload;
    if w.mode != "agreed" {
        return Err(SimError::Setup(format!(
            "workload mode `{}` is not supported; chat is always agreed",
            w.mode
        )));
    }
    if w.peers == 0 || w.senders > w.peers {
        return Err(SimError::Setup(
            "workload needs peers >= senders and at least one peer".into(),
        ));
    }
    let mut c = SimCluster::new(
        sc.seed,
        sc.policy.clone(),
        root,
        w.peers,
        NodeConfig::default(),
    )?;
    c.start_all()?;
    if !c.run_until(30_000, |c| c.lobby_converged()) {
        return Err(SimError::Setup("lobby did not converge".into()));
    }
    let vid = c
        .with(0, |n, io| {
            n.create_venue(io, "workload", Visibility::Public)
        })?
        .venue_id;
    let mut joined = vec![false; w.peers];
    joined[0] = true;
    let deadline = c.now() + 30_000;
    while joined.iter().any(|j| !*j) {
        if c.now() >= deadline {
            return Err(SimError::Setup("peers did not join the venue".into()));
        }
        c.step();
        for (i, j) in joined.iter_mut().enumerate() {
            if !*j && c.node(i).venues().iter().any(|v| v.venue_id == vid) {
                *j = c.with(i, |n, io| n.join_venue(io, &vid)).is_ok();
            }
        }
    }
    let full = |c: &SimCluster| {
        (0..c.len()).all(|i| {
            c.node(i)
                .venue_group(&vid)
                .is_some_and(|g| g.is_keyed() && g.view().is_some_and(|v| v.len() == c.len()))
        })
    };
    if !c.run_until(30_000, full) {
        return Err(SimError::Setup("venue did not converge".into()));
    }

    let origin = c.now();
    let peers: Vec<EndpointAddr> = c.peers.iter().map(|p| p.addr).collect();
    let mut faults: Vec<(SimTime, usize)> = sc
        .faults
        .iter()
        .enumerate()
        .map(|(i, f)| (f.at_ms, i))
        .collect();
    faults.sort();
    let mut next_fault = 0;
    let mut sent = 0;
    let end = origin
        + w.duration_ms
            .max(w.start_ms + w.interval_ms * w.messages as u64);
    while c.now() < end {
        let rel = c.now() - origin;
        while next_fault < faults.len() && faults[next_fault].0 <= rel {
            let f = sc.fault(faults[next_fault].1, &peers)?;
            c.net.apply_fault(f)?;
            next_fault += 1;
        }
        if sent < w.messages && w.senders > 0 && rel >= w.start_ms + sent as u64 * w.interval_ms {
            let s = sent % w.senders;
            let body = format!("m{sent}");
            // A sender cut off from its venue view may refuse; that is part
            // of what the scenario exercises.
            let _ = c.with(s, |n, io| n.post_message(io, &vid, &body));
            sent += 1;
        }
        c.step();
    }

    let transcripts: Vec<Vec<(Fingerprint, String)>> = (0..c.len())
        .map(|i| {
            c.node(i)
                .messages(&vid)
                .unwrap_or_default()
                .into_iter()
                .map(|m| (m.author, m.body))
                .collect()
        })
        .collect();
    let consistent = transcripts.iter().enumerate().all(|(i, a)| {
        transcripts[i + 1..]
            .iter()
            .all(|b| common_order_agrees(a, b))
    });
    Ok(ScenarioReport {
        digest: c.digest(),
        sent,
        delivered: transcripts.iter().map(Vec::len).collect(),
        consistent,
    })
}

/// True when the messages present in both sequences appear in the same
/// relative order in each.
pub fn common_order_agrees<T: Ord + Clone>(a: &[T], b: &[T]) -> bool {
    let in_b: std::collections::BTreeSet<&T> = b.iter().collect();
    let in_a: std::collections::BTreeSet<&T> = a.iter().collect();
    let fa: Vec<&T> = a.iter().filter(|x| in_b.contains(x)).collect();
    let fb: Vec<&T> = b.iter().filter(|x| in_a.contains(x)).collect();
    fa == fb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn common_order_ignores_missing_items() {
        assert!(common_order_agrees(&[1, 2, 3], &[1, 3]));
        assert!(common_order_agrees(&[1, 2], &[3, 4]));
        assert!(!common_order_agrees(&[1, 2, 3], &[3, 1]));
    }
}
