use std::collections::{BTreeMap, BTreeSet};

use adhoc::group::{Ctx, GroupConfig, GroupEngine, GroupEvent};
use adhoc::identity::{new_identity, CertBook, Identity, TrustMode, TrustStore};
use adhoc::membership::{GroupId, ProcessId, View, ViewId};
use adhoc::ordcast::{Mode, SeqMsg};
use netsim::{EndpointAddr, Fault, LinkPolicy, Network, RunLimit};
use rand::SeedableRng;

struct Host {
    identity: Identity,
    trust: TrustStore,
    certs: CertBook,
    engine: GroupEngine,
    addr: EndpointAddr,
    ep: netsim::Endpoint,
    log: Vec<(u64, GroupEvent)>,
    up: bool,
}

struct Sim {
    net: Network,
    hosts: Vec<Host>,
}

impl Sim {
    fn new(seed: u64, n: usize, policy: LinkPolicy) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut net = Network::new(seed, policy).unwrap();
        let hosts = (0..n)
            .map(|i| {
                let addr = EndpointAddr::sim(i as u64 + 1, 7000);
                let ep = net.attach(addr).unwrap();
                let identity = new_identity(&format!("cn=p{i}"), 0, &mut rng).unwrap();
                let me = ProcessId::new(identity.fingerprint(), addr);
                Host {
                    engine: GroupEngine::new(
                        GroupConfig::default(),
                        GroupId::new("g").unwrap(),
                        me,
                    ),
                    identity,
                    trust: TrustStore::new(TrustMode::Incremental),
                    certs: CertBook::default(),
                    addr,
                    ep,
                    log: Vec::new(),
                    up: true,
                }
            })
            .collect();
        Self { net, hosts }
    }

    fn with<R>(&mut self, i: usize, f: impl FnOnce(&mut GroupEngine, &mut Ctx<'_>) -> R) -> R {
        let h = &mut self.hosts[i];
        let mut port = self.net.transport(h.addr);
        let mut ctx = Ctx {
            io: &mut port,
            identity: &h.identity,
            trust: &mut h.trust,
            certs: &mut h.certs,
        };
        let r = f(&mut h.engine, &mut ctx);
        let now = self.net.now();
        h.log
            .extend(h.engine.drain_events().into_iter().map(|e| (now, e)));
        r
    }

    fn run_to(&mut self, until: u64) {
        while self.net.now() < until {
            let t = (self.net.now() + 10).min(until);
            self.net.run_until(RunLimit::At(t));
            for i in 0..self.hosts.len() {
                let ep = self.hosts[i].ep;
                while let Some(dg) = self.net.recv(&ep) {
                    if self.hosts[i].up {
                        self.with(i, |e, ctx| e.handle_frame(ctx, dg.src, &dg.payload));
                    }
                }
                if self.hosts[i].up {
                    self.with(i, |e, ctx| e.tick(ctx));
                }
            }
        }
    }

    fn view(&self, i: usize) -> Option<&View> {
        self.hosts[i].engine.view()
    }

    fn members(&self, i: usize) -> BTreeSet<usize> {
        let v = self.view(i).expect("has a view");
        v.members()
            .iter()
            .map(|m| self.hosts.iter().position(|h| h.addr == m.addr).unwrap())
            .collect()
    }

    fn crash(&mut self, i: usize) {
        self.hosts[i].up = false;
        self.net.detach(&self.hosts[i].addr).unwrap();
    }
}

fn set(xs: &[usize]) -> BTreeSet<usize> {
    xs.iter().copied().collect()
}

fn form(seed: u64, n: usize, policy: LinkPolicy) -> Sim {
    let mut sim = Sim::new(seed, n, policy);
    sim.with(0, |e, ctx| e.join(ctx, None)).unwrap();
    let contact = sim.hosts[0].addr;
    for i in 1..n {
        sim.with(i, |e, ctx| e.join(ctx, Some(contact))).unwrap();
    }
    sim.run_to(6_000);
    sim
}

#[test]
fn singleton_then_joins_converge() {
    let sim = form(1, 4, LinkPolicy::lossless(1, 10));
    let all = set(&[0, 1, 2, 3]);
    for i in 0..4 {
        assert_eq!(sim.members(i), all, "host {i}");
        assert_eq!(sim.view(i).unwrap().id, sim.view(0).unwrap().id);
    }
}

#[test]
fn join_to_dead_contact_falls_back_to_singleton() {
    let mut sim = Sim::new(2, 1, LinkPolicy::lossless(1, 10));
    let nowhere = EndpointAddr::sim(99, 1);
    sim.with(0, |e, ctx| e.join(ctx, Some(nowhere))).unwrap();
    sim.run_to(5_000);
    assert!(sim.hosts[0]
        .log
        .iter()
        .any(|(_, e)| matches!(e, GroupEvent::JoinFailed { .. })));
    assert_eq!(sim.members(0), set(&[0]));
}

#[test]
fn leave_and_crash_are_excluded() {
    let mut sim = form(3, 5, LinkPolicy::lossless(1, 10));
    sim.with(4, |e, ctx| e.leave(ctx)).unwrap();
    sim.run_to(8_000);
    for i in 0..4 {
        assert_eq!(sim.members(i), set(&[0, 1, 2, 3]));
    }
    sim.crash(0);
    sim.run_to(14_000);
    for i in 1..4 {
        assert_eq!(sim.members(i), set(&[1, 2, 3]), "host {i}");
    }
}

#[test]
fn partition_then_merge() {
    let mut sim = form(4, 5, LinkPolicy::lossless(1, 10));
    let addrs: Vec<_> = sim.hosts.iter().map(|h| h.addr).collect();
    let a: BTreeSet<_> = addrs[..3].iter().copied().collect();
    let b: BTreeSet<_> = addrs[3..].iter().copied().collect();
    sim.net.apply_fault(Fault::Partition(vec![a, b])).unwrap();
    sim.run_to(14_000);
    for i in 0..3 {
        assert_eq!(sim.members(i), set(&[0, 1, 2]));
    }
    for i in 3..5 {
        assert_eq!(sim.members(i), set(&[3, 4]));
    }
    sim.net.apply_fault(Fault::Heal).unwrap();
    sim.run_to(24_000);
    let id = sim.view(0).unwrap().id;
    for i in 0..5 {
        assert_eq!(sim.members(i), set(&[0, 1, 2, 3, 4]), "host {i}");
        assert_eq!(sim.view(i).unwrap().id, id);
    }
}

/// Per host: the views installed in order, each with its deliveries.
fn history(log: &[(u64, GroupEvent)]) -> Vec<(ViewId, Vec<SeqMsg>)> {
    let mut out: Vec<(ViewId, Vec<SeqMsg>)> = Vec::new();
    for (_, ev) in log {
        match ev {
            GroupEvent::Installed(v) => out.push((v.id, Vec::new())),
            GroupEvent::Delivered(m) => {
                let last = out.last_mut().expect("delivery before any view");
                assert_eq!(last.0, m.view_id, "delivered outside its view");
                last.1.push(m.clone());
            }
            _ => {}
        }
    }
    out
}

type MsgKey = (ViewId, ProcessId, u64);

fn key(m: &SeqMsg) -> MsgKey {
    (m.view_id, m.sender, m.sender_seq)
}

#[test]
fn lossy_total_order_and_virtual_synchrony() {
    for seed in 0..6 {
        let mut sim = form(10 + seed, 5, LinkPolicy::lossless(1, 20).with_loss(0.1));
        for round in 0..40u64 {
            for s in 0..3 {
                let payload = format!("{s}:{round}").into_bytes();
                let _ = sim.with(s, |e, ctx| e.multicast(ctx, payload, Mode::Agreed));
            }
            let t = sim.net.now() + 25;
            sim.run_to(t);
            if round == 20 {
                sim.crash(4);
            }
        }
        sim.run_to(sim.net.now() + 10_000);

        let histories: Vec<_> = sim.hosts[..4].iter().map(|h| history(&h.log)).collect();
        check_histories(seed, &histories);
        // Survivors end together and delivered every surviving sender's messages.
        let final_id = sim.view(0).unwrap().id;
        for i in 0..4 {
            assert_eq!(sim.members(i), set(&[0, 1, 2, 3]), "seed {seed}");
            assert_eq!(sim.view(i).unwrap().id, final_id);
            let total: usize = histories[i].iter().map(|(_, ms)| ms.len()).sum();
            assert!(total >= 120, "seed {seed} host {i} delivered {total}");
        }
    }
}

fn check_histories(seed: u64, histories: &[Vec<(ViewId, Vec<SeqMsg>)>]) {
    for (i, h) in histories.iter().enumerate() {
        let mut seen = BTreeSet::new();
        let mut last: BTreeMap<(ViewId, ProcessId), u64> = BTreeMap::new();
        for (_, msgs) in h {
            for m in msgs {
                assert!(seen.insert(key(m)), "seed {seed} host {i} duplicate");
                let prev = last
                    .insert((m.view_id, m.sender), m.sender_seq)
                    .unwrap_or(0);
                assert_eq!(m.sender_seq, prev + 1, "seed {seed} host {i} fifo gap");
            }
        }
    }
    // Agreed messages keep the same relative order at any two hosts.
    let pos: Vec<BTreeMap<MsgKey, usize>> = histories
        .iter()
        .map(|h| {
            h.iter()
                .flat_map(|(_, ms)| ms.iter().filter(|m| m.mode == Mode::Agreed).map(key))
                .enumerate()
                .map(|(i, k)| (k, i))
                .collect()
        })
        .collect();
    for a in 0..histories.len() {
        for b in a + 1..histories.len() {
            let common: Vec<_> = pos[a].keys().filter(|k| pos[b].contains_key(k)).collect();
            for x in &common {
                for y in &common {
                    assert_eq!(
                        pos[a][x] < pos[a][y],
                        pos[b][x] < pos[b][y],
                        "seed {seed} order {a}/{b}"
                    );
                }
            }
        }
    }
    // Hosts that move between the same two views deliver the same set in the first.
    let mut transitions: BTreeMap<(ViewId, ViewId), BTreeSet<MsgKey>> = BTreeMap::new();
    for (i, h) in histories.iter().enumerate() {
        for w in h.windows(2) {
            let delivered: BTreeSet<_> = w[0].1.iter().map(key).collect();
            if let Some(prev) = transitions.insert((w[0].0, w[1].0), delivered.clone()) {
                assert_eq!(prev, delivered, "seed {seed} host {i} virtual synchrony");
            }
        }
    }
}

#[test]
fn partition_during_traffic_keeps_virtual_synchrony() {
    for seed in 0..4 {
        let mut sim = form(50 + seed, 5, LinkPolicy::lossless(1, 20).with_loss(0.05));
        let addrs: Vec<_> = sim.hosts.iter().map(|h| h.addr).collect();
        for round in 0..120u64 {
            for s in [0, 2, 4] {
                let payload = format!("{s}:{round}").into_bytes();
                let mode = if round % 3 == 0 {
                    Mode::ReliableFifo
                } else {
                    Mode::Agreed
                };
                let _ = sim.with(s, |e, ctx| e.multicast(ctx, payload, mode));
            }
            let t = sim.net.now() + 50;
            sim.run_to(t);
            if round == 30 {
                let a: BTreeSet<_> = addrs[..2].iter().copied().collect();
                let b: BTreeSet<_> = addrs[2..].iter().copied().collect();
                sim.net.apply_fault(Fault::Partition(vec![a, b])).unwrap();
            }
            if round == 80 {
                sim.net.apply_fault(Fault::Heal).unwrap();
            }
        }
        sim.run_to(sim.net.now() + 10_000);
        let histories: Vec<_> = sim.hosts.iter().map(|h| history(&h.log)).collect();
        check_histories(seed, &histories);
        let id = sim.view(0).unwrap().id;
        for i in 0..5 {
            assert_eq!(
                sim.members(i),
                set(&[0, 1, 2, 3, 4]),
                "seed {seed} host {i}"
            );
            assert_eq!(sim.view(i).unwrap().id, id);
        }
    }
}

/// Self-inclusion, per-host epoch monotonicity and cross-host view agreement
/// over every view any host installed.
fn check_views(sim: &Sim) -> Result<(), String> {
    let mut by_id: BTreeMap<ViewId, Vec<ProcessId>> = BTreeMap::new();
    for (i, h) in sim.hosts.iter().enumerate() {
        let me = h.engine.me();
        let mut last_epoch = None;
        for (_, ev) in &h.log {
            let GroupEvent::Installed(v) = ev else {
                continue;
            };
            if !v.contains(me) {
                return Err(format!("host {i} installed {v:?} without itself"));
            }
            if last_epoch.is_some_and(|e| v.id.epoch <= e) {
                return Err(format!(
                    "host {i} epoch went from {last_epoch:?} to {}",
                    v.id.epoch
                ));
            }
            last_epoch = Some(v.id.epoch);
            let members = v.members().to_vec();
            if let Some(prev) = by_id.insert(v.id, members.clone()) {
                if prev != members {
                    return Err(format!("view {:?} installed with two member lists", v.id));
                }
            }
        }
    }
    Ok(())
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

        #[test]
        fn views_stay_consistent_across_random_partitions(
            seed in 0u64..10_000,
            n in 3usize..=5,
            sides in proptest::collection::vec(any::<bool>(), 5),
            lossy in any::<bool>(),
            split_ms in 2_000u64..8_000,
        ) {
            let loss = if lossy { 0.05 } else { 0.0 };
            let mut sim = form(seed, n, LinkPolicy::lossless(1, 20).with_loss(loss));
            let addrs: Vec<_> = sim.hosts.iter().map(|h| h.addr).collect();
            let (a, b): (BTreeSet<_>, BTreeSet<_>) = {
                let mut a = BTreeSet::new();
                let mut b = BTreeSet::new();
                for (i, addr) in addrs.iter().enumerate() {
                    if sides[i] { a.insert(*addr); } else { b.insert(*addr); }
                }
                (a, b)
            };
            if !a.is_empty() && !b.is_empty() {
                sim.net.apply_fault(Fault::Partition(vec![a, b])).unwrap();
            }
            let t = sim.net.now() + split_ms;
            sim.run_to(t);
            sim.net.apply_fault(Fault::Heal).unwrap();
            let t = sim.net.now() + 20_000;
            sim.run_to(t);

            prop_assert_eq!(check_views(&sim), Ok(()));
            // Quiescent after healing: everyone shares one full view.
            let all: BTreeSet<usize> = (0..n).collect();
            let id = sim.view(0).map(|v| v.id);
            for i in 0..n {
                prop_assert_eq!(sim.members(i), all.clone(), "host {}", i);
                prop_assert_eq!(sim.view(i).map(|v| v.id), id, "host {}", i);
            }
        }

        #[test]
        fn timely_members_are_never_suspected(seed in 0u64..10_000, n in 2usize..=6, delay_max in 1u64..100) {
            let mut sim = form(seed, n, LinkPolicy::lossless(1, delay_max));
            let t = sim.net.now() + 15_000;
            sim.run_to(t);
            prop_assert_eq!(check_views(&sim), Ok(()));
            for (i, h) in sim.hosts.iter().enumerate() {
                let suspected = h.log.iter().filter(|(_, e)| matches!(e, GroupEvent::Suspected(_))).count();
                prop_assert_eq!(suspected, 0, "host {} suspected a timely peer", i);
                prop_assert_eq!(h.engine.view().map(|v| v.len()), Some(n));
            }
        }
    }
}
