//! Property tests for identity, authorization, sealing and search, each
//! against a small independent model.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use adhoc::fileshare::{normalize_query, ShareEntry, ShareIndex};
use adhoc::identity::{
    authorize, glob_match, new_identity, CertError, Identity, IdentityCert, PolicyDocument,
    PolicySet, TrustMode, TrustStore, REASON_ATTRIBUTE_MISSING, REASON_BAD_SIGNATURE,
    REASON_NO_POLICY, REASON_SUBJECT_NOT_ALLOWED,
};
use adhoc::membership::GroupId;
use adhoc::node::{EventKind, EventLog};
use adhoc::sgl::{derive_keys, Element, Opener, SealedMessage, Sealer, SglError};
use proptest::prelude::*;
use rand::SeedableRng;

fn identity(subject: &str, seed: u64) -> Identity {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    new_identity(subject, 1_000, &mut rng).unwrap()
}

fn stakeholder() -> &'static Identity {
    static ID: OnceLock<Identity> = OnceLock::new();
    ID.get_or_init(|| identity("cn=owner", 1))
}

// ---------------------------------------------------------------- glob

fn glob_model(p: &[char], t: &[char]) -> bool {
    match p.split_first() {
        None => t.is_empty(),
        Some(('*', rest)) => glob_model(rest, t) || (!t.is_empty() && glob_model(p, &t[1..])),
        Some(('?', rest)) => !t.is_empty() && glob_model(rest, &t[1..]),
        Some((c, rest)) => t.first() == Some(c) && glob_model(rest, &t[1..]),
    }
}

fn pattern() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![Just('a'), Just('b'), Just('/'), Just('*'), Just('?')],
        0..7,
    )
    .prop_map(|cs| cs.into_iter().collect())
}

fn resource() -> impl Strategy<Value = String> {
    proptest::collection::vec(prop_oneof![Just('a'), Just('b'), Just('/')], 0..7)
        .prop_map(|cs| cs.into_iter().collect())
}

proptest! {
    #[test]
    fn glob_agrees_with_recursive_model(p in pattern(), t in resource()) {
        let pc: Vec<char> = p.chars().collect();
        let tc: Vec<char> = t.chars().collect();
        prop_assert_eq!(glob_match(&p, &t), glob_model(&pc, &tc));
    }
}

// ---------------------------------------------------------------- authorize

#[derive(Debug, Clone)]
struct PolicyShape {
    pattern: String,
    subjects: Vec<&'static str>,
    attrs: Vec<&'static str>,
    forged: bool,
}

const SUBJECTS: &[&str] = &["cn=alice", "cn=bob", "*"];
const ATTRS: &[&str] = &["read", "write", "admin"];

fn policy_shape() -> impl Strategy<Value = PolicyShape> {
    (
        pattern(),
        proptest::sample::subsequence(SUBJECTS, 0..=2),
        proptest::sample::subsequence(ATTRS, 0..=2),
        proptest::bool::weighted(0.2),
    )
        .prop_map(|(pattern, subjects, attrs, forged)| PolicyShape {
            pattern,
            subjects,
            attrs,
            forged,
        })
}

fn build(shapes: &[PolicyShape]) -> PolicySet {
    let docs: Vec<PolicyDocument> = shapes
        .iter()
        .map(|s| {
            let mut d = PolicyDocument::signed(&s.pattern, &s.subjects, &s.attrs, stakeholder());
            if s.forged {
                d.signature[0] ^= 1;
            }
            d
        })
        .collect();
    let key = stakeholder().verifying_key();
    PolicySet::verified(docs, |name| (name == "cn=owner").then_some(key))
}

/// Allowed iff some intact matching policy names the subject (or `*`) or
/// has a non-empty attribute requirement fully covered by the assertions.
fn authz_model(
    shapes: &[PolicyShape],
    resource: &str,
    subject: &str,
    have: &BTreeSet<String>,
) -> (bool, Option<usize>, &'static str) {
    let rc: Vec<char> = resource.chars().collect();
    let matching: Vec<(usize, &PolicyShape)> = shapes
        .iter()
        .enumerate()
        .filter(|(_, s)| glob_model(&s.pattern.chars().collect::<Vec<_>>(), &rc))
        .collect();
    let intact: Vec<_> = matching.iter().filter(|(_, s)| !s.forged).collect();
    for (i, s) in &intact {
        let named = s.subjects.iter().any(|x| *x == subject || *x == "*");
        let attrs_ok = !s.attrs.is_empty() && s.attrs.iter().all(|a| have.contains(*a));
        if named || attrs_ok {
            return (true, Some(*i), "");
        }
    }
    let reason = if intact.is_empty() {
        if matching.is_empty() {
            REASON_NO_POLICY
        } else {
            REASON_BAD_SIGNATURE
        }
    } else if intact.iter().any(|(_, s)| !s.attrs.is_empty()) {
        REASON_ATTRIBUTE_MISSING
    } else {
        REASON_SUBJECT_NOT_ALLOWED
    };
    (false, None, reason)
}

fn attr_set(xs: &[&str]) -> BTreeSet<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn authorize_matches_model(
        shapes in proptest::collection::vec(policy_shape(), 0..5),
        resource in resource(),
        subject in proptest::sample::select(&["cn=alice", "cn=bob", "cn=carol"][..]),
        have in proptest::sample::subsequence(ATTRS, 0..=3),
    ) {
        let set = build(&shapes);
        let have = attr_set(&have);
        let d = authorize(&resource, subject, &have, &set);
        let (allow, rule, reason) = authz_model(&shapes, &resource, subject, &have);
        prop_assert_eq!(d.allow, allow);
        match rule {
            Some(i) => {
                let doc = PolicyDocument::signed(&shapes[i].pattern, &shapes[i].subjects, &shapes[i].attrs, stakeholder());
                prop_assert_eq!(d.reason, doc.rule_id());
            }
            None => prop_assert_eq!(d.reason, reason),
        }
        // Deterministic, reason included.
        prop_assert_eq!(authorize(&resource, subject, &have, &set), authorize(&resource, subject, &have, &set));
    }

    #[test]
    fn adding_assertions_never_revokes(
        shapes in proptest::collection::vec(policy_shape(), 0..5),
        resource in resource(),
        have in proptest::sample::subsequence(ATTRS, 0..=3),
        more in proptest::sample::subsequence(ATTRS, 0..=3),
    ) {
        let set = build(&shapes);
        let small = attr_set(&have);
        let mut big = small.clone();
        big.extend(attr_set(&more));
        if authorize(&resource, "cn=carol", &small, &set).allow {
            prop_assert!(authorize(&resource, "cn=carol", &big, &set).allow);
        }
    }

    #[test]
    fn empty_policy_set_denies(resource in resource(), have in proptest::sample::subsequence(ATTRS, 0..=3)) {
        let d = authorize(&resource, "cn=alice", &attr_set(&have), &PolicySet::new());
        prop_assert!(!d.allow);
        prop_assert_eq!(d.reason, REASON_NO_POLICY);
    }

    #[test]
    fn tampered_policy_never_verifies(shape in policy_shape(), which in 0usize..5, bit in 0usize..512) {
        let mut d = PolicyDocument::signed(&shape.pattern, &shape.subjects, &shape.attrs, stakeholder());
        match which {
            0 => d.signature[bit / 8] ^= 1 << (bit % 8),
            1 => d.resource_pattern.push('x'),
            2 => d.allow_subjects.push("cn=mallory".into()),
            3 => d.require_attributes.push("root".into()),
            _ => d.stakeholder.push('!'),
        }
        prop_assert!(!d.verify(&stakeholder().verifying_key()));
    }
}

// ---------------------------------------------------------------- certificates

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn any_bit_flip_in_a_cert_is_rejected(seed in 0u64..1_000, bit in 0usize..4096, registered in any::<bool>()) {
        let root = identity("cn=root", seed);
        let user = identity("cn=user", seed + 1);
        // Registered mode checks a root-issued cert; incremental a self-signed one.
        let (cert, mut store) = if registered {
            let c = root.issue("cn=user", user.cert().public_key, 1_000, 10_000_000);
            let mut s = TrustStore::new(TrustMode::Registered);
            s.add_root(root.cert().clone());
            (c, s)
        } else {
            (user.cert().clone(), TrustStore::new(TrustMode::Incremental))
        };
        prop_assert!(store.clone().verify(&cert, 5_000).is_ok());

        let mut bytes = cert.to_bytes();
        let bit = bit % (bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        if let Ok(flipped) = IdentityCert::from_bytes(&bytes) {
            prop_assert!(store.verify(&flipped, 5_000).is_err(), "accepted flip at bit {}", bit);
        }
    }

    #[test]
    fn pinned_subject_accepts_only_its_key(seed in 0u64..1_000, others in 1usize..4) {
        let mut store = TrustStore::new(TrustMode::Incremental);
        let first = identity("cn=dana", seed);
        prop_assert!(store.verify(first.cert(), 5_000).is_ok());
        for k in 0..others {
            let impostor = identity("cn=dana", seed + 1_000 + k as u64);
            prop_assert_eq!(store.verify(impostor.cert(), 5_000), Err(CertError::PinMismatch));
        }
        prop_assert!(store.verify(first.cert(), 6_000).is_ok());
        prop_assert_eq!(store.pins().len(), 1);
    }
}

// ---------------------------------------------------------------- sealing

fn keys(epoch: u64, secret: u8) -> Arc<adhoc::sgl::KeyMaterial> {
    Arc::new(derive_keys(
        &Element(vec![secret, 7]),
        &GroupId::new("venue").unwrap(),
        epoch,
    ))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn open_inverts_seal(len in prop_oneof![0usize..64, 60_000usize..=65_536], fill in any::<u8>(), aad in proptest::collection::vec(any::<u8>(), 0..32)) {
        let k = keys(3, 1);
        let payload: Vec<u8> = (0..len).map(|i| (i as u8).wrapping_mul(31) ^ fill).collect();
        let sealed = Sealer::new(k.clone(), 2).seal(&payload, &aad).unwrap();
        let wire = SealedMessage::decode(&sealed.encode()).unwrap();
        prop_assert_eq!(Opener::new(k).open(&wire, &aad).unwrap(), payload);
    }

    #[test]
    fn nonces_never_repeat(counts in proptest::collection::vec(1usize..50, 1..6)) {
        let mut seen = BTreeSet::new();
        for epoch in 1..=2u64 {
            let k = keys(epoch, 1);
            for (sender, n) in counts.iter().enumerate() {
                let mut s = Sealer::new(k.clone(), sender as u32);
                for _ in 0..*n {
                    let m = s.seal(b"x", b"").unwrap();
                    prop_assert!(seen.insert((m.epoch, m.sender_index(), m.nonce)));
                    prop_assert_eq!(m.sender_index(), sender as u32);
                }
            }
        }
    }

    #[test]
    fn mutated_frames_are_rejected(
        payload in proptest::collection::vec(any::<u8>(), 0..200),
        edits in proptest::collection::vec((any::<prop::sample::Index>(), 1u8..=255), 1..4),
        cut in proptest::option::of(any::<prop::sample::Index>()),
    ) {
        let k = keys(9, 1);
        let wire = Sealer::new(k.clone(), 0).seal(&payload, b"hdr").unwrap().encode();
        let mut forged = wire.clone();
        for (at, x) in &edits {
            let i = at.index(forged.len());
            forged[i] ^= x;
        }
        if let Some(c) = cut {
            forged.truncate(c.index(forged.len()));
        }
        prop_assume!(forged != wire);
        if let Ok(m) = SealedMessage::decode(&forged) {
            prop_assert!(Opener::new(k).open(&m, b"hdr").is_err());
        }
    }

    #[test]
    fn outsider_keys_open_nothing(payload in proptest::collection::vec(any::<u8>(), 0..200), secret in 2u8..=255) {
        let member = keys(5, 1);
        let m = Sealer::new(member, 0).seal(&payload, b"").unwrap();
        let err = Opener::new(keys(5, secret)).open(&m, b"").unwrap_err();
        prop_assert_eq!(err, SglError::AuthFail);
        // A retained key from an earlier epoch is stale for the new one.
        let old = Opener::new(keys(4, 1)).open(&m, b"").unwrap_err();
        prop_assert_eq!(old, SglError::StaleEpoch);
    }
}

// ---------------------------------------------------------------- search

const WORDS: &[&str] = &[
    "Higgs", "root", "run7", "calib", "ATLAS", "muon", "dat", "z0", "Run",
];

fn entry_strategy() -> impl Strategy<Value = (Vec<&'static str>, &'static str, Vec<&'static str>)> {
    (
        proptest::collection::vec(proptest::sample::select(WORDS), 1..4),
        proptest::sample::select(&["_", ".", " ", "-"][..]),
        proptest::sample::subsequence(&["hep", "Higgs", "raw"][..], 0..=2),
    )
}

/// Every lowercased query word appears inside some lowercased name word or tag.
fn search_model(name: &str, tags: &[&str], query: &str) -> bool {
    let words = |s: &str| -> Vec<String> {
        let mut out = vec![String::new()];
        for c in s.chars() {
            if c.is_alphanumeric() {
                out.last_mut().unwrap().extend(c.to_lowercase());
            } else {
                out.push(String::new());
            }
        }
        out.into_iter().filter(|w| !w.is_empty()).collect()
    };
    let mut have = words(name);
    have.extend(tags.iter().map(|t| t.to_lowercase()));
    words(query)
        .iter()
        .all(|q| have.iter().any(|h| h.contains(q.as_str())))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn match_query_equals_brute_force(
        entries in proptest::collection::vec(entry_strategy(), 0..20),
        query_words in proptest::collection::vec(
            prop_oneof![proptest::sample::select(WORDS).prop_map(str::to_string), "[a-zA-Z0-9]{1,3}"],
            0..3,
        ),
        sep in proptest::sample::select(&[" ", ",", "  "][..]),
    ) {
        let mut index = ShareIndex::in_memory();
        let mut named = BTreeMap::new();
        for (i, (parts, join, tags)) in entries.iter().enumerate() {
            let name = parts.join(join);
            let id = format!("{i:064x}");
            index.insert(ShareEntry {
                entry_id: id.clone(),
                path: PathBuf::from(format!("/share/{i}")),
                name: name.clone(),
                size: i as u64,
                tags: tags.iter().map(|t| t.to_string()).collect(),
                added: 0,
                mtime_ms: 0,
            });
            named.insert(id, (name, tags.clone()));
        }
        let query = query_words.join(sep);
        let got: BTreeSet<String> = index.match_query(&normalize_query(&query)).into_iter().map(|e| e.entry_id.clone()).collect();
        let want: BTreeSet<String> = named
            .iter()
            .filter(|(_, (name, tags))| search_model(name, tags, &query))
            .map(|(id, _)| id.clone())
            .collect();
        prop_assert_eq!(got, want, "query {:?}", query);
    }
}

// ---------------------------------------------------------------- control events

proptest! {
    #[test]
    fn event_log_is_an_increasing_suffix(capacity in 1usize..20, pushes in 0usize..60, since in 0u64..70) {
        let mut log = EventLog::new(capacity);
        for i in 0..pushes {
            let seq = log.push(EventKind::Message, &i);
            prop_assert_eq!(seq, i as u64 + 1);
        }
        let got = log.since(since);
        prop_assert!(got.windows(2).all(|w| w[0].seq + 1 == w[1].seq));
        prop_assert!(got.iter().all(|e| e.seq > since));
        let first_kept = pushes.saturating_sub(capacity) as u64 + 1;
        let expect_from = (since + 1).max(first_kept);
        let expect: Vec<u64> = (expect_from..=pushes as u64).collect();
        prop_assert_eq!(got.iter().map(|e| e.seq).collect::<Vec<_>>(), expect);
        prop_assert_eq!(log.last_seq(), pushes as u64);
    }
}
