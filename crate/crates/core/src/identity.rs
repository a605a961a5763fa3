//! Identity certificates, trust stores and the resource policy engine.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wire::{Reader, WireError, Writer};

const CERT_TAG: &[u8] = b"adhoc-cert-v1";
const POLICY_TAG: &[u8] = b"adhoc-policy-v1";
const ASSERTION_TAG: &[u8] = b"adhoc-attr-v1";

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("subject must not be empty")]
    EmptySubject,
    #[error("malformed {0}")]
    Malformed(&'static str),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Certificate verification failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CertError {
    #[error("BAD_SIGNATURE")]
    BadSignature,
    #[error("EXPIRED")]
    Expired,
    #[error("PIN_MISMATCH")]
    PinMismatch,
    #[error("UNTRUSTED_ISSUER")]
    UntrustedIssuer,
    #[error("MALFORMED")]
    Malformed,
}

/// SHA-256 of a certificate's canonical bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.short())
    }
}

impl FromStr for Fingerprint {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|_| IdentityError::Malformed("fingerprint"))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| IdentityError::Malformed("fingerprint"))?;
        Ok(Self(arr))
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, T: AsRef<[u8]>>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(
        d: D,
    ) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom(format!("expected {N} bytes")))
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityCert {
    pub subject: String,
    #[serde(with = "hex_bytes")]
    pub public_key: [u8; 32],
    pub issued: u64,
    pub expires: u64,
    pub issuer: String,
    #[serde(with = "hex_bytes")]
    pub signature: [u8; 64],
}

impl fmt::Debug for IdentityCert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IdentityCert")
            .field("subject", &self.subject)
            .field("issuer", &self.issuer)
            .field("fingerprint", &self.fingerprint())
            .finish()
    }
}

impl IdentityCert {
    fn tbs(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(CERT_TAG)
            .bytes16(self.subject.as_bytes())
            .raw(&self.public_key)
            .u64(self.issued)
            .u64(self.expires)
            .bytes16(self.issuer.as_bytes());
        w.finish()
    }

    /// Canonical serialization; the fingerprint is computed over these bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.tbs();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        if r.take(CERT_TAG.len())? != CERT_TAG {
            return Err(WireError::BadMagic);
        }
        let subject =
            String::from_utf8(r.bytes16()?.to_vec()).map_err(|_| WireError::Invalid("subject"))?;
        let public_key = r.array()?;
        let issued = r.u64()?;
        let expires = r.u64()?;
        let issuer =
            String::from_utf8(r.bytes16()?.to_vec()).map_err(|_| WireError::Invalid("issuer"))?;
        let signature = r.array()?;
        r.finish()?;
        Ok(Self {
            subject,
            public_key,
            issued,
            expires,
            issuer,
            signature,
        })
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint(Sha256::digest(self.to_bytes()).into())
    }

    pub fn verifying_key(&self) -> Result<VerifyingKey, CertError> {
        VerifyingKey::from_bytes(&self.public_key).map_err(|_| CertError::Malformed)
    }

    pub fn is_self_signed(&self) -> bool {
        self.issuer == self.subject
    }

    /// Checks the signature under `issuer_key` only; no trust decision.
    pub fn signed_by(&self, issuer_key: &VerifyingKey) -> bool {
        let sig = Signature::from_bytes(&self.signature);
        issuer_key.verify_strict(&self.tbs(), &sig).is_ok()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cert serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, IdentityError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A certificate plus its secret signing key.
pub struct Identity {
    cert: IdentityCert,
    signing: SigningKey,
    fingerprint: Fingerprint,
}

impl fmt::Debug for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Identity")
            .field("cert", &self.cert)
            .finish_non_exhaustive()
    }
}

#[derive(Serialize, Deserialize)]
struct IdentityFile {
    cert: IdentityCert,
    secret_key: String,
}

/// Default certificate lifetime: ten years in milliseconds.
pub const DEFAULT_LIFETIME_MS: u64 = 10 * 365 * 24 * 3600 * 1000;

/// Generates a fresh keypair and a self-signed certificate.
pub fn new_identity<R: RngCore + CryptoRng>(
    subject: &str,
    now: u64,
    rng: &mut R,
) -> Result<Identity, IdentityError> {
    if subject.trim().is_empty() {
        return Err(IdentityError::EmptySubject);
    }
    let signing = SigningKey::generate(rng);
    let mut cert = IdentityCert {
        subject: subject.to_string(),
        public_key: signing.verifying_key().to_bytes(),
        issued: now,
        expires: now.saturating_add(DEFAULT_LIFETIME_MS),
        issuer: subject.to_string(),
        signature: [0; 64],
    };
    cert.signature = signing.sign(&cert.tbs()).to_bytes();
    Ok(Identity::from_parts(cert, signing))
}

impl Identity {
    fn from_parts(cert: IdentityCert, signing: SigningKey) -> Self {
        let fingerprint = cert.fingerprint();
        Self {
            cert,
            signing,
            fingerprint,
        }
    }

    pub fn cert(&self) -> &IdentityCert {
        &self.cert
    }

    pub fn subject(&self) -> &str {
        &self.cert.subject
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; 64] {
        self.signing.sign(msg).to_bytes()
    }

    /// Raw scalar for the Montgomery-form key used by pairwise sealing.
    pub(crate) fn dh_scalar(&self) -> [u8; 32] {
        self.signing.to_scalar_bytes()
    }

    /// Issues a certificate for another key, acting as a root.
    pub fn issue(
        &self,
        subject: &str,
        public_key: [u8; 32],
        issued: u64,
        expires: u64,
    ) -> IdentityCert {
        let mut cert = IdentityCert {
            subject: subject.to_string(),
            public_key,
            issued,
            expires,
            issuer: self.cert.subject.clone(),
            signature: [0; 64],
        };
        cert.signature = self.sign(&cert.tbs());
        cert
    }

    /// Replaces the certificate (e.g. with one issued by a root). The key
    /// must match.
    pub fn with_cert(self, cert: IdentityCert) -> Result<Self, IdentityError> {
        if cert.public_key != self.signing.verifying_key().to_bytes() {
            return Err(IdentityError::Malformed("certificate key does not match"));
        }
        Ok(Self::from_parts(cert, self.signing))
    }

    pub fn save(&self, path: &Path) -> Result<(), IdentityError> {
        let file = IdentityFile {
            cert: self.cert.clone(),
            secret_key: hex::encode(self.signing.to_bytes()),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IdentityError> {
        let file: IdentityFile = serde_json::from_slice(&std::fs::read(path)?)?;
        let secret =
            hex::decode(&file.secret_key).map_err(|_| IdentityError::Malformed("secret_key"))?;
        let secret: [u8; 32] = secret
            .try_into()
            .map_err(|_| IdentityError::Malformed("secret_key"))?;
        Self::from_parts(file.cert, SigningKey::from_bytes(&secret)).with_cert_check()
    }

    fn with_cert_check(self) -> Result<Self, IdentityError> {
        if self.cert.public_key != self.signing.verifying_key().to_bytes() {
            return Err(IdentityError::Malformed("certificate key does not match"));
        }
        Ok(self)
    }
}

/// Verifies a detached signature made by `cert`'s key.
pub fn verify_signature(cert: &IdentityCert, msg: &[u8], sig: &[u8; 64]) -> bool {
    match cert.verifying_key() {
        Ok(k) => k.verify(msg, &Signature::from_bytes(sig)).is_ok(),
        Err(_) => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrustMode {
    Registered,
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pin {
    pub subject: String,
    #[serde(with = "hex_bytes")]
    pub public_key: [u8; 32],
    pub first_seen: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrustStore {
    pub mode: TrustMode,
    roots: Vec<IdentityCert>,
    pinned: BTreeMap<Fingerprint, Pin>,
}

impl TrustStore {
    pub fn new(mode: TrustMode) -> Self {
        Self {
            mode,
            roots: Vec::new(),
            pinned: BTreeMap::new(),
        }
    }

    pub fn add_root(&mut self, cert: IdentityCert) {
        if !self.roots.contains(&cert) {
            self.roots.push(cert);
        }
    }

    pub fn roots(&self) -> &[IdentityCert] {
        &self.roots
    }

    pub fn pins(&self) -> &BTreeMap<Fingerprint, Pin> {
        &self.pinned
    }

    /// Accepts `cert` and returns its subject, or explains the rejection.
    /// In incremental mode an unknown self-signed subject is pinned.
    pub fn verify(&mut self, cert: &IdentityCert, now: u64) -> Result<String, CertError> {
        if cert.expires <= cert.issued {
            return Err(CertError::Malformed);
        }
        if now < cert.issued || now > cert.expires {
            return Err(CertError::Expired);
        }
        let own_key = cert.verifying_key()?;

        if let Some(root) = self.roots.iter().find(|r| r.subject == cert.issuer) {
            if cert.is_self_signed() && root.public_key != cert.public_key {
                // A self-signed cert claiming a root's name with another key.
                return Err(CertError::BadSignature);
            }
            let root_key = root.verifying_key()?;
            return if cert.signed_by(&root_key) {
                Ok(cert.subject.clone())
            } else {
                Err(CertError::BadSignature)
            };
        }
        if !cert.is_self_signed() || self.mode == TrustMode::Registered {
            return Err(CertError::UntrustedIssuer);
        }
        if !cert.signed_by(&own_key) {
            return Err(CertError::BadSignature);
        }
        if let Some(pin) = self.pinned.values().find(|p| p.subject == cert.subject) {
            if pin.public_key != cert.public_key {
                return Err(CertError::PinMismatch);
            }
        }
        self.pinned
            .entry(cert.fingerprint())
            .or_insert_with(|| Pin {
                subject: cert.subject.clone(),
                public_key: cert.public_key,
                first_seen: now,
            });
        Ok(cert.subject.clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), IdentityError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IdentityError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Free-function form of [`TrustStore::verify`].
pub fn verify_cert(
    cert: &IdentityCert,
    store: &mut TrustStore,
    now: u64,
) -> Result<String, CertError> {
    store.verify(cert, now)
}

/// Certificates of peers that passed trust verification, by fingerprint.
#[derive(Debug, Default, Clone)]
pub struct CertBook {
    certs: BTreeMap<Fingerprint, IdentityCert>,
}

impl CertBook {
    pub fn get(&self, fp: &Fingerprint) -> Option<&IdentityCert> {
        self.certs.get(fp)
    }

    pub fn contains(&self, fp: &Fingerprint) -> bool {
        self.certs.contains_key(fp)
    }

    /// Verifies `cert` against `trust` and records it. Returns the fingerprint.
    pub fn admit(
        &mut self,
        cert: &IdentityCert,
        trust: &mut TrustStore,
        now: u64,
    ) -> Result<Fingerprint, CertError> {
        let fp = cert.fingerprint();
        if self.certs.contains_key(&fp) {
            return Ok(fp);
        }
        trust.verify(cert, now)?;
        self.certs.insert(fp, cert.clone());
        Ok(fp)
    }

    pub fn insert_trusted(&mut self, cert: IdentityCert) {
        self.certs.insert(cert.fingerprint(), cert);
    }

    pub fn by_subject(&self, subject: &str) -> Option<&IdentityCert> {
        self.certs.values().find(|c| c.subject == subject)
    }

    pub fn len(&self) -> usize {
        self.certs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.certs.is_empty()
    }
}

/// Shell-style glob: `*` matches any run, `?` one character.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub resource_pattern: String,
    #[serde(default)]
    pub allow_subjects: Vec<String>,
    #[serde(default)]
    pub require_attributes: Vec<String>,
    pub stakeholder: String,
    #[serde(with = "hex_bytes")]
    pub signature: [u8; 64],
}

impl PolicyDocument {
    pub fn signed(
        resource_pattern: &str,
        allow_subjects: &[&str],
        require_attributes: &[&str],
        stakeholder: &Identity,
    ) -> Self {
        let mut doc = Self {
            resource_pattern: resource_pattern.to_string(),
            allow_subjects: allow_subjects.iter().map(|s| s.to_string()).collect(),
            require_attributes: require_attributes.iter().map(|s| s.to_string()).collect(),
            stakeholder: stakeholder.subject().to_string(),
            signature: [0; 64],
        };
        doc.signature = stakeholder.sign(&doc.tbs());
        doc
    }

    fn tbs(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(POLICY_TAG).bytes16(self.resource_pattern.as_bytes());
        w.u16(self.allow_subjects.len() as u16);
        for s in &self.allow_subjects {
            w.bytes16(s.as_bytes());
        }
        w.u16(self.require_attributes.len() as u16);
        for a in &self.require_attributes {
            w.bytes16(a.as_bytes());
        }
        w.bytes16(self.stakeholder.as_bytes());
        w.finish()
    }

    pub fn verify(&self, key: &VerifyingKey) -> bool {
        key.verify_strict(&self.tbs(), &Signature::from_bytes(&self.signature))
            .is_ok()
    }

    /// Stable identifier reported in allow decisions.
    pub fn rule_id(&self) -> String {
        let digest = Sha256::digest(self.tbs());
        format!("rule-{}", hex::encode(&digest[..6]))
    }
}

#[derive(Debug, Clone)]
struct PolicyEntry {
    doc: PolicyDocument,
    verified: bool,
}

/// Policies with their signature check already performed.
#[derive(Debug, Clone, Default)]
pub struct PolicySet {
    entries: Vec<PolicyEntry>,
}

impl PolicySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Checks each document's signature against its stakeholder's key as
    /// returned by `lookup`. Documents that fail are kept but never match.
    pub fn verified<F>(docs: impl IntoIterator<Item = PolicyDocument>, lookup: F) -> Self
    where
        F: Fn(&str) -> Option<VerifyingKey>,
    {
        let entries = docs
            .into_iter()
            .map(|doc| {
                let verified = lookup(&doc.stakeholder).is_some_and(|k| doc.verify(&k));
                PolicyEntry { doc, verified }
            })
            .collect();
        Self { entries }
    }

    pub fn push_verified(&mut self, doc: PolicyDocument, key: &VerifyingKey) -> bool {
        let verified = doc.verify(key);
        self.entries.push(PolicyEntry { doc, verified });
        verified
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn documents(&self) -> impl Iterator<Item = &PolicyDocument> {
        self.entries.iter().map(|e| &e.doc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuthzDecision {
    pub allow: bool,
    pub reason: String,
}

impl AuthzDecision {
    fn deny(reason: &str) -> Self {
        Self {
            allow: false,
            reason: reason.to_string(),
        }
    }
}

pub const REASON_NO_POLICY: &str = "no-policy";
pub const REASON_ATTRIBUTE_MISSING: &str = "attribute-missing";
pub const REASON_BAD_SIGNATURE: &str = "bad-signature";
pub const REASON_SUBJECT_NOT_ALLOWED: &str = "subject-not-allowed";

/// Allow iff a verified policy matching `resource` lists `subject` (or `*`)
/// or has a non-empty required attribute set contained in `assertions`.
pub fn authorize(
    resource: &str,
    subject: &str,
    assertions: &BTreeSet<String>,
    policies: &PolicySet,
) -> AuthzDecision {
    let mut matched = false;
    let mut unverified = false;
    let mut attr_missing = false;
    for entry in &policies.entries {
        let doc = &entry.doc;
        if !glob_match(&doc.resource_pattern, resource) {
            continue;
        }
        if !entry.verified {
            unverified = true;
            continue;
        }
        matched = true;
        if doc.allow_subjects.iter().any(|s| s == subject || s == "*") {
            return AuthzDecision {
                allow: true,
                reason: doc.rule_id(),
            };
        }
        if !doc.require_attributes.is_empty() {
            if doc
                .require_attributes
                .iter()
                .all(|a| assertions.contains(a))
            {
                return AuthzDecision {
                    allow: true,
                    reason: doc.rule_id(),
                };
            }
            attr_missing = true;
        }
    }
    if !matched {
        AuthzDecision::deny(if unverified {
            REASON_BAD_SIGNATURE
        } else {
            REASON_NO_POLICY
        })
    } else if attr_missing {
        AuthzDecision::deny(REASON_ATTRIBUTE_MISSING)
    } else {
        AuthzDecision::deny(REASON_SUBJECT_NOT_ALLOWED)
    }
}

/// A stakeholder's signed statement that `subject` holds `attributes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeAssertion {
    pub subject: String,
    pub attributes: Vec<String>,
    pub stakeholder: String,
    #[serde(with = "hex_bytes")]
    pub signature: [u8; 64],
}

impl AttributeAssertion {
    pub fn signed(subject: &str, attributes: &[&str], stakeholder: &Identity) -> Self {
        let mut a = Self {
            subject: subject.to_string(),
            attributes: attributes.iter().map(|s| s.to_string()).collect(),
            stakeholder: stakeholder.subject().to_string(),
            signature: [0; 64],
        };
        a.signature = stakeholder.sign(&a.tbs());
        a
    }

    fn tbs(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(ASSERTION_TAG).bytes16(self.subject.as_bytes());
        w.u16(self.attributes.len() as u16);
        for a in &self.attributes {
            w.bytes16(a.as_bytes());
        }
        w.bytes16(self.stakeholder.as_bytes());
        w.finish()
    }

    pub fn verify(&self, key: &VerifyingKey) -> bool {
        key.verify_strict(&self.tbs(), &Signature::from_bytes(&self.signature))
            .is_ok()
    }
}

/// Attributes asserted for `subject` by stakeholders whose key `lookup`
/// knows; unverifiable assertions contribute nothing.
pub fn collect_attributes<F>(
    subject: &str,
    assertions: &[AttributeAssertion],
    lookup: F,
) -> BTreeSet<String>
where
    F: Fn(&str) -> Option<VerifyingKey>,
{
    assertions
        .iter()
        .filter(|a| a.subject == subject)
        .filter(|a| lookup(&a.stakeholder).is_some_and(|k| a.verify(&k)))
        .flat_map(|a| a.attributes.iter().cloned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn fresh_identities_differ() {
        let mut r = rng();
        let a = new_identity("cn=alice", 0, &mut r).unwrap();
        let b = new_identity("cn=alice", 0, &mut r).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert!(matches!(
            new_identity("  ", 0, &mut r),
            Err(IdentityError::EmptySubject)
        ));
    }

    #[test]
    fn canonical_round_trip() {
        let a = new_identity("cn=alice", 5, &mut rng()).unwrap();
        let bytes = a.cert().to_bytes();
        let back = IdentityCert::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.fingerprint(), a.fingerprint());
        let json = a.cert().to_json();
        assert_eq!(IdentityCert::from_json(&json).unwrap(), *a.cert());
        assert_eq!(a.fingerprint().to_string().len(), 64);
    }

    #[test]
    fn self_signed_as_root() {
        let a = new_identity("cn=alice", 0, &mut rng()).unwrap();
        let mut store = TrustStore::new(TrustMode::Registered);
        store.add_root(a.cert().clone());
        assert_eq!(store.verify(a.cert(), 10).unwrap(), "cn=alice");
    }

    #[test]
    fn registered_mode_requires_root() {
        let mut r = rng();
        let root = new_identity("cn=root", 0, &mut r).unwrap();
        let bob = new_identity("cn=bob", 0, &mut r).unwrap();
        let mut store = TrustStore::new(TrustMode::Registered);
        store.add_root(root.cert().clone());
        assert_eq!(store.verify(bob.cert(), 1), Err(CertError::UntrustedIssuer));
        let issued = root.issue("cn=bob", bob.cert().public_key, 0, 1000);
        assert_eq!(store.verify(&issued, 1).unwrap(), "cn=bob");
        let mut forged = issued.clone();
        forged.signature[3] ^= 1;
        assert_eq!(store.verify(&forged, 1), Err(CertError::BadSignature));
    }

    #[test]
    fn expiry_and_pinning() {
        let mut r = rng();
        let a = new_identity("cn=alice", 100, &mut r).unwrap();
        let mut store = TrustStore::new(TrustMode::Incremental);
        assert_eq!(store.verify(a.cert(), 50), Err(CertError::Expired));
        assert_eq!(store.verify(a.cert(), u64::MAX), Err(CertError::Expired));
        assert_eq!(store.verify(a.cert(), 200).unwrap(), "cn=alice");
        assert_eq!(store.pins().len(), 1);
        let imposter = new_identity("cn=alice", 100, &mut r).unwrap();
        assert_eq!(
            store.verify(imposter.cert(), 200),
            Err(CertError::PinMismatch)
        );
        assert_eq!(store.verify(a.cert(), 300).unwrap(), "cn=alice");
    }

    #[test]
    fn tampered_cert_rejected() {
        let a = new_identity("cn=alice", 0, &mut rng()).unwrap();
        let bytes = a.cert().to_bytes();
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x01;
            let Ok(cert) = IdentityCert::from_bytes(&b) else {
                continue;
            };
            let mut store = TrustStore::new(TrustMode::Incremental);
            store.add_root(a.cert().clone());
            assert!(store.verify(&cert, 1).is_err(), "flip at byte {i} accepted");
        }
    }

    #[test]
    fn glob() {
        assert!(glob_match("shared/*", "shared/run42.root"));
        assert!(glob_match("*", ""));
        assert!(glob_match("a?c", "abc"));
        assert!(!glob_match("a?c", "ac"));
        assert!(glob_match("*.root", "x.y.root"));
        assert!(!glob_match("shared/*", "private/x"));
        assert!(glob_match("a*b*c", "aXbYbZc"));
    }

    #[test]
    fn authorize_examples() {
        let owner = new_identity("cn=owner", 0, &mut rng()).unwrap();
        let key = owner.verifying_key();
        let lookup = |s: &str| (s == "cn=owner").then_some(key);
        let none = PolicySet::new();
        let d = authorize("shared/x", "alice", &BTreeSet::new(), &none);
        assert_eq!(d, AuthzDecision::deny(REASON_NO_POLICY));

        let set = PolicySet::verified(
            [PolicyDocument::signed("shared/*", &["alice"], &[], &owner)],
            lookup,
        );
        let d = authorize("shared/run42.root", "alice", &BTreeSet::new(), &set);
        assert!(d.allow);
        assert!(d.reason.starts_with("rule-"));

        let set = PolicySet::verified(
            [PolicyDocument::signed("*", &[], &["cms-member"], &owner)],
            lookup,
        );
        let d = authorize("x", "bob", &["atlas-member".to_string()].into(), &set);
        assert_eq!(d, AuthzDecision::deny(REASON_ATTRIBUTE_MISSING));

        let mut doc = PolicyDocument::signed("*", &["bob"], &[], &owner);
        doc.allow_subjects.push("eve".into());
        let set = PolicySet::verified([doc], lookup);
        let d = authorize("x", "eve", &BTreeSet::new(), &set);
        assert_eq!(d, AuthzDecision::deny(REASON_BAD_SIGNATURE));
    }

    #[test]
    fn assertions_require_valid_signature() {
        let mut r = rng();
        let owner = new_identity("cn=owner", 0, &mut r).unwrap();
        let other = new_identity("cn=other", 0, &mut r).unwrap();
        let key = owner.verifying_key();
        let lookup = |s: &str| (s == "cn=owner").then_some(key);
        let good = AttributeAssertion::signed("bob", &["cms-member"], &owner);
        let mut bad = AttributeAssertion::signed("bob", &["admin"], &other);
        bad.stakeholder = "cn=owner".into();
        let attrs = collect_attributes("bob", &[good, bad], lookup);
        assert_eq!(attrs, ["cms-member".to_string()].into());
    }
}
