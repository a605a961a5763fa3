use std::collections::BTreeMap;
use std::sync::Arc;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use hkdf::Hkdf;
use sha2::Sha256;
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::membership::GroupId;
use crate::wire::{Reader, WireError, Writer};

use super::algebra::Element;
use super::SglError;

pub const REPLAY_WINDOW: u64 = 1024;

/// Per-epoch symmetric keys. `enc_key` drives the AEAD; `mac_key` is kept
/// for callers needing a separate authenticator.
#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct KeyMaterial {
    #[zeroize(skip)]
    pub epoch: u64,
    pub enc_key: [u8; 32],
    pub mac_key: [u8; 32],
}

impl std::fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KeyMaterial(epoch {})", self.epoch)
    }
}

fn expand(hk: &Hkdf<Sha256>, label: &[u8], group: &GroupId, epoch: u64) -> [u8; 32] {
    let mut info = Writer::new();
    info.raw(label).u8(0);
    group.encode(&mut info);
    info.u64(epoch);
    let mut out = [0u8; 32];
    hk.expand(info.as_slice(), &mut out)
        .expect("32 bytes is a valid HKDF length");
    out
}

/// HKDF-SHA256 over the canonical element encoding, domain-separated by
/// label, group name and epoch.
pub fn derive_keys(shared: &Element, group: &GroupId, epoch: u64) -> KeyMaterial {
    let hk = Hkdf::<Sha256>::new(Some(b"adhoc-sgl-v1"), &shared.0);
    KeyMaterial {
        epoch,
        enc_key: expand(&hk, b"sgl-enc", group, epoch),
        mac_key: expand(&hk, b"sgl-mac", group, epoch),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedMessage {
    pub epoch: u64,
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; 16],
}

impl SealedMessage {
    pub fn sender_index(&self) -> u32 {
        u32::from_be_bytes(self.nonce[..4].try_into().expect("4 bytes"))
    }

    pub fn counter(&self) -> u64 {
        u64::from_be_bytes(self.nonce[4..].try_into().expect("8 bytes"))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(40 + self.ciphertext.len());
        w.u64(self.epoch)
            .raw(&self.nonce)
            .bytes32(&self.ciphertext)
            .raw(&self.tag);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let epoch = r.u64()?;
        let nonce = r.array()?;
        let ciphertext = r.bytes32()?.to_vec();
        let tag = r.array()?;
        r.finish()?;
        Ok(Self {
            epoch,
            nonce,
            ciphertext,
            tag,
        })
    }
}

fn nonce_for(sender_index: u32, counter: u64) -> [u8; 12] {
    let mut n = [0u8; 12];
    n[..4].copy_from_slice(&sender_index.to_be_bytes());
    n[4..].copy_from_slice(&counter.to_be_bytes());
    n
}

/// Encrypts with an explicit nonce. Callers must never reuse
/// `(sender_index, counter)` under one key; [`Sealer`] enforces that.
pub fn seal(
    keys: &KeyMaterial,
    sender_index: u32,
    counter: u64,
    plaintext: &[u8],
    aad: &[u8],
) -> SealedMessage {
    let nonce = nonce_for(sender_index, counter);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&keys.enc_key));
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), aad, &mut buf)
        .expect("plaintext within AEAD limits");
    SealedMessage {
        epoch: keys.epoch,
        nonce,
        ciphertext: buf,
        tag: tag.into(),
    }
}

/// Decrypts without replay tracking.
pub fn open(keys: &KeyMaterial, sealed: &SealedMessage, aad: &[u8]) -> Result<Vec<u8>, SglError> {
    if sealed.epoch != keys.epoch {
        return Err(SglError::StaleEpoch);
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&keys.enc_key));
    let mut buf = sealed.ciphertext.clone();
    cipher
        .decrypt_in_place_detached(
            Nonce::from_slice(&sealed.nonce),
            aad,
            &mut buf,
            Tag::from_slice(&sealed.tag),
        )
        .map_err(|_| SglError::AuthFail)?;
    Ok(buf)
}

/// Sending half for one member in one epoch.
#[derive(Debug)]
pub struct Sealer {
    keys: Arc<KeyMaterial>,
    sender_index: u32,
    next: u64,
    limit: u64,
}

impl Sealer {
    pub fn new(keys: Arc<KeyMaterial>, sender_index: u32) -> Self {
        Self::with_limit(keys, sender_index, u64::MAX)
    }

    /// `limit` caps the number of frames sealed before a rekey is required.
    pub fn with_limit(keys: Arc<KeyMaterial>, sender_index: u32, limit: u64) -> Self {
        Self {
            keys,
            sender_index,
            next: 0,
            limit,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.keys.epoch
    }

    pub fn sealed_count(&self) -> u64 {
        self.next
    }

    pub fn seal(&mut self, plaintext: &[u8], aad: &[u8]) -> Result<SealedMessage, SglError> {
        if self.next >= self.limit {
            return Err(SglError::NonceExhausted);
        }
        let counter = self.next;
        self.next += 1;
        Ok(seal(&self.keys, self.sender_index, counter, plaintext, aad))
    }
}

/// Sliding bitmap over the last [`REPLAY_WINDOW`] counters of one sender.
#[derive(Debug, Clone, Default)]
pub struct ReplayWindow {
    highest: Option<u64>,
    bits: [u64; (REPLAY_WINDOW / 64) as usize],
}

impl ReplayWindow {
    fn bit(&self, offset: u64) -> bool {
        self.bits[(offset / 64) as usize] >> (offset % 64) & 1 == 1
    }

    fn set(&mut self, offset: u64) {
        self.bits[(offset / 64) as usize] |= 1 << (offset % 64);
    }

    /// Would `counter` be accepted?
    pub fn check(&self, counter: u64) -> bool {
        match self.highest {
            None => true,
            Some(h) if counter > h => true,
            Some(h) => h - counter < REPLAY_WINDOW && !self.bit(h - counter),
        }
    }

    /// Records `counter`; call only after the frame authenticated.
    pub fn accept(&mut self, counter: u64) {
        match self.highest {
            Some(h) if counter <= h => self.set(h - counter),
            _ => {
                let shift = self.highest.map_or(REPLAY_WINDOW, |h| counter - h);
                if shift >= REPLAY_WINDOW {
                    self.bits = Default::default();
                } else {
                    self.shift_left(shift);
                }
                self.highest = Some(counter);
                self.set(0);
            }
        }
    }

    // Offsets are distances below `highest`; advancing moves every bit up.
    fn shift_left(&mut self, by: u64) {
        let words = (by / 64) as usize;
        let bits = by % 64;
        let n = self.bits.len();
        for i in (0..n).rev() {
            let src = i.checked_sub(words);
            let mut v = src.map_or(0, |s| self.bits[s] << bits);
            if bits > 0 {
                if let Some(s) = src.and_then(|s| s.checked_sub(1)) {
                    v |= self.bits[s] >> (64 - bits);
                }
            }
            self.bits[i] = v;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpenStats {
    pub opened: u64,
    pub auth_fail: u64,
    pub stale_epoch: u64,
    pub replayed: u64,
}

/// Receiving half for one epoch, with per-sender replay windows.
#[derive(Debug)]
pub struct Opener {
    keys: Arc<KeyMaterial>,
    windows: BTreeMap<u32, ReplayWindow>,
    pub stats: OpenStats,
}

impl Opener {
    pub fn new(keys: Arc<KeyMaterial>) -> Self {
        Self {
            keys,
            windows: BTreeMap::new(),
            stats: OpenStats::default(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.keys.epoch
    }

    pub fn open(&mut self, sealed: &SealedMessage, aad: &[u8]) -> Result<Vec<u8>, SglError> {
        if sealed.epoch != self.keys.epoch {
            self.stats.stale_epoch += 1;
            return Err(SglError::StaleEpoch);
        }
        let window = self.windows.entry(sealed.sender_index()).or_default();
        if !window.check(sealed.counter()) {
            self.stats.replayed += 1;
            return Err(SglError::Replay);
        }
        match open(&self.keys, sealed, aad) {
            Ok(pt) => {
                window.accept(sealed.counter());
                self.stats.opened += 1;
                Ok(pt)
            }
            Err(e) => {
                self.stats.auth_fail += 1;
                Err(e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(epoch: u64) -> KeyMaterial {
        derive_keys(&Element(vec![18]), &GroupId::new("g").unwrap(), epoch)
    }

    #[test]
    fn derivation() {
        let a = keys(1);
        let b = keys(1);
        assert_eq!(a.enc_key, b.enc_key);
        assert_ne!(a.enc_key, a.mac_key);
        assert_ne!(keys(2).enc_key, a.enc_key);
        let other = derive_keys(&Element(vec![18]), &GroupId::new("h").unwrap(), 1);
        assert_ne!(other.enc_key, a.enc_key);
    }

    #[test]
    fn round_trip_and_tamper() {
        let k = Arc::new(keys(3));
        let mut s = Sealer::new(k.clone(), 2);
        let a = s.seal(b"hello", b"aad").unwrap();
        let b = s.seal(b"hello", b"aad").unwrap();
        assert_ne!(a.ciphertext, b.ciphertext);
        assert_eq!(open(&k, &a, b"aad").unwrap(), b"hello");
        assert_eq!(open(&k, &a, b"aaX"), Err(SglError::AuthFail));
        let e = s.seal(b"", b"").unwrap();
        assert_eq!(open(&k, &e, b"").unwrap(), b"");
        for i in 0..a.ciphertext.len() * 8 {
            let mut t = a.clone();
            t.ciphertext[i / 8] ^= 1 << (i % 8);
            assert_eq!(open(&k, &t, b"aad"), Err(SglError::AuthFail));
        }
        assert_eq!(open(&keys(2), &a, b"aad"), Err(SglError::StaleEpoch));
        assert_eq!(SealedMessage::decode(&a.encode()).unwrap(), a);
        assert_eq!(a.sender_index(), 2);
        assert_eq!(b.counter(), 1);
    }

    #[test]
    fn counter_exhaustion() {
        let mut s = Sealer::with_limit(Arc::new(keys(1)), 0, 2);
        s.seal(b"a", b"").unwrap();
        s.seal(b"b", b"").unwrap();
        assert_eq!(s.seal(b"c", b""), Err(SglError::NonceExhausted));
    }

    #[test]
    fn replay_rejected() {
        let k = Arc::new(keys(1));
        let mut s = Sealer::new(k.clone(), 0);
        let mut o = Opener::new(k);
        let frames: Vec<_> = (0..5).map(|_| s.seal(b"x", b"").unwrap()).collect();
        for f in frames.iter().rev() {
            o.open(f, b"").unwrap();
        }
        for f in &frames {
            assert_eq!(o.open(f, b""), Err(SglError::Replay));
        }
        assert_eq!(o.stats.replayed, 5);
    }

    #[test]
    fn window_matches_set_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut w = ReplayWindow::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut highest = 0u64;
        for _ in 0..20_000 {
            let c = if rng.gen_bool(0.5) {
                highest.saturating_sub(rng.gen_range(0..1500))
            } else {
                highest + rng.gen_range(0..200)
            };
            let expect = !seen.contains(&c) && (seen.is_empty() || c + REPLAY_WINDOW > highest);
            assert_eq!(w.check(c), expect, "counter {c} highest {highest}");
            if expect {
                w.accept(c);
                seen.insert(c);
                highest = highest.max(c);
            }
        }
    }
}
