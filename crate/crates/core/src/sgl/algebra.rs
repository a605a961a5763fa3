use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use rand::RngCore;
use zeroize::Zeroizing;

use super::SglError;

/// Canonical encoding of a group element (fixed-width big-endian).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Element(pub Vec<u8>);

impl fmt::Debug for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = hex::encode(&self.0);
        if h.len() > 16 {
            write!(f, "Element({}..)", &h[..16])
        } else {
            write!(f, "Element({h})")
        }
    }
}

/// Secret exponent, big-endian, wiped on drop. Deliberately not
/// serializable.
pub struct Scalar(Zeroizing<Vec<u8>>);

impl Scalar {
    pub fn from_be_bytes(b: &[u8]) -> Self {
        Self(Zeroizing::new(b.to_vec()))
    }

    fn to_biguint(&self) -> BigUint {
        BigUint::from_bytes_be(&self.0)
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Scalar(..)")
    }
}

/// A cyclic group with generator `g` in which exponents commute.
pub trait GroupAlgebra: Send + Sync + fmt::Debug {
    fn profile(&self) -> &str;
    fn element_len(&self) -> usize;
    fn generator(&self) -> Element;
    fn exp(&self, base: &Element, k: &Scalar) -> Result<Element, SglError>;
    fn random_scalar(&self, rng: &mut dyn RngCore) -> Scalar;
    fn validate(&self, e: &Element) -> Result<(), SglError>;
}

/// Multiplicative group modulo a prime, generated by `g` of order `order`.
#[derive(Clone)]
pub struct ModPGroup {
    name: String,
    p: BigUint,
    g: BigUint,
    order: BigUint,
    width: usize,
    /// Upper bound on random exponents; short exponents keep large groups fast.
    scalar_bound: BigUint,
    /// Reject 1 and p-1; only meaningful for prime-order subgroups.
    reject_small_order: bool,
}

impl fmt::Debug for ModPGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModPGroup({})", self.name)
    }
}

// RFC 3526 group 14.
const MODP_2048_HEX: &[u8] = b"FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7EDEE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3BE39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF6955817183995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF";

impl ModPGroup {
    pub fn new(name: &str, p: BigUint, g: BigUint, order: BigUint) -> Self {
        let width = p.bits().div_ceil(8) as usize;
        let scalar_bound = order.clone();
        Self {
            name: name.to_string(),
            p,
            g,
            order,
            width,
            scalar_bound,
            reject_small_order: false,
        }
    }

    /// p = 23, g = 5 (a primitive root, so the group has order 22).
    pub fn toy() -> Self {
        Self::new("toy-23", 23u32.into(), 5u32.into(), 22u32.into())
    }

    /// 2048-bit safe prime; g = 2 generates the subgroup of prime order
    /// (p-1)/2. Exponents are drawn from 256 bits.
    pub fn modp2048() -> Self {
        let p = BigUint::parse_bytes(MODP_2048_HEX, 16).expect("constant prime");
        let order = (&p - 1u32) >> 1;
        let mut group = Self::new("modp-2048", p, 2u32.into(), order);
        group.scalar_bound = BigUint::from(1u32) << 256;
        group.reject_small_order = true;
        group
    }

    pub fn modulus(&self) -> &BigUint {
        &self.p
    }

    pub fn scalar(&self, k: u64) -> Scalar {
        Scalar::from_be_bytes(&BigUint::from(k).to_bytes_be())
    }

    pub fn element(&self, v: &BigUint) -> Element {
        let raw = v.to_bytes_be();
        let mut out = vec![0u8; self.width];
        out[self.width - raw.len()..].copy_from_slice(&raw);
        Element(out)
    }

    pub fn value(&self, e: &Element) -> BigUint {
        BigUint::from_bytes_be(&e.0)
    }
}

impl GroupAlgebra for ModPGroup {
    fn profile(&self) -> &str {
        &self.name
    }

    fn element_len(&self) -> usize {
        self.width
    }

    fn generator(&self) -> Element {
        self.element(&self.g)
    }

    fn exp(&self, base: &Element, k: &Scalar) -> Result<Element, SglError> {
        self.validate(base)?;
        let k = k.to_biguint();
        if k == BigUint::from(0u32) {
            return Err(SglError::BadElement);
        }
        Ok(self.element(&self.value(base).modpow(&k, &self.p)))
    }

    fn random_scalar(&self, rng: &mut dyn RngCore) -> Scalar {
        let one = BigUint::from(1u32);
        // Uniform in [1, bound - 1].
        let k = rng.gen_biguint_range(&one, &self.scalar_bound.clone().min(self.order.clone()));
        Scalar::from_be_bytes(&k.to_bytes_be())
    }

    fn validate(&self, e: &Element) -> Result<(), SglError> {
        if e.0.len() != self.width {
            return Err(SglError::BadElement);
        }
        let v = self.value(e);
        let zero = BigUint::from(0u32);
        if v == zero || v >= self.p {
            return Err(SglError::BadElement);
        }
        if self.reject_small_order && (v == BigUint::from(1u32) || v == &self.p - 1u32) {
            return Err(SglError::BadElement);
        }
        Ok(())
    }
}
