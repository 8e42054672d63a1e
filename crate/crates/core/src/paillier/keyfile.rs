//! JSON key files.
//!
//! `{"version":1,"key_bits":…,"n":"<hex>","p":"<hex>","q":"<hex>"}`; the
//! public-only form omits `p` and `q`. Hex is lowercase without prefix or
//! leading zeros.

use num_bigint::BigUint;
use num_traits::Num;
use serde::{Deserialize, Serialize};

use super::{KeyPair, PaillierError, PublicKey, Result};

pub const KEY_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyFile {
    pub version: u32,
    pub key_bits: u32,
    pub n: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<String>,
}

#[derive(Debug, Clone)]
pub enum LoadedKey {
    Pair(KeyPair),
    Public(PublicKey),
}

impl LoadedKey {
    pub fn public_key(&self) -> &PublicKey {
        match self {
            LoadedKey::Pair(kp) => &kp.public,
            LoadedKey::Public(pk) => pk,
        }
    }
}

fn to_hex(x: &BigUint) -> String {
    x.to_str_radix(16)
}

fn from_hex(field: &str, s: &str) -> Result<BigUint> {
    let bad = || PaillierError::KeyFile(format!("field {field} is not canonical lowercase hex"));
    if s.is_empty() || (s.len() > 1 && s.starts_with('0')) {
        return Err(bad());
    }
    if !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return Err(bad());
    }
    BigUint::from_str_radix(s, 16).map_err(|_| bad())
}

impl KeyFile {
    pub fn from_pair(kp: &KeyPair) -> Self {
        Self {
            p: Some(to_hex(kp.private.p())),
            q: Some(to_hex(kp.private.q())),
            ..Self::from_public(&kp.public)
        }
    }

    pub fn from_public(pk: &PublicKey) -> Self {
        Self {
            version: KEY_FILE_VERSION,
            key_bits: pk.key_bits(),
            n: to_hex(pk.n()),
            p: None,
            q: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn parse(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    /// Validates the record and rebuilds the key it describes.
    pub fn load(&self) -> Result<LoadedKey> {
        if self.version != KEY_FILE_VERSION {
            return Err(PaillierError::KeyFile(format!("unsupported version {}", self.version)));
        }
        let n = from_hex("n", &self.n)?;
        if n.bits() != self.key_bits as u64 {
            return Err(PaillierError::KeyFile("key_bits does not match n".into()));
        }
        match (&self.p, &self.q) {
            (Some(p), Some(q)) => {
                let kp = KeyPair::from_primes(from_hex("p", p)?, from_hex("q", q)?)?;
                if kp.public.n() != &n {
                    return Err(PaillierError::KeyFile("p·q does not equal n".into()));
                }
                Ok(LoadedKey::Pair(kp))
            }
            (None, None) => Ok(LoadedKey::Public(PublicKey::from_modulus(n)?)),
            _ => Err(PaillierError::KeyFile("p and q must both be present or both absent".into())),
        }
    }
}
