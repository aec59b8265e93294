//! Fixed primitives shared by every module.

use chacha20poly1305::aead::{Aead, Payload};
use chacha20poly1305::{KeyInit, XChaCha20Poly1305, XNonce};
use rand::rngs::OsRng;
use rand::RngCore;
use sha2::{Digest, Sha256};

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 24;
pub const TAG_LEN: usize = 16;
pub const DIGEST_LEN: usize = 32;

pub type Digest256 = [u8; DIGEST_LEN];

/// SHA-256 over the concatenation of `parts`.
pub fn hash(parts: &[&[u8]]) -> Digest256 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

pub fn random_bytes<const N: usize>() -> [u8; N] {
    let mut out = [0u8; N];
    OsRng.fill_bytes(&mut out);
    out
}

/// Authentication failed. Deliberately carries no detail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AeadFailure;

/// Encrypts `plaintext`, returning ciphertext with the 16-byte tag appended.
pub fn seal(key: &[u8; KEY_LEN], nonce: &[u8; NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    let cipher = XChaCha20Poly1305::new(key.into());
    cipher
        .encrypt(XNonce::from_slice(nonce), Payload { msg: plaintext, aad })
        .expect("XChaCha20-Poly1305 encryption is infallible for in-memory buffers")
}

/// Inverse of [`seal`]; `sealed` is ciphertext followed by the tag.
pub fn open(key: &[u8; KEY_LEN], nonce: &[u8; NONCE_LEN], aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, AeadFailure> {
    let cipher = XChaCha20Poly1305::new(key.into());
    cipher
        .decrypt(XNonce::from_slice(nonce), Payload { msg: sealed, aad })
        .map_err(|_| AeadFailure)
}

/// Constant-time equality for secrets of equal public length.
pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Serde adapters rendering byte arrays as lowercase hex strings.
pub mod hex_serde {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(bytes: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(D::Error::custom)?;
        v.as_slice()
            .try_into()
            .map_err(|_| D::Error::custom(format!("expected {} hex-encoded bytes", N)))
    }

    pub mod list {
        use super::*;

        pub fn serialize<S: Serializer, const N: usize>(items: &[[u8; N]], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(items.iter().map(hex::encode))
        }

        pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<Vec<[u8; N]>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|s| {
                    let v = hex::decode(s).map_err(D::Error::custom)?;
                    v.as_slice()
                        .try_into()
                        .map_err(|_| D::Error::custom(format!("expected {} hex-encoded bytes", N)))
                })
                .collect()
        }
    }
}
