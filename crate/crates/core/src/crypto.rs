//! Hashing, key derivation and AEAD primitives consumed by the protocol.
//!
//! Fixed project-wide choices: SHA-256 for `H`, HKDF-SHA256 for the KDF and
//! ChaCha20-Poly1305 (RFC 8439) as the AEAD. Tags are 16 bytes.

use std::collections::HashSet;
use std::fmt;

use chacha20poly1305::aead::AeadInOut;
use chacha20poly1305::{ChaCha20Poly1305, KeyInit};
use hkdf::Hkdf;
use sha2::{Digest as _, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

pub const DIGEST_LEN: usize = 32;
pub const KEY_LEN: usize = 32;
pub const TAG_LEN: usize = 16;

/// Largest HKDF-SHA256 output: 255 blocks of 32 bytes.
pub const KDF_MAX_BITS: usize = 255 * DIGEST_LEN * 8;

/// Salt fed to every KDF extract step.
pub const PROTOCOL_SALT: &[u8] = b"phenoauth/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("requested {requested} bits, extract-then-expand bound is {max}")]
    LengthExceeded { requested: usize, max: usize },
    #[error("kdf output length must be a positive multiple of 8 bits, got {0}")]
    BadLength(usize),
    #[error("kdf seed is empty")]
    EmptySeed,
    #[error("nonce counter {0} already used under this key")]
    NonceReuse(u64),
    #[error("nonce counter {counter} does not belong to role {role:?}")]
    WrongParity { counter: u64, role: NonceRole },
    #[error("authentication failure")]
    AuthFailure,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

impl AsRef<[u8]> for Digest {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyRole {
    SessionKey,
    Subkey,
}

/// Secret key material. Never part of a wire message; wiped on drop.
#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct SymmetricKey {
    bytes: Vec<u8>,
    #[zeroize(skip)]
    role: KeyRole,
}

impl SymmetricKey {
    pub fn new(bytes: Vec<u8>, role: KeyRole) -> Self {
        Self { bytes, role }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn role(&self) -> KeyRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

impl PartialEq for SymmetricKey {
    fn eq(&self, other: &Self) -> bool {
        self.bytes.ct_eq(&other.bytes).into()
    }
}

impl Eq for SymmetricKey {}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymmetricKey({:?}, {} bytes)", self.role, self.bytes.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AeadOutput {
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NonceCounter(pub u64);

impl NonceCounter {
    /// 96-bit AEAD nonce: the counter little-endian, zero padded.
    pub fn to_nonce(self) -> [u8; 12] {
        let mut nonce = [0u8; 12];
        nonce[..8].copy_from_slice(&self.0.to_le_bytes());
        nonce
    }
}

/// Which half of the counter space a party may seal under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonceRole {
    /// Even counters.
    Prover,
    /// Odd counters.
    Verifier,
}

impl NonceRole {
    pub fn owns(self, counter: NonceCounter) -> bool {
        match self {
            NonceRole::Prover => counter.0.is_multiple_of(2),
            NonceRole::Verifier => counter.0 % 2 == 1,
        }
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Hash of the concatenation of `parts`, without materializing it.
pub fn hash_concat(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}

/// HKDF-SHA256 extract-then-expand. `length_bits` must be a whole number of
/// bytes.
pub fn kdf(
    seed: &[u8],
    length_bits: usize,
    salt: &[u8],
    context: &[u8],
) -> Result<SymmetricKey, CryptoError> {
    let extracted = Extracted::new(seed, salt)?;
    extracted.expand(length_bits, context)
}

/// The PRK of one extract step, able to serve several expand calls. One
/// `Extracted` is one KDF invocation as far as the cost model is concerned.
pub struct Extracted(Hkdf<Sha256>);

impl Extracted {
    pub fn new(seed: &[u8], salt: &[u8]) -> Result<Self, CryptoError> {
        if seed.is_empty() {
            return Err(CryptoError::EmptySeed);
        }
        Ok(Self(Hkdf::<Sha256>::new(Some(salt), seed)))
    }

    pub fn expand(&self, length_bits: usize, context: &[u8]) -> Result<SymmetricKey, CryptoError> {
        if length_bits > KDF_MAX_BITS {
            return Err(CryptoError::LengthExceeded {
                requested: length_bits,
                max: KDF_MAX_BITS,
            });
        }
        if length_bits == 0 || !length_bits.is_multiple_of(8) {
            return Err(CryptoError::BadLength(length_bits));
        }
        let mut okm = vec![0u8; length_bits / 8];
        self.0
            .expand(context, &mut okm)
            .map_err(|_| CryptoError::LengthExceeded {
                requested: length_bits,
                max: KDF_MAX_BITS,
            })?;
        let role = if context == b"mk" {
            KeyRole::SessionKey
        } else {
            KeyRole::Subkey
        };
        Ok(SymmetricKey::new(okm, role))
    }
}

fn cipher(key: &SymmetricKey) -> ChaCha20Poly1305 {
    ChaCha20Poly1305::new_from_slice(key.as_bytes()).expect("AEAD key must be 32 bytes")
}

pub fn aead_encrypt(key: &SymmetricKey, n: NonceCounter, ad: &[u8], m: &[u8]) -> AeadOutput {
    let mut ciphertext = m.to_vec();
    let nonce = n.to_nonce();
    let tag = cipher(key)
        .encrypt_inout_detached((&nonce).into(), ad, ciphertext.as_mut_slice().into())
        .expect("plaintext within AEAD limits");
    AeadOutput {
        ciphertext,
        tag: tag.into(),
    }
}

pub fn aead_decrypt(
    key: &SymmetricKey,
    n: NonceCounter,
    ad: &[u8],
    c: &AeadOutput,
) -> Result<Vec<u8>, CryptoError> {
    decrypt_parts(key, n, ad, &c.ciphertext, &c.tag)
}

/// Decrypt from raw wire parts. A tag of the wrong length is an
/// authentication failure, not a panic.
pub fn decrypt_parts(
    key: &SymmetricKey,
    n: NonceCounter,
    ad: &[u8],
    ciphertext: &[u8],
    tag: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let tag: [u8; TAG_LEN] = tag.try_into().map_err(|_| CryptoError::AuthFailure)?;
    let mut buf = ciphertext.to_vec();
    let nonce = n.to_nonce();
    cipher(key)
        .decrypt_inout_detached((&nonce).into(), ad, buf.as_mut_slice().into(), (&tag).into())
        .map_err(|_| CryptoError::AuthFailure)?;
    Ok(buf)
}

/// Verification by re-encryption: recompute `(α, tag)` for the expected
/// plaintext and compare both in constant time.
pub fn verify_by_reencrypt(
    key: &SymmetricKey,
    n: NonceCounter,
    ad: &[u8],
    expected_plaintext: &[u8],
    ciphertext: &[u8],
    tag: &[u8],
) -> bool {
    let recomputed = aead_encrypt(key, n, ad, expected_plaintext);
    let ct_ok = recomputed.ciphertext.ct_eq(ciphertext);
    let tag_ok = recomputed.tag.as_slice().ct_eq(tag);
    (ct_ok & tag_ok).into()
}

/// Per-session sealing state: owns the key, enforces counter parity and
/// refuses to seal twice under one counter.
pub struct SessionAead {
    key: SymmetricKey,
    role: NonceRole,
    sealed: HashSet<u64>,
}

impl SessionAead {
    pub fn new(key: SymmetricKey, role: NonceRole) -> Self {
        Self {
            key,
            role,
            sealed: HashSet::new(),
        }
    }

    pub fn key(&self) -> &SymmetricKey {
        &self.key
    }

    pub fn seal(&mut self, n: NonceCounter, ad: &[u8], m: &[u8]) -> Result<AeadOutput, CryptoError> {
        if !self.role.owns(n) {
            return Err(CryptoError::WrongParity {
                counter: n.0,
                role: self.role,
            });
        }
        if !self.sealed.insert(n.0) {
            return Err(CryptoError::NonceReuse(n.0));
        }
        Ok(aead_encrypt(&self.key, n, ad, m))
    }

    pub fn verify(&self, n: NonceCounter, ad: &[u8], expected: &[u8], ciphertext: &[u8], tag: &[u8]) -> bool {
        verify_by_reencrypt(&self.key, n, ad, expected, ciphertext, tag)
    }
}
