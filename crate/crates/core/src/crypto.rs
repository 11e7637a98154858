//! Hashing, signatures, page sealing, the simulated boot-time key hierarchy
//! and the seeded random source.
//!
//! Primitives are SHA3-256, Ed25519 and AES-128-CTR. Sealed pages carry a
//! SHA3-256 tag over `mac_key || nonce || ciphertext`, where
//! `mac_key = SHA3-256(key || "mac")`.

use std::fmt;

use ctr::cipher::{KeyIvInit, StreamCipher};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use sha3::{Digest, Sha3_256};
use thiserror::Error;

use crate::machine::PAGE_SIZE;

type Aes128Ctr = ctr::Ctr128BE<aes::Aes128>;

pub const NONCE_LEN: usize = 16;
pub const TAG_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("malformed public key")]
    MalformedKey,
    #[error("integrity check failed")]
    IntegrityError,
    #[error("sealed input must be exactly one page, got {0} bytes")]
    BadPageSize(usize),
    #[error("sealed message is truncated")]
    Truncated,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Measurement(pub [u8; 32]);

impl Measurement {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s.trim()).ok()?;
        Some(Measurement(bytes.try_into().ok()?))
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", self.to_hex())
    }
}

pub fn hash(data: &[u8]) -> Measurement {
    Measurement(Sha3_256::digest(data).into())
}

/// Incremental SHA3-256.
#[derive(Clone, Default)]
pub struct Hasher(Sha3_256);

impl Hasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, data: &[u8]) -> &mut Self {
        self.0.update(data);
        self
    }

    pub fn finish(&self) -> Measurement {
        Measurement(self.0.clone().finalize().into())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey(pub [u8; 32]);

impl PublicKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s.trim()).map_err(|_| CryptoError::MalformedKey)?;
        let bytes: [u8; 32] = bytes.try_into().map_err(|_| CryptoError::MalformedKey)?;
        Ok(PublicKey(bytes))
    }

    fn verifying_key(&self) -> Result<VerifyingKey, CryptoError> {
        VerifyingKey::from_bytes(&self.0).map_err(|_| CryptoError::MalformedKey)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.to_hex())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(self.0))
    }
}

/// An Ed25519 key pair. `Debug` never prints the secret half.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    /// Key pair from a 32-byte Ed25519 seed.
    pub fn from_seed(seed: [u8; 32]) -> Self {
        KeyPair { signing: SigningKey::from_bytes(&seed) }
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.signing.sign(msg).to_bytes())
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public()).finish_non_exhaustive()
    }
}

pub fn sign(key: &KeyPair, msg: &[u8]) -> Signature {
    key.sign(msg)
}

/// Strict Ed25519 verification. Malformed keys verify false.
pub fn verify(public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = public.verifying_key() else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify_strict(msg, &sig).is_ok()
}

/// Checked variant of [`verify`] that reports malformed keys.
pub fn try_verify(public: &PublicKey, msg: &[u8], sig: &Signature) -> Result<bool, CryptoError> {
    public.verifying_key()?;
    Ok(verify(public, msg, sig))
}

fn mac_key(key: &[u8; 16]) -> Measurement {
    Hasher::new().update(key).update(b"mac").finish()
}

fn tag(key: &[u8; 16], nonce: &[u8; NONCE_LEN], ciphertext: &[u8]) -> [u8; TAG_LEN] {
    Hasher::new().update(&mac_key(key).0).update(nonce).update(ciphertext).finish().0
}

fn apply_ctr(key: &[u8; 16], nonce: &[u8; NONCE_LEN], buf: &mut [u8]) {
    let mut cipher = Aes128Ctr::new(key.into(), nonce.into());
    cipher.apply_keystream(buf);
}

/// An evicted page as stored outside protected memory.
#[derive(Clone, PartialEq, Eq)]
pub struct SealedPage {
    pub ciphertext: Vec<u8>,
    pub nonce: [u8; NONCE_LEN],
    pub tag: [u8; TAG_LEN],
}

impl SealedPage {
    /// Serialized size: ciphertext, nonce, tag.
    pub const LEN: usize = PAGE_SIZE as usize + NONCE_LEN + TAG_LEN;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != Self::LEN {
            return Err(CryptoError::Truncated);
        }
        let page = PAGE_SIZE as usize;
        Ok(SealedPage {
            ciphertext: bytes[..page].to_vec(),
            nonce: bytes[page..page + NONCE_LEN].try_into().expect("nonce"),
            tag: bytes[page + NONCE_LEN..].try_into().expect("tag"),
        })
    }
}

impl fmt::Debug for SealedPage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SealedPage")
            .field("nonce", &hex::encode(self.nonce))
            .field("tag", &hex::encode(self.tag))
            .finish_non_exhaustive()
    }
}

pub fn seal_page(key: &[u8; 16], nonce: [u8; NONCE_LEN], plaintext: &[u8]) -> Result<SealedPage, CryptoError> {
    if plaintext.len() != PAGE_SIZE as usize {
        return Err(CryptoError::BadPageSize(plaintext.len()));
    }
    let mut ciphertext = plaintext.to_vec();
    apply_ctr(key, &nonce, &mut ciphertext);
    let tag = tag(key, &nonce, &ciphertext);
    Ok(SealedPage { ciphertext, nonce, tag })
}

/// Verify the tag, then decrypt.
pub fn unseal_page(key: &[u8; 16], page: &SealedPage) -> Result<Vec<u8>, CryptoError> {
    if page.ciphertext.len() != PAGE_SIZE as usize {
        return Err(CryptoError::BadPageSize(page.ciphertext.len()));
    }
    if tag(key, &page.nonce, &page.ciphertext) != page.tag {
        return Err(CryptoError::IntegrityError);
    }
    let mut plain = page.ciphertext.clone();
    apply_ctr(key, &page.nonce, &mut plain);
    Ok(plain)
}

/// Seal an arbitrary-length message as `nonce || ciphertext || tag`.
pub fn seal_message(key: &[u8; 16], nonce: [u8; NONCE_LEN], plaintext: &[u8]) -> Vec<u8> {
    let mut ct = plaintext.to_vec();
    apply_ctr(key, &nonce, &mut ct);
    let t = tag(key, &nonce, &ct);
    let mut out = Vec::with_capacity(NONCE_LEN + ct.len() + TAG_LEN);
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&ct);
    out.extend_from_slice(&t);
    out
}

pub fn open_message(key: &[u8; 16], sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < NONCE_LEN + TAG_LEN {
        return Err(CryptoError::Truncated);
    }
    let nonce: [u8; NONCE_LEN] = sealed[..NONCE_LEN].try_into().expect("nonce");
    let (ct, t) = sealed[NONCE_LEN..].split_at(sealed.len() - NONCE_LEN - TAG_LEN);
    if tag(key, &nonce, ct) != t {
        return Err(CryptoError::IntegrityError);
    }
    let mut plain = ct.to_vec();
    apply_ctr(key, &nonce, &mut plain);
    Ok(plain)
}

/// X25519 public share for a 32-byte secret.
pub fn dh_public(secret: &[u8; 32]) -> [u8; 32] {
    x25519_dalek::x25519(*secret, x25519_dalek::X25519_BASEPOINT_BYTES)
}

pub fn dh_shared(secret: &[u8; 32], peer_public: &[u8; 32]) -> [u8; 32] {
    x25519_dalek::x25519(*secret, *peer_public)
}

/// SplitMix64. Same seed, same stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `0..bound` (bound > 0), by rejection.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    pub fn fill_bytes(&mut self, out: &mut [u8]) {
        for chunk in out.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

pub fn next_random(rng: &mut Rng) -> u64 {
    rng.next_u64()
}

/// Signed statement binding the SM measurement to its attestation key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootCertificate {
    pub sm_measurement: Measurement,
    pub sm_public: PublicKey,
    pub device_signature: Signature,
}

impl BootCertificate {
    pub const LEN: usize = 32 + 32 + 64;

    /// The bytes the device key signs.
    pub fn signed_bytes(sm_measurement: &Measurement, sm_public: &PublicKey) -> [u8; 64] {
        let mut msg = [0u8; 64];
        msg[..32].copy_from_slice(&sm_measurement.0);
        msg[32..].copy_from_slice(&sm_public.0);
        msg
    }

    pub fn verify(&self, device: &PublicKey) -> bool {
        verify(device, &Self::signed_bytes(&self.sm_measurement, &self.sm_public), &self.device_signature)
    }

    pub fn to_bytes(&self) -> [u8; Self::LEN] {
        let mut out = [0u8; Self::LEN];
        out[..32].copy_from_slice(&self.sm_measurement.0);
        out[32..64].copy_from_slice(&self.sm_public.0);
        out[64..].copy_from_slice(&self.device_signature.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != Self::LEN {
            return None;
        }
        Some(BootCertificate {
            sm_measurement: Measurement(bytes[..32].try_into().ok()?),
            sm_public: PublicKey(bytes[32..64].try_into().ok()?),
            device_signature: Signature(bytes[64..].try_into().ok()?),
        })
    }
}

/// What the root of trust hands the security monitor at reset.
#[derive(Debug, Clone)]
pub struct BootRecord {
    pub sm_measurement: Measurement,
    pub attest_key: KeyPair,
    pub certificate: BootCertificate,
}

/// The trusted hardware: a device-unique signing key reachable only through
/// [`Device::secure_boot`].
pub struct Device {
    secret: SigningKey,
}

impl Device {
    /// Domain separator for device key derivation.
    pub const KEY_LABEL: &'static [u8] = b"teesim-device-key";

    /// Deterministic per-device key: `SHA3-256(KEY_LABEL || id_le)`.
    pub fn from_id(id: u64) -> Self {
        let seed = Hasher::new().update(Self::KEY_LABEL).update(&id.to_le_bytes()).finish();
        Device { secret: SigningKey::from_bytes(&seed.0) }
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.secret.verifying_key().to_bytes())
    }

    /// Measure the SM image, derive a fresh attestation key from `seed`, and
    /// sign the measurement together with the attestation public key.
    pub fn secure_boot(&self, sm_image: &[u8], seed: u64) -> BootRecord {
        let sm_measurement = hash(sm_image);
        let attest_seed = Hasher::new()
            .update(b"teesim-attest-key")
            .update(&self.secret.to_bytes())
            .update(&seed.to_le_bytes())
            .update(&sm_measurement.0)
            .finish();
        let attest_key = KeyPair::from_seed(attest_seed.0);
        let sm_public = attest_key.public();
        let device_signature =
            Signature(self.secret.sign(&BootCertificate::signed_bytes(&sm_measurement, &sm_public)).to_bytes());
        BootRecord {
            sm_measurement,
            attest_key,
            certificate: BootCertificate { sm_measurement, sm_public, device_signature },
        }
    }
}

impl fmt::Debug for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Device").field("public", &self.public_key()).finish_non_exhaustive()
    }
}
