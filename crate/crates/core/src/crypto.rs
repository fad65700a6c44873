//! Cryptographic primitives shared by every component of the simulator.
//!
//! Algorithm choices: SHA-256 for hashing, Ed25519 for signatures,
//! AES-128-GCM for authenticated encryption, X25519 + HKDF-SHA256 + AES-128-GCM
//! for hybrid public-key encryption, HMAC-SHA256 for local-attestation MACs
//! and HKDF-SHA256 for seal-key derivation.
//!
//! Every randomized operation takes its randomness from an explicit RNG so a
//! whole run can be replayed from a single seed.

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce as GcmNonce};
use ed25519_dalek::Signer;
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("authentication failure")]
    AuthenticationFailure,
    #[error("decryption failure")]
    DecryptionFailure,
    #[error("malformed key material")]
    MalformedKey,
}

/// Fixed-size byte newtypes. Hex in human-readable formats, raw bytes
/// (no length prefix) in the canonical binary encoding.
macro_rules! byte_newtype {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_slice(bytes: &[u8]) -> Option<Self> {
                bytes.try_into().ok().map(Self)
            }
        }

        impl std::fmt::Debug for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}({})", stringify!($name), &self.to_hex()[..16])
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl serde::Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                if s.is_human_readable() {
                    s.serialize_str(&self.to_hex())
                } else {
                    use serde::ser::SerializeTuple;
                    let mut t = s.serialize_tuple($len)?;
                    for b in &self.0 {
                        t.serialize_element(b)?;
                    }
                    t.end()
                }
            }
        }

        impl<'de> serde::Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                struct V;
                impl<'de> serde::de::Visitor<'de> for V {
                    type Value = $name;
                    fn expecting(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                        write!(f, "{} bytes", $len)
                    }
                    fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<$name, E> {
                        let raw = hex::decode(v).map_err(E::custom)?;
                        $name::from_slice(&raw).ok_or_else(|| E::invalid_length(raw.len(), &self))
                    }
                    fn visit_seq<A: serde::de::SeqAccess<'de>>(self, mut seq: A) -> Result<$name, A::Error> {
                        let mut out = [0u8; $len];
                        for (i, slot) in out.iter_mut().enumerate() {
                            *slot = seq
                                .next_element()?
                                .ok_or_else(|| serde::de::Error::invalid_length(i, &self))?;
                        }
                        Ok($name(out))
                    }
                }
                if d.is_human_readable() {
                    d.deserialize_str(V)
                } else {
                    d.deserialize_tuple($len, V)
                }
            }
        }
    };
}

pub(crate) use byte_newtype;

byte_newtype!(
    /// SHA-256 output.
    Digest,
    32
);
byte_newtype!(
    /// Ed25519 verification key.
    PublicKey,
    32
);
byte_newtype!(
    /// Ed25519 signature.
    Signature,
    64
);
byte_newtype!(
    /// 128-bit symmetric key.
    SymmetricKey,
    16
);
byte_newtype!(
    /// 96-bit AEAD nonce.
    Nonce,
    12
);
byte_newtype!(
    /// HMAC-SHA256 tag.
    Tag,
    32
);
byte_newtype!(
    /// X25519 public key used as a hybrid-encryption recipient.
    BoxPublicKey,
    32
);

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

impl SymmetricKey {
    pub fn random(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let mut k = [0u8; 16];
        rng.fill_bytes(&mut k);
        Self(k)
    }
}

impl Nonce {
    pub fn random(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let mut n = [0u8; 12];
        rng.fill_bytes(&mut n);
        Self(n)
    }
}

/// Ed25519 signing key together with its public half.
#[derive(Clone)]
pub struct SigningKeyPair {
    secret: ed25519_dalek::SigningKey,
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair").field("public", &self.public()).finish_non_exhaustive()
    }
}

impl SigningKeyPair {
    pub fn generate(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        Self { secret: ed25519_dalek::SigningKey::generate(rng) }
    }

    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        Self { secret: ed25519_dalek::SigningKey::from_bytes(&bytes) }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.secret.verifying_key().to_bytes())
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.secret.sign(message).to_bytes())
    }
}

/// Strict Ed25519 verification. Malformed keys verify nothing.
pub fn verify(public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    key.verify_strict(message, &sig).is_ok()
}

/// AES-128-GCM. The returned bytes are ciphertext followed by the 16-byte tag.
pub fn aead_encrypt(key: &SymmetricKey, nonce: &Nonce, plaintext: &[u8], associated_data: &[u8]) -> Vec<u8> {
    nonce_registry::record(key, nonce);
    let cipher = Aes128Gcm::new_from_slice(&key.0).expect("16-byte key");
    cipher
        .encrypt(GcmNonce::from_slice(&nonce.0), Payload { msg: plaintext, aad: associated_data })
        .expect("AES-GCM encryption of in-memory buffers cannot fail")
}

pub fn aead_decrypt(
    key: &SymmetricKey,
    nonce: &Nonce,
    ciphertext: &[u8],
    associated_data: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = Aes128Gcm::new_from_slice(&key.0).expect("16-byte key");
    cipher
        .decrypt(GcmNonce::from_slice(&nonce.0), Payload { msg: ciphertext, aad: associated_data })
        .map_err(|_| CryptoError::AuthenticationFailure)
}

/// X25519 static secret for receiving hybrid-encrypted envelopes.
#[derive(Clone)]
pub struct BoxKeyPair {
    secret: x25519_dalek::StaticSecret,
}

impl fmt::Debug for BoxKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoxKeyPair").field("public", &self.public()).finish_non_exhaustive()
    }
}

impl BoxKeyPair {
    pub fn generate(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        Self { secret: x25519_dalek::StaticSecret::random_from_rng(rng) }
    }

    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        Self { secret: x25519_dalek::StaticSecret::from(bytes) }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }

    pub fn public(&self) -> BoxPublicKey {
        BoxPublicKey(x25519_dalek::PublicKey::from(&self.secret).to_bytes())
    }
}

/// Hybrid-encrypted message: ephemeral X25519 key, AEAD nonce and ciphertext.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub ephemeral: BoxPublicKey,
    pub nonce: Nonce,
    pub ciphertext: Vec<u8>,
}

fn envelope_key(shared: &[u8; 32], ephemeral: &BoxPublicKey, recipient: &BoxPublicKey) -> SymmetricKey {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(&ephemeral.0);
    salt[32..].copy_from_slice(&recipient.0);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut out = [0u8; 16];
    hk.expand(b"hybrid-envelope/v1", &mut out).expect("16 bytes is a valid HKDF length");
    SymmetricKey(out)
}

pub fn hybrid_encrypt(recipient: &BoxPublicKey, plaintext: &[u8], rng: &mut (impl RngCore + CryptoRng)) -> Envelope {
    let eph = x25519_dalek::StaticSecret::random_from_rng(&mut *rng);
    let eph_pub = BoxPublicKey(x25519_dalek::PublicKey::from(&eph).to_bytes());
    let shared = eph.diffie_hellman(&x25519_dalek::PublicKey::from(recipient.0));
    let key = envelope_key(shared.as_bytes(), &eph_pub, recipient);
    let nonce = Nonce::random(rng);
    let ciphertext = aead_encrypt(&key, &nonce, plaintext, &eph_pub.0);
    Envelope { ephemeral: eph_pub, nonce, ciphertext }
}

pub fn hybrid_decrypt(recipient: &BoxKeyPair, envelope: &Envelope) -> Result<Vec<u8>, CryptoError> {
    let shared = recipient.secret.diffie_hellman(&x25519_dalek::PublicKey::from(envelope.ephemeral.0));
    if !shared.was_contributory() {
        return Err(CryptoError::DecryptionFailure);
    }
    let key = envelope_key(shared.as_bytes(), &envelope.ephemeral, &recipient.public());
    aead_decrypt(&key, &envelope.nonce, &envelope.ciphertext, &envelope.ephemeral.0)
        .map_err(|_| CryptoError::DecryptionFailure)
}

pub fn mac(key: &SymmetricKey, message: &[u8]) -> Tag {
    let mut m = <Hmac<Sha256> as Mac>::new_from_slice(&key.0).expect("HMAC accepts any key length");
    m.update(message);
    Tag(m.finalize().into_bytes().into())
}

pub fn mac_verify(key: &SymmetricKey, message: &[u8], tag: &Tag) -> bool {
    let mut m = <Hmac<Sha256> as Mac>::new_from_slice(&key.0).expect("HMAC accepts any key length");
    m.update(message);
    m.verify_slice(&tag.0).is_ok()
}

/// Labelled key derivation from a root secret.
pub fn derive_key(root: &SymmetricKey, label: &[u8], context: &[u8]) -> SymmetricKey {
    let hk = Hkdf::<Sha256>::new(None, &root.0);
    let mut out = [0u8; 16];
    hk.expand_multi_info(&[label, &[0u8], context], &mut out).expect("16 bytes is a valid HKDF length");
    SymmetricKey(out)
}

pub fn derive_seal_key(platform_secret: &SymmetricKey, measurement: &Digest) -> SymmetricKey {
    derive_key(platform_secret, b"seal-key", &measurement.0)
}

/// Authenticated blob produced by enclave sealing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBlob {
    pub producer_measurement: Digest,
    pub nonce: Nonce,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; 16],
}

impl SealedBlob {
    pub fn seal(
        key: &SymmetricKey,
        producer_measurement: Digest,
        payload: &[u8],
        rng: &mut (impl RngCore + CryptoRng),
    ) -> Self {
        let nonce = Nonce::random(rng);
        let mut ct = aead_encrypt(key, &nonce, payload, &producer_measurement.0);
        let tag: [u8; 16] = ct.split_off(ct.len() - 16).try_into().expect("GCM tag is 16 bytes");
        Self { producer_measurement, nonce, ciphertext: ct, tag }
    }

    pub fn open(&self, key: &SymmetricKey) -> Result<Vec<u8>, CryptoError> {
        let mut ct = self.ciphertext.clone();
        ct.extend_from_slice(&self.tag);
        aead_decrypt(key, &self.nonce, &ct, &self.producer_measurement.0)
    }
}

/// Debug-build detector for AEAD nonce reuse under one key.
///
/// Recording is armed per thread so concurrently running simulations that
/// deliberately replay an identical seed do not trip each other.
pub mod nonce_registry {
    use std::cell::Cell;
    use std::collections::HashSet;
    use std::sync::Mutex;

    use super::{Nonce, SymmetricKey};

    static SEEN: Mutex<Option<HashSet<[u8; 28]>>> = Mutex::new(None);

    thread_local! {
        static ARMED: Cell<bool> = const { Cell::new(false) };
    }

    /// Arms the detector on the current thread until the guard is dropped.
    pub fn arm() -> Guard {
        ARMED.with(|a| a.set(true));
        Guard(())
    }

    pub struct Guard(());

    impl Drop for Guard {
        fn drop(&mut self) {
            ARMED.with(|a| a.set(false));
        }
    }

    pub(super) fn record(key: &SymmetricKey, nonce: &Nonce) {
        if !cfg!(debug_assertions) || !ARMED.with(|a| a.get()) {
            return;
        }
        let mut entry = [0u8; 28];
        entry[..16].copy_from_slice(&key.0);
        entry[16..].copy_from_slice(&nonce.0);
        let fresh = SEEN.lock().unwrap().get_or_insert_with(HashSet::new).insert(entry);
        debug_assert!(fresh, "AEAD nonce reused under the same key");
    }
}
