//! State access for chaincodes.
//!
//! A chaincode only sees the [`Shim`] trait. Inside an enclave the shim is
//! [`EnclaveShim`], which fetches values from the untrusted host, checks them
//! against metadata signed by the bound ledger enclave and decrypts them.
//! [`NativeShim`] reads a store directly and is the unprotected reference
//! path used for baselines and oracle comparisons.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;
use crate::crypto::{self, Digest, Nonce, PublicKey, SymmetricKey};
use crate::ledger::{namespaced, ReadSet, StoredValue, VersionedStore, WriteSet};
use crate::ledger_enclave::{le_get_meta, LeError, MetaRequest, MetaResponse};
use crate::tee::{EnclaveEnv, EnclaveInstance, Host};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ShimError {
    #[error("state returned by the host failed verification")]
    StateVerificationFailure,
    #[error("state value could not be decrypted")]
    DecryptionFailure,
}

/// The state interface a chaincode programs against. Keys are local to the
/// chaincode's namespace.
pub trait Shim {
    fn get_state(&mut self, key: &str) -> Result<Option<Vec<u8>>, ShimError>;
    fn put_state(&mut self, key: &str, value: Vec<u8>) -> Result<(), ShimError>;
    /// All keys starting with `prefix`, in key order.
    fn get_range(&mut self, prefix: &str) -> Result<Vec<(String, Vec<u8>)>, ShimError>;
}

/// Host services behind the enclave's state ocalls. Implementations are
/// untrusted; adversarial ones may answer anything.
pub trait StateAccess {
    fn get_state(&mut self, key: &str) -> Option<StoredValue>;
    fn get_range(&mut self, prefix: &str) -> Vec<(String, StoredValue)>;
    fn get_meta(&mut self, request: &MetaRequest) -> Result<MetaResponse, LeError>;
}

/// Honest host: committed store plus the local ledger enclave.
pub struct HonestAccess<'a> {
    pub store: &'a VersionedStore,
    pub ledger_enclave: &'a mut EnclaveInstance,
}

impl StateAccess for HonestAccess<'_> {
    fn get_state(&mut self, key: &str) -> Option<StoredValue> {
        self.store.get(key).cloned()
    }

    fn get_range(&mut self, prefix: &str) -> Vec<(String, StoredValue)> {
        self.store.range(prefix).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    fn get_meta(&mut self, request: &MetaRequest) -> Result<MetaResponse, LeError> {
        le_get_meta(self.ledger_enclave, request)
    }
}

/// Serves the enclave's byte-level ocalls from a [`StateAccess`].
pub struct OcallHost<'a> {
    pub access: &'a mut dyn StateAccess,
}

impl Host for OcallHost<'_> {
    fn ocall(&mut self, name: &str, args: &[u8]) -> Vec<u8> {
        match name {
            "get_state" => match codec::decode::<String>(args) {
                Ok(key) => codec::encode(&self.access.get_state(&key)),
                Err(_) => Vec::new(),
            },
            "get_range" => match codec::decode::<String>(args) {
                Ok(prefix) => codec::encode(&self.access.get_range(&prefix)),
                Err(_) => Vec::new(),
            },
            "get_meta" => match codec::decode::<MetaRequest>(args) {
                Ok(req) => codec::encode(&self.access.get_meta(&req)),
                Err(_) => Vec::new(),
            },
            _ => Vec::new(),
        }
    }
}

/// On-ledger form of an encrypted value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredCiphertext {
    pub nonce: Nonce,
    pub ciphertext: Vec<u8>,
}

/// Nonce for state encryption, derived from the transaction, key and value.
/// Every endorser of a transaction computes the same ciphertext, and a
/// (key, nonce) pair only repeats for an identical plaintext and key.
fn state_nonce(data_key: &SymmetricKey, proposal_digest: &Digest, full_key: &str, value: &[u8]) -> Nonce {
    let tag = crypto::mac(data_key, &codec::encode(&("state-nonce/v1", proposal_digest, full_key, value)));
    Nonce::from_slice(&tag.0[..Nonce::LEN]).expect("tag longer than nonce")
}

pub(crate) fn encrypt_value(
    data_key: &SymmetricKey,
    proposal_digest: &Digest,
    full_key: &str,
    value: &[u8],
) -> Vec<u8> {
    let nonce = state_nonce(data_key, proposal_digest, full_key, value);
    let ciphertext = crypto::aead_encrypt(data_key, &nonce, value, full_key.as_bytes());
    codec::encode(&StoredCiphertext { nonce, ciphertext })
}

pub(crate) fn decrypt_value(data_key: &SymmetricKey, full_key: &str, stored: &[u8]) -> Result<Vec<u8>, ShimError> {
    let sc: StoredCiphertext = codec::decode(stored).map_err(|_| ShimError::DecryptionFailure)?;
    crypto::aead_decrypt(data_key, &sc.nonce, &sc.ciphertext, full_key.as_bytes())
        .map_err(|_| ShimError::DecryptionFailure)
}

/// Checks a metadata response against the request that produced it and the
/// values the host supplied, entry by entry.
pub fn verify_meta(
    response: &MetaResponse,
    ledger_key: &PublicKey,
    keys: &[String],
    nonce: &[u8; 32],
    supplied: &[Option<&StoredValue>],
) -> Result<(), ShimError> {
    let fresh = &response.nonce == nonce;
    let same_keys = response.entries.len() == keys.len() && response.entries.iter().zip(keys).all(|(e, k)| &e.key == k);
    if !fresh || !same_keys || !response.verify(ledger_key) {
        return Err(ShimError::StateVerificationFailure);
    }
    for (entry, value) in response.entries.iter().zip(supplied) {
        let consistent = match (&entry.state, value) {
            (None, None) => true,
            (Some((h, v)), Some(sv)) => crypto::hash(&sv.value) == *h && sv.version == *v,
            _ => false,
        };
        if !consistent {
            return Err(ShimError::StateVerificationFailure);
        }
    }
    Ok(())
}

/// Per-invocation shim running inside a chaincode enclave.
pub(crate) struct EnclaveShim<'a, 'e> {
    pub host: &'a mut dyn Host,
    pub env: &'a mut EnclaveEnv<'e>,
    pub ledger_key: PublicKey,
    pub namespace: String,
    pub data_key: Option<SymmetricKey>,
    pub proposal_digest: Digest,
    pub trust_host: bool,
    pub reads: ReadSet,
    pub writes: WriteSet,
    pub pending: BTreeMap<String, Vec<u8>>,
}

impl EnclaveShim<'_, '_> {
    fn fresh_nonce(&mut self) -> [u8; 32] {
        let mut n = [0u8; 32];
        self.env.rng().fill_bytes(&mut n);
        n
    }

    fn meta(&mut self, keys: &[String], supplied: &[Option<&StoredValue>]) -> Result<(), ShimError> {
        if self.trust_host {
            return Ok(());
        }
        let nonce = self.fresh_nonce();
        let request = MetaRequest { keys: keys.to_vec(), nonce };
        let bytes = self.host.ocall("get_meta", &codec::encode(&request));
        let response = codec::decode::<Result<MetaResponse, LeError>>(&bytes)
            .ok()
            .and_then(Result::ok)
            .ok_or(ShimError::StateVerificationFailure)?;
        verify_meta(&response, &self.ledger_key, keys, &nonce, supplied)
    }

    fn open(&self, full_key: &str, stored: &[u8]) -> Result<Vec<u8>, ShimError> {
        match &self.data_key {
            Some(k) => decrypt_value(k, full_key, stored),
            None => Ok(stored.to_vec()),
        }
    }

    fn full(&self, key: &str) -> String {
        namespaced(&self.namespace, key)
    }
}

impl Shim for EnclaveShim<'_, '_> {
    fn get_state(&mut self, key: &str) -> Result<Option<Vec<u8>>, ShimError> {
        let full = self.full(key);
        if let Some(v) = self.pending.get(&full) {
            return Ok(Some(v.clone()));
        }
        let bytes = self.host.ocall("get_state", &codec::encode(&full));
        let stored: Option<StoredValue> = codec::decode(&bytes).map_err(|_| ShimError::StateVerificationFailure)?;
        self.meta(std::slice::from_ref(&full), &[stored.as_ref()])?;
        self.reads.record(&full, stored.as_ref().map(|s| s.version));
        stored.map(|s| self.open(&full, &s.value)).transpose()
    }

    fn put_state(&mut self, key: &str, value: Vec<u8>) -> Result<(), ShimError> {
        let full = self.full(key);
        let on_ledger = match &self.data_key {
            Some(k) => encrypt_value(k, &self.proposal_digest, &full, &value),
            None => value.clone(),
        };
        self.writes.put(&full, on_ledger);
        self.pending.insert(full, value);
        Ok(())
    }

    fn get_range(&mut self, prefix: &str) -> Result<Vec<(String, Vec<u8>)>, ShimError> {
        let full_prefix = self.full(prefix);
        let bytes = self.host.ocall("get_range", &codec::encode(&full_prefix));
        let candidates: Vec<(String, StoredValue)> =
            codec::decode(&bytes).map_err(|_| ShimError::StateVerificationFailure)?;
        let sorted_unique = candidates.windows(2).all(|w| w[0].0 < w[1].0);
        if !sorted_unique || candidates.iter().any(|(k, _)| !k.starts_with(&full_prefix)) {
            return Err(ShimError::StateVerificationFailure);
        }
        if !candidates.is_empty() {
            let keys: Vec<String> = candidates.iter().map(|(k, _)| k.clone()).collect();
            let supplied: Vec<Option<&StoredValue>> = candidates.iter().map(|(_, v)| Some(v)).collect();
            self.meta(&keys, &supplied)?;
        }
        let mut out = BTreeMap::new();
        for (k, v) in &candidates {
            self.reads.record(k, Some(v.version));
            out.insert(k.clone(), self.open(k, &v.value)?);
        }
        for (k, v) in self.pending.range(full_prefix.clone()..).take_while(|(k, _)| k.starts_with(&full_prefix)) {
            out.insert(k.clone(), v.clone());
        }
        let strip = self.namespace.len() + 1;
        Ok(out.into_iter().map(|(k, v)| (k[strip..].to_owned(), v)).collect())
    }
}

/// Unprotected shim over a store: no metadata checks, no encryption.
pub struct NativeShim<'a> {
    pub store: &'a VersionedStore,
    pub namespace: String,
    pub reads: ReadSet,
    pub writes: WriteSet,
}

impl<'a> NativeShim<'a> {
    pub fn new(store: &'a VersionedStore, namespace: &str) -> Self {
        Self { store, namespace: namespace.to_owned(), reads: ReadSet::new(), writes: WriteSet::new() }
    }
}

impl Shim for NativeShim<'_> {
    fn get_state(&mut self, key: &str) -> Result<Option<Vec<u8>>, ShimError> {
        let full = namespaced(&self.namespace, key);
        if let Some(v) = self.writes.get(&full) {
            return Ok(Some(v.to_vec()));
        }
        let stored = self.store.get(&full);
        self.reads.record(&full, stored.map(|s| s.version));
        Ok(stored.map(|s| s.value.clone()))
    }

    fn put_state(&mut self, key: &str, value: Vec<u8>) -> Result<(), ShimError> {
        self.writes.put(&namespaced(&self.namespace, key), value);
        Ok(())
    }

    fn get_range(&mut self, prefix: &str) -> Result<Vec<(String, Vec<u8>)>, ShimError> {
        let full_prefix = namespaced(&self.namespace, prefix);
        let mut out = BTreeMap::new();
        for (k, v) in self.store.range(&full_prefix) {
            self.reads.record(k, Some(v.version));
            out.insert(k.clone(), v.value.clone());
        }
        for w in self.writes.entries().iter().filter(|w| w.key.starts_with(&full_prefix)) {
            out.insert(w.key.clone(), w.value.clone());
        }
        let strip = self.namespace.len() + 1;
        Ok(out.into_iter().map(|(k, v)| (k[strip..].to_owned(), v)).collect())
    }
}
