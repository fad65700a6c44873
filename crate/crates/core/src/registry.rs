//! Enclave registry chaincode and enclave transaction validator.
//!
//! Neither runs in an enclave. The registry records attestation verdicts on
//! the ledger; every consumer (clients, validators, ledger enclaves)
//! re-verifies a stored entry with the same predicate, [`check_entry`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaincode_enclave::EnclaveKey;
use crate::codec;
use crate::crypto::{Digest, PublicKey};
use crate::ledger::{
    namespaced, ChainConfig, EndorsementPolicy, EndorserId, PeerEndorsementPolicy, ReadSet, Transaction, TxValidity,
    VersionedStore, WriteSet,
};
use crate::tee::{AttestationReport, AttestationService, AttestationVerdict, ReportData};
use crate::Weakenings;

pub const REGISTRY_CHAINCODE: &str = "ercc";

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum RegistryError {
    #[error("measurement does not match the expected chaincode measurement")]
    MeasurementMismatch,
    #[error("report data does not commit to the enclave public key")]
    ReportDataMismatch,
    #[error("attestation verdict is invalid")]
    InvalidAttestation,
    #[error("chaincode `{0}` is not an enclave chaincode")]
    UnknownChaincode(String),
    #[error("malformed registry operation")]
    Malformed,
    #[error("enclave already registered")]
    AlreadyRegistered,
    #[error("enclave was set up for a different blockchain")]
    ForeignChain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub chaincode: String,
    pub enclave_key: EnclaveKey,
    pub measurement: Digest,
    pub verdict: AttestationVerdict,
    pub peer_id: String,
}

/// Operation understood by the registry chaincode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegistryOperation {
    Register { quote: AttestationReport, enclave_key: EnclaveKey, chaincode: String, peer_id: String },
}

/// Ledger key of an enclave's registry entry: `ercc/<hex signing key>`.
pub fn registry_key(signing_key: &PublicKey) -> String {
    namespaced(REGISTRY_CHAINCODE, &signing_key.to_hex())
}

/// The report data an enclave must commit to: hash of its public key.
pub fn key_commitment(key: &EnclaveKey) -> ReportData {
    ReportData::from_digest(&codec::digest(key))
}

/// The single predicate behind client-side and validator-side enclave checks.
pub fn check_entry(
    entry: &RegistryEntry,
    expected_measurement: &Digest,
    service_key: &PublicKey,
    chain: &Digest,
    weak: Weakenings,
) -> Result<(), RegistryError> {
    if weak.skip_attestation_check {
        return Ok(());
    }
    if &entry.enclave_key.chain != chain {
        return Err(RegistryError::ForeignChain);
    }
    if &entry.measurement != expected_measurement || &entry.verdict.measurement != expected_measurement {
        return Err(RegistryError::MeasurementMismatch);
    }
    if entry.verdict.report_data != key_commitment(&entry.enclave_key) {
        return Err(RegistryError::ReportDataMismatch);
    }
    if !entry.verdict.is_valid_for(service_key) {
        return Err(RegistryError::InvalidAttestation);
    }
    Ok(())
}

/// `check_entry` with the expected measurement taken from the chain config.
pub fn verify_entry(
    entry: &RegistryEntry,
    config: &ChainConfig,
    chain: &Digest,
    weak: Weakenings,
) -> Result<(), RegistryError> {
    let expected = config
        .chaincode(&entry.chaincode)
        .and_then(|d| d.enclave.as_ref())
        .map(|e| e.measurement)
        .ok_or_else(|| RegistryError::UnknownChaincode(entry.chaincode.clone()))?;
    check_entry(entry, &expected, &config.attestation_service_key, chain, weak)
}

/// Client-side acceptance of an enclave before sending it secrets.
pub fn client_verify_enclave(
    entry: &RegistryEntry,
    expected_measurement: &Digest,
    service_key: &PublicKey,
    chain: &Digest,
    weak: Weakenings,
) -> bool {
    check_entry(entry, expected_measurement, service_key, chain, weak).is_ok()
}

/// Registry chaincode logic: verify the quote, obtain a verdict and write
/// the entry. The write takes effect only once ordered and committed.
pub fn ercc_register(
    quote: &AttestationReport,
    enclave_key: &EnclaveKey,
    chaincode: &str,
    peer_id: &str,
    config: &ChainConfig,
    chain: &Digest,
    ias: &AttestationService,
    weak: Weakenings,
) -> Result<RegistryEntry, RegistryError> {
    let expected = config
        .chaincode(chaincode)
        .and_then(|d| d.enclave.as_ref())
        .map(|e| e.measurement)
        .ok_or_else(|| RegistryError::UnknownChaincode(chaincode.to_owned()))?;
    if !weak.skip_attestation_check {
        if &enclave_key.chain != chain {
            return Err(RegistryError::ForeignChain);
        }
        if quote.measurement != expected {
            return Err(RegistryError::MeasurementMismatch);
        }
        if quote.report_data != key_commitment(enclave_key) {
            return Err(RegistryError::ReportDataMismatch);
        }
    }
    let verdict = ias.ias_verify(quote);
    if !weak.skip_attestation_check && !verdict.is_valid_for(&ias.public_key()) {
        return Err(RegistryError::InvalidAttestation);
    }
    Ok(RegistryEntry {
        chaincode: chaincode.to_owned(),
        enclave_key: *enclave_key,
        measurement: quote.measurement,
        verdict,
        peer_id: peer_id.to_owned(),
    })
}

/// Executes a registry operation against committed state, producing the
/// read/write sets a peer endorses.
pub fn ercc_execute(
    operation: &[u8],
    store: &VersionedStore,
    config: &ChainConfig,
    chain: &Digest,
    ias: &AttestationService,
    weak: Weakenings,
) -> Result<(ReadSet, WriteSet, RegistryEntry), RegistryError> {
    let RegistryOperation::Register { quote, enclave_key, chaincode, peer_id } =
        codec::decode(operation).map_err(|_| RegistryError::Malformed)?;
    let entry = ercc_register(&quote, &enclave_key, &chaincode, &peer_id, config, chain, ias, weak)?;
    let key = registry_key(&enclave_key.signing);
    let mut reads = ReadSet::new();
    let existing = store.get(&key);
    reads.record(&key, existing.map(|v| v.version));
    if existing.is_some() {
        return Err(RegistryError::AlreadyRegistered);
    }
    let mut writes = WriteSet::new();
    writes.put(&key, codec::encode(&entry));
    Ok((reads, writes, entry))
}

/// Source of committed registry entries.
pub trait RegistryView {
    fn lookup(&self, signing_key: &PublicKey) -> Option<RegistryEntry>;
}

impl RegistryView for VersionedStore {
    fn lookup(&self, signing_key: &PublicKey) -> Option<RegistryEntry> {
        ercc_lookup(self, signing_key)
    }
}

impl RegistryView for BTreeMap<PublicKey, RegistryEntry> {
    fn lookup(&self, signing_key: &PublicKey) -> Option<RegistryEntry> {
        self.get(signing_key).cloned()
    }
}

/// Reads a committed registry entry; never sees uncommitted registrations.
pub fn ercc_lookup(store: &VersionedStore, signing_key: &PublicKey) -> Option<RegistryEntry> {
    let stored = store.get(&registry_key(signing_key))?;
    codec::decode(&stored.value).ok()
}

/// Validation of a registry transaction's write: exactly one well-formed,
/// re-verified entry stored under its own key.
pub fn validate_registry_write(
    tx: &Transaction,
    config: &ChainConfig,
    chain: &Digest,
    weak: Weakenings,
) -> Option<RegistryEntry> {
    let writes = tx.endorsements.first()?.body.write_set.entries();
    let [w] = writes else {
        return None;
    };
    let entry: RegistryEntry = codec::decode(&w.value).ok()?;
    if w.key != registry_key(&entry.enclave_key.signing) {
        return None;
    }
    verify_entry(&entry, config, chain, weak).ok()?;
    Some(entry)
}

/// Endorsement policy of a peer running enclave chaincodes: registry-backed
/// enclave signatures for enclave chaincodes, peer signatures plus entry
/// re-verification for the registry, plain peer policy otherwise.
pub struct EnclaveTxValidator<'a> {
    pub config: &'a ChainConfig,
    pub genesis_hash: Digest,
    pub registry: &'a dyn RegistryView,
    pub weak: Weakenings,
}

impl EnclaveTxValidator<'_> {
    fn registered_endorsers(&self, tx: &Transaction) -> usize {
        let signers: BTreeSet<PublicKey> = tx
            .endorsements
            .iter()
            .filter_map(|e| match e.endorser {
                EndorserId::Enclave(k) if e.verify_signature() => Some(k),
                _ => None,
            })
            .filter(|k| {
                self.registry.lookup(k).is_some_and(|entry| {
                    entry.chaincode == tx.proposal.chaincode_id
                        && verify_entry(&entry, self.config, &self.genesis_hash, self.weak).is_ok()
                })
            })
            .collect();
        signers.len()
    }
}

impl EndorsementPolicy for EnclaveTxValidator<'_> {
    fn evaluate(&self, tx: &Transaction) -> TxValidity {
        let Some(def) = self.config.chaincode(tx.chaincode_id()) else {
            return TxValidity::EndorsementPolicyFailure;
        };
        if def.enclave.is_none() {
            let base = PeerEndorsementPolicy { config: self.config }.evaluate(tx);
            let registry_tx = def.name == REGISTRY_CHAINCODE;
            if base.is_valid()
                && registry_tx
                && validate_registry_write(tx, self.config, &self.genesis_hash, self.weak).is_none()
            {
                return TxValidity::RegistryCheckFailure;
            }
            return base;
        }
        if self.registered_endorsers(tx) >= def.endorsement_threshold.max(1) as usize {
            TxValidity::Valid
        } else {
            TxValidity::EndorsementPolicyFailure
        }
    }
}

/// Single-transaction form used outside block validation.
pub fn etv_validate(
    tx: &Transaction,
    store: &VersionedStore,
    config: &ChainConfig,
    genesis_hash: Digest,
    weak: Weakenings,
) -> TxValidity {
    let validator = EnclaveTxValidator { config, genesis_hash, registry: store, weak };
    let flags = crate::ledger::validate_transactions(u64::MAX, std::slice::from_ref(tx), store, &|_| false, &validator);
    flags[0]
}
