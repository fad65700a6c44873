//! Trusted ledger view running inside an enclave.
//!
//! The enclave follows the ordered block stream, keeps a hash and version
//! for every committed key, and answers nonce-challenged metadata queries
//! signed with its identity key. Its whole state can be sealed and restored;
//! a restored enclave only accepts the block following its own height, so
//! a rollback costs liveness and never consistency. Host-side wrappers at the
//! bottom of the module turn typed requests into entry-point calls.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;
use crate::crypto::{self, Digest, PublicKey, SealedBlob, Signature, SigningKeyPair};
use crate::ledger::{validate_transactions, Block, ChainConfig, LedgerError, TxValidity, Version, VersionView};
use crate::registry::{EnclaveTxValidator, RegistryEntry, REGISTRY_CHAINCODE};
use crate::tee::{
    AttestationReport, AttestationVerdict, CodeIdentity, EnclaveEnv, EnclaveInstance, EnclaveProgram, Host, NoHost,
    ReportData, TeeError,
};
use crate::Weakenings;

pub const LEDGER_ENCLAVE_NAME: &str = "ledger-enclave";
pub const LEDGER_ENCLAVE_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum LeError {
    #[error("ledger enclave is not initialized")]
    NotInitialized,
    #[error("ledger enclave is already initialized")]
    AlreadyInitialized,
    #[error("own measurement differs from the genesis configuration")]
    MeasurementMismatch,
    #[error("malformed genesis block")]
    MalformedGenesis,
    #[error("orderer signature does not verify")]
    BadOrdererSignature,
    #[error("sequence gap: expected block {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("previous-hash chain broken at block {0}")]
    HashChainBreak(u64),
    #[error("sealed state failed authentication")]
    UnsealAuthenticationFailure,
    #[error("peer belongs to a different blockchain")]
    ForeignBlockchain,
    #[error("attestation verdict does not vouch for the transfer")]
    InvalidVerdict,
    #[error("transferred value for `{0}` does not match its hash")]
    ValueHashMismatch(String),
    #[error("transfer source is not ahead of this enclave")]
    StaleDelta,
    #[error("transferred state does not reproduce the source metadata")]
    InconsistentDelta,
    #[error("platform cannot produce remote quotes")]
    UncertifiedPlatform,
    #[error("malformed request")]
    Malformed,
}

impl LeError {
    fn from_header(e: LedgerError) -> Self {
        match e {
            LedgerError::BadOrdererSignature => LeError::BadOrdererSignature,
            LedgerError::SequenceGap { expected, got } => LeError::SequenceGap { expected, got },
            LedgerError::HashChainBreak(seq) => LeError::HashChainBreak(seq),
            LedgerError::MissingField(_) | LedgerError::MalformedGenesis => LeError::MalformedGenesis,
        }
    }
}

/// Hash and version of every committed key plus the chain position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityMetadata {
    pub per_key: BTreeMap<String, (Digest, Version)>,
    pub last_block_seq: u64,
    pub last_block_hash: Digest,
    pub genesis_hash: Digest,
}

impl VersionView for IntegrityMetadata {
    fn current_version(&self, key: &str) -> Option<Version> {
        self.per_key.get(key).map(|(_, v)| v.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaRequest {
    pub keys: Vec<String>,
    pub nonce: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaEntry {
    pub key: String,
    /// `None` is a signed statement that the key is absent.
    pub state: Option<(Digest, Version)>,
}

/// Signed answer to a [`MetaRequest`]; one signature covers the whole batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub entries: Vec<MetaEntry>,
    pub nonce: [u8; 32],
    pub signature: Signature,
}

impl MetaResponse {
    fn message(entries: &[MetaEntry], nonce: &[u8; 32]) -> Vec<u8> {
        codec::encode(&("getMeta/v1", entries, nonce))
    }

    pub fn verify(&self, ledger_key: &PublicKey) -> bool {
        crypto::verify(ledger_key, &Self::message(&self.entries, &self.nonce), &self.signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeSummary {
    pub last_block_seq: u64,
    pub last_block_hash: Digest,
    pub genesis_hash: Digest,
    /// Digest of the canonical encoding of the full [`IntegrityMetadata`].
    pub metadata_digest: Digest,
    pub keys: u64,
}

/// What a lagging enclave holds, sent to a peer it wants to catch up from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRequest {
    pub genesis_hash: Digest,
    pub last_block_seq: u64,
    pub per_key: BTreeMap<String, (Digest, Version)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub key: String,
    pub value_hash: Digest,
    pub version: Version,
}

/// Keys the requester lacks or holds stale, plus what it needs to adopt the
/// serving enclave's position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateDelta {
    pub genesis_hash: Digest,
    pub from_seq: u64,
    pub to_seq: u64,
    pub to_block_hash: Digest,
    pub entries: Vec<DeltaEntry>,
    pub tx_ids: BTreeSet<Digest>,
    /// Digest of the serving enclave's `per_key` map.
    pub per_key_digest: Digest,
}

impl StateDelta {
    pub fn report_data(&self) -> ReportData {
        ReportData::from_digest(&codec::digest(&(self, self.to_seq)))
    }
}

/// Report data a ledger enclave uses to bind itself to a chaincode enclave.
pub fn binding_report_data(ledger_key: &PublicKey, genesis_hash: &Digest) -> ReportData {
    ReportData::from_digest(&codec::digest(&("le-binding/v1", ledger_key, genesis_hash)))
}

#[derive(Serialize, Deserialize)]
struct LeState {
    config: ChainConfig,
    identity: [u8; 32],
    metadata: IntegrityMetadata,
    tx_ids: BTreeSet<Digest>,
    registry: BTreeMap<PublicKey, RegistryEntry>,
}

/// The ledger enclave program.
pub struct LedgerEnclaveProgram {
    weak: Weakenings,
    state: Option<LeState>,
}

impl LedgerEnclaveProgram {
    pub fn new(weak: Weakenings) -> Self {
        Self { weak, state: None }
    }

    pub fn measurement() -> Digest {
        CodeIdentity::new(LEDGER_ENCLAVE_NAME, LEDGER_ENCLAVE_VERSION).measurement()
    }

    fn state(&self) -> Result<&LeState, LeError> {
        self.state.as_ref().ok_or(LeError::NotInitialized)
    }

    fn state_mut(&mut self) -> Result<&mut LeState, LeError> {
        self.state.as_mut().ok_or(LeError::NotInitialized)
    }

    fn init(&mut self, env: &mut EnclaveEnv<'_>, args: &[u8]) -> Result<PublicKey, LeError> {
        if self.state.is_some() {
            return Err(LeError::AlreadyInitialized);
        }
        let genesis: Block = codec::decode(args).map_err(|_| LeError::MalformedGenesis)?;
        let config = genesis.genesis_config().map_err(|_| LeError::MalformedGenesis)?.clone();
        if config.ledger_enclave_measurement != env.measurement() {
            return Err(LeError::MeasurementMismatch);
        }
        let key = SigningKeyPair::generate(env.rng());
        let genesis_hash = genesis.hash();
        let public = key.public();
        self.state = Some(LeState {
            config,
            identity: key.secret_bytes(),
            metadata: IntegrityMetadata {
                per_key: BTreeMap::new(),
                last_block_seq: 0,
                last_block_hash: genesis_hash,
                genesis_hash,
            },
            tx_ids: BTreeSet::new(),
            registry: BTreeMap::new(),
        });
        Ok(public)
    }

    fn process_block(&mut self, args: &[u8]) -> Result<Vec<TxValidity>, LeError> {
        let weak = self.weak;
        let st = self.state_mut()?;
        let block: Block = codec::decode(args).map_err(|_| LeError::Malformed)?;
        if !block.verify_orderer(&st.config.orderer_key) {
            return Err(LeError::BadOrdererSignature);
        }
        if !weak.skip_sequence_check {
            crate::ledger::check_block_header(
                &block,
                &st.config.orderer_key,
                st.metadata.last_block_seq,
                &st.metadata.last_block_hash,
            )
            .map_err(LeError::from_header)?;
        }
        let flags = {
            let validator = EnclaveTxValidator {
                config: &st.config,
                genesis_hash: st.metadata.genesis_hash,
                registry: &st.registry,
                weak,
            };
            validate_transactions(
                block.seq,
                &block.transactions,
                &st.metadata,
                &|id| st.tx_ids.contains(id),
                &validator,
            )
        };
        for (idx, (tx, flag)) in block.transactions.iter().zip(&flags).enumerate() {
            if !flag.is_valid() {
                continue;
            }
            let version = Version::new(block.seq, idx as u32);
            for w in tx.endorsements[0].body.write_set.entries() {
                st.metadata.per_key.insert(w.key.clone(), (crypto::hash(&w.value), version));
                if tx.chaincode_id() == REGISTRY_CHAINCODE {
                    if let Ok(entry) = codec::decode::<RegistryEntry>(&w.value) {
                        st.registry.insert(entry.enclave_key.signing, entry);
                    }
                }
            }
        }
        st.tx_ids.extend(block.transactions.iter().map(|t| t.id()));
        st.metadata.last_block_seq = block.seq;
        st.metadata.last_block_hash = block.hash();
        Ok(flags)
    }

    fn get_meta(&self, args: &[u8]) -> Result<MetaResponse, LeError> {
        let st = self.state()?;
        let req: MetaRequest = codec::decode(args).map_err(|_| LeError::Malformed)?;
        let entries: Vec<MetaEntry> =
            req.keys.iter().map(|k| MetaEntry { key: k.clone(), state: st.metadata.per_key.get(k).copied() }).collect();
        let key = SigningKeyPair::from_secret_bytes(st.identity);
        let signature = key.sign(&MetaResponse::message(&entries, &req.nonce));
        Ok(MetaResponse { entries, nonce: req.nonce, signature })
    }

    fn summary(&self) -> Result<LeSummary, LeError> {
        let m = &self.state()?.metadata;
        Ok(LeSummary {
            last_block_seq: m.last_block_seq,
            last_block_hash: m.last_block_hash,
            genesis_hash: m.genesis_hash,
            metadata_digest: codec::digest(m),
            keys: m.per_key.len() as u64,
        })
    }

    fn restore(&mut self, env: &EnclaveEnv<'_>, args: &[u8]) -> Result<LeSummary, LeError> {
        if self.state.is_some() {
            return Err(LeError::AlreadyInitialized);
        }
        let blob: SealedBlob = codec::decode(args).map_err(|_| LeError::Malformed)?;
        let bytes = env.unseal(&blob).map_err(|_| LeError::UnsealAuthenticationFailure)?;
        self.state = Some(codec::decode(&bytes).map_err(|_| LeError::UnsealAuthenticationFailure)?);
        self.summary()
    }

    fn transfer_serve(&self, env: &EnclaveEnv<'_>, args: &[u8]) -> Result<(StateDelta, AttestationReport), LeError> {
        let st = self.state()?;
        let req: TransferRequest = codec::decode(args).map_err(|_| LeError::Malformed)?;
        if req.genesis_hash != st.metadata.genesis_hash {
            return Err(LeError::ForeignBlockchain);
        }
        let entries = st
            .metadata
            .per_key
            .iter()
            .filter(|(k, mine)| req.per_key.get(*k) != Some(*mine))
            .map(|(k, (h, v))| DeltaEntry { key: k.clone(), value_hash: *h, version: *v })
            .collect();
        let delta = StateDelta {
            genesis_hash: st.metadata.genesis_hash,
            from_seq: req.last_block_seq,
            to_seq: st.metadata.last_block_seq,
            to_block_hash: st.metadata.last_block_hash,
            entries,
            tx_ids: st.tx_ids.clone(),
            per_key_digest: codec::digest(&st.metadata.per_key),
        };
        let report = env.remote_quote(delta.report_data()).map_err(|_| LeError::UncertifiedPlatform)?;
        Ok((delta, report))
    }

    fn transfer_apply(&mut self, env: &EnclaveEnv<'_>, args: &[u8]) -> Result<LeSummary, LeError> {
        let measurement = env.measurement();
        let st = self.state_mut()?;
        let (delta, values, verdict, report): (
            StateDelta,
            Vec<(String, Vec<u8>)>,
            AttestationVerdict,
            AttestationReport,
        ) = codec::decode(args).map_err(|_| LeError::Malformed)?;
        if !verdict.is_valid_for(&st.config.attestation_service_key)
            || verdict.report_digest != report.digest()
            || report.measurement != measurement
            || report.report_data != delta.report_data()
        {
            return Err(LeError::InvalidVerdict);
        }
        if delta.genesis_hash != st.metadata.genesis_hash {
            return Err(LeError::ForeignBlockchain);
        }
        if delta.to_seq <= st.metadata.last_block_seq {
            return Err(LeError::StaleDelta);
        }
        if values.len() != delta.entries.len() {
            return Err(LeError::Malformed);
        }
        let mut per_key = st.metadata.per_key.clone();
        let mut registry = st.registry.clone();
        for (entry, (key, value)) in delta.entries.iter().zip(&values) {
            if &entry.key != key || crypto::hash(value) != entry.value_hash {
                return Err(LeError::ValueHashMismatch(entry.key.clone()));
            }
            per_key.insert(entry.key.clone(), (entry.value_hash, entry.version));
            if key.starts_with(&format!("{REGISTRY_CHAINCODE}/")) {
                if let Ok(e) = codec::decode::<RegistryEntry>(value) {
                    registry.insert(e.enclave_key.signing, e);
                }
            }
        }
        if codec::digest(&per_key) != delta.per_key_digest {
            return Err(LeError::InconsistentDelta);
        }
        st.metadata.per_key = per_key;
        st.metadata.last_block_seq = delta.to_seq;
        st.metadata.last_block_hash = delta.to_block_hash;
        st.registry = registry;
        st.tx_ids.extend(delta.tx_ids);
        self.summary()
    }
}

fn respond<T: Serialize>(r: Result<T, LeError>) -> Vec<u8> {
    codec::encode(&r)
}

impl EnclaveProgram for LedgerEnclaveProgram {
    fn code_identity(&self) -> CodeIdentity {
        CodeIdentity::new(LEDGER_ENCLAVE_NAME, LEDGER_ENCLAVE_VERSION)
    }

    fn call(
        &mut self,
        env: &mut EnclaveEnv<'_>,
        entry_point: &str,
        args: &[u8],
        _host: &mut dyn Host,
    ) -> Result<Vec<u8>, TeeError> {
        Ok(match entry_point {
            "init" => respond(self.init(env, args)),
            "process_block" => respond(self.process_block(args)),
            "get_meta" => respond(self.get_meta(args)),
            "local_report" => respond(self.state().map(|st| {
                let key = SigningKeyPair::from_secret_bytes(st.identity).public();
                (key, env.local_report(binding_report_data(&key, &st.metadata.genesis_hash)))
            })),
            "snapshot" => {
                let sealed = self.state().map(codec::encode);
                respond(sealed.map(|bytes| env.seal(&bytes)))
            }
            "restore" => respond(self.restore(env, args)),
            "summary" => respond(self.summary()),
            "public_key" => respond(self.state().map(|st| SigningKeyPair::from_secret_bytes(st.identity).public())),
            "transfer_request" => respond(self.state().map(|st| TransferRequest {
                genesis_hash: st.metadata.genesis_hash,
                last_block_seq: st.metadata.last_block_seq,
                per_key: st.metadata.per_key.clone(),
            })),
            "transfer_serve" => respond(self.transfer_serve(env, args)),
            "transfer_apply" => respond(self.transfer_apply(env, args)),
            other => return Err(TeeError::UnknownEntryPoint(other.to_owned())),
        })
    }
}

// Host-side wrappers.

fn call<T: serde::de::DeserializeOwned>(le: &mut EnclaveInstance, entry: &str, args: &[u8]) -> Result<T, LeError> {
    let out = le.ecall(entry, args, &mut NoHost).map_err(|_| LeError::Malformed)?;
    codec::decode::<Result<T, LeError>>(&out).map_err(|_| LeError::Malformed)?
}

pub fn le_init(le: &mut EnclaveInstance, genesis: &Block) -> Result<PublicKey, LeError> {
    call(le, "init", &codec::encode(genesis))
}

pub fn le_process_block(le: &mut EnclaveInstance, block: &Block) -> Result<Vec<TxValidity>, LeError> {
    call(le, "process_block", &codec::encode(block))
}

pub fn le_get_meta(le: &mut EnclaveInstance, request: &MetaRequest) -> Result<MetaResponse, LeError> {
    call(le, "get_meta", &codec::encode(request))
}

pub fn le_local_report(le: &mut EnclaveInstance) -> Result<(PublicKey, AttestationReport), LeError> {
    call(le, "local_report", &[])
}

pub fn le_snapshot(le: &mut EnclaveInstance) -> Result<SealedBlob, LeError> {
    call(le, "snapshot", &[])
}

pub fn le_restore(le: &mut EnclaveInstance, blob: &SealedBlob) -> Result<LeSummary, LeError> {
    call(le, "restore", &codec::encode(blob))
}

pub fn le_summary(le: &mut EnclaveInstance) -> Result<LeSummary, LeError> {
    call(le, "summary", &[])
}

pub fn le_public_key(le: &mut EnclaveInstance) -> Result<PublicKey, LeError> {
    call(le, "public_key", &[])
}

pub fn le_transfer_request(le: &mut EnclaveInstance) -> Result<TransferRequest, LeError> {
    call(le, "transfer_request", &[])
}

pub fn le_transfer_serve(
    le: &mut EnclaveInstance,
    request: &TransferRequest,
) -> Result<(StateDelta, AttestationReport), LeError> {
    call(le, "transfer_serve", &codec::encode(request))
}

pub fn le_transfer_apply(
    le: &mut EnclaveInstance,
    delta: &StateDelta,
    values: &[(String, Vec<u8>)],
    verdict: &AttestationVerdict,
    report: &AttestationReport,
) -> Result<LeSummary, LeError> {
    call(le, "transfer_apply", &codec::encode(&(delta, values, verdict, report)))
}
