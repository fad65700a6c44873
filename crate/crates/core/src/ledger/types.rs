use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::crypto::{self, BoxPublicKey, Digest, Envelope, PublicKey, Signature, SigningKeyPair};

use super::LedgerError;

/// Position in the history where a key was last written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Version {
    pub block_seq: u64,
    pub tx_index: u32,
}

impl Version {
    /// Reserved for keys installed by the genesis block.
    pub const GENESIS: Version = Version { block_seq: 0, tx_index: 0 };

    pub fn new(block_seq: u64, tx_index: u32) -> Self {
        Self { block_seq, tx_index }
    }
}

/// Joins a chaincode namespace and a chaincode-local key.
pub fn namespaced(chaincode_id: &str, key: &str) -> String {
    format!("{chaincode_id}/{key}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadEntry {
    pub key: String,
    /// `None` records that the key was absent when read.
    pub version: Option<Version>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadSet(Vec<ReadEntry>);

impl ReadSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a read. A repeated read of the same key keeps the first entry.
    pub fn record(&mut self, key: &str, version: Option<Version>) {
        if !self.0.iter().any(|e| e.key == key) {
            self.0.push(ReadEntry { key: key.to_owned(), version });
        }
    }

    pub fn entries(&self) -> &[ReadEntry] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteEntry {
    pub key: String,
    pub value: Vec<u8>,
}

/// Ordered writes; the last write to a key replaces the earlier value in place.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteSet(Vec<WriteEntry>);

impl WriteSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, key: &str, value: Vec<u8>) {
        match self.0.iter_mut().find(|e| e.key == key) {
            Some(e) => e.value = value,
            None => self.0.push(WriteEntry { key: key.to_owned(), value }),
        }
    }

    pub fn get(&self, key: &str) -> Option<&[u8]> {
        self.0.iter().find(|e| e.key == key).map(|e| e.value.as_slice())
    }

    pub fn entries(&self) -> &[WriteEntry] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How a chaincode's on-ledger values are protected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EncryptionMode {
    None,
    #[default]
    PerChaincode,
    ClientBased,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalPayload {
    /// Operation bytes for chaincodes that run outside enclaves.
    Plain(Vec<u8>),
    /// Operation encrypted separately to each target chaincode enclave,
    /// keyed by the enclave's signing key.
    Sealed(Vec<(PublicKey, Envelope)>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionProposal {
    pub client_id: String,
    pub chaincode_id: String,
    pub payload: ProposalPayload,
    pub nonce: [u8; 16],
}

impl TransactionProposal {
    pub fn digest(&self) -> Digest {
        codec::digest(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EndorserId {
    /// A chaincode enclave, identified by its signing key.
    Enclave(PublicKey),
    /// A peer endorsing a chaincode that runs outside any enclave.
    Peer(PublicKey),
}

impl EndorserId {
    pub fn key(&self) -> &PublicKey {
        match self {
            EndorserId::Enclave(k) | EndorserId::Peer(k) => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndorsementBody {
    pub proposal_digest: Digest,
    pub chaincode_id: String,
    pub read_set: ReadSet,
    pub write_set: WriteSet,
    pub result: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endorsement {
    pub body: EndorsementBody,
    pub endorser: EndorserId,
    pub signature: Signature,
}

const ENDORSEMENT_DOMAIN: &[u8] = b"endorsement/v1";

impl Endorsement {
    pub fn signing_message(body: &EndorsementBody, endorser: &EndorserId) -> Vec<u8> {
        let mut m = ENDORSEMENT_DOMAIN.to_vec();
        m.extend(codec::encode(&(body, endorser)));
        m
    }

    pub fn sign(body: EndorsementBody, endorser: EndorserId, key: &SigningKeyPair) -> Self {
        let signature = key.sign(&Self::signing_message(&body, &endorser));
        Self { body, endorser, signature }
    }

    pub fn verify_signature(&self) -> bool {
        crypto::verify(self.endorser.key(), &Self::signing_message(&self.body, &self.endorser), &self.signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub proposal: TransactionProposal,
    pub endorsements: Vec<Endorsement>,
}

impl Transaction {
    pub fn id(&self) -> Digest {
        self.proposal.digest()
    }

    pub fn chaincode_id(&self) -> &str {
        &self.proposal.chaincode_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerIdentity {
    pub id: String,
    pub key: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientIdentity {
    pub id: String,
    pub key: PublicKey,
    pub box_key: BoxPublicKey,
}

/// Enclave-hosted chaincode settings fixed at instantiation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnclaveChaincode {
    pub measurement: Digest,
    pub encryption: EncryptionMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChaincodeDefinition {
    pub name: String,
    /// `None` for chaincodes that run natively at the peer.
    pub enclave: Option<EnclaveChaincode>,
    /// Number of distinct authorised endorsers required.
    pub endorsement_threshold: u32,
}

/// Genesis input as assembled by the consortium; every field is required.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenesisConfig {
    pub orderer_key: Option<PublicKey>,
    pub attestation_service_key: Option<PublicKey>,
    pub ledger_enclave_measurement: Option<Digest>,
    pub admin: Option<String>,
    pub peers: Vec<PeerIdentity>,
    pub clients: Vec<ClientIdentity>,
    pub chaincodes: Vec<ChaincodeDefinition>,
}

/// Validated, immutable chain configuration embedded in the genesis block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub orderer_key: PublicKey,
    pub attestation_service_key: PublicKey,
    pub ledger_enclave_measurement: Digest,
    pub admin: String,
    pub peers: Vec<PeerIdentity>,
    pub clients: Vec<ClientIdentity>,
    pub chaincodes: Vec<ChaincodeDefinition>,
}

impl ChainConfig {
    pub fn chaincode(&self, name: &str) -> Option<&ChaincodeDefinition> {
        self.chaincodes.iter().find(|c| c.name == name)
    }

    pub fn client(&self, id: &str) -> Option<&ClientIdentity> {
        self.clients.iter().find(|c| c.id == id)
    }

    pub fn is_peer_key(&self, key: &PublicKey) -> bool {
        self.peers.iter().any(|p| &p.key == key)
    }
}

impl GenesisConfig {
    pub fn validate(&self) -> Result<ChainConfig, LedgerError> {
        let cfg = ChainConfig {
            orderer_key: self.orderer_key.ok_or(LedgerError::MissingField("orderer_key"))?,
            attestation_service_key: self
                .attestation_service_key
                .ok_or(LedgerError::MissingField("attestation_service_key"))?,
            ledger_enclave_measurement: self
                .ledger_enclave_measurement
                .ok_or(LedgerError::MissingField("ledger_enclave_measurement"))?,
            admin: self.admin.clone().ok_or(LedgerError::MissingField("admin"))?,
            peers: self.peers.clone(),
            clients: self.clients.clone(),
            chaincodes: self.chaincodes.clone(),
        };
        if cfg.peers.is_empty() {
            return Err(LedgerError::MissingField("peers"));
        }
        let names: BTreeSet<_> = cfg.chaincodes.iter().map(|c| c.name.as_str()).collect();
        if names.len() != cfg.chaincodes.len() || cfg.client(&cfg.admin).is_none() {
            return Err(LedgerError::MalformedGenesis);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub seq: u64,
    pub prev_hash: Digest,
    pub transactions: Vec<Transaction>,
    /// Present only in the genesis block.
    pub config: Option<ChainConfig>,
    /// Absent only in the genesis block, which is anchored by its hash.
    pub orderer_signature: Option<Signature>,
}

const BLOCK_DOMAIN: &[u8] = b"block/v1";

impl Block {
    /// Hash over everything except the orderer signature.
    pub fn hash(&self) -> Digest {
        codec::digest(&(self.seq, &self.prev_hash, codec::digest(&self.transactions), &self.config))
    }

    pub fn signing_message(&self) -> Vec<u8> {
        let mut m = BLOCK_DOMAIN.to_vec();
        m.extend_from_slice(self.hash().as_bytes());
        m
    }

    pub fn verify_orderer(&self, orderer_key: &PublicKey) -> bool {
        match &self.orderer_signature {
            Some(sig) => crypto::verify(orderer_key, &self.signing_message(), sig),
            None => false,
        }
    }

    pub fn genesis_config(&self) -> Result<&ChainConfig, LedgerError> {
        match (&self.config, self.seq, self.transactions.is_empty()) {
            (Some(cfg), 0, true) => Ok(cfg),
            _ => Err(LedgerError::MalformedGenesis),
        }
    }
}

pub fn make_genesis(config: &GenesisConfig) -> Result<Block, LedgerError> {
    let cfg = config.validate()?;
    Ok(Block {
        seq: 0,
        prev_hash: Digest([0; 32]),
        transactions: Vec::new(),
        config: Some(cfg),
        orderer_signature: None,
    })
}

/// Length-prefixed block stream file: each record is a `u64` little-endian
/// byte count followed by the canonical block encoding.
pub fn write_block_stream(blocks: &[Block]) -> Vec<u8> {
    let mut out = Vec::new();
    for b in blocks {
        let bytes = codec::encode(b);
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend(bytes);
    }
    out
}

pub fn read_block_stream(mut bytes: &[u8]) -> Result<Vec<Block>, codec::DecodeError> {
    let mut blocks = Vec::new();
    while !bytes.is_empty() {
        let (len, rest) = bytes.split_at_checked(8).ok_or_else(|| codec::DecodeError::truncated())?;
        let len = u64::from_le_bytes(len.try_into().unwrap()) as usize;
        let (body, rest) = rest.split_at_checked(len).ok_or_else(|| codec::DecodeError::truncated())?;
        blocks.push(codec::decode(body)?);
        bytes = rest;
    }
    Ok(blocks)
}
