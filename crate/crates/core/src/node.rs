//! Peers, clients and a whole simulated network.
//!
//! A [`Peer`] is untrusted host code: it keeps the committed ledger, hosts a
//! ledger enclave and one chaincode enclave per enclave chaincode, runs the
//! registry natively and validates blocks with the enclave transaction
//! validator, cross-checked against its ledger enclave. A [`Network`] wires
//! an orderer, an attestation service, peers and clients together from one
//! seed.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::{AuctionChaincode, AUCTION_CHAINCODE};
use crate::chaincode_enclave::{
    cce_bind_ledger, cce_invoke, cce_provision_key, cce_restore, cce_seal_identity, cce_setup, chaincode_identity,
    execute_native, make_provision, open_result, seal_operation, CceError, Chaincode, ChaincodeEnclaveProgram,
    ChaincodeResult, EnclaveKey, HonestAccess, Operation, StateAccess,
};
use crate::codec;
use crate::crypto::{BoxKeyPair, Digest, Envelope, PublicKey, SealedBlob, SigningKeyPair, SymmetricKey};
use crate::ledger::{
    make_genesis, namespaced, Block, ChaincodeDefinition, ClientIdentity, CommitRecord, EnclaveChaincode,
    EncryptionMode, Endorsement, EndorsementBody, EndorserId, GenesisConfig, Ledger, LedgerError, OrderingService,
    PeerIdentity, ProposalPayload, SoloOrderer, StoredValue, Transaction, TransactionProposal, TxValidity,
};
use crate::ledger_enclave::{
    le_get_meta, le_init, le_local_report, le_process_block, le_restore, le_snapshot, le_summary, le_transfer_apply,
    le_transfer_request, le_transfer_serve, LeError, LeSummary, LedgerEnclaveProgram, MetaRequest, MetaResponse,
    StateDelta,
};
use crate::par::{self, ExecMode};
use crate::registry::{
    client_verify_enclave, ercc_execute, EnclaveTxValidator, RegistryEntry, RegistryError, RegistryOperation,
    REGISTRY_CHAINCODE,
};
use crate::tee::{AttestationReport, AttestationService, AttestationVerdict, EnclaveInstance, Platform};
use crate::Weakenings;

pub const ADMIN: &str = "admin";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PeerError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("ledger enclave: {0}")]
    LedgerEnclave(#[from] LeError),
    #[error("chaincode enclave: {0}")]
    Chaincode(#[from] CceError),
    #[error("registry: {0}")]
    Registry(#[from] RegistryError),
    #[error("validator and ledger enclave disagree on block {seq}")]
    CrosscheckMismatch { seq: u64 },
    #[error("peer halted after a crosscheck mismatch")]
    Halted,
    #[error("chaincode `{0}` is not hosted here")]
    UnknownChaincode(String),
    #[error("no registered enclave of `{0}` at the requested peers")]
    NoEndorser(String),
    #[error("endorsements disagree")]
    EndorsementMismatch,
    #[error("unknown client `{0}`")]
    UnknownClient(String),
    #[error("malformed proposal")]
    Malformed,
}

/// Wall-clock time spent in each kind of state ocall.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OcallTimings {
    pub get_state: Duration,
    pub meta_query: Duration,
    pub get_state_calls: u64,
    pub meta_calls: u64,
}

/// Honest state access that records how long each call took.
pub struct TimedAccess<'a> {
    inner: HonestAccess<'a>,
    timings: &'a mut OcallTimings,
}

impl StateAccess for TimedAccess<'_> {
    fn get_state(&mut self, key: &str) -> Option<StoredValue> {
        let t = Instant::now();
        let v = self.inner.get_state(key);
        self.timings.get_state += t.elapsed();
        self.timings.get_state_calls += 1;
        v
    }

    fn get_range(&mut self, prefix: &str) -> Vec<(String, StoredValue)> {
        let t = Instant::now();
        let v = self.inner.get_range(prefix);
        self.timings.get_state += t.elapsed();
        self.timings.get_state_calls += 1;
        v
    }

    fn get_meta(&mut self, request: &MetaRequest) -> Result<MetaResponse, LeError> {
        let t = Instant::now();
        let v = self.inner.get_meta(request);
        self.timings.meta_query += t.elapsed();
        self.timings.meta_calls += 1;
        v
    }
}

/// A chaincode enclave as seen by its host.
pub struct HostedEnclave {
    pub instance: EnclaveInstance,
    pub key: EnclaveKey,
    pub chaincode: Arc<dyn Chaincode>,
    pub sealed_identity: Option<SealedBlob>,
}

/// Settings a peer needs beyond its identity.
#[derive(Debug, Clone)]
pub struct PeerSettings {
    pub weak: Weakenings,
    pub snapshot_interval: u64,
    pub data_dir: Option<PathBuf>,
}

pub struct Peer {
    pub id: String,
    key: SigningKeyPair,
    platform: Arc<Platform>,
    settings: PeerSettings,
    ledger: Ledger,
    ledger_enclave: EnclaveInstance,
    le_key: PublicKey,
    enclaves: BTreeMap<String, HostedEnclave>,
    native: BTreeMap<String, Arc<dyn Chaincode>>,
    snapshots: Vec<(u64, SealedBlob)>,
    halted: bool,
    seeds: ChaCha20Rng,
    pub timings: OcallTimings,
}

impl std::fmt::Debug for Peer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Peer").field("id", &self.id).field("height", &self.ledger.height()).finish_non_exhaustive()
    }
}

impl Peer {
    pub fn new(
        id: &str,
        key: SigningKeyPair,
        platform: Arc<Platform>,
        genesis: Block,
        settings: PeerSettings,
        seed: u64,
    ) -> Result<Self, PeerError> {
        let mut seeds = ChaCha20Rng::seed_from_u64(seed);
        let mut ledger_enclave =
            EnclaveInstance::create(platform.clone(), LedgerEnclaveProgram::new(settings.weak), seeds.gen());
        let le_key = le_init(&mut ledger_enclave, &genesis)?;
        let mut peer = Self {
            id: id.to_owned(),
            key,
            platform,
            settings,
            ledger: Ledger::new(genesis)?,
            ledger_enclave,
            le_key,
            enclaves: BTreeMap::new(),
            native: BTreeMap::new(),
            snapshots: Vec::new(),
            halted: false,
            seeds,
            timings: OcallTimings::default(),
        };
        peer.take_snapshot()?;
        Ok(peer)
    }

    pub fn identity(&self) -> PeerIdentity {
        PeerIdentity { id: self.id.clone(), key: self.key.public() }
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn platform(&self) -> &Arc<Platform> {
        &self.platform
    }

    pub fn ledger_enclave_key(&self) -> PublicKey {
        self.le_key
    }

    /// The host owns the enclave handle; what it can do with it is limited
    /// to entry-point calls.
    pub fn ledger_enclave_mut(&mut self) -> &mut EnclaveInstance {
        &mut self.ledger_enclave
    }

    pub fn enclave(&self, chaincode: &str) -> Option<&HostedEnclave> {
        self.enclaves.get(chaincode)
    }

    pub fn enclave_mut(&mut self, chaincode: &str) -> Option<&mut HostedEnclave> {
        self.enclaves.get_mut(chaincode)
    }

    /// A hosted chaincode enclave together with the ledger enclave it is
    /// bound to.
    pub fn enclave_with_ledger_enclave(
        &mut self,
        chaincode: &str,
    ) -> Option<(&mut HostedEnclave, &mut EnclaveInstance)> {
        let e = self.enclaves.get_mut(chaincode)?;
        Some((e, &mut self.ledger_enclave))
    }

    pub fn snapshots(&self) -> &[(u64, SealedBlob)] {
        &self.snapshots
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn settings(&self) -> &PeerSettings {
        &self.settings
    }

    pub fn next_seed(&mut self) -> u64 {
        self.seeds.gen()
    }

    /// Signs an endorsement as this peer, for chaincodes run natively.
    pub fn sign_endorsement(&self, body: EndorsementBody) -> Endorsement {
        Endorsement::sign(body, EndorserId::Peer(self.key.public()), &self.key)
    }

    /// Launches, sets up and binds an enclave for `chaincode`. Returns the
    /// enclave key and its remote quote for registration.
    pub fn host_enclave_chaincode(
        &mut self,
        chaincode: Arc<dyn Chaincode>,
    ) -> Result<(EnclaveKey, AttestationReport), PeerError> {
        let seed = self.next_seed();
        let mut instance = EnclaveInstance::create(
            self.platform.clone(),
            ChaincodeEnclaveProgram::new(chaincode.clone(), self.settings.weak),
            seed,
        );
        let (key, quote) = cce_setup(&mut instance, self.ledger.genesis())?;
        let (le_key, report) = le_local_report(&mut self.ledger_enclave)?;
        cce_bind_ledger(&mut instance, &le_key, &report)?;
        let name = chaincode.name().to_owned();
        self.enclaves.insert(name, HostedEnclave { instance, key, chaincode, sealed_identity: None });
        Ok((key, quote))
    }

    pub fn host_native_chaincode(&mut self, chaincode: Arc<dyn Chaincode>) {
        self.native.insert(chaincode.name().to_owned(), chaincode);
    }

    pub fn provision(&mut self, chaincode: &str, envelope: &Envelope) -> Result<(), PeerError> {
        let e = self.enclaves.get_mut(chaincode).ok_or_else(|| PeerError::UnknownChaincode(chaincode.into()))?;
        Ok(cce_provision_key(&mut e.instance, envelope)?)
    }

    /// Seals every hosted enclave's identity once bootstrap is complete.
    pub fn seal_identities(&mut self) -> Result<(), PeerError> {
        for e in self.enclaves.values_mut() {
            e.sealed_identity = Some(cce_seal_identity(&mut e.instance)?);
        }
        Ok(())
    }

    /// Executes a proposal and returns this peer's endorsement.
    pub fn endorse(
        &mut self,
        proposal: &TransactionProposal,
        ias: &AttestationService,
    ) -> Result<Endorsement, PeerError> {
        let cc = proposal.chaincode_id.as_str();
        if cc == REGISTRY_CHAINCODE {
            let ProposalPayload::Plain(op) = &proposal.payload else {
                return Err(PeerError::Malformed);
            };
            let (read_set, write_set, _) = ercc_execute(
                op,
                self.ledger.store(),
                self.ledger.config(),
                &self.ledger.genesis_hash(),
                ias,
                self.settings.weak,
            )?;
            let body = EndorsementBody {
                proposal_digest: proposal.digest(),
                chaincode_id: cc.to_owned(),
                read_set,
                write_set,
                result: Vec::new(),
            };
            return Ok(self.sign_endorsement(body));
        }
        if let Some(e) = self.enclaves.get_mut(cc) {
            let mut access = TimedAccess {
                inner: HonestAccess { store: self.ledger.store(), ledger_enclave: &mut self.ledger_enclave },
                timings: &mut self.timings,
            };
            return Ok(cce_invoke(&mut e.instance, proposal, &mut access)?);
        }
        if let Some(chaincode) = self.native.get(cc) {
            let ProposalPayload::Plain(op) = &proposal.payload else {
                return Err(PeerError::Malformed);
            };
            let op: Operation = codec::decode(op).map_err(|_| PeerError::Malformed)?;
            let exec = execute_native(chaincode.as_ref(), self.ledger.store(), &proposal.client_id, &op);
            let result = crate::chaincode_enclave::EndorsedResult::Public(exec.result);
            let body = EndorsementBody {
                proposal_digest: proposal.digest(),
                chaincode_id: cc.to_owned(),
                read_set: exec.read_set,
                write_set: exec.write_set,
                result: codec::encode(&result),
            };
            return Ok(self.sign_endorsement(body));
        }
        Err(PeerError::UnknownChaincode(cc.to_owned()))
    }

    /// Flags the untrusted validator assigns to `block` on top of the
    /// committed ledger.
    pub fn validate_untrusted(&self, block: &Block) -> Result<Vec<TxValidity>, PeerError> {
        let validator = EnclaveTxValidator {
            config: self.ledger.config(),
            genesis_hash: self.ledger.genesis_hash(),
            registry: self.ledger.store(),
            weak: self.settings.weak,
        };
        Ok(self.ledger.validate_block(block, &validator)?)
    }

    /// Commits to the untrusted ledger only. Used when the ledger enclave
    /// is being fed separately.
    pub fn commit_untrusted(&mut self, block: Block) -> Result<CommitRecord, PeerError> {
        let flags = self.validate_untrusted(&block)?;
        Ok(self.ledger.commit_block(block, &flags))
    }

    /// Full honest delivery: validate, let the ledger enclave process and
    /// cross-check, commit, snapshot at the configured interval.
    pub fn deliver(&mut self, block: Block) -> Result<CommitRecord, PeerError> {
        if self.halted {
            return Err(PeerError::Halted);
        }
        let flags = self.validate_untrusted(&block)?;
        let le_flags = le_process_block(&mut self.ledger_enclave, &block)?;
        if le_flags != flags {
            self.halted = true;
            return Err(PeerError::CrosscheckMismatch { seq: block.seq });
        }
        let record = self.ledger.commit_block(block, &flags);
        if self.settings.snapshot_interval > 0 && record.seq % self.settings.snapshot_interval == 0 {
            self.take_snapshot()?;
        }
        Ok(record)
    }

    pub fn take_snapshot(&mut self) -> Result<u64, PeerError> {
        let blob = le_snapshot(&mut self.ledger_enclave)?;
        let seq = le_summary(&mut self.ledger_enclave)?.last_block_seq;
        if let Some(dir) = &self.settings.data_dir {
            let dir = dir.join(&self.id);
            // Persistence is best effort; the in-memory copy is authoritative
            // for the simulation.
            if std::fs::create_dir_all(&dir).is_ok() {
                let _ = std::fs::write(dir.join(format!("snapshot_{seq}.sealed")), codec::encode(&blob));
            }
        }
        self.snapshots.push((seq, blob));
        Ok(seq)
    }

    pub fn ledger_enclave_summary(&mut self) -> Result<LeSummary, PeerError> {
        Ok(le_summary(&mut self.ledger_enclave)?)
    }

    pub fn get_meta(&mut self, request: &MetaRequest) -> Result<MetaResponse, PeerError> {
        Ok(le_get_meta(&mut self.ledger_enclave, request)?)
    }

    /// Replaces the ledger enclave by a fresh instance restored from `blob`.
    /// Returns the restored enclave's summary.
    pub fn restart_ledger_enclave_from(&mut self, blob: &SealedBlob) -> Result<LeSummary, PeerError> {
        let seed = self.next_seed();
        let mut fresh =
            EnclaveInstance::create(self.platform.clone(), LedgerEnclaveProgram::new(self.settings.weak), seed);
        let summary = le_restore(&mut fresh, blob)?;
        self.ledger_enclave = fresh;
        Ok(summary)
    }

    /// Replaces a chaincode enclave by a fresh instance restored from its
    /// sealed identity.
    pub fn restart_chaincode_enclave(&mut self, chaincode: &str) -> Result<EnclaveKey, PeerError> {
        let seed = self.next_seed();
        let weak = self.settings.weak;
        let platform = self.platform.clone();
        let e = self.enclaves.get_mut(chaincode).ok_or_else(|| PeerError::UnknownChaincode(chaincode.into()))?;
        let blob = e.sealed_identity.clone().ok_or(PeerError::Chaincode(CceError::NotSetUp))?;
        let mut fresh =
            EnclaveInstance::create(platform, ChaincodeEnclaveProgram::new(e.chaincode.clone(), weak), seed);
        let key = cce_restore(&mut fresh, &blob)?;
        e.instance = fresh;
        e.key = key;
        Ok(key)
    }

    /// Crash and restart: the ledger enclave comes back from the latest
    /// snapshot and replays the committed blocks after it; chaincode
    /// enclaves come back from their sealed identities.
    pub fn restart(&mut self) -> Result<LeSummary, PeerError> {
        let (_, blob) = self.snapshots.last().cloned().ok_or(PeerError::LedgerEnclave(LeError::NotInitialized))?;
        let mut summary = self.restart_ledger_enclave_from(&blob)?;
        for seq in summary.last_block_seq + 1..=self.ledger.height() {
            let block = self.ledger.block(seq).expect("committed block").clone();
            le_process_block(&mut self.ledger_enclave, &block)?;
        }
        if summary.last_block_seq < self.ledger.height() {
            summary = le_summary(&mut self.ledger_enclave)?;
        }
        let names: Vec<String> = self.enclaves.keys().cloned().collect();
        for name in names {
            self.restart_chaincode_enclave(&name)?;
        }
        self.halted = false;
        Ok(summary)
    }
}

/// Everything a lagging ledger enclave needs from a peer that is ahead.
#[derive(Debug, Clone)]
pub struct TransferPackage {
    pub delta: StateDelta,
    pub values: Vec<(String, Vec<u8>)>,
    pub verdict: AttestationVerdict,
    pub report: AttestationReport,
}

/// Serving side of a trusted state transfer from `server` to `requester`.
pub fn prepare_transfer(
    requester: &mut Peer,
    server: &mut Peer,
    ias: &AttestationService,
) -> Result<TransferPackage, PeerError> {
    let request = le_transfer_request(&mut requester.ledger_enclave)?;
    let (delta, report) = le_transfer_serve(&mut server.ledger_enclave, &request)?;
    let verdict = ias.ias_verify(&report);
    let values = delta
        .entries
        .iter()
        .map(|e| {
            let v = server.ledger.store().get(&e.key).map(|s| s.value.clone()).unwrap_or_default();
            (e.key.clone(), v)
        })
        .collect();
    Ok(TransferPackage { delta, values, verdict, report })
}

impl Peer {
    /// Requesting side: the ledger enclave adopts the transferred state and
    /// the host catches its own block store up from `blocks`.
    pub fn apply_transfer(&mut self, package: &TransferPackage, blocks: &[Block]) -> Result<LeSummary, PeerError> {
        let summary = le_transfer_apply(
            &mut self.ledger_enclave,
            &package.delta,
            &package.values,
            &package.verdict,
            &package.report,
        )?;
        for b in blocks {
            if b.seq > self.ledger.height() {
                self.commit_untrusted(b.clone())?;
            }
        }
        Ok(summary)
    }
}

pub struct Client {
    pub id: String,
    key: SigningKeyPair,
    result_key: BoxKeyPair,
    data_key: Option<SymmetricKey>,
    rng: ChaCha20Rng,
}

impl Client {
    pub fn new(id: &str, data_key: Option<SymmetricKey>, rng: &mut ChaCha20Rng) -> Self {
        Self {
            id: id.to_owned(),
            key: SigningKeyPair::generate(rng),
            result_key: BoxKeyPair::generate(rng),
            data_key,
            rng: ChaCha20Rng::seed_from_u64(rng.gen()),
        }
    }

    pub fn identity(&self) -> ClientIdentity {
        ClientIdentity { id: self.id.clone(), key: self.key.public(), box_key: self.result_key.public() }
    }

    pub fn signing_key(&self) -> &SigningKeyPair {
        &self.key
    }

    pub fn result_keypair(&self) -> &BoxKeyPair {
        &self.result_key
    }

    pub fn propose(&mut self, chaincode: &str, op: Operation, recipients: &[EnclaveKey]) -> TransactionProposal {
        seal_operation(
            &self.id,
            &self.key,
            chaincode,
            op,
            Some(self.result_key.public()),
            self.data_key,
            recipients,
            &mut self.rng,
        )
    }

    pub fn propose_plain(&mut self, chaincode: &str, op_bytes: Vec<u8>) -> TransactionProposal {
        let mut nonce = [0u8; 16];
        self.rng.fill_bytes(&mut nonce);
        TransactionProposal {
            client_id: self.id.clone(),
            chaincode_id: chaincode.to_owned(),
            payload: ProposalPayload::Plain(op_bytes),
            nonce,
        }
    }

    pub fn open(&self, endorsement: &Endorsement) -> Option<ChaincodeResult> {
        open_result(endorsement, &self.result_key)
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub seed: u64,
    pub peers: usize,
    pub clients: Vec<String>,
    pub block_size: usize,
    pub snapshot_interval: u64,
    pub endorsement_threshold: u32,
    pub encryption: EncryptionMode,
    pub public_outcome: bool,
    /// Run the auction at the peers without enclaves (baseline).
    pub native_auction: bool,
    pub weak: Weakenings,
    #[serde(skip)]
    pub data_dir: Option<PathBuf>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            peers: 3,
            clients: ["auctioneer", "alice", "bob", "carol", "dave", "mallory"].map(String::from).to_vec(),
            block_size: 10,
            snapshot_interval: 10,
            endorsement_threshold: 1,
            encryption: EncryptionMode::PerChaincode,
            public_outcome: true,
            native_auction: false,
            weak: Weakenings::NONE,
            data_dir: None,
        }
    }
}

/// A client's view of one executed proposal.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub transaction: Transaction,
    pub result: Option<ChaincodeResult>,
}

/// Outcome of one block at every peer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockReport {
    pub seq: u64,
    pub tx_ids: Vec<Digest>,
    pub outcomes: Vec<TxValidity>,
    pub state_hashes: Vec<Digest>,
}

pub struct Network {
    pub config: NetworkConfig,
    rng: ChaCha20Rng,
    pub ias: AttestationService,
    pub orderer: SoloOrderer,
    pub peers: Vec<Peer>,
    pub clients: BTreeMap<String, Client>,
    pub genesis: Block,
    data_key: SymmetricKey,
    /// Plaintext operation behind every proposal created through the
    /// network, keyed by transaction id. Harness-only knowledge.
    pub ground_truth: BTreeMap<Digest, (String, Operation)>,
    pub reports: Vec<BlockReport>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network").field("config", &self.config).field("peers", &self.peers).finish_non_exhaustive()
    }
}

pub fn auction_chaincode(config: &NetworkConfig) -> Arc<dyn Chaincode> {
    Arc::new(AuctionChaincode { public_outcome: config.public_outcome })
}

impl Network {
    pub fn bootstrap(config: NetworkConfig) -> Result<Self, PeerError> {
        assert!(config.peers > 0 && config.block_size > 0, "network needs peers and a positive block size");
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let ias = AttestationService::new(&mut rng);
        let orderer_key = SigningKeyPair::generate(&mut rng);
        let data_key = SymmetricKey::random(&mut rng);
        let client_data_key = (config.encryption == EncryptionMode::ClientBased).then_some(data_key);

        let mut clients = BTreeMap::new();
        for id in std::iter::once(ADMIN).chain(config.clients.iter().map(String::as_str)) {
            clients.insert(id.to_owned(), Client::new(id, client_data_key, &mut rng));
        }
        let peer_setup: Vec<(String, SigningKeyPair, Arc<Platform>)> = (0..config.peers)
            .map(|i| {
                let id = format!("peer{i}");
                let key = SigningKeyPair::generate(&mut rng);
                let platform = ias.provision_platform(&format!("platform-{i}"), &mut rng);
                (id, key, platform)
            })
            .collect();

        let chaincode = auction_chaincode(&config);
        let auction_def = ChaincodeDefinition {
            name: AUCTION_CHAINCODE.to_owned(),
            enclave: (!config.native_auction).then(|| EnclaveChaincode {
                measurement: chaincode_identity(chaincode.as_ref()).measurement(),
                encryption: config.encryption,
            }),
            endorsement_threshold: config.endorsement_threshold,
        };
        let genesis = make_genesis(&GenesisConfig {
            orderer_key: Some(orderer_key.public()),
            attestation_service_key: Some(ias.public_key()),
            ledger_enclave_measurement: Some(LedgerEnclaveProgram::measurement()),
            admin: Some(ADMIN.to_owned()),
            peers: peer_setup.iter().map(|(id, k, _)| PeerIdentity { id: id.clone(), key: k.public() }).collect(),
            clients: clients.values().map(Client::identity).collect(),
            chaincodes: vec![
                ChaincodeDefinition { name: REGISTRY_CHAINCODE.to_owned(), enclave: None, endorsement_threshold: 1 },
                auction_def,
            ],
        })?;

        let settings = PeerSettings {
            weak: config.weak,
            snapshot_interval: config.snapshot_interval,
            data_dir: config.data_dir.clone(),
        };
        let mut peers = Vec::new();
        for (id, key, platform) in peer_setup {
            let seed = rng.gen();
            peers.push(Peer::new(&id, key, platform, genesis.clone(), settings.clone(), seed)?);
        }
        let orderer = SoloOrderer::new(orderer_key, &genesis, config.block_size);
        let mut net = Self {
            config,
            rng,
            ias,
            orderer,
            peers,
            clients,
            genesis,
            data_key,
            ground_truth: BTreeMap::new(),
            reports: Vec::new(),
        };

        if net.config.native_auction {
            for p in &mut net.peers {
                p.host_native_chaincode(chaincode.clone());
            }
        } else {
            for i in 0..net.peers.len() {
                let (key, quote) = net.peers[i].host_enclave_chaincode(chaincode.clone())?;
                let tx = net.registration_transaction(i, key, quote)?;
                net.submit(tx);
            }
            net.cut_and_deliver()?;
            if net.config.encryption == EncryptionMode::PerChaincode {
                net.provision_keys(AUCTION_CHAINCODE)?;
            }
            for p in &mut net.peers {
                p.seal_identities()?;
            }
        }
        Ok(net)
    }

    pub fn genesis_hash(&self) -> Digest {
        self.genesis.hash()
    }

    /// Registration transaction for an enclave hosted at `peer`, endorsed
    /// by that peer.
    pub fn registration_transaction(
        &mut self,
        peer: usize,
        key: EnclaveKey,
        quote: AttestationReport,
    ) -> Result<Transaction, PeerError> {
        let op = RegistryOperation::Register {
            quote,
            enclave_key: key,
            chaincode: AUCTION_CHAINCODE.to_owned(),
            peer_id: self.peers[peer].id.clone(),
        };
        let proposal = self.client_mut(ADMIN)?.propose_plain(REGISTRY_CHAINCODE, codec::encode(&op));
        let e = self.peers[peer].endorse(&proposal, &self.ias)?;
        Ok(Transaction { proposal, endorsements: vec![e] })
    }

    /// Admin-side key provisioning to every committed, verifiable enclave
    /// of `chaincode`.
    pub fn provision_keys(&mut self, chaincode: &str) -> Result<usize, PeerError> {
        let entries = self.registered_enclaves(0, chaincode);
        let chain = self.genesis_hash();
        let mut provisioned = 0;
        for entry in entries {
            let Some(peer) = self.peers.iter().position(|p| p.id == entry.peer_id) else {
                continue;
            };
            let admin = self.clients.get_mut(ADMIN).expect("admin exists");
            let env = make_provision(&admin.key, &self.data_key, &chain, &entry.enclave_key, &mut admin.rng);
            if self.peers[peer].enclave(chaincode).is_some_and(|h| h.key == entry.enclave_key) {
                self.peers[peer].provision(chaincode, &env)?;
                provisioned += 1;
            }
        }
        Ok(provisioned)
    }

    /// Provisioning envelope for an arbitrary registered enclave key, built
    /// by the admin after checking the registry entry.
    pub fn provision_envelope_for(&mut self, entry: &RegistryEntry) -> Option<Envelope> {
        let expected = self.genesis.config.as_ref()?.chaincode(&entry.chaincode)?.enclave.as_ref()?.measurement;
        let chain = self.genesis_hash();
        let service = self.ias.public_key();
        if !client_verify_enclave(entry, &expected, &service, &chain, self.config.weak) {
            return None;
        }
        let admin = self.clients.get_mut(ADMIN)?;
        Some(make_provision(&admin.key, &self.data_key, &chain, &entry.enclave_key, &mut admin.rng))
    }

    /// Registry entries for `chaincode` committed at `peer` that pass the
    /// client-side verification.
    pub fn registered_enclaves(&self, peer: usize, chaincode: &str) -> Vec<RegistryEntry> {
        let cfg = self.genesis.config.as_ref().expect("genesis carries config");
        let Some(expected) = cfg.chaincode(chaincode).and_then(|d| d.enclave.as_ref()).map(|e| e.measurement) else {
            return Vec::new();
        };
        let chain = self.genesis_hash();
        let prefix = namespaced(REGISTRY_CHAINCODE, "");
        self.peers[peer]
            .ledger()
            .store()
            .range(&prefix)
            .filter_map(|(_, v)| codec::decode::<RegistryEntry>(&v.value).ok())
            .filter(|e| e.chaincode == chaincode)
            .filter(|e| client_verify_enclave(e, &expected, &cfg.attestation_service_key, &chain, self.config.weak))
            .collect()
    }

    pub fn client_mut(&mut self, id: &str) -> Result<&mut Client, PeerError> {
        self.clients.get_mut(id).ok_or_else(|| PeerError::UnknownClient(id.to_owned()))
    }

    /// Peers that endorse a proposal when the first choice is `start`.
    pub fn endorsers(&self, start: usize) -> Vec<usize> {
        let n = self.peers.len();
        let k = (self.config.endorsement_threshold.max(1) as usize).min(n);
        (0..k).map(|i| (start + i) % n).collect()
    }

    /// Builds a client's proposal for `chaincode` addressed to the enclaves
    /// at `endorsers`, and records its plaintext as ground truth.
    pub fn propose(
        &mut self,
        client: &str,
        chaincode: &str,
        op: Operation,
        endorsers: &[usize],
    ) -> Result<TransactionProposal, PeerError> {
        let native =
            self.genesis.config.as_ref().and_then(|c| c.chaincode(chaincode)).is_none_or(|d| d.enclave.is_none());
        let proposal = if native {
            self.client_mut(client)?.propose_plain(chaincode, codec::encode(&op))
        } else {
            let entries = self.registered_enclaves(endorsers[0], chaincode);
            let recipients: Vec<EnclaveKey> = endorsers
                .iter()
                .map(|&i| {
                    let id = &self.peers[i].id;
                    entries
                        .iter()
                        .find(|e| &e.peer_id == id)
                        .map(|e| e.enclave_key)
                        .ok_or_else(|| PeerError::NoEndorser(chaincode.to_owned()))
                })
                .collect::<Result<_, _>>()?;
            self.client_mut(client)?.propose(chaincode, op.clone(), &recipients)
        };
        self.ground_truth.insert(proposal.digest(), (client.to_owned(), op));
        Ok(proposal)
    }

    /// Collects endorsements and checks that they agree.
    pub fn endorse(
        &mut self,
        proposal: &TransactionProposal,
        endorsers: &[usize],
    ) -> Result<Vec<Endorsement>, PeerError> {
        let mut out = Vec::new();
        for &i in endorsers {
            out.push(self.peers[i].endorse(proposal, &self.ias)?);
        }
        check_agreement(&out)?;
        Ok(out)
    }

    /// Proposal, endorsement and client-side result recovery; the
    /// transaction is returned unsubmitted.
    pub fn invoke_at(&mut self, client: &str, op: Operation, start: usize) -> Result<Invocation, PeerError> {
        let endorsers = self.endorsers(start);
        let proposal = self.propose(client, AUCTION_CHAINCODE, op, &endorsers)?;
        let endorsements = self.endorse(&proposal, &endorsers)?;
        let result = self.clients[client].open(&endorsements[0]);
        Ok(Invocation { transaction: Transaction { proposal, endorsements }, result })
    }

    pub fn invoke(&mut self, client: &str, op: Operation) -> Result<Invocation, PeerError> {
        self.invoke_at(client, op, 0)
    }

    /// Invokes and submits.
    pub fn execute(&mut self, client: &str, op: Operation) -> Result<Invocation, PeerError> {
        let inv = self.invoke(client, op)?;
        self.submit(inv.transaction.clone());
        Ok(inv)
    }

    /// Endorses a batch of requests. Proposals are built in order; each
    /// peer then works through its share of the batch, peers in parallel
    /// under [`ExecMode::Parallel`].
    pub fn invoke_many(
        &mut self,
        requests: &[(String, Operation, usize)],
        mode: ExecMode,
    ) -> Vec<Result<Invocation, PeerError>> {
        let mut proposals = Vec::with_capacity(requests.len());
        for (client, op, start) in requests {
            let endorsers = self.endorsers(*start);
            proposals.push(self.propose(client, AUCTION_CHAINCODE, op.clone(), &endorsers).map(|p| (p, endorsers)));
        }
        let work: Vec<Vec<(usize, &TransactionProposal)>> = (0..self.peers.len())
            .map(|peer| {
                proposals
                    .iter()
                    .enumerate()
                    .filter_map(|(i, p)| p.as_ref().ok().filter(|(_, e)| e.contains(&peer)).map(|(p, _)| (i, p)))
                    .collect()
            })
            .collect();
        let ias = &self.ias;
        let mut slots: Vec<(
            &mut Peer,
            Vec<(usize, &TransactionProposal)>,
            Vec<(usize, Result<Endorsement, PeerError>)>,
        )> = self.peers.iter_mut().zip(work).map(|(p, w)| (p, w, Vec::new())).collect();
        par::for_each_mut(mode, &mut slots, |(peer, work, out)| {
            for (i, proposal) in work.iter() {
                out.push((*i, peer.endorse(proposal, ias)));
            }
        });
        let mut by_request: BTreeMap<usize, Vec<Result<Endorsement, PeerError>>> = BTreeMap::new();
        for (_, _, out) in slots {
            for (i, r) in out {
                by_request.entry(i).or_default().push(r);
            }
        }
        proposals
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let (proposal, _) = p?;
                let endorsements =
                    by_request.remove(&i).unwrap_or_default().into_iter().collect::<Result<Vec<_>, _>>()?;
                check_agreement(&endorsements)?;
                let result = self.clients[&requests[i].0].open(&endorsements[0]);
                Ok(Invocation { transaction: Transaction { proposal, endorsements }, result })
            })
            .collect()
    }

    pub fn submit(&mut self, tx: Transaction) {
        self.orderer.submit(tx);
    }

    /// Delivers one block to every peer.
    pub fn deliver(&mut self, block: Block) -> Result<BlockReport, PeerError> {
        let mut state_hashes = Vec::with_capacity(self.peers.len());
        let mut outcomes = None;
        for p in &mut self.peers {
            let record = p.deliver(block.clone())?;
            state_hashes.push(record.state_hash);
            outcomes.get_or_insert(record.outcomes);
        }
        let report = BlockReport {
            seq: block.seq,
            tx_ids: block.transactions.iter().map(Transaction::id).collect(),
            outcomes: outcomes.unwrap_or_default(),
            state_hashes,
        };
        self.reports.push(report.clone());
        Ok(report)
    }

    /// Cuts every pending transaction into blocks and delivers them.
    pub fn cut_and_deliver(&mut self) -> Result<Vec<BlockReport>, PeerError> {
        let mut out = Vec::new();
        for b in self.orderer.drain() {
            out.push(self.deliver(b)?);
        }
        Ok(out)
    }

    /// Outcome of a transaction, if it has been committed.
    pub fn outcome_of(&self, tx_id: &Digest) -> Option<TxValidity> {
        self.reports.iter().find_map(|r| r.tx_ids.iter().position(|t| t == tx_id).map(|i| r.outcomes[i]))
    }

    /// Valid committed transactions in commit order, with their plaintext
    /// operations where the network created them.
    pub fn committed_operations(&self) -> Vec<(String, Operation)> {
        self.reports
            .iter()
            .flat_map(|r| r.tx_ids.iter().zip(&r.outcomes))
            .filter(|(_, f)| f.is_valid())
            .filter_map(|(id, _)| self.ground_truth.get(id).cloned())
            .filter(|(_, op)| op.function != "register")
            .collect()
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }
}

fn check_agreement(endorsements: &[Endorsement]) -> Result<(), PeerError> {
    let first = endorsements.first().ok_or(PeerError::EndorsementMismatch)?;
    let agree = endorsements.iter().all(|e| {
        e.verify_signature()
            && e.body.proposal_digest == first.body.proposal_digest
            && e.body.read_set == first.body.read_set
            && e.body.write_set == first.body.write_set
    });
    if agree {
        Ok(())
    } else {
        Err(PeerError::EndorsementMismatch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::{op_bid, op_close, op_create, op_evaluate, AuctionOutcome};

    fn run_auction(config: NetworkConfig) -> (Network, Option<ChaincodeResult>) {
        let mut net = Network::bootstrap(config).unwrap();
        net.execute("auctioneer", op_create("a1", "painting")).unwrap();
        net.cut_and_deliver().unwrap();
        net.execute("alice", op_bid("a1", 10)).unwrap();
        net.execute("bob", op_bid("a1", 25)).unwrap();
        net.execute("carol", op_bid("a1", 7)).unwrap();
        net.cut_and_deliver().unwrap();
        net.execute("auctioneer", op_close("a1")).unwrap();
        net.cut_and_deliver().unwrap();
        let inv = net.execute("auctioneer", op_evaluate("a1")).unwrap();
        net.cut_and_deliver().unwrap();
        (net, inv.result)
    }

    fn expect_bob(result: Option<ChaincodeResult>) {
        let bytes = result.expect("result readable").expect("evaluation succeeds");
        let outcome: AuctionOutcome = codec::decode(&bytes).unwrap();
        assert_eq!(outcome.winner, Some(("bob".to_owned(), 25)));
    }

    #[test]
    fn enclave_auction_end_to_end() {
        let (net, result) = run_auction(NetworkConfig::default());
        expect_bob(result);
        let last = net.reports.last().unwrap();
        assert!(last.outcomes.iter().all(|f| f.is_valid()));
        assert!(last.state_hashes.windows(2).all(|w| w[0] == w[1]));
        assert!(net.peers.iter().all(|p| !p.is_halted()));
    }

    #[test]
    fn native_and_client_based_modes_agree() {
        let (_, native) = run_auction(NetworkConfig { native_auction: true, ..Default::default() });
        expect_bob(native);
        let (_, client) = run_auction(NetworkConfig { encryption: EncryptionMode::ClientBased, ..Default::default() });
        expect_bob(client);
    }

    #[test]
    fn threshold_two_endorsements_agree() {
        let (net, result) = run_auction(NetworkConfig { endorsement_threshold: 2, ..Default::default() });
        expect_bob(result);
        assert!(net.reports.iter().flat_map(|r| &r.outcomes).all(|f| f.is_valid()));
    }

    #[test]
    fn evaluate_before_close_is_an_application_error() {
        let mut net = Network::bootstrap(NetworkConfig::default()).unwrap();
        net.execute("auctioneer", op_create("a1", "x")).unwrap();
        net.cut_and_deliver().unwrap();
        let inv = net.invoke("auctioneer", op_evaluate("a1")).unwrap();
        assert_eq!(inv.result, Some(Err("BarrierAbsent".to_owned())));
        assert!(inv.transaction.endorsements[0].body.write_set.entries().is_empty());
    }

    #[test]
    fn restart_restores_ledger_enclave_state() {
        let (mut net, _) = run_auction(NetworkConfig { snapshot_interval: 2, ..Default::default() });
        let before = net.peers[1].ledger_enclave_summary().unwrap();
        let after = net.peers[1].restart().unwrap();
        assert_eq!(before, after);
        net.execute("alice", op_create("a2", "y")).unwrap();
        net.cut_and_deliver().unwrap();
    }

    #[test]
    fn parallel_and_sequential_batches_match() {
        let mut outs = Vec::new();
        for mode in [ExecMode::Sequential, ExecMode::Parallel] {
            let mut net = Network::bootstrap(NetworkConfig::default()).unwrap();
            net.execute("auctioneer", op_create("a1", "x")).unwrap();
            net.cut_and_deliver().unwrap();
            let reqs: Vec<_> = ["alice", "bob", "carol"]
                .iter()
                .enumerate()
                .map(|(i, c)| (c.to_string(), op_bid("a1", 5 + i as u64), i))
                .collect();
            let invs = net.invoke_many(&reqs, mode);
            for inv in invs {
                net.submit(inv.unwrap().transaction);
            }
            let reports = net.cut_and_deliver().unwrap();
            outs.push(reports.last().unwrap().state_hashes.clone());
        }
        assert_eq!(outs[0], outs[1]);
    }
}
