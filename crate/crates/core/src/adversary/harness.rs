//! Runs an [`AttackScript`] against a freshly bootstrapped network whose
//! peer 0 is controlled by the adversary.
//!
//! Peer 0's untrusted ledger is kept honestly (it is also the adversary's
//! record of what was committed). Its ledger enclave is fed separately, and
//! `view` mirrors the state that enclave has processed, so the host can
//! answer state ocalls consistently with whatever it fed. Every snapshot the
//! enclave ever produced is kept together with the matching view.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{check_security_up_to_resets, BlockMutation, EnclaveTarget, LeakyAuction, SecurityVerdict, SpliceVariant};
use super::{AdversaryError, AllowedOutputs, AttackAction, AttackScript, Observation, ObservationLog, Probe, Step};
use super::{Arg, ValueSource};
use crate::auction::AUCTION_CHAINCODE;
use crate::chaincode_enclave::{
    cce_bind_ledger, cce_invoke, cce_provision_key, cce_setup, chaincode_identity, open_result,
    ChaincodeEnclaveProgram, EnclaveKey, Operation, StateAccess,
};
use crate::codec;
use crate::crypto::{Digest, SealedBlob, SigningKeyPair};
use crate::ledger::{
    namespaced, Block, Endorsement, EndorsementBody, EndorserId, ReadSet, StoredValue, Transaction,
    TransactionProposal, TxValidity, Version, VersionedStore, WriteSet,
};
use crate::ledger_enclave::{
    le_get_meta, le_init, le_local_report, le_process_block, le_snapshot, LeError, LedgerEnclaveProgram, MetaRequest,
    MetaResponse,
};
use crate::node::{BlockReport, Network, NetworkConfig, PeerError};
use crate::registry::{registry_key, RegistryEntry, RegistryOperation, REGISTRY_CHAINCODE};
use crate::tee::{AttestationReport, EnclaveInstance, Platform};

/// The client colluding with the adversary.
pub const COLLUDER: &str = "mallory";

const ADVERSARY: usize = 0;

/// Everything a finished attack run produced.
pub struct AttackRun {
    pub script: String,
    pub log: ObservationLog,
    /// Valid committed auction transactions in commit order.
    pub committed: Vec<Option<Probe>>,
    pub verdict: SecurityVerdict,
    /// Each expected signal and whether it was observed.
    pub expectations: Vec<(String, bool)>,
    /// Encoded blocks, proposals and endorsements that crossed the
    /// adversary's host.
    pub traffic: Vec<Vec<u8>>,
    pub network: Network,
}

impl AttackRun {
    pub fn expectations_met(&self) -> bool {
        self.expectations.iter().all(|(_, seen)| *seen)
    }

    pub fn passed(&self) -> bool {
        self.verdict.pass && self.expectations_met()
    }
}

struct StoredSnapshot {
    seq: u64,
    blob: SealedBlob,
    view: VersionedStore,
}

#[derive(Default)]
struct Tamper {
    substitutions: BTreeMap<String, StoredValue>,
    injections: BTreeMap<String, StoredValue>,
    replay_meta: Option<MetaResponse>,
}

/// Host side of peer 0's state ocalls.
struct AdversarialAccess<'a> {
    view: &'a VersionedStore,
    ledger_enclave: &'a mut EnclaveInstance,
    tamper: &'a Tamper,
    captured: &'a mut Vec<MetaResponse>,
}

impl StateAccess for AdversarialAccess<'_> {
    fn get_state(&mut self, key: &str) -> Option<StoredValue> {
        self.tamper.substitutions.get(key).or_else(|| self.view.get(key)).cloned()
    }

    fn get_range(&mut self, prefix: &str) -> Vec<(String, StoredValue)> {
        let mut out: BTreeMap<String, StoredValue> =
            self.view.range(prefix).map(|(k, v)| (k.clone(), v.clone())).collect();
        for (k, v) in self.tamper.substitutions.iter().chain(&self.tamper.injections) {
            if k.starts_with(prefix) {
                out.insert(k.clone(), v.clone());
            }
        }
        out.into_iter().collect()
    }

    fn get_meta(&mut self, request: &MetaRequest) -> Result<MetaResponse, LeError> {
        if let Some(r) = &self.tamper.replay_meta {
            return Ok(r.clone());
        }
        let r = le_get_meta(self.ledger_enclave, request)?;
        self.captured.push(r.clone());
        Ok(r)
    }
}

struct RogueEnclave {
    instance: EnclaveInstance,
    key: EnclaveKey,
}

/// Leading identifier of a `Debug` rendering, e.g. `SequenceGap` for
/// `SequenceGap { expected: 3, got: 5 }`.
fn variant_name(debug: &str) -> String {
    debug.split(|c: char| !(c.is_alphanumeric() || c == '_')).next().unwrap_or_default().to_owned()
}

fn peer_error_kind(e: &PeerError) -> String {
    match e {
        PeerError::Ledger(x) => variant_name(&format!("{x:?}")),
        PeerError::LedgerEnclave(x) => variant_name(&format!("{x:?}")),
        PeerError::Chaincode(x) => variant_name(&format!("{x:?}")),
        PeerError::Registry(x) => variant_name(&format!("{x:?}")),
        other => variant_name(&format!("{other:?}")),
    }
}

fn operation(function: &str, args: &[Arg]) -> Operation {
    Operation::new(function, args.iter().map(Arg::to_bytes).collect())
}

struct Harness {
    net: Network,
    rng: ChaCha20Rng,
    step: usize,
    log: ObservationLog,
    feed_paused: bool,
    held: Vec<Block>,
    view: VersionedStore,
    view_seq: u64,
    snapshots: Vec<StoredSnapshot>,
    blob_digests: BTreeSet<Digest>,
    proposals: Vec<TransactionProposal>,
    endorsements: Vec<Endorsement>,
    meta_responses: Vec<MetaResponse>,
    dropped: BTreeSet<usize>,
    tamper: Tamper,
    rogue: Option<RogueEnclave>,
    seen: BTreeSet<Digest>,
    committed: Vec<Option<Probe>>,
    traffic: Vec<Vec<u8>>,
}

/// Runs `script` against a network bootstrapped from `fixture` (with the
/// script's seed and block size). Enclave rejections are observations;
/// only references to artifacts that do not exist abort the run.
pub fn run_attack(fixture: &NetworkConfig, script: &AttackScript) -> Result<AttackRun, AdversaryError> {
    let mut config = fixture.clone();
    config.seed = script.seed;
    if let Some(b) = script.block_size {
        config.block_size = b;
    }
    if config.peers < 2 {
        return Err(AdversaryError::ScriptReference("the harness needs at least one honest peer".into()));
    }
    if config.native_auction {
        return Err(AdversaryError::ScriptReference("the harness attacks enclave chaincodes".into()));
    }
    if !config.clients.iter().any(|c| c == COLLUDER) {
        config.clients.push(COLLUDER.to_owned());
    }
    let net = Network::bootstrap(config)?;
    let mut h = Harness::new(net)?;
    for (i, step) in script.steps.iter().enumerate() {
        h.step = i;
        h.run_step(step)?;
    }
    Ok(h.finish(script))
}

impl Harness {
    fn new(mut net: Network) -> Result<Self, AdversaryError> {
        let rng = ChaCha20Rng::seed_from_u64(net.rng().gen());
        let mut h = Self {
            rng,
            step: 0,
            log: ObservationLog::default(),
            feed_paused: false,
            held: Vec::new(),
            view: net.peers[ADVERSARY].ledger().store().clone(),
            view_seq: net.peers[ADVERSARY].ledger().height(),
            snapshots: Vec::new(),
            blob_digests: BTreeSet::new(),
            proposals: Vec::new(),
            endorsements: Vec::new(),
            meta_responses: Vec::new(),
            dropped: BTreeSet::new(),
            tamper: Tamper::default(),
            rogue: None,
            seen: BTreeSet::new(),
            committed: Vec::new(),
            traffic: Vec::new(),
            net,
        };
        // Snapshots the host stored during bootstrap, with the views they
        // correspond to.
        let stored: Vec<(u64, SealedBlob)> = h.net.peers[ADVERSARY].snapshots().to_vec();
        for (seq, blob) in stored {
            let view = h.replay_view(seq);
            h.keep_snapshot(seq, blob, view);
        }
        h.snapshot_now()?;
        Ok(h)
    }

    /// State after the first `seq` bootstrap blocks, with their recorded
    /// outcomes.
    fn replay_view(&self, seq: u64) -> VersionedStore {
        let mut store = VersionedStore::new();
        let ledger = self.net.peers[ADVERSARY].ledger();
        for r in self.net.reports.iter().filter(|r| r.seq <= seq) {
            if let Some(b) = ledger.block(r.seq) {
                crate::ledger::commit_block(&mut store, b, &r.outcomes);
            }
        }
        store
    }

    fn keep_snapshot(&mut self, seq: u64, blob: SealedBlob, view: VersionedStore) {
        self.blob_digests.insert(codec::digest(&blob));
        self.snapshots.push(StoredSnapshot { seq, blob, view });
    }

    fn snapshot_now(&mut self) -> Result<(), AdversaryError> {
        match le_snapshot(self.net.peers[ADVERSARY].ledger_enclave_mut()) {
            Ok(blob) => {
                self.respond("le_snapshot", "ledger", &codec::encode(&blob));
                let view = self.view.clone();
                self.keep_snapshot(self.view_seq, blob, view);
            }
            Err(e) => self.reject("le_snapshot", &variant_name(&format!("{e:?}")), &e.to_string()),
        }
        Ok(())
    }

    fn respond(&mut self, call: &str, enclave: &str, bytes: &[u8]) {
        self.log.push(Observation::Response {
            step: self.step,
            call: call.to_owned(),
            enclave: enclave.to_owned(),
            prefix_seq: Some(self.view_seq),
            len: bytes.len(),
            digest: crate::crypto::hash(bytes),
        });
    }

    fn reject(&mut self, call: &str, kind: &str, detail: &str) {
        self.log.push(Observation::Rejection {
            step: self.step,
            call: call.to_owned(),
            kind: kind.to_owned(),
            detail: detail.to_owned(),
        });
    }

    fn reject_peer(&mut self, call: &str, e: &PeerError) {
        self.reject(call, &peer_error_kind(e), &e.to_string());
    }

    /// Records an endorsement the adversary saw and any result it can read.
    fn observe_endorsement(&mut self, e: &Endorsement, source: &str, prefix_seq: Option<u64>) {
        let bytes = codec::encode(e);
        if !self.seen.insert(crate::crypto::hash(&bytes)) {
            return;
        }
        self.traffic.push(bytes);
        if e.body.chaincode_id != AUCTION_CHAINCODE {
            return;
        }
        let Some(result) = open_result(e, self.net.clients[COLLUDER].result_keypair()) else {
            return;
        };
        let truth = self.net.ground_truth.get(&e.body.proposal_digest).cloned();
        self.log.push(Observation::ChaincodeOutput {
            step: self.step,
            source: source.to_owned(),
            client: truth.as_ref().map(|t| t.0.clone()).unwrap_or_default(),
            operation: truth.map(|t| t.1),
            prefix_seq,
            result,
        });
    }

    /// Executes a proposal at one of the adversary's chaincode enclaves.
    fn adversary_invoke(&mut self, proposal: &TransactionProposal, target: EnclaveTarget) -> Option<Endorsement> {
        self.proposals.push(proposal.clone());
        self.traffic.push(codec::encode(proposal));
        let peer = &mut self.net.peers[ADVERSARY];
        let result = match target {
            EnclaveTarget::Genuine => {
                let (hosted, le) = peer.enclave_with_ledger_enclave(AUCTION_CHAINCODE)?;
                let mut access = AdversarialAccess {
                    view: &self.view,
                    ledger_enclave: le,
                    tamper: &self.tamper,
                    captured: &mut self.meta_responses,
                };
                cce_invoke(&mut hosted.instance, proposal, &mut access)
            }
            EnclaveTarget::Rogue => {
                let rogue = self.rogue.as_mut()?;
                let mut access = AdversarialAccess {
                    view: &self.view,
                    ledger_enclave: peer.ledger_enclave_mut(),
                    tamper: &self.tamper,
                    captured: &mut self.meta_responses,
                };
                cce_invoke(&mut rogue.instance, proposal, &mut access)
            }
        };
        match result {
            Ok(e) => {
                self.respond("cce_invoke", "chaincode", &codec::encode(&e));
                self.endorsements.push(e.clone());
                self.observe_endorsement(&e, "endorsement@peer0", Some(self.view_seq));
                Some(e)
            }
            Err(err) => {
                self.reject("cce_invoke", &variant_name(&format!("{err:?}")), &err.to_string());
                None
            }
        }
    }

    fn run_step(&mut self, step: &Step) -> Result<(), AdversaryError> {
        match step {
            Step::Invoke { client, function, args, peer, submit } => {
                self.honest_invoke(client, operation(function, args), *peer, *submit)
            }
            Step::Cut => {
                for block in self.net.orderer.drain() {
                    self.deliver(block);
                }
                Ok(())
            }
            Step::Provision => {
                self.provision();
                Ok(())
            }
            Step::Attack { action } => self.attack(action),
        }
    }

    fn honest_invoke(&mut self, client: &str, op: Operation, start: usize, submit: bool) -> Result<(), AdversaryError> {
        if !self.net.clients.contains_key(client) {
            return Err(AdversaryError::ScriptReference(format!("client `{client}`")));
        }
        if start >= self.net.peers.len() {
            return Err(AdversaryError::ScriptReference(format!("peer {start}")));
        }
        let endorsers = self.net.endorsers(start);
        let proposal = match self.net.propose(client, AUCTION_CHAINCODE, op, &endorsers) {
            Ok(p) => p,
            Err(e) => {
                self.reject_peer("propose", &e);
                return Ok(());
            }
        };
        let mut endorsements = Vec::new();
        let mut withheld = false;
        for &i in &endorsers {
            if i == ADVERSARY {
                let index = self.endorsements.len();
                match self.adversary_invoke(&proposal, EnclaveTarget::Genuine) {
                    Some(e) => {
                        withheld |= self.dropped.contains(&index);
                        endorsements.push(e);
                    }
                    None => return Ok(()),
                }
            } else {
                let crate::node::Network { peers, ias, .. } = &mut self.net;
                match peers[i].endorse(&proposal, ias) {
                    Ok(e) => endorsements.push(e),
                    Err(e) => {
                        self.reject_peer(&format!("endorse@peer{i}"), &e);
                        return Ok(());
                    }
                }
            }
        }
        if submit && !withheld {
            self.net.submit(Transaction { proposal, endorsements });
        }
        Ok(())
    }

    /// Honest delivery to every peer's untrusted ledger; the adversary's
    /// ledger enclave gets the block only if the feed is running.
    fn deliver(&mut self, block: Block) {
        self.traffic.push(codec::encode(&block));
        let mut state_hashes = Vec::new();
        let mut outcomes: Option<Vec<TxValidity>> = None;
        match self.net.peers[ADVERSARY].commit_untrusted(block.clone()) {
            Ok(r) => state_hashes.push(r.state_hash),
            Err(e) => self.reject_peer("commit@peer0", &e),
        }
        for i in 1..self.net.peers.len() {
            match self.net.peers[i].deliver(block.clone()) {
                Ok(r) => {
                    state_hashes.push(r.state_hash);
                    outcomes.get_or_insert(r.outcomes);
                }
                Err(e) => self.reject_peer(&format!("deliver@peer{i}"), &e),
            }
        }
        let outcomes = outcomes.unwrap_or_default();
        for (index, (tx, validity)) in block.transactions.iter().zip(&outcomes).enumerate() {
            self.log.push(Observation::TxOutcome {
                step: self.step,
                seq: block.seq,
                index,
                tx_id: tx.id(),
                validity: *validity,
            });
            if validity.is_valid() && tx.chaincode_id() == AUCTION_CHAINCODE {
                self.committed.push(self.net.ground_truth.get(&tx.id()).cloned());
            }
            for e in &tx.endorsements {
                self.observe_endorsement(e, "block", None);
            }
        }
        self.net.reports.push(BlockReport {
            seq: block.seq,
            tx_ids: block.transactions.iter().map(Transaction::id).collect(),
            outcomes,
            state_hashes,
        });
        if self.feed_paused {
            self.held.push(block);
        } else {
            self.feed(&block, "le_process_block");
        }
    }

    /// Feeds one block to the adversary's ledger enclave and mirrors its
    /// effect in the view on success.
    fn feed(&mut self, block: &Block, call: &str) {
        match le_process_block(self.net.peers[ADVERSARY].ledger_enclave_mut(), block) {
            Ok(flags) => {
                self.respond(call, "ledger", &codec::encode(&flags));
                for (idx, (tx, flag)) in block.transactions.iter().zip(&flags).enumerate() {
                    if flag.is_valid() {
                        for w in tx.endorsements[0].body.write_set.entries() {
                            self.view.overwrite(&w.key, w.value.clone(), Version::new(block.seq, idx as u32));
                        }
                    }
                }
                self.view_seq = block.seq;
                let _ = self.snapshot_now();
            }
            Err(e) => self.reject(call, &variant_name(&format!("{e:?}")), &e.to_string()),
        }
    }

    fn committed_block(&self, seq: u64) -> Result<Block, AdversaryError> {
        self.net.peers[ADVERSARY]
            .ledger()
            .block(seq)
            .filter(|_| seq > 0)
            .cloned()
            .ok_or_else(|| AdversaryError::ScriptReference(format!("block {seq}")))
    }

    fn provision(&mut self) {
        if let Err(e) = self.net.provision_keys(AUCTION_CHAINCODE) {
            self.reject_peer("provision", &e);
        }
        let Some(rogue) = &mut self.rogue else {
            return;
        };
        let entries = self.net.registered_enclaves(1, AUCTION_CHAINCODE);
        let Some(entry) = entries.iter().find(|e| e.enclave_key == rogue.key) else {
            return;
        };
        if let Some(env) = self.net.provision_envelope_for(entry) {
            if let Err(e) = cce_provision_key(&mut rogue.instance, &env) {
                let detail = e.to_string();
                self.reject("provision@rogue", &variant_name(&format!("{e:?}")), &detail);
            }
        }
    }

    fn resolve_value(&self, full_key: &str, source: &ValueSource) -> Result<StoredValue, AdversaryError> {
        let current = self.view.get(full_key).map(|v| v.version).unwrap_or(Version::new(self.view_seq, 0));
        match source {
            ValueSource::Literal { hex } => {
                let value = hex::decode(hex).map_err(|_| AdversaryError::ScriptReference(format!("hex `{hex}`")))?;
                Ok(StoredValue { value, version: current })
            }
            ValueSource::Endorsement { index } => {
                let e = self
                    .endorsements
                    .get(*index)
                    .ok_or_else(|| AdversaryError::ScriptReference(format!("endorsement {index}")))?;
                let value = e.body.write_set.get(full_key).ok_or_else(|| {
                    AdversaryError::ScriptReference(format!("write of `{full_key}` in endorsement {index}"))
                })?;
                Ok(StoredValue { value: value.to_vec(), version: current })
            }
            ValueSource::Snapshot { seq } => self
                .snapshots
                .iter()
                .rev()
                .find(|s| s.seq == *seq)
                .and_then(|s| s.view.get(full_key).cloned())
                .ok_or_else(|| AdversaryError::ScriptReference(format!("`{full_key}` in snapshot {seq}"))),
        }
    }

    fn rollback_to(&mut self, position: usize) {
        let snap = &self.snapshots[position];
        let (seq, blob, view) = (snap.seq, snap.blob.clone(), snap.view.clone());
        // Only bytes the enclave itself produced earlier are ever replayed.
        assert!(self.blob_digests.contains(&codec::digest(&blob)), "rollback to a blob the host never stored");
        match self.net.peers[ADVERSARY].restart_ledger_enclave_from(&blob) {
            Ok(summary) => {
                self.respond("le_restore", "ledger", &codec::encode(&summary));
                self.view = view;
                self.view_seq = seq;
            }
            Err(e) => self.reject_peer("le_restore", &e),
        }
    }

    fn collude(&mut self, op: Operation, target: EnclaveTarget, submit: bool) -> Result<(), AdversaryError> {
        let proposal = match target {
            EnclaveTarget::Genuine => match self.net.propose(COLLUDER, AUCTION_CHAINCODE, op, &[ADVERSARY]) {
                Ok(p) => p,
                Err(e) => {
                    self.reject_peer("propose", &e);
                    return Ok(());
                }
            },
            EnclaveTarget::Rogue => {
                let key = self
                    .rogue
                    .as_ref()
                    .map(|r| r.key)
                    .ok_or_else(|| AdversaryError::ScriptReference("rogue enclave".into()))?;
                let p = self.net.client_mut(COLLUDER)?.propose(AUCTION_CHAINCODE, op.clone(), &[key]);
                self.net.ground_truth.insert(p.digest(), (COLLUDER.to_owned(), op));
                p
            }
        };
        if let Some(e) = self.adversary_invoke(&proposal, target) {
            if submit {
                self.net.submit(Transaction { proposal, endorsements: vec![e] });
            }
        }
        Ok(())
    }

    /// Registration of `key` with `quote`: first through an honest peer,
    /// then as a transaction the adversary's peer endorses on its own.
    fn register(&mut self, key: EnclaveKey, quote: AttestationReport) -> Result<(), AdversaryError> {
        let op = RegistryOperation::Register {
            quote: quote.clone(),
            enclave_key: key,
            chaincode: AUCTION_CHAINCODE.to_owned(),
            peer_id: self.net.peers[ADVERSARY].id.clone(),
        };
        let proposal = self.net.client_mut(COLLUDER)?.propose_plain(REGISTRY_CHAINCODE, codec::encode(&op));
        let crate::node::Network { peers, ias, .. } = &mut self.net;
        match peers[1].endorse(&proposal, ias) {
            Ok(e) => {
                self.net.submit(Transaction { proposal, endorsements: vec![e] });
                return Ok(());
            }
            Err(e) => self.reject_peer("ercc_endorse@peer1", &e),
        }
        let expected = chaincode_identity(&crate::auction::AuctionChaincode::default()).measurement();
        let entry = RegistryEntry {
            chaincode: AUCTION_CHAINCODE.to_owned(),
            enclave_key: key,
            measurement: expected,
            verdict: self.net.ias.ias_verify(&quote),
            peer_id: self.net.peers[ADVERSARY].id.clone(),
        };
        let rkey = registry_key(&key.signing);
        let mut read_set = ReadSet::new();
        read_set.record(&rkey, None);
        let mut write_set = WriteSet::new();
        write_set.put(&rkey, codec::encode(&entry));
        let body = EndorsementBody {
            proposal_digest: proposal.digest(),
            chaincode_id: REGISTRY_CHAINCODE.to_owned(),
            read_set,
            write_set,
            result: Vec::new(),
        };
        let e = self.net.peers[ADVERSARY].sign_endorsement(body);
        self.net.submit(Transaction { proposal, endorsements: vec![e] });
        Ok(())
    }

    /// A fresh auction enclave on `platform`, set up on this chain.
    fn launch(
        &mut self,
        platform: Arc<Platform>,
        chaincode: Arc<dyn crate::chaincode_enclave::Chaincode>,
    ) -> (EnclaveInstance, Option<(EnclaveKey, AttestationReport)>) {
        let weak = self.net.config.weak;
        let mut instance =
            EnclaveInstance::create(platform, ChaincodeEnclaveProgram::new(chaincode, weak), self.rng.gen());
        let genesis = self.net.genesis.clone();
        match cce_setup(&mut instance, &genesis) {
            Ok(r) => (instance, Some(r)),
            Err(e) => {
                self.reject("cce_setup", &variant_name(&format!("{e:?}")), &e.to_string());
                (instance, None)
            }
        }
    }

    fn splice(&mut self, variant: SpliceVariant) -> Result<(), AdversaryError> {
        let platform = self.net.peers[ADVERSARY].platform().clone();
        let genuine = crate::node::auction_chaincode(&self.net.config);
        match variant {
            SpliceVariant::ReportDataSwap => {
                let (_, a) = self.launch(platform.clone(), genuine.clone());
                let (_, b) = self.launch(platform, genuine);
                if let (Some((key_a, _)), Some((_, quote_b))) = (a, b) {
                    self.register(key_a, quote_b)?;
                }
            }
            SpliceVariant::RogueMeasurement => {
                let (mut instance, setup) = self.launch(platform, Arc::new(LeakyAuction));
                if let Some((key, quote)) = setup {
                    match le_local_report(self.net.peers[ADVERSARY].ledger_enclave_mut()) {
                        Ok((le_key, report)) => {
                            if let Err(e) = cce_bind_ledger(&mut instance, &le_key, &report) {
                                self.reject("cce_bind", &variant_name(&format!("{e:?}")), &e.to_string());
                            }
                        }
                        Err(e) => self.reject("le_local_report", &variant_name(&format!("{e:?}")), &e.to_string()),
                    }
                    self.rogue = Some(RogueEnclave { instance, key });
                    self.register(key, quote)?;
                }
            }
            SpliceVariant::UncertifiedPlatform => {
                let uncertified = Platform::uncertified("uncertified", &mut self.rng);
                let _ = self.launch(uncertified, genuine.clone());
                let forged = Platform::forged("forged", &mut self.rng);
                if let (_, Some((key, quote))) = self.launch(forged, genuine) {
                    self.register(key, quote)?;
                }
            }
        }
        Ok(())
    }

    fn cross_platform_bind(&mut self) {
        let weak = self.net.config.weak;
        let other = Platform::forged("elsewhere", &mut self.rng);
        let genesis = self.net.genesis.clone();
        let mut le = EnclaveInstance::create(other, LedgerEnclaveProgram::new(weak), self.rng.gen());
        let report = le_init(&mut le, &genesis).and_then(|_| le_local_report(&mut le));
        let (le_key, report) = match report {
            Ok(r) => r,
            Err(e) => {
                self.reject("le_local_report", &variant_name(&format!("{e:?}")), &e.to_string());
                return;
            }
        };
        let platform = self.net.peers[ADVERSARY].platform().clone();
        let genuine = crate::node::auction_chaincode(&self.net.config);
        let (mut cc, setup) = self.launch(platform, genuine);
        if setup.is_some() {
            if let Err(e) = cce_bind_ledger(&mut cc, &le_key, &report) {
                self.reject("cce_bind", &variant_name(&format!("{e:?}")), &e.to_string());
            }
        }
    }

    fn attack(&mut self, action: &AttackAction) -> Result<(), AdversaryError> {
        match action {
            AttackAction::PauseFeed => self.feed_paused = true,
            AttackAction::ResumeFeed => {
                self.feed_paused = false;
                for b in std::mem::take(&mut self.held) {
                    self.feed(&b, "le_process_block");
                }
            }
            AttackAction::CatchUp => {
                self.held.clear();
                let height = self.net.peers[ADVERSARY].ledger().height();
                for seq in self.view_seq + 1..=height {
                    let b = self.committed_block(seq)?;
                    self.feed(&b, "le_process_block");
                }
            }
            AttackAction::FeedBlock { seq, mutation } => {
                let mut b = self.committed_block(*seq)?;
                match mutation {
                    BlockMutation::None => {}
                    BlockMutation::TamperWrite => {
                        let tx = b
                            .transactions
                            .iter_mut()
                            .find(|t| !t.endorsements[0].body.write_set.is_empty())
                            .ok_or_else(|| AdversaryError::ScriptReference(format!("a write in block {seq}")))?;
                        let ws = &tx.endorsements[0].body.write_set;
                        let mut tampered = WriteSet::new();
                        for (i, w) in ws.entries().iter().enumerate() {
                            let mut v = w.value.clone();
                            if i == 0 {
                                match v.first_mut() {
                                    Some(x) => *x ^= 1,
                                    None => v.push(1),
                                }
                            }
                            tampered.put(&w.key, v);
                        }
                        tx.endorsements[0].body.write_set = tampered;
                    }
                    BlockMutation::DropTransaction => {
                        b.transactions.pop();
                    }
                    BlockMutation::ForgedSignature => {
                        let forger = SigningKeyPair::generate(&mut self.rng);
                        b.orderer_signature = Some(forger.sign(&b.signing_message()));
                    }
                }
                self.feed(&b, "le_process_block");
            }
            AttackAction::ReorderDelivery { order } => {
                for seq in order {
                    let b = self.committed_block(*seq)?;
                    self.feed(&b, "le_process_block");
                }
            }
            AttackAction::DropMessage { index } => {
                self.dropped.insert(*index);
            }
            AttackAction::ReplayProposal { index, submit } => {
                let p = self
                    .proposals
                    .get(*index)
                    .cloned()
                    .ok_or_else(|| AdversaryError::ScriptReference(format!("proposal {index}")))?;
                if let Some(e) = self.adversary_invoke(&p, EnclaveTarget::Genuine) {
                    if *submit {
                        self.net.submit(Transaction { proposal: p, endorsements: vec![e] });
                    }
                }
            }
            AttackAction::RollbackLedgerEnclave { seq, index } => {
                let position = match (seq, index) {
                    (Some(seq), _) => self
                        .snapshots
                        .iter()
                        .rposition(|s| s.seq == *seq)
                        .ok_or_else(|| AdversaryError::ScriptReference(format!("snapshot at block {seq}")))?,
                    (None, Some(i)) => i % self.snapshots.len(),
                    (None, None) => return Err(AdversaryError::ScriptReference("rollback needs seq or index".into())),
                };
                self.rollback_to(position);
            }
            AttackAction::RestartChaincodeEnclave => {
                match self.net.peers[ADVERSARY].restart_chaincode_enclave(AUCTION_CHAINCODE) {
                    Ok(key) => self.respond("cce_restore", "chaincode", &codec::encode(&key)),
                    Err(e) => self.reject_peer("cce_restore", &e),
                }
            }
            AttackAction::SubstituteStateValue { key, source } => {
                let full = namespaced(AUCTION_CHAINCODE, key);
                let v = self.resolve_value(&full, source)?;
                self.tamper.substitutions.insert(full, v);
            }
            AttackAction::InjectRangeEntry { key, source } => {
                let full = namespaced(AUCTION_CHAINCODE, key);
                let v = self.resolve_value(&full, source)?;
                self.tamper.injections.insert(full, v);
            }
            AttackAction::ReplayMetaResponse { index } => {
                // An enclave that trusts its host never asks, so there may be
                // nothing to replay; that is logged rather than fatal.
                match self.meta_responses.get(*index).cloned() {
                    Some(r) => self.tamper.replay_meta = Some(r),
                    None => self.reject("replay_meta_response", "NothingCaptured", &format!("meta response {index}")),
                }
            }
            AttackAction::ClearTampering => self.tamper = Tamper::default(),
            AttackAction::ColludeInvoke { function, args, target, submit } => {
                self.collude(operation(function, args), *target, *submit)?;
            }
            AttackAction::ProbeAllPrefixes { function, args } => {
                let op = operation(function, args);
                let mut latest: BTreeMap<u64, usize> = BTreeMap::new();
                for (i, s) in self.snapshots.iter().enumerate() {
                    latest.insert(s.seq, i);
                }
                for &position in latest.values() {
                    self.rollback_to(position);
                    self.collude(op.clone(), EnclaveTarget::Genuine, false)?;
                }
            }
            AttackAction::SpliceAttestation { variant } => self.splice(*variant)?,
            AttackAction::CrossPlatformBind => self.cross_platform_bind(),
            AttackAction::UnregisteredEndorse { index } => {
                let e = self
                    .endorsements
                    .get(*index)
                    .cloned()
                    .ok_or_else(|| AdversaryError::ScriptReference(format!("endorsement {index}")))?;
                let proposal = self
                    .proposals
                    .iter()
                    .find(|p| p.digest() == e.body.proposal_digest)
                    .cloned()
                    .ok_or_else(|| AdversaryError::ScriptReference(format!("proposal of endorsement {index}")))?;
                let key = SigningKeyPair::generate(&mut self.rng);
                let forged = Endorsement::sign(e.body, EndorserId::Enclave(key.public()), &key);
                self.net.submit(Transaction { proposal, endorsements: vec![forged] });
            }
        }
        Ok(())
    }

    fn finish(self, script: &AttackScript) -> AttackRun {
        let kinds = self.log.kinds();
        let expectations = script.expect.iter().map(|k| (k.clone(), kinds.contains(k))).collect();
        let verdict = check_security_up_to_resets(&self.log, &AllowedOutputs::from_committed(&self.committed));
        AttackRun {
            script: script.name.clone(),
            log: self.log,
            committed: self.committed,
            verdict,
            expectations,
            traffic: self.traffic,
            network: self.net,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::load_corpus;
    use crate::Weakenings;

    fn corpus() -> Vec<AttackScript> {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus");
        load_corpus(&dir).unwrap().into_iter().map(|(_, s)| s).collect()
    }

    fn summary(run: &AttackRun) -> String {
        format!(
            "{}: verdict={:?} kinds={:?} missing={:?}",
            run.script,
            run.verdict,
            run.log.kinds(),
            run.expectations.iter().filter(|e| !e.1).map(|e| &e.0).collect::<Vec<_>>()
        )
    }

    #[test]
    fn strong_fixture_passes_the_corpus() {
        let fixture = NetworkConfig::default();
        let mut failures = Vec::new();
        for s in corpus() {
            let run = run_attack(&fixture, &s).unwrap();
            if !run.passed() {
                failures.push(summary(&run));
            }
        }
        assert!(failures.is_empty(), "{}", failures.join("\n"));
    }

    #[test]
    fn every_weakening_is_caught() {
        let cases = [
            (Weakenings { skip_sequence_check: true, ..Weakenings::NONE }, "02-sequence-gap"),
            (Weakenings { skip_meta_signature: true, ..Weakenings::NONE }, "03-substitute-uncommitted-close"),
            (Weakenings { skip_attestation_check: true, ..Weakenings::NONE }, "04-rogue-measurement"),
        ];
        let scripts = corpus();
        for (weak, culprit) in cases {
            let fixture = NetworkConfig { weak, ..NetworkConfig::default() };
            let insecure: Vec<String> = scripts
                .iter()
                .filter(|s| !run_attack(&fixture, s).unwrap().verdict.pass)
                .map(|s| s.name.clone())
                .collect();
            assert!(insecure.iter().any(|n| n == culprit), "{weak:?}: {insecure:?}");
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let fixture = NetworkConfig::default();
        let s = &corpus()[1];
        let a = run_attack(&fixture, s).unwrap();
        let b = run_attack(&fixture, s).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.traffic, b.traffic);
    }

    #[test]
    fn missing_artifacts_are_reported() {
        let text = r#"{"name":"x","seed":1,"steps":[{"step":"attack","action":{"kind":"replay_proposal","index":3}}]}"#;
        let s = AttackScript::from_json(text).unwrap();
        assert!(matches!(run_attack(&NetworkConfig::default(), &s), Err(AdversaryError::ScriptReference(_))));
    }

    #[test]
    fn random_schedules_stay_secure() {
        let fixture = NetworkConfig::default();
        for seed in 0..6 {
            let run = run_attack(&fixture, &crate::adversary::random_script(seed, 16)).unwrap();
            assert!(run.verdict.pass, "{}", summary(&run));
            assert!(run.verdict.outputs_checked > 0);
        }
    }
}
