use std::sync::Arc;

use enclave_ledger::auction::{
    op_bid, op_close, op_create, op_evaluate, AuctionChaincode, AuctionOutcome, AUCTION_CHAINCODE,
};
use enclave_ledger::chaincode_enclave::*;
use enclave_ledger::codec;
use enclave_ledger::crypto::{self, BoxKeyPair, SymmetricKey};
use enclave_ledger::ledger::{
    namespaced, EncryptionMode, EndorsementBody, StoredValue, TransactionProposal, VersionedStore, WriteEntry,
};
use enclave_ledger::ledger_enclave::*;
use enclave_ledger::node::{Network, NetworkConfig, ADMIN};
use enclave_ledger::registry::key_commitment;
use enclave_ledger::tee::{AttestationOutcome, EchoProgram, EnclaveInstance, NoHost, Platform};
use enclave_ledger::Weakenings;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const BIDDERS: usize = 10;

fn bidder(i: usize) -> String {
    format!("bidder{i:02}")
}

fn network(encryption: EncryptionMode) -> Network {
    let mut config = NetworkConfig { peers: 2, encryption, ..NetworkConfig::default() };
    config.clients.extend((0..BIDDERS).map(bidder));
    Network::bootstrap(config).unwrap()
}

/// `lot` created, one bid per bidder (amount 10 * (i + 1)) and closed.
fn closed_auction(net: &mut Network) {
    net.execute("auctioneer", op_create("lot", "vase")).unwrap();
    net.cut_and_deliver().unwrap();
    for i in 0..BIDDERS {
        net.execute(&bidder(i), op_bid("lot", 10 * (i as u64 + 1))).unwrap();
    }
    net.cut_and_deliver().unwrap();
    net.execute("auctioneer", op_close("lot")).unwrap();
    net.cut_and_deliver().unwrap();
}

#[derive(Clone)]
enum Tamper {
    None,
    /// Alter the value of the named key before handing it over.
    Substitute(String),
    /// Claim a value for a key that is absent.
    Fabricate(String),
    /// Drop the named key from range results.
    Withhold(String),
    /// Add a forged pair to range results.
    Inject(String),
}

/// Host that records metadata traffic and may misbehave.
struct Probe<'a> {
    store: &'a VersionedStore,
    le: &'a mut EnclaveInstance,
    tamper: Tamper,
    meta_sizes: Vec<usize>,
    captured: Vec<MetaResponse>,
    replay: Option<MetaResponse>,
}

impl<'a> Probe<'a> {
    fn new(store: &'a VersionedStore, le: &'a mut EnclaveInstance, tamper: Tamper) -> Self {
        Self { store, le, tamper, meta_sizes: Vec::new(), captured: Vec::new(), replay: None }
    }
}

fn forged() -> StoredValue {
    StoredValue { value: vec![0xAB; 24], version: enclave_ledger::ledger::Version::new(1, 0) }
}

impl StateAccess for Probe<'_> {
    fn get_state(&mut self, key: &str) -> Option<StoredValue> {
        let mut v = self.store.get(key).cloned();
        match &self.tamper {
            Tamper::Substitute(k) if namespaced(AUCTION_CHAINCODE, k) == key => {
                if let Some(sv) = v.as_mut() {
                    sv.value[0] ^= 1;
                }
            }
            Tamper::Fabricate(k) if namespaced(AUCTION_CHAINCODE, k) == key => v = Some(forged()),
            _ => {}
        }
        v
    }

    fn get_range(&mut self, prefix: &str) -> Vec<(String, StoredValue)> {
        let mut out: Vec<(String, StoredValue)> =
            self.store.range(prefix).map(|(k, v)| (k.clone(), v.clone())).collect();
        match &self.tamper {
            Tamper::Withhold(k) => out.retain(|(key, _)| key != &namespaced(AUCTION_CHAINCODE, k)),
            Tamper::Inject(k) => {
                out.push((namespaced(AUCTION_CHAINCODE, k), forged()));
                out.sort_by(|a, b| a.0.cmp(&b.0));
            }
            _ => {}
        }
        out
    }

    fn get_meta(&mut self, request: &MetaRequest) -> Result<MetaResponse, LeError> {
        self.meta_sizes.push(request.keys.len());
        if let Some(old) = &self.replay {
            return Ok(old.clone());
        }
        let resp = le_get_meta(self.le, request)?;
        self.captured.push(resp.clone());
        Ok(resp)
    }
}

/// Runs `proposal` at peer 0's auction enclave against its committed state.
fn invoke_at_peer0(
    net: &mut Network,
    proposal: &TransactionProposal,
    probe_setup: impl FnOnce(&mut Probe),
) -> (Result<enclave_ledger::ledger::Endorsement, CceError>, Vec<usize>, Vec<MetaResponse>) {
    let store = net.peers[0].ledger().store().clone();
    let (hosted, le) = net.peers[0].enclave_with_ledger_enclave(AUCTION_CHAINCODE).unwrap();
    let mut probe = Probe::new(&store, le, Tamper::None);
    probe_setup(&mut probe);
    let r = cce_invoke(&mut hosted.instance, proposal, &mut probe);
    (r, probe.meta_sizes, probe.captured)
}

fn with(tamper: Tamper) -> impl FnOnce(&mut Probe) {
    move |p| p.tamper = tamper
}

/// A standalone ledger enclave and chaincode enclave on a fresh platform,
/// with the ledger enclave fed every block of `net`.
struct Standalone {
    platform: Arc<Platform>,
    le: EnclaveInstance,
    cc: EnclaveInstance,
}

fn standalone(net: &Network, chaincode: Arc<dyn Chaincode>, id: &str) -> Standalone {
    let mut rng = ChaCha20Rng::from_seed(crypto::hash(id.as_bytes()).0);
    let platform = net.ias.provision_platform(id, &mut rng);
    let mut le = EnclaveInstance::create(platform.clone(), LedgerEnclaveProgram::new(Weakenings::NONE), 1);
    le_init(&mut le, &net.genesis).unwrap();
    for b in net.orderer.history() {
        le_process_block(&mut le, b).unwrap();
    }
    let cc = EnclaveInstance::create(platform.clone(), ChaincodeEnclaveProgram::new(chaincode, Weakenings::NONE), 2);
    Standalone { platform, le, cc }
}

#[test]
fn setup_quotes_the_key_once() {
    let net = network(EncryptionMode::PerChaincode);
    let mut s = standalone(&net, Arc::new(AuctionChaincode::default()), "setup");
    let (key, quote) = cce_setup(&mut s.cc, &net.genesis).unwrap();
    let verdict = net.ias.ias_verify(&quote);
    assert_eq!(verdict.outcome, AttestationOutcome::Valid);
    assert!(verdict.verify(&net.ias.public_key()));
    assert_eq!(quote.report_data, key_commitment(&key));
    assert_eq!(key.chain, net.genesis.hash());
    assert_eq!(cce_setup(&mut s.cc, &net.genesis), Err(CceError::AlreadySetup));
}

#[test]
fn binding_requires_a_local_ledger_enclave() {
    let net = network(EncryptionMode::PerChaincode);
    let mut s = standalone(&net, Arc::new(AuctionChaincode::default()), "bind-a");
    let mut other = standalone(&net, Arc::new(AuctionChaincode::default()), "bind-bb");
    cce_setup(&mut s.cc, &net.genesis).unwrap();

    let (foreign_pk, foreign_report) = le_local_report(&mut other.le).unwrap();
    assert_eq!(cce_bind_ledger(&mut s.cc, &foreign_pk, &foreign_report), Err(CceError::BindRejected));

    let mut echo = EnclaveInstance::create(s.platform.clone(), EchoProgram { version: "1".into() }, 3);
    let impostor = codec::decode(&echo.ecall("local_report", b"pk", &mut NoHost).unwrap()).unwrap();
    let (pk, report) = le_local_report(&mut s.le).unwrap();
    assert_eq!(cce_bind_ledger(&mut s.cc, &pk, &impostor), Err(CceError::BindRejected));
    assert_eq!(
        cce_bind_ledger(&mut s.cc, &other.le.platform().attestation_public_key(), &report),
        Err(CceError::BindRejected)
    );
    cce_bind_ledger(&mut s.cc, &pk, &report).unwrap();
}

#[test]
fn provisioning_accepts_one_admin_key() {
    let net = network(EncryptionMode::PerChaincode);
    let mut s = standalone(&net, Arc::new(AuctionChaincode::default()), "prov");
    let (key, _) = cce_setup(&mut s.cc, &net.genesis).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let admin = net.clients[ADMIN].signing_key().clone();
    let chain = net.genesis.hash();
    let k1 = SymmetricKey::random(&mut rng);
    let k2 = SymmetricKey::random(&mut rng);

    let env1 = make_provision(&admin, &k1, &chain, &key, &mut rng);
    assert_eq!(cce_provision_key(&mut s.cc, &env1), Err(CceError::NotBound));
    let (pk, report) = le_local_report(&mut s.le).unwrap();
    cce_bind_ledger(&mut s.cc, &pk, &report).unwrap();

    let mut elsewhere = key;
    elsewhere.encryption = BoxKeyPair::generate(&mut rng).public();
    let misaddressed = make_provision(&admin, &k1, &chain, &elsewhere, &mut rng);
    assert_eq!(cce_provision_key(&mut s.cc, &misaddressed), Err(CceError::DecryptionFailure));

    let not_admin = net.clients["alice"].signing_key().clone();
    let rogue = make_provision(&not_admin, &k1, &chain, &key, &mut rng);
    assert_eq!(cce_provision_key(&mut s.cc, &rogue), Err(CceError::ClientAuthFailure));

    cce_provision_key(&mut s.cc, &env1).unwrap();
    cce_provision_key(&mut s.cc, &make_provision(&admin, &k1, &chain, &key, &mut rng)).unwrap();
    let env2 = make_provision(&admin, &k2, &chain, &key, &mut rng);
    assert_eq!(cce_provision_key(&mut s.cc, &env2), Err(CceError::KeyAlreadyProvisioned));
}

#[test]
fn bid_rwsets_match_reference_execution() {
    let mut net = network(EncryptionMode::None);
    net.execute("auctioneer", op_create("lot", "vase")).unwrap();
    net.cut_and_deliver().unwrap();
    let op = op_bid("lot", 25);
    let proposal = net.propose("alice", AUCTION_CHAINCODE, op.clone(), &[0]).unwrap();
    let (endorsement, _, _) = invoke_at_peer0(&mut net, &proposal, |_| {});
    let endorsement = endorsement.unwrap();
    assert!(endorsement.verify_signature());
    assert_eq!(endorsement.endorser.key(), &net.peers[0].enclave(AUCTION_CHAINCODE).unwrap().key.signing);

    let reference = execute_native(&AuctionChaincode::default(), net.peers[0].ledger().store(), "alice", &op);
    assert_eq!(reference.result, Ok(Vec::new()));
    assert_eq!(endorsement.body.read_set, reference.read_set);
    assert_eq!(endorsement.body.write_set, reference.write_set);
    let reads: Vec<&str> = endorsement.body.read_set.entries().iter().map(|r| r.key.as_str()).collect();
    let writes: Vec<&str> = endorsement.body.write_set.entries().iter().map(|w| w.key.as_str()).collect();
    assert_eq!((reads, writes), (vec!["auction/lot"], vec!["auction/lot.alice"]));
}

#[test]
fn proposals_for_another_enclave_do_not_open() {
    let mut net = network(EncryptionMode::PerChaincode);
    let proposal = net.propose("auctioneer", AUCTION_CHAINCODE, op_create("lot", "vase"), &[1]).unwrap();
    let (r, _, _) = invoke_at_peer0(&mut net, &proposal, |_| {});
    assert_eq!(r.map(|_| ()), Err(CceError::DecryptionFailure));
}

#[test]
fn host_state_is_verified_against_signed_metadata() {
    let mut net = network(EncryptionMode::PerChaincode);
    net.execute("auctioneer", op_create("lot", "vase")).unwrap();
    net.cut_and_deliver().unwrap();
    let bid = net.propose("alice", AUCTION_CHAINCODE, op_bid("lot", 25), &[0]).unwrap();

    let (honest, meta, captured) = invoke_at_peer0(&mut net, &bid, |_| {});
    assert!(honest.is_ok());
    assert_eq!(meta, vec![1]);

    let (r, _, _) = invoke_at_peer0(&mut net, &bid, with(Tamper::Substitute("lot".into())));
    assert_eq!(r.map(|_| ()), Err(CceError::StateVerificationFailure));

    let fresh = net.propose("auctioneer", AUCTION_CHAINCODE, op_create("other", "x"), &[0]).unwrap();
    let (r, _, _) = invoke_at_peer0(&mut net, &fresh, with(Tamper::Fabricate("other".into())));
    assert_eq!(r.map(|_| ()), Err(CceError::StateVerificationFailure));

    let old = captured[0].clone();
    let again = net.propose("bob", AUCTION_CHAINCODE, op_bid("lot", 30), &[0]).unwrap();
    let (r, _, _) = invoke_at_peer0(&mut net, &again, |p| p.replay = Some(old));
    assert_eq!(r.map(|_| ()), Err(CceError::StateVerificationFailure));
}

fn outcome(net: &Network, endorsement: &enclave_ledger::ledger::Endorsement) -> AuctionOutcome {
    let payload = net.clients["auctioneer"].open(endorsement).unwrap().unwrap();
    codec::decode(&payload).unwrap()
}

#[test]
fn range_reads_are_batched_and_checked() {
    let mut net = network(EncryptionMode::PerChaincode);
    closed_auction(&mut net);
    let eval = net.propose("auctioneer", AUCTION_CHAINCODE, op_evaluate("lot"), &[0]).unwrap();

    let (r, meta, _) = invoke_at_peer0(&mut net, &eval, |_| {});
    let e = r.unwrap();
    // the record read, then one batch for the barrier key plus every bid
    assert_eq!(meta, vec![1, BIDDERS + 1]);
    let bids_read = e.body.read_set.entries().iter().filter(|r| r.key.starts_with("auction/lot.bidder")).count();
    assert_eq!(bids_read, BIDDERS);
    assert_eq!(outcome(&net, &e).winner, Some((bidder(BIDDERS - 1), 10 * BIDDERS as u64)));

    let (r, _, _) = invoke_at_peer0(&mut net, &eval, with(Tamper::Inject("lot.zz".into())));
    assert_eq!(r.map(|_| ()), Err(CceError::StateVerificationFailure));

    // withholding is not detected: the range is only as complete as the host makes it
    let top = format!("lot.{}", bidder(BIDDERS - 1));
    let (r, _, _) = invoke_at_peer0(&mut net, &eval, with(Tamper::Withhold(top)));
    assert_eq!(outcome(&net, &r.unwrap()).winner, Some((bidder(BIDDERS - 2), 10 * (BIDDERS as u64 - 1))));
}

/// Writes, reads back and overwrites one key within a single invocation.
struct Scratch;

impl Chaincode for Scratch {
    fn name(&self) -> &str {
        AUCTION_CHAINCODE
    }

    fn version(&self) -> &str {
        "scratch"
    }

    fn invoke(&self, _ctx: &InvocationContext, shim: &mut dyn Shim) -> Result<ChaincodeOutput, InvokeError> {
        shim.put_state("k", b"v1".to_vec())?;
        let seen = shim.get_state("k")?.unwrap_or_default();
        shim.put_state("k", b"v2".to_vec())?;
        Ok(ChaincodeOutput { payload: seen, public: true })
    }
}

#[test]
fn writes_are_visible_within_an_invocation() {
    let net = network(EncryptionMode::None);
    let mut s = standalone(&net, Arc::new(Scratch), "scratch");
    let (key, _) = cce_setup(&mut s.cc, &net.genesis).unwrap();
    let (pk, report) = le_local_report(&mut s.le).unwrap();
    cce_bind_ledger(&mut s.cc, &pk, &report).unwrap();

    let alice = &net.clients["alice"];
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let op = Operation::new("anything", Vec::new());
    let proposal = seal_operation("alice", alice.signing_key(), AUCTION_CHAINCODE, op, None, None, &[key], &mut rng);
    let store = net.peers[0].ledger().store().clone();
    let mut host = HonestAccess { store: &store, ledger_enclave: &mut s.le };
    let e = cce_invoke(&mut s.cc, &proposal, &mut host).unwrap();

    let EndorsementBody { read_set, write_set, .. } = &e.body;
    assert!(read_set.is_empty());
    assert_eq!(write_set.entries(), &[WriteEntry { key: "auction/k".into(), value: b"v2".to_vec() }]);
    assert_eq!(open_result(&e, alice.result_keypair()), Some(Ok(b"v1".to_vec())));
}

#[test]
fn restored_identity_behaves_the_same() {
    let mut net = network(EncryptionMode::PerChaincode);
    closed_auction(&mut net);
    let eval = net.propose("auctioneer", AUCTION_CHAINCODE, op_evaluate("lot"), &[0]).unwrap();
    let before_key = net.peers[0].enclave(AUCTION_CHAINCODE).unwrap().key;
    let (before, _, _) = invoke_at_peer0(&mut net, &eval, |_| {});
    let before = before.unwrap();

    let after_key = net.peers[0].restart_chaincode_enclave(AUCTION_CHAINCODE).unwrap();
    assert_eq!(after_key, before_key);
    let (after, _, _) = invoke_at_peer0(&mut net, &eval, |_| {});
    let after = after.unwrap();
    assert_eq!(after.body.read_set, before.body.read_set);
    assert_eq!(after.body.write_set, before.body.write_set);
    assert_eq!(outcome(&net, &after), outcome(&net, &before));
    let store = net.peers[1].ledger().store();
    let validity = enclave_ledger::registry::etv_validate(
        &enclave_ledger::ledger::Transaction { proposal: eval, endorsements: vec![after] },
        store,
        net.peers[1].ledger().config(),
        net.genesis.hash(),
        Weakenings::NONE,
    );
    assert!(validity.is_valid());

    let blob = net.peers[0].enclave(AUCTION_CHAINCODE).unwrap().sealed_identity.clone().unwrap();
    let other = net.peers[1].platform().clone();
    let mut moved = EnclaveInstance::create(
        other,
        ChaincodeEnclaveProgram::new(Arc::new(AuctionChaincode::default()), Weakenings::NONE),
        9,
    );
    assert_eq!(cce_restore(&mut moved, &blob), Err(CceError::UnsealAuthenticationFailure));
}
