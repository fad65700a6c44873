use enclave_ledger::codec;
use enclave_ledger::crypto::{self, BoxKeyPair, Digest, SigningKeyPair};
use enclave_ledger::ledger::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

struct Fixture {
    orderer: SoloOrderer,
    peer: SigningKeyPair,
    genesis: Block,
}

fn genesis_config(rng: &mut ChaCha20Rng, peer: &SigningKeyPair, orderer: &SigningKeyPair) -> GenesisConfig {
    GenesisConfig {
        orderer_key: Some(orderer.public()),
        attestation_service_key: Some(SigningKeyPair::generate(rng).public()),
        ledger_enclave_measurement: Some(crypto::hash(b"ledger enclave")),
        admin: Some("admin".into()),
        peers: vec![PeerIdentity { id: "p0".into(), key: peer.public() }],
        clients: vec![ClientIdentity {
            id: "admin".into(),
            key: SigningKeyPair::generate(rng).public(),
            box_key: BoxKeyPair::generate(rng).public(),
        }],
        chaincodes: vec![ChaincodeDefinition { name: "kv".into(), enclave: None, endorsement_threshold: 1 }],
    }
}

fn fixture(block_size: usize) -> Fixture {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let orderer_key = SigningKeyPair::generate(&mut rng);
    let peer = SigningKeyPair::generate(&mut rng);
    let genesis = make_genesis(&genesis_config(&mut rng, &peer, &orderer_key)).unwrap();
    Fixture { orderer: SoloOrderer::new(orderer_key, &genesis, block_size), peer, genesis }
}

/// A peer-endorsed transaction reading `reads` and writing `writes`.
fn tx(peer: &SigningKeyPair, nonce: u8, reads: &[(&str, Option<Version>)], writes: &[(&str, &str)]) -> Transaction {
    let proposal = TransactionProposal {
        client_id: "admin".into(),
        chaincode_id: "kv".into(),
        payload: ProposalPayload::Plain(vec![nonce]),
        nonce: [nonce; 16],
    };
    let mut read_set = ReadSet::new();
    for (k, v) in reads {
        read_set.record(&namespaced("kv", k), *v);
    }
    let mut write_set = WriteSet::new();
    for (k, v) in writes {
        write_set.put(&namespaced("kv", k), v.as_bytes().to_vec());
    }
    let body = EndorsementBody {
        proposal_digest: proposal.digest(),
        chaincode_id: "kv".into(),
        read_set,
        write_set,
        result: Vec::new(),
    };
    let endorsement = Endorsement::sign(body, EndorserId::Peer(peer.public()), peer);
    Transaction { proposal, endorsements: vec![endorsement] }
}

fn validate_and_commit(ledger: &mut Ledger, block: Block) -> CommitRecord {
    let config = ledger.config().clone();
    let flags = ledger.validate_block(&block, &PeerEndorsementPolicy { config: &config }).unwrap();
    ledger.commit_block(block, &flags)
}

#[test]
fn genesis_is_deterministic_and_complete() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let orderer = SigningKeyPair::generate(&mut rng);
    let peer = SigningKeyPair::generate(&mut rng);
    let config = genesis_config(&mut rng, &peer, &orderer);
    let a = make_genesis(&config).unwrap();
    let b = make_genesis(&config).unwrap();
    assert_eq!(a.seq, 0);
    assert_eq!(codec::encode(&a), codec::encode(&b));

    let missing = GenesisConfig { orderer_key: None, ..config.clone() };
    assert_eq!(make_genesis(&missing), Err(LedgerError::MissingField("orderer_key")));
    let no_peers = GenesisConfig { peers: Vec::new(), ..config };
    assert_eq!(make_genesis(&no_peers), Err(LedgerError::MissingField("peers")));
}

#[test]
fn orderer_cuts_in_submission_order() {
    let mut f = fixture(10);
    let t1 = tx(&f.peer, 1, &[], &[("a", "1")]);
    let t2 = tx(&f.peer, 2, &[], &[("b", "2")]);
    f.orderer.submit(t1.clone());
    f.orderer.submit(t2.clone());
    let block = f.orderer.cut_block().unwrap();
    assert_eq!(block.seq, 1);
    assert_eq!(block.prev_hash, f.genesis.hash());
    assert_eq!(block.transactions, vec![t1, t2]);
    assert!(block.verify_orderer(&f.genesis.genesis_config().unwrap().orderer_key));

    assert!(f.orderer.cut_block().is_none(), "empty cut is skipped by default");
    let mut emitting = fixture(10).orderer.with_empty_blocks(true);
    assert!(emitting.cut_block().unwrap().transactions.is_empty());
}

#[test]
fn block_sizes_follow_counting_oracle() {
    let mut f = fixture(10);
    for i in 0..25u8 {
        f.orderer.submit(tx(&f.peer, i, &[], &[]));
    }
    let sizes: Vec<usize> = f.orderer.drain().iter().map(|b| b.transactions.len()).collect();
    let n = 25usize;
    let expected: Vec<usize> = (0..n.div_ceil(10)).map(|i| (n - i * 10).min(10)).collect();
    assert_eq!(sizes, expected);
    assert_eq!(sizes, vec![10, 10, 5]);
}

#[test]
fn read_conflict_within_a_block() {
    let mut f = fixture(10);
    let mut ledger = Ledger::new(f.genesis.clone()).unwrap();
    f.orderer.submit(tx(&f.peer, 1, &[], &[("k", "v0")]));
    validate_and_commit(&mut ledger, f.orderer.cut_block().unwrap());
    let v = ledger.store().get("kv/k").unwrap().version;
    assert_eq!(v, Version::new(1, 0));

    f.orderer.submit(tx(&f.peer, 2, &[("k", Some(v))], &[("k", "first")]));
    f.orderer.submit(tx(&f.peer, 3, &[("k", Some(v))], &[("k", "second")]));
    let record = validate_and_commit(&mut ledger, f.orderer.cut_block().unwrap());
    assert_eq!(record.outcomes, vec![TxValidity::Valid, TxValidity::ReadConflict]);
    assert_eq!(ledger.store().get("kv/k").unwrap().value, b"first");
}

#[test]
fn unendorsed_and_duplicate_transactions_are_invalid() {
    let mut f = fixture(10);
    let mut ledger = Ledger::new(f.genesis.clone()).unwrap();
    let mut bare = tx(&f.peer, 1, &[], &[("k", "x")]);
    bare.endorsements.clear();
    let dup = tx(&f.peer, 2, &[], &[("j", "y")]);
    f.orderer.submit(bare);
    f.orderer.submit(dup.clone());
    f.orderer.submit(dup);
    let record = validate_and_commit(&mut ledger, f.orderer.cut_block().unwrap());
    assert_eq!(
        record.outcomes,
        vec![TxValidity::EndorsementPolicyFailure, TxValidity::Valid, TxValidity::DuplicateTxId]
    );
    assert!(ledger.store().get("kv/k").is_none());
}

#[test]
fn commit_records_block_and_index_versions() {
    // blocks of two, so the sixth transaction is block 3, index 1
    let mut f = fixture(2);
    let mut ledger = Ledger::new(f.genesis.clone()).unwrap();
    for i in 0..6u8 {
        let key = if i == 5 { "k".to_string() } else { format!("pad{i}") };
        f.orderer.submit(tx(&f.peer, i, &[], &[(&key, "a")]));
    }
    for block in f.orderer.drain() {
        validate_and_commit(&mut ledger, block);
    }
    let stored = ledger.store().get("kv/k").unwrap();
    assert_eq!((stored.value.as_slice(), stored.version), (&b"a"[..], Version::new(3, 1)));
}

#[test]
fn header_checks() {
    let mut f = fixture(1);
    let ledger = Ledger::new(f.genesis.clone()).unwrap();
    let config = ledger.config().clone();
    let policy = PeerEndorsementPolicy { config: &config };
    for i in 0..2u8 {
        f.orderer.submit(tx(&f.peer, i, &[], &[]));
    }
    let blocks = f.orderer.drain();
    assert_eq!(ledger.validate_block(&blocks[1], &policy), Err(LedgerError::SequenceGap { expected: 1, got: 2 }));
    let mut forged = blocks[0].clone();
    forged.transactions.clear();
    assert_eq!(ledger.validate_block(&forged, &policy), Err(LedgerError::BadOrdererSignature));
}

#[test]
fn replay_reproduces_state_hash() {
    let mut f = fixture(3);
    let mut ledger = Ledger::new(f.genesis.clone()).unwrap();
    let mut incremental = Vec::new();
    for i in 0..20u8 {
        let key = format!("k{}", i % 4);
        let current = ledger.store().get(&namespaced("kv", &key)).map(|s| s.version);
        f.orderer.submit(tx(&f.peer, i, &[(&key, current)], &[(&key, &i.to_string())]));
        if i % 3 == 2 {
            let block = f.orderer.cut_block().unwrap();
            incremental.push(validate_and_commit(&mut ledger, block).state_hash);
        }
    }
    for block in f.orderer.drain() {
        incremental.push(validate_and_commit(&mut ledger, block).state_hash);
    }

    let stream = write_block_stream(&ledger.blocks()[1..]);
    let mut replica = Ledger::new(f.genesis.clone()).unwrap();
    let replayed: Vec<Digest> = read_block_stream(&stream)
        .unwrap()
        .into_iter()
        .map(|b| validate_and_commit(&mut replica, b).state_hash)
        .collect();
    assert_eq!(replayed, incremental);
    assert_eq!(replica.store().state_hash(), ledger.store().state_hash());
}

#[test]
fn empty_write_set_encoding_is_fixed() {
    // one u64 length prefix of zero
    assert_eq!(codec::encode(&WriteSet::new()), [0u8; 8]);
    assert_eq!(codec::encode(&ReadSet::new()), [0u8; 8]);
}

#[test]
fn version_layout_is_fixed_width_little_endian() {
    let v = Version::new(3, 1);
    assert_eq!(codec::encode(&v), [3, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0]);
    assert_eq!(codec::encode(&None::<Version>), [0]);
    assert_eq!(codec::encode(&Some(v))[0], 1);
}

#[test]
fn field_order_changes_bytes() {
    #[derive(Serialize)]
    struct Swapped {
        tx_index: u32,
        block_seq: u64,
    }
    let v = Version::new(5, 9);
    assert_ne!(codec::encode(&v), codec::encode(&Swapped { tx_index: 9, block_seq: 5 }));
}

fn arb_write_set() -> impl Strategy<Value = WriteSet> {
    proptest::collection::vec(("[a-z]{1,6}", proptest::collection::vec(any::<u8>(), 0..16)), 0..8).prop_map(|ws| {
        let mut set = WriteSet::new();
        for (k, v) in ws {
            set.put(&k, v);
        }
        set
    })
}

fn arb_read_set() -> impl Strategy<Value = ReadSet> {
    proptest::collection::vec(("[a-z]{1,6}", proptest::option::of((any::<u64>(), any::<u32>()))), 0..8).prop_map(|rs| {
        let mut set = ReadSet::new();
        for (k, v) in rs {
            set.record(&k, v.map(|(b, t)| Version::new(b, t)));
        }
        set
    })
}

proptest! {
    #[test]
    fn canonical_round_trip(
        reads in arb_read_set(),
        writes in arb_write_set(),
        digest in any::<[u8; 32]>(),
        result in proptest::collection::vec(any::<u8>(), 0..32),
    ) {
        let body = EndorsementBody {
            proposal_digest: Digest(digest),
            chaincode_id: "kv".into(),
            read_set: reads,
            write_set: writes,
            result,
        };
        let bytes = codec::encode(&body);
        let back: EndorsementBody = codec::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &body);
        prop_assert_eq!(codec::encode(&back), bytes);
    }

    #[test]
    fn trailing_bytes_are_rejected(writes in arb_write_set(), extra in 1u8..=255) {
        let mut bytes = codec::encode(&writes);
        bytes.push(extra);
        prop_assert!(codec::decode::<WriteSet>(&bytes).is_err());
    }
}
