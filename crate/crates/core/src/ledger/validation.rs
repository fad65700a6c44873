use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::crypto::{Digest, PublicKey};

use super::{Block, ChainConfig, EndorserId, LedgerError, Transaction, Version, VersionView, VersionedStore};

/// Per-transaction outcome of block validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxValidity {
    Valid,
    EndorsementPolicyFailure,
    RegistryCheckFailure,
    ReadConflict,
    DuplicateTxId,
    NamespaceViolation,
}

impl TxValidity {
    pub fn is_valid(self) -> bool {
        self == TxValidity::Valid
    }
}

/// Endorsement-policy evaluation for a single transaction, against the
/// state committed before the enclosing block.
pub trait EndorsementPolicy {
    fn evaluate(&self, tx: &Transaction) -> TxValidity;
}

/// "N distinct genesis peers", for chaincodes that run at the peer itself.
pub struct PeerEndorsementPolicy<'a> {
    pub config: &'a ChainConfig,
}

impl PeerEndorsementPolicy<'_> {
    pub fn distinct_peer_endorsers(config: &ChainConfig, tx: &Transaction) -> usize {
        let signers: BTreeSet<&PublicKey> = tx
            .endorsements
            .iter()
            .filter(|e| matches!(e.endorser, EndorserId::Peer(_)))
            .filter(|e| config.is_peer_key(e.endorser.key()) && e.verify_signature())
            .map(|e| e.endorser.key())
            .collect();
        signers.len()
    }
}

impl EndorsementPolicy for PeerEndorsementPolicy<'_> {
    fn evaluate(&self, tx: &Transaction) -> TxValidity {
        match self.config.chaincode(tx.chaincode_id()) {
            Some(def) if def.enclave.is_none() => {
                if Self::distinct_peer_endorsers(self.config, tx) >= def.endorsement_threshold.max(1) as usize {
                    TxValidity::Valid
                } else {
                    TxValidity::EndorsementPolicyFailure
                }
            }
            _ => TxValidity::EndorsementPolicyFailure,
        }
    }
}

/// Orderer signature, sequence number and hash chain.
pub fn check_block_header(
    block: &Block,
    orderer_key: &PublicKey,
    last_seq: u64,
    last_hash: &Digest,
) -> Result<(), LedgerError> {
    if !block.verify_orderer(orderer_key) {
        return Err(LedgerError::BadOrdererSignature);
    }
    if block.seq != last_seq + 1 {
        return Err(LedgerError::SequenceGap { expected: last_seq + 1, got: block.seq });
    }
    if &block.prev_hash != last_hash {
        return Err(LedgerError::HashChainBreak(block.seq));
    }
    Ok(())
}

fn structurally_sound(tx: &Transaction) -> bool {
    let Some(first) = tx.endorsements.first() else {
        return false;
    };
    let id = tx.id();
    // Endorsers must agree on the state transition; results may differ since
    // each enclave encrypts its result independently for the client.
    first.body.proposal_digest == id
        && first.body.chaincode_id == tx.proposal.chaincode_id
        && tx.endorsements.iter().all(|e| {
            e.body.proposal_digest == first.body.proposal_digest
                && e.body.chaincode_id == first.body.chaincode_id
                && e.body.read_set == first.body.read_set
                && e.body.write_set == first.body.write_set
        })
}

fn in_namespace(tx: &Transaction) -> bool {
    let prefix = format!("{}/", tx.proposal.chaincode_id);
    let body = &tx.endorsements[0].body;
    body.read_set.entries().iter().all(|r| r.key.starts_with(&prefix))
        && body.write_set.entries().iter().all(|w| w.key.starts_with(&prefix))
}

/// Sequential validation of a block's transactions: duplicate ids, endorsement
/// structure, namespace, endorsement policy and read-write conflicts, with
/// earlier valid transactions of the same block taking effect first.
pub fn validate_transactions(
    block_seq: u64,
    transactions: &[Transaction],
    versions: &dyn VersionView,
    already_committed: &dyn Fn(&Digest) -> bool,
    policy: &dyn EndorsementPolicy,
) -> Vec<TxValidity> {
    let mut overlay: BTreeMap<&str, Version> = BTreeMap::new();
    let mut seen: HashSet<Digest> = HashSet::new();
    let mut flags = Vec::with_capacity(transactions.len());
    for (idx, tx) in transactions.iter().enumerate() {
        let id = tx.id();
        let flag = if already_committed(&id) || !seen.insert(id) {
            TxValidity::DuplicateTxId
        } else if !structurally_sound(tx) {
            TxValidity::EndorsementPolicyFailure
        } else if !in_namespace(tx) {
            TxValidity::NamespaceViolation
        } else {
            match policy.evaluate(tx) {
                TxValidity::Valid => {
                    let stale = tx.endorsements[0].body.read_set.entries().iter().any(|r| {
                        let current = overlay.get(r.key.as_str()).copied().or_else(|| versions.current_version(&r.key));
                        current != r.version
                    });
                    if stale {
                        TxValidity::ReadConflict
                    } else {
                        TxValidity::Valid
                    }
                }
                failure => failure,
            }
        };
        if flag.is_valid() {
            for w in tx.endorsements[0].body.write_set.entries() {
                overlay.insert(&w.key, Version::new(block_seq, idx as u32));
            }
        }
        flags.push(flag);
    }
    flags
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub seq: u64,
    pub block_hash: Digest,
    pub outcomes: Vec<TxValidity>,
    pub state_hash: Digest,
}

/// Applies the writesets of valid transactions in order. Invalid
/// transactions have no effect.
pub fn commit_block(store: &mut VersionedStore, block: &Block, flags: &[TxValidity]) -> CommitRecord {
    assert_eq!(flags.len(), block.transactions.len(), "one flag per transaction");
    for (idx, (tx, flag)) in block.transactions.iter().zip(flags).enumerate() {
        if !flag.is_valid() {
            continue;
        }
        for w in tx.endorsements[0].body.write_set.entries() {
            store.apply(&w.key, w.value.clone(), Version::new(block.seq, idx as u32));
        }
    }
    CommitRecord { seq: block.seq, block_hash: block.hash(), outcomes: flags.to_vec(), state_hash: store.state_hash() }
}

/// A peer's committed chain and world state.
#[derive(Debug, Clone)]
pub struct Ledger {
    config: ChainConfig,
    genesis_hash: Digest,
    store: VersionedStore,
    blocks: Vec<Block>,
    tx_ids: HashSet<Digest>,
}

impl Ledger {
    pub fn new(genesis: Block) -> Result<Self, LedgerError> {
        let config = genesis.genesis_config()?.clone();
        Ok(Self {
            config,
            genesis_hash: genesis.hash(),
            store: VersionedStore::new(),
            blocks: vec![genesis],
            tx_ids: HashSet::new(),
        })
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn genesis_hash(&self) -> Digest {
        self.genesis_hash
    }

    pub fn genesis(&self) -> &Block {
        &self.blocks[0]
    }

    pub fn height(&self) -> u64 {
        self.blocks.last().map(|b| b.seq).unwrap_or(0)
    }

    pub fn last_hash(&self) -> Digest {
        self.blocks.last().expect("genesis is always present").hash()
    }

    pub fn store(&self) -> &VersionedStore {
        &self.store
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, seq: u64) -> Option<&Block> {
        self.blocks.get(seq as usize)
    }

    pub fn is_committed(&self, id: &Digest) -> bool {
        self.tx_ids.contains(id)
    }

    pub fn validate_block(
        &self,
        block: &Block,
        policy: &dyn EndorsementPolicy,
    ) -> Result<Vec<TxValidity>, LedgerError> {
        check_block_header(block, &self.config.orderer_key, self.height(), &self.last_hash())?;
        Ok(validate_transactions(block.seq, &block.transactions, &self.store, &|id| self.is_committed(id), policy))
    }

    pub fn commit_block(&mut self, block: Block, flags: &[TxValidity]) -> CommitRecord {
        assert_eq!(block.seq, self.height() + 1, "commit must follow validation");
        let record = commit_block(&mut self.store, &block, flags);
        self.tx_ids.extend(block.transactions.iter().map(Transaction::id));
        self.blocks.push(block);
        record
    }
}
