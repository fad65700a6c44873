//! Reference functionality for the auction: a pure state machine over typed
//! records, written without the shim, the ledger or any enclave. It is the
//! `F` the security oracle evaluates on committed prefixes.

use std::collections::{BTreeMap, BTreeSet};

use crate::auction::{AuctionError, AuctionOutcome, AuctionStatus};
use crate::chaincode_enclave::{ChaincodeResult, Operation};
use crate::codec;

/// A transaction as the functionality sees it: invoking client and operation.
pub type Probe = (String, Operation);

#[derive(Debug, Clone, PartialEq, Eq)]
struct ModelAuction {
    auctioneer: String,
    status: AuctionStatus,
    bids: BTreeMap<String, u64>,
}

/// State space of the auction functionality.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuctionWorld {
    auctions: BTreeMap<String, ModelAuction>,
}

fn acceptable_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c != '.' && c != '~' && c != '/')
}

impl AuctionWorld {
    pub fn genesis() -> Self {
        Self::default()
    }

    /// `F(s, t)`: the successor state and the output returned to the caller.
    /// Failed transactions leave the state unchanged.
    pub fn apply(&self, client: &str, op: &Operation) -> (AuctionWorld, ChaincodeResult) {
        let mut next = self.clone();
        match next.step(client, op) {
            Ok(out) => (next, Ok(out)),
            Err(e) => (self.clone(), Err(e.code())),
        }
    }

    pub fn output(&self, client: &str, op: &Operation) -> ChaincodeResult {
        self.apply(client, op).1
    }

    /// Committed bids of an auction, for tests.
    pub fn bids(&self, auction: &str) -> Option<&BTreeMap<String, u64>> {
        self.auctions.get(auction).map(|a| &a.bids)
    }

    fn step(&mut self, client: &str, op: &Operation) -> Result<Vec<u8>, AuctionError> {
        let name = || op.arg_str(0).filter(|n| acceptable_name(n)).ok_or(AuctionError::BadArguments);
        match op.function.as_str() {
            "create" => {
                let name = name()?;
                op.arg_str(1).ok_or(AuctionError::BadArguments)?;
                if self.auctions.contains_key(name) {
                    return Err(AuctionError::AlreadyExists);
                }
                let a = ModelAuction {
                    auctioneer: client.to_owned(),
                    status: AuctionStatus::Active,
                    bids: BTreeMap::new(),
                };
                self.auctions.insert(name.to_owned(), a);
                Ok(name.as_bytes().to_vec())
            }
            "bid" => {
                let name = name()?;
                let amount = op.arg_u64(1).ok_or(AuctionError::BadArguments)?;
                if !acceptable_name(client) {
                    return Err(AuctionError::BadArguments);
                }
                let a = self.auctions.get_mut(name).ok_or(AuctionError::NoSuchAuction)?;
                if a.status != AuctionStatus::Active {
                    return Err(AuctionError::Closed);
                }
                a.bids.insert(client.to_owned(), amount);
                Ok(Vec::new())
            }
            "close" => {
                let a = self.auctions.get_mut(name()?).ok_or(AuctionError::NoSuchAuction)?;
                if a.auctioneer != client {
                    return Err(AuctionError::NotAuctioneer);
                }
                if a.status != AuctionStatus::Active {
                    return Err(AuctionError::NotActive);
                }
                a.status = AuctionStatus::Closed;
                Ok(Vec::new())
            }
            "evaluate" => {
                let name = name()?;
                let a = self.auctions.get_mut(name).ok_or(AuctionError::NoSuchAuction)?;
                match a.status {
                    AuctionStatus::Active => return Err(AuctionError::BarrierAbsent),
                    AuctionStatus::Evaluated => return Err(AuctionError::AlreadyEvaluated),
                    AuctionStatus::Closed => {}
                }
                // Highest amount; among equal amounts the smallest client id.
                let winner =
                    a.bids.iter().max_by(|x, y| x.1.cmp(y.1).then_with(|| y.0.cmp(x.0))).map(|(c, v)| (c.clone(), *v));
                a.status = AuctionStatus::Evaluated;
                Ok(codec::encode(&AuctionOutcome { auction: name.to_owned(), winner }))
            }
            "noop" => Ok(Vec::new()),
            _ => Err(AuctionError::BadArguments),
        }
    }
}

/// States `s_0 .. s_m` reached by applying `txs` in order from genesis.
pub fn prefix_states(txs: &[Probe]) -> Vec<AuctionWorld> {
    let mut states = vec![AuctionWorld::genesis()];
    for (client, op) in txs {
        let next = states.last().expect("non-empty").apply(client, op).0;
        states.push(next);
    }
    states
}

/// `{ output(F(s_k, t*)) : k in 0..=m }` by brute force over every prefix.
pub fn allowed_set(txs: &[Probe], probe: &Probe) -> BTreeSet<ChaincodeResult> {
    prefix_states(txs).iter().map(|s| s.output(&probe.0, &probe.1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::{op_bid, op_close, op_create, op_evaluate, op_noop, AuctionChaincode};
    use crate::chaincode_enclave::execute_native;
    use crate::crypto::SigningKeyPair;
    use crate::ledger::{
        commit_block, Block, Endorsement, EndorsementBody, EndorserId, Transaction, TransactionProposal,
    };
    use crate::ledger::{ProposalPayload, TxValidity, VersionedStore};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn outcome(name: &str, winner: Option<(&str, u64)>) -> ChaincodeResult {
        Ok(codec::encode(&AuctionOutcome { auction: name.into(), winner: winner.map(|(c, v)| (c.into(), v)) }))
    }

    fn p(client: &str, op: Operation) -> Probe {
        (client.to_owned(), op)
    }

    #[test]
    fn empty_history_is_a_singleton() {
        let probe = p("mallory", op_evaluate("a1"));
        assert_eq!(allowed_set(&[], &probe), BTreeSet::from([Err("NoSuchAuction".to_owned())]));
    }

    #[test]
    fn winners_per_prefix() {
        let txs = vec![
            p("auctioneer", op_create("a1", "lot")),
            p("alice", op_bid("a1", 10)),
            p("bob", op_bid("a1", 25)),
            p("auctioneer", op_close("a1")),
        ];
        let states = prefix_states(&txs);
        let probe = p("mallory", op_evaluate("a1"));
        let per_prefix: Vec<_> = states.iter().map(|s| s.output(&probe.0, &probe.1)).collect();
        assert_eq!(per_prefix[2], Err("BarrierAbsent".into()));
        assert_eq!(per_prefix[4], outcome("a1", Some(("bob", 25))));
        // Closing right after alice's bid would have produced alice@10.
        let early = prefix_states(&[txs[0].clone(), txs[1].clone(), txs[3].clone()]);
        assert_eq!(early[3].output("mallory", &op_evaluate("a1")), outcome("a1", Some(("alice", 10))));
    }

    #[test]
    fn probe_of_untouched_state_is_constant() {
        let txs = vec![p("auctioneer", op_create("a1", "lot")), p("alice", op_bid("a1", 3))];
        let set = allowed_set(&txs, &p("mallory", op_evaluate("elsewhere")));
        assert_eq!(set.len(), 1);
    }

    /// Commits one native execution per block so the store follows the
    /// same sequential semantics as the model.
    fn native_run(txs: &[Probe]) -> Vec<ChaincodeResult> {
        let cc = AuctionChaincode::default();
        let key = SigningKeyPair::generate(&mut rand_chacha::ChaCha20Rng::seed_from_u64(1));
        let mut store = VersionedStore::new();
        let mut out = Vec::new();
        for (i, (client, op)) in txs.iter().enumerate() {
            let exec = execute_native(&cc, &store, client, op);
            out.push(exec.result.clone());
            let proposal = TransactionProposal {
                client_id: client.clone(),
                chaincode_id: "auction".into(),
                payload: ProposalPayload::Plain(codec::encode(&(i, op))),
                nonce: [0; 16],
            };
            let body = EndorsementBody {
                proposal_digest: proposal.digest(),
                chaincode_id: "auction".into(),
                read_set: exec.read_set,
                write_set: exec.write_set,
                result: Vec::new(),
            };
            let tx = Transaction {
                proposal,
                endorsements: vec![Endorsement::sign(body, EndorserId::Peer(key.public()), &key)],
            };
            let block = Block {
                seq: i as u64 + 1,
                prev_hash: crate::crypto::Digest([0; 32]),
                transactions: vec![tx],
                config: None,
                orderer_signature: None,
            };
            commit_block(&mut store, &block, &[TxValidity::Valid]);
        }
        out
    }

    fn op_strategy() -> impl Strategy<Value = Probe> {
        let clients = prop::sample::select(vec!["auctioneer", "alice", "bob", "carol", "x.y"]);
        let names = prop::sample::select(vec!["a1", "a2", "bad.name"]);
        (clients, names, 0u8..6, 0u64..40).prop_map(|(c, n, f, v)| {
            let op = match f {
                0 => op_create(n, "lot"),
                1 | 2 => op_bid(n, v),
                3 => op_close(n),
                4 => op_evaluate(n),
                _ => op_noop(),
            };
            (c.to_owned(), op)
        })
    }

    proptest! {
        /// Model fidelity: the pure model and the chaincode produce the same
        /// outputs on every sequential history.
        #[test]
        fn model_matches_chaincode(txs in prop::collection::vec(op_strategy(), 0..12)) {
            let states = prefix_states(&txs);
            let model: Vec<_> = txs.iter().zip(&states).map(|((c, op), s)| s.output(c, op)).collect();
            prop_assert_eq!(model, native_run(&txs));
        }
    }

    #[test]
    fn model_matches_chaincode_on_exhaustive_grid() {
        // Every sequence of length 4 over a small operation alphabet.
        let alphabet = vec![
            p("auctioneer", op_create("a1", "lot")),
            p("alice", op_bid("a1", 5)),
            p("bob", op_bid("a1", 5)),
            p("alice", op_close("a1")),
            p("auctioneer", op_close("a1")),
            p("carol", op_evaluate("a1")),
        ];
        let n = alphabet.len();
        for code in 0..n.pow(4) {
            let txs: Vec<Probe> = (0..4).map(|i| alphabet[(code / n.pow(i)) % n].clone()).collect();
            let states = prefix_states(&txs);
            let model: Vec<_> = txs.iter().zip(&states).map(|((c, op), s)| s.output(c, op)).collect();
            assert_eq!(model, native_run(&txs), "history {txs:?}");
        }
    }
}
