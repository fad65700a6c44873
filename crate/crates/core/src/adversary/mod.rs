//! Malicious-peer harness and the reset-aware security oracle.
//!
//! Peer 0 of a [`Network`](crate::node::Network) is run by the adversary:
//! its host feeds its ledger enclave whatever it likes, answers its
//! chaincode enclave's state ocalls, keeps every blob and message it ever
//! saw, and colludes with the client `mallory`. Everything the adversary
//! learns is recorded in an [`ObservationLog`]; [`check_security_up_to_resets`]
//! then checks every chaincode output in it against what evaluating an
//! arbitrary transaction on some committed prefix could have produced.

mod harness;
mod leaky;
mod model;
mod script;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaincode_enclave::{ChaincodeResult, Operation};
use crate::crypto::Digest;
use crate::ledger::TxValidity;
use crate::node::PeerError;

pub use harness::{run_attack, AttackRun, COLLUDER};
pub use leaky::{LeakyAuction, LEAKY_VERSION};
pub use model::{allowed_set, prefix_states, AuctionWorld, Probe};
pub use script::{
    load_corpus, random_script, Arg, AttackAction, AttackScript, BlockMutation, EnclaveTarget, SpliceVariant, Step,
    ValueSource,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdversaryError {
    #[error("script references a nonexistent artifact: {0}")]
    ScriptReference(String),
    #[error("script parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("fixture: {0}")]
    Fixture(#[from] PeerError),
    #[error("{0}")]
    Io(String),
}

/// One thing the adversary learned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Observation {
    /// Bytes an enclave or the network handed to the adversary's host.
    Response { step: usize, call: String, enclave: String, prefix_seq: Option<u64>, len: usize, digest: Digest },
    /// A chaincode result readable with keys the adversary holds.
    ChaincodeOutput {
        step: usize,
        source: String,
        client: String,
        /// Plaintext operation, from the harness's ground truth.
        operation: Option<Operation>,
        prefix_seq: Option<u64>,
        result: ChaincodeResult,
    },
    /// A call that failed; the failure itself is a signal.
    Rejection { step: usize, call: String, kind: String, detail: String },
    /// Validation outcome of a committed transaction.
    TxOutcome { step: usize, seq: u64, index: usize, tx_id: Digest, validity: TxValidity },
}

impl Observation {
    /// Signal names this observation contributes, matched against a
    /// script's `expect` list.
    pub fn kinds(&self) -> Vec<String> {
        match self {
            Observation::Rejection { kind, .. } => vec![kind.clone()],
            Observation::TxOutcome { validity, .. } if !validity.is_valid() => vec![format!("{validity:?}")],
            Observation::ChaincodeOutput { result: Err(code), .. } => vec![code.clone()],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationLog {
    pub entries: Vec<Observation>,
}

impl ObservationLog {
    pub fn push(&mut self, o: Observation) {
        self.entries.push(o);
    }

    pub fn kinds(&self) -> BTreeSet<String> {
        self.entries.iter().flat_map(Observation::kinds).collect()
    }

    pub fn outputs(&self) -> impl Iterator<Item = &Observation> {
        self.entries.iter().filter(|o| matches!(o, Observation::ChaincodeOutput { .. }))
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("observations serialize"));
            out.push('\n');
        }
        out
    }
}

/// Allowed outputs for any probe, given the committed transaction sequence.
/// `None` entries are committed transactions whose plaintext is unknown;
/// their presence makes every check fail.
pub struct AllowedOutputs {
    states: Vec<AuctionWorld>,
    unknown: usize,
    cache: Mutex<BTreeMap<Probe, BTreeSet<ChaincodeResult>>>,
}

impl AllowedOutputs {
    pub fn from_committed(committed: &[Option<Probe>]) -> Self {
        let known: Vec<Probe> = committed.iter().flatten().cloned().collect();
        Self {
            states: prefix_states(&known),
            unknown: committed.len() - known.len(),
            cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn prefixes(&self) -> usize {
        self.states.len()
    }

    pub fn allowed(&self, client: &str, op: &Operation) -> BTreeSet<ChaincodeResult> {
        let probe = (client.to_owned(), op.clone());
        let mut cache = self.cache.lock().expect("cache lock");
        cache.entry(probe).or_insert_with(|| self.states.iter().map(|s| s.output(client, op)).collect()).clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub index: usize,
    pub observation: Observation,
    pub allowed: Vec<ChaincodeResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityVerdict {
    pub pass: bool,
    pub outputs_checked: usize,
    pub violation: Option<Violation>,
    pub note: Option<String>,
}

/// Passes iff every chaincode output in `log` equals `F(s_k, t*)` for its
/// probe `t*` and some committed prefix state `s_k`. Reports the first
/// output that does not.
pub fn check_security_up_to_resets(log: &ObservationLog, allowed: &AllowedOutputs) -> SecurityVerdict {
    if allowed.unknown > 0 {
        return SecurityVerdict {
            pass: false,
            outputs_checked: 0,
            violation: None,
            note: Some(format!("{} committed transactions have no known plaintext", allowed.unknown)),
        };
    }
    let mut checked = 0;
    for (index, o) in log.entries.iter().enumerate() {
        let Observation::ChaincodeOutput { client, operation, result, .. } = o else {
            continue;
        };
        checked += 1;
        let set = match operation {
            Some(op) => allowed.allowed(client, op),
            None => BTreeSet::new(),
        };
        if !set.contains(result) {
            return SecurityVerdict {
                pass: false,
                outputs_checked: checked,
                violation: Some(Violation { index, observation: o.clone(), allowed: set.into_iter().collect() }),
                note: None,
            };
        }
    }
    SecurityVerdict { pass: true, outputs_checked: checked, violation: None, note: None }
}
