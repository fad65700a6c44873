//! Attack scripts: JSON documents describing an honest background schedule
//! interleaved with adversarial actions at peer 0. The format is documented
//! in `docs/attack-schema.md`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::AdversaryError;
use crate::codec;

/// An operation argument: a string or an unsigned integer (encoded as the
/// canonical u64).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Arg {
    Num(u64),
    Text(String),
}

impl Arg {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Arg::Num(n) => codec::encode(n),
            Arg::Text(s) => s.as_bytes().to_vec(),
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    /// An honest client invokes the auction chaincode, endorsed starting at
    /// `peer`. Peer 0 is the adversary's.
    Invoke {
        client: String,
        function: String,
        #[serde(default)]
        args: Vec<Arg>,
        #[serde(default)]
        peer: usize,
        #[serde(default = "yes")]
        submit: bool,
    },
    /// The orderer cuts every pending transaction and delivers the blocks.
    Cut,
    /// The admin provisions the state key to every registered enclave.
    Provision,
    Attack {
        action: AttackAction,
    },
}

/// Where a substituted value comes from. Only artifacts the host already
/// holds can be named.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "from", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValueSource {
    /// Arbitrary bytes, hex encoded.
    Literal { hex: String },
    /// The value a captured endorsement writes for the key.
    Endorsement { index: usize },
    /// The value the key had in a stored ledger-enclave snapshot view.
    Snapshot { seq: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMutation {
    #[default]
    None,
    /// Flip a byte in the first written value.
    TamperWrite,
    /// Remove the last transaction.
    DropTransaction,
    /// Re-sign the block with the peer's own key.
    ForgedSignature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnclaveTarget {
    #[default]
    Genuine,
    /// The enclave set up by a `rogue_measurement` splice.
    Rogue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpliceVariant {
    /// Quote of one enclave presented with another enclave's key.
    ReportDataSwap,
    /// Enclave running different chaincode code.
    RogueMeasurement,
    /// Enclaves on platforms the attestation service does not vouch for.
    UncertifiedPlatform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackAction {
    /// Stop feeding delivered blocks to the ledger enclave.
    PauseFeed,
    /// Feed every held-back block, in delivery order.
    ResumeFeed,
    /// Feed every committed block the ledger enclave has not reached, the
    /// way an honest host recovers.
    CatchUp,
    /// Feed one committed block, optionally mutated.
    FeedBlock {
        seq: u64,
        #[serde(default)]
        mutation: BlockMutation,
    },
    /// Feed committed blocks in the given order.
    ReorderDelivery {
        order: Vec<u64>,
    },
    /// Withhold the response of the `index`-th endorsement produced at
    /// peer 0 from its client.
    DropMessage {
        index: usize,
    },
    /// Run a captured proposal again at peer 0.
    ReplayProposal {
        index: usize,
        #[serde(default)]
        submit: bool,
    },
    /// Restart the ledger enclave from a stored snapshot, chosen by block
    /// sequence number or by position (taken modulo the number stored).
    RollbackLedgerEnclave {
        #[serde(default)]
        seq: Option<u64>,
        #[serde(default)]
        index: Option<usize>,
    },
    RestartChaincodeEnclave,
    /// Answer `get_state` for a key (local to the auction namespace) from
    /// `source` until cleared.
    SubstituteStateValue {
        key: String,
        source: ValueSource,
    },
    /// Add an entry to every range answer covering `key`.
    InjectRangeEntry {
        key: String,
        source: ValueSource,
    },
    /// Answer metadata queries with a captured response until cleared.
    ReplayMetaResponse {
        index: usize,
    },
    ClearTampering,
    /// The colluding client runs an operation at peer 0.
    ColludeInvoke {
        function: String,
        #[serde(default)]
        args: Vec<Arg>,
        #[serde(default)]
        target: EnclaveTarget,
        #[serde(default)]
        submit: bool,
    },
    /// Roll back to every stored snapshot in turn and probe each.
    ProbeAllPrefixes {
        function: String,
        #[serde(default)]
        args: Vec<Arg>,
    },
    SpliceAttestation {
        variant: SpliceVariant,
    },
    /// Bind a fresh chaincode enclave to a ledger enclave on another platform.
    CrossPlatformBind,
    /// Re-sign a captured endorsement with an unregistered key and submit it.
    UnregisteredEndorse {
        index: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackScript {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub block_size: Option<usize>,
    pub steps: Vec<Step>,
    /// Signal kinds that must appear in the observation log.
    #[serde(default)]
    pub expect: Vec<String>,
}

impl AttackScript {
    pub fn from_json(text: &str) -> Result<Self, AdversaryError> {
        serde_json::from_str(text).map_err(|e| AdversaryError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, AdversaryError> {
        let text = std::fs::read_to_string(path).map_err(|e| AdversaryError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scripts serialize")
    }
}

/// Every `*.json` script in `dir`, sorted by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<(PathBuf, AttackScript)>, AdversaryError> {
    let entries = std::fs::read_dir(dir).map_err(|e| AdversaryError::Io(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.into_iter().map(|p| AttackScript::load(&p).map(|s| (p, s))).collect()
}

/// A seeded mix of honest traffic and resets, probes and restarts. Every
/// reference it makes resolves, so the harness never rejects it.
pub fn random_script(seed: u64, len: usize) -> AttackScript {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let bidders = ["alice", "bob", "carol", "dave"];
    let mut steps = vec![
        Step::Invoke {
            client: "auctioneer".into(),
            function: "create".into(),
            args: vec![Arg::Text("a1".into()), Arg::Text("lot".into())],
            peer: 0,
            submit: true,
        },
        Step::Cut,
    ];
    let a1 = || Arg::Text("a1".into());
    for _ in 0..len {
        let step = match rng.gen_range(0..12) {
            0..=3 => Step::Invoke {
                client: bidders[rng.gen_range(0..bidders.len())].into(),
                function: "bid".into(),
                args: vec![a1(), Arg::Num(rng.gen_range(1..100))],
                peer: rng.gen_range(0..3),
                submit: true,
            },
            4 => Step::Invoke {
                client: "auctioneer".into(),
                function: if rng.gen_bool(0.5) { "close" } else { "evaluate" }.into(),
                args: vec![a1()],
                peer: rng.gen_range(0..3),
                submit: true,
            },
            5 | 6 => Step::Cut,
            7 => Step::Attack { action: AttackAction::RollbackLedgerEnclave { seq: None, index: Some(rng.gen()) } },
            8 => Step::Attack {
                action: if rng.gen_bool(0.5) { AttackAction::PauseFeed } else { AttackAction::ResumeFeed },
            },
            9 => Step::Attack { action: AttackAction::CatchUp },
            10 => Step::Attack { action: AttackAction::RestartChaincodeEnclave },
            _ => Step::Attack {
                action: AttackAction::ColludeInvoke {
                    function: if rng.gen_bool(0.7) { "evaluate" } else { "bid" }.into(),
                    args: if rng.gen_bool(0.7) { vec![a1()] } else { vec![a1(), Arg::Num(rng.gen_range(1..100))] },
                    target: EnclaveTarget::Genuine,
                    submit: rng.gen_bool(0.3),
                },
            },
        };
        steps.push(step);
    }
    steps.push(Step::Cut);
    steps.push(Step::Attack {
        action: AttackAction::ProbeAllPrefixes { function: "evaluate".into(), args: vec![a1()] },
    });
    AttackScript {
        name: format!("random-{seed}"),
        seed,
        description: "generated".into(),
        block_size: Some(rng.gen_range(1..4)),
        steps,
        expect: Vec::new(),
    }
}
