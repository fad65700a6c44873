//! Scenario files and the run reports built from them.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{run_attack, AttackScript, SecurityVerdict};
use crate::auction::{op_bid, op_close, op_create, op_evaluate, op_noop, AuctionOutcome};
use crate::chaincode_enclave::{ChaincodeResult, Operation};
use crate::codec;
use crate::crypto::Digest;
use crate::ledger::{EncryptionMode, TxValidity};
use crate::node::{Network, NetworkConfig, PeerError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
    #[error("network: {0}")]
    Network(#[from] PeerError),
    #[error("attack script: {0}")]
    Attack(#[from] crate::adversary::AdversaryError),
}

/// Relative weights of the generated transaction kinds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TxMix {
    pub bid: u32,
    pub noop: u32,
}

impl Default for TxMix {
    fn default() -> Self {
        Self { bid: 4, noop: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workload {
    /// Bidding clients besides the auctioneer.
    pub clients: usize,
    pub auctions: usize,
    /// Transactions generated between opening and closing the auctions.
    pub transactions: usize,
    pub mix: TxMix,
    pub max_bid: u64,
}

impl Default for Workload {
    fn default() -> Self {
        Self { clients: 4, auctions: 2, transactions: 40, mix: TxMix::default(), max_bid: 1000 }
    }
}

/// Everything that determines a run, together with the code version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub peers: usize,
    pub block_size: usize,
    pub snapshot_interval: u64,
    pub endorsement_threshold: u32,
    pub encryption: EncryptionMode,
    pub workload: Workload,
    /// Attack script to run instead of the generated workload. Relative
    /// paths resolve against the scenario file.
    pub attack: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let n = NetworkConfig::default();
        Self {
            seed: n.seed,
            peers: n.peers,
            block_size: n.block_size,
            snapshot_interval: n.snapshot_interval,
            endorsement_threshold: n.endorsement_threshold,
            encryption: n.encryption,
            workload: Workload::default(),
            attack: None,
        }
    }
}

pub fn bidder_name(i: usize) -> String {
    format!("bidder{i:02}")
}

impl ScenarioConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_owned(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text, &path.display().to_string())?;
        if let (Some(a), Some(dir)) = (&config.attack, path.parent()) {
            if a.is_relative() {
                config.attack = Some(dir.join(a));
            }
        }
        Ok(config)
    }

    pub fn network(&self) -> Result<NetworkConfig, ConfigError> {
        if self.peers == 0 || self.block_size == 0 {
            return Err(ConfigError::Invalid("peers and block_size must be positive".into()));
        }
        // The default roster is what attack scripts refer to.
        let mut clients = NetworkConfig::default().clients;
        clients.extend((0..self.workload.clients).map(bidder_name));
        Ok(NetworkConfig {
            seed: self.seed,
            peers: self.peers,
            clients,
            block_size: self.block_size,
            snapshot_interval: self.snapshot_interval,
            endorsement_threshold: self.endorsement_threshold,
            encryption: self.encryption,
            ..NetworkConfig::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxRecord {
    pub seq: u64,
    pub index: usize,
    pub tx_id: Digest,
    pub client: Option<String>,
    pub function: Option<String>,
    pub validity: TxValidity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub script: String,
    pub expectations_met: bool,
    pub verdict: SecurityVerdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub height: u64,
    /// Per peer.
    pub state_hashes: Vec<Digest>,
    pub transactions: Vec<TxRecord>,
    pub attack: Option<AttackSummary>,
}

impl RunReport {
    fn from_network(seed: u64, net: &Network, attack: Option<AttackSummary>) -> Self {
        let mut transactions = Vec::new();
        for r in &net.reports {
            for (index, (id, validity)) in r.tx_ids.iter().zip(&r.outcomes).enumerate() {
                let truth = net.ground_truth.get(id);
                transactions.push(TxRecord {
                    seq: r.seq,
                    index,
                    tx_id: *id,
                    client: truth.map(|t| t.0.clone()),
                    function: truth.map(|t| t.1.function.clone()),
                    validity: *validity,
                });
            }
        }
        Self {
            seed,
            height: net.peers[0].ledger().height(),
            state_hashes: net.peers.iter().map(|p| p.ledger().store().state_hash()).collect(),
            transactions,
            attack,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Generated transactions: every auction is created, the mix runs, then
/// every auction is closed and evaluated.
pub fn generate_workload(w: &Workload, seed: u64) -> Vec<Vec<(String, Operation)>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    let auctions: Vec<String> = (0..w.auctions.max(1)).map(|i| format!("auction{i}")).collect();
    let auctioneer = || "auctioneer".to_owned();
    let mut phases = vec![auctions.iter().map(|a| (auctioneer(), op_create(a, "lot"))).collect::<Vec<_>>()];
    let total = (w.mix.bid + w.mix.noop).max(1);
    let mut middle = Vec::with_capacity(w.transactions);
    for _ in 0..w.transactions {
        let client = if w.clients == 0 { auctioneer() } else { bidder_name(rng.gen_range(0..w.clients)) };
        let op = if rng.gen_range(0..total) < w.mix.bid {
            op_bid(&auctions[rng.gen_range(0..auctions.len())], rng.gen_range(1..=w.max_bid.max(1)))
        } else {
            op_noop()
        };
        middle.push((client, op));
    }
    phases.push(middle);
    phases.push(auctions.iter().map(|a| (auctioneer(), op_close(a))).collect());
    phases.push(auctions.iter().map(|a| (auctioneer(), op_evaluate(a))).collect());
    phases
}

/// Runs a scenario: its attack script if it names one, otherwise the
/// generated workload.
pub fn run_scenario(config: &ScenarioConfig) -> Result<RunReport, ConfigError> {
    let fixture = config.network()?;
    if let Some(path) = &config.attack {
        let script = AttackScript::load(path)?;
        let run = run_attack(&fixture, &script)?;
        let summary = AttackSummary {
            script: run.script.clone(),
            expectations_met: run.expectations_met(),
            verdict: run.verdict.clone(),
        };
        return Ok(RunReport::from_network(script.seed, &run.network, Some(summary)));
    }
    let mut net = Network::bootstrap(fixture)?;
    let peers = net.peers.len();
    for (p, phase) in generate_workload(&config.workload, config.seed).into_iter().enumerate() {
        for (i, (client, op)) in phase.into_iter().enumerate() {
            // Application errors are endorsed like any result; only
            // infrastructure failures abort.
            let inv = net.invoke_at(&client, op, (p + i) % peers)?;
            net.submit(inv.transaction);
        }
        net.cut_and_deliver()?;
    }
    Ok(RunReport::from_network(config.seed, &net, None))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTx {
    pub client: String,
    pub function: String,
    pub tx_id: Digest,
    pub validity: Option<TxValidity>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuctionTranscript {
    pub create: PhaseTx,
    pub bids: Vec<PhaseTx>,
    pub close: PhaseTx,
    pub evaluate: PhaseTx,
    pub outcome: Option<AuctionOutcome>,
    /// Application error of the evaluation, if it failed.
    pub error: Option<String>,
}

/// create, one bid per amount (from `bidder00`, `bidder01`, ...), close and
/// evaluate, each phase committed before the next.
pub fn run_auction(base: &NetworkConfig, amounts: &[u64]) -> Result<AuctionTranscript, ConfigError> {
    let mut config = base.clone();
    config.clients = vec!["auctioneer".to_owned()];
    config.clients.extend((0..amounts.len()).map(bidder_name));
    let mut net = Network::bootstrap(config)?;
    let phase = |net: &mut Network,
                 txs: Vec<(String, Operation)>|
     -> Result<Vec<(PhaseTx, Option<ChaincodeResult>)>, ConfigError> {
        let mut out = Vec::new();
        for (client, op) in txs {
            let function = op.function.clone();
            let inv = net.invoke(&client, op)?;
            let tx_id = inv.transaction.id();
            net.submit(inv.transaction);
            out.push((PhaseTx { client, function, tx_id, validity: None }, inv.result));
        }
        net.cut_and_deliver()?;
        for (tx, _) in &mut out {
            tx.validity = net.outcome_of(&tx.tx_id);
        }
        Ok(out)
    };
    let auctioneer = "auctioneer".to_owned();
    let create = phase(&mut net, vec![(auctioneer.clone(), op_create("demo", "lot"))])?.remove(0).0;
    let bids =
        phase(&mut net, amounts.iter().enumerate().map(|(i, v)| (bidder_name(i), op_bid("demo", *v))).collect())?;
    let close = phase(&mut net, vec![(auctioneer.clone(), op_close("demo"))])?.remove(0).0;
    let (evaluate, result) = phase(&mut net, vec![(auctioneer, op_evaluate("demo"))])?.remove(0);
    let (outcome, error) = match result {
        Some(Ok(bytes)) => (codec::decode(&bytes).ok(), None),
        Some(Err(code)) => (None, Some(code)),
        None => (None, Some("unreadable result".into())),
    };
    Ok(AuctionTranscript { create, bids: bids.into_iter().map(|b| b.0).collect(), close, evaluate, outcome, error })
}

/// Reads `--bids` input such as `10,25,7`.
pub fn parse_bids(spec: &str) -> Result<Vec<u64>, ConfigError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| ConfigError::Invalid(format!("bad bid amount `{s}`"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig { workload: Workload { transactions: 12, ..Workload::default() }, ..ScenarioConfig::default() }
    }

    #[test]
    fn same_seed_same_report() {
        let a = run_scenario(&small()).unwrap();
        let b = run_scenario(&small()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert!(a.state_hashes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn malformed_scenario_reports_the_line() {
        let text = "{\n  \"seed\": 1,\n  \"peers\": \"three\"\n}";
        match ScenarioConfig::parse(text, "bad.json") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(ScenarioConfig::parse("{\"sede\": 1}", "typo.json").is_err());
    }

    #[test]
    fn attack_scenario_carries_a_verdict() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus");
        let config = ScenarioConfig { attack: Some(dir.join("02-sequence-gap.json")), ..ScenarioConfig::default() };
        let report = run_scenario(&config).unwrap();
        let attack = report.attack.unwrap();
        assert!(attack.verdict.pass && attack.expectations_met);
    }

    #[test]
    fn auction_demo_picks_the_highest_bid() {
        let t = run_auction(&NetworkConfig::default(), &[10, 25, 7]).unwrap();
        assert_eq!(t.outcome.unwrap().winner, Some((bidder_name(1), 25)));
        assert!(t.bids.iter().all(|b| b.validity == Some(TxValidity::Valid)));
    }

    #[test]
    fn auction_without_bids_has_no_winner() {
        let t = run_auction(&NetworkConfig::default(), &[]).unwrap();
        assert_eq!(t.outcome.unwrap().winner, None);
    }

    #[test]
    fn bid_lists_parse() {
        assert_eq!(parse_bids("10, 25,7").unwrap(), vec![10, 25, 7]);
        assert!(parse_bids("10,x").is_err());
    }
}
