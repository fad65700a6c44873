//! Throughput and latency measurements of the enclave path against native
//! execution.
//!
//! Only call boundaries are timed. `get_state` and `meta_query` come from
//! the host's ocall handlers; the remaining breakdown categories (`decrypt_tx`,
//! `verify`, `sign`) are charged per call at a calibrated cost of the same
//! primitive, measured outside any enclave before the run.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{op_bid, op_close, op_create, op_evaluate, op_noop};
use crate::chaincode_enclave::Operation;
use crate::crypto::{hybrid_decrypt, hybrid_encrypt, verify, BoxKeyPair, SigningKeyPair};
use crate::node::{Network, NetworkConfig, OcallTimings, PeerError};
use crate::scenario::bidder_name;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    Enclave,
    Native,
}

impl PathMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PathMode::Enclave => "enclave",
            PathMode::Native => "native",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub seed: u64,
    pub peers: usize,
    pub block_size: usize,
    pub client_counts: Vec<usize>,
    /// Transactions in the noop and submit workloads.
    pub transactions: usize,
    /// Committed bids per auction in the evaluate workloads.
    pub evaluate_bids: Vec<usize>,
    /// Auctions evaluated per evaluate workload.
    pub evaluate_reps: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            peers: 3,
            block_size: 10,
            client_counts: vec![16],
            transactions: 1000,
            evaluate_bids: vec![10, 100],
            evaluate_reps: 5,
        }
    }
}

/// Microsecond statistics of one category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(samples: impl IntoIterator<Item = Duration>) -> Self {
        let us: Vec<f64> = samples.into_iter().map(|d| d.as_secs_f64() * 1e6).collect();
        if us.is_empty() {
            return Self::default();
        }
        let n = us.len() as f64;
        let mean = us.iter().sum::<f64>() / n;
        let var = us.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            sd: var.sqrt(),
            min: us.iter().copied().fold(f64::INFINITY, f64::min),
            max: us.iter().copied().fold(0.0, f64::max),
        }
    }
}

pub const CATEGORIES: [&str; 5] = ["decrypt_tx", "get_state", "meta_query", "verify", "sign"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub workload: String,
    pub mode: PathMode,
    pub clients: usize,
    pub transactions: usize,
    pub throughput_tps: f64,
    /// Response latency of one endorsement.
    pub latency: Stats,
    /// In [`CATEGORIES`] order.
    pub breakdown: [Stats; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Enclave noop throughput over native noop throughput, at the first
    /// client count.
    pub noop_overhead_ratio: f64,
    pub calibration: Calibration,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut header = vec!["workload", "mode", "clients", "transactions", "throughput_tps"].join(",");
        for c in std::iter::once("latency").chain(CATEGORIES) {
            for s in ["mean_us", "sd_us", "min_us", "max_us"] {
                header.push_str(&format!(",{c}_{s}"));
            }
        }
        let mut out = header + "\n";
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.3}",
                r.workload,
                r.mode.as_str(),
                r.clients,
                r.transactions,
                r.throughput_tps
            ));
            for s in std::iter::once(&r.latency).chain(&r.breakdown) {
                out.push_str(&format!(",{:.3},{:.3},{:.3},{:.3}", s.mean, s.sd, s.min, s.max));
            }
            out.push('\n');
        }
        out
    }
}

/// Lower-bound cost of the primitives charged per call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub decrypt: Duration,
    pub verify: Duration,
    pub sign: Duration,
}

fn fastest(rounds: usize, mut f: impl FnMut()) -> Duration {
    (0..rounds)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .min()
        .unwrap_or_default()
}

impl Calibration {
    pub fn measure(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let boxed = BoxKeyPair::generate(&mut rng);
        let envelope = hybrid_encrypt(&boxed.public(), &[7u8; 96], &mut rng);
        let key = SigningKeyPair::generate(&mut rng);
        let message = [3u8; 256];
        let signature = key.sign(&message);
        let public = key.public();
        Self {
            decrypt: fastest(32, || {
                std::hint::black_box(hybrid_decrypt(&boxed, &envelope).ok());
            }),
            verify: fastest(32, || {
                std::hint::black_box(verify(&public, &message, &signature));
            }),
            sign: fastest(32, || {
                std::hint::black_box(key.sign(&message));
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Sample {
    total: Duration,
    parts: [Duration; 5],
}

fn delta(after: &OcallTimings, before: &OcallTimings) -> OcallTimings {
    OcallTimings {
        get_state: after.get_state - before.get_state,
        meta_query: after.meta_query - before.meta_query,
        get_state_calls: after.get_state_calls - before.get_state_calls,
        meta_calls: after.meta_calls - before.meta_calls,
    }
}

struct Bench {
    net: Network,
    mode: PathMode,
    calibration: Calibration,
    clients: Vec<String>,
}

impl Bench {
    fn new(spec: &BenchSpec, mode: PathMode, clients: usize, calibration: Calibration) -> Result<Self, PeerError> {
        let names: Vec<String> = (0..clients.max(1)).map(bidder_name).collect();
        let mut roster = vec!["auctioneer".to_owned()];
        roster.extend(names.iter().cloned());
        let config = NetworkConfig {
            seed: spec.seed,
            peers: spec.peers,
            clients: roster,
            block_size: spec.block_size,
            native_auction: mode == PathMode::Native,
            ..NetworkConfig::default()
        };
        Ok(Self { net: Network::bootstrap(config)?, mode, calibration, clients: names })
    }

    /// Proposes, endorses and submits one transaction, timing the
    /// endorsement.
    fn run_one(&mut self, client: &str, op: Operation, start: usize) -> Result<Sample, PeerError> {
        let endorsers = self.net.endorsers(start);
        let proposal = self.net.propose(client, crate::auction::AUCTION_CHAINCODE, op, &endorsers)?;
        let before: Vec<OcallTimings> = endorsers.iter().map(|&i| self.net.peers[i].timings).collect();
        let t = Instant::now();
        let endorsements = self.net.endorse(&proposal, &endorsers)?;
        let total = t.elapsed() / endorsers.len() as u32;
        let n = endorsers.len() as u32;
        let mut d = OcallTimings::default();
        for (&i, b) in endorsers.iter().zip(&before) {
            let x = delta(&self.net.peers[i].timings, b);
            d.get_state += x.get_state;
            d.meta_query += x.meta_query;
            d.meta_calls += x.meta_calls;
        }
        let c = self.calibration;
        let parts = match self.mode {
            PathMode::Enclave => {
                [c.decrypt, d.get_state / n, d.meta_query / n, c.verify * (d.meta_calls as u32 / n), c.sign]
            }
            PathMode::Native => [Duration::ZERO, Duration::ZERO, Duration::ZERO, Duration::ZERO, c.sign],
        };
        self.net.submit(crate::ledger::Transaction { proposal, endorsements });
        Ok(Sample { total, parts })
    }

    fn batch(&mut self, txs: Vec<(String, Operation)>) -> Result<(Vec<Sample>, Duration), PeerError> {
        let peers = self.net.peers.len();
        let t = Instant::now();
        let mut samples = Vec::with_capacity(txs.len());
        for (i, (client, op)) in txs.into_iter().enumerate() {
            samples.push(self.run_one(&client, op, i % peers)?);
        }
        self.net.cut_and_deliver()?;
        Ok((samples, t.elapsed()))
    }

    fn row(&self, workload: String, samples: &[Sample], elapsed: Duration) -> BenchRow {
        let breakdown = std::array::from_fn(|k| Stats::of(samples.iter().map(|s| s.parts[k])));
        BenchRow {
            workload,
            mode: self.mode,
            clients: self.clients.len(),
            transactions: samples.len(),
            throughput_tps: samples.len() as f64 / elapsed.as_secs_f64().max(1e-9),
            latency: Stats::of(samples.iter().map(|s| s.total)),
            breakdown,
        }
    }

    fn client(&self, i: usize) -> String {
        self.clients[i % self.clients.len()].clone()
    }

    fn noop(&mut self, n: usize) -> Result<BenchRow, PeerError> {
        let txs = (0..n).map(|i| (self.client(i), op_noop())).collect();
        let (s, e) = self.batch(txs)?;
        Ok(self.row("noop".into(), &s, e))
    }

    fn submit(&mut self, n: usize) -> Result<BenchRow, PeerError> {
        self.batch(vec![("auctioneer".into(), op_create("bench-submit", "lot"))])?;
        let txs = (0..n).map(|i| (self.client(i), op_bid("bench-submit", 1 + (i as u64 * 7919) % 1000))).collect();
        let (s, e) = self.batch(txs)?;
        Ok(self.row("submit".into(), &s, e))
    }

    fn evaluate(&mut self, bids: usize, reps: usize) -> Result<BenchRow, PeerError> {
        let names: Vec<String> = (0..reps).map(|r| format!("bench-eval-{bids}-{r}")).collect();
        self.batch(names.iter().map(|a| ("auctioneer".to_owned(), op_create(a, "lot"))).collect())?;
        for a in &names {
            let txs = (0..bids).map(|i| (self.client(i), op_bid(a, 1 + (i as u64 * 104_729) % 10_000))).collect();
            self.batch(txs)?;
        }
        self.batch(names.iter().map(|a| ("auctioneer".to_owned(), op_close(a))).collect())?;
        let (s, e) = self.batch(names.iter().map(|a| ("auctioneer".to_owned(), op_evaluate(a))).collect())?;
        Ok(self.row(format!("evaluate-{bids}"), &s, e))
    }
}

/// One row per (workload, mode, client count).
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport, PeerError> {
    let calibration = Calibration::measure(spec.seed);
    let mut rows = Vec::new();
    for &clients in &spec.client_counts {
        for mode in [PathMode::Enclave, PathMode::Native] {
            let mut b = Bench::new(spec, mode, clients, calibration)?;
            rows.push(b.noop(spec.transactions)?);
            rows.push(b.submit(spec.transactions)?);
            for &bids in &spec.evaluate_bids {
                rows.push(b.evaluate(bids, spec.evaluate_reps.max(1))?);
            }
        }
    }
    let tps = |mode| rows.iter().find(|r: &&BenchRow| r.workload == "noop" && r.mode == mode).map(|r| r.throughput_tps);
    let noop_overhead_ratio = match (tps(PathMode::Enclave), tps(PathMode::Native)) {
        (Some(e), Some(n)) if n > 0.0 => e / n,
        _ => f64::NAN,
    };
    Ok(BenchReport { rows, noop_overhead_ratio, calibration })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchSpec {
        BenchSpec {
            client_counts: vec![2, 4],
            transactions: 12,
            evaluate_bids: vec![3],
            evaluate_reps: 2,
            ..BenchSpec::default()
        }
    }

    #[test]
    fn one_row_per_workload_mode_and_client_count() {
        let report = run_bench(&tiny()).unwrap();
        assert_eq!(report.rows.len(), 2 * 2 * 3);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        let width = lines[0].split(',').count();
        assert_eq!(width, 5 + 6 * 4);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == width));
        assert!(report.noop_overhead_ratio.is_finite() && report.noop_overhead_ratio > 0.0);
    }

    #[test]
    fn breakdown_fits_inside_the_response_latency() {
        let report = run_bench(&tiny()).unwrap();
        for r in &report.rows {
            let parts: f64 = r.breakdown.iter().map(|s| s.mean).sum();
            assert!(parts <= r.latency.mean, "{} {:?}: {parts} > {}", r.workload, r.mode, r.latency.mean);
        }
    }

    #[test]
    fn evaluate_charges_meta_queries() {
        let report = run_bench(&tiny()).unwrap();
        let eval = report.rows.iter().find(|r| r.workload == "evaluate-3" && r.mode == PathMode::Enclave).unwrap();
        assert!(eval.breakdown[2].mean > 0.0 && eval.breakdown[3].mean > 0.0);
    }

    #[test]
    fn stats_of_known_samples() {
        let s = Stats::of([2, 4, 4, 4, 5, 5, 7, 9].map(Duration::from_micros));
        assert!((s.mean - 5.0).abs() < 1e-9 && (s.sd - 2.0).abs() < 1e-9);
        assert_eq!((s.min, s.max), (2.0, 9.0));
    }
}
