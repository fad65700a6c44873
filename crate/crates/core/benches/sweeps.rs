//! Sequential against data-parallel execution for the three sweeps that fan
//! out: batched endorsement across peers, independent replicas of a seeded
//! scenario and the attack corpus.

use std::path::Path;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use enclave_ledger::adversary::{load_corpus, run_attack};
use enclave_ledger::auction::{op_bid, op_create};
use enclave_ledger::node::{Network, NetworkConfig};
use enclave_ledger::par::{self, ExecMode};
use enclave_ledger::scenario::{run_scenario, ScenarioConfig, Workload};

const MODES: [(ExecMode, &str); 2] = [(ExecMode::Sequential, "sequential"), (ExecMode::Parallel, "parallel")];

fn endorse_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("endorse_batch");
    group.sample_size(10);
    let config = NetworkConfig { peers: 3, endorsement_threshold: 3, ..NetworkConfig::default() };
    let mut net = Network::bootstrap(config.clone()).unwrap();
    net.execute("auctioneer", op_create("lot", "bench")).unwrap();
    net.cut_and_deliver().unwrap();
    let bidders: Vec<String> = config.clients.iter().filter(|c| *c != "auctioneer").cloned().collect();
    let requests: Vec<_> =
        (0..24).map(|i| (bidders[i % bidders.len()].clone(), op_bid("lot", i as u64 + 1), i % 3)).collect();
    for (mode, name) in MODES {
        group.bench_function(BenchmarkId::new(name, requests.len()), |b| {
            b.iter(|| {
                let out = net.invoke_many(&requests, mode);
                assert!(out.iter().all(Result::is_ok));
            })
        });
    }
    group.finish();
}

fn replicas(c: &mut Criterion) {
    let mut group = c.benchmark_group("replicas");
    group.sample_size(10);
    let base =
        ScenarioConfig { workload: Workload { transactions: 20, ..Workload::default() }, ..ScenarioConfig::default() };
    for (mode, name) in MODES {
        group.bench_function(BenchmarkId::new(name, 4), |b| {
            b.iter_batched(
                || (0..4u64).map(|seed| ScenarioConfig { seed, ..base.clone() }).collect::<Vec<_>>(),
                |configs| par::map(mode, configs, |c| run_scenario(&c).unwrap().height),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn attack_corpus(c: &mut Criterion) {
    let mut group = c.benchmark_group("attack_corpus");
    group.sample_size(10);
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus");
    let scripts: Vec<_> = load_corpus(&dir).unwrap().into_iter().map(|(_, s)| s).collect();
    let fixture = NetworkConfig::default();
    for (mode, name) in MODES {
        group.bench_function(BenchmarkId::new(name, scripts.len()), |b| {
            b.iter(|| {
                let runs = par::map(mode, scripts.iter().collect(), |s| run_attack(&fixture, s).unwrap().passed());
                assert!(runs.into_iter().all(|ok| ok));
            })
        });
    }
    group.finish();
}

criterion_group!(benches, endorse_batch, replicas, attack_corpus);
criterion_main!(benches);
