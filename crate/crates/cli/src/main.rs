use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use enclave_ledger::adversary::{load_corpus, run_attack, AttackScript};
use enclave_ledger::bench::{run_bench, BenchSpec};
use enclave_ledger::node::NetworkConfig;
use enclave_ledger::scenario::{parse_bids, run_auction, run_scenario, AttackSummary, ScenarioConfig};
use enclave_ledger::Weakenings;

/// Simulated enclave-protected chaincode on a permissioned ledger.
///
/// Without a subcommand the flags pick the mode: `--bench` benchmarks,
/// `--attack` runs attack scripts, anything else runs a scenario.
#[derive(Parser)]
#[command(name = "teecc", version)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// Scenario file (JSON).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Overrides the seed of the scenario or attack scripts.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Attack script, or a directory of scripts.
    #[arg(long, global = true)]
    attack: Option<PathBuf>,
    #[arg(long)]
    bench: bool,
    /// Number of clients.
    #[arg(long, global = true)]
    clients: Option<usize>,
    /// Transactions per block [default: 10]
    #[arg(long, global = true)]
    block_size: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write report.json.
    Run,
    /// create, bid, close and evaluate one auction through the full pipeline.
    Auction {
        /// Comma-separated bid amounts, one bidder each.
        #[arg(long, default_value = "10,25,7")]
        bids: String,
    },
    /// Enclave path against native execution; writes bench.csv.
    Bench {
        #[arg(long, default_value_t = 1000)]
        transactions: usize,
        /// Comma-separated bid counts for the evaluate workloads.
        #[arg(long, default_value = "10,100")]
        evaluate_bids: String,
    },
    /// Run attack scripts against a fixture, optionally weakened.
    Attack {
        #[arg(long, value_enum)]
        weaken: Vec<Weakening>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Weakening {
    MetaSignature,
    Sequence,
    Attestation,
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn cmd_run(cli: &Cli) -> Result<bool> {
    let mut config = match &cli.scenario {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(b) = cli.block_size {
        config.block_size = b;
    }
    if let Some(c) = cli.clients {
        config.workload.clients = c;
    }
    if cli.attack.is_some() {
        config.attack = cli.attack.clone();
    }
    let report = run_scenario(&config)?;
    let path = write(&cli.out, "report.json", &report.to_json())?;
    println!("height {} state {}", report.height, report.state_hashes[0]);
    let ok = match &report.attack {
        Some(a) => {
            println!("attack {}: {}", a.script, if a.verdict.pass && a.expectations_met { "PASS" } else { "FAIL" });
            a.verdict.pass && a.expectations_met
        }
        None => true,
    };
    println!("wrote {}", path.display());
    Ok(ok)
}

fn cmd_auction(cli: &Cli, bids: &str) -> Result<bool> {
    let amounts = parse_bids(bids)?;
    let mut config = NetworkConfig::default();
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(b) = cli.block_size {
        config.block_size = b;
    }
    let t = run_auction(&config, &amounts)?;
    let phases = std::iter::once(("create", &t.create))
        .chain(t.bids.iter().map(|b| ("bid", b)))
        .chain([("close", &t.close), ("evaluate", &t.evaluate)]);
    for (phase, tx) in phases {
        println!("{phase:<8} {:<12} {} {:?}", tx.client, tx.tx_id, tx.validity);
    }
    match (&t.outcome, &t.error) {
        (Some(o), _) => match &o.winner {
            Some((who, amount)) => println!("winner: {who} with {amount}"),
            None => println!("no winner"),
        },
        (None, e) => println!("evaluation failed: {}", e.as_deref().unwrap_or("unknown")),
    }
    write(&cli.out, "report.json", &serde_json::to_string_pretty(&t)?)?;
    Ok(t.outcome.is_some())
}

fn cmd_bench(cli: &Cli, transactions: usize, evaluate_bids: &str) -> Result<bool> {
    let mut spec = BenchSpec {
        transactions,
        evaluate_bids: parse_bids(evaluate_bids)?.into_iter().map(|n| n as usize).collect(),
        ..BenchSpec::default()
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(b) = cli.block_size {
        spec.block_size = b;
    }
    if let Some(c) = cli.clients {
        spec.client_counts = vec![c];
    }
    let report = run_bench(&spec)?;
    let csv = write(&cli.out, "bench.csv", &report.to_csv())?;
    write(&cli.out, "report.json", &serde_json::to_string_pretty(&report)?)?;
    for r in &report.rows {
        println!(
            "{:<14} {:<8} clients={:<3} {:>9.1} tx/s  latency {:>8.1} us",
            r.workload,
            r.mode.as_str(),
            r.clients,
            r.throughput_tps,
            r.latency.mean
        );
    }
    println!("noop throughput, enclave/native: {:.2}x", report.noop_overhead_ratio);
    println!("wrote {}", csv.display());
    Ok(true)
}

fn cmd_attack(cli: &Cli, weaken: &[Weakening]) -> Result<bool> {
    let Some(target) = &cli.attack else {
        bail!("--attack FILE|DIR is required");
    };
    let scripts: Vec<AttackScript> = if target.is_dir() {
        load_corpus(target)?.into_iter().map(|(_, s)| s).collect()
    } else {
        vec![AttackScript::load(target)?]
    };
    let mut weak = Weakenings::NONE;
    for w in weaken {
        match w {
            Weakening::MetaSignature => weak.skip_meta_signature = true,
            Weakening::Sequence => weak.skip_sequence_check = true,
            Weakening::Attestation => weak.skip_attestation_check = true,
        }
    }
    let fixture = NetworkConfig { weak, ..NetworkConfig::default() };
    let mut summaries = Vec::new();
    let mut all = true;
    for mut s in scripts {
        if let Some(seed) = cli.seed {
            s.seed = seed;
        }
        if let Some(b) = cli.block_size {
            s.block_size = Some(b);
        }
        let run = run_attack(&fixture, &s)?;
        let ok = run.passed();
        all &= ok;
        let missing: Vec<&str> = run.expectations.iter().filter(|e| !e.1).map(|e| e.0.as_str()).collect();
        print!("{:<36} {}", run.script, if ok { "PASS" } else { "FAIL" });
        if !run.verdict.pass {
            print!("  oracle: {}", run.verdict.note.as_deref().unwrap_or("output outside the allowed set"));
        }
        if !missing.is_empty() {
            print!("  missing: {}", missing.join(", "));
        }
        println!();
        write(&cli.out.join("logs"), &format!("{}.jsonl", run.script), &run.log.to_json_lines())?;
        summaries.push(AttackSummary {
            script: run.script.clone(),
            expectations_met: run.expectations_met(),
            verdict: run.verdict,
        });
    }
    write(&cli.out, "report.json", &serde_json::to_string_pretty(&summaries)?)?;
    Ok(all)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Some(Command::Run) => cmd_run(&cli),
        Some(Command::Auction { bids }) => cmd_auction(&cli, bids),
        Some(Command::Bench { transactions, evaluate_bids }) => cmd_bench(&cli, *transactions, evaluate_bids),
        Some(Command::Attack { weaken }) => cmd_attack(&cli, weaken),
        None if cli.bench => cmd_bench(&cli, 1000, "10,100"),
        None if cli.attack.as_ref().is_some_and(|a| a.is_dir()) => cmd_attack(&cli, &[]),
        None => cmd_run(&cli),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
