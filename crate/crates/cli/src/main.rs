use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssi_core::harness::bench::{self, BenchConfig};
use ssi_core::harness::scenario;

#[derive(Parser)]
#[command(name = "ssi", about = "Scenario runner and benchmark driver for the SSI health-record stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scripted multi-actor scenarios.
    Scenario {
        #[command(subcommand)]
        action: ScenarioCmd,
    },
    /// Latency and throughput bench.
    Bench {
        /// Comma-separated ops; defaults to all.
        #[arg(long, default_value = "")]
        ops: String,
        #[arg(long, default_value_t = 10_000)]
        iters: usize,
        /// Target submission rate for ledger ops.
        #[arg(long)]
        tps: Option<f64>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    Run {
        file: PathBuf,
        /// Overrides the seed in the script.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes the transcript and final ledger and mediator state here.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
}

const EXIT_ASSERTION: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn run_scenario(file: PathBuf, seed: Option<u64>, snapshot: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let mut script = match scenario::load_script(&file) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}: {e}", file.display());
            return Ok(ExitCode::from(EXIT_USAGE));
        }
    };
    if let Some(seed) = seed {
        script.seed = seed;
    }
    let run = match scenario::run_script(&script) {
        Ok(run) => run,
        Err(e) => {
            eprintln!("{}: {e}", file.display());
            return Ok(ExitCode::from(EXIT_USAGE));
        }
    };
    for s in &run.transcript.steps {
        println!("[{}] {:<18} {} {}", s.index, s.flow, if s.passed { "ok  " } else { "FAIL" }, s.detail);
        for fs in &s.outcome.steps {
            println!("      {} {}: {}", fs.actor, fs.action, fs.result);
        }
    }
    for a in &run.transcript.assertions {
        println!("check {:?}: {} {}", a.assertion, if a.passed { "ok" } else { "FAIL" }, a.detail);
    }
    if let Some(path) = snapshot {
        std::fs::write(&path, run.snapshot())?;
    }
    match run.transcript.first_failure() {
        None => {
            println!("scenario passed");
            Ok(ExitCode::SUCCESS)
        }
        Some(f) => {
            eprintln!("scenario failed at {f}");
            Ok(ExitCode::from(EXIT_ASSERTION))
        }
    }
}

fn run_bench(ops: &str, iters: usize, tps: Option<f64>, csv: Option<PathBuf>, seed: u64) -> anyhow::Result<ExitCode> {
    let ops = match bench::parse_ops(ops) {
        Ok(ops) => ops,
        Err(e) => {
            eprintln!("{e}");
            return Ok(ExitCode::from(EXIT_USAGE));
        }
    };
    let reports = bench::run_bench(&ops, &BenchConfig { iterations: iters, tps_target: tps, seed });
    let text = bench::to_csv(&reports);
    print!("{text}");
    if let Some(path) = csv {
        std::fs::write(path, &text)?;
    }
    Ok(if reports.iter().any(|r| r.is_failed()) { ExitCode::from(EXIT_ASSERTION) } else { ExitCode::SUCCESS })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Scenario { action: ScenarioCmd::Run { file, seed, snapshot } } => run_scenario(file, seed, snapshot),
        Command::Bench { ops, iters, tps, csv, seed } => run_bench(&ops, iters, tps, csv, seed),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(EXIT_USAGE)
    })
}
