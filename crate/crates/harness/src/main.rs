use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use cjm_core::{Config, SpinPolicy, WaitsetStrategy};
use cjm_harness::bench::Baseline;
use cjm_harness::{load_scenario, run_bench, run_scenario, run_stress, BenchConfig, Mix, RunOptions, StressConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cjm", about = "Compact monitor scenarios, stress runs and benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run scenario files against the monitors and the reference oracle.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long, default_value_t = WaitsetStrategy::Chain)]
        strategy: WaitsetStrategy,
        /// Spin iterations before parking.
        #[arg(long)]
        spin: Option<u32>,
        /// Only run each scenario's base release order.
        #[arg(long)]
        no_explore: bool,
    },
    /// Randomized workload with invariant checks.
    Stress {
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[arg(long, default_value_t = 1)]
        monitors: usize,
        #[arg(long, default_value_t = 10_000)]
        iters: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Operation weights, e.g. lock:8,wait:1,notify:1,hash:1
        #[arg(long, default_value = "lock:1")]
        mix: Mix,
        /// Most monitors held at once.
        #[arg(long, default_value_t = 1)]
        depth: usize,
        /// Timeout for wait ops in ms; untimed if absent.
        #[arg(long)]
        wait_timeout_ms: Option<u64>,
        #[arg(long, default_value_t = WaitsetStrategy::Chain)]
        strategy: WaitsetStrategy,
        #[arg(long)]
        spin: Option<u32>,
    },
    /// Latency and throughput against the baseline lock.
    Bench {
        #[arg(long, default_value_t = 8)]
        max_threads: usize,
        #[arg(long, default_value = "mcs")]
        baseline: Baseline,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Lock/unlock pairs per thread in contended runs.
        #[arg(long, default_value_t = 20_000)]
        ops: u64,
    },
}

fn runtime_config(strategy: WaitsetStrategy, spin: Option<u32>) -> Config {
    let c = Config::from_env().with_strategy(strategy);
    match spin {
        Some(n) => {
            let policy = SpinPolicy {
                spin_budget: n,
                ..c.spin
            };
            c.with_spin(policy)
        }
        None => c,
    }
}

fn main() -> anyhow::Result<ExitCode> {
    let ok = match Cli::parse().cmd {
        Cmd::Run {
            scenarios,
            strategy,
            spin,
            no_explore,
        } => {
            let opts = RunOptions {
                strategy,
                spin,
                explore: !no_explore,
                ..RunOptions::default()
            };
            let mut ok = true;
            for path in &scenarios {
                let sc = load_scenario(path)?;
                for report in run_scenario(&sc, &opts) {
                    println!("{report}");
                    ok &= report.passed();
                }
            }
            ok
        }
        Cmd::Stress {
            threads,
            monitors,
            iters,
            seed,
            mix,
            depth,
            wait_timeout_ms,
            strategy,
            spin,
        } => {
            let report = run_stress(&StressConfig {
                threads,
                monitors,
                iters,
                seed,
                mix,
                max_depth: depth,
                wait_timeout: wait_timeout_ms.map(Duration::from_millis),
                runtime: runtime_config(strategy, spin),
            });
            println!("{report}");
            report.passed()
        }
        Cmd::Bench {
            max_threads,
            baseline,
            csv,
            ops,
        } => {
            let report = run_bench(&BenchConfig {
                max_threads,
                baseline,
                contended_ops: ops,
                ..BenchConfig::default()
            });
            for r in &report.rows {
                println!(
                    "{:<4} {:<12} threads={:<3} {:>12.1} ops/s {:>9.2} ns/op",
                    r.implementation,
                    r.mode,
                    r.threads,
                    r.ops_per_sec(),
                    r.ns_per_op()
                );
            }
            if let Some(ratio) = report.uncontended_ratio() {
                println!("uncontended cjm/mcs latency ratio {ratio:.3}");
            }
            if let Some(path) = csv {
                let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                report.write_csv(f)?;
            }
            true
        }
    };
    // Stuck scenario threads cannot be joined; exit without waiting for them.
    std::process::exit(if ok { 0 } else { 1 });
}
