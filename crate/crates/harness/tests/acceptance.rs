//! One PASS/FAIL line per acceptance criterion; exits nonzero on any FAIL.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use cjm_core::{Config, IllegalMonitorState, Monitor, Runtime, WaitsetStrategy};
use cjm_harness::bench::{contended, notify_heavy, uncontended};
use cjm_harness::{
    load_scenario, run_scenario, Backend, BenchConfig, BenchReport, CjmBackend, Impl, Mix, OracleBackend,
    RunOptions, Scenario, ScenarioReport, StressConfig,
};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

const STRATEGIES: [WaitsetStrategy; 2] = [WaitsetStrategy::Chain, WaitsetStrategy::External];

type Check = Box<dyn Fn() -> Verdict>;

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        ok,
        detail: detail.into(),
    }
}

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn scenario(name: &str) -> Scenario {
    load_scenario(&scenario_dir().join(format!("{name}.scn"))).unwrap()
}

fn corpus() -> Vec<Scenario> {
    let mut paths: Vec<_> = std::fs::read_dir(scenario_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_scenario(p).unwrap()).collect()
}

fn opts(strategy: WaitsetStrategy) -> RunOptions {
    RunOptions {
        strategy,
        ..RunOptions::default()
    }
}

fn first_failure(reports: &[ScenarioReport]) -> Option<String> {
    reports
        .iter()
        .find(|r| !r.passed())
        .map(|r| format!("{r}: {}", r.problems().join("; ")))
}

/// Runs `sc` `n` times under both strategies.
fn repeated(sc: &Scenario, n: usize) -> Verdict {
    let mut passed = 0;
    for strategy in STRATEGIES {
        for _ in 0..n {
            let reports = run_scenario(sc, &opts(strategy));
            if let Some(f) = first_failure(&reports) {
                return verdict(false, f);
            }
            passed += 1;
        }
    }
    verdict(true, format!("{passed}/{} runs", 2 * n))
}

fn mutual_exclusion() -> Verdict {
    let mut slowest = Duration::ZERO;
    for seed in 1..=20 {
        let r = cjm_harness::run_stress(&StressConfig {
            threads: 8,
            monitors: 1,
            iters: 100_000,
            seed,
            ..StressConfig::default()
        });
        slowest = slowest.max(r.elapsed);
        if !r.passed() || r.counters != [800_000] || r.elapsed >= Duration::from_secs(30) {
            return verdict(false, format!("seed {seed}: {r}"));
        }
    }
    verdict(true, format!("20 seeds, counter 800000, slowest {:.2}s", slowest.as_secs_f64()))
}

fn morphing() -> Verdict {
    let row = notify_heavy(&BenchConfig {
        notify_waiters: 8,
        notify_rounds: 100,
        ..BenchConfig::default()
    });
    let c = row.counters;
    if c.unparks != 0 || c.tail_swaps != row.ops {
        return verdict(
            false,
            format!("{} notifies: {} unparks, {} tail swaps", row.ops, c.unparks, c.tail_swaps),
        );
    }
    for strategy in STRATEGIES {
        let (swaps, unparks) = notify_all_ten(strategy);
        if swaps != 1 || unparks != 0 {
            return verdict(
                false,
                format!("notify_all over 10 waiters ({strategy:?}): {swaps} tail swaps, {unparks} unparks"),
            );
        }
    }
    verdict(
        true,
        format!("{} notifies: 0 unparks, 1 swap each; notify_all x10: 1 swap, 0 unparks", row.ops),
    )
}

fn notify_all_ten(strategy: WaitsetStrategy) -> (u64, u64) {
    let rt = Runtime::new(Config::default().with_strategy(strategy));
    let m = Arc::new(Monitor::new());
    let hs: Vec<_> = (0..10)
        .map(|_| {
            let (rt, m) = (rt.clone(), m.clone());
            thread::spawn(move || {
                let ctx = rt.attach();
                ctx.lock(&m);
                ctx.wait(&m, None).unwrap();
                ctx.unlock(&m).unwrap();
            })
        })
        .collect();
    let ctx = rt.attach();
    loop {
        ctx.lock(&m);
        if ctx.waiters(&m).unwrap().len() == 10 {
            break;
        }
        ctx.unlock(&m).unwrap();
        thread::yield_now();
    }
    let before = ctx.handle().counters.snapshot();
    ctx.notify_all(&m).unwrap();
    let d = ctx.handle().counters.snapshot() - before;
    ctx.unlock(&m).unwrap();
    for h in hs {
        h.join().unwrap();
    }
    (d.tail_swaps, d.unparks)
}

fn footprint() -> Verdict {
    let mut worst = Vec::new();
    for (k, timed) in [(1, false), (3, false), (3, true), (4, true)] {
        for seed in 1..=3 {
            let r = cjm_harness::run_stress(&StressConfig {
                threads: 4,
                monitors: 4,
                iters: 10_000,
                seed,
                max_depth: k,
                mix: if timed {
                    Mix {
                        lock: 6,
                        wait: 2,
                        notify: 1,
                        hash: 1,
                    }
                } else {
                    Mix {
                        lock: 8,
                        wait: 0,
                        notify: 0,
                        hash: 1,
                    }
                },
                wait_timeout: timed.then(|| Duration::from_millis(1)),
                ..StressConfig::default()
            });
            let bound = k + 1 + usize::from(timed);
            if !r.passed() || r.max_allocated > bound {
                return verdict(false, format!("K={k} timed={timed} seed {seed}: {r}"));
            }
            worst.push(format!("K={k}{}: {}/{bound}", if timed { " timed" } else { "" }, r.max_allocated));
        }
    }
    worst.dedup();
    verdict(true, worst.join(", "))
}

fn hash_stability() -> Verdict {
    let rt = Runtime::new(Config::default());
    let m = Arc::new(Monitor::new());
    let stop = Arc::new(AtomicBool::new(false));
    let lockers: Vec<_> = (0..8)
        .map(|_| {
            let (rt, m, stop) = (rt.clone(), m.clone(), stop.clone());
            thread::spawn(move || {
                let ctx = rt.attach();
                let mut n = 0u64;
                while !stop.load(Ordering::Relaxed) {
                    ctx.lock(&m);
                    ctx.unlock(&m).unwrap();
                    n += 1;
                }
                n
            })
        })
        .collect();
    let ctx = rt.attach();
    let mut seen = HashSet::new();
    let (mut samples, mut zeros) = (0u64, 0u64);
    let t0 = Instant::now();
    while t0.elapsed() < Duration::from_secs(2) {
        let h = ctx.hash_of(&m);
        zeros += u64::from(h == 0);
        seen.insert(h);
        samples += 1;
    }
    stop.store(true, Ordering::Relaxed);
    let locks: u64 = lockers.into_iter().map(|h| h.join().unwrap()).sum();
    verdict(
        seen.len() == 1 && zeros == 0,
        format!("{samples} samples, {} distinct, {zeros} zeros, {locks} concurrent locks", seen.len()),
    )
}

fn cancellation() -> Verdict {
    let sc = scenario("notify_cancel_race");
    let waiters: Vec<usize> = sc
        .programs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.iter().any(|a| matches!(a.step, cjm_harness::scenario::Step::Wait(..))))
        .map(|(t, _)| t)
        .collect();
    let mut orders = 0;
    for strategy in STRATEGIES {
        let reports = run_scenario(&sc, &opts(strategy));
        if let Some(f) = first_failure(&reports) {
            return verdict(false, f);
        }
        for r in &reports {
            for &t in &waiters {
                let results: Vec<_> = r.cjm.traces[t].iter().filter(|e| e.starts_with("wait ")).collect();
                let one = results.len() == 1
                    && (results[0].ends_with(": notified") || results[0].ends_with(": timedout"));
                if !one {
                    return verdict(false, format!("{r}: {} gave {results:?}", sc.threads[t]));
                }
            }
        }
        orders += reports.len();
    }
    verdict(
        true,
        format!("{orders} interleavings over {} threads: one result per waiter, clean audits, no leaks", sc.threads.len()),
    )
}

fn deflation() -> Verdict {
    let mut runs = 0;
    for strategy in STRATEGIES {
        for seed in 1..=5 {
            let r = cjm_harness::run_stress(&StressConfig {
                threads: 4,
                monitors: 3,
                iters: 10_000,
                seed,
                max_depth: 2,
                mix: Mix {
                    lock: 6,
                    wait: 1,
                    notify: 2,
                    hash: 1,
                },
                runtime: Config::default().with_strategy(strategy),
                ..StressConfig::default()
            });
            let deflated = r
                .first_hashes
                .iter()
                .zip(&r.final_hashes)
                .all(|(&first, &fin)| first != 0 && fin == Some(first));
            if !r.passed() || !deflated {
                return verdict(
                    false,
                    format!("{strategy:?} seed {seed}: first {:?} final {:?}: {r}", r.first_hashes, r.final_hashes),
                );
            }
            runs += 1;
        }
    }
    verdict(true, format!("{runs} runs, every monitor hashed with its first observed value"))
}

fn imsx() -> Verdict {
    for name in ["unlock_without_lock", "imsx_non_owner", "imsx_after_release", "imbalanced_unlock"] {
        for strategy in STRATEGIES {
            if let Some(f) = first_failure(&run_scenario(&scenario(name), &opts(strategy))) {
                return verdict(false, f);
            }
        }
    }
    let mut attempts = 0;
    let cjm: Arc<dyn Backend> = Arc::new(CjmBackend::new(Config::default(), 3, 2));
    let oracle: Arc<dyn Backend> = Arc::new(OracleBackend::new(3, 2));
    for backend in [cjm, oracle] {
        let (n, errs) = random_imsx(backend.clone(), 7, 1000);
        if errs != n {
            return verdict(false, format!("{}: {errs}/{n} non-owner attempts raised", backend.label()));
        }
        attempts += n;
    }
    verdict(true, format!("4 scripted scenarios; {attempts} random non-owner attempts all raised, matching the oracle"))
}

/// Each round a holder takes a random subset of the monitors, recursively
/// at times, and the prober tries an owner-only operation on a monitor it
/// does not hold. Sometimes the prober owned that monitor just before.
fn random_imsx(backend: Arc<dyn Backend>, seed: u64, rounds: usize) -> (usize, usize) {
    let gate = Arc::new(Barrier::new(2));
    let holder = {
        let (backend, gate) = (backend.clone(), gate.clone());
        thread::spawn(move || {
            let mut a = backend.actor(0);
            let mut rng = SmallRng::seed_from_u64(seed);
            for _ in 0..rounds {
                gate.wait();
                let held: Vec<usize> = (0..3).filter(|_| rng.gen_bool(0.5)).collect();
                for &m in &held {
                    for _ in 0..rng.gen_range(1..=2) {
                        a.lock(m);
                    }
                }
                gate.wait();
                gate.wait();
                for &m in &held {
                    while a.holds(m) {
                        a.unlock(m).unwrap();
                    }
                }
            }
        })
    };
    let mut a = backend.actor(1);
    let mut rng = SmallRng::seed_from_u64(seed ^ 0xABCD);
    let mut errs = 0;
    for _ in 0..rounds {
        let m = rng.gen_range(0..3);
        if rng.gen_bool(0.3) {
            a.lock(m);
            a.unlock(m).unwrap();
        }
        gate.wait();
        gate.wait();
        let r: Result<(), IllegalMonitorState> = match rng.gen_range(0..4) {
            0 => a.unlock(m),
            1 => a.wait(m, Some(Duration::from_millis(1))).map(|_| ()),
            2 => a.notify(m, false),
            _ => a.notify(m, true),
        };
        errs += usize::from(r.is_err());
        gate.wait();
    }
    holder.join().unwrap();
    (rounds, errs)
}

fn strategy_equivalence() -> Verdict {
    let corpus = corpus();
    let mut reports = 0;
    for sc in &corpus {
        let mut traces = Vec::new();
        for strategy in STRATEGIES {
            let rs = run_scenario(sc, &opts(strategy));
            if let Some(f) = first_failure(&rs) {
                return verdict(false, f);
            }
            reports += rs.len();
            traces.push(rs.into_iter().map(|r| (r.order, r.cjm.traces, r.cjm.grants)).collect::<Vec<_>>());
        }
        if traces[0] != traces[1] {
            return verdict(false, format!("{}: traces differ between strategies", sc.name));
        }
    }
    verdict(
        true,
        format!("{} scenarios, {reports} runs, identical traces under chain and external", corpus.len()),
    )
}

fn performance(csv: &Path) -> Verdict {
    let cfg = BenchConfig {
        contended_ops: 50_000,
        repetitions: 3,
        ..BenchConfig::default()
    };
    let mut report = BenchReport::default();
    report.rows.extend(uncontended(&BenchConfig {
        repetitions: 7,
        ..cfg.clone()
    }));
    for imp in [Impl::Cjm, Impl::Mcs] {
        report.rows.push(contended(&cfg, imp, 8));
    }
    report.rows.push(notify_heavy(&cfg));
    if let Err(e) = std::fs::File::create(csv).map_err(csv::Error::from).and_then(|f| report.write_csv(f)) {
        return verdict(false, format!("writing {}: {e}", csv.display()));
    }
    let u = report.uncontended_ratio().unwrap();
    let c = report.contended_ratio(8).unwrap();
    let band = if (0.5..=2.0).contains(&c) { "within" } else { "outside" };
    verdict(
        u <= 1.5,
        format!(
            "uncontended {u:.2}x MCS (gate 1.5x); contended 8-thread {c:.2}x MCS, {band} 0.5x-2x (informative); csv {}",
            csv.display()
        ),
    )
}

fn main() -> ExitCode {
    let csv = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_bench.csv");
    let fifo = scenario("fifo_arrival");
    let handoff = scenario("handoff_with_waitset");
    let criteria: Vec<(&str, Check)> = vec![
        ("mutual exclusion", Box::new(mutual_exclusion)),
        ("strict FIFO arrival", Box::new(move || repeated(&fifo, 100))),
        ("handoff carries waitset", Box::new(move || repeated(&handoff, 100))),
        ("wait morphing", Box::new(morphing)),
        ("node footprint", Box::new(footprint)),
        ("hash stability under churn", Box::new(hash_stability)),
        ("cancellation soundness", Box::new(cancellation)),
        ("deflation", Box::new(deflation)),
        ("IMSX fidelity", Box::new(imsx)),
        ("strategy equivalence", Box::new(strategy_equivalence)),
        ("performance sanity", Box::new(move || performance(&csv))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let v = check();
        failed += usize::from(!v.ok);
        println!(
            "{} {:>2} {name}: {} [{:.1}s]",
            if v.ok { "PASS" } else { "FAIL" },
            i + 1,
            v.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
