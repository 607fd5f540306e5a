//! Latency and throughput against the plain MCS baseline.

use std::io::Write;
use std::str::FromStr;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use cjm_core::{Config, CounterSnapshot, McsLock, Monitor, Runtime, ThreadContext};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Mcs,
}

#[derive(Debug, Error)]
#[error("unknown baseline `{0}` (supported: mcs)")]
pub struct BaselineError(String);

impl FromStr for Baseline {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mcs" => Ok(Baseline::Mcs),
            _ => Err(BaselineError(s.into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Impl {
    Cjm,
    Mcs,
}

impl Impl {
    pub fn name(self) -> &'static str {
        match self {
            Impl::Cjm => "cjm",
            Impl::Mcs => "mcs",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub max_threads: usize,
    pub baseline: Baseline,
    /// Lock/unlock pairs per uncontended repetition.
    pub uncontended_ops: u64,
    pub repetitions: usize,
    /// Lock/unlock pairs per thread in contended runs.
    pub contended_ops: u64,
    /// Waiter threads in the notify-heavy run.
    pub notify_waiters: usize,
    pub notify_rounds: u64,
    pub runtime: Config,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            max_threads: 8,
            baseline: Baseline::Mcs,
            uncontended_ops: 1_000_000,
            repetitions: 7,
            contended_ops: 20_000,
            notify_waiters: 8,
            notify_rounds: 200,
            runtime: Config::from_env(),
        }
    }
}

/// One CSV row.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub implementation: &'static str,
    pub mode: &'static str,
    pub threads: usize,
    pub monitors: usize,
    pub ops: u64,
    pub elapsed: Duration,
    pub counters: CounterSnapshot,
}

impl BenchRow {
    pub fn ns_per_op(&self) -> f64 {
        self.elapsed.as_nanos() as f64 / self.ops.max(1) as f64
    }

    pub fn ops_per_sec(&self) -> f64 {
        self.ops as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

pub const CSV_CONFIG_COLUMNS: &[&str] = &[
    "impl",
    "mode",
    "threads",
    "monitors",
    "ops",
    "elapsed_ns",
    "ops_per_sec",
    "ns_per_op",
];

impl BenchReport {
    fn find(&self, imp: Impl, mode: &str, threads: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.implementation == imp.name() && r.mode == mode && r.threads == threads)
    }

    /// CJM uncontended ns/op over the baseline's.
    pub fn uncontended_ratio(&self) -> Option<f64> {
        let c = self.find(Impl::Cjm, "uncontended", 1)?;
        let m = self.find(Impl::Mcs, "uncontended", 1)?;
        Some(c.ns_per_op() / m.ns_per_op())
    }

    /// CJM contended throughput over the baseline's at `threads`.
    pub fn contended_ratio(&self, threads: usize) -> Option<f64> {
        let c = self.find(Impl::Cjm, "contended", threads)?;
        let m = self.find(Impl::Mcs, "contended", threads)?;
        Some(c.ops_per_sec() / m.ops_per_sec())
    }

    pub fn notify_row(&self) -> Option<&BenchRow> {
        self.find(Impl::Cjm, "notify", self.rows.iter().find(|r| r.mode == "notify")?.threads)
    }

    /// Config columns, then one column per counter.
    pub fn write_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<&str> = CSV_CONFIG_COLUMNS
            .iter()
            .chain(CounterSnapshot::FIELDS)
            .copied()
            .collect();
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.implementation.to_string(),
                r.mode.to_string(),
                r.threads.to_string(),
                r.monitors.to_string(),
                r.ops.to_string(),
                r.elapsed.as_nanos().to_string(),
                format!("{:.1}", r.ops_per_sec()),
                format!("{:.2}", r.ns_per_op()),
            ];
            rec.extend(r.counters.values().iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn pairs(ctx: &ThreadContext, imp: Impl, m: &Monitor, l: &McsLock, n: u64) {
    match imp {
        Impl::Cjm => {
            for _ in 0..n {
                ctx.lock(m);
                ctx.unlock(m).unwrap();
            }
        }
        Impl::Mcs => {
            for _ in 0..n {
                l.lock(ctx);
                l.unlock(ctx).unwrap();
            }
        }
    }
}

/// Single-thread lock/unlock latency for both implementations. Repetitions
/// alternate between them and the fastest of each is kept.
pub fn uncontended(cfg: &BenchConfig) -> [BenchRow; 2] {
    let rt = Runtime::new(cfg.runtime);
    let ctx = rt.attach();
    let m = Monitor::new();
    let l = McsLock::new();
    let imps = [Impl::Cjm, Impl::Mcs];
    for imp in imps {
        pairs(&ctx, imp, &m, &l, cfg.uncontended_ops / 10);
    }
    let mut best = [Duration::MAX; 2];
    let mut counters = [CounterSnapshot::default(); 2];
    for _ in 0..cfg.repetitions {
        for (i, imp) in imps.into_iter().enumerate() {
            let before = ctx.handle().counters.snapshot();
            let t0 = Instant::now();
            pairs(&ctx, imp, &m, &l, cfg.uncontended_ops);
            let dt = t0.elapsed();
            if dt < best[i] {
                best[i] = dt;
                counters[i] = ctx.handle().counters.snapshot() - before;
            }
        }
    }
    imps.map(|imp| {
        let i = imp as usize;
        BenchRow {
            implementation: imp.name(),
            mode: "uncontended",
            threads: 1,
            monitors: 1,
            ops: cfg.uncontended_ops,
            elapsed: best[i],
            counters: counters[i],
        }
    })
}

/// `threads` threads hammering one lock. Each run is timed from the first
/// worker's start to the last worker's finish; the median run is kept.
pub fn contended(cfg: &BenchConfig, imp: Impl, threads: usize) -> BenchRow {
    let mut runs: Vec<(Duration, CounterSnapshot)> =
        (0..cfg.repetitions.max(1)).map(|_| contended_once(cfg, imp, threads)).collect();
    runs.sort_by_key(|r| r.0);
    let (elapsed, counters) = runs[runs.len() / 2];
    BenchRow {
        implementation: imp.name(),
        mode: "contended",
        threads,
        monitors: 1,
        ops: cfg.contended_ops * threads as u64,
        elapsed,
        counters,
    }
}

fn contended_once(cfg: &BenchConfig, imp: Impl, threads: usize) -> (Duration, CounterSnapshot) {
    let rt = Runtime::new(cfg.runtime);
    let m = Arc::new(Monitor::new());
    let l = Arc::new(McsLock::new());
    let start = Arc::new(Barrier::new(threads));
    let hs: Vec<_> = (0..threads)
        .map(|_| {
            let (rt, m, l, start) = (rt.clone(), m.clone(), l.clone(), start.clone());
            let n = cfg.contended_ops;
            thread::spawn(move || {
                let ctx = rt.attach();
                start.wait();
                let t0 = Instant::now();
                pairs(&ctx, imp, &m, &l, n);
                (t0, Instant::now())
            })
        })
        .collect();
    let spans: Vec<_> = hs.into_iter().map(|h| h.join().unwrap()).collect();
    let first = spans.iter().map(|s| s.0).min().unwrap();
    let last = spans.iter().map(|s| s.1).max().unwrap();
    (last - first, rt.counters())
}

/// Waiters loop on wait; one notifier moves them back. The row's counters
/// cover only the notifier's `notify` calls, each made with a waiter present.
pub fn notify_heavy(cfg: &BenchConfig) -> BenchRow {
    let rt = Runtime::new(cfg.runtime);
    let m = Arc::new(Monitor::new());
    let hs: Vec<_> = (0..cfg.notify_waiters)
        .map(|_| {
            let (rt, m, rounds) = (rt.clone(), m.clone(), cfg.notify_rounds);
            thread::spawn(move || {
                let ctx = rt.attach();
                for _ in 0..rounds {
                    ctx.lock(&m);
                    ctx.wait(&m, None).unwrap();
                    ctx.unlock(&m).unwrap();
                }
            })
        })
        .collect();
    let ctx = rt.attach();
    let total = cfg.notify_rounds * cfg.notify_waiters as u64;
    let mut counters = CounterSnapshot::default();
    let mut ops = 0;
    let mut elapsed = Duration::ZERO;
    while ops < total {
        ctx.lock(&m);
        if !ctx.waiters(&m).unwrap().is_empty() {
            let before = ctx.handle().counters.snapshot();
            let t0 = Instant::now();
            ctx.notify(&m).unwrap();
            elapsed += t0.elapsed();
            counters = counters + (ctx.handle().counters.snapshot() - before);
            ops += 1;
        }
        ctx.unlock(&m).unwrap();
        thread::yield_now();
    }
    for h in hs {
        h.join().unwrap();
    }
    BenchRow {
        implementation: Impl::Cjm.name(),
        mode: "notify",
        threads: cfg.notify_waiters + 1,
        monitors: 1,
        ops,
        elapsed,
        counters,
    }
}

pub fn run_bench(cfg: &BenchConfig) -> BenchReport {
    let mut report = BenchReport::default();
    report.rows.extend(uncontended(cfg));
    for t in 1..=cfg.max_threads {
        for imp in [Impl::Cjm, Impl::Mcs] {
            report.rows.push(contended(cfg, imp, t));
        }
    }
    report.rows.push(notify_heavy(cfg));
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchConfig {
        BenchConfig {
            max_threads: 2,
            uncontended_ops: 2_000,
            repetitions: 2,
            contended_ops: 500,
            notify_waiters: 3,
            notify_rounds: 5,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn report_shape_and_csv() {
        let r = run_bench(&tiny());
        assert_eq!(r.rows.len(), 2 + 2 * 2 + 1);
        assert!(r.uncontended_ratio().unwrap() > 0.0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("impl,mode,threads,monitors,ops,elapsed_ns,ops_per_sec,ns_per_op,parks"));
        assert_eq!(text.lines().count(), 1 + r.rows.len());
    }

    #[test]
    fn contended_accounting_identity() {
        let row = contended(&tiny(), Impl::Cjm, 2);
        let c = row.counters;
        assert_eq!(c.grants, 1_000);
        assert_eq!(c.handoffs, c.grants - c.instant_acquires);
    }

    #[test]
    fn notify_never_unparks() {
        let row = notify_heavy(&tiny());
        assert_eq!(row.ops, 15);
        assert_eq!(row.counters.unparks, 0);
        assert_eq!(row.counters.tail_swaps, row.ops);
    }
}
