//! Randomized workload with exact invariant checks.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use cjm_core::{decode, CounterSnapshot, Config, MarkVariant, Monitor, Runtime, WaitResult};
use rand::rngs::SmallRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use thiserror::Error;

/// Relative weights of the operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mix {
    pub lock: u32,
    pub wait: u32,
    pub notify: u32,
    pub hash: u32,
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            lock: 1,
            wait: 0,
            notify: 0,
            hash: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("bad mix `{0}`: expected lock:u,wait:v,notify:w,hash:x")]
pub struct MixError(String);

impl FromStr for Mix {
    type Err = MixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut mix = Mix {
            lock: 0,
            wait: 0,
            notify: 0,
            hash: 0,
        };
        for part in s.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once(':').ok_or_else(|| MixError(s.into()))?;
            let v: u32 = v.trim().parse().map_err(|_| MixError(s.into()))?;
            match k.trim() {
                "lock" => mix.lock = v,
                "wait" => mix.wait = v,
                "notify" => mix.notify = v,
                "hash" => mix.hash = v,
                _ => return Err(MixError(s.into())),
            }
        }
        if mix.lock + mix.wait + mix.notify + mix.hash == 0 {
            return Err(MixError(s.into()));
        }
        Ok(mix)
    }
}

#[derive(Clone, Debug)]
pub struct StressConfig {
    pub threads: usize,
    pub monitors: usize,
    pub iters: u64,
    pub seed: u64,
    pub mix: Mix,
    /// Most monitors one thread holds at once.
    pub max_depth: usize,
    /// Timeout for `wait` ops; `None` waits untimed and relies on notifiers.
    pub wait_timeout: Option<Duration>,
    pub runtime: Config,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            threads: 4,
            monitors: 1,
            iters: 10_000,
            seed: 1,
            mix: Mix::default(),
            max_depth: 1,
            wait_timeout: None,
            runtime: Config::from_env(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct StressReport {
    pub elapsed: Duration,
    /// Guarded counter per monitor.
    pub counters: Vec<u64>,
    /// Increments each counter should have received.
    pub expected: Vec<u64>,
    pub waits_entered: u64,
    pub waits_notified: u64,
    pub waits_timed_out: u64,
    /// Largest node total of any worker.
    pub max_allocated: usize,
    pub node_bound: usize,
    pub counters_snapshot: CounterSnapshot,
    /// First hash observed per monitor, 0 if never read.
    pub first_hashes: Vec<u64>,
    /// Hash in each monitor's mark at the end, `None` unless deflated to hashed.
    pub final_hashes: Vec<Option<u64>>,
    pub failures: Vec<String>,
}

impl StressReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for StressReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} in {:.3}s: counters {:?} (expected {:?})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64(),
            self.counters,
            self.expected
        )?;
        writeln!(
            f,
            "waits entered {} notified {} timed out {}; max nodes per thread {} (bound {})",
            self.waits_entered, self.waits_notified, self.waits_timed_out, self.max_allocated, self.node_bound
        )?;
        let c = &self.counters_snapshot;
        write!(
            f,
            "grants {} handoffs {} instant {} parks {} unparks {} deflations {} usurps {} promotions {} betas {}",
            c.grants, c.handoffs, c.instant_acquires, c.parks, c.unparks, c.deflations, c.usurps, c.promotions, c.beta_nodes
        )?;
        for e in &self.failures {
            write!(f, "\n  {e}")?;
        }
        Ok(())
    }
}

struct Shared {
    monitors: Vec<Monitor>,
    guarded: Vec<AtomicU64>,
    first_hash: Vec<AtomicU64>,
    hash_breaks: AtomicU64,
}

impl Shared {
    /// Unsynchronized read-modify-write: loses updates without exclusion.
    fn bump(&self, m: usize) {
        let c = &self.guarded[m];
        c.store(c.load(Ordering::Relaxed) + 1, Ordering::Relaxed);
    }

    fn observe_hash(&self, m: usize, h: u64) {
        let first = &self.first_hash[m];
        match first.compare_exchange(0, h, Ordering::SeqCst, Ordering::SeqCst) {
            Ok(_) => {}
            Err(prev) if prev == h => {}
            Err(_) => {
                self.hash_breaks.fetch_add(1, Ordering::Relaxed);
            }
        }
        if h == 0 {
            self.hash_breaks.fetch_add(1, Ordering::Relaxed);
        }
    }
}

#[derive(Default)]
struct WorkerStats {
    expected: Vec<u64>,
    waits: u64,
    notified: u64,
    timed_out: u64,
    allocated: usize,
    active: usize,
}

enum Kind {
    Lock,
    Wait,
    Notify,
    Hash,
}

fn pick(rng: &mut SmallRng, mix: Mix) -> Kind {
    let total = mix.lock + mix.wait + mix.notify + mix.hash;
    let mut x = rng.gen_range(0..total);
    for (w, k) in [
        (mix.lock, Kind::Lock),
        (mix.wait, Kind::Wait),
        (mix.notify, Kind::Notify),
        (mix.hash, Kind::Hash),
    ] {
        if x < w {
            return k;
        }
        x -= w;
    }
    unreachable!()
}

/// Every op increments exactly one guarded counter once, so the counters
/// sum to `threads * iters`.
pub fn run_stress(cfg: &StressConfig) -> StressReport {
    assert!(cfg.threads > 0 && cfg.monitors > 0 && cfg.max_depth > 0);
    let rt = Runtime::new(cfg.runtime);
    let shared = Arc::new(Shared {
        monitors: (0..cfg.monitors).map(|_| Monitor::new()).collect(),
        guarded: (0..cfg.monitors).map(|_| AtomicU64::new(0)).collect(),
        first_hash: (0..cfg.monitors).map(|_| AtomicU64::new(0)).collect(),
        hash_breaks: AtomicU64::new(0),
    });
    let finished = Arc::new(AtomicBool::new(false));
    let start = Arc::new(Barrier::new(cfg.threads + 1));
    let t0 = Instant::now();
    let workers: Vec<_> = (0..cfg.threads)
        .map(|t| {
            let (rt, sh, cfg, start) = (rt.clone(), shared.clone(), cfg.clone(), start.clone());
            thread::spawn(move || {
                let ctx = rt.attach();
                let mut rng = SmallRng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(t as u64));
                let mut st = WorkerStats {
                    expected: vec![0; cfg.monitors],
                    ..WorkerStats::default()
                };
                let depth = cfg.max_depth.min(cfg.monitors);
                start.wait();
                for _ in 0..cfg.iters {
                    let m = rng.gen_range(0..cfg.monitors);
                    let mon = &sh.monitors[m];
                    match pick(&mut rng, cfg.mix) {
                        Kind::Lock => {
                            // ascending order avoids deadlock; release order is random
                            let d = rng.gen_range(1..=depth);
                            let mut set: Vec<usize> = (0..cfg.monitors).collect();
                            set.shuffle(&mut rng);
                            set.truncate(d);
                            set.sort_unstable();
                            for &x in &set {
                                ctx.lock(&sh.monitors[x]);
                                if rng.gen_ratio(1, 8) {
                                    ctx.lock(&sh.monitors[x]);
                                    ctx.unlock(&sh.monitors[x]).unwrap();
                                }
                            }
                            let inner = *set.last().unwrap();
                            sh.bump(inner);
                            st.expected[inner] += 1;
                            set.shuffle(&mut rng);
                            for &x in &set {
                                ctx.unlock(&sh.monitors[x]).unwrap();
                            }
                        }
                        Kind::Wait => {
                            ctx.lock(mon);
                            st.waits += 1;
                            match ctx.wait(mon, cfg.wait_timeout).unwrap() {
                                WaitResult::Notified => st.notified += 1,
                                WaitResult::TimedOut => st.timed_out += 1,
                                WaitResult::Interrupted => {}
                            }
                            sh.bump(m);
                            st.expected[m] += 1;
                            ctx.unlock(mon).unwrap();
                        }
                        Kind::Notify => {
                            ctx.lock(mon);
                            if rng.gen_ratio(1, 4) {
                                ctx.notify_all(mon).unwrap();
                            } else {
                                ctx.notify(mon).unwrap();
                            }
                            sh.bump(m);
                            st.expected[m] += 1;
                            ctx.unlock(mon).unwrap();
                        }
                        Kind::Hash => {
                            sh.observe_hash(m, ctx.hash_of(mon));
                            ctx.lock(mon);
                            sh.observe_hash(m, ctx.hash_of(mon));
                            sh.bump(m);
                            st.expected[m] += 1;
                            ctx.unlock(mon).unwrap();
                        }
                    }
                }
                let fp = ctx.footprint();
                st.allocated = fp.allocated;
                st.active = fp.active;
                st
            })
        })
        .collect();
    start.wait();

    // Untimed waiters need someone to wake them once the notifiers are done.
    let drainer = (cfg.mix.wait > 0).then(|| {
        let (rt, sh, finished) = (rt.clone(), shared.clone(), finished.clone());
        thread::spawn(move || {
            let ctx = rt.attach();
            while !finished.load(Ordering::SeqCst) {
                for mon in &sh.monitors {
                    ctx.lock(mon);
                    ctx.notify_all(mon).unwrap();
                    ctx.unlock(mon).unwrap();
                }
                thread::sleep(Duration::from_millis(1));
            }
            ctx.footprint().allocated
        })
    });

    let stats: Vec<WorkerStats> = workers.into_iter().map(|w| w.join().unwrap()).collect();
    finished.store(true, Ordering::SeqCst);
    let drainer_nodes = drainer.map(|d| d.join().unwrap());
    let elapsed = t0.elapsed();
    let mut report = check(cfg, &rt, &shared, &stats, drainer_nodes);
    report.elapsed = elapsed;
    report
}

fn check(
    cfg: &StressConfig,
    rt: &Runtime,
    sh: &Shared,
    stats: &[WorkerStats],
    drainer_nodes: Option<usize>,
) -> StressReport {
    let mut r = StressReport {
        counters: sh.guarded.iter().map(|c| c.load(Ordering::SeqCst)).collect(),
        expected: vec![0; cfg.monitors],
        counters_snapshot: rt.counters(),
        ..StressReport::default()
    };
    for s in stats {
        for (e, x) in r.expected.iter_mut().zip(&s.expected) {
            *e += x;
        }
        r.waits_entered += s.waits;
        r.waits_notified += s.notified;
        r.waits_timed_out += s.timed_out;
        r.max_allocated = r.max_allocated.max(s.allocated);
        if s.active != 0 {
            r.failures.push(format!("{} nodes still active after a worker finished", s.active));
        }
    }
    if r.counters != r.expected {
        r.failures.push("guarded counters lost updates".into());
    }
    let total: u64 = r.expected.iter().sum();
    if total != cfg.threads as u64 * cfg.iters {
        r.failures.push(format!("{total} guarded increments for {} ops", cfg.threads as u64 * cfg.iters));
    }
    if cfg.wait_timeout.is_none() && r.waits_entered != r.waits_notified {
        r.failures.push(format!(
            "{} untimed waits entered but {} returned notified",
            r.waits_entered, r.waits_notified
        ));
    }
    let breaks = sh.hash_breaks.load(Ordering::SeqCst);
    if breaks > 0 {
        r.failures.push(format!("{breaks} unstable hash observations"));
    }

    // Quiescent: every monitor deflated to its first observed hash.
    r.first_hashes = sh.first_hash.iter().map(|h| h.load(Ordering::SeqCst)).collect();
    for (i, mon) in sh.monitors.iter().enumerate() {
        let mark = decode(mon.mark());
        r.final_hashes.push(match mark {
            MarkVariant::Hashed(h) => Some(h),
            _ => None,
        });
        match mark {
            MarkVariant::Hashed(h) => {
                let first = r.first_hashes[i];
                if first != 0 && first != h {
                    r.failures.push(format!("monitor {i} deflated to hash {h:#x}, first seen {first:#x}"));
                }
            }
            MarkVariant::Neutral if r.expected[i] == 0 => {}
            other => r.failures.push(format!("monitor {i} not deflated: {other:?}")),
        }
        if let Err(e) = rt.audit(mon) {
            r.failures.push(format!("monitor {i}: {e}"));
        }
    }

    // Node footprint: K held plus one spare, plus one beta node when timed
    // waits can cancel.
    let k = cfg.max_depth.min(cfg.monitors);
    let cancels = cfg.wait_timeout.is_some() && cfg.mix.wait > 0;
    r.node_bound = k + 1 + usize::from(cancels);
    if r.max_allocated > r.node_bound {
        r.failures.push(format!(
            "a worker allocated {} nodes, bound {}",
            r.max_allocated, r.node_bound
        ));
    }
    if let Some(n) = drainer_nodes {
        if n > 2 {
            r.failures.push(format!("drainer allocated {n} nodes"));
        }
    }
    // Notified waiters re-enter through the notifier's swap, not their own.
    let c = &r.counters_snapshot;
    if c.handoffs != c.grants - c.instant_acquires + r.waits_notified {
        r.failures.push(format!(
            "handoffs {} != grants {} - instant acquires {} + notified waits {}",
            c.handoffs, c.grants, c.instant_acquires, r.waits_notified
        ));
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_parses() {
        let m: Mix = "lock:5,wait:1,notify:2,hash:1".parse().unwrap();
        assert_eq!(
            m,
            Mix {
                lock: 5,
                wait: 1,
                notify: 2,
                hash: 1
            }
        );
        assert!("lock:0".parse::<Mix>().is_err());
        assert!("spin:3".parse::<Mix>().is_err());
        assert!("lock".parse::<Mix>().is_err());
    }

    #[test]
    fn small_run_is_exact() {
        let r = run_stress(&StressConfig {
            threads: 3,
            monitors: 2,
            iters: 2_000,
            mix: "lock:6,wait:1,notify:2,hash:1".parse().unwrap(),
            max_depth: 2,
            ..StressConfig::default()
        });
        assert!(r.passed(), "{r}");
        assert_eq!(r.counters.iter().sum::<u64>(), 6_000);
    }
}
