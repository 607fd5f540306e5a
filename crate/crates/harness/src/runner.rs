//! Executes scenarios against both backends and compares the outcomes.
//!
//! Real threads run the programs. A conductor releases `sync` phases one at
//! a time, and only once every thread has settled: finished, parked at an
//! unreleased sync, or blocked inside `lock` or `wait`. A thread blocked
//! right before its next sync counts as arrived at it.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use cjm_core::{BlockState, Config, SpinPolicy, WaitResult, WaitsetStrategy};

use crate::backend::{Backend, CjmBackend, HashLedger, OracleBackend};
use crate::scenario::{Action, AuditExpect, PhaseId, Scenario, Step, ThreadId};

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub strategy: WaitsetStrategy,
    pub spin: Option<u32>,
    /// How long a phase may take to settle before the run is declared stuck.
    pub settle_timeout: Duration,
    /// Try every release order allowed by the scenario's `permute` line.
    pub explore: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            strategy: WaitsetStrategy::Chain,
            spin: None,
            settle_timeout: Duration::from_secs(10),
            explore: true,
        }
    }
}

impl RunOptions {
    pub fn config(&self) -> Config {
        let mut c = Config::default().with_strategy(self.strategy);
        if let Some(n) = self.spin {
            c = c.with_spin(SpinPolicy {
                spin_budget: n,
                ..c.spin
            });
        }
        c
    }
}

/// What one backend did.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub traces: Vec<Vec<String>>,
    /// Threads in the order they were granted each monitor.
    pub grants: Vec<Vec<ThreadId>>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ScenarioReport {
    pub name: String,
    pub strategy: WaitsetStrategy,
    pub order: Vec<String>,
    pub cjm: Outcome,
    pub oracle: Outcome,
    pub diffs: Vec<String>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.diffs.is_empty() && self.cjm.failures.is_empty() && self.oracle.failures.is_empty()
    }

    pub fn problems(&self) -> Vec<String> {
        let tag = |who: &str, v: &[String]| v.iter().map(|f| format!("{who}: {f}")).collect::<Vec<_>>();
        let mut out = tag("cjm", &self.cjm.failures);
        out.extend(tag("oracle", &self.oracle.failures));
        out.extend(tag("diff", &self.diffs));
        out
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} [{}] order={}", self.name, self.strategy, self.order.join(","))?;
        for p in self.problems() {
            write!(f, "\n  {p}")?;
        }
        Ok(())
    }
}

/// Runs `sc` under every release order it asks to explore (or just its
/// base order) and compares the real monitors against the oracle.
pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> Vec<ScenarioReport> {
    let orders = if opts.explore {
        sc.release_orders()
    } else {
        vec![sc.order.clone()]
    };
    orders
        .into_iter()
        .map(|order| {
            let base = order == sc.order;
            let cjm = CjmBackend::new(opts.config(), sc.monitors.len(), sc.threads.len());
            let oracle = OracleBackend::new(sc.monitors.len(), sc.threads.len());
            let mut c = execute(sc, Arc::new(cjm), &order, opts.settle_timeout);
            let mut o = execute(sc, Arc::new(oracle), &order, opts.settle_timeout);
            if base {
                for (m, want) in &sc.expect_grants {
                    for out in [&mut c, &mut o] {
                        if &out.grants[*m] != want {
                            out.failures.push(format!(
                                "grants of {}: {} expected {}",
                                sc.monitors[*m],
                                names(sc, &out.grants[*m]),
                                names(sc, want)
                            ));
                        }
                    }
                }
            }
            let diffs = compare(sc, &c, &o);
            ScenarioReport {
                name: sc.name.clone(),
                strategy: opts.strategy,
                order: order.iter().map(|&p| sc.phases[p].clone()).collect(),
                cjm: c,
                oracle: o,
                diffs,
            }
        })
        .collect()
}

fn compare(sc: &Scenario, c: &Outcome, o: &Outcome) -> Vec<String> {
    let mut diffs = Vec::new();
    for (t, (a, b)) in c.traces.iter().zip(&o.traces).enumerate() {
        if a != b {
            diffs.push(format!("{} trace: cjm {:?} vs oracle {:?}", sc.threads[t], a, b));
        }
    }
    for (m, (a, b)) in c.grants.iter().zip(&o.grants).enumerate() {
        if a != b {
            diffs.push(format!(
                "grants of {}: cjm {} vs oracle {}",
                sc.monitors[m],
                names(sc, a),
                names(sc, b)
            ));
        }
    }
    diffs
}

fn names(sc: &Scenario, ts: &[ThreadId]) -> String {
    let v: Vec<&str> = ts.iter().map(|&t| sc.threads[t].as_str()).collect();
    format!("[{}]", v.join(" "))
}

#[derive(Clone, Default)]
struct Slot {
    bound: bool,
    done: bool,
    step: usize,
    at_sync: Option<PhaseId>,
    deadline: Option<Instant>,
    expired: bool,
}

struct Conductor {
    slots: Mutex<Vec<Slot>>,
    released: Mutex<usize>,
    cv: Condvar,
    rank: HashMap<PhaseId, usize>,
}

impl Conductor {
    fn slot<R>(&self, t: ThreadId, f: impl FnOnce(&mut Slot) -> R) -> R {
        f(&mut self.slots.lock().unwrap()[t])
    }

    fn released(&self, p: PhaseId) -> bool {
        *self.released.lock().unwrap() > self.rank[&p]
    }
}

struct Shared {
    sc: Scenario,
    backend: Arc<dyn Backend>,
    cond: Conductor,
    grants: Mutex<Vec<Vec<ThreadId>>>,
    hashes: HashLedger,
    results: Mutex<Vec<(Vec<String>, Vec<String>)>>,
    timeout: Duration,
}

/// Runs the scenario once on `backend`, releasing phases in `order`.
fn execute(sc: &Scenario, backend: Arc<dyn Backend>, order: &[PhaseId], timeout: Duration) -> Outcome {
    let n = sc.threads.len();
    let shared = Arc::new(Shared {
        sc: sc.clone(),
        backend: backend.clone(),
        cond: Conductor {
            slots: Mutex::new(vec![Slot::default(); n]),
            released: Mutex::new(0),
            cv: Condvar::new(),
            rank: order.iter().enumerate().map(|(i, &p)| (p, i)).collect(),
        },
        grants: Mutex::new(vec![Vec::new(); sc.monitors.len()]),
        hashes: HashLedger::default(),
        results: Mutex::new(vec![(Vec::new(), Vec::new()); n]),
        timeout,
    });
    let workers: Vec<_> = (0..n)
        .map(|t| {
            let sh = shared.clone();
            thread::Builder::new()
                .name(sc.threads[t].clone())
                .spawn(move || worker(&sh, t))
                .unwrap()
        })
        .collect();

    let mut failures = Vec::new();
    if let Err(e) = conduct(&shared, order) {
        failures.push(e);
        // Blocked workers cannot be cancelled; they are left behind.
    } else {
        for w in workers {
            if w.join().is_err() {
                failures.push("worker panicked".into());
            }
        }
        for m in 0..sc.monitors.len() {
            match backend.audit(m) {
                Ok(v) if v.is_idle() => {}
                Ok(v) => failures.push(format!("{} not idle at the end: {v}", sc.monitors[m])),
                Err(e) => failures.push(e),
            }
        }
    }
    let results = std::mem::take(&mut *shared.results.lock().unwrap());
    let mut traces = Vec::new();
    for (t, (trace, fails)) in results.into_iter().enumerate() {
        failures.extend(fails.into_iter().map(|f| format!("{}: {f}", sc.threads[t])));
        traces.push(trace);
    }
    let grants = shared.grants.lock().unwrap().clone();
    Outcome {
        traces,
        grants,
        failures,
    }
}

fn conduct(sh: &Shared, order: &[PhaseId]) -> Result<(), String> {
    let n = sh.sc.threads.len();
    let start = Instant::now();
    wait_for(sh, start, "threads to start", || {
        sh.cond.slots.lock().unwrap().iter().all(|s| s.bound)
    })?;
    for (k, &p) in order.iter().enumerate() {
        let participants = sh.sc.participants(p);
        let start = Instant::now();
        wait_for(sh, start, &format!("phase {}", sh.sc.phases[p]), || {
            let slots = sh.cond.slots.lock().unwrap().clone();
            (0..n).all(|t| settled(sh, &slots[t], t))
                && participants.iter().all(|&t| arrived(sh, &slots[t], t, p))
        })?;
        *sh.cond.released.lock().unwrap() = k + 1;
        sh.cond.cv.notify_all();
    }
    let start = Instant::now();
    wait_for(sh, start, "threads to finish", || {
        sh.cond.slots.lock().unwrap().iter().all(|s| s.done)
    })
}

fn wait_for(sh: &Shared, start: Instant, what: &str, mut cond: impl FnMut() -> bool) -> Result<(), String> {
    while !cond() {
        if start.elapsed() > sh.timeout {
            let slots = sh.cond.slots.lock().unwrap().clone();
            let states: Vec<String> = slots
                .iter()
                .enumerate()
                .map(|(t, s)| {
                    format!(
                        "{}@{}{} {:?}",
                        sh.sc.threads[t],
                        s.step,
                        if s.done { " done" } else { "" },
                        sh.backend.block_state(t)
                    )
                })
                .collect();
            return Err(format!("stuck waiting for {what}: {}", states.join(", ")));
        }
        thread::sleep(Duration::from_micros(100));
    }
    Ok(())
}

fn settled(sh: &Shared, s: &Slot, t: ThreadId) -> bool {
    if s.done {
        return true;
    }
    if let Some(q) = s.at_sync {
        return !sh.cond.released(q);
    }
    match sh.backend.block_state(t) {
        BlockState::Running => false,
        BlockState::Lock => true,
        BlockState::Wait => !(s.expired || s.deadline.is_some_and(|d| Instant::now() >= d)),
    }
}

fn arrived(sh: &Shared, s: &Slot, t: ThreadId, p: PhaseId) -> bool {
    if s.at_sync == Some(p) {
        return true;
    }
    if s.done || s.at_sync.is_some() {
        return false;
    }
    // blocked right before `sync p`
    sh.sc.programs[t].get(s.step + 1).map(|a| &a.step) == Some(&Step::Sync(p))
}

fn result_name(r: WaitResult) -> &'static str {
    match r {
        WaitResult::Notified => "notified",
        WaitResult::TimedOut => "timedout",
        WaitResult::Interrupted => "interrupted",
    }
}

fn worker(sh: &Shared, t: ThreadId) {
    let sc = &sh.sc;
    let mut actor = sh.backend.actor(t);
    sh.cond.slot(t, |s| s.bound = true);
    let mut trace = Vec::new();
    let mut fails = Vec::new();
    let mut last_wait: Option<WaitResult> = None;
    let mname = |m: usize| sc.monitors[m].as_str();
    let grant = |m: usize| sh.grants.lock().unwrap()[m].push(t);
    let imsx = |r: Result<(), cjm_core::IllegalMonitorState>| if r.is_ok() { "ok" } else { "imsx" };

    for (i, Action { step, expect, line }) in sc.programs[t].iter().enumerate() {
        sh.cond.slot(t, |s| s.step = i);
        let outcome: Option<(String, String)> = match *step {
            Step::Lock(m) => {
                let fresh = !actor.holds(m);
                actor.lock(m);
                if fresh {
                    grant(m);
                }
                None
            }
            Step::Unlock(m) => Some((format!("unlock {}", mname(m)), imsx(actor.unlock(m)).into())),
            Step::Wait(m, timeout) => {
                sh.cond.slot(t, |s| {
                    s.deadline = timeout.map(|d| Instant::now() + d);
                });
                let r = actor.wait(m, timeout);
                sh.cond.slot(t, |s| {
                    s.deadline = None;
                    s.expired = false;
                });
                let out = match r {
                    Ok((r, reacquired)) => {
                        if reacquired {
                            grant(m);
                        }
                        last_wait = Some(r);
                        result_name(r)
                    }
                    Err(_) => "imsx",
                };
                Some((format!("wait {}", mname(m)), out.into()))
            }
            Step::Notify(m) => Some((format!("notify {}", mname(m)), imsx(actor.notify(m, false)).into())),
            Step::NotifyAll(m) => Some((format!("notifyall {}", mname(m)), imsx(actor.notify(m, true)).into())),
            Step::Hash(m) => {
                let ok = sh.hashes.observe(m, actor.hash(m));
                Some((format!("hash {}", mname(m)), if ok { "stable" } else { "changed" }.into()))
            }
            Step::Interrupt(x) => {
                sh.backend.interrupt(x);
                None
            }
            Step::Expire(x) => {
                sh.cond.slot(x, |s| s.expired = true);
                sh.backend.expire(x);
                None
            }
            Step::Sync(p) => {
                let mut released = sh.cond.released.lock().unwrap();
                sh.cond.slot(t, |s| s.at_sync = Some(p));
                while *released <= sh.cond.rank[&p] {
                    released = sh.cond.cv.wait(released).unwrap();
                }
                drop(released);
                sh.cond.slot(t, |s| s.at_sync = None);
                None
            }
            Step::Sleep(d) => {
                thread::sleep(d);
                None
            }
            Step::Owned(m, want) => {
                let have = actor.holds(m);
                if have != want {
                    fails.push(format!("line {line}: owned {} is {have}", mname(m)));
                }
                Some((format!("owned {}", mname(m)), if have { "yes" } else { "no" }.into()))
            }
            Step::Result(want) => {
                if last_wait != Some(want) {
                    fails.push(format!("line {line}: last wait {last_wait:?}, expected {want:?}"));
                }
                None
            }
            Step::Waiters(m, ref want) => {
                let out = match actor.waiters(m) {
                    Ok(ws) => {
                        if want.as_ref().is_some_and(|w| w != &ws) {
                            fails.push(format!("line {line}: waiters {} expected {}", names(sc, &ws), names(sc, want.as_ref().unwrap())));
                        }
                        names(sc, &ws)
                    }
                    Err(_) => "imsx".into(),
                };
                Some((format!("waiters {}", mname(m)), out))
            }
            Step::Recycled(m) => {
                let ok = actor.recycled(m);
                if !ok {
                    fails.push(format!("line {line}: node for {} not on the free list", mname(m)));
                }
                None
            }
            Step::Audit(m, ref want) => {
                let out = match sh.backend.audit(m) {
                    Ok(v) => {
                        check_audit(sc, &v, want, *line, &mut fails);
                        format!(
                            "owner={} entry={} waiters={}",
                            v.owner.map_or("-", |o| sc.threads[o].as_str()),
                            names(sc, &v.entry),
                            names(sc, &v.waiters)
                        )
                    }
                    Err(e) => {
                        fails.push(format!("line {line}: {e}"));
                        "error".into()
                    }
                };
                Some((format!("audit {}", mname(m)), out))
            }
        };
        if let Some((what, got)) = outcome {
            if let Some(want) = expect {
                if want != &got {
                    fails.push(format!("line {line}: {what} gave {got}, expected {want}"));
                }
            }
            trace.push(format!("{what}: {got}"));
        }
    }
    let leaked = actor.leaked();
    if leaked > 0 {
        fails.push(format!("{leaked} nodes still active at exit"));
    }
    sh.results.lock().unwrap()[t] = (trace, fails);
    drop(actor);
    sh.cond.slot(t, |s| s.done = true);
}

fn check_audit(sc: &Scenario, v: &crate::backend::AuditView, want: &AuditExpect, line: usize, fails: &mut Vec<String>) {
    if want.owner.is_some_and(|o| o != v.owner) {
        fails.push(format!("line {line}: owner {:?} expected {:?}", v.owner, want.owner.unwrap()));
    }
    if want.entry.as_ref().is_some_and(|e| e != &v.entry) {
        fails.push(format!("line {line}: entry {} expected {}", names(sc, &v.entry), names(sc, want.entry.as_ref().unwrap())));
    }
    if want.waiters.as_ref().is_some_and(|w| w != &v.waiters) {
        fails.push(format!(
            "line {line}: waiters {} expected {}",
            names(sc, &v.waiters),
            names(sc, want.waiters.as_ref().unwrap())
        ));
    }
}
