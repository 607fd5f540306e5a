//! The two systems a scenario runs against: the real monitors and a
//! reference built from one mutex and a condition variable.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use cjm_core::{
    interrupt, BlockState, Config, IllegalMonitorState, Monitor, NodeId, Runtime, ThreadContext, ThreadHandle,
    WaitResult,
};

use crate::scenario::{MonitorId, ThreadId};

/// Backend-neutral audit result.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditView {
    pub owner: Option<ThreadId>,
    pub entry: Vec<ThreadId>,
    pub waiters: Vec<ThreadId>,
}

impl AuditView {
    pub fn is_idle(&self) -> bool {
        self.owner.is_none() && self.entry.is_empty() && self.waiters.is_empty()
    }
}

impl fmt::Display for AuditView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "owner={:?} entry={:?} waiters={:?}", self.owner, self.entry, self.waiters)
    }
}

pub trait Backend: Send + Sync {
    fn label(&self) -> &'static str;
    /// Binds the calling thread as scenario thread `tid`.
    fn actor(&self, tid: ThreadId) -> Box<dyn Actor>;
    /// `Running` for threads not yet bound.
    fn block_state(&self, tid: ThreadId) -> BlockState;
    fn interrupt(&self, tid: ThreadId);
    fn expire(&self, tid: ThreadId);
    fn audit(&self, m: MonitorId) -> Result<AuditView, String>;
}

/// Per-thread operations. `wait` also reports whether the monitor was
/// released and re-acquired.
pub trait Actor {
    fn lock(&mut self, m: MonitorId);
    fn unlock(&mut self, m: MonitorId) -> Result<(), IllegalMonitorState>;
    fn wait(&mut self, m: MonitorId, timeout: Option<Duration>) -> Result<(WaitResult, bool), IllegalMonitorState>;
    fn notify(&mut self, m: MonitorId, all: bool) -> Result<(), IllegalMonitorState>;
    fn hash(&mut self, m: MonitorId) -> u64;
    fn holds(&self, m: MonitorId) -> bool;
    fn waiters(&self, m: MonitorId) -> Result<Vec<ThreadId>, IllegalMonitorState>;
    /// Whether the node last used to own `m` is back on the free list.
    fn recycled(&self, m: MonitorId) -> bool;
    /// Nodes still active; nonzero after the program ends means a leak.
    fn leaked(&self) -> usize;
}

struct CjmShared {
    rt: Arc<Runtime>,
    monitors: Vec<Monitor>,
    handles: Mutex<Vec<Option<Arc<ThreadHandle>>>>,
}

impl CjmShared {
    fn tid_of(&self, id: u64) -> ThreadId {
        self.handles
            .lock()
            .unwrap()
            .iter()
            .position(|h| h.as_ref().is_some_and(|h| h.id() == id))
            .expect("thread not bound to the scenario")
    }

    fn handle(&self, tid: ThreadId) -> Option<Arc<ThreadHandle>> {
        self.handles.lock().unwrap()[tid].clone()
    }
}

pub struct CjmBackend(Arc<CjmShared>);

impl CjmBackend {
    pub fn new(config: Config, monitors: usize, threads: usize) -> Self {
        CjmBackend(Arc::new(CjmShared {
            rt: Runtime::new(config),
            monitors: (0..monitors).map(|_| Monitor::new()).collect(),
            handles: Mutex::new(vec![None; threads]),
        }))
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.0.rt
    }

    pub fn monitor(&self, m: MonitorId) -> &Monitor {
        &self.0.monitors[m]
    }
}

impl Backend for CjmBackend {
    fn label(&self) -> &'static str {
        "cjm"
    }

    fn actor(&self, tid: ThreadId) -> Box<dyn Actor> {
        let ctx = self.0.rt.attach();
        self.0.handles.lock().unwrap()[tid] = Some(ctx.handle().clone());
        Box::new(CjmActor {
            shared: self.0.clone(),
            ctx,
            last_node: HashMap::new(),
        })
    }

    fn block_state(&self, tid: ThreadId) -> BlockState {
        self.0.handle(tid).map_or(BlockState::Running, |h| h.block_state())
    }

    fn interrupt(&self, tid: ThreadId) {
        if let Some(h) = self.0.handle(tid) {
            interrupt(&h);
        }
    }

    fn expire(&self, tid: ThreadId) {
        if let Some(h) = self.0.handle(tid) {
            h.expire_wait();
        }
    }

    fn audit(&self, m: MonitorId) -> Result<AuditView, String> {
        let snap = self.0.rt.audit(&self.0.monitors[m]).map_err(|e| e.to_string())?;
        let map = |ids: Vec<u64>| ids.into_iter().map(|id| self.0.tid_of(id)).collect();
        Ok(AuditView {
            owner: snap.owner().map(|id| self.0.tid_of(id)),
            entry: map(snap.entry_queue()),
            waiters: map(snap.waiters.clone()),
        })
    }
}

struct CjmActor {
    shared: Arc<CjmShared>,
    ctx: ThreadContext,
    last_node: HashMap<MonitorId, NodeId>,
}

impl CjmActor {
    fn mon(&self, m: MonitorId) -> &Monitor {
        &self.shared.monitors[m]
    }

    fn note_node(&mut self, m: MonitorId) {
        if let Some(id) = self.ctx.node_for(self.mon(m)) {
            self.last_node.insert(m, id);
        }
    }
}

impl Actor for CjmActor {
    fn lock(&mut self, m: MonitorId) {
        self.ctx.lock(&self.shared.monitors[m]);
        self.note_node(m);
    }

    fn unlock(&mut self, m: MonitorId) -> Result<(), IllegalMonitorState> {
        self.ctx.unlock(&self.shared.monitors[m])
    }

    fn wait(&mut self, m: MonitorId, timeout: Option<Duration>) -> Result<(WaitResult, bool), IllegalMonitorState> {
        let pending = self.ctx.handle().interrupt_pending();
        let r = self.ctx.wait(&self.shared.monitors[m], timeout)?;
        self.note_node(m);
        Ok((r, !(pending && r == WaitResult::Interrupted)))
    }

    fn notify(&mut self, m: MonitorId, all: bool) -> Result<(), IllegalMonitorState> {
        if all {
            self.ctx.notify_all(self.mon(m))
        } else {
            self.ctx.notify(self.mon(m))
        }
    }

    fn hash(&mut self, m: MonitorId) -> u64 {
        self.ctx.hash_of(self.mon(m))
    }

    fn holds(&self, m: MonitorId) -> bool {
        self.ctx.holds_lock(self.mon(m))
    }

    fn waiters(&self, m: MonitorId) -> Result<Vec<ThreadId>, IllegalMonitorState> {
        let ids = self.ctx.waiters(self.mon(m))?;
        Ok(ids.into_iter().map(|id| self.shared.tid_of(id)).collect())
    }

    fn recycled(&self, m: MonitorId) -> bool {
        self.last_node.get(&m).is_some_and(|&id| self.ctx.is_free(id))
    }

    fn leaked(&self) -> usize {
        self.ctx.footprint().active
    }
}

#[derive(Default)]
struct OracleMonitor {
    owner: Option<ThreadId>,
    depth: u32,
    entry: VecDeque<ThreadId>,
    waitset: VecDeque<ThreadId>,
    hash: Option<u64>,
}

struct OracleThread {
    block: BlockState,
    interrupted: bool,
    expired: bool,
    notified: bool,
}

struct OracleState {
    monitors: Vec<OracleMonitor>,
    threads: Vec<OracleThread>,
    next_hash: u64,
}

impl OracleState {
    /// Gives the monitor to the next entrant in FIFO order, or frees it.
    fn release(&mut self, m: MonitorId) {
        let mon = &mut self.monitors[m];
        mon.owner = mon.entry.pop_front();
        mon.depth = 0;
        if let Some(s) = mon.owner {
            self.threads[s].block = BlockState::Running;
        }
    }

    /// Takes the monitor if free, else queues behind the entrants.
    fn enter(&mut self, t: ThreadId, m: MonitorId) -> bool {
        let mon = &mut self.monitors[m];
        if mon.owner.is_none() && mon.entry.is_empty() {
            mon.owner = Some(t);
            true
        } else {
            mon.entry.push_back(t);
            self.threads[t].block = BlockState::Lock;
            false
        }
    }

    fn check_owner(&self, t: ThreadId, m: MonitorId) -> Result<(), IllegalMonitorState> {
        (self.monitors[m].owner == Some(t)).then_some(()).ok_or(IllegalMonitorState)
    }
}

struct OracleShared {
    state: Mutex<OracleState>,
    cv: Condvar,
}

impl OracleShared {
    fn lock(&self) -> MutexGuard<'_, OracleState> {
        self.state.lock().unwrap()
    }

    fn await_owner<'a>(&self, mut g: MutexGuard<'a, OracleState>, t: ThreadId, m: MonitorId) -> MutexGuard<'a, OracleState> {
        while g.monitors[m].owner != Some(t) {
            g = self.cv.wait(g).unwrap();
        }
        g.threads[t].block = BlockState::Running;
        g
    }
}

/// One coarse mutex, FIFO entry queues, FIFO waitsets.
pub struct OracleBackend(Arc<OracleShared>);

impl OracleBackend {
    pub fn new(monitors: usize, threads: usize) -> Self {
        OracleBackend(Arc::new(OracleShared {
            state: Mutex::new(OracleState {
                monitors: (0..monitors).map(|_| OracleMonitor::default()).collect(),
                threads: (0..threads)
                    .map(|_| OracleThread {
                        block: BlockState::Running,
                        interrupted: false,
                        expired: false,
                        notified: false,
                    })
                    .collect(),
                next_hash: 1,
            }),
            cv: Condvar::new(),
        }))
    }
}

impl Backend for OracleBackend {
    fn label(&self) -> &'static str {
        "oracle"
    }

    fn actor(&self, tid: ThreadId) -> Box<dyn Actor> {
        Box::new(OracleActor {
            shared: self.0.clone(),
            tid,
        })
    }

    fn block_state(&self, tid: ThreadId) -> BlockState {
        self.0.lock().threads[tid].block
    }

    fn interrupt(&self, tid: ThreadId) {
        let mut g = self.0.lock();
        let th = &mut g.threads[tid];
        th.interrupted = true;
        if th.block == BlockState::Wait {
            th.block = BlockState::Running;
        }
        self.0.cv.notify_all();
    }

    fn expire(&self, tid: ThreadId) {
        self.0.lock().threads[tid].expired = true;
        self.0.cv.notify_all();
    }

    fn audit(&self, m: MonitorId) -> Result<AuditView, String> {
        let g = self.0.lock();
        let mon = &g.monitors[m];
        Ok(AuditView {
            owner: mon.owner,
            entry: mon.entry.iter().copied().collect(),
            waiters: mon.waitset.iter().copied().collect(),
        })
    }
}

struct OracleActor {
    shared: Arc<OracleShared>,
    tid: ThreadId,
}

impl Actor for OracleActor {
    fn lock(&mut self, m: MonitorId) {
        let t = self.tid;
        let mut g = self.shared.lock();
        if g.monitors[m].owner == Some(t) {
            g.monitors[m].depth += 1;
            return;
        }
        if !g.enter(t, m) {
            drop(self.shared.await_owner(g, t, m));
        }
    }

    fn unlock(&mut self, m: MonitorId) -> Result<(), IllegalMonitorState> {
        let mut g = self.shared.lock();
        g.check_owner(self.tid, m)?;
        if g.monitors[m].depth > 0 {
            g.monitors[m].depth -= 1;
        } else {
            g.release(m);
            self.shared.cv.notify_all();
        }
        Ok(())
    }

    fn wait(&mut self, m: MonitorId, timeout: Option<Duration>) -> Result<(WaitResult, bool), IllegalMonitorState> {
        let t = self.tid;
        let mut g = self.shared.lock();
        g.check_owner(t, m)?;
        if std::mem::take(&mut g.threads[t].interrupted) {
            return Ok((WaitResult::Interrupted, false));
        }
        let deadline = timeout.map(|d| Instant::now() + d);
        let depth = g.monitors[m].depth;
        g.monitors[m].waitset.push_back(t);
        g.threads[t].notified = false;
        g.threads[t].expired = false;
        g.release(m);
        g.threads[t].block = BlockState::Wait;
        self.shared.cv.notify_all();

        let result = loop {
            let th = &g.threads[t];
            if th.notified {
                break WaitResult::Notified;
            }
            let cancel = if th.interrupted {
                Some(WaitResult::Interrupted)
            } else if th.expired || deadline.is_some_and(|d| Instant::now() >= d) {
                Some(WaitResult::TimedOut)
            } else {
                None
            };
            if let Some(r) = cancel {
                g.threads[t].block = BlockState::Running;
                g.monitors[m].waitset.retain(|&w| w != t);
                g.enter(t, m);
                break r;
            }
            g = match deadline {
                None => self.shared.cv.wait(g).unwrap(),
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    self.shared.cv.wait_timeout(g, left).unwrap().0
                }
            };
        };
        let mut g = self.shared.await_owner(g, t, m);
        g.monitors[m].depth = depth;
        if result == WaitResult::Interrupted {
            g.threads[t].interrupted = false;
        }
        Ok((result, true))
    }

    fn notify(&mut self, m: MonitorId, all: bool) -> Result<(), IllegalMonitorState> {
        let mut g = self.shared.lock();
        g.check_owner(self.tid, m)?;
        let n = if all { g.monitors[m].waitset.len() } else { 1 };
        for _ in 0..n {
            let Some(w) = g.monitors[m].waitset.pop_front() else { break };
            g.monitors[m].entry.push_back(w);
            let th = &mut g.threads[w];
            th.notified = true;
            if th.block == BlockState::Wait {
                th.block = BlockState::Lock;
            }
        }
        Ok(())
    }

    fn hash(&mut self, m: MonitorId) -> u64 {
        let mut g = self.shared.lock();
        if let Some(h) = g.monitors[m].hash {
            return h;
        }
        let h = g.next_hash;
        g.next_hash += 1;
        g.monitors[m].hash = Some(h);
        h
    }

    fn holds(&self, m: MonitorId) -> bool {
        self.shared.lock().monitors[m].owner == Some(self.tid)
    }

    fn waiters(&self, m: MonitorId) -> Result<Vec<ThreadId>, IllegalMonitorState> {
        let g = self.shared.lock();
        g.check_owner(self.tid, m)?;
        Ok(g.monitors[m].waitset.iter().copied().collect())
    }

    fn recycled(&self, _m: MonitorId) -> bool {
        true
    }

    fn leaked(&self) -> usize {
        0
    }
}

/// Distinct hash values seen per monitor, for stability checks.
#[derive(Default)]
pub struct HashLedger(Mutex<HashMap<MonitorId, u64>>);

impl HashLedger {
    /// Records `h`; false if a different value was seen before.
    pub fn observe(&self, m: MonitorId, h: u64) -> bool {
        *self.0.lock().unwrap().entry(m).or_insert(h) == h && h != 0
    }
}

