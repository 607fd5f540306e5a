//! Structural checks of a monitor's chain and waitset.
//!
//! Only meaningful at quiescence: every thread that touches the monitor is
//! either running outside it or blocked inside `lock` or `wait`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::Ordering;

use thiserror::Error;

use crate::markword::{decode, MarkVariant, MarkWord, Monitor};
use crate::node::{node, NodeStatus, QueueNode};
use crate::platform::Counters;
use crate::runtime::{Runtime, WaitsetStrategy};

/// One node as seen by the auditor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeView {
    pub addr: usize,
    pub thread: u64,
    pub status: NodeStatus,
    pub dmw: u64,
    pub next: usize,
}

/// Consistent picture of one monitor.
#[derive(Clone, Debug)]
pub struct ChainSnapshot {
    pub mark: MarkVariant,
    /// Entry chain from head to tail. Empty unless the mark is queued.
    pub chain: Vec<NodeView>,
    /// Waiting threads in wait order, including a placeholder head.
    pub waiters: Vec<u64>,
    /// Threads that gave up on a wait and are re-acquiring.
    pub cancelled: Vec<u64>,
}

impl ChainSnapshot {
    /// Thread owning the monitor, `None` if unowned or held by a placeholder.
    pub fn owner(&self) -> Option<u64> {
        self.chain
            .first()
            .filter(|v| v.status == NodeStatus::Owner)
            .map(|v| v.thread)
    }

    /// Threads queued behind the head, in grant order.
    pub fn entry_queue(&self) -> Vec<u64> {
        self.chain.iter().skip(1).map(|v| v.thread).collect()
    }

    pub fn hash(&self) -> Option<u64> {
        match self.mark {
            MarkVariant::Hashed(h) => Some(h),
            MarkVariant::Queued(_) => self
                .chain
                .first()
                .and_then(|v| MarkWord::from_raw(v.dmw).hash()),
            MarkVariant::Neutral => None,
        }
    }
}

#[derive(Clone, Debug, Error)]
#[error("audit failed: {reason}\n{dump}")]
pub struct AuditError {
    pub reason: String,
    pub dump: String,
}

struct Raw {
    view: NodeView,
    wait_head: usize,
    wait_next: usize,
}

impl Runtime {
    /// Checks the chain and waitset invariants of `monitor`.
    pub fn audit(&self, monitor: &Monitor) -> Result<ChainSnapshot, AuditError> {
        let key = monitor.key();
        let word = monitor.mark();
        let nodes = self.nodes_of(key);
        let by_addr: HashMap<usize, &Raw> = nodes.iter().map(|r| (r.view.addr, r)).collect();
        let fail = |reason: String| AuditError {
            reason,
            dump: dump(word, &nodes),
        };
        let count = |pred: &dyn Fn(NodeStatus) -> bool| nodes.iter().filter(|r| pred(r.view.status)).count();
        let waiting: Vec<&Raw> = nodes
            .iter()
            .filter(|r| r.view.status == NodeStatus::Waiting)
            .collect();
        let cancelled: Vec<u64> = nodes
            .iter()
            .filter(|r| r.view.status == NodeStatus::Claimed)
            .map(|r| r.view.thread)
            .collect();

        let mark = decode(word);
        let chain = match mark {
            MarkVariant::Neutral | MarkVariant::Hashed(_) => {
                let live = count(&|s| {
                    matches!(
                        s,
                        NodeStatus::Owner | NodeStatus::Entry | NodeStatus::Placeholder | NodeStatus::Promoting
                    )
                });
                if live > 0 {
                    return Err(fail(format!("{live} chain nodes on an unlocked monitor")));
                }
                if self.strategy() == WaitsetStrategy::Chain && !waiting.is_empty() {
                    return Err(fail("waiters orphaned on an unlocked monitor".into()));
                }
                Vec::new()
            }
            MarkVariant::Queued(tail) => {
                if !by_addr.contains_key(&tail) {
                    return Err(fail(format!("tail {tail:#x} is not a node of this monitor")));
                }
                let on_chain: Vec<&Raw> = nodes
                    .iter()
                    .filter(|r| {
                        matches!(
                            r.view.status,
                            NodeStatus::Owner | NodeStatus::Entry | NodeStatus::Placeholder
                        )
                    })
                    .collect();
                let linked: HashSet<usize> = on_chain.iter().map(|r| r.view.next).collect();
                let heads: Vec<&&Raw> = on_chain
                    .iter()
                    .filter(|r| {
                        matches!(r.view.status, NodeStatus::Owner | NodeStatus::Placeholder)
                            && !linked.contains(&r.view.addr)
                    })
                    .collect();
                if heads.len() != 1 {
                    return Err(fail(format!("{} heads", heads.len())));
                }
                let mut chain = Vec::new();
                let mut cur = heads[0].view.addr;
                loop {
                    let r = by_addr
                        .get(&cur)
                        .ok_or_else(|| fail(format!("chain leaves the monitor at {cur:#x}")))?;
                    if !chain.is_empty() && r.view.status != NodeStatus::Entry {
                        return Err(fail(format!("interior node {cur:#x} is {:?}", r.view.status)));
                    }
                    if chain.len() > nodes.len() {
                        return Err(fail("chain cycle".into()));
                    }
                    chain.push(r.view.clone());
                    if cur == tail {
                        break;
                    }
                    cur = r.view.next;
                    if cur == 0 {
                        return Err(fail("chain ends before the tail".into()));
                    }
                }
                if chain.len() != on_chain.len() {
                    return Err(fail(format!(
                        "{} chain nodes but {} reachable",
                        on_chain.len(),
                        chain.len()
                    )));
                }
                let d = chain[0].dmw;
                if !MarkWord::from_raw(d).is_hashed() || chain.iter().any(|v| v.dmw != d) {
                    return Err(fail("displaced hash missing or not uniform".into()));
                }
                if chain.iter().skip(1).any(|v| by_addr[&v.addr].wait_head != 0) {
                    return Err(fail("waitset on a non-head node".into()));
                }
                chain
            }
        };

        let waiters = match self.strategy() {
            WaitsetStrategy::Chain => {
                let mut order = Vec::new();
                if let Some(head) = chain.first() {
                    let mut cur = by_addr[&head.addr].wait_head;
                    while cur != 0 {
                        let r = by_addr
                            .get(&cur)
                            .ok_or_else(|| fail(format!("waitset member {cur:#x} is foreign")))?;
                        match r.view.status {
                            NodeStatus::Waiting => order.push(r),
                            NodeStatus::Placeholder if cur == head.addr => order.push(r),
                            NodeStatus::Claimed => {}
                            s => return Err(fail(format!("waitset member {cur:#x} is {s:?}"))),
                        }
                        if order.len() > nodes.len() {
                            return Err(fail("waitset cycle".into()));
                        }
                        cur = r.wait_next;
                    }
                }
                let placeholders = count(&|s| s == NodeStatus::Placeholder);
                if order.len() != waiting.len() + placeholders {
                    return Err(fail(format!(
                        "{} waiting nodes but {} in the head's waitset",
                        waiting.len(),
                        order.len()
                    )));
                }
                order.iter().map(|r| r.view.thread).collect()
            }
            WaitsetStrategy::External => {
                if nodes.iter().any(|r| r.wait_head != 0) {
                    return Err(fail("node-held waitset under the external strategy".into()));
                }
                let in_bucket: Vec<u64> = match chain.first().map(|v| v.dmw).map(MarkWord::from_raw) {
                    Some(d) => self.bucket_waiters(key, d.hash()),
                    None => self.bucket_waiters(key, mark_hash(mark)),
                };
                if in_bucket.len() != waiting.len() {
                    return Err(fail(format!(
                        "{} waiting nodes but {} in the bucket",
                        waiting.len(),
                        in_bucket.len()
                    )));
                }
                in_bucket
            }
        };

        Ok(ChainSnapshot {
            mark,
            chain,
            waiters,
            cancelled,
        })
    }

    fn nodes_of(&self, key: usize) -> Vec<Raw> {
        let mut out = Vec::new();
        for h in self.threads() {
            let registry = h.nodes.lock().unwrap();
            for p in registry.iter() {
                let q: &QueueNode = unsafe { node(p.0) };
                if q.monitor.load(Ordering::SeqCst) != key {
                    continue;
                }
                out.push(Raw {
                    view: NodeView {
                        addr: p.0 as usize,
                        thread: h.id(),
                        status: q.status.load(Ordering::SeqCst),
                        dmw: q.dmw.load(Ordering::SeqCst),
                        next: q.next.load(Ordering::SeqCst) as usize,
                    },
                    wait_head: q.waitset_head.load(Ordering::SeqCst) as usize,
                    wait_next: q.wait_next.load(Ordering::SeqCst) as usize,
                });
            }
        }
        out
    }

    fn bucket_waiters(&self, key: usize, hash: Option<u64>) -> Vec<u64> {
        let Some(h) = hash else { return Vec::new() };
        let scratch = Counters::default();
        self.waits().bucket(h).with(&scratch, |list| {
            list.iter()
                .map(|n| unsafe { node(n) })
                .filter(|n| n.monitor.load(Ordering::SeqCst) == key)
                .map(|n| n.home.id())
                .collect()
        })
    }
}

fn mark_hash(m: MarkVariant) -> Option<u64> {
    match m {
        MarkVariant::Hashed(h) => Some(h),
        _ => None,
    }
}

fn dump(word: MarkWord, nodes: &[Raw]) -> String {
    let mut s = format!("mark = {word:?}\n");
    for r in nodes {
        let v = &r.view;
        s += &format!(
            "  {:#x} t{} {:?} dmw={:#x} next={:#x} ws={:#x} wn={:#x}\n",
            v.addr, v.thread, v.status, v.dmw, v.next, r.wait_head, r.wait_next
        );
    }
    s
}

impl fmt::Display for ChainSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} chain={:?} waiters={:?}",
            self.mark,
            self.chain.iter().map(|v| (v.thread, v.status)).collect::<Vec<_>>(),
            self.waiters
        )
    }
}
