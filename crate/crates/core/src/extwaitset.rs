//! Hashed external waitsets.
//!
//! Instead of riding along the chain, waiting nodes are parked in a shared
//! table of guarded buckets indexed by the monitor's identity hash. Buckets
//! may mix waiters of different monitors. Notify still morphs waiters onto
//! the chain; timeouts just self-remove under the guard and re-enter
//! through the ordinary lock path, so no placeholder and no second node
//! are ever needed.

use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::markword::{MarkWord, Monitor};
use crate::node::{node, NodeStatus, QueueNode, ThreadContext, WaitList};
use crate::platform::{spin_until, Counters};

pub(crate) struct WaitBucket {
    guard: AtomicBool,
    list: UnsafeCell<WaitList>,
}

// The list is only touched with the guard held.
unsafe impl Sync for WaitBucket {}
unsafe impl Send for WaitBucket {}

impl WaitBucket {
    fn new() -> Self {
        WaitBucket {
            guard: AtomicBool::new(false),
            list: UnsafeCell::new(WaitList::EMPTY),
        }
    }

    /// Runs `f` on the bucket's list with the guard held.
    pub(crate) fn with<R>(&self, counters: &Counters, f: impl FnOnce(&mut WaitList) -> R) -> R {
        spin_until(|| {
            (!self.guard.load(Ordering::Relaxed)
                && self
                    .guard
                    .compare_exchange_weak(false, true, Ordering::Acquire, Ordering::Relaxed)
                    .is_ok())
            .then_some(())
        });
        Counters::bump(&counters.guard_acquisitions);
        let r = f(unsafe { &mut *self.list.get() });
        self.guard.store(false, Ordering::Release);
        r
    }
}

pub(crate) struct WaitTable {
    buckets: Box<[WaitBucket]>,
}

impl WaitTable {
    pub(crate) fn new(buckets: usize) -> Self {
        assert!(buckets.is_power_of_two());
        WaitTable {
            buckets: (0..buckets).map(|_| WaitBucket::new()).collect(),
        }
    }

    pub(crate) fn bucket(&self, hash: u64) -> &WaitBucket {
        &self.buckets[self.bucket_index(hash)]
    }

    pub(crate) fn bucket_index(&self, hash: u64) -> usize {
        (hash as usize) & (self.buckets.len() - 1)
    }
}

/// Removes the waiters of `key` from `list`, first one only unless `all`.
fn detach(list: &mut WaitList, key: usize, all: bool) -> WaitList {
    let matching: Vec<*mut QueueNode> = list
        .iter()
        .filter(|&n| unsafe { node(n) }.monitor.load(Ordering::Relaxed) == key)
        .take(if all { usize::MAX } else { 1 })
        .collect();
    let mut out = WaitList::EMPTY;
    for n in matching {
        list.remove(n);
        out.push_back(n);
    }
    out
}

impl ThreadContext {
    fn hash_bucket_of(&self, owner: *mut QueueNode) -> u64 {
        let d = MarkWord::from_raw(unsafe { node(owner) }.dmw.load(Ordering::Relaxed));
        d.hash().expect("owned monitor is hashed")
    }

    /// Parks the owner's node `l` in its bucket, then gives up ownership
    /// through the plain unlock path.
    pub(crate) fn ext_wait_enqueue(&self, monitor: &Monitor, l: *mut QueueNode) {
        let h = self.hash_bucket_of(l);
        unsafe { node(l) }.status.store(NodeStatus::Waiting, Ordering::SeqCst);
        self.rt
            .waits()
            .bucket(h)
            .with(self.counters(), |list| list.push_back(l));
        self.release_ownership(monitor, l);
    }

    /// Takes the first (or every) waiter of `monitor` out of its bucket and
    /// morphs them onto the chain. Caller owns the monitor through `l`.
    pub(crate) fn ext_notify(&self, monitor: &Monitor, l: *mut QueueNode, all: bool) {
        let h = self.hash_bucket_of(l);
        let key = monitor.key();
        let moved = self
            .rt
            .waits()
            .bucket(h)
            .with(self.counters(), |list| detach(list, key, all));
        for w in moved.iter() {
            unsafe { node(w) }.status.store(NodeStatus::Entry, Ordering::SeqCst);
        }
        self.morph_list(monitor, moved);
    }

    /// Withdraws `l` from its bucket after a timeout or interrupt. `false`
    /// means a notifier got there first and `l` is on its way to the chain.
    pub(crate) fn ext_withdraw(&self, l: *mut QueueNode) -> bool {
        let h = self.hash_bucket_of(l);
        self.rt
            .waits()
            .bucket(h)
            .with(self.counters(), |list| list.remove(l))
    }

    /// Threads parked in the bucket for `monitor`, in wait order.
    pub(crate) fn ext_waiters(&self, monitor: &Monitor, l: *mut QueueNode) -> Vec<u64> {
        let h = self.hash_bucket_of(l);
        let key = monitor.key();
        self.rt.waits().bucket(h).with(self.counters(), |list| {
            list.iter()
                .map(|n| unsafe { node(n) })
                .filter(|n| n.monitor.load(Ordering::Relaxed) == key)
                .map(|n| n.home.id())
                .collect()
        })
    }
}
