//! Thread handles, parking and the spin-then-park waiting policy.
//!
//! This is the only module that talks to the host scheduler. Parking uses
//! the standard library's per-thread token, which already has the binary
//! permit semantics the handoff races need: an `unpark` that lands before
//! the matching `park` is not lost.

use std::hint;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::Mutex;
use std::thread::{self, Thread};
use std::time::Instant;

use crate::node::QueueNode;

/// Bounded busy-wait before parking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpinPolicy {
    pub spin_budget: u32,
    pub pause_hint: bool,
}

impl SpinPolicy {
    pub const DEFAULT_BUDGET: u32 = 1024;

    /// Spin budget of 1024 with pause hints. On a single-CPU host the budget
    /// drops to 0: the thread being waited for cannot run while we spin.
    pub fn host_default() -> Self {
        let cpus = thread::available_parallelism().map_or(1, |n| n.get());
        SpinPolicy {
            spin_budget: if cpus > 1 { Self::DEFAULT_BUDGET } else { 0 },
            pause_hint: true,
        }
    }

    /// Park immediately, never spin.
    pub const fn park_only() -> Self {
        SpinPolicy {
            spin_budget: 0,
            pause_hint: false,
        }
    }
}

impl Default for SpinPolicy {
    fn default() -> Self {
        SpinPolicy::host_default()
    }
}

/// What a blocked thread is blocked on, as seen from other threads.
///
/// The library publishes this so schedulers and test drivers can tell a
/// thread that is durably blocked from one that is merely slow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockState {
    Running,
    /// Linked behind a predecessor, waiting for ownership.
    Lock,
    /// Inside `wait`, ownership released.
    Wait,
}

const RUNNING: u8 = 0;
const LOCK_BLOCKED: u8 = 1;
const WAIT_BLOCKED: u8 = 2;

/// Why a `spin_then_wait` returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wake {
    Granted,
    TimedOut,
    Interrupted,
}

/// Result of a single park.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParkOutcome {
    /// Unparked, or woke spuriously. The caller re-checks its condition.
    Woken,
    TimedOut,
}

macro_rules! counters {
    ($($(#[$doc:meta])* $field:ident),* $(,)?) => {
        /// Per-thread instrumentation. Relaxed increments, summed at quiescence.
        #[derive(Default, Debug)]
        pub struct Counters {
            $($(#[$doc])* pub $field: AtomicU64,)*
        }

        /// Plain copy of [`Counters`].
        #[derive(Clone, Copy, Default, Debug, PartialEq, Eq)]
        pub struct CounterSnapshot {
            $($(#[$doc])* pub $field: u64,)*
        }

        impl Counters {
            pub fn snapshot(&self) -> CounterSnapshot {
                CounterSnapshot {
                    $($field: self.$field.load(Ordering::Relaxed),)*
                }
            }
        }

        impl std::ops::Add for CounterSnapshot {
            type Output = CounterSnapshot;
            fn add(self, o: CounterSnapshot) -> CounterSnapshot {
                CounterSnapshot { $($field: self.$field + o.$field,)* }
            }
        }

        impl std::ops::Sub for CounterSnapshot {
            type Output = CounterSnapshot;
            fn sub(self, o: CounterSnapshot) -> CounterSnapshot {
                CounterSnapshot { $($field: self.$field - o.$field,)* }
            }
        }

        impl CounterSnapshot {
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn values(&self) -> Vec<u64> {
                vec![$(self.$field),*]
            }
        }
    };
}

counters! {
    parks,
    unparks,
    /// Swaps on a mark word (arrivals and wait morphing).
    tail_swaps,
    /// Fresh node allocations (free list empty).
    allocations,
    /// Non-recursive ownership acquisitions, including re-acquisition after `wait`.
    grants,
    /// Acquisitions that did not go through a handoff.
    instant_acquires,
    /// Ownership passed to a successor.
    handoffs,
    usurps,
    deflations,
    promotions,
    beta_nodes,
    notifies,
    /// Bucket guard acquisitions (external waitset strategy).
    guard_acquisitions,
}

impl Counters {
    #[inline]
    pub(crate) fn bump(field: &AtomicU64) {
        field.fetch_add(1, Ordering::Relaxed);
    }
}

/// The cross-thread face of a registered thread.
#[derive(Debug)]
pub struct ThreadHandle {
    id: u64,
    thread: Thread,
    interrupt_pending: AtomicBool,
    expired: AtomicBool,
    block: AtomicU8,
    pub counters: Counters,
    /// Every node this thread ever allocated and has not yet freed. Read by audits.
    pub(crate) nodes: Mutex<Vec<NodePtr>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodePtr(pub *mut QueueNode);

// Node pointers are only dereferenced under the node protocol.
unsafe impl Send for NodePtr {}

impl ThreadHandle {
    pub(crate) fn for_current(id: u64) -> Self {
        ThreadHandle {
            id,
            thread: thread::current(),
            interrupt_pending: AtomicBool::new(false),
            expired: AtomicBool::new(false),
            block: AtomicU8::new(RUNNING),
            counters: Counters::default(),
            nodes: Mutex::new(Vec::new()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> Option<&str> {
        self.thread.name()
    }

    /// Grants one permit; idempotent while a permit is pending.
    pub fn unpark(&self) {
        self.thread.unpark();
    }

    /// Blocks the calling thread, which must be this handle's thread.
    pub fn park(&self, deadline: Option<Instant>) -> ParkOutcome {
        debug_assert_eq!(thread::current().id(), self.thread.id());
        match deadline {
            None => {
                Counters::bump(&self.counters.parks);
                thread::park();
                ParkOutcome::Woken
            }
            Some(d) => {
                let now = Instant::now();
                if now >= d || self.expired.swap(false, Ordering::SeqCst) {
                    return ParkOutcome::TimedOut;
                }
                Counters::bump(&self.counters.parks);
                thread::park_timeout(d - now);
                if Instant::now() >= d || self.expired.swap(false, Ordering::SeqCst) {
                    ParkOutcome::TimedOut
                } else {
                    ParkOutcome::Woken
                }
            }
        }
    }

    /// Sets the pending-interrupt flag and wakes the thread if it is waiting.
    /// Lock acquisition ignores the flag; only `wait` observes it.
    pub fn interrupt(&self) {
        self.interrupt_pending.store(true, Ordering::SeqCst);
        let _ = self
            .block
            .compare_exchange(WAIT_BLOCKED, RUNNING, Ordering::SeqCst, Ordering::Relaxed);
        self.unpark();
    }

    /// Makes this thread's current or next timed park report a timeout at
    /// once. Lets test drivers fire timeouts at chosen points.
    pub fn expire_wait(&self) {
        self.expired.store(true, Ordering::SeqCst);
        self.unpark();
    }

    pub(crate) fn clear_expired(&self) {
        self.expired.store(false, Ordering::SeqCst);
    }

    pub fn interrupt_pending(&self) -> bool {
        self.interrupt_pending.load(Ordering::SeqCst)
    }

    pub(crate) fn take_interrupt(&self) -> bool {
        self.interrupt_pending.swap(false, Ordering::SeqCst)
    }

    pub fn block_state(&self) -> BlockState {
        match self.block.load(Ordering::SeqCst) {
            RUNNING => BlockState::Running,
            LOCK_BLOCKED => BlockState::Lock,
            _ => BlockState::Wait,
        }
    }

    pub(crate) fn set_block(&self, state: BlockState) {
        let v = match state {
            BlockState::Running => RUNNING,
            BlockState::Lock => LOCK_BLOCKED,
            BlockState::Wait => WAIT_BLOCKED,
        };
        self.block.store(v, Ordering::SeqCst);
    }

    /// A waiter moved onto the entry chain is now blocked on the lock.
    pub(crate) fn morphed(&self) {
        let _ = self
            .block
            .compare_exchange(WAIT_BLOCKED, LOCK_BLOCKED, Ordering::SeqCst, Ordering::Relaxed);
    }
}

/// Spins up to `policy.spin_budget` times on `ready`, then parks until it
/// holds, the deadline passes, or (if `interruptible`) an interrupt is pending.
/// Host wakeups that satisfy none of these are absorbed here.
pub fn spin_then_wait(
    handle: &ThreadHandle,
    policy: SpinPolicy,
    mut ready: impl FnMut() -> bool,
    deadline: Option<Instant>,
    interruptible: bool,
) -> Wake {
    if ready() {
        return Wake::Granted;
    }
    for _ in 0..policy.spin_budget {
        if policy.pause_hint {
            hint::spin_loop();
        }
        if ready() {
            return Wake::Granted;
        }
    }
    loop {
        if interruptible && handle.interrupt_pending() {
            return Wake::Interrupted;
        }
        if handle.park(deadline) == ParkOutcome::TimedOut {
            return if ready() { Wake::Granted } else { Wake::TimedOut };
        }
        if ready() {
            return Wake::Granted;
        }
    }
}

/// Busy-waits for a condition another thread establishes within a bounded
/// number of its own steps (MCS link resolution, dmw publication).
#[inline]
pub(crate) fn spin_until<T>(mut probe: impl FnMut() -> Option<T>) -> T {
    let mut spins = 0u32;
    loop {
        if let Some(v) = probe() {
            return v;
        }
        if spins < 64 {
            hint::spin_loop();
            spins += 1;
        } else {
            thread::yield_now();
        }
    }
}
