//! Queue nodes and the per-thread context that owns them.
//!
//! A node is contributed by one thread for one monitor it holds or waits on.
//! Each thread keeps two intrusive stacks: the active stack (nodes enqueued
//! on some chain or waitset, most recent lock on top) and the free stack.
//! Nodes never migrate: whoever allocated a node is the only thread that
//! ever recycles it.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::marker::PhantomData;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU32, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::Arc;

use rand::rngs::SmallRng;
use rand::SeedableRng;

use crate::markword::{Monitor, NODE_ALIGN};
use crate::platform::{Counters, NodePtr, SpinPolicy, ThreadHandle};
use crate::runtime::Runtime;

/// Lifecycle of a queue node.
///
/// `Placeholder` and `Promoting` refine the waiting state for the one node
/// that may sit on the chain while its thread is in `wait`:
///
/// ```text
///   Entry --> Owner --> (released)
///               |
///               v                 notify
///            Waiting ---------------------------> Entry
///             |  ^  \ cancel
///   promote   |  |   `--> Claimed --> (released)
///             v  | usurp
///   Promoting -> Placeholder --cancel--> Owner
/// ```
#[repr(u8)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeStatus {
    Entry = 0,
    Owner = 1,
    Waiting = 2,
    Claimed = 3,
    Placeholder = 4,
    Promoting = 5,
}

impl NodeStatus {
    fn from_u8(v: u8) -> NodeStatus {
        match v {
            0 => NodeStatus::Entry,
            1 => NodeStatus::Owner,
            2 => NodeStatus::Waiting,
            3 => NodeStatus::Claimed,
            4 => NodeStatus::Placeholder,
            5 => NodeStatus::Promoting,
            _ => unreachable!("corrupt node status {v}"),
        }
    }
}

pub(crate) struct AtomicStatus(AtomicU8);

impl AtomicStatus {
    fn new(s: NodeStatus) -> Self {
        AtomicStatus(AtomicU8::new(s as u8))
    }

    #[inline]
    pub(crate) fn load(&self, order: Ordering) -> NodeStatus {
        NodeStatus::from_u8(self.0.load(order))
    }

    #[inline]
    pub(crate) fn store(&self, s: NodeStatus, order: Ordering) {
        self.0.store(s as u8, order)
    }

    #[inline]
    pub(crate) fn transition(&self, from: NodeStatus, to: NodeStatus) -> bool {
        self.0
            .compare_exchange(from as u8, to as u8, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    }
}

/// Augmented MCS queue node.
#[repr(C, align(16))]
pub struct QueueNode {
    pub(crate) next: AtomicPtr<QueueNode>,
    pub(crate) status: AtomicStatus,
    /// Displaced mark word: 0 until present, then a hashed-shape word.
    pub(crate) dmw: AtomicU64,
    /// Waitset carried by the chain head. Touched only by the owner (or the
    /// thread that takes over a placeholder), handed on with ownership.
    pub(crate) waitset_head: AtomicPtr<QueueNode>,
    pub(crate) waitset_tail: AtomicPtr<QueueNode>,
    pub(crate) wait_next: AtomicPtr<QueueNode>,
    pub(crate) nesting: AtomicU32,
    pub(crate) saved_nesting: AtomicU32,
    /// Key of the monitor this node is enqueued for; 0 while free.
    pub(crate) monitor: AtomicUsize,
    pub(crate) home: Arc<ThreadHandle>,
    /// Active or free stack link; home thread only.
    link: Cell<*mut QueueNode>,
}

const _: () = assert!(std::mem::align_of::<QueueNode>() == NODE_ALIGN);

impl QueueNode {
    fn new(home: Arc<ThreadHandle>) -> Self {
        QueueNode {
            next: AtomicPtr::new(ptr::null_mut()),
            status: AtomicStatus::new(NodeStatus::Entry),
            dmw: AtomicU64::new(0),
            waitset_head: AtomicPtr::new(ptr::null_mut()),
            waitset_tail: AtomicPtr::new(ptr::null_mut()),
            wait_next: AtomicPtr::new(ptr::null_mut()),
            nesting: AtomicU32::new(0),
            saved_nesting: AtomicU32::new(0),
            monitor: AtomicUsize::new(0),
            home,
            link: Cell::new(ptr::null_mut()),
        }
    }

    pub fn status(&self) -> NodeStatus {
        self.status.load(Ordering::SeqCst)
    }

    pub(crate) fn take_waitset(&self) -> WaitList {
        let list = WaitList {
            head: self.waitset_head.load(Ordering::Relaxed),
            tail: self.waitset_tail.load(Ordering::Relaxed),
        };
        self.waitset_head.store(ptr::null_mut(), Ordering::Relaxed);
        self.waitset_tail.store(ptr::null_mut(), Ordering::Relaxed);
        list
    }

    pub(crate) fn set_waitset(&self, list: WaitList) {
        self.waitset_head.store(list.head, Ordering::Relaxed);
        self.waitset_tail.store(list.tail, Ordering::Relaxed);
    }

    pub(crate) fn has_waiters(&self) -> bool {
        !self.waitset_head.load(Ordering::Relaxed).is_null()
    }
}

/// Dereferences a node pointer.
///
/// # Safety
/// `p` must point to a live node that the node protocol keeps from being
/// recycled for the duration of `'a`.
#[inline]
pub(crate) unsafe fn node<'a>(p: *mut QueueNode) -> &'a QueueNode {
    debug_assert!(!p.is_null());
    &*p
}

/// FIFO of waiting nodes linked through `wait_next`. Only the current owner
/// of the monitor edits one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct WaitList {
    pub(crate) head: *mut QueueNode,
    pub(crate) tail: *mut QueueNode,
}

impl WaitList {
    pub(crate) const EMPTY: WaitList = WaitList {
        head: ptr::null_mut(),
        tail: ptr::null_mut(),
    };

    pub(crate) fn is_empty(&self) -> bool {
        self.head.is_null()
    }

    pub(crate) fn push_back(&mut self, n: *mut QueueNode) {
        unsafe {
            node(n).wait_next.store(ptr::null_mut(), Ordering::Relaxed);
            if self.tail.is_null() {
                self.head = n;
            } else {
                node(self.tail).wait_next.store(n, Ordering::Relaxed);
            }
        }
        self.tail = n;
    }

    pub(crate) fn push_front(&mut self, n: *mut QueueNode) {
        unsafe { node(n).wait_next.store(self.head, Ordering::Relaxed) };
        if self.head.is_null() {
            self.tail = n;
        }
        self.head = n;
    }

    pub(crate) fn pop_front(&mut self) -> Option<*mut QueueNode> {
        if self.head.is_null() {
            return None;
        }
        let n = self.head;
        unsafe {
            self.head = node(n).wait_next.load(Ordering::Relaxed);
            node(n).wait_next.store(ptr::null_mut(), Ordering::Relaxed);
        }
        if self.head.is_null() {
            self.tail = ptr::null_mut();
        }
        Some(n)
    }

    /// Unlinks `target` if present.
    pub(crate) fn remove(&mut self, target: *mut QueueNode) -> bool {
        let mut prev: *mut QueueNode = ptr::null_mut();
        let mut cur = self.head;
        while !cur.is_null() {
            let next = unsafe { node(cur).wait_next.load(Ordering::Relaxed) };
            if cur == target {
                if prev.is_null() {
                    self.head = next;
                } else {
                    unsafe { node(prev).wait_next.store(next, Ordering::Relaxed) };
                }
                if self.tail == cur {
                    self.tail = prev;
                }
                unsafe { node(cur).wait_next.store(ptr::null_mut(), Ordering::Relaxed) };
                return true;
            }
            prev = cur;
            cur = next;
        }
        false
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = *mut QueueNode> {
        let mut cur = self.head;
        std::iter::from_fn(move || {
            if cur.is_null() {
                None
            } else {
                let n = cur;
                cur = unsafe { node(n).wait_next.load(Ordering::Relaxed) };
                Some(n)
            }
        })
    }
}

/// Opaque identity of a queue node, for introspection.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({:#x})", self.0)
    }
}

/// Node bookkeeping for one thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Footprint {
    pub active: usize,
    pub free: usize,
    /// Nodes ever allocated by this thread.
    pub allocated: usize,
    pub peak_active: usize,
}

/// Per-thread registry entry: node stacks plus the thread's shared handle.
///
/// Created on, and confined to, the thread that uses it.
pub struct ThreadContext {
    pub(crate) rt: Arc<Runtime>,
    pub(crate) handle: Arc<ThreadHandle>,
    active: Cell<*mut QueueNode>,
    free: Cell<*mut QueueNode>,
    active_len: Cell<usize>,
    free_len: Cell<usize>,
    allocated: Cell<usize>,
    peak_active: Cell<usize>,
    spin: Cell<SpinPolicy>,
    pub(crate) rng: RefCell<SmallRng>,
    _not_send: PhantomData<*mut ()>,
}

impl ThreadContext {
    pub(crate) fn new(rt: Arc<Runtime>, handle: Arc<ThreadHandle>) -> Self {
        let seed = handle.id() ^ (rt.as_ref() as *const Runtime as u64).rotate_left(17);
        let spin = rt.config().spin;
        ThreadContext {
            rt,
            handle,
            active: Cell::new(ptr::null_mut()),
            free: Cell::new(ptr::null_mut()),
            active_len: Cell::new(0),
            free_len: Cell::new(0),
            allocated: Cell::new(0),
            peak_active: Cell::new(0),
            spin: Cell::new(spin),
            rng: RefCell::new(SmallRng::seed_from_u64(seed ^ rand::random::<u64>())),
            _not_send: PhantomData,
        }
    }

    pub fn id(&self) -> u64 {
        self.handle.id()
    }

    pub fn handle(&self) -> &Arc<ThreadHandle> {
        &self.handle
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.rt
    }

    pub fn spin_policy(&self) -> SpinPolicy {
        self.spin.get()
    }

    /// Overrides the runtime's spin policy for this thread.
    pub fn set_spin_policy(&self, policy: SpinPolicy) {
        self.spin.set(policy);
    }

    pub(crate) fn counters(&self) -> &Counters {
        &self.handle.counters
    }

    pub fn footprint(&self) -> Footprint {
        Footprint {
            active: self.active_len.get(),
            free: self.free_len.get(),
            allocated: self.allocated.get(),
            peak_active: self.peak_active.get(),
        }
    }

    /// Pops a free node (or allocates one) and pushes it on the active
    /// stack, reset for `monitor`.
    pub(crate) fn allocate_node(&self, monitor: usize) -> *mut QueueNode {
        let n = self.pop_free();
        let n = match n {
            Some(n) => {
                // hash readers may still be looking at the previous incarnation
                self.rt.pins().wait_for_zero(n);
                n
            }
            None => self.fresh_node(),
        };
        self.reset(n, monitor);
        self.push_active(n);
        n
    }

    /// Like [`allocate_node`](Self::allocate_node) but skips the pin-table
    /// wait: for locks that expose nothing to remote readers.
    pub(crate) fn allocate_unpinned(&self, monitor: usize) -> *mut QueueNode {
        let n = self.pop_free().unwrap_or_else(|| self.fresh_node());
        self.reset(n, monitor);
        self.push_active(n);
        n
    }

    fn fresh_node(&self) -> *mut QueueNode {
        let n = Box::into_raw(Box::new(QueueNode::new(self.handle.clone())));
        self.handle.nodes.lock().unwrap().push(NodePtr(n));
        self.allocated.set(self.allocated.get() + 1);
        Counters::bump(&self.counters().allocations);
        n
    }

    fn reset(&self, n: *mut QueueNode, monitor: usize) {
        let q = unsafe { node(n) };
        q.next.store(ptr::null_mut(), Ordering::Relaxed);
        q.status.store(NodeStatus::Entry, Ordering::Relaxed);
        q.dmw.store(0, Ordering::Relaxed);
        q.waitset_head.store(ptr::null_mut(), Ordering::Relaxed);
        q.waitset_tail.store(ptr::null_mut(), Ordering::Relaxed);
        q.wait_next.store(ptr::null_mut(), Ordering::Relaxed);
        q.nesting.store(0, Ordering::Relaxed);
        q.saved_nesting.store(0, Ordering::Relaxed);
        q.monitor.store(monitor, Ordering::Relaxed);
    }

    /// Returns `n` to this thread's free stack. `n` must be unreachable from
    /// every mark word, chain and waitset.
    pub(crate) fn release_node(&self, n: *mut QueueNode) {
        let q = unsafe { node(n) };
        assert!(
            Arc::ptr_eq(&q.home, &self.handle),
            "node released by a thread other than its home thread"
        );
        let removed = self.remove_active(n);
        debug_assert!(removed, "released node was not active");
        q.monitor.store(0, Ordering::Relaxed);
        q.link.set(self.free.get());
        self.free.set(n);
        self.free_len.set(self.free_len.get() + 1);
    }

    /// Node through which this thread owns `monitor`, searching from the
    /// most recent acquisition.
    pub(crate) fn find_owned(&self, monitor: usize) -> Option<*mut QueueNode> {
        let mut cur = self.active.get();
        while !cur.is_null() {
            let q = unsafe { node(cur) };
            if q.monitor.load(Ordering::Relaxed) == monitor
                && q.status.load(Ordering::Relaxed) == NodeStatus::Owner
            {
                return Some(cur);
            }
            cur = q.link.get();
        }
        None
    }

    /// Position (0 = top) of the owning node in the active stack.
    pub fn owned_depth(&self, monitor: &Monitor) -> Option<usize> {
        let target = self.find_owned(monitor.key())?;
        self.active_nodes().position(|n| n == target)
    }

    /// Node currently representing this thread on `monitor`, if any.
    pub fn node_for(&self, monitor: &Monitor) -> Option<NodeId> {
        let key = monitor.key();
        self.active_nodes()
            .find(|&n| unsafe { node(n) }.monitor.load(Ordering::Relaxed) == key)
            .map(|n| NodeId(n as usize))
    }

    pub fn is_free(&self, id: NodeId) -> bool {
        self.free_nodes().any(|n| n as usize == id.0)
    }

    pub fn is_active(&self, id: NodeId) -> bool {
        self.active_nodes().any(|n| n as usize == id.0)
    }

    fn active_nodes(&self) -> impl Iterator<Item = *mut QueueNode> {
        walk(self.active.get())
    }

    fn free_nodes(&self) -> impl Iterator<Item = *mut QueueNode> {
        walk(self.free.get())
    }

    fn pop_free(&self) -> Option<*mut QueueNode> {
        let n = self.free.get();
        if n.is_null() {
            return None;
        }
        self.free.set(unsafe { node(n) }.link.get());
        self.free_len.set(self.free_len.get() - 1);
        Some(n)
    }

    fn push_active(&self, n: *mut QueueNode) {
        unsafe { node(n) }.link.set(self.active.get());
        self.active.set(n);
        let len = self.active_len.get() + 1;
        self.active_len.set(len);
        if len > self.peak_active.get() {
            self.peak_active.set(len);
        }
    }

    fn remove_active(&self, n: *mut QueueNode) -> bool {
        let mut prev: *mut QueueNode = ptr::null_mut();
        let mut cur = self.active.get();
        while !cur.is_null() {
            let next = unsafe { node(cur) }.link.get();
            if cur == n {
                if prev.is_null() {
                    self.active.set(next);
                } else {
                    unsafe { node(prev) }.link.set(next);
                }
                self.active_len.set(self.active_len.get() - 1);
                return true;
            }
            prev = cur;
            cur = next;
        }
        false
    }
}

fn walk(mut cur: *mut QueueNode) -> impl Iterator<Item = *mut QueueNode> {
    std::iter::from_fn(move || {
        if cur.is_null() {
            None
        } else {
            let n = cur;
            cur = unsafe { node(n) }.link.get();
            Some(n)
        }
    })
}

impl Drop for ThreadContext {
    fn drop(&mut self) {
        // Active nodes may still be linked from a chain; they are leaked.
        let mut freed = Vec::new();
        while let Some(n) = self.pop_free() {
            self.rt.pins().wait_for_zero(n);
            freed.push(n);
        }
        let mut registry = self.handle.nodes.lock().unwrap();
        registry.retain(|p| !freed.contains(&p.0));
        for n in freed {
            drop(unsafe { Box::from_raw(n) });
        }
    }
}

impl fmt::Debug for ThreadContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ThreadContext")
            .field("id", &self.id())
            .field("footprint", &self.footprint())
            .finish()
    }
}
