//! Lock and unlock.
//!
//! Arrivals swap their node into the mark and either own the monitor at
//! once (the mark was neutral or hashed) or link behind the previous tail
//! and wait for a direct handoff. An arrival that finds a waiting
//! placeholder at the head usurps it instead of waiting. The last owner
//! out restores the hashed word; an owner with waiters but no successor
//! promotes a waiter to placeholder so the waitset is never orphaned.

use std::ptr;
use std::sync::atomic::Ordering;

use thiserror::Error;

use crate::markword::{decode, encode_hashed, MarkVariant, MarkWord, Monitor};
use crate::node::{node, NodeStatus, QueueNode, ThreadContext, WaitList};
use crate::platform::{spin_then_wait, spin_until, BlockState, Counters, ThreadHandle};
use crate::runtime::WaitsetStrategy;

/// Unlock, wait or notify by a thread that does not own the monitor.
#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
#[error("illegal monitor state: current thread does not own the monitor")]
pub struct IllegalMonitorState;

impl ThreadContext {
    /// Acquires `monitor`, blocking until granted. Re-entrant.
    pub fn lock(&self, monitor: &Monitor) {
        let key = monitor.key();
        if let Some(own) = self.find_owned(key) {
            unsafe { node(own) }.nesting.fetch_add(1, Ordering::Relaxed);
            return;
        }
        let n = self.allocate_node(key);
        self.acquire(monitor, n);
    }

    /// Releases one level of ownership.
    pub fn unlock(&self, monitor: &Monitor) -> Result<(), IllegalMonitorState> {
        let l = self.find_owned(monitor.key()).ok_or(IllegalMonitorState)?;
        let q = unsafe { node(l) };
        let depth = q.nesting.load(Ordering::Relaxed);
        if depth > 0 {
            q.nesting.store(depth - 1, Ordering::Relaxed);
            return Ok(());
        }
        self.release_ownership(monitor, l);
        self.release_node(l);
        Ok(())
    }

    pub fn holds_lock(&self, monitor: &Monitor) -> bool {
        self.find_owned(monitor.key()).is_some()
    }

    /// Recursion depth of the calling thread's hold (0 = held once).
    pub fn nesting(&self, monitor: &Monitor) -> Option<u32> {
        self.find_owned(monitor.key())
            .map(|n| unsafe { node(n) }.nesting.load(Ordering::Relaxed))
    }

    /// Enqueues the active node `n` (status Entry, next null) and returns
    /// once it owns the monitor. Never interrupted.
    pub(crate) fn acquire(&self, monitor: &Monitor, n: *mut QueueNode) {
        let c = self.counters();
        let me = unsafe { node(n) };
        Counters::bump(&c.tail_swaps);
        let prior = monitor.swap_tail(n);
        Counters::bump(&c.grants);
        match decode(prior) {
            MarkVariant::Neutral => {
                me.dmw.store(encode_hashed(self.fresh_hash()).raw(), Ordering::Release);
                me.status.store(NodeStatus::Owner, Ordering::Relaxed);
                Counters::bump(&c.instant_acquires);
            }
            MarkVariant::Hashed(_) => {
                me.dmw.store(prior.raw(), Ordering::Release);
                me.status.store(NodeStatus::Owner, Ordering::Relaxed);
                Counters::bump(&c.instant_acquires);
            }
            MarkVariant::Queued(p) => {
                let p = p as *mut QueueNode;
                // p stays live: it cannot leave the chain before we link it
                // to us, and a placeholder is only recycled after its thread
                // regains ownership, which requires us to move on first.
                let pred = unsafe { node(p) };
                if self.try_usurp(pred, me) {
                    Counters::bump(&c.usurps);
                    Counters::bump(&c.instant_acquires);
                    return;
                }
                // Pull the hash forward; pred cannot hand off until we link.
                let d = spin_until(|| {
                    let d = pred.dmw.load(Ordering::Acquire);
                    (d != 0).then_some(d)
                });
                me.dmw.store(d, Ordering::Release);
                self.handle.set_block(BlockState::Lock);
                pred.next.store(n, Ordering::Release);
                spin_then_wait(
                    &self.handle,
                    self.spin_policy(),
                    || me.status.load(Ordering::Acquire) == NodeStatus::Owner,
                    None,
                    false,
                );
                self.handle.set_block(BlockState::Running);
            }
        }
    }

    /// Takes ownership from a waiting placeholder predecessor, absorbing it
    /// and its waitset into `me`'s waitset.
    fn try_usurp(&self, pred: &QueueNode, me: &QueueNode) -> bool {
        loop {
            match pred.status.load(Ordering::SeqCst) {
                NodeStatus::Placeholder => {
                    if pred.status.transition(NodeStatus::Placeholder, NodeStatus::Waiting) {
                        me.dmw.store(pred.dmw.load(Ordering::Acquire), Ordering::Release);
                        me.set_waitset(pred.take_waitset());
                        me.status.store(NodeStatus::Owner, Ordering::Relaxed);
                        return true;
                    }
                }
                // the promoting owner already installed pred as tail; it
                // becomes a placeholder in a bounded number of steps
                NodeStatus::Promoting => std::thread::yield_now(),
                _ => return false,
            }
        }
    }

    /// Gives up ownership held through `l` without recycling it: deflates,
    /// promotes a waiter to placeholder, or hands off to the successor
    /// together with the waitset.
    pub(crate) fn release_ownership(&self, monitor: &Monitor, l: *mut QueueNode) {
        let c = self.counters();
        let me = unsafe { node(l) };
        let own_word = MarkWord::queued(l);
        loop {
            if !me.has_waiters() {
                let dmw = MarkWord::from_raw(me.dmw.load(Ordering::Relaxed));
                if monitor.try_transition(own_word, dmw) {
                    Counters::bump(&c.deflations);
                    return;
                }
                break;
            }
            debug_assert_eq!(
                self.rt.strategy(),
                WaitsetStrategy::Chain,
                "external strategy never carries waitsets in nodes"
            );
            if monitor.mark() != own_word {
                break;
            }
            match self.promote(monitor, me, own_word) {
                Promotion::Done => {
                    Counters::bump(&c.promotions);
                    return;
                }
                Promotion::AllCancelled => continue,
                Promotion::SuccessorArrived => break,
            }
        }
        self.hand_off(me);
    }

    fn promote(&self, monitor: &Monitor, me: &QueueNode, own_word: MarkWord) -> Promotion {
        let mut list = me.take_waitset();
        let w = loop {
            match list.pop_front() {
                None => return Promotion::AllCancelled,
                Some(w) if unsafe { node(w) }.status.transition(NodeStatus::Waiting, NodeStatus::Promoting) => {
                    break w;
                }
                // claimed by its own cancelling thread; its beta node will not find it
                Some(_) => {}
            }
        };
        let wn = unsafe { node(w) };
        list.push_front(w);
        wn.set_waitset(list);
        wn.next.store(ptr::null_mut(), Ordering::Relaxed);
        if monitor.try_transition(own_word, MarkWord::queued(w)) {
            wn.status.store(NodeStatus::Placeholder, Ordering::SeqCst);
            Promotion::Done
        } else {
            let list = wn.take_waitset();
            wn.status.store(NodeStatus::Waiting, Ordering::SeqCst);
            me.set_waitset(list);
            Promotion::SuccessorArrived
        }
    }

    /// Passes ownership to the resolved successor of `me`, with the waitset.
    pub(crate) fn hand_off(&self, me: &QueueNode) {
        let c = self.counters();
        let s = spin_until(|| {
            let s = me.next.load(Ordering::Acquire);
            (!s.is_null()).then_some(s)
        });
        let succ = unsafe { node(s) };
        succ.set_waitset(me.take_waitset());
        // The registry keeps handles alive after the successor's node is recycled.
        let home: *const ThreadHandle = &*succ.home;
        unsafe { &*home }.set_block(BlockState::Running);
        succ.status.store(NodeStatus::Owner, Ordering::Release);
        Counters::bump(&c.handoffs);
        Counters::bump(&c.unparks);
        unsafe { &*home }.unpark();
    }

    /// Appends the pre-linked segment `first..=last` of former waiters to
    /// the chain with a single swap. Caller owns the monitor.
    pub(crate) fn append_to_chain(&self, monitor: &Monitor, first: *mut QueueNode, last: *mut QueueNode) {
        unsafe { node(last) }.next.store(ptr::null_mut(), Ordering::Relaxed);
        Counters::bump(&self.counters().tail_swaps);
        let prior = monitor.swap_tail(last);
        let p = prior.tail().expect("owned monitor must be queued");
        unsafe { node(p) }.next.store(first, Ordering::Release);
    }

    pub(crate) fn morph_list(&self, monitor: &Monitor, members: WaitList) {
        if members.is_empty() {
            return;
        }
        let mut prev: *mut QueueNode = ptr::null_mut();
        for w in members.iter().collect::<Vec<_>>() {
            let wn = unsafe { node(w) };
            wn.wait_next.store(ptr::null_mut(), Ordering::Relaxed);
            wn.home.morphed();
            if !prev.is_null() {
                unsafe { node(prev) }.next.store(w, Ordering::Relaxed);
            }
            prev = w;
        }
        self.append_to_chain(monitor, members.head, members.tail);
    }
}

enum Promotion {
    Done,
    AllCancelled,
    SuccessorArrived,
}
