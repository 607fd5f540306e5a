//! `wait`, `notify` and `notify_all`.
//!
//! A waiting thread stays represented by the node it used to acquire the
//! monitor. Under the chain strategy the waitset is a FIFO of such nodes
//! hanging off the current owner's node; it moves to the successor at
//! every handoff. Notify flips a waiter to `Entry` and swaps it onto the
//! chain without waking it (wait morphing): the wake happens at handoff.
//!
//! A timed-out or interrupted waiter races notifiers for its own node with
//! a single compare-exchange on the node status. If it wins, it acquires
//! the monitor through a second ("beta") node and, as owner, unlinks the
//! abandoned node from the waitset.

use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use crate::lock::IllegalMonitorState;
use crate::markword::{MarkWord, Monitor};
use crate::node::{node, NodeStatus, QueueNode, ThreadContext, WaitList};
use crate::platform::{spin_then_wait, BlockState, Counters, SpinPolicy, ThreadHandle, Wake};
use crate::runtime::WaitsetStrategy;

/// How a `wait` ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WaitResult {
    Notified,
    TimedOut,
    Interrupted,
}

/// Sets `target`'s pending-interrupt flag and wakes it if it is waiting.
pub fn interrupt(target: &ThreadHandle) {
    target.interrupt();
}

impl ThreadContext {
    /// Releases the monitor and blocks until notified, timed out or
    /// interrupted, then re-acquires it at the same recursion depth.
    ///
    /// A pending interrupt makes `wait` return `Interrupted` at once, without
    /// releasing. Returning `Interrupted` clears the flag.
    pub fn wait(
        &self,
        monitor: &Monitor,
        timeout: Option<Duration>,
    ) -> Result<WaitResult, IllegalMonitorState> {
        let l = self.find_owned(monitor.key()).ok_or(IllegalMonitorState)?;
        if self.handle.take_interrupt() {
            return Ok(WaitResult::Interrupted);
        }
        let me = unsafe { node(l) };
        let depth = me.nesting.swap(0, Ordering::Relaxed);
        me.saved_nesting.store(depth, Ordering::Relaxed);
        let deadline = timeout.map(|t| Instant::now() + t);

        self.handle.clear_expired();
        self.handle.set_block(BlockState::Wait);
        match self.rt.strategy() {
            WaitsetStrategy::Chain => self.chain_wait_release(monitor, l),
            WaitsetStrategy::External => self.ext_wait_enqueue(monitor, l),
        }

        // waits are expected to be long: no spin phase
        let woke = spin_then_wait(
            &self.handle,
            SpinPolicy::park_only(),
            || me.status.load(Ordering::Acquire) == NodeStatus::Owner,
            deadline,
            true,
        );
        if woke != Wake::Granted {
            self.handle.set_block(BlockState::Running);
        }
        let (result, owner) = match woke {
            Wake::Granted => (WaitResult::Notified, l),
            Wake::TimedOut => self.cancel_wait(monitor, l, WaitResult::TimedOut),
            Wake::Interrupted => self.cancel_wait(monitor, l, WaitResult::Interrupted),
        };
        self.handle.set_block(BlockState::Running);
        unsafe { node(owner) }
            .nesting
            .store(depth, Ordering::Relaxed);
        if result == WaitResult::Interrupted {
            self.handle.take_interrupt();
        }
        Ok(result)
    }

    /// Moves the longest waiter onto the entry chain. No thread is woken.
    pub fn notify(&self, monitor: &Monitor) -> Result<(), IllegalMonitorState> {
        self.notify_impl(monitor, false)
    }

    /// Moves every waiter onto the entry chain, in wait order, with one swap.
    pub fn notify_all(&self, monitor: &Monitor) -> Result<(), IllegalMonitorState> {
        self.notify_impl(monitor, true)
    }

    fn notify_impl(&self, monitor: &Monitor, all: bool) -> Result<(), IllegalMonitorState> {
        let l = self.find_owned(monitor.key()).ok_or(IllegalMonitorState)?;
        Counters::bump(&self.counters().notifies);
        if self.rt.strategy() == WaitsetStrategy::External {
            self.ext_notify(monitor, l, all);
            return Ok(());
        }
        let me = unsafe { node(l) };
        let mut list = me.take_waitset();
        let mut moving = WaitList::EMPTY;
        while let Some(w) = list.pop_front() {
            // a failed flip means the waiter claimed itself; drop it
            if unsafe { node(w) }.status.transition(NodeStatus::Waiting, NodeStatus::Entry) {
                moving.push_back(w);
                if !all {
                    break;
                }
            }
        }
        me.set_waitset(list);
        self.morph_list(monitor, moving);
        Ok(())
    }

    /// Threads waiting on `monitor`, in wait order. Caller must own it.
    pub fn waiters(&self, monitor: &Monitor) -> Result<Vec<u64>, IllegalMonitorState> {
        let l = self.find_owned(monitor.key()).ok_or(IllegalMonitorState)?;
        Ok(match self.rt.strategy() {
            WaitsetStrategy::Chain => {
                let list = WaitList {
                    head: unsafe { node(l) }.waitset_head.load(Ordering::Relaxed),
                    tail: unsafe { node(l) }.waitset_tail.load(Ordering::Relaxed),
                };
                list.iter()
                    .map(|n| unsafe { node(n) })
                    .filter(|n| n.status.load(Ordering::SeqCst) == NodeStatus::Waiting)
                    .map(|n| n.home.id())
                    .collect()
            }
            WaitsetStrategy::External => self.ext_waiters(monitor, l),
        })
    }

    /// Appends `l` to its own waitset and gives up ownership: to the
    /// successor if there is one, else by staying on the chain as a
    /// waiting placeholder.
    fn chain_wait_release(&self, monitor: &Monitor, l: *mut QueueNode) {
        let me = unsafe { node(l) };
        let mut list = me.take_waitset();
        list.push_back(l);
        me.set_waitset(list);
        let own = MarkWord::queued(l);
        if monitor.mark() == own {
            // Publish the placeholder status, then re-check for arrivals.
            // An arrival swaps then reads our status, so either it sees
            // Placeholder or we see its swap.
            me.status.store(NodeStatus::Placeholder, Ordering::SeqCst);
            if monitor.mark() == own {
                return;
            }
            if !me.status.transition(NodeStatus::Placeholder, NodeStatus::Owner) {
                // usurped: we now sit in the arrival's waitset
                return;
            }
        }
        me.status.store(NodeStatus::Waiting, Ordering::SeqCst);
        self.hand_off(me);
    }

    /// Resolves a timed-out or interrupted wait. Returns the outcome and the
    /// node through which the thread now owns the monitor.
    fn cancel_wait(
        &self,
        monitor: &Monitor,
        l: *mut QueueNode,
        reason: WaitResult,
    ) -> (WaitResult, *mut QueueNode) {
        let me = unsafe { node(l) };
        if self.rt.strategy() == WaitsetStrategy::External {
            if self.ext_withdraw(l) {
                me.status.store(NodeStatus::Entry, Ordering::SeqCst);
                me.next.store(std::ptr::null_mut(), Ordering::Relaxed);
                self.acquire(monitor, l);
                return (reason, l);
            }
            self.await_grant(me);
            return (WaitResult::Notified, l);
        }
        loop {
            match me.status.load(Ordering::SeqCst) {
                NodeStatus::Owner => return (WaitResult::Notified, l),
                NodeStatus::Entry => {
                    self.await_grant(me);
                    return (WaitResult::Notified, l);
                }
                NodeStatus::Waiting => {
                    if me.status.transition(NodeStatus::Waiting, NodeStatus::Claimed) {
                        break;
                    }
                }
                NodeStatus::Placeholder => {
                    if me.status.transition(NodeStatus::Placeholder, NodeStatus::Owner) {
                        // we are the head: own the monitor directly
                        let mut list = me.take_waitset();
                        list.remove(l);
                        me.set_waitset(list);
                        return (reason, l);
                    }
                }
                NodeStatus::Promoting => std::thread::yield_now(),
                NodeStatus::Claimed => unreachable!("only the home thread claims its node"),
            }
        }

        // Claimed: no notifier or promoter will touch `l` again.
        Counters::bump(&self.counters().beta_nodes);
        let beta = self.allocate_node(monitor.key());
        self.acquire(monitor, beta);
        let b = unsafe { node(beta) };
        let mut list = b.take_waitset();
        list.remove(l);
        b.set_waitset(list);
        self.release_node(l);
        (reason, beta)
    }

    /// Waits, uninterruptibly, for a morphed node to be handed ownership.
    fn await_grant(&self, me: &QueueNode) {
        self.handle.set_block(BlockState::Lock);
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
