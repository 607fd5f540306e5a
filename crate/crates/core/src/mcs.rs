//! Plain MCS lock on the same node machinery, without hashes or waitsets.
//! Used as the performance baseline.

use std::ptr;
use std::sync::atomic::{AtomicPtr, Ordering};

use crate::lock::IllegalMonitorState;
use crate::node::{node, NodeStatus, QueueNode, ThreadContext};
use crate::platform::{spin_then_wait, BlockState, Counters};

pub struct McsLock {
    tail: AtomicPtr<QueueNode>,
}

impl McsLock {
    pub const fn new() -> Self {
        McsLock {
            tail: AtomicPtr::new(ptr::null_mut()),
        }
    }

    fn key(&self) -> usize {
        self as *const McsLock as usize
    }

    pub fn is_locked(&self) -> bool {
        !self.tail.load(Ordering::SeqCst).is_null()
    }

    pub fn lock(&self, ctx: &ThreadContext) {
        let key = self.key();
        if let Some(own) = ctx.find_owned(key) {
            unsafe { node(own) }.nesting.fetch_add(1, Ordering::Relaxed);
            return;
        }
        let c = ctx.counters();
        let n = ctx.allocate_unpinned(key);
        let me = unsafe { node(n) };
        Counters::bump(&c.tail_swaps);
        Counters::bump(&c.grants);
        let prev = self.tail.swap(n, Ordering::AcqRel);
        if prev.is_null() {
            me.status.store(NodeStatus::Owner, Ordering::Relaxed);
            Counters::bump(&c.instant_acquires);
            return;
        }
        ctx.handle.set_block(BlockState::Lock);
        unsafe { node(prev) }.next.store(n, Ordering::Release);
        spin_then_wait(
            &ctx.handle,
            ctx.spin_policy(),
            || me.status.load(Ordering::Acquire) == NodeStatus::Owner,
            None,
            false,
        );
        ctx.handle.set_block(BlockState::Running);
    }

    pub fn unlock(&self, ctx: &ThreadContext) -> Result<(), IllegalMonitorState> {
        let n = ctx.find_owned(self.key()).ok_or(IllegalMonitorState)?;
        let me = unsafe { node(n) };
        let depth = me.nesting.load(Ordering::Relaxed);
        if depth > 0 {
            me.nesting.store(depth - 1, Ordering::Relaxed);
            return Ok(());
        }
        let detached = me.next.load(Ordering::Acquire).is_null()
            && self
                .tail
                .compare_exchange(n, ptr::null_mut(), Ordering::AcqRel, Ordering::Relaxed)
                .is_ok();
        if !detached {
            ctx.hand_off(me);
        }
        ctx.release_node(n);
        Ok(())
    }
}

impl Default for McsLock {
    fn default() -> Self {
        McsLock::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{Config, Runtime};
    use std::sync::atomic::AtomicU64;
    use std::sync::Arc;
    use std::thread;

    #[test]
    fn mutual_exclusion() {
        let rt = Runtime::new(Config::default());
        let lock = Arc::new(McsLock::new());
        let counter = Arc::new(AtomicU64::new(0));
        let ts: Vec<_> = (0..4)
            .map(|_| {
                let (rt, lock, counter) = (rt.clone(), lock.clone(), counter.clone());
                thread::spawn(move || {
                    let ctx = rt.attach();
                    for _ in 0..5_000 {
                        lock.lock(&ctx);
                        let v = counter.load(Ordering::Relaxed);
                        counter.store(v + 1, Ordering::Relaxed);
                        lock.unlock(&ctx).unwrap();
                    }
                })
            })
            .collect();
        for t in ts {
            t.join().unwrap();
        }
        assert_eq!(counter.load(Ordering::Relaxed), 20_000);
        assert!(!lock.is_locked());
    }

    #[test]
    fn recursion_and_imsx() {
        let ctx = Runtime::new(Config::default()).attach();
        let lock = McsLock::new();
        lock.lock(&ctx);
        lock.lock(&ctx);
        lock.unlock(&ctx).unwrap();
        assert!(lock.is_locked());
        lock.unlock(&ctx).unwrap();
        assert!(!lock.is_locked());
        assert_eq!(lock.unlock(&ctx), Err(IllegalMonitorState));
    }
}
