//! Identity hashes.
//!
//! A monitor is hashed the first time it is hashed or locked, whichever
//! comes first, and keeps that hash forever. While the mark holds a tail
//! link, the hash is displaced into every node on the chain, so any thread
//! can fetch it from the tail. Remote readers protect the tail node from
//! recycling with a striped pin count instead of a lock; allocation of a
//! recycled node waits for its stripe to drain.

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;

use rand::Rng;

use crate::markword::{decode, encode_hashed, MarkVariant, MarkWord, Monitor, NODE_ALIGN};
use crate::node::{node, QueueNode, ThreadContext};

/// Hashes are 31-bit, nonzero.
pub const HASH_MASK: u64 = 0x7FFF_FFFF;

#[repr(align(64))]
#[derive(Default)]
struct Stripe(AtomicU64);

/// Striped reference counts indexed by node address.
pub struct PinTable {
    stripes: Box<[Stripe]>,
    shift: u32,
}

impl PinTable {
    pub fn new(stripes: usize) -> Self {
        assert!(stripes.is_power_of_two() && stripes > 1);
        PinTable {
            stripes: (0..stripes).map(|_| Stripe::default()).collect(),
            shift: 64 - stripes.trailing_zeros(),
        }
    }

    pub fn len(&self) -> usize {
        self.stripes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Multiply-shift on the node index.
    pub fn index(&self, addr: usize) -> usize {
        let k = (addr / NODE_ALIGN) as u64;
        (k.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> self.shift) as usize
    }

    pub fn pin(&self, addr: usize) {
        self.stripes[self.index(addr)].0.fetch_add(1, Ordering::SeqCst);
    }

    pub fn unpin(&self, addr: usize) {
        let prev = self.stripes[self.index(addr)].0.fetch_sub(1, Ordering::SeqCst);
        debug_assert!(prev > 0, "unbalanced unpin");
    }

    pub fn count(&self, addr: usize) -> u64 {
        self.stripes[self.index(addr)].0.load(Ordering::SeqCst)
    }

    /// Blocks until no reader pins the stripe `n` maps to.
    pub(crate) fn wait_for_zero(&self, n: *mut QueueNode) {
        let stripe = &self.stripes[self.index(n as usize)].0;
        let mut spins = 0u32;
        while stripe.load(Ordering::SeqCst) != 0 {
            if spins < 64 {
                std::hint::spin_loop();
                spins += 1;
            } else {
                thread::yield_now();
            }
        }
    }
}

/// Draws a fresh 31-bit nonzero hash from a per-thread generator.
pub fn generate_hash(rng: &mut impl Rng) -> u64 {
    rng.gen_range(1..=HASH_MASK)
}

impl ThreadContext {
    pub(crate) fn fresh_hash(&self) -> u64 {
        generate_hash(&mut *self.rng.borrow_mut())
    }

    /// The monitor's identity hash, assigning one if it has none.
    ///
    /// Obstruction-free: a read against a queued monitor retries only when
    /// the chain changed under it.
    pub fn hash_of(&self, monitor: &Monitor) -> u64 {
        loop {
            let word = monitor.mark();
            match decode(word) {
                MarkVariant::Neutral => {
                    let h = self.fresh_hash();
                    if monitor.try_transition(MarkWord::NEUTRAL, encode_hashed(h)) {
                        return h;
                    }
                }
                MarkVariant::Hashed(h) => return h,
                MarkVariant::Queued(tail) => {
                    if let Some(own) = self.find_owned(monitor.key()) {
                        let d = MarkWord::from_raw(unsafe { node(own) }.dmw.load(Ordering::Acquire));
                        return d.hash().expect("owner node without a displaced hash");
                    }
                    if let Some(h) = self.pinned_tail_read(monitor, word, tail) {
                        return h;
                    }
                }
            }
        }
    }

    fn pinned_tail_read(&self, monitor: &Monitor, word: MarkWord, tail: usize) -> Option<u64> {
        let pins = self.rt.pins();
        pins.pin(tail);
        // Still the tail after pinning: the node cannot be recycled until we unpin.
        let h = if monitor.mark() == word {
            let d = unsafe { node(tail as *mut QueueNode) }.dmw.load(Ordering::Acquire);
            MarkWord::from_raw(d).hash()
        } else {
            None
        };
        pins.unpin(tail);
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{Config, Runtime};
    use rand::rngs::SmallRng;
    use rand::SeedableRng;
    use std::collections::HashSet;
    use std::sync::Arc;

    #[test]
    fn fresh_monitor_hash_is_stable() {
        let ctx = Runtime::new(Config::default()).attach();
        let m = Monitor::new();
        let h = ctx.hash_of(&m);
        assert!(h != 0 && h <= HASH_MASK);
        assert_eq!(ctx.hash_of(&m), h);
        assert_eq!(m.mark(), encode_hashed(h));
    }

    #[test]
    fn lock_then_hash_reads_own_dmw() {
        let ctx = Runtime::new(Config::default()).attach();
        let m = Monitor::new();
        ctx.lock(&m);
        let n = ctx.find_owned(m.key()).unwrap();
        let d = unsafe { node(n) }.dmw.load(Ordering::Relaxed);
        assert_eq!(Some(ctx.hash_of(&m)), MarkWord::from_raw(d).hash());
        ctx.unlock(&m).unwrap();
    }

    #[test]
    fn pin_unpin_balances() {
        let t = PinTable::new(128);
        let a = 0x1000usize;
        assert_eq!(t.count(a), 0);
        t.pin(a);
        t.pin(a);
        assert_eq!(t.count(a), 2);
        t.unpin(a);
        t.unpin(a);
        assert_eq!(t.count(a), 0);
    }

    #[test]
    fn stripe_index_in_range() {
        let t = PinTable::new(128);
        for i in 0..10_000usize {
            assert!(t.index(i * NODE_ALIGN) < 128);
        }
    }

    #[test]
    fn never_zero() {
        let mut rng = SmallRng::seed_from_u64(7);
        assert!((0..1_000_000).all(|_| generate_hash(&mut rng) != 0));
    }

    #[test]
    fn collisions_near_birthday_expectation() {
        // Expected colliding draws for n uniform draws over d values is
        // n - d * (1 - (1 - 1/d)^n), computed in closed form below.
        let n = 1_000_000u64;
        let d = HASH_MASK as f64;
        let expected = n as f64 - d * (1.0 - (1.0 - 1.0 / d).powf(n as f64));
        let mut rng = SmallRng::seed_from_u64(0xC0FFEE);
        let mut seen = HashSet::with_capacity(n as usize);
        let dup = (0..n).filter(|_| !seen.insert(generate_hash(&mut rng))).count() as f64;
        assert!(expected > 200.0 && expected < 250.0, "expected {expected}");
        assert!(dup <= 4.0 * expected, "{dup} collisions vs expected {expected}");
    }

    #[test]
    fn recycler_waits_for_pins() {
        let rt = Runtime::new(Config::default());
        let ctx = rt.attach();
        let n = ctx.allocate_node(1);
        ctx.release_node(n);
        rt.pins().pin(n as usize);
        let rt2 = Arc::clone(&rt);
        let addr = n as usize;
        let released = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let r2 = released.clone();
        let t = thread::spawn(move || {
            thread::sleep(std::time::Duration::from_millis(30));
            r2.store(true, Ordering::SeqCst);
            rt2.pins().unpin(addr);
        });
        let again = ctx.allocate_node(2);
        assert_eq!(again, n);
        assert!(released.load(Ordering::SeqCst), "allocation finished before unpin");
        t.join().unwrap();
    }
}
