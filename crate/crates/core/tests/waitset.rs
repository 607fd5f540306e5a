mod common;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use cjm_core::{interrupt, BlockState, Monitor, WaitResult, WaitsetStrategy};
use common::{blocked, park_only_runtime, runtime, STRATEGIES};

#[test]
fn timed_wait_alone_times_out_and_keeps_depth() {
    for s in STRATEGIES {
        let rt = runtime(s);
        let ctx = rt.attach();
        let m = Monitor::new();
        ctx.lock(&m);
        ctx.lock(&m);
        let t0 = Instant::now();
        assert_eq!(ctx.wait(&m, Some(Duration::from_millis(20))), Ok(WaitResult::TimedOut));
        assert!(t0.elapsed() >= Duration::from_millis(20));
        assert_eq!(ctx.nesting(&m), Some(1));
        rt.audit(&m).unwrap();
        ctx.unlock(&m).unwrap();
        ctx.unlock(&m).unwrap();
        assert!(!ctx.holds_lock(&m));
        assert!(rt.audit(&m).unwrap().owner().is_none());
        // the placeholder cancelled itself: no second node needed
        assert!(ctx.footprint().allocated <= 2, "{:?} {s}", ctx.footprint());
    }
}

#[test]
fn pending_interrupt_returns_without_releasing() {
    for s in STRATEGIES {
        let rt = runtime(s);
        let ctx = rt.attach();
        let m = Monitor::new();
        ctx.lock(&m);
        interrupt(ctx.handle());
        assert_eq!(ctx.wait(&m, None), Ok(WaitResult::Interrupted));
        assert!(!ctx.handle().interrupt_pending());
        assert!(ctx.holds_lock(&m));
        ctx.unlock(&m).unwrap();
    }
}

#[test]
fn notify_hands_over_in_wait_order() {
    for s in STRATEGIES {
        let rt = park_only_runtime(s);
        let m = Arc::new(Monitor::new());
        let order = Arc::new(std::sync::Mutex::new(Vec::new()));
        let mut hs = Vec::new();
        let mut handles = Vec::new();
        for i in 0..4u64 {
            let (rt2, m2, order2) = (rt.clone(), m.clone(), order.clone());
            let (tx, rx) = mpsc::channel();
            hs.push(thread::spawn(move || {
                let ctx = rt2.attach();
                tx.send(ctx.handle().clone()).unwrap();
                ctx.lock(&m2);
                assert_eq!(ctx.wait(&m2, None), Ok(WaitResult::Notified));
                order2.lock().unwrap().push(i);
                ctx.unlock(&m2).unwrap();
            }));
            let h = rx.recv().unwrap();
            blocked(&h, BlockState::Wait);
            handles.push(h);
        }
        let ctx = rt.attach();
        ctx.lock(&m);
        assert_eq!(ctx.waiters(&m).unwrap(), handles.iter().map(|h| h.id()).collect::<Vec<_>>());
        ctx.notify(&m).unwrap();
        ctx.notify(&m).unwrap();
        ctx.notify_all(&m).unwrap();
        assert!(ctx.waiters(&m).unwrap().is_empty());
        let snap = rt.audit(&m).unwrap();
        assert_eq!(snap.owner(), Some(ctx.id()));
        assert_eq!(snap.entry_queue(), handles.iter().map(|h| h.id()).collect::<Vec<_>>());
        ctx.unlock(&m).unwrap();
        for h in hs {
            h.join().unwrap();
        }
        assert_eq!(*order.lock().unwrap(), vec![0, 1, 2, 3], "{s}");
        assert!(rt.audit(&m).unwrap().chain.is_empty());
    }
}

#[test]
fn notify_morphs_without_waking() {
    for s in STRATEGIES {
        let rt = park_only_runtime(s);
        let m = Arc::new(Monitor::new());
        let mut hs = Vec::new();
        for _ in 0..10 {
            let (rt2, m2) = (rt.clone(), m.clone());
            let (tx, rx) = mpsc::channel();
            hs.push(thread::spawn(move || {
                let ctx = rt2.attach();
                tx.send(ctx.handle().clone()).unwrap();
                ctx.lock(&m2);
                ctx.wait(&m2, None).unwrap();
                ctx.unlock(&m2).unwrap();
            }));
            blocked(&rx.recv().unwrap(), BlockState::Wait);
        }
        let ctx = rt.attach();
        ctx.lock(&m);
        let before = rt.counters();
        ctx.notify(&m).unwrap();
        let one = rt.counters() - before;
        assert_eq!((one.unparks, one.tail_swaps), (0, 1), "{s}");
        let before = rt.counters();
        ctx.notify_all(&m).unwrap();
        let all = rt.counters() - before;
        assert_eq!((all.unparks, all.tail_swaps), (0, 1), "{s}");
        ctx.unlock(&m).unwrap();
        for h in hs {
            h.join().unwrap();
        }
    }
}

#[test]
fn waiter_timing_out_behind_an_owner_uses_a_beta_node() {
    let rt = park_only_runtime(WaitsetStrategy::Chain);
    let m = Arc::new(Monitor::new());
    let (tx, rx) = mpsc::channel();
    let (rt2, m2) = (rt.clone(), m.clone());
    let waiter = thread::spawn(move || {
        let ctx = rt2.attach();
        tx.send(ctx.handle().clone()).unwrap();
        ctx.lock(&m2);
        let r = ctx.wait(&m2, Some(Duration::from_millis(50))).unwrap();
        assert!(ctx.holds_lock(&m2));
        ctx.unlock(&m2).unwrap();
        (r, ctx.handle().counters.snapshot().beta_nodes, ctx.footprint())
    });
    let h = rx.recv().unwrap();
    blocked(&h, BlockState::Wait);
    let ctx = rt.attach();
    ctx.lock(&m); // usurps the placeholder
    blocked(&h, BlockState::Lock); // timed out, beta node queued behind us
    let snap = rt.audit(&m).unwrap();
    assert_eq!(snap.cancelled, vec![h.id()]);
    assert!(snap.waiters.is_empty());
    ctx.unlock(&m).unwrap();
    let (r, betas, fp) = waiter.join().unwrap();
    assert_eq!(r, WaitResult::TimedOut);
    assert_eq!(betas, 1);
    assert_eq!(fp.active, 0);
    assert!(fp.allocated <= 2);
    assert!(rt.audit(&m).unwrap().chain.is_empty());
}

#[test]
fn interrupt_wakes_a_waiter() {
    for s in STRATEGIES {
        let rt = park_only_runtime(s);
        let m = Arc::new(Monitor::new());
        let (tx, rx) = mpsc::channel();
        let (rt2, m2) = (rt.clone(), m.clone());
        let waiter = thread::spawn(move || {
            let ctx = rt2.attach();
            tx.send(ctx.handle().clone()).unwrap();
            ctx.lock(&m2);
            let r = ctx.wait(&m2, None).unwrap();
            let pending = ctx.handle().interrupt_pending();
            ctx.unlock(&m2).unwrap();
            (r, pending)
        });
        let h = rx.recv().unwrap();
        blocked(&h, BlockState::Wait);
        let ctx = rt.attach();
        ctx.lock(&m);
        interrupt(&h);
        blocked(&h, BlockState::Lock);
        ctx.unlock(&m).unwrap();
        assert_eq!(waiter.join().unwrap(), (WaitResult::Interrupted, false), "{s}");
        assert!(rt.audit(&m).unwrap().chain.is_empty());
    }
}

#[test]
fn promotion_keeps_waiters_reachable() {
    let rt = park_only_runtime(WaitsetStrategy::Chain);
    let m = Arc::new(Monitor::new());
    let ctx = rt.attach();
    ctx.lock(&m);
    let (tx, rx) = mpsc::channel();
    let (rt2, m2) = (rt.clone(), m.clone());
    let waiter = thread::spawn(move || {
        let c = rt2.attach();
        tx.send(c.handle().clone()).unwrap();
        c.lock(&m2);
        let r = c.wait(&m2, None).unwrap();
        c.unlock(&m2).unwrap();
        r
    });
    let h = rx.recv().unwrap();
    blocked(&h, BlockState::Lock);
    ctx.unlock(&m).unwrap();
    blocked(&h, BlockState::Wait);
    // waiter was the last owner: it sits on the chain as a placeholder
    ctx.lock(&m);
    assert_eq!(ctx.waiters(&m).unwrap(), vec![h.id()]);
    ctx.unlock(&m).unwrap(); // promotes the waiter back to placeholder
    let before = rt.counters().promotions;
    assert!(before >= 1);
    let snap = rt.audit(&m).unwrap();
    assert_eq!(snap.owner(), None);
    assert_eq!(snap.waiters, vec![h.id()]);
    ctx.lock(&m);
    ctx.notify(&m).unwrap();
    ctx.unlock(&m).unwrap();
    assert_eq!(waiter.join().unwrap(), WaitResult::Notified);
    assert!(rt.audit(&m).unwrap().chain.is_empty());
}

#[test]
fn notify_vs_timeout_race_is_exclusive() {
    for s in STRATEGIES {
        let rt = runtime(s);
        let m = Arc::new(Monitor::new());
        let returned = Arc::new(AtomicU64::new(0));
        let notified = Arc::new(AtomicU64::new(0));
        let hs: Vec<_> = (0..3)
            .map(|i| {
                let (rt, m, returned, notified) = (rt.clone(), m.clone(), returned.clone(), notified.clone());
                thread::spawn(move || {
                    let ctx = rt.attach();
                    for k in 0..300u64 {
                        ctx.lock(&m);
                        let r = ctx.wait(&m, Some(Duration::from_micros(100 + (k * 37 + i) % 400)));
                        assert!(ctx.holds_lock(&m));
                        if r.unwrap() == WaitResult::Notified {
                            notified.fetch_add(1, Ordering::Relaxed);
                        }
                        returned.fetch_add(1, Ordering::Relaxed);
                        ctx.unlock(&m).unwrap();
                    }
                    ctx.footprint()
                })
            })
            .collect();
        let ctx = rt.attach();
        while returned.load(Ordering::Relaxed) < 900 {
            ctx.lock(&m);
            ctx.notify(&m).unwrap();
            ctx.unlock(&m).unwrap();
            thread::yield_now();
        }
        for h in hs {
            let fp = h.join().unwrap();
            assert_eq!(fp.active, 0);
            assert!(fp.allocated <= 2, "{fp:?}");
        }
        assert!(rt.audit(&m).unwrap().chain.is_empty(), "{s}");
    }
}
