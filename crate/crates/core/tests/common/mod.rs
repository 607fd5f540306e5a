#![allow(dead_code)]

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use cjm_core::{BlockState, Config, Runtime, SpinPolicy, ThreadHandle, WaitsetStrategy};

pub const STRATEGIES: [WaitsetStrategy; 2] = [WaitsetStrategy::Chain, WaitsetStrategy::External];

pub fn runtime(s: WaitsetStrategy) -> Arc<Runtime> {
    Runtime::new(Config::default().with_strategy(s))
}

pub fn park_only_runtime(s: WaitsetStrategy) -> Arc<Runtime> {
    Runtime::new(Config::default().with_strategy(s).with_spin(SpinPolicy::park_only()))
}

/// Polls `cond` until it holds; panics after 10 s.
pub fn eventually(what: &str, mut cond: impl FnMut() -> bool) {
    let start = Instant::now();
    while !cond() {
        assert!(start.elapsed() < Duration::from_secs(10), "timed out waiting for {what}");
        thread::sleep(Duration::from_micros(200));
    }
}

pub fn blocked(h: &ThreadHandle, state: BlockState) {
    eventually(&format!("thread {} to block in {state:?}", h.id()), || {
        h.block_state() == state
    });
}
