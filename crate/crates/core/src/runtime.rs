use std::env;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::extwaitset::WaitTable;
use crate::hash::PinTable;
use crate::node::ThreadContext;
use crate::platform::{CounterSnapshot, SpinPolicy, ThreadHandle};

/// Where waitsets live.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum WaitsetStrategy {
    /// Carried in the owner's node and handed to the successor with ownership.
    #[default]
    Chain,
    /// Kept in a global table of guarded buckets indexed by identity hash.
    External,
}

impl FromStr for WaitsetStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chain" => Ok(WaitsetStrategy::Chain),
            "external" => Ok(WaitsetStrategy::External),
            other => Err(format!("unknown waitset strategy `{other}` (chain|external)")),
        }
    }
}

impl fmt::Display for WaitsetStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WaitsetStrategy::Chain => "chain",
            WaitsetStrategy::External => "external",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Config {
    pub spin: SpinPolicy,
    pub waitset_strategy: WaitsetStrategy,
    /// Stripes in the pin table; power of two.
    pub pin_stripes: usize,
    /// Buckets in the external wait table; power of two.
    pub wait_buckets: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            spin: SpinPolicy::host_default(),
            waitset_strategy: WaitsetStrategy::Chain,
            pin_stripes: 128,
            wait_buckets: 64,
        }
    }
}

impl Config {
    /// Defaults overridden by `CJM_SPIN_BUDGET`, `CJM_PAUSE_HINT` (0/1) and
    /// `CJM_WAITSET_STRATEGY` (chain|external).
    pub fn from_env() -> Self {
        let mut c = Config::default();
        if let Some(b) = env::var("CJM_SPIN_BUDGET").ok().and_then(|v| v.parse().ok()) {
            c.spin.spin_budget = b;
        }
        if let Ok(v) = env::var("CJM_PAUSE_HINT") {
            c.spin.pause_hint = !matches!(v.trim(), "0" | "false" | "no");
        }
        if let Some(s) = env::var("CJM_WAITSET_STRATEGY").ok().and_then(|v| v.parse().ok()) {
            c.waitset_strategy = s;
        }
        c
    }

    pub fn with_strategy(mut self, s: WaitsetStrategy) -> Self {
        self.waitset_strategy = s;
        self
    }

    pub fn with_spin(mut self, spin: SpinPolicy) -> Self {
        self.spin = spin;
        self
    }
}

/// Process-level state shared by every thread using a family of monitors:
/// configuration, the pin table, the external wait table and the thread
/// registry. Monitors themselves hold none of this.
pub struct Runtime {
    config: Config,
    pins: PinTable,
    waits: WaitTable,
    threads: Mutex<Vec<Arc<ThreadHandle>>>,
    next_id: AtomicU64,
}

impl Runtime {
    pub fn new(config: Config) -> Arc<Runtime> {
        assert!(config.pin_stripes.is_power_of_two());
        assert!(config.wait_buckets.is_power_of_two());
        Arc::new(Runtime {
            pins: PinTable::new(config.pin_stripes),
            waits: WaitTable::new(config.wait_buckets),
            config,
            threads: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn strategy(&self) -> WaitsetStrategy {
        self.config.waitset_strategy
    }

    pub fn pins(&self) -> &PinTable {
        &self.pins
    }

    pub(crate) fn waits(&self) -> &WaitTable {
        &self.waits
    }

    /// Registers the calling thread and returns its context.
    pub fn attach(self: &Arc<Self>) -> ThreadContext {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let handle = Arc::new(ThreadHandle::for_current(id));
        self.threads.lock().unwrap().push(handle.clone());
        ThreadContext::new(self.clone(), handle)
    }

    pub fn threads(&self) -> Vec<Arc<ThreadHandle>> {
        self.threads.lock().unwrap().clone()
    }

    pub fn thread(&self, id: u64) -> Option<Arc<ThreadHandle>> {
        self.threads.lock().unwrap().iter().find(|h| h.id() == id).cloned()
    }

    /// Sum of every registered thread's counters.
    pub fn counters(&self) -> CounterSnapshot {
        self.threads
            .lock()
            .unwrap()
            .iter()
            .fold(CounterSnapshot::default(), |acc, h| acc + h.counters.snapshot())
    }
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime").field("config", &self.config).finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_parses() {
        assert_eq!("chain".parse::<WaitsetStrategy>(), Ok(WaitsetStrategy::Chain));
        assert_eq!("External".parse::<WaitsetStrategy>(), Ok(WaitsetStrategy::External));
        assert!("bucket".parse::<WaitsetStrategy>().is_err());
    }

    #[test]
    fn registry_sums_counters() {
        let rt = Runtime::new(Config::default());
        let a = rt.attach();
        let b = rt.attach();
        assert_ne!(a.id(), b.id());
        crate::platform::Counters::bump(&a.handle().counters.parks);
        crate::platform::Counters::bump(&b.handle().counters.parks);
        assert_eq!(rt.counters().parks, 2);
        assert_eq!(rt.threads().len(), 2);
    }
}
