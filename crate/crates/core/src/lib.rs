//! Compact Java-style monitors built on MCS queue locks.
//!
//! A [`Monitor`] is a single 64-bit mark word: neutral, hashed, or a
//! pointer to the tail of an MCS queue of per-thread nodes. Waitsets ride
//! on the queue nodes, so a monitor needs no side structure. Threads use
//! monitors through a [`ThreadContext`] obtained from a shared [`Runtime`].
//!
//! ```
//! use cjm_core::{Config, Monitor, Runtime};
//!
//! let rt = Runtime::new(Config::default());
//! let ctx = rt.attach();
//! let m = Monitor::new();
//! ctx.lock(&m);
//! let h = ctx.hash_of(&m);
//! ctx.unlock(&m).unwrap();
//! assert_eq!(ctx.hash_of(&m), h);
//! ```

mod audit;
mod extwaitset;
mod hash;
mod lock;
mod markword;
mod mcs;
mod node;
mod platform;
mod runtime;
mod waitset;

pub use audit::{AuditError, ChainSnapshot, NodeView};
pub use hash::{generate_hash, PinTable, HASH_MASK};
pub use lock::IllegalMonitorState;
pub use markword::{decode, encode, encode_hashed, MarkVariant, MarkWord, Monitor, MAX_HASH, NODE_ALIGN};
pub use mcs::McsLock;
pub use node::{Footprint, NodeId, NodeStatus, QueueNode, ThreadContext};
pub use platform::{
    spin_then_wait, BlockState, CounterSnapshot, Counters, ParkOutcome, SpinPolicy, ThreadHandle, Wake,
};
pub use runtime::{Config, Runtime, WaitsetStrategy};
pub use waitset::{interrupt, WaitResult};
