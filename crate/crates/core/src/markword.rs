//! The one-word monitor encoding.
//!
//! ```text
//!   63                                1   0
//!  +-----------------------------------+---+
//!  | 0                                 | 0 |  neutral: never locked, never hashed
//!  | identity hash (nonzero)           | 1 |  hashed and unlocked
//!  | address of the tail queue node    | 0 |  queued: at least one node on the chain
//!  +-----------------------------------+---+
//! ```
//!
//! Queue nodes are aligned to [`NODE_ALIGN`] bytes so bit 0 of a node
//! address is always clear.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::node::QueueNode;

/// Alignment of every [`QueueNode`]. Only one tag bit is used; the rest stay free.
pub const NODE_ALIGN: usize = 16;

const TAG: u64 = 1;

/// Largest identity hash the word can carry.
pub const MAX_HASH: u64 = u64::MAX >> 1;

/// Raw 64-bit mark word.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct MarkWord(u64);

impl MarkWord {
    pub const NEUTRAL: MarkWord = MarkWord(0);

    pub const fn from_raw(raw: u64) -> Self {
        MarkWord(raw)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub fn is_neutral(self) -> bool {
        self.0 == 0
    }

    pub fn is_hashed(self) -> bool {
        self.0 & TAG == TAG
    }

    pub fn is_queued(self) -> bool {
        self.0 != 0 && self.0 & TAG == 0
    }

    /// Hash carried by a hashed word.
    pub fn hash(self) -> Option<u64> {
        self.is_hashed().then_some(self.0 >> 1)
    }

    pub(crate) fn tail(self) -> Option<*mut QueueNode> {
        self.is_queued().then_some(self.0 as usize as *mut QueueNode)
    }

    pub(crate) fn queued(node: *const QueueNode) -> Self {
        let addr = node as usize as u64;
        debug_assert!(addr != 0 && addr.is_multiple_of(NODE_ALIGN as u64));
        MarkWord(addr)
    }
}

impl fmt::Debug for MarkWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MarkWord({:?})", decode(*self))
    }
}

/// Decoded view of a [`MarkWord`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MarkVariant {
    Neutral,
    Hashed(u64),
    /// Address of the tail node.
    Queued(usize),
}

pub fn decode(word: MarkWord) -> MarkVariant {
    if word.0 == 0 {
        MarkVariant::Neutral
    } else if word.0 & TAG == TAG {
        MarkVariant::Hashed(word.0 >> 1)
    } else {
        MarkVariant::Queued(word.0 as usize)
    }
}

pub fn encode(variant: MarkVariant) -> MarkWord {
    match variant {
        MarkVariant::Neutral => MarkWord::NEUTRAL,
        MarkVariant::Hashed(h) => encode_hashed(h),
        MarkVariant::Queued(addr) => MarkWord(addr as u64),
    }
}

pub fn encode_hashed(hash: u64) -> MarkWord {
    debug_assert!(hash != 0 && hash <= MAX_HASH, "hash {hash:#x} out of range");
    MarkWord((hash << 1) | TAG)
}

/// A monitor: one atomic mark word. Its address is its identity.
///
/// Everything else a monitor needs (owner, recursion depth, waiters, the
/// displaced hash) lives in the queue nodes on its chain.
pub struct Monitor {
    mark: AtomicU64,
}

impl Monitor {
    pub const fn new() -> Self {
        Monitor {
            mark: AtomicU64::new(0),
        }
    }

    /// Stable identity key (the cell's address).
    pub fn key(&self) -> usize {
        self as *const Monitor as usize
    }

    pub fn mark(&self) -> MarkWord {
        MarkWord(self.mark.load(Ordering::SeqCst))
    }

    /// Appends `node` as the new tail, returning the previous word.
    pub(crate) fn swap_tail(&self, node: *const QueueNode) -> MarkWord {
        MarkWord(self.mark.swap(MarkWord::queued(node).0, Ordering::SeqCst))
    }

    pub(crate) fn try_transition(&self, expected: MarkWord, desired: MarkWord) -> bool {
        self.mark
            .compare_exchange(expected.0, desired.0, Ordering::SeqCst, Ordering::Relaxed)
            .is_ok()
    }
}

impl Default for Monitor {
    fn default() -> Self {
        Monitor::new()
    }
}

impl fmt::Debug for Monitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Monitor")
            .field("key", &format_args!("{:#x}", self.key()))
            .field("mark", &self.mark())
            .finish()
    }
}
