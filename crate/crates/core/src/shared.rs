//! Shared memory cells.
//!
//! Every word that more than one thread may touch (leaf slots, status
//! fields, child links, descriptor fields) is a [`SharedWord`]. All accesses
//! go through `load`/`store`/`compare_exchange`, which announce themselves to
//! the deterministic scheduler in [`crate::sim`] when a simulation is active
//! on the calling thread. Outside a simulation the hook is a single relaxed
//! load of a global counter.

use std::sync::atomic::{fence, AtomicU64, Ordering};

use crate::sim;

#[repr(transparent)]
pub struct SharedWord(AtomicU64);

impl SharedWord {
    pub const fn new(value: u64) -> SharedWord {
        SharedWord(AtomicU64::new(value))
    }

    fn addr(&self) -> usize {
        self as *const SharedWord as usize
    }

    #[inline]
    pub fn load(&self) -> u64 {
        sim::before_access(self.addr(), false);
        self.0.load(Ordering::SeqCst)
    }

    #[inline]
    pub fn store(&self, value: u64) {
        sim::before_access(self.addr(), true);
        self.0.store(value, Ordering::SeqCst)
    }

    /// Single-word CAS. `Err` carries the value actually observed.
    #[inline]
    pub fn compare_exchange(&self, current: u64, new: u64) -> Result<u64, u64> {
        sim::before_access(self.addr(), true);
        self.0
            .compare_exchange(current, new, Ordering::SeqCst, Ordering::SeqCst)
    }

    /// Read without a scheduling point. Only for quiescent checkers and for
    /// nodes that are not yet published.
    pub fn load_quiescent(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

impl std::fmt::Debug for SharedWord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#x}", self.load_quiescent())
    }
}

/// Full barrier issued before a leaf is scanned.
#[inline]
pub fn barrier() {
    fence(Ordering::SeqCst);
}
