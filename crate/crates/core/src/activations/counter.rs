//! Instrumentation hooks for per-element operation counts.
//!
//! Kernels are generic over [`OpCounter`]. The default [`NoCount`] compiles
//! to nothing; tests pass a [`CountOps`] to check the asymptotic cost of each
//! activation family.

use std::sync::atomic::{AtomicU64, Ordering};

pub trait OpCounter: Sync {
    fn add(&self, ops: u64);
}

/// Counter that discards everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoCount;

impl OpCounter for NoCount {
    #[inline(always)]
    fn add(&self, _ops: u64) {}
}

/// Thread-safe running total.
#[derive(Debug, Default)]
pub struct CountOps(AtomicU64);

impl CountOps {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

impl OpCounter for CountOps {
    fn add(&self, ops: u64) {
        self.0.fetch_add(ops, Ordering::Relaxed);
    }
}
