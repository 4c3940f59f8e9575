//! Lock-free stack and queue of words with constant-step `peek`.
//!
//! Cells are reclaimed through [`crate::reclamation`], so a cell address is
//! never recycled while some process holds it protected; that rules out ABA
//! on the single-word compare-and-swaps without tags.

mod queue;
mod stack;

pub use queue::{Queue, QueueCell, QueueHandle};
pub use stack::{Stack, StackCell, StackHandle};

/// Step counters kept by a container handle.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpStats {
    /// Protected reads performed (one per loop iteration of an update).
    pub protected_reads: u64,
    /// Compare-and-swap attempts on the container's shared words.
    pub cas_attempts: u64,
    pub cas_failures: u64,
}

impl OpStats {
    fn cas(&mut self, ok: bool) -> bool {
        self.cas_attempts += 1;
        if !ok {
            self.cas_failures += 1;
        }
        ok
    }
}
