use std::sync::atomic::{AtomicUsize, Ordering::SeqCst};
use std::sync::Arc;

use crossbeam_utils::CachePadded;

use super::OpStats;
use crate::block_pool::{BlockPool, PoolConfig};
use crate::reclamation::{LocalReclaimer, Reclaimer};
use crate::{Domain, DomainConfig, Result, EMPTY};

/// A stack cell: one value and the address of the next cell (or [`EMPTY`]).
#[derive(Debug)]
pub struct StackCell {
    value: u64,
    next: AtomicUsize,
}

/// Treiber stack with protected reads.
#[derive(Debug)]
pub struct Stack {
    head: CachePadded<AtomicUsize>,
    reclaimer: Arc<Reclaimer<StackCell>>,
}

impl Stack {
    /// Stack for up to `processes` concurrent handles, cells from the global
    /// allocator.
    pub fn new(processes: usize) -> Result<Self> {
        let domain = Domain::new(DomainConfig::new(processes, 1))?;
        Ok(Stack::with_reclaimer(Reclaimer::new(domain)))
    }

    /// Stack whose cells come from a [`BlockPool`] sized for `capacity` live
    /// cells.
    pub fn with_pool(processes: usize, capacity: usize) -> Result<Self> {
        let domain = Domain::new(DomainConfig::new(processes, 1))?;
        let pool = BlockPool::new(PoolConfig::for_type::<StackCell>(processes, capacity))?;
        Ok(Stack::with_reclaimer(Reclaimer::with_pool(domain, pool)?))
    }

    /// The reclaimer's domain must be used by this stack only.
    pub fn with_reclaimer(reclaimer: Arc<Reclaimer<StackCell>>) -> Self {
        Stack {
            head: CachePadded::new(AtomicUsize::new(EMPTY)),
            reclaimer,
        }
    }

    pub fn reclaimer(&self) -> &Arc<Reclaimer<StackCell>> {
        &self.reclaimer
    }

    /// Registers the calling thread.
    pub fn handle(&self) -> Result<StackHandle<'_>> {
        Ok(StackHandle {
            stack: self,
            local: self.reclaimer.register()?,
            stats: OpStats::default(),
        })
    }

    /// Cells currently linked, by walking the list. Only meaningful when
    /// quiescent.
    pub fn len_quiescent(&mut self) -> usize {
        let mut n = 0;
        let mut p = self.head.load(SeqCst);
        while p != EMPTY {
            n += 1;
            // SAFETY: exclusive access; linked cells are live.
            p = unsafe { (*(p as *const StackCell)).next.load(SeqCst) };
        }
        n
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        let Ok(mut local) = self.reclaimer.register() else {
            return;
        };
        let mut p = self.head.swap(EMPTY, SeqCst);
        while p != EMPTY {
            let cell = p as *mut StackCell;
            // SAFETY: exclusive access; every linked cell is live and ours.
            unsafe {
                let next = (*cell).next.load(SeqCst);
                local.free_now(std::ptr::NonNull::new_unchecked(cell));
                p = next;
            }
        }
    }
}

/// A thread's handle on a [`Stack`].
#[derive(Debug)]
pub struct StackHandle<'s> {
    stack: &'s Stack,
    local: LocalReclaimer<StackCell>,
    stats: OpStats,
}

impl StackHandle<'_> {
    pub fn stats(&self) -> OpStats {
        self.stats
    }

    pub fn push(&mut self, value: u64) -> Result<()> {
        let cell = self.local.alloc(StackCell {
            value,
            next: AtomicUsize::new(EMPTY),
        })?;
        let addr = cell.as_ptr() as usize;
        let head = &*self.stack.head;
        loop {
            self.stats.protected_reads += 1;
            // SAFETY: `head` only ever holds live cells of this reclaimer.
            let ok = unsafe {
                self.local.protected_read(head, |top| {
                    let top = top.map_or(EMPTY, |c| c as *const StackCell as usize);
                    // SAFETY: `cell` is not yet shared.
                    cell.as_ref().next.store(top, SeqCst);
                    head.compare_exchange(top, addr, SeqCst, SeqCst).is_ok()
                })
            };
            if self.stats.cas(ok) {
                return Ok(());
            }
        }
    }

    pub fn pop(&mut self) -> Option<u64> {
        let head = &*self.stack.head;
        let popped = loop {
            self.stats.protected_reads += 1;
            // SAFETY: as in `push`; `top` is protected while we read its `next`.
            let attempt = unsafe {
                self.local.protected_read(head, |top| match top {
                    None => Some(None),
                    Some(cell) => {
                        let addr = cell as *const StackCell as usize;
                        let next = cell.next.load(SeqCst);
                        head.compare_exchange(addr, next, SeqCst, SeqCst)
                            .ok()
                            .map(|_| Some(addr))
                    }
                })
            };
            match attempt {
                Some(None) => return None,
                Some(Some(addr)) => {
                    self.stats.cas(true);
                    break addr;
                }
                None => {
                    self.stats.cas(false);
                }
            }
        };
        let cell = popped as *mut StackCell;
        // SAFETY: we unlinked the cell, so only we can retire it.
        unsafe {
            let value = (*cell).value;
            self.local.safe_free(std::ptr::NonNull::new_unchecked(cell));
            Some(value)
        }
    }

    /// Top value, in a constant number of steps.
    pub fn peek(&mut self) -> Option<u64> {
        self.stats.protected_reads += 1;
        // SAFETY: as in `push`.
        unsafe {
            self.local
                .protected_read(&self.stack.head, |top| top.map(|c| c.value))
        }
    }

    /// Frees this handle's delayed cells once no one protects them.
    pub fn drain(&mut self) {
        self.local.drain();
    }

    pub fn delayed(&self) -> usize {
        self.local.delayed()
    }
}
