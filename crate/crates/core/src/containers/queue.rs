use std::ptr::NonNull;
use std::sync::atomic::{AtomicUsize, Ordering::SeqCst};
use std::sync::Arc;

use crossbeam_utils::CachePadded;
use portable_atomic::AtomicU128;

use super::OpStats;
use crate::block_pool::{BlockPool, PoolConfig};
use crate::reclamation::{LocalReclaimer, Reclaimer};
use crate::{Domain, DomainConfig, Result, EMPTY};

/// A queue cell. Its link holds the successor's address together with the
/// successor's value, so the value at the front can be read from the dummy
/// cell alone.
#[derive(Debug)]
pub struct QueueCell {
    link: AtomicU128,
}

fn link(next: usize, value: u64) -> u128 {
    (value as u128) << 64 | next as u64 as u128
}

fn unlink(word: u128) -> (usize, u64) {
    (word as u64 as usize, (word >> 64) as u64)
}

impl QueueCell {
    fn dummy() -> Self {
        QueueCell {
            link: AtomicU128::new(link(EMPTY, 0)),
        }
    }
}

fn addr_of(cell: &QueueCell) -> usize {
    cell as *const QueueCell as usize
}

/// Michael–Scott queue with a permanent dummy cell at the head.
#[derive(Debug)]
pub struct Queue {
    head: CachePadded<AtomicUsize>,
    tail: CachePadded<AtomicUsize>,
    reclaimer: Arc<Reclaimer<QueueCell>>,
}

impl Queue {
    pub fn new(processes: usize) -> Result<Self> {
        let domain = Domain::new(DomainConfig::new(processes, 1))?;
        Queue::with_reclaimer(Reclaimer::new(domain))
    }

    /// Cells from a [`BlockPool`] sized for `capacity` live cells.
    pub fn with_pool(processes: usize, capacity: usize) -> Result<Self> {
        let domain = Domain::new(DomainConfig::new(processes, 1))?;
        let pool = BlockPool::new(PoolConfig::for_type::<QueueCell>(processes, capacity + 1))?;
        Queue::with_reclaimer(Reclaimer::with_pool(domain, pool)?)
    }

    /// The reclaimer's domain must be used by this queue only.
    pub fn with_reclaimer(reclaimer: Arc<Reclaimer<QueueCell>>) -> Result<Self> {
        let dummy = {
            let mut local = reclaimer.register()?;
            local.alloc(QueueCell::dummy())?.as_ptr() as usize
        };
        Ok(Queue {
            head: CachePadded::new(AtomicUsize::new(dummy)),
            tail: CachePadded::new(AtomicUsize::new(dummy)),
            reclaimer,
        })
    }

    pub fn reclaimer(&self) -> &Arc<Reclaimer<QueueCell>> {
        &self.reclaimer
    }

    pub fn handle(&self) -> Result<QueueHandle<'_>> {
        Ok(QueueHandle {
            queue: self,
            local: self.reclaimer.register()?,
            stats: OpStats::default(),
        })
    }
}

impl Drop for Queue {
    fn drop(&mut self) {
        let Ok(mut local) = self.reclaimer.register() else {
            return;
        };
        let mut p = self.head.swap(EMPTY, SeqCst);
        while p != EMPTY {
            let cell = p as *mut QueueCell;
            // SAFETY: exclusive access; linked cells are live and ours.
            unsafe {
                let (next, _) = unlink((*cell).link.load(SeqCst));
                local.free_now(NonNull::new_unchecked(cell));
                p = next;
            }
        }
    }
}

/// A thread's handle on a [`Queue`].
#[derive(Debug)]
pub struct QueueHandle<'q> {
    queue: &'q Queue,
    local: LocalReclaimer<QueueCell>,
    stats: OpStats,
}

impl QueueHandle<'_> {
    pub fn stats(&self) -> OpStats {
        self.stats
    }

    pub fn enqueue(&mut self, value: u64) -> Result<()> {
        let cell = self.local.alloc(QueueCell::dummy())?.as_ptr() as usize;
        let tail = &*self.queue.tail;
        loop {
            self.stats.protected_reads += 1;
            // SAFETY: `tail` only holds live cells; the protected last cell
            // cannot be freed while we touch its link.
            let (done, attempts) = unsafe {
                self.local.protected_read(tail, |last| {
                    let last = last.expect("tail is never empty");
                    let current = last.link.load(SeqCst);
                    let (next, _) = unlink(current);
                    if next == EMPTY {
                        let linked = last
                            .link
                            .compare_exchange(current, link(cell, value), SeqCst, SeqCst)
                            .is_ok();
                        if linked {
                            let _ = tail.compare_exchange(addr_of(last), cell, SeqCst, SeqCst);
                        }
                        (linked, 1)
                    } else {
                        // Tail lags behind; help it along.
                        let _ = tail.compare_exchange(addr_of(last), next, SeqCst, SeqCst);
                        (false, 0)
                    }
                })
            };
            if attempts > 0 {
                self.stats.cas(done);
            }
            if done {
                return Ok(());
            }
        }
    }

    pub fn dequeue(&mut self) -> Option<u64> {
        let head = &*self.queue.head;
        let tail = &*self.queue.tail;
        let taken = loop {
            self.stats.protected_reads += 1;
            // SAFETY: `head` only holds live cells; the dummy is protected.
            let attempt = unsafe {
                self.local.protected_read(head, |dummy| {
                    let dummy = dummy.expect("head is never empty");
                    let at = addr_of(dummy);
                    let (next, value) = unlink(dummy.link.load(SeqCst));
                    if next == EMPTY {
                        return Some(None);
                    }
                    // Never let the tail point at a cell about to be retired.
                    if tail.load(SeqCst) == at {
                        let _ = tail.compare_exchange(at, next, SeqCst, SeqCst);
                    }
                    head.compare_exchange(at, next, SeqCst, SeqCst)
                        .ok()
                        .map(|_| Some((at, value)))
                })
            };
            match attempt {
                Some(None) => return None,
                Some(Some(taken)) => {
                    self.stats.cas(true);
                    break taken;
                }
                None => {
                    self.stats.cas(false);
                }
            }
        };
        let (old_dummy, value) = taken;
        // SAFETY: we moved the head past `old_dummy`, so only we retire it.
        unsafe {
            self.local
                .safe_free(NonNull::new_unchecked(old_dummy as *mut QueueCell))
        };
        Some(value)
    }

    /// Front value, in a constant number of steps.
    pub fn peek(&mut self) -> Option<u64> {
        self.stats.protected_reads += 1;
        // SAFETY: as in `dequeue`.
        unsafe {
            self.local.protected_read(&self.queue.head, |dummy| {
                let (next, value) = unlink(dummy.expect("head is never empty").link.load(SeqCst));
                (next != EMPTY).then_some(value)
            })
        }
    }

    pub fn drain(&mut self) {
        self.local.drain();
    }

    pub fn delayed(&self) -> usize {
        self.local.delayed()
    }
}
