//! Protected-block memory reclamation.
//!
//! [`LocalReclaimer::protected_read`] runs a closure on the block whose address
//! is stored in a location, with the guarantee that the block is not freed
//! while the closure runs. [`LocalReclaimer::safe_free`] retires a block that
//! has been unlinked from every shared location and frees whatever block the
//! ejection hands back. While a block is delayed (retired, not yet freed) its
//! address must never be stored into a shared location again.
//!
//! Blocks come either from the global allocator or from a [`BlockPool`],
//! chosen when the [`Reclaimer`] is built.

use std::marker::PhantomData;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::acquire_retire::{Domain, ProcessHandle};
use crate::block_pool::{BlockPool, PoolHandle};
use crate::{Error, Handle, Result, EMPTY};

/// Where freed blocks go.
#[derive(Debug, Clone)]
pub enum Backing {
    Global,
    Pool(Arc<BlockPool>),
}

/// Shared reclamation state for blocks holding a `T`.
#[derive(Debug)]
pub struct Reclaimer<T> {
    domain: Arc<Domain>,
    backing: Backing,
    allocated: AtomicUsize,
    freed: AtomicUsize,
    _marker: PhantomData<fn(T) -> T>,
}

impl<T: Send> Reclaimer<T> {
    /// Blocks from the global allocator.
    pub fn new(domain: Arc<Domain>) -> Arc<Self> {
        Arc::new(Reclaimer {
            domain,
            backing: Backing::Global,
            allocated: AtomicUsize::new(0),
            freed: AtomicUsize::new(0),
            _marker: PhantomData,
        })
    }

    /// Blocks from `pool`, which must fit a `T` and admit at least as many
    /// processes as `domain`.
    pub fn with_pool(domain: Arc<Domain>, pool: Arc<BlockPool>) -> Result<Arc<Self>> {
        let cfg = pool.config();
        if pool.block_size() < std::mem::size_of::<T>()
            || cfg.block_align < std::mem::align_of::<T>()
        {
            return Err(Error::InvalidConfig(format!(
                "pool blocks ({} bytes, align {}) cannot hold the element type",
                pool.block_size(),
                cfg.block_align
            )));
        }
        if cfg.processes < domain.processes() {
            return Err(Error::InvalidConfig(
                "pool admits fewer processes than the domain".into(),
            ));
        }
        Ok(Arc::new(Reclaimer {
            domain,
            backing: Backing::Pool(pool),
            allocated: AtomicUsize::new(0),
            freed: AtomicUsize::new(0),
            _marker: PhantomData,
        }))
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn backing(&self) -> &Backing {
        &self.backing
    }

    pub fn register(self: &Arc<Self>) -> Result<LocalReclaimer<T>> {
        let process = self.domain.register()?;
        let pool = match &self.backing {
            Backing::Global => None,
            Backing::Pool(pool) => Some(pool.register()?),
        };
        Ok(LocalReclaimer {
            shared: Arc::clone(self),
            process,
            pool,
        })
    }

    /// Blocks handed out so far.
    pub fn allocated(&self) -> usize {
        self.allocated.load(Ordering::Relaxed)
    }

    /// Blocks actually freed so far.
    pub fn freed(&self) -> usize {
        self.freed.load(Ordering::Relaxed)
    }
}

/// One process's view of a [`Reclaimer`].
///
/// Dropping it waits until every block it retired can be freed.
#[derive(Debug)]
pub struct LocalReclaimer<T: Send> {
    shared: Arc<Reclaimer<T>>,
    process: ProcessHandle,
    pool: Option<PoolHandle>,
}

struct ReleaseGuard<'a> {
    process: &'a mut ProcessHandle,
    slot: usize,
}

impl Drop for ReleaseGuard<'_> {
    fn drop(&mut self) {
        self.process.release(self.slot);
    }
}

impl<T: Send> LocalReclaimer<T> {
    pub fn reclaimer(&self) -> &Arc<Reclaimer<T>> {
        &self.shared
    }

    pub fn process(&mut self) -> &mut ProcessHandle {
        &mut self.process
    }

    /// Allocates a block holding `value`.
    pub fn alloc(&mut self, value: T) -> Result<NonNull<T>> {
        let ptr = match self.pool.as_mut() {
            None => NonNull::from(Box::leak(Box::new(value))),
            Some(pool) => {
                let ptr = pool.allocate()?.cast::<T>();
                // SAFETY: fresh block sized and aligned for T.
                unsafe { ptr.as_ptr().write(value) };
                ptr
            }
        };
        self.shared.allocated.fetch_add(1, Ordering::Relaxed);
        Ok(ptr)
    }

    /// Runs `f` on the block stored at `loc` (or `None` for the empty
    /// sentinel) while it is protected, using slot 0.
    ///
    /// # Safety
    ///
    /// `loc` must hold either [`EMPTY`] or the address of a live block
    /// allocated by this reclaimer, and blocks must only be freed through
    /// [`safe_free`](Self::safe_free) after being unlinked from `loc`. The
    /// location itself must satisfy [`ProcessHandle::acquire`]'s contract.
    pub unsafe fn protected_read<R>(
        &mut self,
        loc: &AtomicUsize,
        f: impl FnOnce(Option<&T>) -> R,
    ) -> R {
        // SAFETY: forwarded.
        unsafe { self.protected_read_in(0, loc, f) }
    }

    /// [`protected_read`](Self::protected_read) with an explicit slot.
    ///
    /// # Safety
    ///
    /// As for [`protected_read`](Self::protected_read).
    pub unsafe fn protected_read_in<R>(
        &mut self,
        slot: usize,
        loc: &AtomicUsize,
        f: impl FnOnce(Option<&T>) -> R,
    ) -> R {
        // SAFETY: forwarded.
        let h = unsafe { self.process.acquire(loc, slot) };
        let guard = ReleaseGuard {
            process: &mut self.process,
            slot,
        };
        // SAFETY: `h` is protected until the guard drops, so the block it
        // names cannot be freed under `f`.
        let out = f(if h == EMPTY {
            None
        } else {
            Some(unsafe { &*(h as *const T) })
        });
        drop(guard);
        out
    }

    /// Retires a block and runs one ejection step, freeing whatever comes out.
    ///
    /// # Safety
    ///
    /// `ptr` was allocated by this reclaimer, has been unlinked from every
    /// shared location, and is not already pending a free.
    pub unsafe fn safe_free(&mut self, ptr: NonNull<T>) {
        self.process
            .retire(ptr.as_ptr() as Handle)
            .expect("block addresses are never the sentinel");
        if let Some(h) = self.process.eject() {
            // SAFETY: ejected handles are unprotected blocks of ours.
            unsafe { self.free_now(NonNull::new_unchecked(h as *mut T)) };
        }
    }

    /// One ejection step without retiring anything.
    pub fn eject_step(&mut self) {
        if let Some(h) = self.process.eject() {
            // SAFETY: as in `safe_free`.
            unsafe { self.free_now(NonNull::new_unchecked(h as *mut T)) };
        }
    }

    /// Frees a block immediately.
    ///
    /// # Safety
    ///
    /// `ptr` was allocated by this reclaimer and no other process can reach it.
    pub unsafe fn free_now(&mut self, ptr: NonNull<T>) {
        match self.pool.as_mut() {
            // SAFETY: allocated by `Box::new` in `alloc`.
            None => drop(unsafe { Box::from_raw(ptr.as_ptr()) }),
            Some(pool) => {
                // SAFETY: the block holds an initialized T.
                unsafe { std::ptr::drop_in_place(ptr.as_ptr()) };
                if let Err(e) = pool.free(ptr.cast()) {
                    panic!("reclamation freed a block twice: {e}");
                }
            }
        }
        self.shared.freed.fetch_add(1, Ordering::Relaxed);
    }

    /// Frees every block this process has retired, waiting for protections
    /// held by other processes to be released.
    pub fn drain(&mut self) {
        for h in self.process.drain() {
            // SAFETY: as in `safe_free`.
            unsafe { self.free_now(NonNull::new_unchecked(h as *mut T)) };
        }
    }

    /// Blocks retired by this process and not yet freed.
    pub fn delayed(&self) -> usize {
        self.process.delayed()
    }
}

impl<T: Send> Drop for LocalReclaimer<T> {
    fn drop(&mut self) {
        self.drain();
    }
}
