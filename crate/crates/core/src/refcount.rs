//! Atomic reference counting with fetch-and-add counts.
//!
//! A [`RefPtr`] is both an owning reference and a shared mutable cell.
//! Copying out of a cell that may be concurrently updated acquires the
//! pointer, increments its count and releases; overwriting a cell retires the
//! old pointer instead of decrementing it, and the decrement is applied once
//! the pointer is ejected. Since the increment happens while the object is
//! protected and the delayed decrement only after every such protection is
//! released, a count never drops to zero while someone is about to increment
//! it, and counts need nothing stronger than fetch-and-add.
//!
//! Cycles are not collected.

use std::cell::{Cell, RefCell};
use std::marker::PhantomData;
use std::sync::atomic::{AtomicI64, AtomicUsize, Ordering};
use std::sync::Arc;

use crate::acquire_retire::{Domain, ProcessHandle};
use crate::{Handle, Result, EMPTY};

/// Heap object with its reference count.
#[derive(Debug)]
pub struct CountedObject<T> {
    count: AtomicI64,
    value: T,
}

impl<T> CountedObject<T> {
    /// Adds `delta` to the count and returns the previous count.
    pub fn add_counter(&self, delta: i64) -> i64 {
        self.count.fetch_add(delta, Ordering::AcqRel)
    }

    pub fn count(&self) -> i64 {
        self.count.load(Ordering::Acquire)
    }

    pub fn value(&self) -> &T {
        &self.value
    }
}

/// Reference-counted pointer that is also an atomically updatable cell.
///
/// Owning a `RefPtr` means owning one unit of its target's count. Reads and
/// updates of a `RefPtr` that other threads may access at the same time go
/// through an [`RcContext`]; exclusive access (`&mut`) needs none.
pub struct RefPtr<T> {
    p: AtomicUsize,
    _marker: PhantomData<Box<CountedObject<T>>>,
}

// SAFETY: shared access is mediated by atomics and the acquire-retire
// protocol; the payload is only handed out as `&T`.
unsafe impl<T: Send + Sync> Send for RefPtr<T> {}
unsafe impl<T: Send + Sync> Sync for RefPtr<T> {}

impl<T> std::fmt::Debug for RefPtr<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = self.p.load(Ordering::Relaxed);
        if p == EMPTY {
            f.write_str("RefPtr(null)")
        } else {
            write!(f, "RefPtr({p:#x})")
        }
    }
}

impl<T> Default for RefPtr<T> {
    fn default() -> Self {
        RefPtr::null()
    }
}

impl<T> RefPtr<T> {
    /// A fresh object with count 1.
    pub fn new(value: T) -> Self {
        let obj = Box::new(CountedObject {
            count: AtomicI64::new(0),
            value,
        });
        obj.add_counter(1);
        RefPtr::from_word(Box::into_raw(obj) as Handle)
    }

    pub fn null() -> Self {
        RefPtr::from_word(EMPTY)
    }

    fn from_word(word: Handle) -> Self {
        RefPtr {
            p: AtomicUsize::new(word),
            _marker: PhantomData,
        }
    }

    pub fn is_null(&mut self) -> bool {
        *self.p.get_mut() == EMPTY
    }

    /// The target, if any. Exclusive access keeps the target alive.
    pub fn get(&mut self) -> Option<&T> {
        self.object().map(|o| &o.value)
    }

    pub fn object(&mut self) -> Option<&CountedObject<T>> {
        let p = *self.p.get_mut();
        // SAFETY: we own a count on the target.
        (p != EMPTY).then(|| unsafe { &*(p as *const CountedObject<T>) })
    }

    /// Count of the target, if any.
    pub fn count(&mut self) -> Option<i64> {
        self.object().map(CountedObject::count)
    }

    /// Address of the target (or [`EMPTY`]).
    pub fn as_word(&mut self) -> Handle {
        *self.p.get_mut()
    }

    /// Gives up ownership of the count, returning the target's address.
    pub fn into_word(self) -> Handle {
        let p = self.p.load(Ordering::Relaxed);
        std::mem::forget(self);
        p
    }

    /// # Safety
    ///
    /// `word` is [`EMPTY`] or came from [`into_word`](Self::into_word) (or an
    /// ejected retire) for the same `T`, and carries one count.
    pub unsafe fn from_raw_word(word: Handle) -> Self {
        RefPtr::from_word(word)
    }

    /// Swaps the target of a cell without touching counts, returning the old
    /// target as an owned pointer. Used where the caller takes over the old
    /// reference instead of retiring it.
    pub fn exchange(&self, b: RefPtr<T>) -> RefPtr<T> {
        let old = self.p.swap(b.into_word(), Ordering::AcqRel);
        RefPtr::from_word(old)
    }
}

impl<T> Drop for RefPtr<T> {
    fn drop(&mut self) {
        // SAFETY: this pointer owns one count on its target.
        unsafe { decrement::<T>(*self.p.get_mut()) };
    }
}

type Destroy = unsafe fn(Handle);

thread_local! {
    static DESTROYING: Cell<bool> = const { Cell::new(false) };
    static PENDING: RefCell<Vec<(Handle, Destroy)>> = const { RefCell::new(Vec::new()) };
}

unsafe fn destroy<T>(word: Handle) {
    // SAFETY: the count reached zero, so we are the last owner.
    drop(unsafe { Box::from_raw(word as *mut CountedObject<T>) });
}

/// Drops one count on `word`; destructs the object when it was the last.
///
/// # Safety
///
/// The caller owns one count on `word` (or `word` is [`EMPTY`]).
pub(crate) unsafe fn decrement<T>(word: Handle) {
    if word == EMPTY {
        return;
    }
    // SAFETY: we own a count, so the object is alive.
    let obj = unsafe { &*(word as *const CountedObject<T>) };
    if obj.add_counter(-1) != 1 {
        return;
    }
    // Cascading destruction runs from a worklist instead of recursing.
    if DESTROYING.with(|d| d.replace(true)) {
        PENDING.with(|p| p.borrow_mut().push((word, destroy::<T> as Destroy)));
        return;
    }
    // SAFETY: last owner.
    unsafe { destroy::<T>(word) };
    while let Some((w, f)) = PENDING.with(|p| p.borrow_mut().pop()) {
        // SAFETY: queued as last owner.
        unsafe { f(w) };
    }
    DESTROYING.with(|d| d.set(false));
}

/// Adds one count to the object at `word`.
///
/// # Safety
///
/// `word` is a live object (protected or owned by the caller).
pub(crate) unsafe fn increment<T>(word: Handle) {
    if word != EMPTY {
        // SAFETY: caller guarantees liveness.
        unsafe { &*(word as *const CountedObject<T>) }.add_counter(1);
    }
}

/// A process's context for concurrent reference-counting operations.
///
/// All contexts operating on the same cells must come from the same
/// [`Domain`]. Dropping a context applies all of its delayed decrements,
/// waiting for other processes to release their protections.
pub struct RcContext<T> {
    process: ProcessHandle,
    _marker: PhantomData<fn(T) -> T>,
}

impl<T> std::fmt::Debug for RcContext<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RcContext").field("process", &self.process).finish()
    }
}

impl<T> RcContext<T> {
    /// Every context that touches the same objects must register with the
    /// same domain.
    pub fn register(domain: &Arc<Domain>) -> Result<Self> {
        Ok(RcContext {
            process: domain.register()?,
            _marker: PhantomData,
        })
    }

    pub fn process(&self) -> &ProcessHandle {
        &self.process
    }

    /// New reference to whatever `src` holds right now.
    pub fn copy(&mut self, src: &RefPtr<T>) -> RefPtr<T> {
        // SAFETY: `src` outlives this call; cells live in heap objects or on
        // the stack, which stay mapped.
        let p = unsafe { self.process.acquire(&src.p, 0) };
        // SAFETY: `p` is protected, so it cannot have been destructed.
        unsafe { increment::<T>(p) };
        self.process.release(0);
        RefPtr::from_word(p)
    }

    /// Stores `b` into `dst`, retiring the old target. The old target's
    /// decrement happens when it is ejected.
    pub fn update(&mut self, dst: &RefPtr<T>, b: RefPtr<T>) {
        let old = dst.p.swap(b.into_word(), Ordering::AcqRel);
        if old != EMPTY {
            self.process.retire(old).expect("old target is not the sentinel");
        }
        self.eject_step();
    }

    /// Runs `f` on the target of `src` without touching its count.
    pub fn with_ptr<R>(&mut self, src: &RefPtr<T>, f: impl FnOnce(Option<&T>) -> R) -> R {
        // SAFETY: as in `copy`.
        let p = unsafe { self.process.acquire(&src.p, 0) };
        struct Release<'a>(&'a mut ProcessHandle);
        impl Drop for Release<'_> {
            fn drop(&mut self) {
                self.0.release(0);
            }
        }
        let _guard = Release(&mut self.process);
        // SAFETY: protected until the guard drops.
        f((p != EMPTY).then(|| unsafe { &(*(p as *const CountedObject<T>)).value }))
    }

    /// Applies one delayed decrement if one is ready.
    pub fn eject_step(&mut self) {
        if let Some(h) = self.process.eject() {
            // SAFETY: the retire transferred the cell's count to us.
            unsafe { decrement::<T>(h) };
        }
    }

    /// Applies every delayed decrement of this process.
    pub fn drain(&mut self) {
        for h in self.process.drain() {
            // SAFETY: as in `eject_step`.
            unsafe { decrement::<T>(h) };
        }
    }

    /// Decrements retired but not yet applied.
    pub fn delayed(&self) -> usize {
        self.process.delayed()
    }
}

impl<T> Drop for RcContext<T> {
    fn drop(&mut self) {
        self.drain();
    }
}
