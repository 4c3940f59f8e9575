//! A mutable cell for values whose copy and destruct are race-free safe.
//!
//! A [`WeakAtomic`] owns one value stored as a single word. `load` copies the
//! value while it is protected, `store` swaps in a new value and retires the
//! old one, which is destructed once ejected. The copy of a value therefore
//! never overlaps the destruct linked to it, which is all that a race-free
//! safe copy/destruct pair needs. Values wider than a word are boxed.

use std::marker::PhantomData;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::acquire_retire::{Domain, ProcessHandle};
use crate::refcount::{self, RefPtr};
use crate::{Handle, Result, EMPTY};

/// How values are represented as words, copied and destructed.
///
/// # Safety
///
/// `into_word` never returns [`EMPTY`]; `from_word` inverts `into_word`;
/// `copy` is safe to run concurrently with other copies of the same word as
/// long as no destruct of that word overlaps it.
pub unsafe trait Policy {
    type Value;

    fn into_word(value: Self::Value) -> Handle;

    /// Takes back ownership of a word produced by `into_word`.
    ///
    /// # Safety
    ///
    /// `word` came from `into_word` and ownership has not been taken back yet.
    unsafe fn from_word(word: Handle) -> Self::Value;

    /// Makes an owned copy of the value behind `word` without consuming it.
    ///
    /// # Safety
    ///
    /// `word` is alive: no destruct of it has started.
    unsafe fn copy(word: Handle) -> Self::Value;

    /// # Safety
    ///
    /// As for `from_word`.
    unsafe fn destruct(word: Handle) {
        // SAFETY: forwarded.
        drop(unsafe { Self::from_word(word) });
    }
}

/// Boxes the value; copies with [`Clone`] (a deep copy for most types).
pub struct Boxed<T>(PhantomData<T>);

unsafe impl<T: Clone> Policy for Boxed<T> {
    type Value = T;

    fn into_word(value: T) -> Handle {
        Box::into_raw(Box::new(value)) as Handle
    }

    unsafe fn from_word(word: Handle) -> T {
        // SAFETY: produced by `into_word`.
        *unsafe { Box::from_raw(word as *mut T) }
    }

    unsafe fn copy(word: Handle) -> T {
        // SAFETY: alive per contract.
        unsafe { &*(word as *const T) }.clone()
    }
}

/// `std::sync::Arc`: copy bumps the strong count, destruct drops it.
pub struct Shared<T>(PhantomData<T>);

unsafe impl<T> Policy for Shared<T> {
    type Value = Arc<T>;

    fn into_word(value: Arc<T>) -> Handle {
        Arc::into_raw(value) as Handle
    }

    unsafe fn from_word(word: Handle) -> Arc<T> {
        // SAFETY: produced by `Arc::into_raw`.
        unsafe { Arc::from_raw(word as *const T) }
    }

    unsafe fn copy(word: Handle) -> Arc<T> {
        // SAFETY: the word still owns a strong count.
        unsafe {
            Arc::increment_strong_count(word as *const T);
            Arc::from_raw(word as *const T)
        }
    }
}

/// This crate's [`RefPtr`]: copy adds one count, destruct removes one.
pub struct Counted<T>(PhantomData<T>);

unsafe impl<T> Policy for Counted<T> {
    type Value = RefPtr<T>;

    fn into_word(value: RefPtr<T>) -> Handle {
        value.into_word()
    }

    unsafe fn from_word(word: Handle) -> RefPtr<T> {
        // SAFETY: produced by `into_word`, carrying one count.
        unsafe { RefPtr::from_raw_word(word) }
    }

    unsafe fn copy(word: Handle) -> RefPtr<T> {
        // SAFETY: alive per contract.
        unsafe {
            refcount::increment::<T>(word);
            RefPtr::from_raw_word(word)
        }
    }
}

fn word_of<P: Policy>(value: Option<P::Value>) -> Handle {
    match value {
        Some(v) => {
            let w = P::into_word(v);
            debug_assert_ne!(w, EMPTY);
            w
        }
        None => EMPTY,
    }
}

/// # Safety
///
/// `word` is EMPTY or owned by the caller.
unsafe fn value_of<P: Policy>(word: Handle) -> Option<P::Value> {
    // SAFETY: forwarded.
    (word != EMPTY).then(|| unsafe { P::from_word(word) })
}

/// Cell owning an optional value; `None` is the empty value.
pub struct WeakAtomic<P: Policy> {
    p: AtomicUsize,
    _marker: PhantomData<P::Value>,
}

// SAFETY: values move between threads through the cell and are copied
// concurrently under protection.
unsafe impl<P: Policy> Send for WeakAtomic<P> where P::Value: Send {}
unsafe impl<P: Policy> Sync for WeakAtomic<P> where P::Value: Send + Sync {}

impl<P: Policy> std::fmt::Debug for WeakAtomic<P> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WeakAtomic")
            .field("word", &self.p.load(Ordering::Relaxed))
            .finish()
    }
}

impl<P: Policy> WeakAtomic<P> {
    pub fn new(value: Option<P::Value>) -> Self {
        WeakAtomic {
            p: AtomicUsize::new(word_of::<P>(value)),
            _marker: PhantomData,
        }
    }

    pub fn empty() -> Self {
        WeakAtomic::new(None)
    }

    /// Swaps in `value` and hands the previous value (with its destruct
    /// obligation) to the caller. Nothing is retired.
    pub fn exchange(&self, value: Option<P::Value>) -> Option<P::Value> {
        let old = self.p.swap(word_of::<P>(value), Ordering::AcqRel);
        // SAFETY: the swap transferred ownership of `old` to us.
        unsafe { value_of::<P>(old) }
    }

    /// `exchange(None)`.
    pub fn take(&self) -> Option<P::Value> {
        self.exchange(None)
    }

    /// Raw word currently stored, for identity comparisons in
    /// [`WaContext::compare_exchange`]. Must not be dereferenced.
    pub fn current_word(&self) -> Handle {
        self.p.load(Ordering::Acquire)
    }

    pub fn into_inner(self) -> Option<P::Value> {
        let w = self.p.load(Ordering::Relaxed);
        std::mem::forget(self);
        // SAFETY: we owned the cell.
        unsafe { value_of::<P>(w) }
    }
}

impl<P: Policy> Drop for WeakAtomic<P> {
    fn drop(&mut self) {
        let w = *self.p.get_mut();
        if w != EMPTY {
            // SAFETY: the cell owns its value.
            unsafe { P::destruct(w) };
        }
    }
}

/// A process's context for [`WeakAtomic`] loads and stores.
///
/// Contexts used on the same cells must share a [`Domain`]. Dropping a
/// context destructs all values it retired.
pub struct WaContext<P: Policy> {
    process: ProcessHandle,
    _marker: PhantomData<fn(P) -> P>,
}

impl<P: Policy> std::fmt::Debug for WaContext<P> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WaContext").field("process", &self.process).finish()
    }
}

impl<P: Policy> WaContext<P> {
    pub fn register(domain: &Arc<Domain>) -> Result<Self> {
        Ok(WaContext {
            process: domain.register()?,
            _marker: PhantomData,
        })
    }

    pub fn process(&self) -> &ProcessHandle {
        &self.process
    }

    /// Copy of the current value.
    pub fn load(&mut self, cell: &WeakAtomic<P>) -> Option<P::Value> {
        // SAFETY: `cell` outlives this call.
        let w = unsafe { self.process.acquire(&cell.p, 0) };
        struct Release<'a>(&'a mut ProcessHandle);
        impl Drop for Release<'_> {
            fn drop(&mut self) {
                self.0.release(0);
            }
        }
        let _guard = Release(&mut self.process);
        // SAFETY: protected, so its destruct has not started.
        (w != EMPTY).then(|| unsafe { P::copy(w) })
    }

    /// Replaces the value; the old one is destructed once safe.
    pub fn store(&mut self, cell: &WeakAtomic<P>, value: Option<P::Value>) {
        self.eject_step();
        let old = cell.p.swap(word_of::<P>(value), Ordering::AcqRel);
        if old != EMPTY {
            self.process.retire(old).expect("non-empty word");
        }
    }

    /// Stores `value` if the cell still holds the word `current`; the
    /// replaced value is retired as in [`store`](Self::store). On failure the
    /// new value is handed back.
    pub fn compare_exchange(
        &mut self,
        cell: &WeakAtomic<P>,
        current: Handle,
        value: Option<P::Value>,
    ) -> std::result::Result<(), Option<P::Value>> {
        let new = word_of::<P>(value);
        match cell
            .p
            .compare_exchange(current, new, Ordering::AcqRel, Ordering::Acquire)
        {
            Ok(old) => {
                self.eject_step();
                if old != EMPTY {
                    self.process.retire(old).expect("non-empty word");
                }
                Ok(())
            }
            // SAFETY: `new` never got published.
            Err(_) => Err(unsafe { value_of::<P>(new) }),
        }
    }

    /// Destructs one ejected value if one is ready.
    pub fn eject_step(&mut self) {
        if let Some(w) = self.process.eject() {
            // SAFETY: ejected retires are owned and unprotected.
            unsafe { P::destruct(w) };
        }
    }

    /// Destructs every value this context retired.
    pub fn drain(&mut self) {
        for w in self.process.drain() {
            // SAFETY: as in `eject_step`.
            unsafe { P::destruct(w) };
        }
    }

    pub fn delayed(&self) -> usize {
        self.process.delayed()
    }
}

impl<P: Policy> Drop for WaContext<P> {
    fn drop(&mut self) {
        self.drain();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    static DROPS: AtomicUsize = AtomicUsize::new(0);

    #[derive(Clone, Debug, PartialEq)]
    struct Noisy(u32);

    impl Drop for Noisy {
        fn drop(&mut self) {
            DROPS.fetch_add(1, Ordering::SeqCst);
        }
    }

    #[test]
    fn empty_and_value() {
        let d = Domain::with_processes(1);
        let mut ctx = WaContext::<Boxed<u32>>::register(&d).unwrap();
        let e = WeakAtomic::<Boxed<u32>>::empty();
        assert_eq!(ctx.load(&e), None);
        let c = WeakAtomic::<Boxed<u32>>::new(Some(4));
        assert_eq!(ctx.load(&c), Some(4));
    }

    #[test]
    fn wide_value_roundtrip() {
        let d = Domain::with_processes(1);
        let mut ctx = WaContext::<Boxed<[u64; 8]>>::register(&d).unwrap();
        let c = WeakAtomic::<Boxed<[u64; 8]>>::new(Some([9; 8]));
        assert_eq!(ctx.load(&c), Some([9; 8]));
    }

    #[test]
    fn exchange_and_take() {
        let c = WeakAtomic::<Boxed<u32>>::new(Some(1));
        assert_eq!(c.exchange(Some(2)), Some(1));
        assert_eq!(c.exchange(Some(1)), Some(2));
        assert_eq!(c.take(), Some(1));
        assert_eq!(c.take(), None);
    }

    #[test]
    fn store_then_drain_destructs_once() {
        DROPS.store(0, Ordering::SeqCst);
        let d = Domain::with_processes(1);
        let mut ctx = WaContext::<Boxed<Noisy>>::register(&d).unwrap();
        let c = WeakAtomic::<Boxed<Noisy>>::empty();
        ctx.store(&c, Some(Noisy(1)));
        assert_eq!(ctx.delayed(), 0);
        ctx.store(&c, Some(Noisy(2)));
        ctx.drain();
        assert_eq!(DROPS.load(Ordering::SeqCst), 1);
        drop(c);
        assert_eq!(DROPS.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn compare_exchange_semantics() {
        let d = Domain::with_processes(1);
        let mut ctx = WaContext::<Shared<u32>>::register(&d).unwrap();
        let a = Arc::new(1);
        let c = WeakAtomic::<Shared<u32>>::new(Some(Arc::clone(&a)));
        let w = c.current_word();
        assert_eq!(Arc::strong_count(&a), 2);
        let back = ctx.compare_exchange(&c, w + 8, Some(Arc::new(5))).unwrap_err();
        assert_eq!(back.as_deref(), Some(&5));
        ctx.compare_exchange(&c, w, Some(Arc::new(6))).unwrap();
        ctx.drain();
        assert_eq!(Arc::strong_count(&a), 1);
        assert_eq!(ctx.load(&c).as_deref(), Some(&6));
    }

    #[test]
    fn counted_policy_counts() {
        let d = Domain::with_processes(1);
        let mut ctx = WaContext::<Counted<u8>>::register(&d).unwrap();
        let c = WeakAtomic::<Counted<u8>>::new(Some(RefPtr::new(3)));
        let mut copy = ctx.load(&c).unwrap();
        assert_eq!(copy.count(), Some(2));
        ctx.store(&c, None);
        ctx.drain();
        assert_eq!(copy.count(), Some(1));
    }
}
