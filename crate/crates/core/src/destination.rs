//! Single-writer atomic copy cell.
//!
//! A [`Destination`] is written by one owning process and read by anyone. On
//! top of plain writes it supports [`Destination::swcopy`], which atomically
//! copies the word stored at an arbitrary location into the cell: the read of
//! the source and the write into the cell appear to happen at one instant.
//!
//! The cell holds a [`PackedData`] word. While a copy is in flight the payload
//! is the *address* of the source and the state is [`CopyState::Copying`];
//! any reader that observes this finishes the copy on the owner's behalf with
//! a store-conditional. Load-linked/store-conditional is emulated with a
//! 16-byte compare-and-swap over `{payload, tag, state}`, where the tag is
//! bumped by every successful update, so a conditional store fails if any
//! update happened since the matching load.

use std::sync::atomic::{AtomicUsize, Ordering::SeqCst};

use portable_atomic::AtomicU128;

/// Whether the payload is a finished value or the address of a copy source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyState {
    Copying,
    Done,
}

/// Unpacked content of a [`Destination`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedData {
    pub payload: usize,
    pub state: CopyState,
    pub tag: u64,
}

impl PackedData {
    fn pack(self) -> u128 {
        let state = match self.state {
            CopyState::Copying => 1,
            CopyState::Done => 0,
        };
        (((self.tag << 1) | state) as u128) << 64 | self.payload as u64 as u128
    }

    fn unpack(word: u128) -> Self {
        let high = (word >> 64) as u64;
        PackedData {
            payload: word as u64 as usize,
            state: if high & 1 == 1 {
                CopyState::Copying
            } else {
                CopyState::Done
            },
            tag: high >> 1,
        }
    }
}

/// Tagged cell with weak load-linked / store-conditional semantics.
///
/// The tag is 63 bits; wrap-around is out of reach.
#[derive(Debug)]
pub struct LlScCell {
    body: AtomicU128,
}

/// Token returned by [`LlScCell::load_linked`]; consumed by
/// [`LlScCell::store_conditional`].
#[derive(Debug, Clone, Copy)]
pub struct Linked {
    raw: u128,
    data: PackedData,
}

impl Linked {
    pub fn data(&self) -> PackedData {
        self.data
    }
}

impl LlScCell {
    pub fn new(payload: usize) -> Self {
        let data = PackedData {
            payload,
            state: CopyState::Done,
            tag: 0,
        };
        LlScCell {
            body: AtomicU128::new(data.pack()),
        }
    }

    /// Weak load-linked. The emulation never fails spuriously, so this always
    /// returns `Some`; the `Option` keeps the weak contract visible to callers.
    pub fn load_linked(&self) -> Option<Linked> {
        let raw = self.body.load(SeqCst);
        Some(Linked {
            raw,
            data: PackedData::unpack(raw),
        })
    }

    /// Succeeds only if no successful update happened since `linked` was taken.
    pub fn store_conditional(&self, linked: Linked, payload: usize, state: CopyState) -> bool {
        let next = PackedData {
            payload,
            state,
            tag: linked.data.tag.wrapping_add(1),
        };
        self.body
            .compare_exchange(linked.raw, next.pack(), SeqCst, SeqCst)
            .is_ok()
    }

    /// Unconditional tagged store. Invalidates every outstanding link.
    fn store(&self, payload: usize, state: CopyState) {
        let current = PackedData::unpack(self.body.load(SeqCst));
        let next = PackedData {
            payload,
            state,
            tag: current.tag.wrapping_add(1),
        };
        self.body.store(next.pack(), SeqCst);
    }

    pub fn load(&self) -> PackedData {
        PackedData::unpack(self.body.load(SeqCst))
    }
}

/// Single-writer cell supporting `read`, `write` and `swcopy`.
///
/// Only the owning process may call [`write`](Destination::write) or
/// [`swcopy`](Destination::swcopy); `read` may be called by any process.
/// All three operations complete in a constant number of steps.
#[derive(Debug)]
pub struct Destination {
    data: LlScCell,
    old: AtomicUsize,
}

impl Destination {
    pub fn new(value: usize) -> Self {
        Destination {
            data: LlScCell::new(value),
            old: AtomicUsize::new(value),
        }
    }

    /// Owner-only plain write.
    pub fn write(&self, value: usize) {
        self.data.store(value, CopyState::Done);
    }

    /// Owner-only atomic copy of `*src` into this cell.
    ///
    /// # Safety
    ///
    /// Only the owner may call this, never concurrently with another `write`
    /// or `swcopy` on the same cell. `src` is published to concurrent readers,
    /// which may dereference it after this call has returned (they discard
    /// what they read in that case). The memory behind `src` must therefore
    /// stay readable while readers of this cell may still be running: it may
    /// be reused, but not unmapped.
    pub unsafe fn swcopy(&self, src: *const AtomicUsize) {
        // The previous copy has always completed by now, so state is Done.
        let prev = self.data.load();
        debug_assert_eq!(prev.state, CopyState::Done);
        self.old.store(prev.payload, SeqCst);
        self.data.store(src as usize, CopyState::Copying);
        let linked = match self.data.load_linked() {
            Some(l) => l,
            None => return,
        };
        if linked.data.state != CopyState::Copying || linked.data.payload != src as usize {
            return;
        }
        // SAFETY: the caller keeps `src` readable for the duration of the call.
        let value = unsafe { (*src).load(SeqCst) };
        // A reader may have finished the copy first; either way it is done.
        self.data.store_conditional(linked, value, CopyState::Done);
    }

    /// Reads the cell. Helps an in-flight copy to completion if it sees one.
    pub fn read(&self) -> usize {
        let linked = match self.data.load_linked() {
            Some(l) => l,
            None => match self.data.load_linked() {
                Some(l) => l,
                None => return self.old.load(SeqCst),
            },
        };
        let data = linked.data();
        match data.state {
            CopyState::Done => data.payload,
            CopyState::Copying => {
                let src = data.payload as *const AtomicUsize;
                // SAFETY: the owner's `swcopy` contract keeps the source readable.
                let value = unsafe { (*src).load(SeqCst) };
                if self.data.store_conditional(linked, value, CopyState::Done) {
                    value
                } else {
                    self.old.load(SeqCst)
                }
            }
        }
    }

    /// Current raw content, for tests and diagnostics.
    pub fn snapshot(&self) -> PackedData {
        self.data.load()
    }
}

impl Default for Destination {
    fn default() -> Self {
        Destination::new(crate::EMPTY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::EMPTY;

    #[test]
    fn write_then_read() {
        let d = Destination::new(EMPTY);
        d.write(5);
        assert_eq!(d.read(), 5);
        d.write(0);
        assert_eq!(d.read(), 0);
        assert_eq!(d.snapshot().state, CopyState::Done);
    }

    #[test]
    fn uncontended_copy() {
        let d = Destination::default();
        let src = AtomicUsize::new(7);
        unsafe { d.swcopy(&src) };
        assert_eq!(d.read(), 7);
        src.store(8, SeqCst);
        assert_eq!(d.read(), 7);
    }

    #[test]
    fn copy_of_sentinel_is_ordinary() {
        let d = Destination::new(3);
        let src = AtomicUsize::new(EMPTY);
        unsafe { d.swcopy(&src) };
        assert_eq!(d.read(), EMPTY);
    }

    #[test]
    fn old_tracks_value_before_copy() {
        let d = Destination::new(1);
        d.write(4);
        let src = AtomicUsize::new(9);
        unsafe { d.swcopy(&src) };
        assert_eq!(d.old.load(SeqCst), 4);
    }

    #[test]
    fn reader_that_wins_sc_returns_source_value() {
        let d = Destination::new(2);
        let src = AtomicUsize::new(11);
        // Stage an in-flight copy by hand, as the owner would mid-swcopy.
        d.old.store(2, SeqCst);
        d.data.store(&src as *const _ as usize, CopyState::Copying);
        assert_eq!(d.read(), 11);
        assert_eq!(d.snapshot().state, CopyState::Done);
        assert_eq!(d.snapshot().payload, 11);
    }

    #[test]
    fn reader_that_loses_sc_returns_old() {
        let d = Destination::new(2);
        let src = AtomicUsize::new(11);
        d.old.store(2, SeqCst);
        d.data.store(&src as *const _ as usize, CopyState::Copying);
        let stale = d.data.load_linked().unwrap();
        // Someone else completes the copy in between.
        assert!(d.data.store_conditional(stale, 11, CopyState::Done));
        assert!(!d.data.store_conditional(stale, 11, CopyState::Done));
        // Replay the reader's slow path with the stale link.
        let value = unsafe { (*(stale.data().payload as *const AtomicUsize)).load(SeqCst) };
        let out = if d.data.store_conditional(stale, value, CopyState::Done) {
            value
        } else {
            d.old.load(SeqCst)
        };
        assert_eq!(out, 2);
    }

    #[test]
    fn write_invalidates_pending_sc() {
        let cell = LlScCell::new(1);
        let link = cell.load_linked().unwrap();
        cell.store(1, CopyState::Done);
        assert!(!cell.store_conditional(link, 5, CopyState::Done));
        assert_eq!(cell.load().payload, 1);
    }

    #[test]
    fn pack_roundtrip() {
        for (payload, state, tag) in [
            (0usize, CopyState::Done, 0u64),
            (EMPTY, CopyState::Copying, (1 << 62) + 3),
            (0xdead_beef, CopyState::Done, 17),
        ] {
            let d = PackedData { payload, state, tag };
            assert_eq!(PackedData::unpack(d.pack()), d);
        }
    }
}
