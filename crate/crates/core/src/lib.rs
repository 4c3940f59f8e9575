//! Acquire-retire: protection against read-destruct races with expected
//! constant time overhead.
//!
//! A process that wants to read a resource handle out of a shared location and
//! then *use* it calls [`ProcessHandle::acquire`], and [`ProcessHandle::release`]
//! when done. A process that overwrites a handle in a shared location calls
//! [`ProcessHandle::retire`] on the old handle, and destructs whatever
//! [`ProcessHandle::eject`] hands back. Any handle returned by `eject` is no
//! longer protected by an acquire linked to its retire.
//!
//! On top of that interface this crate provides:
//!
//! - [`reclamation`]: protected reads and deferred frees of memory blocks.
//! - [`containers`]: a lock-free stack and queue with constant-step `peek`.
//! - [`refcount`]: atomic reference counted pointers that count with
//!   fetch-and-add only.
//! - [`weak_atomic`]: a mutable cell for any value with race-free safe copy
//!   and destruct.
//! - [`block_pool`]: constant-time allocate/free of fixed-size blocks.
//!
//! The low-level building block is the single-writer atomic copy cell in
//! [`destination`], used for every announcement slot.

pub mod acquire_retire;
pub mod block_pool;
pub mod containers;
pub mod destination;
mod error;
pub mod multiset;
pub mod reclamation;
pub mod refcount;
pub mod weak_atomic;

pub use acquire_retire::{Domain, DomainConfig, ProcessHandle};
pub use error::{Error, Result};

/// A resource handle: one machine word, usually an address.
pub type Handle = usize;

/// Reserved handle denoting "no value". Never a legal resource handle.
pub const EMPTY: Handle = usize::MAX;
