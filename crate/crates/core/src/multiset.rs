//! Multiset difference over handles, backed by a small open-addressing
//! counting table.

use crate::Handle;

const FIB: u64 = 0x9E37_79B9_7F4A_7C15;

/// Open-addressing table from handle to count.
///
/// Entries carry a generation stamp so that [`clear`](CountTable::clear) is a
/// single increment instead of a pass over the storage.
#[derive(Debug, Clone)]
pub struct CountTable {
    keys: Vec<Handle>,
    counts: Vec<u32>,
    stamps: Vec<u64>,
    generation: u64,
    bits: u32,
    len: usize,
}

impl CountTable {
    /// Table able to hold `entries` distinct keys at load factor at most 1/2.
    pub fn with_entries(entries: usize) -> Self {
        let capacity = (2 * entries.max(1)).next_power_of_two();
        CountTable {
            keys: vec![0; capacity],
            counts: vec![0; capacity],
            stamps: vec![0; capacity],
            generation: 1,
            bits: capacity.trailing_zeros(),
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.keys.len()
    }

    /// Number of distinct live keys.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.generation += 1;
        self.len = 0;
    }

    /// Grows the table if needed so that `entries` more keys fit at load 1/2.
    /// Clears the table.
    pub fn reset_for(&mut self, entries: usize) {
        if 2 * entries > self.capacity() {
            *self = CountTable::with_entries(entries);
        } else {
            self.clear();
        }
    }

    fn home(&self, key: Handle) -> usize {
        if self.bits == 0 {
            return 0;
        }
        ((key as u64).wrapping_mul(FIB) >> (64 - self.bits)) as usize
    }

    fn find(&self, key: Handle) -> (usize, bool) {
        let mask = self.capacity() - 1;
        let mut i = self.home(key);
        loop {
            if self.stamps[i] != self.generation {
                return (i, false);
            }
            if self.keys[i] == key {
                return (i, true);
            }
            i = (i + 1) & mask;
        }
    }

    pub fn insert(&mut self, key: Handle) {
        let (i, found) = self.find(key);
        if found {
            self.counts[i] += 1;
        } else {
            assert!(
                2 * (self.len + 1) <= self.capacity(),
                "count table over half full"
            );
            self.stamps[i] = self.generation;
            self.keys[i] = key;
            self.counts[i] = 1;
            self.len += 1;
        }
    }

    pub fn count(&self, key: Handle) -> u32 {
        match self.find(key) {
            (i, true) => self.counts[i],
            _ => 0,
        }
    }

    /// Decrements the count of `key` if positive. Returns whether it did.
    pub fn take(&mut self, key: Handle) -> bool {
        match self.find(key) {
            (i, true) if self.counts[i] > 0 => {
                self.counts[i] -= 1;
                true
            }
            _ => false,
        }
    }
}

/// `rl \ plist` with multiplicity: each handle appears
/// `max(count(rl, x) - count(plist, x), 0)` times. Order follows `rl`, with
/// the earliest copies of a handle being the ones cancelled.
///
/// Expected `O(|rl| + |plist|)` time.
pub fn multiset_difference(rl: &[Handle], plist: &[Handle]) -> Vec<Handle> {
    let mut table = CountTable::with_entries(plist.len());
    for &p in plist {
        table.insert(p);
    }
    rl.iter().copied().filter(|&x| !table.take(x)).collect()
}
