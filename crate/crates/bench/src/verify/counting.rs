//! Reference count census and exactly-once destruction for weak atomics.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, AtomicUsize, Ordering::SeqCst};
use std::sync::{Arc, Barrier, Mutex};
use std::thread;

use acqret::refcount::{RcContext, RefPtr};
use acqret::weak_atomic::{Policy, WaContext, WeakAtomic};
use acqret::{Domain, Handle};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Source of the reference counting module, for the structural check.
pub const REFCOUNT_SOURCE: &str = include_str!("../../../core/src/refcount.rs");

/// Returns the forbidden count operations used outside tests, and whether
/// `count.fetch_add` appears at all.
pub fn count_update_audit(src: &str) -> (Vec<&'static str>, bool) {
    let body = &src[..src.find("#[cfg(test)]").unwrap_or(src.len())];
    let banned = ["compare_exchange", "compare_and_swap", "fetch_update", "count.store", "count.swap"]
        .into_iter()
        .filter(|b| body.contains(b))
        .collect();
    (banned, body.contains("count.fetch_add"))
}

#[derive(Debug, Default, Clone)]
pub struct CensusReport {
    pub ops: u64,
    pub created: usize,
    /// Copies that found their object already destructed.
    pub early_increments: u64,
    /// Surviving objects whose count differs from the cells referencing them.
    pub count_mismatches: u64,
    /// Objects destructed other than once after teardown.
    pub destruct_errors: u64,
    /// Unreferenced objects still alive before teardown.
    pub survivors: u64,
}

impl CensusReport {
    pub fn clean(&self) -> bool {
        self.early_increments == 0 && self.count_mismatches == 0 && self.destruct_errors == 0 && self.survivors == 0
    }
}

struct Census {
    destructs: Vec<AtomicU8>,
    next_id: AtomicUsize,
}

struct Tracked {
    id: usize,
    census: Arc<Census>,
}

impl Drop for Tracked {
    fn drop(&mut self) {
        self.census.destructs[self.id].fetch_add(1, SeqCst);
    }
}

fn tracked(census: &Arc<Census>) -> RefPtr<Tracked> {
    let id = census.next_id.fetch_add(1, SeqCst);
    RefPtr::new(Tracked {
        id,
        census: Arc::clone(census),
    })
}

/// `threads` workers run `ops` random copies, drops and updates each over
/// `n` shared cells, then counts and destructions are audited.
pub fn refcount_census(threads: usize, n: usize, ops: u64, seed: u64) -> CensusReport {
    let census = Arc::new(Census {
        destructs: (0..n + threads * ops as usize).map(|_| AtomicU8::new(0)).collect(),
        next_id: AtomicUsize::new(0),
    });
    let domain = Domain::with_processes(threads);
    let cells: Vec<RefPtr<Tracked>> = (0..n).map(|_| tracked(&census)).collect();
    let early = AtomicU64::new(0);
    let start = Barrier::new(threads);
    thread::scope(|s| {
        for t in 0..threads {
            let (domain, cells, census, start, early) = (&domain, &cells, &census, &start, &early);
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let mut ctx = RcContext::register(domain).expect("registration");
                let mut held: Vec<RefPtr<Tracked>> = Vec::new();
                start.wait();
                for _ in 0..ops {
                    let i = rng.random_range(0..n);
                    match rng.random_range(0..10) {
                        0..=4 => {
                            let mut r = ctx.copy(&cells[i]);
                            let id = r.get().expect("cells are never null").id;
                            if census.destructs[id].load(SeqCst) != 0 {
                                early.fetch_add(1, SeqCst);
                            }
                            if held.len() < 4 {
                                held.push(r);
                            }
                        }
                        5 => drop(held.pop()),
                        6..=7 => ctx.update(&cells[i], tracked(census)),
                        _ => {
                            let shared = ctx.copy(&cells[rng.random_range(0..n)]);
                            ctx.update(&cells[i], shared);
                        }
                    }
                }
            });
        }
    });
    let mut cells = cells;
    let mut r = CensusReport {
        ops: threads as u64 * ops,
        created: census.next_id.load(SeqCst),
        early_increments: early.load(SeqCst),
        ..Default::default()
    };
    let mut refs: HashMap<usize, i64> = HashMap::new();
    for c in cells.iter_mut() {
        *refs.entry(c.get().expect("non-null").id).or_default() += 1;
    }
    for c in cells.iter_mut() {
        let id = c.get().expect("non-null").id;
        r.count_mismatches += u64::from(c.count() != Some(refs[&id]));
    }
    for id in 0..r.created {
        if !refs.contains_key(&id) && census.destructs[id].load(SeqCst) != 1 {
            r.survivors += 1;
        }
    }
    drop(cells);
    for id in 0..r.created {
        r.destruct_errors += u64::from(census.destructs[id].load(SeqCst) != 1);
    }
    r
}

static MADE: AtomicU64 = AtomicU64::new(0);
static DROPPED: AtomicU64 = AtomicU64::new(0);
static OVERLAPS: AtomicU64 = AtomicU64::new(0);
static DOUBLE_DESTRUCTS: AtomicU64 = AtomicU64::new(0);
/// The counters above are global; runs take turns.
static EXCLUSIVE: Mutex<()> = Mutex::new(());

#[derive(Debug)]
struct Token {
    gen: u64,
}

impl Token {
    fn new(gen: u64) -> Self {
        MADE.fetch_add(1, SeqCst);
        Token { gen }
    }
}

impl Drop for Token {
    fn drop(&mut self) {
        DROPPED.fetch_add(1, SeqCst);
    }
}

/// Slots are leaked, so a copy racing a destruct is observed rather than
/// turning into a use after free.
struct Slot {
    gen: u64,
    copiers: AtomicUsize,
    destructed: AtomicBool,
    owned: AtomicBool,
}

struct Instrumented;

unsafe impl Policy for Instrumented {
    type Value = Token;

    fn into_word(value: Token) -> Handle {
        let slot = Box::leak(Box::new(Slot {
            gen: value.gen,
            copiers: AtomicUsize::new(0),
            destructed: AtomicBool::new(false),
            owned: AtomicBool::new(true),
        }));
        std::mem::forget(value);
        slot as *const Slot as Handle
    }

    unsafe fn from_word(word: Handle) -> Token {
        let slot = unsafe { &*(word as *const Slot) };
        if !slot.owned.swap(false, SeqCst) {
            DOUBLE_DESTRUCTS.fetch_add(1, SeqCst);
        }
        Token { gen: slot.gen }
    }

    unsafe fn copy(word: Handle) -> Token {
        let slot = unsafe { &*(word as *const Slot) };
        slot.copiers.fetch_add(1, SeqCst);
        if slot.destructed.load(SeqCst) {
            OVERLAPS.fetch_add(1, SeqCst);
        }
        let t = Token::new(slot.gen);
        slot.copiers.fetch_sub(1, SeqCst);
        t
    }

    unsafe fn destruct(word: Handle) {
        let slot = unsafe { &*(word as *const Slot) };
        slot.destructed.store(true, SeqCst);
        if slot.copiers.load(SeqCst) != 0 {
            OVERLAPS.fetch_add(1, SeqCst);
        }
        drop(unsafe { Self::from_word(word) });
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ExactlyOnceReport {
    pub ops: u64,
    pub made: u64,
    pub dropped: u64,
    /// Copies that overlapped a destruct of the same value.
    pub overlaps: u64,
    pub double_destructs: u64,
}

impl ExactlyOnceReport {
    pub fn clean(&self) -> bool {
        self.overlaps == 0 && self.double_destructs == 0 && self.made == self.dropped
    }
}

/// Loads, stores, compare-exchanges and hand-offs on `n` weak atomics with an
/// instrumented policy; `ops` per thread.
pub fn weak_atomic_exactly_once(threads: usize, n: usize, ops: u64, seed: u64) -> ExactlyOnceReport {
    let _turn = EXCLUSIVE.lock().unwrap_or_else(|e| e.into_inner());
    for c in [&MADE, &DROPPED, &OVERLAPS, &DOUBLE_DESTRUCTS] {
        c.store(0, SeqCst);
    }
    let domain = Domain::with_processes(threads);
    let cells: Vec<WeakAtomic<Instrumented>> = (0..n).map(|i| WeakAtomic::new(Some(Token::new(i as u64)))).collect();
    let stamp = AtomicU64::new(n as u64);
    let start = Barrier::new(threads);
    thread::scope(|s| {
        for t in 0..threads {
            let (domain, cells, stamp, start) = (&domain, &cells, &stamp, &start);
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let mut ctx = WaContext::<Instrumented>::register(domain).expect("registration");
                start.wait();
                for _ in 0..ops {
                    let cell = &cells[rng.random_range(0..n)];
                    match rng.random_range(0..8) {
                        0..=3 => drop(ctx.load(cell)),
                        4..=5 => {
                            let v = rng.random_bool(0.9).then(|| Token::new(stamp.fetch_add(1, SeqCst)));
                            ctx.store(cell, v);
                        }
                        6 => {
                            let w = cell.current_word();
                            let _ = ctx.compare_exchange(cell, w, Some(Token::new(stamp.fetch_add(1, SeqCst))));
                        }
                        _ => drop(cell.take()),
                    }
                }
            });
        }
    });
    drop(cells);
    ExactlyOnceReport {
        ops: threads as u64 * ops,
        made: MADE.load(SeqCst),
        dropped: DROPPED.load(SeqCst),
        overlaps: OVERLAPS.load(SeqCst),
        double_destructs: DOUBLE_DESTRUCTS.load(SeqCst),
    }
}
