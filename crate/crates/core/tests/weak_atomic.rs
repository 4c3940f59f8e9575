use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering::SeqCst};
use std::sync::{Arc, Barrier};
use std::thread;

use acqret::refcount::{RcContext, RefPtr};
use acqret::weak_atomic::{Counted, Policy, Shared, WaContext, WeakAtomic};
use acqret::{Domain, Handle};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

static MADE: AtomicU64 = AtomicU64::new(0);
static DROPPED: AtomicU64 = AtomicU64::new(0);
static OVERLAPS: AtomicU64 = AtomicU64::new(0);
static DOUBLE_DESTRUCTS: AtomicU64 = AtomicU64::new(0);

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

/// A stored value. Slots are leaked rather than freed so that a copy racing
/// with a destruct is detected instead of reading freed memory.
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
        // The slot now represents the token.
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

#[test]
fn every_owned_value_destructed_exactly_once() {
    let threads = 6;
    let ops = 30_000;
    let n = 4;
    let domain = Domain::with_processes(threads);
    let cells: Arc<Vec<WeakAtomic<Instrumented>>> =
        Arc::new((0..n).map(|i| WeakAtomic::new(Some(Token::new(i)))).collect());
    let stamp = Arc::new(AtomicU64::new(n));
    let start = Arc::new(Barrier::new(threads));
    let workers: Vec<_> = (0..threads)
        .map(|t| {
            let (domain, cells, stamp, start) = (domain.clone(), cells.clone(), stamp.clone(), start.clone());
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
                let mut ctx = WaContext::<Instrumented>::register(&domain).unwrap();
                start.wait();
                for _ in 0..ops {
                    let cell = &cells[rng.random_range(0..n as usize)];
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
                        // Hand-off: the old value comes back to us, we destroy it.
                        _ => drop(cell.exchange(None)),
                    }
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    drop(cells);
    assert_eq!(OVERLAPS.load(SeqCst), 0);
    assert_eq!(DOUBLE_DESTRUCTS.load(SeqCst), 0);
    // `into_word` forgets a counted token and `from_word` revives it uncounted.
    assert_eq!(MADE.load(SeqCst), DROPPED.load(SeqCst));
}

#[test]
fn loads_see_stores_in_order() {
    let domain = Domain::with_processes(4);
    let cell = WeakAtomic::<Shared<u64>>::new(Some(Arc::new(0)));
    let done = AtomicBool::new(false);
    thread::scope(|s| {
        s.spawn(|| {
            let mut ctx = WaContext::register(&domain).unwrap();
            for g in 1..=20_000u64 {
                ctx.store(&cell, Some(Arc::new(g)));
            }
            done.store(true, SeqCst);
        });
        for _ in 0..3 {
            s.spawn(|| {
                let mut ctx = WaContext::register(&domain).unwrap();
                let mut last = 0;
                while !done.load(SeqCst) {
                    let g = *ctx.load(&cell).unwrap();
                    assert!(g >= last, "generation went from {last} back to {g}");
                    last = g;
                }
            });
        }
    });
    let last = cell.into_inner().unwrap();
    assert_eq!(*last, 20_000);
    assert_eq!(Arc::strong_count(&last), 1);
}

#[test]
fn counted_instantiation_keeps_counts_exact() {
    let domain = Domain::with_processes(6);
    let target = RefPtr::new(String::from("shared"));
    let cell = WeakAtomic::<Counted<String>>::empty();
    thread::scope(|s| {
        for _ in 0..3 {
            s.spawn(|| {
                let mut ctx = WaContext::<Counted<String>>::register(&domain).unwrap();
                let mut rc = RcContext::register(&domain).unwrap();
                for i in 0..5_000 {
                    match i % 3 {
                        0 => ctx.store(&cell, Some(rc.copy(&target))),
                        1 => ctx.store(&cell, Some(RefPtr::new(format!("{i}")))),
                        _ => {
                            if let Some(mut v) = ctx.load(&cell) {
                                assert!(v.count().unwrap() >= 1);
                            }
                        }
                    }
                }
                ctx.store(&cell, Some(rc.copy(&target)));
            });
        }
    });
    let mut target = target;
    assert_eq!(target.count(), Some(2));
    drop(cell);
    assert_eq!(target.count(), Some(1));
}
