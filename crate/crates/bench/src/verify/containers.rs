//! Value conservation and peek step counts for the stack and queue.

use std::sync::atomic::{AtomicBool, Ordering::SeqCst};
use std::sync::{Arc, Barrier};
use std::thread;

use acqret::containers::{OpStats, Queue, Stack};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Stack,
    Queue,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ConservationReport {
    pub ops: u64,
    pub pushed: u64,
    pub popped: u64,
    pub left: u64,
    /// Values popped twice, never pushed, or pushed and never seen again.
    pub mismatches: u64,
    /// Values a consumer saw out of their producer's order (queue only).
    pub order_violations: u64,
    /// Cells allocated minus cells freed once the container is gone.
    pub leaked_cells: i64,
}

fn tag(t: usize, seq: u64) -> u64 {
    (t as u64) << 40 | seq
}

fn untag(v: u64) -> (usize, u64) {
    ((v >> 40) as usize, v & ((1 << 40) - 1))
}

enum Handle<'a> {
    S(acqret::containers::StackHandle<'a>),
    Q(acqret::containers::QueueHandle<'a>),
}

impl Handle<'_> {
    fn put(&mut self, v: u64) {
        match self {
            Handle::S(h) => h.push(v),
            Handle::Q(h) => h.enqueue(v),
        }
        .expect("pool sized for every value")
    }

    fn take(&mut self) -> Option<u64> {
        match self {
            Handle::S(h) => h.pop(),
            Handle::Q(h) => h.dequeue(),
        }
    }
}

/// `threads` workers each run `ops` random puts and takes on a pool-backed
/// container; afterwards, everything put must have been taken exactly once
/// or still be inside.
pub fn conservation(kind: Kind, threads: usize, ops: u64, seed: u64) -> ConservationReport {
    let capacity = threads * ops as usize + 1;
    let stack = (kind == Kind::Stack).then(|| Stack::with_pool(threads + 1, capacity).expect("valid config"));
    let queue = (kind == Kind::Queue).then(|| Queue::with_pool(threads + 1, capacity).expect("valid config"));
    let handle = || match (&stack, &queue) {
        (Some(s), _) => Handle::S(s.handle().expect("registration")),
        (_, Some(q)) => Handle::Q(q.handle().expect("registration")),
        _ => unreachable!(),
    };
    let start = Barrier::new(threads);
    let results: Vec<(Vec<u64>, Vec<u64>)> = thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|t| {
                let (start, handle) = (&start, &handle);
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(t as u64);
                    let mut h = handle();
                    let (mut pushed, mut popped) = (Vec::new(), Vec::new());
                    start.wait();
                    for i in 0..ops {
                        if rng.random_bool(0.5) {
                            h.put(tag(t, i));
                            pushed.push(tag(t, i));
                        } else if let Some(v) = h.take() {
                            popped.push(v);
                        }
                    }
                    (pushed, popped)
                })
            })
            .collect();
        workers.into_iter().map(|w| w.join().expect("worker panicked")).collect()
    });
    let mut r = ConservationReport {
        ops: threads as u64 * ops,
        ..Default::default()
    };
    let mut pushed = Vec::new();
    let mut seen = Vec::new();
    for (p, q) in results {
        if kind == Kind::Queue {
            r.order_violations += producer_order_violations(&q);
        }
        r.pushed += p.len() as u64;
        r.popped += q.len() as u64;
        pushed.extend(p);
        seen.extend(q);
    }
    let mut rest = Vec::new();
    {
        let mut h = handle();
        while let Some(v) = h.take() {
            rest.push(v);
        }
    }
    if kind == Kind::Queue {
        r.order_violations += producer_order_violations(&rest);
    }
    r.left = rest.len() as u64;
    seen.extend(rest);
    pushed.sort_unstable();
    seen.sort_unstable();
    r.mismatches = multiset_distance(&pushed, &seen);
    let (allocated, freed) = match (stack, queue) {
        (Some(st), _) => {
            let rec = Arc::clone(st.reclaimer());
            drop(st);
            (rec.allocated(), rec.freed())
        }
        (_, Some(qu)) => {
            let rec = Arc::clone(qu.reclaimer());
            drop(qu);
            (rec.allocated(), rec.freed())
        }
        _ => unreachable!(),
    };
    r.leaked_cells = allocated as i64 - freed as i64;
    r
}

fn producer_order_violations(values: &[u64]) -> u64 {
    let mut last = std::collections::HashMap::new();
    let mut bad = 0;
    for &v in values {
        let (t, seq) = untag(v);
        if let Some(prev) = last.insert(t, seq) {
            bad += u64::from(prev >= seq);
        }
    }
    bad
}

/// Size of the symmetric difference of two sorted multisets.
fn multiset_distance(a: &[u64], b: &[u64]) -> u64 {
    let (mut i, mut j, mut d) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => {
                i += 1;
                d += 1;
            }
            std::cmp::Ordering::Greater => {
                j += 1;
                d += 1;
            }
        }
    }
    d + (a.len() - i + b.len() - j) as u64
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PeekReport {
    pub peeks: u64,
    pub stack: OpStats,
    pub queue: OpStats,
    /// Updates completed by the contending threads while peeks ran.
    pub contending_updates: u64,
}

impl PeekReport {
    /// One protected read and no compare-and-swap per peek.
    pub fn fixed_budget(&self) -> bool {
        [self.stack, self.queue]
            .iter()
            .all(|s| s.protected_reads == self.peeks && s.cas_attempts == 0)
    }
}

/// Peeks `peeks` times on a stack and a queue while `updaters` threads
/// keep pushing and popping.
pub fn peek_steps(updaters: usize, peeks: u64) -> PeekReport {
    let s = Stack::new(updaters + 1).expect("valid config");
    let q = Queue::new(updaters + 1).expect("valid config");
    let stop = AtomicBool::new(false);
    let start = Barrier::new(updaters + 1);
    thread::scope(|sc| {
        let workers: Vec<_> = (0..updaters)
            .map(|_| {
                sc.spawn(|| {
                    let mut sh = s.handle().expect("registration");
                    let mut qh = q.handle().expect("registration");
                    let mut n = 0u64;
                    start.wait();
                    while !stop.load(SeqCst) {
                        sh.push(n).expect("global allocator");
                        qh.enqueue(n).expect("global allocator");
                        if !n.is_multiple_of(3) {
                            sh.pop();
                            qh.dequeue();
                        }
                        n += 1;
                    }
                    n
                })
            })
            .collect();
        let mut sh = s.handle().expect("registration");
        let mut qh = q.handle().expect("registration");
        start.wait();
        for i in 0..peeks {
            sh.peek();
            qh.peek();
            if i % 1024 == 0 {
                thread::yield_now();
            }
        }
        stop.store(true, SeqCst);
        let contending_updates = workers.into_iter().map(|w| w.join().expect("updater panicked")).sum();
        PeekReport {
            peeks,
            stack: sh.stats(),
            queue: qh.stats(),
            contending_updates,
        }
    })
}
