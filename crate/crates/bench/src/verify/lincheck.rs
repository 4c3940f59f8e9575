//! Exhaustive linearizability check for short two-thread histories.

use std::collections::VecDeque;
use std::fmt::Debug;
use std::sync::atomic::{AtomicU64, Ordering::SeqCst};
use std::sync::Barrier;
use std::thread;

use acqret::containers::{Queue, Stack};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sequential specification of an object.
pub trait Spec: Clone + Default {
    type Op: Copy + Debug;
    type Ret: Copy + Debug + PartialEq;
    fn apply(&mut self, op: Self::Op) -> Self::Ret;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Put(u64),
    Take,
}

#[derive(Debug, Clone, Default)]
pub struct StackSpec(Vec<u64>);

impl Spec for StackSpec {
    type Op = Op;
    type Ret = Option<u64>;

    fn apply(&mut self, op: Op) -> Option<u64> {
        match op {
            Op::Put(v) => {
                self.0.push(v);
                None
            }
            Op::Take => self.0.pop(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct QueueSpec(VecDeque<u64>);

impl Spec for QueueSpec {
    type Op = Op;
    type Ret = Option<u64>;

    fn apply(&mut self, op: Op) -> Option<u64> {
        match op {
            Op::Put(v) => {
                self.0.push_back(v);
                None
            }
            Op::Take => self.0.pop_front(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Event<O, R> {
    pub op: O,
    pub ret: R,
    pub invoke: u64,
    pub respond: u64,
}

/// True if some order of the events respects each thread's program order
/// and real-time precedence and replays correctly against `S`.
pub fn linearizable<S: Spec>(threads: &[Vec<Event<S::Op, S::Ret>>]) -> bool {
    fn search<S: Spec>(threads: &[Vec<Event<S::Op, S::Ret>>], next: &mut [usize], spec: &S) -> bool {
        if threads.iter().zip(next.iter()).all(|(t, &i)| i == t.len()) {
            return true;
        }
        // Earliest response among pending events: nothing invoked after it may go first.
        let horizon = threads
            .iter()
            .zip(next.iter())
            .filter_map(|(t, &i)| t.get(i).map(|e| e.respond))
            .min()
            .expect("some event pending");
        for k in 0..threads.len() {
            let Some(e) = threads[k].get(next[k]) else { continue };
            if e.invoke > horizon {
                continue;
            }
            let mut s = spec.clone();
            if s.apply(e.op) != e.ret {
                continue;
            }
            next[k] += 1;
            let ok = search(threads, next, &s);
            next[k] -= 1;
            if ok {
                return true;
            }
        }
        false
    }
    search(threads, &mut vec![0; threads.len()], &S::default())
}

/// A container under test: one handle per thread.
pub trait Subject: Sync {
    type H<'a>
    where
        Self: 'a;
    fn fresh() -> Self;
    fn handle(&self) -> Self::H<'_>;
    fn run(h: &mut Self::H<'_>, op: Op) -> Option<u64>;
}

impl Subject for Stack {
    type H<'a> = acqret::containers::StackHandle<'a>;

    fn fresh() -> Self {
        Stack::new(2).expect("valid config")
    }

    fn handle(&self) -> Self::H<'_> {
        Stack::handle(self).expect("two handles fit")
    }

    fn run(h: &mut Self::H<'_>, op: Op) -> Option<u64> {
        match op {
            Op::Put(v) => {
                h.push(v).expect("global allocator");
                None
            }
            Op::Take => h.pop(),
        }
    }
}

impl Subject for Queue {
    type H<'a> = acqret::containers::QueueHandle<'a>;

    fn fresh() -> Self {
        Queue::new(2).expect("valid config")
    }

    fn handle(&self) -> Self::H<'_> {
        Queue::handle(self).expect("two handles fit")
    }

    fn run(h: &mut Self::H<'_>, op: Op) -> Option<u64> {
        match op {
            Op::Put(v) => {
                h.enqueue(v).expect("global allocator");
                None
            }
            Op::Take => h.dequeue(),
        }
    }
}

/// All scripts of `0..=max_len` operations; `Put` values are unique per thread.
pub fn scripts(thread: u64, max_len: usize) -> Vec<Vec<Op>> {
    let mut out = Vec::new();
    for len in 0..=max_len {
        for bits in 0..1u32 << len {
            out.push(
                (0..len)
                    .map(|i| {
                        if bits >> i & 1 == 1 {
                            Op::Put(thread * 100 + i as u64)
                        } else {
                            Op::Take
                        }
                    })
                    .collect(),
            );
        }
    }
    out
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LincheckReport {
    pub histories: u64,
    pub failures: u64,
    /// Histories where the two threads' intervals overlapped at all.
    pub overlapping: u64,
}

/// Runs every pair of per-thread scripts `reps` times on a fresh object and
/// checks each recorded history.
pub fn check_all<T: Subject, S: Spec<Op = Op, Ret = Option<u64>>>(max_len: usize, reps: usize, seed: u64) -> LincheckReport {
    let mut report = LincheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (scripts(1, max_len), scripts(2, max_len));
    for sa in &a {
        for sb in &b {
            for _ in 0..reps {
                let jitter = [rng.random::<u64>(), rng.random::<u64>()];
                let history = record::<T>([sa, sb], jitter);
                report.histories += 1;
                report.failures += u64::from(!linearizable::<S>(&history));
                let span = |t: &Vec<Event<Op, Option<u64>>>| t.first().zip(t.last()).map(|(f, l)| (f.invoke, l.respond));
                if let (Some(x), Some(y)) = (span(&history[0]), span(&history[1])) {
                    report.overlapping += u64::from(x.0 < y.1 && y.0 < x.1);
                }
            }
        }
    }
    report
}

fn record<T: Subject>(scripts: [&Vec<Op>; 2], jitter: [u64; 2]) -> Vec<Vec<Event<Op, Option<u64>>>> {
    let object = T::fresh();
    let clock = AtomicU64::new(0);
    let start = Barrier::new(2);
    thread::scope(|s| {
        let workers: Vec<_> = (0..2)
            .map(|t| {
                let (object, clock, start, script) = (&object, &clock, &start, scripts[t]);
                let mut bits = jitter[t];
                s.spawn(move || {
                    let mut h = object.handle();
                    let mut events = Vec::with_capacity(script.len());
                    start.wait();
                    for &op in script {
                        if bits & 1 == 1 {
                            thread::yield_now();
                        }
                        bits >>= 1;
                        let invoke = clock.fetch_add(1, SeqCst);
                        let ret = T::run(&mut h, op);
                        let respond = clock.fetch_add(1, SeqCst);
                        events.push(Event { op, ret, invoke, respond });
                    }
                    events
                })
            })
            .collect();
        workers.into_iter().map(|w| w.join().expect("worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(op: Op, ret: Option<u64>, invoke: u64, respond: u64) -> Event<Op, Option<u64>> {
        Event { op, ret, invoke, respond }
    }

    #[test]
    fn script_counts() {
        assert_eq!(scripts(1, 4).len(), 31);
        assert_eq!(scripts(1, 4).iter().filter(|s| s.len() == 4).count(), 16);
    }

    #[test]
    fn accepts_concurrent_reordering() {
        // Pop overlaps the push and sees its value.
        let h = vec![vec![ev(Op::Put(1), None, 0, 3)], vec![ev(Op::Take, Some(1), 1, 2)]];
        assert!(linearizable::<StackSpec>(&h));
    }

    #[test]
    fn rejects_value_from_the_future() {
        let h = vec![vec![ev(Op::Put(1), None, 2, 3)], vec![ev(Op::Take, Some(1), 0, 1)]];
        assert!(!linearizable::<StackSpec>(&h));
    }

    #[test]
    fn rejects_lifo_order_for_a_queue() {
        let h = vec![
            vec![ev(Op::Put(1), None, 0, 1), ev(Op::Put(2), None, 2, 3)],
            vec![ev(Op::Take, Some(2), 4, 5)],
        ];
        assert!(linearizable::<StackSpec>(&h));
        assert!(!linearizable::<QueueSpec>(&h));
    }

    #[test]
    fn rejects_lost_value() {
        let h = vec![vec![ev(Op::Put(1), None, 0, 1)], vec![ev(Op::Take, None, 2, 3)]];
        assert!(!linearizable::<QueueSpec>(&h));
    }

    #[test]
    fn real_objects_pass_short_scripts() {
        let r = check_all::<Stack, StackSpec>(2, 3, 5);
        assert_eq!(r.failures, 0);
        let r = check_all::<Queue, QueueSpec>(2, 3, 5);
        assert_eq!(r.failures, 0);
        assert_eq!(r.histories, 7 * 7 * 3);
    }
}
