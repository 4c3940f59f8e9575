use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering::SeqCst};
use std::sync::{Arc, Barrier};
use std::thread;

use acqret::multiset::multiset_difference;
use acqret::{Domain, DomainConfig, Error, Handle, ProcessHandle, EMPTY};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Handles index into `gens`. A handle's generation is odd while destructed
/// and is bumped on every eject and reuse, so a reader can tell whether its
/// protected handle was destructed under it.
struct Arena {
    gens: Vec<AtomicU64>,
    locs: Vec<AtomicUsize>,
}

fn stress(threads: usize, c: usize, ops: usize, seed: u64) -> (u64, usize) {
    let locs = 16;
    let per_thread = 256;
    let domain = Domain::new(DomainConfig::new(threads, c)).unwrap();
    let arena = Arc::new(Arena {
        gens: (0..locs + threads * per_thread)
            .map(|i| AtomicU64::new(u64::from(i >= locs)))
            .collect(),
        locs: (0..locs).map(AtomicUsize::new).collect(),
    });
    let stop = Arc::new(AtomicBool::new(false));
    let bound_hits = Arc::new(AtomicUsize::new(0));
    let start = Arc::new(Barrier::new(threads + 2));

    let sampler = {
        let (domain, stop, hits, start) = (domain.clone(), stop.clone(), bound_hits.clone(), start.clone());
        thread::spawn(move || {
            start.wait();
            while !stop.load(SeqCst) {
                let census = domain.delayed_census();
                let over = census.iter().filter(|&&d| d > domain.per_process_bound()).count();
                let total: usize = census.iter().sum();
                hits.fetch_add(over + usize::from(total > domain.total_bound()), SeqCst);
                thread::yield_now();
            }
        })
    };

    let workers: Vec<_> = (0..threads)
        .map(|t| {
            let (domain, arena, start) = (domain.clone(), arena.clone(), start.clone());
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let mut me = domain.register().unwrap();
                let mut free: Vec<Handle> = (0..per_thread).map(|i| locs + t * per_thread + i).collect();
                let mut held: Vec<Option<(Handle, u64)>> = vec![None; c];
                let mut violations = 0u64;
                let stale = |h: Handle, gen: u64| u64::from(arena.gens[h].load(SeqCst) != gen);
                start.wait();
                for _ in 0..ops {
                    let slot = rng.random_range(0..c);
                    match rng.random_range(0..10) {
                        0..=3 => {
                            if let Some((h, g)) = held[slot].take() {
                                violations += stale(h, g);
                                me.release(slot);
                            }
                            let loc = &arena.locs[rng.random_range(0..locs)];
                            // SAFETY: `arena` outlives every process.
                            let h = unsafe { me.acquire(loc, slot) };
                            let g = arena.gens[h].load(SeqCst);
                            if g % 2 == 1 {
                                violations += 1;
                            }
                            held[slot] = Some((h, g));
                        }
                        4..=5 => {
                            if let Some((h, g)) = held[slot].take() {
                                violations += stale(h, g);
                                me.release(slot);
                            }
                        }
                        6..=8 => {
                            let Some(fresh) = free.pop() else { continue };
                            arena.gens[fresh].fetch_add(1, SeqCst);
                            let old = arena.locs[rng.random_range(0..locs)].swap(fresh, SeqCst);
                            me.retire(old).unwrap();
                            if let Some(h) = me.eject() {
                                arena.gens[h].fetch_add(1, SeqCst);
                                free.push(h);
                            }
                        }
                        _ => {
                            if let Some(h) = me.eject() {
                                arena.gens[h].fetch_add(1, SeqCst);
                                free.push(h);
                            }
                        }
                    }
                    for (h, g) in held.iter().flatten() {
                        violations += stale(*h, *g);
                    }
                    assert!(me.delayed() <= domain.per_process_bound());
                }
                for s in 0..c {
                    me.release(s);
                }
                drop(me.drain());
                violations
            })
        })
        .collect();
    start.wait();
    let violations = workers.into_iter().map(|h| h.join().unwrap()).sum();
    stop.store(true, SeqCst);
    sampler.join().unwrap();
    (violations, bound_hits.load(SeqCst))
}

#[test]
fn canary_stress_small() {
    let (violations, over_bound) = stress(4, 2, 20_000, 1);
    assert_eq!(violations, 0);
    assert_eq!(over_bound, 0);
}

#[test]
fn canary_stress_single_slot() {
    let (violations, over_bound) = stress(3, 1, 20_000, 2);
    assert_eq!(violations, 0);
    assert_eq!(over_bound, 0);
}

fn oracle(rl: &[Handle], plist: &[Handle]) -> Vec<Handle> {
    let mut out = rl.to_vec();
    out.sort_unstable();
    let mut p = plist.to_vec();
    p.sort_unstable();
    let mut res = Vec::new();
    let mut j = 0;
    for h in out {
        while j < p.len() && p[j] < h {
            j += 1;
        }
        if j < p.len() && p[j] == h {
            j += 1;
        } else {
            res.push(h);
        }
    }
    res
}

proptest! {
    #[test]
    fn difference_matches_sort_and_subtract(
        rl in prop::collection::vec(0usize..12, 0..64),
        plist in prop::collection::vec(prop_oneof![0usize..12, Just(EMPTY)], 0..64),
    ) {
        let mut got = multiset_difference(&rl, &plist);
        got.sort_unstable();
        prop_assert_eq!(got, oracle(&rl, &plist));
    }

    #[test]
    fn difference_is_subsequence_of_rl(
        rl in prop::collection::vec(0usize..6, 0..32),
        plist in prop::collection::vec(0usize..6, 0..16),
    ) {
        let got = multiset_difference(&rl, &plist);
        let mut it = rl.iter();
        for h in &got {
            prop_assert!(it.any(|x| x == h));
        }
    }
}

#[test]
fn one_more_register_than_processes_fails() {
    let p = 6;
    let domain = Domain::new(DomainConfig::new(p, 2)).unwrap();
    let start = Arc::new(Barrier::new(p + 1));
    let spawned: Vec<_> = (0..=p)
        .map(|_| {
            let (domain, start) = (domain.clone(), start.clone());
            thread::spawn(move || {
                start.wait();
                let r = domain.register();
                // Hold on to the registration until everyone has tried.
                thread::sleep(std::time::Duration::from_millis(50));
                r.map(|h| h.pid())
            })
        })
        .collect();
    let results: Vec<_> = spawned.into_iter().map(|h| h.join().unwrap()).collect();
    let mut pids: Vec<usize> = results.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    pids.sort_unstable();
    assert_eq!(pids, (0..p).collect::<Vec<_>>());
    let errors: Vec<_> = results.into_iter().filter_map(|r| r.err()).collect();
    assert!(matches!(errors.as_slice(), [Error::CapacityExhausted { .. }]));
}

#[test]
fn pid_is_reused_after_drop() {
    let domain = Domain::with_processes(1);
    let a = domain.register().unwrap();
    assert!(domain.register().is_err());
    drop(a);
    assert_eq!(domain.register().unwrap().pid(), 0);
}

// Single-process scripts, replayed against a reference that runs a full
// ejection pass whenever its ready list is empty.

#[derive(Clone, Copy, Debug)]
enum Step {
    Acq(usize),
    Rel(usize),
    Update(usize),
    Copy01,
    Eject,
}

const ALPHABET: [Step; 8] = [
    Step::Acq(0),
    Step::Acq(1),
    Step::Rel(0),
    Step::Rel(1),
    Step::Update(0),
    Step::Update(1),
    Step::Copy01,
    Step::Eject,
];

#[derive(Default)]
struct Reference {
    slots: [Option<Handle>; 2],
    rlist: Vec<Handle>,
    ready: Vec<Handle>,
}

impl Reference {
    fn eject(&mut self) -> Option<Handle> {
        if self.ready.is_empty() {
            let plist: Vec<Handle> = self.slots.iter().flatten().copied().collect();
            let out = multiset_difference(&self.rlist, &plist);
            for h in &out {
                let i = self.rlist.iter().position(|x| x == h).unwrap();
                self.rlist.remove(i);
            }
            self.ready = out;
            self.ready.reverse();
        }
        self.ready.pop()
    }
}

fn sorted(mut v: Vec<Handle>) -> Vec<Handle> {
    v.sort_unstable();
    v
}

/// Bookkeeping for the safety check. An acquire on a location is linked to
/// the next update of that location, identified by the location's version.
#[derive(Default)]
struct Links {
    versions: [u64; 2],
    // (handle, location, version it replaced)
    retires: Vec<(Handle, usize, u64)>,
    // (location, version seen) per slot
    held: [Option<(usize, u64)>; 2],
    ejected: HashMap<Handle, usize>,
}

impl Links {
    fn update(&mut self, loc: usize, old: Handle) {
        self.retires.push((old, loc, self.versions[loc]));
        self.versions[loc] += 1;
    }

    /// Ejected copies of `h` never exceed retires of `h` that no held
    /// protection is linked to.
    fn check(&self, h: Handle) -> bool {
        let records = self.retires.iter().filter(|r| r.0 == h);
        let free = records
            .filter(|&&(_, loc, ver)| !self.held.contains(&Some((loc, ver))))
            .count();
        self.ejected.get(&h).copied().unwrap_or(0) <= free
    }
}

fn replay(script: &[Step]) {
    let domain = Domain::new(DomainConfig::new(1, 2)).unwrap();
    let mut me: ProcessHandle = domain.register().unwrap();
    let locs = [AtomicUsize::new(0), AtomicUsize::new(1)];
    let mut next = 2;
    let mut reference = Reference::default();
    let mut links = Links::default();
    let mut ejected = Vec::new();
    let mut ref_ejected = Vec::new();
    for step in script {
        match *step {
            Step::Acq(i) => {
                let h = unsafe { me.acquire(&locs[i], i) };
                assert_eq!(h, locs[i].load(SeqCst));
                reference.slots[i] = Some(h);
                links.held[i] = Some((i, links.versions[i]));
            }
            Step::Rel(i) => {
                me.release(i);
                reference.slots[i] = None;
                links.held[i] = None;
            }
            Step::Update(_) | Step::Copy01 => {
                let (loc, new) = match *step {
                    Step::Update(i) => {
                        next += 1;
                        (i, next - 1)
                    }
                    _ => (1, locs[0].load(SeqCst)),
                };
                let old = locs[loc].swap(new, SeqCst);
                me.retire(old).unwrap();
                reference.rlist.push(old);
                links.update(loc, old);
            }
            Step::Eject => {
                if let Some(h) = me.eject() {
                    *links.ejected.entry(h).or_default() += 1;
                    assert!(links.check(h), "unsafe eject of {h} in {script:?}");
                    ejected.push(h);
                }
                if let Some(h) = reference.eject() {
                    ref_ejected.push(h);
                }
            }
        }
    }
    ejected.extend(me.drain());
    reference.slots = [None, None];
    while let Some(h) = reference.eject() {
        ref_ejected.push(h);
    }
    assert_eq!(sorted(ejected), sorted(ref_ejected), "{script:?}");
    assert_eq!(me.delayed(), 0);
}
#[test]
fn scripts_match_eager_reference_exhaustively() {
    let mut scripts: Vec<Vec<Step>> = vec![vec![]];
    let mut frontier = scripts.clone();
    for _ in 0..5 {
        frontier = frontier
            .iter()
            .flat_map(|s| {
                ALPHABET.iter().map(move |st| {
                    let mut s = s.clone();
                    s.push(*st);
                    s
                })
            })
            .collect();
        scripts.extend(frontier.iter().cloned());
    }
    assert_eq!(scripts.len(), (0..=5).map(|k| 8usize.pow(k)).sum::<usize>());
    for s in &scripts {
        replay(s);
    }
}

#[test]
fn long_random_scripts_match_eager_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20_000 {
        let len = rng.random_range(6..=10);
        let script: Vec<Step> = (0..len).map(|_| ALPHABET[rng.random_range(0..8)]).collect();
        replay(&script);
    }
}
