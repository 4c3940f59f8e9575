//! Acquire/retire: canary stress, space bounds and reference oracles.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering::SeqCst};
use std::sync::{Arc, Barrier};
use std::thread;

use acqret::multiset::multiset_difference;
use acqret::{Domain, DomainConfig, Handle, ProcessHandle};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sort both lists and subtract.
pub fn sort_and_subtract(rl: &[Handle], plist: &[Handle]) -> Vec<Handle> {
    let mut rl = rl.to_vec();
    let mut p = plist.to_vec();
    rl.sort_unstable();
    p.sort_unstable();
    let mut out = Vec::new();
    let mut j = 0;
    for h in rl {
        while j < p.len() && p[j] < h {
            j += 1;
        }
        if j < p.len() && p[j] == h {
            j += 1;
        } else {
            out.push(h);
        }
    }
    out
}

/// Random `(rl, plist)` pairs over a small handle universe; returns the
/// number of mismatches against [`sort_and_subtract`].
pub fn multiset_oracle(pairs: usize, max_len: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..pairs {
        let universe = rng.random_range(1..=max_len as Handle);
        let rl: Vec<Handle> = (0..rng.random_range(0..=max_len)).map(|_| rng.random_range(0..universe)).collect();
        let plist: Vec<Handle> = (0..rng.random_range(0..=max_len)).map(|_| rng.random_range(0..universe)).collect();
        let mut got = multiset_difference(&rl, &plist);
        got.sort_unstable();
        bad += usize::from(got != sort_and_subtract(&rl, &plist));
    }
    bad
}

#[derive(Debug, Default, Clone, Copy)]
pub struct StressReport {
    pub ops: u64,
    /// Reads of a handle that was ejected while protected.
    pub canary_hits: u64,
    /// Sampled instants with a process above `3cP` or the total above `3cP²`.
    pub bound_violations: u64,
    /// Census snapshots of the total; per-process counts are checked every op.
    pub samples: u64,
    pub max_local: usize,
    pub max_total: usize,
}

/// `threads` processes with `c` slots acquire, release, overwrite-and-retire
/// and eject at random over a small set of locations. Handles index a
/// generation table: odd means destructed, and every eject or reuse bumps it.
pub fn canary_stress(threads: usize, c: usize, ops_per_thread: usize, seed: u64) -> StressReport {
    let locs = 16;
    let per_thread = 4 * 3 * c * threads;
    let domain = Domain::new(DomainConfig::new(threads, c)).expect("valid config");
    let gens: Arc<Vec<AtomicU64>> = Arc::new(
        (0..locs + threads * per_thread)
            .map(|i| AtomicU64::new(u64::from(i >= locs)))
            .collect(),
    );
    let cells: Arc<Vec<AtomicUsize>> = Arc::new((0..locs).map(AtomicUsize::new).collect());
    let stop = Arc::new(AtomicBool::new(false));
    let start = Arc::new(Barrier::new(threads + 2));

    let sampler = {
        let (domain, stop, start) = (domain.clone(), stop.clone(), start.clone());
        thread::spawn(move || {
            let mut r = StressReport::default();
            start.wait();
            while !stop.load(SeqCst) {
                let census = domain.delayed_census();
                let total: usize = census.iter().sum();
                let local = census.iter().copied().max().unwrap_or(0);
                r.bound_violations += census.iter().filter(|&&d| d > domain.per_process_bound()).count() as u64;
                r.bound_violations += u64::from(total > domain.total_bound());
                r.max_local = r.max_local.max(local);
                r.max_total = r.max_total.max(total);
                r.samples += 1;
                thread::yield_now();
            }
            r
        })
    };

    let workers: Vec<_> = (0..threads)
        .map(|t| {
            let (domain, gens, cells, start) = (domain.clone(), gens.clone(), cells.clone(), start.clone());
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                let mut me = domain.register().expect("one pid per worker");
                let mut free: Vec<Handle> = (0..per_thread).map(|i| locs + t * per_thread + i).collect();
                let mut held: Vec<Option<(Handle, u64)>> = vec![None; c];
                let mut r = StressReport::default();
                let stale = |h: Handle, g: u64| u64::from(gens[h].load(SeqCst) != g);
                let destruct = |h: Handle, free: &mut Vec<Handle>| {
                    gens[h].fetch_add(1, SeqCst);
                    free.push(h);
                };
                start.wait();
                for _ in 0..ops_per_thread {
                    let slot = rng.random_range(0..c);
                    match rng.random_range(0..10) {
                        0..=3 => {
                            if let Some((h, g)) = held[slot].take() {
                                r.canary_hits += stale(h, g);
                                me.release(slot);
                            }
                            let loc = &cells[rng.random_range(0..locs)];
                            // SAFETY: `cells` outlives every process.
                            let h = unsafe { me.acquire(loc, slot) };
                            let g = gens[h].load(SeqCst);
                            r.canary_hits += g % 2;
                            held[slot] = Some((h, g));
                        }
                        4..=5 => {
                            if let Some((h, g)) = held[slot].take() {
                                r.canary_hits += stale(h, g);
                                me.release(slot);
                            }
                        }
                        6..=8 => {
                            if let Some(fresh) = free.pop() {
                                gens[fresh].fetch_add(1, SeqCst);
                                let old = cells[rng.random_range(0..locs)].swap(fresh, SeqCst);
                                me.retire(old).expect("cells never hold the sentinel");
                            }
                            if let Some(h) = me.eject() {
                                destruct(h, &mut free);
                            }
                        }
                        _ => {
                            if let Some(h) = me.eject() {
                                destruct(h, &mut free);
                            }
                        }
                    }
                    for &(h, g) in held.iter().flatten() {
                        r.canary_hits += stale(h, g);
                    }
                    let d = me.delayed();
                    r.max_local = r.max_local.max(d);
                    r.bound_violations += u64::from(d > domain.per_process_bound());
                    r.ops += 1;
                    if r.ops % 64 == 0 {
                        let total: usize = domain.delayed_census().iter().sum();
                        r.max_total = r.max_total.max(total);
                        r.bound_violations += u64::from(total > domain.total_bound());
                        r.samples += 1;
                    }
                }
                for s in 0..c {
                    me.release(s);
                }
                me.drain();
                r
            })
        })
        .collect();
    start.wait();
    let mut total = StressReport::default();
    for w in workers {
        let r = w.join().expect("worker panicked");
        total.ops += r.ops;
        total.canary_hits += r.canary_hits;
        total.bound_violations += r.bound_violations;
        total.max_local = total.max_local.max(r.max_local);
        total.max_total = total.max_total.max(r.max_total);
        total.samples += r.samples;
    }
    stop.store(true, SeqCst);
    let s = sampler.join().expect("sampler panicked");
    total.bound_violations += s.bound_violations;
    total.samples += s.samples;
    total.max_local = total.max_local.max(s.max_local);
    total.max_total = total.max_total.max(s.max_total);
    total
}

/// Script steps for the single-process oracle, over two locations and two
/// slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    /// Acquire location `i` into slot `i`.
    Acq(usize),
    Rel(usize),
    /// Overwrite location `i` with a fresh handle and retire the old one.
    Update(usize),
    /// Overwrite location 1 with the handle in location 0 and retire the old one.
    Copy01,
    Eject,
}

pub const ALPHABET: [Step; 8] = [
    Step::Acq(0),
    Step::Acq(1),
    Step::Rel(0),
    Step::Rel(1),
    Step::Update(0),
    Step::Update(1),
    Step::Copy01,
    Step::Eject,
];

/// Reference: every eject with an empty ready list runs a full pass at once.
#[derive(Default)]
struct Eager {
    slots: [Option<Handle>; 2],
    rlist: Vec<Handle>,
    ready: Vec<Handle>,
}

impl Eager {
    fn eject(&mut self) -> Option<Handle> {
        if self.ready.is_empty() {
            let plist: Vec<Handle> = self.slots.iter().flatten().copied().collect();
            let out = multiset_difference(&self.rlist, &plist);
            for h in &out {
                let i = self.rlist.iter().position(|x| x == h).expect("ejected from rlist");
                self.rlist.remove(i);
            }
            self.ready = out;
            self.ready.reverse();
        }
        self.ready.pop()
    }
}

/// Links each retire to the update that produced it, so an eject can be
/// checked against the protections linked to it.
#[derive(Default)]
struct Links {
    versions: [u64; 2],
    retires: Vec<(Handle, usize, u64)>,
    held: [Option<(usize, u64)>; 2],
    ejected: HashMap<Handle, usize>,
}

impl Links {
    fn safe(&self, h: Handle) -> bool {
        let unprotected = self
            .retires
            .iter()
            .filter(|&&(x, loc, ver)| x == h && !self.held.contains(&Some((loc, ver))))
            .count();
        self.ejected.get(&h).copied().unwrap_or(0) <= unprotected
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum ScriptFailure {
    UnsafeEject(Handle),
    WrongRead,
    Mismatch { ours: Vec<Handle>, reference: Vec<Handle> },
    Leftover(usize),
}

/// Replays a script against the deamortized implementation and the eager
/// reference. Ejects may happen at different steps, but every eject must be
/// safe and both must have ejected the same multiset once drained.
pub fn replay(script: &[Step]) -> Result<(), ScriptFailure> {
    let domain = Domain::new(DomainConfig::new(1, 2)).expect("valid config");
    let mut me: ProcessHandle = domain.register().expect("fresh domain");
    let locs = [AtomicUsize::new(0), AtomicUsize::new(1)];
    let mut next = 2;
    let mut eager = Eager::default();
    let mut links = Links::default();
    let (mut ours, mut reference) = (Vec::new(), Vec::new());
    for &step in script {
        match step {
            Step::Acq(i) => {
                // SAFETY: `locs` outlives the domain's only process.
                let h = unsafe { me.acquire(&locs[i], i) };
                if h != locs[i].load(SeqCst) {
                    return Err(ScriptFailure::WrongRead);
                }
                eager.slots[i] = Some(h);
                links.held[i] = Some((i, links.versions[i]));
            }
            Step::Rel(i) => {
                me.release(i);
                eager.slots[i] = None;
                links.held[i] = None;
            }
            Step::Update(_) | Step::Copy01 => {
                let (loc, new) = match step {
                    Step::Update(i) => {
                        next += 1;
                        (i, next - 1)
                    }
                    _ => (1, locs[0].load(SeqCst)),
                };
                let old = locs[loc].swap(new, SeqCst);
                me.retire(old).expect("locations never hold the sentinel");
                eager.rlist.push(old);
                links.retires.push((old, loc, links.versions[loc]));
                links.versions[loc] += 1;
            }
            Step::Eject => {
                if let Some(h) = me.eject() {
                    *links.ejected.entry(h).or_default() += 1;
                    if !links.safe(h) {
                        return Err(ScriptFailure::UnsafeEject(h));
                    }
                    ours.push(h);
                }
                reference.extend(eager.eject());
            }
        }
    }
    ours.extend(me.drain());
    eager.slots = [None, None];
    while let Some(h) = eager.eject() {
        reference.push(h);
    }
    ours.sort_unstable();
    reference.sort_unstable();
    if ours != reference {
        return Err(ScriptFailure::Mismatch { ours, reference });
    }
    match me.delayed() {
        0 => Ok(()),
        n => Err(ScriptFailure::Leftover(n)),
    }
}

/// Every script up to `exhaustive_len` steps, then `random` scripts of
/// length `exhaustive_len + 1 ..= max_len`. Returns (scripts run, failures).
pub fn script_oracle(exhaustive_len: usize, max_len: usize, random: usize, seed: u64) -> (usize, Vec<(Vec<Step>, ScriptFailure)>) {
    let mut failures = Vec::new();
    let mut run = 0;
    let mut frontier: Vec<Vec<Step>> = vec![vec![]];
    for len in 0..=exhaustive_len {
        if len > 0 {
            frontier = frontier
                .iter()
                .flat_map(|s| {
                    ALPHABET.iter().map(move |&st| {
                        let mut s = s.clone();
                        s.push(st);
                        s
                    })
                })
                .collect();
        }
        for s in &frontier {
            run += 1;
            if let Err(e) = replay(s) {
                failures.push((s.clone(), e));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random {
        let len = rng.random_range(exhaustive_len + 1..=max_len.max(exhaustive_len + 1));
        let s: Vec<Step> = (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect();
        run += 1;
        if let Err(e) = replay(&s) {
            failures.push((s, e));
        }
    }
    (run, failures)
}
