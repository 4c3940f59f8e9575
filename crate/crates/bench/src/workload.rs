//! Loads and stores on an array of shared pointers.
//!
//! Every worker picks an index uniformly at random and either loads (copy,
//! read, drop) or stores a freshly allocated object. Each array entry sits on
//! its own cache line.

use std::cell::Cell;
use std::fmt;
use std::ptr::NonNull;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use acqret::refcount::{RcContext, RefPtr};
use acqret::weak_atomic::{Counted, WaContext, WeakAtomic};
use acqret::{Domain, DomainConfig};
use crossbeam_utils::CachePadded;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CANARY: u64 = 0x5eed_cafe_f00d_beef;

/// Default fast-path attempts before an acquire falls back to the copy.
pub const DEFAULT_FAST_TRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellImpl {
    Refcount,
    WeakAtomicCounted,
    LockBaseline,
}

impl CellImpl {
    pub const ALL: [CellImpl; 3] = [CellImpl::Refcount, CellImpl::WeakAtomicCounted, CellImpl::LockBaseline];

    pub fn name(self) -> &'static str {
        match self {
            CellImpl::Refcount => "refcount",
            CellImpl::WeakAtomicCounted => "weak-atomic-counted",
            CellImpl::LockBaseline => "lock-baseline",
        }
    }
}

impl fmt::Display for CellImpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellImpl {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        CellImpl::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| ConfigError::UnknownImpl(s.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("store probability {0} is outside [0, 1]")]
    StoreProb(f64),
    #[error("need at least one thread")]
    NoThreads,
    #[error("need at least one reference")]
    NoRefs,
    #[error("duration must be positive and finite, got {0}")]
    Duration(f64),
    #[error("unknown cell implementation {0:?}")]
    UnknownImpl(String),
    #[error(transparent)]
    Library(#[from] acqret::Error),
}

/// How long a run lasts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stop {
    /// Wall-clock seconds.
    After(f64),
    /// Operations per worker, for reproducible runs.
    Ops(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadConfig {
    pub n_refs: usize,
    pub store_prob: f64,
    pub threads: usize,
    pub stop: Stop,
    pub cell_impl: CellImpl,
    pub seed: u64,
    pub fast_path_tries: usize,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            n_refs: 10,
            store_prob: 0.1,
            threads: 1,
            stop: Stop::After(3.0),
            cell_impl: CellImpl::Refcount,
            seed: 0,
            fast_path_tries: DEFAULT_FAST_TRIES,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.store_prob) {
            return Err(ConfigError::StoreProb(self.store_prob));
        }
        if self.threads == 0 {
            return Err(ConfigError::NoThreads);
        }
        if self.n_refs == 0 {
            return Err(ConfigError::NoRefs);
        }
        if let Stop::After(s) = self.stop {
            if !(s.is_finite() && s > 0.0) {
                return Err(ConfigError::Duration(s));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub cell_impl: CellImpl,
    pub threads: usize,
    pub n_refs: usize,
    pub store_prob: f64,
    /// Measured wall-clock time of the timed phase.
    pub duration_s: f64,
    pub ops_total: u64,
    pub loads: u64,
    pub stores: u64,
    pub throughput: f64,
    /// Canary and census failures; zero on a correct run.
    pub violations: u64,
}

/// Destruct tallies, one cache line per worker plus one for everyone else.
struct Census {
    destroyed: Box<[CachePadded<AtomicU64>]>,
}

thread_local! {
    static CENSUS_SLOT: Cell<usize> = const { Cell::new(0) };
}

impl Census {
    fn new(threads: usize) -> Self {
        Census {
            destroyed: (0..=threads).map(|_| CachePadded::new(AtomicU64::new(0))).collect(),
        }
    }

    fn destroyed(&self) -> u64 {
        self.destroyed.iter().map(|c| c.load(Ordering::SeqCst)).sum()
    }
}

struct Payload {
    canary: u64,
    census: NonNull<Census>,
}

// SAFETY: `census` outlives every payload of its run and is only used atomically.
unsafe impl Send for Payload {}
unsafe impl Sync for Payload {}

impl Payload {
    fn new(census: &Census) -> Self {
        Payload {
            canary: CANARY,
            census: NonNull::from(census),
        }
    }
}

impl Drop for Payload {
    fn drop(&mut self) {
        // SAFETY: see the `Send` impl.
        let census = unsafe { self.census.as_ref() };
        let slot = CENSUS_SLOT.with(Cell::get).min(census.destroyed.len() - 1);
        census.destroyed[slot].fetch_add(1, Ordering::Relaxed);
        self.canary = 0;
    }
}

/// One worker's view of the array.
trait Worker {
    /// Returns false if the loaded object failed its canary check.
    fn load(&mut self, i: usize) -> bool;
    fn store(&mut self, i: usize, census: &Census);
}

trait Array: Sync {
    type W<'a>: Worker
    where
        Self: 'a;
    fn worker(&self) -> Result<Self::W<'_>, ConfigError>;
    /// Count mismatches after all workers finished and drained.
    fn census(&mut self) -> u64;
}

struct RcArray {
    domain: Arc<Domain>,
    cells: Vec<CachePadded<RefPtr<Payload>>>,
}

struct RcWorker<'a> {
    cells: &'a [CachePadded<RefPtr<Payload>>],
    ctx: RcContext<Payload>,
}

impl Worker for RcWorker<'_> {
    fn load(&mut self, i: usize) -> bool {
        let mut r = self.ctx.copy(&self.cells[i]);
        r.get().is_some_and(|p| p.canary == CANARY)
    }

    fn store(&mut self, i: usize, census: &Census) {
        self.ctx.update(&self.cells[i], RefPtr::new(Payload::new(census)));
    }
}

impl Array for RcArray {
    type W<'a> = RcWorker<'a>;

    fn worker(&self) -> Result<RcWorker<'_>, ConfigError> {
        Ok(RcWorker {
            cells: &self.cells,
            ctx: RcContext::register(&self.domain)?,
        })
    }

    fn census(&mut self) -> u64 {
        self.cells
            .iter_mut()
            .map(|c| u64::from(c.count() != Some(1)))
            .sum()
    }
}

struct WaArray {
    domain: Arc<Domain>,
    cells: Vec<CachePadded<WeakAtomic<Counted<Payload>>>>,
}

struct WaWorker<'a> {
    cells: &'a [CachePadded<WeakAtomic<Counted<Payload>>>],
    ctx: WaContext<Counted<Payload>>,
}

impl Worker for WaWorker<'_> {
    fn load(&mut self, i: usize) -> bool {
        match self.ctx.load(&self.cells[i]) {
            Some(mut r) => r.get().is_some_and(|p| p.canary == CANARY),
            None => false,
        }
    }

    fn store(&mut self, i: usize, census: &Census) {
        self.ctx.store(&self.cells[i], Some(RefPtr::new(Payload::new(census))));
    }
}

impl Array for WaArray {
    type W<'a> = WaWorker<'a>;

    fn worker(&self) -> Result<WaWorker<'_>, ConfigError> {
        Ok(WaWorker {
            cells: &self.cells,
            ctx: WaContext::register(&self.domain)?,
        })
    }

    fn census(&mut self) -> u64 {
        let mut bad = 0;
        for c in self.cells.iter_mut() {
            match c.take() {
                Some(mut r) => {
                    bad += u64::from(r.count() != Some(1));
                    c.exchange(Some(r));
                }
                None => bad += 1,
            }
        }
        bad
    }
}

struct LockArray {
    cells: Vec<CachePadded<Mutex<Arc<Payload>>>>,
}

struct LockWorker<'a> {
    cells: &'a [CachePadded<Mutex<Arc<Payload>>>],
}

impl Worker for LockWorker<'_> {
    fn load(&mut self, i: usize) -> bool {
        let r = Arc::clone(&self.cells[i].lock().unwrap());
        r.canary == CANARY
    }

    fn store(&mut self, i: usize, census: &Census) {
        let fresh = Arc::new(Payload::new(census));
        let old = std::mem::replace(&mut *self.cells[i].lock().unwrap(), fresh);
        drop(old);
    }
}

impl Array for LockArray {
    type W<'a> = LockWorker<'a>;

    fn worker(&self) -> Result<LockWorker<'_>, ConfigError> {
        Ok(LockWorker { cells: &self.cells })
    }

    fn census(&mut self) -> u64 {
        self.cells
            .iter_mut()
            .map(|c| u64::from(Arc::strong_count(c.get_mut().unwrap()) != 1))
            .sum()
    }
}

#[derive(Default)]
struct Tally {
    loads: u64,
    stores: u64,
    bad_loads: u64,
}

fn drive<A: Array>(cfg: &WorkloadConfig, array: &mut A, census: &Census) -> Result<(Tally, f64), ConfigError> {
    let stop = AtomicBool::new(false);
    let start = Barrier::new(cfg.threads + 1);
    let (tallies, elapsed) = thread::scope(|s| {
        let array = &*array;
        let workers: Vec<_> = (0..cfg.threads)
            .map(|t| {
                let (stop, start) = (&stop, &start);
                s.spawn(move || -> Result<Tally, ConfigError> {
                    CENSUS_SLOT.with(|c| c.set(t));
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(t as u64);
                    let worker = array.worker();
                    start.wait();
                    let mut w = worker?;
                    let mut tally = Tally::default();
                    let limit = match cfg.stop {
                        Stop::Ops(n) => n,
                        Stop::After(_) => u64::MAX,
                    };
                    let mut done = 0;
                    while done < limit {
                        if done % 256 == 0 && stop.load(Ordering::Relaxed) {
                            break;
                        }
                        let i = rng.random_range(0..cfg.n_refs);
                        if cfg.store_prob > 0.0 && rng.random_bool(cfg.store_prob) {
                            w.store(i, census);
                            tally.stores += 1;
                        } else {
                            tally.bad_loads += u64::from(!w.load(i));
                            tally.loads += 1;
                        }
                        done += 1;
                    }
                    Ok(tally)
                })
            })
            .collect();
        start.wait();
        let began = Instant::now();
        if let Stop::After(secs) = cfg.stop {
            thread::sleep(Duration::from_secs_f64(secs));
            stop.store(true, Ordering::Relaxed);
        }
        let tallies: Vec<_> = workers.into_iter().map(|w| w.join().expect("worker panicked")).collect();
        (tallies, began.elapsed().as_secs_f64())
    });
    let mut total = Tally::default();
    for t in tallies {
        let t = t?;
        total.loads += t.loads;
        total.stores += t.stores;
        total.bad_loads += t.bad_loads;
    }
    Ok((total, elapsed))
}

/// Runs the workload, then drains and checks that every object is either
/// referenced exactly once by the array or was destructed exactly once.
pub fn run_workload(cfg: &WorkloadConfig) -> Result<RunResult, ConfigError> {
    cfg.validate()?;
    let census = Census::new(cfg.threads);
    CENSUS_SLOT.with(|c| c.set(cfg.threads));
    let domain = || Domain::new(DomainConfig::new(cfg.threads, 1).fast_path_tries(cfg.fast_path_tries));
    let n = cfg.n_refs;
    let (tally, elapsed, mut violations) = match cfg.cell_impl {
        CellImpl::Refcount => {
            let mut a = RcArray {
                domain: domain()?,
                cells: (0..n).map(|_| CachePadded::new(RefPtr::new(Payload::new(&census)))).collect(),
            };
            let (t, e) = drive(cfg, &mut a, &census)?;
            let bad = a.census();
            (t, e, bad)
        }
        CellImpl::WeakAtomicCounted => {
            let mut a = WaArray {
                domain: domain()?,
                cells: (0..n)
                    .map(|_| CachePadded::new(WeakAtomic::new(Some(RefPtr::new(Payload::new(&census))))))
                    .collect(),
            };
            let (t, e) = drive(cfg, &mut a, &census)?;
            let bad = a.census();
            (t, e, bad)
        }
        CellImpl::LockBaseline => {
            let mut a = LockArray {
                cells: (0..n)
                    .map(|_| CachePadded::new(Mutex::new(Arc::new(Payload::new(&census)))))
                    .collect(),
            };
            let (t, e) = drive(cfg, &mut a, &census)?;
            let bad = a.census();
            (t, e, bad)
        }
    };
    // Arrays are gone: everything ever created must have been destructed once.
    let created = n as u64 + tally.stores;
    violations += tally.bad_loads + created.abs_diff(census.destroyed());
    let ops_total = tally.loads + tally.stores;
    Ok(RunResult {
        cell_impl: cfg.cell_impl,
        threads: cfg.threads,
        n_refs: n,
        store_prob: cfg.store_prob,
        duration_s: elapsed,
        ops_total,
        loads: tally.loads,
        stores: tally.stores,
        throughput: ops_total as f64 / elapsed.max(1e-9),
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ops(cell_impl: CellImpl, threads: usize, store_prob: f64) -> WorkloadConfig {
        WorkloadConfig {
            n_refs: 10,
            store_prob,
            threads,
            stop: Stop::Ops(5_000),
            cell_impl,
            seed: 42,
            fast_path_tries: 3,
        }
    }

    #[test]
    fn every_impl_runs_clean() {
        for imp in CellImpl::ALL {
            let r = run_workload(&ops(imp, 3, 0.1)).unwrap();
            assert_eq!(r.violations, 0, "{imp}");
            assert_eq!(r.ops_total, 15_000);
            assert_eq!(r.ops_total, r.loads + r.stores);
        }
    }

    #[test]
    fn load_only_never_stores() {
        let r = run_workload(&ops(CellImpl::Refcount, 1, 0.0)).unwrap();
        assert_eq!(r.stores, 0);
        assert_eq!(r.loads, 5_000);
    }

    #[test]
    fn single_thread_replay_is_deterministic() {
        for imp in CellImpl::ALL {
            let a = run_workload(&ops(imp, 1, 0.3)).unwrap();
            let b = run_workload(&ops(imp, 1, 0.3)).unwrap();
            assert_eq!((a.loads, a.stores), (b.loads, b.stores));
        }
    }

    #[test]
    fn store_only_with_slow_path() {
        let mut cfg = ops(CellImpl::WeakAtomicCounted, 2, 1.0);
        cfg.fast_path_tries = 0;
        let r = run_workload(&cfg).unwrap();
        assert_eq!(r.loads, 0);
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = ops(CellImpl::Refcount, 1, 1.5);
        assert!(matches!(run_workload(&cfg), Err(ConfigError::StoreProb(_))));
        cfg.store_prob = 0.5;
        cfg.threads = 0;
        assert!(matches!(run_workload(&cfg), Err(ConfigError::NoThreads)));
        cfg.threads = 1;
        cfg.n_refs = 0;
        assert!(matches!(run_workload(&cfg), Err(ConfigError::NoRefs)));
        cfg.n_refs = 1;
        cfg.stop = Stop::After(-1.0);
        assert!(matches!(run_workload(&cfg), Err(ConfigError::Duration(_))));
        assert!("gnu".parse::<CellImpl>().is_err());
        assert_eq!("lock-baseline".parse::<CellImpl>().unwrap(), CellImpl::LockBaseline);
    }
}
