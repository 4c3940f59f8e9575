//! The acquire-retire protocol.
//!
//! Each registered process owns `c` announcement slots in a shared `P × c`
//! table of [`Destination`] cells. `acquire` copies the handle stored at a
//! location into one of the caller's slots with a single atomic copy, so it
//! takes a constant number of steps. `retire` appends to a process-local
//! multiset, and `eject` advances an incremental scan of the table followed
//! by a multiset difference between a snapshot of the retired handles and the
//! announced ones. A handle retired `s` times and announced `t` times can be
//! ejected `max(s - t, 0)` times.
//!
//! Each `eject` performs at most [`EJECT_STEP_BUDGET`] units of work, where a
//! unit is one slot read (with its table insert) or one table lookup, so a
//! full pass over `cP` slots and a batch of `n` handles takes
//! `⌈(cP + n) / 4⌉` calls.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_utils::CachePadded;

use crate::destination::Destination;
use crate::multiset::CountTable;
use crate::{Error, Handle, Result, EMPTY};

/// Units of ejection work performed by a single [`ProcessHandle::eject`].
pub const EJECT_STEP_BUDGET: usize = 4;

/// Construction parameters of a [`Domain`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainConfig {
    /// Maximum number of simultaneously registered processes (`P`).
    pub processes: usize,
    /// Announcement slots per process (`c`).
    pub slots_per_process: usize,
    /// Validated-read attempts `acquire` makes before falling back to the
    /// atomic copy. Zero means every acquire uses the copy.
    pub fast_path_tries: usize,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            processes: 64,
            slots_per_process: 2,
            fast_path_tries: 0,
        }
    }
}

impl DomainConfig {
    pub fn new(processes: usize, slots_per_process: usize) -> Self {
        DomainConfig {
            processes,
            slots_per_process,
            ..Default::default()
        }
    }

    pub fn fast_path_tries(mut self, tries: usize) -> Self {
        self.fast_path_tries = tries;
        self
    }
}

/// The shared announcement table plus process registration.
pub struct Domain {
    config: DomainConfig,
    slots: Box<[CachePadded<Destination>]>,
    registered: Box<[AtomicBool]>,
    delayed: Box<[CachePadded<AtomicUsize>]>,
}

impl std::fmt::Debug for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Domain")
            .field("config", &self.config)
            .field("registered", &self.registered_count())
            .finish()
    }
}

impl Domain {
    pub fn new(config: DomainConfig) -> Result<Arc<Domain>> {
        if config.processes == 0 {
            return Err(Error::InvalidConfig("processes must be at least 1".into()));
        }
        if config.slots_per_process == 0 {
            return Err(Error::InvalidConfig(
                "slots per process must be at least 1".into(),
            ));
        }
        let cells = config.processes * config.slots_per_process;
        Ok(Arc::new(Domain {
            config,
            slots: (0..cells)
                .map(|_| CachePadded::new(Destination::default()))
                .collect(),
            registered: (0..config.processes).map(|_| AtomicBool::new(false)).collect(),
            delayed: (0..config.processes)
                .map(|_| CachePadded::new(AtomicUsize::new(0)))
                .collect(),
        }))
    }

    /// Domain with `processes` processes and two slots each.
    pub fn with_processes(processes: usize) -> Arc<Domain> {
        Domain::new(DomainConfig::new(processes, 2)).expect("invalid domain configuration")
    }

    pub fn config(&self) -> DomainConfig {
        self.config
    }

    pub fn processes(&self) -> usize {
        self.config.processes
    }

    pub fn slots_per_process(&self) -> usize {
        self.config.slots_per_process
    }

    /// Total announcement slots, `cP`.
    pub fn total_slots(&self) -> usize {
        self.slots.len()
    }

    /// Upper bound on one process's delayed handles when it ejects at least
    /// once per retire: `3cP`.
    pub fn per_process_bound(&self) -> usize {
        3 * self.total_slots()
    }

    /// Upper bound on delayed handles across all processes: `3cP²`.
    pub fn total_bound(&self) -> usize {
        self.per_process_bound() * self.processes()
    }

    /// Registers a process, handing out the lowest free pid.
    pub fn register(self: &Arc<Self>) -> Result<ProcessHandle> {
        for (pid, flag) in self.registered.iter().enumerate() {
            if flag
                .compare_exchange(false, true, Ordering::AcqRel, Ordering::Relaxed)
                .is_ok()
            {
                return Ok(ProcessHandle::new(Arc::clone(self), pid));
            }
        }
        Err(Error::CapacityExhausted {
            capacity: self.processes(),
        })
    }

    pub fn registered_count(&self) -> usize {
        self.registered
            .iter()
            .filter(|f| f.load(Ordering::Relaxed))
            .count()
    }

    /// Reads one announcement slot.
    pub fn announcement(&self, pid: usize, slot: usize) -> Handle {
        self.slots[pid * self.config.slots_per_process + slot].read()
    }

    /// Reads every slot; non-empty handles only.
    pub fn announced(&self) -> Vec<Handle> {
        self.slots
            .iter()
            .map(|d| d.read())
            .filter(|&h| h != EMPTY)
            .collect()
    }

    /// Delayed handles last published by each pid (0 for unregistered pids).
    pub fn delayed_census(&self) -> Vec<usize> {
        self.delayed.iter().map(|d| d.load(Ordering::Relaxed)).collect()
    }

    pub fn delayed_total(&self) -> usize {
        self.delayed_census().iter().sum()
    }

    fn slot(&self, pid: usize, i: usize) -> &Destination {
        assert!(
            i < self.config.slots_per_process,
            "slot index {i} out of range (slots per process: {})",
            self.config.slots_per_process
        );
        &self.slots[pid * self.config.slots_per_process + i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Scanning(usize),
    Differencing(usize),
}

/// Progress of the incremental `ejectAll`.
#[derive(Debug)]
struct EjectCursor {
    phase: Phase,
    batch: Vec<Handle>,
    plist: CountTable,
}

/// Per-process counters, for instrumentation.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ProcessStats {
    pub acquires: u64,
    /// Acquires that went through the atomic copy.
    pub copy_acquires: u64,
    pub retires: u64,
    pub ejects: u64,
    /// Handles returned by `eject`.
    pub ejected: u64,
    /// Units of ejection work performed.
    pub eject_units: u64,
    pub passes_started: u64,
    pub passes_completed: u64,
}

/// A registered process: its row of announcement slots plus the local retired
/// multiset, ready list and ejection cursor.
///
/// Owned by one thread at a time. Dropping it without [`drain`] leaks any
/// handles still delayed (they are never returned by `eject`).
///
/// [`drain`]: ProcessHandle::drain
pub struct ProcessHandle {
    domain: Arc<Domain>,
    pid: usize,
    rlist: Vec<Handle>,
    flist: VecDeque<Handle>,
    cursor: EjectCursor,
    // Ejects since the most recent pass started; `None` before the first.
    since_pass: Option<u64>,
    stats: ProcessStats,
}

impl std::fmt::Debug for ProcessHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProcessHandle")
            .field("pid", &self.pid)
            .field("retired", &self.rlist.len())
            .field("ready", &self.flist.len())
            .field("phase", &self.cursor.phase)
            .finish()
    }
}

impl ProcessHandle {
    fn new(domain: Arc<Domain>, pid: usize) -> Self {
        let total = domain.total_slots();
        for i in 0..domain.slots_per_process() {
            domain.slot(pid, i).write(EMPTY);
        }
        domain.delayed[pid].store(0, Ordering::Relaxed);
        ProcessHandle {
            rlist: Vec::with_capacity(2 * total),
            flist: VecDeque::with_capacity(2 * total),
            cursor: EjectCursor {
                phase: Phase::Idle,
                batch: Vec::with_capacity(2 * total),
                plist: CountTable::with_entries(total),
            },
            since_pass: None,
            stats: ProcessStats::default(),
            domain,
            pid,
        }
    }

    pub fn pid(&self) -> usize {
        self.pid
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn stats(&self) -> ProcessStats {
        self.stats
    }

    /// Reads and protects the handle stored at `loc`, announcing it in slot `i`.
    ///
    /// Constant number of steps. The slot must be released (or never used).
    ///
    /// # Safety
    ///
    /// `loc` is published to concurrent scanners, which may read it after this
    /// call returns. The memory holding `loc` must stay readable (it may be
    /// reused but not unmapped) while other processes of this domain can be
    /// scanning. See [`Destination::swcopy`].
    pub unsafe fn acquire(&mut self, loc: &AtomicUsize, i: usize) -> Handle {
        let slot = self.domain.slot(self.pid, i);
        self.stats.acquires += 1;
        for _ in 0..self.domain.config.fast_path_tries {
            let seen = loc.load(Ordering::SeqCst);
            slot.write(seen);
            if loc.load(Ordering::SeqCst) == seen {
                return seen;
            }
        }
        self.stats.copy_acquires += 1;
        // SAFETY: forwarded from the caller.
        unsafe { slot.swcopy(loc) };
        slot.read()
    }

    /// Announces `h` in slot `i` without reading any location.
    ///
    /// The announcement protects `h` only against retires that happen after
    /// this call; the caller must validate that `h` was not already retired
    /// (typically by re-reading the location it came from).
    pub fn announce(&mut self, h: Handle, i: usize) {
        self.domain.slot(self.pid, i).write(h);
    }

    /// Withdraws the protection held in slot `i`. Idempotent.
    pub fn release(&mut self, i: usize) {
        self.domain.slot(self.pid, i).write(EMPTY);
    }

    /// Handle currently announced in slot `i`.
    pub fn slot(&self, i: usize) -> Handle {
        self.domain.slot(self.pid, i).read()
    }

    /// Records that `h` was overwritten in some location by an atomic update.
    pub fn retire(&mut self, h: Handle) -> Result<()> {
        if h == EMPTY {
            return Err(Error::RetireEmpty);
        }
        self.rlist.push(h);
        self.stats.retires += 1;
        self.publish();
        Ok(())
    }

    /// Performs a few steps of ejection, then returns a handle that is safe
    /// to destruct, if one is ready.
    pub fn eject(&mut self) -> Option<Handle> {
        self.stats.ejects += 1;
        self.since_pass = self.since_pass.map(|n| n + 1);
        if self.cursor.phase == Phase::Idle && self.should_start_pass() {
            self.start_pass();
        }
        self.run_units(EJECT_STEP_BUDGET);
        let out = self.flist.pop_front();
        if out.is_some() {
            self.stats.ejected += 1;
        }
        self.publish();
        out
    }

    /// Runs any in-flight pass to completion, then a complete pass over the
    /// whole retired multiset. Results land in the ready list.
    pub fn eject_all(&mut self) {
        self.run_units(usize::MAX);
        if !self.rlist.is_empty() {
            self.start_pass();
            self.run_units(usize::MAX);
        }
        self.publish();
    }

    /// Releases every slot of this process and ejects all of its delayed
    /// handles, waiting for other processes to release protections of them.
    pub fn drain(&mut self) -> Vec<Handle> {
        for i in 0..self.domain.slots_per_process() {
            self.release(i);
        }
        let mut out = Vec::new();
        loop {
            self.eject_all();
            out.extend(self.flist.drain(..));
            if self.rlist.is_empty() {
                break;
            }
            std::thread::yield_now();
        }
        self.stats.ejected += out.len() as u64;
        self.publish();
        out
    }

    /// Drains and unregisters, returning the handles that were still delayed.
    pub fn deregister(mut self) -> Vec<Handle> {
        self.drain()
    }

    /// Handles retired and not yet moved into the ready list (includes any
    /// in-flight batch).
    pub fn retired_len(&self) -> usize {
        self.rlist.len() + self.in_flight_len()
    }

    /// Handles found safe and waiting to be returned by `eject`.
    pub fn ready_len(&self) -> usize {
        self.flist.len()
    }

    fn in_flight_len(&self) -> usize {
        match self.cursor.phase {
            Phase::Idle => 0,
            Phase::Scanning(_) => self.cursor.batch.len(),
            Phase::Differencing(done) => self.cursor.batch.len() - done,
        }
    }

    /// Retired handles not yet returned by `eject`.
    pub fn delayed(&self) -> usize {
        self.rlist.len() + self.in_flight_len() + self.flist.len()
    }

    pub fn pass_in_progress(&self) -> bool {
        self.cursor.phase != Phase::Idle
    }

    fn should_start_pass(&self) -> bool {
        if self.rlist.is_empty() {
            return false;
        }
        let total = self.domain.total_slots();
        self.rlist.len() >= total
            || self.since_pass.is_none_or(|n| n >= 2 * total as u64)
    }

    fn start_pass(&mut self) {
        debug_assert_eq!(self.cursor.phase, Phase::Idle);
        debug_assert!(self.cursor.batch.is_empty());
        std::mem::swap(&mut self.rlist, &mut self.cursor.batch);
        self.cursor.plist.reset_for(self.domain.total_slots());
        self.cursor.phase = Phase::Scanning(0);
        self.since_pass = Some(0);
        self.stats.passes_started += 1;
    }

    fn run_units(&mut self, mut budget: usize) {
        let total = self.domain.total_slots();
        loop {
            match self.cursor.phase {
                Phase::Idle => return,
                Phase::Scanning(next) if next == total => {
                    self.cursor.phase = Phase::Differencing(0);
                }
                Phase::Differencing(next) if next == self.cursor.batch.len() => {
                    self.cursor.batch.clear();
                    self.cursor.phase = Phase::Idle;
                    self.stats.passes_completed += 1;
                    return;
                }
                _ if budget == 0 => return,
                Phase::Scanning(next) => {
                    let h = self.domain.slots[next].read();
                    if h != EMPTY {
                        self.cursor.plist.insert(h);
                    }
                    self.cursor.phase = Phase::Scanning(next + 1);
                    budget -= 1;
                    self.stats.eject_units += 1;
                }
                Phase::Differencing(next) => {
                    let x = self.cursor.batch[next];
                    if self.cursor.plist.take(x) {
                        self.rlist.push(x);
                    } else {
                        self.flist.push_back(x);
                    }
                    self.cursor.phase = Phase::Differencing(next + 1);
                    budget -= 1;
                    self.stats.eject_units += 1;
                }
            }
        }
    }

    fn publish(&self) {
        self.domain.delayed[self.pid].store(self.delayed(), Ordering::Relaxed);
    }
}

impl Drop for ProcessHandle {
    fn drop(&mut self) {
        for i in 0..self.domain.slots_per_process() {
            self.release(i);
        }
        self.domain.delayed[self.pid].store(0, Ordering::Relaxed);
        self.domain.registered[self.pid].store(false, Ordering::Release);
    }
}
