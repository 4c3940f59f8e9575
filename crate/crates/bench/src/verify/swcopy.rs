//! Single-writer copy: readers never observe the copied value go backwards.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering::SeqCst};
use std::sync::Barrier;
use std::thread;

use acqret::destination::Destination;

#[derive(Debug, Default, Clone, Copy)]
pub struct MonotonicReport {
    pub reads: u64,
    pub inversions: u64,
    pub copies: u64,
    /// Times the busiest reader saw the value move forward.
    pub advances: u64,
}

/// One owner repeatedly bumps a source word and copies it into a
/// [`Destination`] while `readers` threads each read it `reads_each` times.
pub fn monotonic(readers: usize, reads_each: u64) -> MonotonicReport {
    let src = AtomicUsize::new(0);
    let dest = Destination::new(0);
    let stop = AtomicBool::new(false);
    let start = Barrier::new(readers + 1);
    thread::scope(|s| {
        let writer = s.spawn(|| {
            start.wait();
            let mut copies = 0;
            while !stop.load(SeqCst) {
                src.fetch_add(1, SeqCst);
                // SAFETY: `src` outlives the scope; this thread is the only owner.
                unsafe { dest.swcopy(&src) };
                copies += 1;
            }
            copies
        });
        let handles: Vec<_> = (0..readers)
            .map(|_| {
                s.spawn(|| {
                    let mut r = MonotonicReport::default();
                    let mut last = 0;
                    start.wait();
                    for _ in 0..reads_each {
                        let v = dest.read();
                        if v < last {
                            r.inversions += 1;
                        } else if v > last {
                            r.advances += 1;
                        }
                        last = v;
                        r.reads += 1;
                    }
                    r
                })
            })
            .collect();
        let mut total = MonotonicReport::default();
        for h in handles {
            let r = h.join().expect("reader panicked");
            total.reads += r.reads;
            total.inversions += r.inversions;
            total.advances = total.advances.max(r.advances);
        }
        stop.store(true, SeqCst);
        total.copies = writer.join().expect("writer panicked");
        total
    })
}
