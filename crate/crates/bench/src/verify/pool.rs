//! Block pool churn with per-block owner stamps.

use std::ptr::NonNull;
use std::sync::atomic::{AtomicU64, Ordering::SeqCst};
use std::sync::Barrier;
use std::thread;

use acqret::block_pool::{BlockPool, PoolConfig};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Default, Clone, Copy)]
pub struct PoolReport {
    pub processes: usize,
    pub live_limit: usize,
    pub pairs: u64,
    pub batch_len: usize,
    pub total_blocks: usize,
    /// Observations of a handle holding other than one or two batches.
    pub bad_num_batches: u64,
    /// Observations of a handle holding more than four batches' worth.
    pub over_holding: u64,
    pub max_held: usize,
    /// Live blocks whose stamp changed while owned, i.e. handed out twice.
    pub stamp_mismatches: u64,
    pub live_after: usize,
}

impl PoolReport {
    pub fn total_bound(&self) -> usize {
        self.live_limit + 3 * self.processes * self.processes
    }

    pub fn clean(&self) -> bool {
        self.bad_num_batches == 0
            && self.over_holding == 0
            && self.stamp_mismatches == 0
            && self.live_after == 0
            && self.total_blocks <= self.total_bound()
    }
}

/// `p` threads perform `pairs` allocate/free pairs in total, each keeping at
/// most `n / p` blocks live.
pub fn churn(p: usize, n: usize, pairs: u64, seed: u64) -> PoolReport {
    let pool = BlockPool::new(PoolConfig::new(16, p, n)).expect("valid config");
    let l = pool.config().batch_len;
    let start = Barrier::new(p);
    let per_thread = pairs.div_ceil(p as u64);
    let parts: Vec<PoolReport> = thread::scope(|s| {
        let workers: Vec<_> = (0..p)
            .map(|t| {
                let (pool, start) = (&pool, &start);
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(t as u64);
                    let mut h = pool.register().expect("registration");
                    let mut live: Vec<(NonNull<u8>, u64)> = Vec::new();
                    let mut r = PoolReport::default();
                    let cap = (n / p).max(1);
                    let mut seq = (t as u64) << 48;
                    start.wait();
                    while r.pairs < per_thread {
                        if live.is_empty() || (live.len() < cap && rng.random_bool(0.5)) {
                            let b = h.allocate().expect("pool sized for n live blocks");
                            seq += 1;
                            // SAFETY: blocks are 16 bytes and 16-aligned.
                            unsafe { (*b.as_ptr().cast::<AtomicU64>()).store(seq, SeqCst) };
                            live.push((b, seq));
                        } else {
                            let (b, stamp) = live.swap_remove(rng.random_range(0..live.len()));
                            // SAFETY: still owned by this thread.
                            let now = unsafe { (*b.as_ptr().cast::<AtomicU64>()).load(SeqCst) };
                            r.stamp_mismatches += u64::from(now != stamp);
                            h.free(b).expect("own block");
                            r.pairs += 1;
                        }
                        r.bad_num_batches += u64::from(!(1..=2).contains(&h.num_batches()));
                        r.over_holding += u64::from(h.held() > 4 * l);
                        r.max_held = r.max_held.max(h.held());
                    }
                    for (b, _) in live {
                        h.free(b).expect("own block");
                    }
                    r
                })
            })
            .collect();
        workers.into_iter().map(|w| w.join().expect("worker panicked")).collect()
    });
    let mut r = PoolReport {
        processes: p,
        live_limit: n,
        batch_len: l,
        total_blocks: pool.total_blocks(),
        live_after: pool.live_blocks(),
        ..Default::default()
    };
    for part in parts {
        r.pairs += part.pairs;
        r.bad_num_batches += part.bad_num_batches;
        r.over_holding += part.over_holding;
        r.stamp_mismatches += part.stamp_mismatches;
        r.max_held = r.max_held.max(part.max_held);
    }
    r
}
