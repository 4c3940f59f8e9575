use std::collections::HashSet;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicU64, Ordering::SeqCst};
use std::sync::Barrier;
use std::thread;

use acqret::block_pool::{BlockPool, PoolConfig};
use acqret::Error;
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Default, Debug)]
struct Report {
    bad_num_batches: u64,
    over_holding: u64,
    stamp_mismatches: u64,
    max_held: usize,
}

/// `p` threads, each keeping at most `n / p` blocks live, allocating and
/// freeing at random. Every block carries a stamp of its current owner.
fn churn(p: usize, n: usize, pairs: usize) -> (Report, usize) {
    let pool = BlockPool::new(PoolConfig::new(16, p, n)).unwrap();
    let l = pool.config().batch_len;
    let start = Barrier::new(p);
    let reports: Vec<Report> = thread::scope(|s| {
        let workers: Vec<_> = (0..p)
            .map(|t| {
                let (pool, start) = (&pool, &start);
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
                    let mut h = pool.register().unwrap();
                    let mut live: Vec<(NonNull<u8>, u64)> = Vec::new();
                    let mut r = Report::default();
                    let cap = n / p;
                    let mut seq = (t as u64) << 48;
                    start.wait();
                    let check = |h: &acqret::block_pool::PoolHandle, r: &mut Report| {
                        r.bad_num_batches += u64::from(!(1..=2).contains(&h.num_batches()));
                        r.over_holding += u64::from(h.held() > 4 * l);
                        r.max_held = r.max_held.max(h.held());
                    };
                    let mut done = 0;
                    while done < pairs {
                        let grow = live.is_empty() || (live.len() < cap && rng.random_bool(0.5));
                        if grow {
                            let b = h.allocate().unwrap();
                            seq += 1;
                            // SAFETY: blocks are 16 bytes, aligned to 16.
                            unsafe { (*b.as_ptr().cast::<AtomicU64>()).store(seq, SeqCst) };
                            live.push((b, seq));
                        } else {
                            let (b, stamp) = live.swap_remove(rng.random_range(0..live.len()));
                            let now = unsafe { (*b.as_ptr().cast::<AtomicU64>()).load(SeqCst) };
                            r.stamp_mismatches += u64::from(now != stamp);
                            h.free(b).unwrap();
                            done += 1;
                        }
                        check(&h, &mut r);
                    }
                    for (b, _) in live {
                        h.free(b).unwrap();
                    }
                    r
                })
            })
            .collect();
        workers.into_iter().map(|w| w.join().unwrap()).collect()
    });
    let mut total = Report::default();
    for r in reports {
        total.bad_num_batches += r.bad_num_batches;
        total.over_holding += r.over_holding;
        total.stamp_mismatches += r.stamp_mismatches;
        total.max_held = total.max_held.max(r.max_held);
    }
    assert_eq!(pool.live_blocks(), 0);
    (total, pool.total_blocks())
}

#[test]
fn concurrent_churn_respects_bounds() {
    for (p, n) in [(1, 8), (2, 64), (4, 256), (8, 512)] {
        let (r, total_blocks) = churn(p, n, 20_000);
        assert_eq!(r.bad_num_batches, 0, "p={p}");
        assert_eq!(r.over_holding, 0, "p={p} max held {}", r.max_held);
        assert_eq!(r.stamp_mismatches, 0, "p={p}");
        assert!(total_blocks <= n + 3 * p * p, "p={p}: {total_blocks} blocks");
    }
}

#[test]
fn total_blocks_formula() {
    for p in 1..=8 {
        for n in [1, 7, 64, 1000] {
            let pool = BlockPool::new(PoolConfig::new(8, p, n)).unwrap();
            let l = p;
            assert_eq!(pool.total_blocks(), p * (2 * l + l / 2) + n.div_ceil(l) * l);
            assert!(pool.total_blocks() <= n + 3 * p * p);
        }
    }
}

#[test]
fn blocks_are_aligned_and_inside_the_arena() {
    let pool = BlockPool::new(PoolConfig::new(24, 2, 32)).unwrap();
    let mut h = pool.register().unwrap();
    let b = h.allocate().unwrap();
    assert_eq!(b.as_ptr() as usize % 16, 0);
    assert!(pool.contains(b) && pool.is_live(b));
    let mut x = 0u8;
    assert!(matches!(h.free(NonNull::from(&mut x)), Err(Error::ForeignBlock(_))));
    h.free(b).unwrap();
    assert!(matches!(h.free(b), Err(Error::DoubleFree(_))));
}

#[test]
fn too_many_registrations_fail() {
    let pool = BlockPool::new(PoolConfig::new(8, 2, 8)).unwrap();
    let _a = pool.register().unwrap();
    let _b = pool.register().unwrap();
    assert!(matches!(pool.register(), Err(Error::CapacityExhausted { capacity: 2 })));
}

proptest! {
    #[test]
    fn single_process_matches_live_set_model(
        p in 1usize..5,
        ops in prop::collection::vec(any::<bool>(), 1..400),
    ) {
        let n = 48;
        let pool = BlockPool::new(PoolConfig::new(8, p, n)).unwrap();
        let l = pool.config().batch_len;
        let mut h = pool.register().unwrap();
        let mut live: Vec<NonNull<u8>> = Vec::new();
        let mut seen_live: HashSet<usize> = HashSet::new();
        for alloc in ops {
            if alloc && live.len() < n {
                let b = h.allocate().unwrap();
                prop_assert!(seen_live.insert(b.as_ptr() as usize), "live block handed out again");
                live.push(b);
            } else if let Some(b) = live.pop() {
                seen_live.remove(&(b.as_ptr() as usize));
                h.free(b).unwrap();
            }
            prop_assert!((1..=2).contains(&h.num_batches()));
            prop_assert!(h.held() <= 4 * l);
            prop_assert_eq!(pool.live_blocks(), live.len());
        }
    }
}
