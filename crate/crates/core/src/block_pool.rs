//! Constant-time allocate and free of fixed-size blocks.
//!
//! Blocks move between processes in *batches* of `l` blocks. Every process
//! keeps a private [`PoolHandle`] with up to two full batches and a partially
//! filled current batch; full batches overflow to, and are refilled from, a
//! shared lock-free stack. A shared push or pop moves `l` block addresses, so
//! it is split into `p` steps (`p` = number of processes) and one step runs
//! per `allocate` or `free`. `num_batches` counts the full local batches plus
//! one for a pending shared pop, and stays in `{1, 2}`.
//!
//! With `n` live blocks at most, the pool needs `n + O(p²)` blocks in total.

use std::alloc::{self, Layout};
use std::cell::UnsafeCell;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::{Error, Result};

const NIL: u32 = u32::MAX;

/// Construction parameters for a [`BlockPool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolConfig {
    pub block_size: usize,
    pub block_align: usize,
    /// Number of processes (`p`); also the number of steps per shared operation.
    pub processes: usize,
    /// Blocks per batch (`l`). Defaults to `processes`.
    pub batch_len: usize,
    /// Expected high-water mark of live blocks (`n`); sizes the shared pool.
    pub live_blocks: usize,
}

impl PoolConfig {
    pub fn new(block_size: usize, processes: usize, live_blocks: usize) -> Self {
        PoolConfig {
            block_size,
            block_align: 16,
            processes,
            batch_len: processes,
            live_blocks,
        }
    }

    pub fn for_type<T>(processes: usize, live_blocks: usize) -> Self {
        PoolConfig {
            block_size: std::mem::size_of::<T>(),
            block_align: std::mem::align_of::<T>(),
            processes,
            batch_len: processes,
            live_blocks,
        }
    }

    pub fn batch_len(mut self, l: usize) -> Self {
        self.batch_len = l;
        self
    }

    /// Blocks preloaded into each process: two full batches and a current
    /// batch filled halfway.
    fn local_blocks(&self) -> usize {
        2 * self.batch_len + self.batch_len / 2
    }

    fn shared_batches(&self) -> usize {
        self.live_blocks.div_ceil(self.batch_len)
    }

    fn total_blocks(&self) -> usize {
        self.processes * self.local_blocks() + self.shared_batches() * self.batch_len
    }
}

struct BatchNode {
    next: AtomicU32,
    blocks: UnsafeCell<Box<[usize]>>,
}

/// Treiber stack of node indices with a 32-bit tag in the head word.
struct IndexStack {
    head: AtomicU64,
}

fn pack(index: u32, tag: u32) -> u64 {
    (tag as u64) << 32 | index as u64
}

fn unpack(word: u64) -> (u32, u32) {
    (word as u32, (word >> 32) as u32)
}

impl IndexStack {
    fn new() -> Self {
        IndexStack {
            head: AtomicU64::new(pack(NIL, 0)),
        }
    }

    fn try_push(&self, nodes: &[BatchNode], index: u32) -> bool {
        let head = self.head.load(Ordering::Acquire);
        let (top, tag) = unpack(head);
        nodes[index as usize].next.store(top, Ordering::Relaxed);
        self.head
            .compare_exchange(
                head,
                pack(index, tag.wrapping_add(1)),
                Ordering::AcqRel,
                Ordering::Relaxed,
            )
            .is_ok()
    }

    fn push(&self, nodes: &[BatchNode], index: u32) {
        while !self.try_push(nodes, index) {}
    }

    /// One attempt. `Err(())` means contention, `Ok(None)` means empty.
    #[allow(clippy::result_unit_err)]
    fn try_pop(&self, nodes: &[BatchNode]) -> std::result::Result<Option<u32>, ()> {
        let head = self.head.load(Ordering::Acquire);
        let (top, tag) = unpack(head);
        if top == NIL {
            return Ok(None);
        }
        let next = nodes[top as usize].next.load(Ordering::Relaxed);
        self.head
            .compare_exchange(
                head,
                pack(next, tag.wrapping_add(1)),
                Ordering::AcqRel,
                Ordering::Relaxed,
            )
            .map(|_| Some(top))
            .map_err(|_| ())
    }

    fn pop(&self, nodes: &[BatchNode]) -> Option<u32> {
        loop {
            if let Ok(r) = self.try_pop(nodes) {
                return r;
            }
        }
    }
}

/// Shared state: the block arena, batch storage and the shared batch stack.
pub struct BlockPool {
    config: PoolConfig,
    stride: usize,
    base: NonNull<u8>,
    layout: Layout,
    blocks: usize,
    live: Box<[AtomicBool]>,
    live_count: AtomicUsize,
    nodes: Box<[BatchNode]>,
    shared: IndexStack,
    free_nodes: IndexStack,
    shared_len: AtomicUsize,
    registered: Box<[AtomicBool]>,
    parked: Mutex<Vec<Option<LocalPool>>>,
}

// SAFETY: batch node contents are only touched by the process that popped the
// node from a stack (or has not pushed it yet); everything else is atomic.
unsafe impl Send for BlockPool {}
unsafe impl Sync for BlockPool {}

impl std::fmt::Debug for BlockPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockPool")
            .field("config", &self.config)
            .field("blocks", &self.blocks)
            .field("live", &self.live_blocks())
            .field("shared_batches", &self.shared_batches())
            .finish()
    }
}

impl BlockPool {
    pub fn new(config: PoolConfig) -> Result<Arc<BlockPool>> {
        if config.processes == 0 || config.batch_len == 0 {
            return Err(Error::InvalidConfig(
                "processes and batch length must be positive".into(),
            ));
        }
        if !config.block_align.is_power_of_two() {
            return Err(Error::InvalidConfig("alignment must be a power of two".into()));
        }
        let stride = config
            .block_size
            .max(1)
            .next_multiple_of(config.block_align);
        let blocks = config.total_blocks();
        let layout = Layout::from_size_align(stride * blocks.max(1), config.block_align)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        // SAFETY: layout has non-zero size.
        let base = NonNull::new(unsafe { alloc::alloc_zeroed(layout) })
            .unwrap_or_else(|| alloc::handle_alloc_error(layout));
        let l = config.batch_len;
        // Every full batch can sit in the shared stack, plus one node per
        // process for an in-flight push or pop.
        let node_count = blocks.div_ceil(l) + 2 * config.processes;
        let pool = BlockPool {
            stride,
            base,
            layout,
            blocks,
            live: (0..blocks).map(|_| AtomicBool::new(false)).collect(),
            live_count: AtomicUsize::new(0),
            nodes: (0..node_count)
                .map(|_| BatchNode {
                    next: AtomicU32::new(NIL),
                    blocks: UnsafeCell::new(vec![0; l].into_boxed_slice()),
                })
                .collect(),
            shared: IndexStack::new(),
            free_nodes: IndexStack::new(),
            shared_len: AtomicUsize::new(0),
            registered: (0..config.processes).map(|_| AtomicBool::new(false)).collect(),
            parked: Mutex::new(Vec::new()),
            config,
        };

        let mut addresses = (0..blocks).map(|i| pool.base.as_ptr() as usize + i * stride);
        let mut parked = Vec::with_capacity(config.processes);
        for _ in 0..config.processes {
            let mut local = LocalPool::empty(l);
            for _ in 0..2 {
                local.local_batches.push(addresses.by_ref().take(l).collect());
            }
            local.current.extend(addresses.by_ref().take(l / 2));
            parked.push(Some(local));
        }
        let mut next_node = 0u32;
        for _ in 0..config.shared_batches() {
            // SAFETY: nodes are not shared yet.
            let slots = unsafe { &mut *pool.nodes[next_node as usize].blocks.get() };
            for slot in slots.iter_mut() {
                *slot = addresses.next().expect("arena sized for shared batches");
            }
            pool.shared.push(&pool.nodes, next_node);
            pool.shared_len.fetch_add(1, Ordering::Relaxed);
            next_node += 1;
        }
        debug_assert!(addresses.next().is_none());
        for i in (next_node..node_count as u32).rev() {
            pool.free_nodes.push(&pool.nodes, i);
        }
        *pool.parked.lock().unwrap() = parked;
        Ok(Arc::new(pool))
    }

    pub fn config(&self) -> PoolConfig {
        self.config
    }

    /// Size of each block in bytes (after alignment padding).
    pub fn block_size(&self) -> usize {
        self.stride
    }

    /// All blocks owned by the pool.
    pub fn total_blocks(&self) -> usize {
        self.blocks
    }

    pub fn live_blocks(&self) -> usize {
        self.live_count.load(Ordering::Relaxed)
    }

    /// Full batches currently in the shared stack.
    pub fn shared_batches(&self) -> usize {
        self.shared_len.load(Ordering::Relaxed)
    }

    pub fn contains(&self, block: NonNull<u8>) -> bool {
        self.index_of(block).is_ok()
    }

    pub fn is_live(&self, block: NonNull<u8>) -> bool {
        self.index_of(block)
            .map(|i| self.live[i].load(Ordering::Acquire))
            .unwrap_or(false)
    }

    fn index_of(&self, block: NonNull<u8>) -> Result<usize> {
        let addr = block.as_ptr() as usize;
        let base = self.base.as_ptr() as usize;
        if addr < base || !(addr - base).is_multiple_of(self.stride) || (addr - base) / self.stride >= self.blocks
        {
            return Err(Error::ForeignBlock(addr));
        }
        Ok((addr - base) / self.stride)
    }

    /// Registers a process, picking up the local pool its pid left behind.
    pub fn register(self: &Arc<Self>) -> Result<PoolHandle> {
        for (pid, flag) in self.registered.iter().enumerate() {
            if flag
                .compare_exchange(false, true, Ordering::AcqRel, Ordering::Relaxed)
                .is_ok()
            {
                let local = self.parked.lock().unwrap()[pid]
                    .take()
                    .expect("parked local pool for a free pid");
                return Ok(PoolHandle {
                    pool: Arc::clone(self),
                    pid,
                    local,
                });
            }
        }
        Err(Error::CapacityExhausted {
            capacity: self.config.processes,
        })
    }

    /// # Safety
    /// The caller must exclusively hold `node`.
    #[allow(clippy::mut_from_ref)]
    unsafe fn node_blocks(&self, node: u32) -> &mut [usize] {
        unsafe { &mut *self.nodes[node as usize].blocks.get() }
    }
}

impl Drop for BlockPool {
    fn drop(&mut self) {
        // SAFETY: allocated in `new` with this layout.
        unsafe { alloc::dealloc(self.base.as_ptr(), self.layout) };
    }
}

#[derive(Debug)]
struct PushOp {
    batch: Vec<usize>,
    node: Option<u32>,
    copied: usize,
    step: usize,
}

#[derive(Debug)]
struct PopOp {
    node: Option<u32>,
    out: Vec<usize>,
    step: usize,
}

#[derive(Debug)]
struct LocalPool {
    local_batches: Vec<Vec<usize>>,
    current: Vec<usize>,
    num_batches: usize,
    push: Option<PushOp>,
    pop: Option<PopOp>,
    spare: Vec<Vec<usize>>,
}

impl LocalPool {
    fn empty(l: usize) -> Self {
        LocalPool {
            local_batches: Vec::with_capacity(2),
            current: Vec::with_capacity(l),
            num_batches: 2,
            push: None,
            pop: None,
            spare: Vec::new(),
        }
    }
}

/// A process's private pool. Not shareable between threads at once.
pub struct PoolHandle {
    pool: Arc<BlockPool>,
    pid: usize,
    local: LocalPool,
}

impl std::fmt::Debug for PoolHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PoolHandle")
            .field("pid", &self.pid)
            .field("num_batches", &self.local.num_batches)
            .field("current", &self.local.current.len())
            .field("held", &self.held())
            .finish()
    }
}

impl PoolHandle {
    pub fn pid(&self) -> usize {
        self.pid
    }

    pub fn pool(&self) -> &Arc<BlockPool> {
        &self.pool
    }

    /// Full local batches plus one if a shared pop is pending.
    pub fn num_batches(&self) -> usize {
        self.local.num_batches
    }

    pub fn current_len(&self) -> usize {
        self.local.current.len()
    }

    pub fn full_batches(&self) -> usize {
        self.local.local_batches.len()
    }

    pub fn pending_push(&self) -> bool {
        self.local.push.is_some()
    }

    pub fn pending_pop(&self) -> bool {
        self.local.pop.is_some()
    }

    /// Steps taken so far by the pending pop, if any.
    pub fn pop_progress(&self) -> Option<usize> {
        self.local.pop.as_ref().map(|op| op.step)
    }

    /// Blocks this process holds, counting in-flight shared operations.
    pub fn held(&self) -> usize {
        let l = &self.local;
        let l_len = self.pool.config.batch_len;
        let push = l.push.as_ref().map_or(0, |_| l_len);
        let pop = l.pop.as_ref().map_or(0, |op| op.out.len());
        l.local_batches.iter().map(Vec::len).sum::<usize>() + l.current.len() + push + pop
    }

    /// Hands out a block that is not live.
    pub fn allocate(&mut self) -> Result<NonNull<u8>> {
        if self.local.current.is_empty() {
            if self.local.local_batches.is_empty() {
                // Only reachable when a pending pop has not finished in time
                // (batch length below the process count, or an empty shared pool).
                self.finish_pop();
            }
            let batch = self.local.local_batches.pop().ok_or(Error::PoolExhausted)?;
            let drained = std::mem::replace(&mut self.local.current, batch);
            self.local.spare.push(drained);
            if self.local.num_batches == 1 {
                debug_assert!(self.local.pop.is_none());
                self.local.pop = Some(PopOp {
                    node: None,
                    out: self.take_spare(),
                    step: 0,
                });
            } else {
                self.local.num_batches -= 1;
            }
        }
        self.delayed_step();
        let addr = self.local.current.pop().expect("current batch has a block");
        let index = self.pool.index_of(nonnull(addr))?;
        let was_live = self.pool.live[index].swap(true, Ordering::AcqRel);
        assert!(!was_live, "allocated a live block {addr:#x}");
        self.pool.live_count.fetch_add(1, Ordering::Relaxed);
        Ok(nonnull(addr))
    }

    /// Returns a live block to the pool.
    pub fn free(&mut self, block: NonNull<u8>) -> Result<()> {
        let index = self.pool.index_of(block)?;
        if !self.pool.live[index].swap(false, Ordering::AcqRel) {
            return Err(Error::DoubleFree(block.as_ptr() as usize));
        }
        self.pool.live_count.fetch_sub(1, Ordering::Relaxed);
        let l = self.pool.config.batch_len;
        if self.local.current.len() == l {
            let fresh = self.take_spare();
            let full = std::mem::replace(&mut self.local.current, fresh);
            if self.local.num_batches == 2 {
                if self.local.push.is_some() {
                    // Stall: the previous push must land before the next starts.
                    self.finish_push();
                }
                self.local.push = Some(PushOp {
                    batch: full,
                    node: None,
                    copied: 0,
                    step: 0,
                });
            } else {
                self.local.num_batches += 1;
                self.local.local_batches.push(full);
            }
        }
        self.delayed_step();
        self.local.current.push(block.as_ptr() as usize);
        Ok(())
    }

    /// Advances each pending shared operation by one of its `p` steps.
    pub fn delayed_step(&mut self) {
        self.step_push(false);
        self.step_pop(false);
    }

    fn steps(&self) -> usize {
        self.pool.config.processes
    }

    fn chunk(&self) -> usize {
        self.pool.config.batch_len.div_ceil(self.steps())
    }

    fn take_spare(&mut self) -> Vec<usize> {
        let l = self.pool.config.batch_len;
        self.local.spare.pop().unwrap_or_else(|| Vec::with_capacity(l))
    }

    fn step_push(&mut self, finish: bool) {
        let steps = self.steps();
        let chunk = self.chunk();
        let pool = Arc::clone(&self.pool);
        let Some(op) = self.local.push.as_mut() else {
            return;
        };
        op.step += 1;
        let last = finish || op.step >= steps;
        if op.node.is_none() {
            op.node = if last {
                pool.free_nodes.pop(&pool.nodes)
            } else {
                pool.free_nodes.try_pop(&pool.nodes).ok().flatten()
            };
        }
        let Some(node) = op.node else {
            assert!(!last, "batch storage exhausted");
            return;
        };
        // SAFETY: the node came off the free list and is ours until pushed.
        let dst = unsafe { pool.node_blocks(node) };
        let upto = if last {
            op.batch.len()
        } else {
            (op.copied + chunk).min(op.batch.len())
        };
        dst[op.copied..upto].copy_from_slice(&op.batch[op.copied..upto]);
        op.copied = upto;
        if last {
            pool.shared.push(&pool.nodes, node);
            pool.shared_len.fetch_add(1, Ordering::Relaxed);
            let mut op = self.local.push.take().expect("pending push");
            op.batch.clear();
            self.local.spare.push(op.batch);
        }
    }

    fn step_pop(&mut self, finish: bool) -> bool {
        let steps = self.steps();
        let chunk = self.chunk();
        let l = self.pool.config.batch_len;
        let pool = Arc::clone(&self.pool);
        let Some(op) = self.local.pop.as_mut() else {
            return true;
        };
        op.step += 1;
        let last = finish || op.step >= steps;
        if op.node.is_none() {
            op.node = if last {
                pool.shared.pop(&pool.nodes)
            } else {
                pool.shared.try_pop(&pool.nodes).ok().flatten()
            };
            if op.node.is_some() {
                pool.shared_len.fetch_sub(1, Ordering::Relaxed);
            }
        }
        let Some(node) = op.node else {
            // Shared pool is empty; keep the pop pending.
            return false;
        };
        // SAFETY: the node was detached from the shared stack by this pop.
        let src = unsafe { pool.node_blocks(node) };
        let upto = if last { l } else { (op.out.len() + chunk).min(l) };
        let from = op.out.len();
        op.out.extend_from_slice(&src[from..upto]);
        if last {
            pool.free_nodes.push(&pool.nodes, node);
            let op = self.local.pop.take().expect("pending pop");
            self.local.local_batches.push(op.out);
        }
        true
    }

    fn finish_push(&mut self) {
        if self.local.push.is_some() {
            self.step_push(true);
        }
    }

    fn finish_pop(&mut self) {
        if self.local.pop.is_some() {
            self.step_pop(true);
        }
    }
}

impl Drop for PoolHandle {
    fn drop(&mut self) {
        self.finish_push();
        self.finish_pop();
        let local = std::mem::replace(&mut self.local, LocalPool::empty(0));
        if let Ok(mut parked) = self.pool.parked.lock() {
            parked[self.pid] = Some(local);
        }
        self.pool.registered[self.pid].store(false, Ordering::Release);
    }
}

fn nonnull(addr: usize) -> NonNull<u8> {
    NonNull::new(addr as *mut u8).expect("pool blocks are non-null")
}
