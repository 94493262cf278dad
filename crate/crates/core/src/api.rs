//! The per-thread device API: prefetch, asynchronous reads and writes into
//! buffers, array-style element reads through the cache, raw uncached I/O
//! and the share-table calls.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use thiserror::Error;

use crate::cache::{CacheError, Waiter};
use crate::ctrl::AgileCtrl;
use crate::lock_chain::{LockChain, LockError, LockId};
use crate::nvme::{DmaBuf, Opcode, QueueError};
use crate::service::{Barrier, BarrierState, Target};
use crate::share_table::{Finish, Release, ShareError};
use crate::sim::{Nanos, Rendezvous, TaskId};
use crate::BlockKey;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("no device {0}")]
    NoSuchDevice(u16),
    #[error("block ({dev}, {blk}) is out of range")]
    OutOfRange { dev: u16, blk: u64 },
    #[error("buffer still has a read in flight")]
    BufferInFlight,
    #[error("buffer holds a share-table reference to {0}; release it first")]
    BufferShared(BlockKey),
    #[error("buffer holds no share-table reference")]
    NotShared,
    #[error("share table is disabled")]
    ShareDisabled,
    #[error("buffer has never been read")]
    NeverIssued,
    #[error("expected {want} bytes, got {got}")]
    BadLength { got: usize, want: usize },
    #[error("offset {offset}+{len} outside a {block}-byte block")]
    BadOffset { offset: usize, len: usize, block: usize },
    #[error("device returned status {status:#x}")]
    Device { status: u16 },
    #[error("service is not running")]
    ServiceNotRunning,
    #[error("thread exited holding {0:?}")]
    LocksHeld(Vec<LockId>),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Share(#[from] ShareError),
    #[error(transparent)]
    Lock(#[from] LockError),
}

/// Fixed-size little-endian element types readable with `array_get`.
pub trait Element: Copy {
    const SIZE: usize;
    fn from_le(bytes: &[u8]) -> Self;
    fn to_le(self) -> Vec<u8>;
}

macro_rules! element {
    ($($t:ty),*) => {$(
        impl Element for $t {
            const SIZE: usize = std::mem::size_of::<$t>();
            fn from_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
            fn to_le(self) -> Vec<u8> {
                self.to_le_bytes().to_vec()
            }
        }
    )*};
}

element!(u8, u16, u32, u64, i32, i64, f32, f64);

/// Storage behind an [`AgileBuf`]; may be shared through the share table.
#[derive(Debug)]
pub struct BufStorage {
    pub data: DmaBuf,
    barrier: RefCell<Option<Barrier>>,
}

impl BufStorage {
    pub fn new(len: usize) -> Self {
        BufStorage {
            data: DmaBuf::zeroed(len),
            barrier: RefCell::new(None),
        }
    }

    pub fn barrier(&self) -> Option<Barrier> {
        self.barrier.borrow().clone()
    }
}

/// A block-sized user buffer.
#[derive(Debug)]
pub struct AgileBuf {
    cur: RefCell<Rc<BufStorage>>,
    share_ref: Cell<Option<BlockKey>>,
    len: usize,
}

impl AgileBuf {
    pub fn new(len: usize) -> Self {
        AgileBuf {
            cur: RefCell::new(Rc::new(BufStorage::new(len))),
            share_ref: Cell::new(None),
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn storage(&self) -> Rc<BufStorage> {
        self.cur.borrow().clone()
    }

    pub fn data(&self) -> DmaBuf {
        self.cur.borrow().data.clone()
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.data().to_vec()
    }

    pub fn get<T: Element>(&self, index: usize) -> T {
        T::from_le(&self.data().read_at(index * T::SIZE, T::SIZE))
    }

    /// Local modification only; see [`GpuThread::modify`] for shared buffers.
    pub fn set<T: Element>(&self, index: usize, v: T) {
        self.data().write_at(index * T::SIZE, &v.to_le());
    }

    pub fn barrier(&self) -> Option<Barrier> {
        self.cur.borrow().barrier()
    }

    /// No read in flight.
    pub fn is_ready(&self) -> bool {
        self.barrier().is_none_or(|b| b.is_done())
    }

    /// Share-table key this buffer currently references.
    pub fn shared_key(&self) -> Option<BlockKey> {
        self.share_ref.get()
    }

    fn in_flight(&self) -> bool {
        self.barrier()
            .is_some_and(|b| b.state() == BarrierState::Pending)
    }
}

/// Result of a warp-level coalescing pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coalesced {
    /// Distinct keys in first-appearance order.
    pub uniques: Vec<BlockKey>,
    /// Lane that issues each unique key.
    pub leaders: Vec<usize>,
    /// For every lane, the lane issuing its key.
    pub lane_leader: Vec<Option<usize>>,
}

impl Coalesced {
    pub fn is_leader(&self, lane: usize) -> bool {
        self.lane_leader.get(lane).copied().flatten() == Some(lane)
    }
}

/// Collapse per-lane block requests to one request per distinct block.
pub fn warp_coalesce(reqs: &[Option<BlockKey>]) -> Coalesced {
    let mut first: BTreeMap<BlockKey, usize> = BTreeMap::new();
    let mut uniques = Vec::new();
    let mut leaders = Vec::new();
    let mut lane_leader = Vec::with_capacity(reqs.len());
    for (lane, r) in reqs.iter().enumerate() {
        lane_leader.push(r.map(|k| {
            *first.entry(k).or_insert_with(|| {
                uniques.push(k);
                leaders.push(lane);
                lane
            })
        }));
    }
    Coalesced {
        uniques,
        leaders,
        lane_leader,
    }
}

/// Lanes of one warp, for collective calls.
pub struct WarpGroup {
    pub id: usize,
    rv: Rendezvous<Option<BlockKey>, Coalesced>,
}

impl WarpGroup {
    pub fn new(id: usize, lanes: usize) -> Self {
        WarpGroup {
            id,
            rv: Rendezvous::new(lanes),
        }
    }

    pub fn lanes(&self) -> usize {
        self.rv.parties()
    }
}

/// All threads of one launch, for block-wide barriers.
pub struct BlockGroup {
    rv: Rendezvous<(), ()>,
}

impl BlockGroup {
    pub fn new(threads: usize) -> Self {
        BlockGroup {
            rv: Rendezvous::new(threads),
        }
    }
}

/// One simulated GPU thread.
pub struct GpuThread {
    ctrl: Rc<AgileCtrl>,
    idx: usize,
    lane: usize,
    warp: Rc<WarpGroup>,
    block: Rc<BlockGroup>,
    chain: LockChain,
}

impl GpuThread {
    pub fn new(
        ctrl: Rc<AgileCtrl>,
        idx: usize,
        lane: usize,
        warp: Rc<WarpGroup>,
        block: Rc<BlockGroup>,
        task: TaskId,
    ) -> Self {
        GpuThread {
            ctrl,
            idx,
            lane,
            warp,
            block,
            chain: LockChain::new(task),
        }
    }

    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn lane(&self) -> usize {
        self.lane
    }

    pub fn warp_id(&self) -> usize {
        self.warp.id
    }

    pub fn chain(&self) -> &LockChain {
        &self.chain
    }

    pub fn ctrl(&self) -> &Rc<AgileCtrl> {
        &self.ctrl
    }

    pub fn now(&self) -> Nanos {
        self.ctrl.sim().now()
    }

    pub fn block_size(&self) -> usize {
        self.ctrl.block_size()
    }

    pub fn new_buf(&self) -> AgileBuf {
        AgileBuf::new(self.block_size())
    }

    /// Spend `ns` of simulated compute time.
    pub async fn compute(&self, ns: Nanos) {
        self.ctrl.sim().sleep(ns).await;
    }

    /// Block-wide barrier over every thread of the launch.
    pub async fn sync_block(&self) {
        self.block.rv.arrive(self.idx, (), |_| ()).await;
    }

    /// Warp-collective coalescing pass; every lane must call it.
    pub async fn coalesce(&self, key: Option<BlockKey>) -> Rc<Coalesced> {
        self.warp.rv.arrive(self.lane, key, |reqs| warp_coalesce(&reqs)).await
    }

    /// Warp-collective prefetch into the cache. Lanes passing `None` take
    /// part without requesting anything.
    pub async fn prefetch_opt(&mut self, key: Option<(u16, u64)>) -> Result<(), ApiError> {
        let key = key.map(|(d, b)| BlockKey::new(d, b));
        let co = self.coalesce(key).await;
        if let Some(k) = key {
            if co.is_leader(self.lane) {
                self.ctrl.cache_read(self.idx, &self.chain, k, None).await?;
            }
        }
        Ok(())
    }

    pub async fn prefetch(&mut self, dev: u16, blk: u64) -> Result<(), ApiError> {
        self.prefetch_opt(Some((dev, blk))).await
    }

    /// Start reading block `blk` into `buf`; returns once the request is
    /// queued. Pair with [`GpuThread::wait`].
    pub async fn async_read(&mut self, dev: u16, blk: u64, buf: &AgileBuf) -> Result<(), ApiError> {
        let key = BlockKey::new(dev, blk);
        self.ctrl.check_key(key)?;
        if buf.in_flight() {
            return Err(ApiError::BufferInFlight);
        }
        if let Some(k) = buf.share_ref.get() {
            return Err(ApiError::BufferShared(k));
        }
        if let Some(table) = self.ctrl.share() {
            let mine = buf.storage();
            let (shared, registered) = table.lookup_or_register(key, &mine, &self.chain)?;
            buf.share_ref.set(Some(key));
            if !registered {
                *buf.cur.borrow_mut() = shared;
                return Ok(());
            }
        }
        let storage = buf.storage();
        let barrier = Barrier::new(Some(self.chain.task()), self.now());
        *storage.barrier.borrow_mut() = Some(barrier.clone());
        let waiter = Waiter {
            buf: storage.data.clone(),
            barrier,
        };
        self.ctrl.cache_read(self.idx, &self.chain, key, Some(waiter)).await?;
        Ok(())
    }

    /// Wait for the read into `buf` to finish.
    pub async fn wait(&mut self, buf: &AgileBuf) -> Result<(), ApiError> {
        let Some(b) = buf.barrier() else {
            return Err(ApiError::NeverIssued);
        };
        match self.ctrl.wait_barrier(&self.chain, &b).await {
            0 => Ok(()),
            status => Err(ApiError::Device { status }),
        }
    }

    /// Write `buf` to block `blk` through the cache. The buffer may be reused
    /// as soon as this returns.
    pub async fn async_write(&mut self, dev: u16, blk: u64, buf: &AgileBuf) -> Result<(), ApiError> {
        let key = BlockKey::new(dev, blk);
        self.ctrl.check_key(key)?;
        if buf.in_flight() {
            return Err(ApiError::BufferInFlight);
        }
        let bytes = buf.bytes();
        if let Some(table) = self.ctrl.share() {
            // Keep a live shared copy of the block coherent with the write.
            if let Some(e) = table.get(key) {
                if !Rc::ptr_eq(&e.buf, &buf.storage()) {
                    e.buf.data.copy_from(&bytes);
                }
                table.mark_buffer_modified(key, &self.chain)?;
            }
        }
        self.ctrl
            .cache_store(self.idx, &self.chain, key, &bytes, true)
            .await?;
        Ok(())
    }

    /// Write `bytes` at `offset` into `buf`. If the buffer is shared the
    /// table entry is marked modified so the last releaser writes it back.
    pub fn modify(&mut self, buf: &AgileBuf, offset: usize, bytes: &[u8]) -> Result<(), ApiError> {
        if offset + bytes.len() > buf.len() {
            return Err(ApiError::BadOffset {
                offset,
                len: bytes.len(),
                block: buf.len(),
            });
        }
        buf.data().write_at(offset, bytes);
        if let (Some(table), Some(key)) = (self.ctrl.share(), buf.share_ref.get()) {
            table.mark_buffer_modified(key, &self.chain)?;
        }
        Ok(())
    }

    /// Drop this thread's share-table reference. The last holder of a
    /// modified buffer copies it into the cache.
    pub async fn release(&mut self, buf: &AgileBuf) -> Result<(), ApiError> {
        if self.ctrl.share().is_none() {
            return Err(ApiError::ShareDisabled);
        }
        let key = buf.share_ref.get().ok_or(ApiError::NotShared)?;
        if buf.in_flight() {
            self.wait(buf).await?;
        }
        let table = self.ctrl.share().expect("share table");
        let mut outcome = table.release(key, &self.chain)?;
        buf.share_ref.set(None);
        *buf.cur.borrow_mut() = Rc::new(BufStorage::new(buf.len));
        loop {
            let (data, epoch) = match outcome {
                Release::Remaining(_) | Release::Removed => return Ok(()),
                Release::Propagate { buf, epoch } => (buf.data.to_vec(), epoch),
            };
            self.ctrl
                .cache_store(self.idx, &self.chain, key, &data, false)
                .await?;
            let table = self.ctrl.share().expect("share table");
            match table.finish_propagation(key, epoch, &self.chain)? {
                Finish::Removed | Finish::StillHeld => return Ok(()),
                Finish::Again { epoch } => {
                    let e = table.get(key).expect("entry kept for another pass");
                    outcome = Release::Propagate { buf: e.buf, epoch };
                }
            }
        }
    }

    /// Read one element of the device viewed as a flat array of `T`.
    pub async fn array_get<T: Element>(&mut self, dev: u16, index: u64) -> Result<T, ApiError> {
        let (key, off) = self.locate::<T>(dev, index);
        let bytes = self
            .ctrl
            .read_sync(self.idx, &self.chain, key, off, T::SIZE)
            .await?;
        Ok(T::from_le(&bytes))
    }

    /// Warp-collective `array_get`: one request per distinct block.
    pub async fn warp_array_get<T: Element>(&mut self, dev: u16, index: u64) -> Result<T, ApiError> {
        let (key, _) = self.locate::<T>(dev, index);
        let co = self.coalesce(Some(key)).await;
        if co.is_leader(self.lane) {
            self.ctrl.cache_read(self.idx, &self.chain, key, None).await?;
        }
        self.array_get(dev, index).await
    }

    fn locate<T: Element>(&self, dev: u16, index: u64) -> (BlockKey, usize) {
        let bs = self.block_size() as u64;
        let byte = index * T::SIZE as u64;
        (BlockKey::new(dev, byte / bs), (byte % bs) as usize)
    }

    /// Uncached read straight into `buf`.
    pub async fn raw_read(&mut self, dev: u16, blk: u64, buf: &AgileBuf) -> Result<(), ApiError> {
        self.raw(Opcode::Read, dev, blk, buf).await
    }

    /// Uncached write of `buf`.
    pub async fn raw_write(&mut self, dev: u16, blk: u64, buf: &AgileBuf) -> Result<(), ApiError> {
        self.raw(Opcode::Write, dev, blk, buf).await
    }

    async fn raw(&mut self, op: Opcode, dev: u16, blk: u64, buf: &AgileBuf) -> Result<(), ApiError> {
        if buf.in_flight() {
            return Err(ApiError::BufferInFlight);
        }
        let storage = buf.storage();
        let barrier = self
            .ctrl
            .issue(
                self.idx,
                &self.chain,
                op,
                BlockKey::new(dev, blk),
                storage.data.clone(),
                Target::Buffer,
            )
            .await?;
        *storage.barrier.borrow_mut() = Some(barrier);
        Ok(())
    }

    /// Write every modified cache line back and wait for it.
    pub async fn flush(&mut self) -> Result<(), ApiError> {
        self.ctrl.flush(self.idx, &self.chain).await
    }

    /// Finish the thread, failing if it still holds locks.
    pub fn finish(self) -> Result<(), ApiError> {
        if self.chain.is_empty() {
            Ok(())
        } else {
            Err(ApiError::LocksHeld(self.chain.held()))
        }
    }
}
