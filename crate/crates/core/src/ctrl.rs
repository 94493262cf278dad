//! The controller: queues, devices, cache, share table, lock detector and
//! service state of one run, plus the command issue path.
//!
//! Issuing follows the lock-handoff protocol. A thread reserves a
//! submission entry (taking that entry's lock), writes the command, hands
//! the entry lock to the service and then drives the doorbell until its
//! entry is published. It never waits for the completion while holding
//! anything; the service releases the entry and clears the barrier.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;

use crate::api::{ApiError, BufStorage};
use crate::cache::{make_policy, Intent, SoftwareCache, Step, Waiter};
use crate::config::AgileConfig;
use crate::host::HostError;
use crate::lock_chain::{AgileLock, LockChain, LockDetector, LockError, LockId};
use crate::nvme::{next_sq, select_sq, DmaBuf, NvmeCommand, Opcode, QueuePair, SqdbStatus};
use crate::service::{service_warp, Barrier, PendingCmd, PendingTable, ServiceState, Target};
use crate::share_table::ShareTable;
use crate::sim::{Flag, Sim, TaskHandle, TaskId, TaskKind, TraceEvent};
use crate::ssd::SsdDevice;
use crate::BlockKey;

/// Where a cache read request ended up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Hit(usize),
    Filling(usize),
    MissFillStarted(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HygieneStats {
    /// Tasks whose lock chain was checked at exit.
    pub exits_checked: u64,
    /// Tasks that exited holding locks, with what they held.
    pub exits_with_locks: Vec<(TaskId, Vec<LockId>)>,
    pub barrier_waits: u64,
    /// Barrier waits entered while the task held a lock.
    pub waits_with_locks: u64,
}

pub struct AgileCtrl {
    sim: Sim,
    cfg: AgileConfig,
    locks: Rc<LockDetector>,
    devices: Vec<Rc<SsdDevice>>,
    pending: Vec<Vec<PendingTable>>,
    sqe_locks: Vec<Vec<Vec<AgileLock>>>,
    cache: SoftwareCache,
    share: Option<ShareTable<Rc<BufStorage>>>,
    service: ServiceState,
    cqs: Vec<(u16, u16)>,
    hygiene: RefCell<HygieneStats>,
    tasks: RefCell<Vec<TaskHandle>>,
    // Issuers parked because every SQ of a device was full, oldest first.
    space_waiters: Vec<RefCell<VecDeque<Rc<Flag>>>>,
}

impl AgileCtrl {
    pub fn new(cfg: AgileConfig) -> Result<Rc<Self>, HostError> {
        cfg.validate()?;
        let sim = Sim::new(cfg.sim.clone());
        let locks = Rc::new(LockDetector::new(sim.clone(), cfg.lock_debug));
        let mut devices = Vec::new();
        let mut pending = Vec::new();
        let mut sqe_locks = Vec::new();
        let mut cqs = Vec::new();
        for (d, dcfg) in cfg.devices.iter().enumerate() {
            let qps = (0..cfg.queue_pairs)
                .map(|q| QueuePair::new(q as u16, cfg.queue_depth))
                .collect::<Result<Vec<_>, _>>()?;
            devices.push(SsdDevice::new(sim.clone(), d as u16, dcfg.clone(), Rc::new(qps))?);
            pending.push(
                (0..cfg.queue_pairs)
                    .map(|_| PendingTable::new(cfg.queue_depth))
                    .collect(),
            );
            sqe_locks.push(
                (0..cfg.queue_pairs)
                    .map(|q| {
                        (0..cfg.queue_depth)
                            .map(|s| locks.new_lock(format!("d{d}.sq{q}.sqe{s}")))
                            .collect()
                    })
                    .collect(),
            );
            cqs.extend((0..cfg.queue_pairs).map(|q| (d as u16, q as u16)));
        }
        let policy = make_policy(cfg.policy, cfg.cache_lines, cfg.busy_eviction);
        let cache = SoftwareCache::new(
            sim.clone(),
            locks.clone(),
            cfg.cache_lines,
            cfg.block_size(),
            policy,
        )?;
        let space_waiters = (0..cfg.devices.len()).map(|_| RefCell::default()).collect();
        let share = if cfg.share_table.enabled {
            Some(ShareTable::new(sim.clone(), locks.clone(), cfg.share_table.buckets)?)
        } else {
            None
        };
        Ok(Rc::new(AgileCtrl {
            sim,
            cfg,
            locks,
            devices,
            pending,
            sqe_locks,
            cache,
            share,
            service: ServiceState::default(),
            cqs,
            hygiene: RefCell::new(HygieneStats::default()),
            tasks: RefCell::new(Vec::new()),
            space_waiters,
        }))
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn config(&self) -> &AgileConfig {
        &self.cfg
    }

    pub fn locks(&self) -> &LockDetector {
        &self.locks
    }

    pub fn cache(&self) -> &SoftwareCache {
        &self.cache
    }

    pub fn share(&self) -> Option<&ShareTable<Rc<BufStorage>>> {
        self.share.as_ref()
    }

    pub fn service(&self) -> &ServiceState {
        &self.service
    }

    pub fn devices(&self) -> &[Rc<SsdDevice>] {
        &self.devices
    }

    pub fn device(&self, dev: u16) -> &Rc<SsdDevice> {
        &self.devices[dev as usize]
    }

    pub fn queue_pair(&self, dev: u16, qp: u16) -> &QueuePair {
        &self.devices[dev as usize].queues()[qp as usize]
    }

    pub fn pending(&self, dev: u16, sq: u16) -> &PendingTable {
        &self.pending[dev as usize][sq as usize]
    }

    pub fn sqe_lock(&self, dev: u16, sq: u16, sqe: u16) -> &AgileLock {
        &self.sqe_locks[dev as usize][sq as usize][sqe as usize]
    }

    /// Every (device, queue pair) in service rotation order.
    pub fn all_cqs(&self) -> Vec<(u16, u16)> {
        self.cqs.clone()
    }

    pub fn block_size(&self) -> usize {
        self.cfg.block_size()
    }

    pub fn hygiene(&self) -> HygieneStats {
        self.hygiene.borrow().clone()
    }

    /// Spawn the device engines and the service warps.
    pub fn start(self: &Rc<Self>) {
        if self.service.running.replace(true) {
            return;
        }
        self.service.stop.set(false);
        let mut tasks = self.tasks.borrow_mut();
        for d in &self.devices {
            d.resume();
            tasks.push(d.start());
        }
        let n = self.cfg.service_warps;
        for w in 0..n {
            let ctrl = self.clone();
            let h = self.sim.spawn(TaskKind::ServiceWarp, format!("service{w}"), async move {
                service_warp(ctrl, w, n).await
            });
            if w == 0 {
                self.service.holder.set(Some(h.id));
            }
            tasks.push(h);
        }
    }

    /// Ask the service to drain and exit, then stop the devices once it has.
    pub async fn shutdown(self: &Rc<Self>) {
        self.service.stop.set(true);
        self.service.work.notify();
        let tasks: Vec<TaskHandle> = self.tasks.borrow_mut().drain(..).collect();
        for t in &tasks {
            if self.sim.task_kind(t.id) == TaskKind::ServiceWarp {
                t.join().await;
            }
        }
        for d in &self.devices {
            d.stop();
        }
        for t in &tasks {
            t.join().await;
        }
        self.service.running.set(false);
    }

    pub fn check_key(&self, key: BlockKey) -> Result<&Rc<SsdDevice>, ApiError> {
        let dev = self
            .devices
            .get(key.dev as usize)
            .ok_or(ApiError::NoSuchDevice(key.dev))?;
        if key.blk >= dev.num_blocks() {
            return Err(ApiError::OutOfRange {
                dev: key.dev,
                blk: key.blk,
            });
        }
        Ok(dev)
    }

    /// An SQE of `dev` was released; wake the oldest parked issuer.
    pub(crate) fn sq_released(&self, dev: u16) {
        if let Some(f) = self.space_waiters[dev as usize].borrow_mut().pop_front() {
            f.set();
        }
    }

    pub(crate) fn note_exit(&self, chain: &LockChain) {
        let mut h = self.hygiene.borrow_mut();
        h.exits_checked += 1;
        if !chain.is_empty() {
            h.exits_with_locks.push((chain.task(), chain.held()));
        }
    }

    /// Wait for a barrier, recording a hygiene violation if the caller
    /// holds any lock.
    pub async fn wait_barrier(&self, chain: &LockChain, b: &Barrier) -> u16 {
        {
            let mut h = self.hygiene.borrow_mut();
            h.barrier_waits += 1;
            if !chain.is_empty() {
                h.waits_with_locks += 1;
            }
        }
        b.wait().await
    }

    fn violation(&self, what: String) {
        self.sim.emit(TraceEvent::Violation {
            module: "nvme",
            what: what.clone(),
        });
        self.service.stats.borrow_mut().violations.push(what);
    }

    /// Issue one command and return its barrier once the entry is visible
    /// to the device.
    pub async fn issue(
        &self,
        thread_idx: usize,
        chain: &LockChain,
        opcode: Opcode,
        key: BlockKey,
        dest: DmaBuf,
        target: Target,
    ) -> Result<Barrier, ApiError> {
        let dev = self.check_key(key)?.clone();
        let holder = self.service.holder().ok_or(ApiError::ServiceNotRunning)?;
        let qps = dev.queues().clone();
        let n = qps.len();
        let start = select_sq(thread_idx, n);
        let mut sq_idx = start;
        let mut misses = 0usize;
        let pos = loop {
            if let Some(pos) = qps[sq_idx].sq.try_reserve() {
                self.locks.clear_wait(chain.task());
                break pos;
            }
            self.sim.emit(TraceEvent::SqFull {
                dev: key.dev,
                sq: sq_idx as u16,
            });
            misses += 1;
            sq_idx = next_sq(sq_idx, n);
            if misses.is_multiple_of(n) {
                // Every queue is full. Record the wait on the oldest entry of
                // the home queue so the detector sees it, then park until an
                // entry is released and back off before rescanning.
                let home = &qps[start].sq;
                let lock = self.sqe_lock(key.dev, start as u16, home.slot_of(home.head()));
                if self.locks.try_acquire(lock, chain).is_ok() {
                    let _ = self.locks.release(lock, chain);
                }
                let flag = Rc::new(Flag::new());
                self.space_waiters[key.dev as usize]
                    .borrow_mut()
                    .push_back(flag.clone());
                flag.wait().await;
                self.sim.sleep(self.cfg.retry_backoff_ns).await;
            }
        };
        let sq = &qps[sq_idx].sq;
        let sqe = sq.slot_of(pos);
        let sq16 = sq_idx as u16;
        self.sim.emit(TraceEvent::SqeReserve {
            dev: key.dev,
            sq: sq16,
            sqe,
        });
        let lock = self.sqe_lock(key.dev, sq16, sqe);
        match self.locks.try_acquire(lock, chain) {
            Ok(()) => {}
            Err(LockError::WouldDeadlock(_)) | Err(LockError::Contended(_)) | Err(LockError::NotHeld(_)) => {
                self.violation(format!("sqe lock {} busy on a fresh reservation", lock.id()));
            }
        }
        if self.cfg.sqe_write_ns > 0 {
            self.sim.sleep(self.cfg.sqe_write_ns).await;
        }
        let barrier = Barrier::new(Some(chain.task()), self.sim.now());
        barrier.set_link(key.dev, sq16, sqe);
        let fresh = self.pending(key.dev, sq16).insert(
            sqe,
            PendingCmd {
                barrier: barrier.clone(),
                target,
                issued_at: self.sim.now(),
            },
        );
        if !fresh {
            self.violation(format!("cid {sqe} already in flight on dev {} sq {sq16}", key.dev));
        }
        let len = dest.len() as u32;
        sq.write_entry(
            pos,
            NvmeCommand {
                opcode,
                cid: 0,
                key,
                dest,
                len,
            },
        )?;
        self.sim.emit(TraceEvent::Enqueue {
            dev: key.dev,
            sq: sq16,
            sqe,
            cid: sqe,
            write: opcode.is_write(),
            blk: key.blk,
        });
        self.service.add_outstanding();
        if chain.holds(lock.id()) {
            self.locks.handoff(lock, chain, holder)?;
        }
        loop {
            let (status, published) = sq.attempt_sqdb(pos);
            if let Some(p) = published {
                for q in p.old..p.new {
                    self.sim.emit(TraceEvent::SqeIssued {
                        dev: key.dev,
                        sq: sq16,
                        sqe: sq.slot_of(q),
                    });
                }
                self.sim.emit(TraceEvent::SqDoorbell {
                    dev: key.dev,
                    sq: sq16,
                    old: p.old,
                    new: p.new,
                    depth: sq.depth(),
                });
                dev.ring_sq_doorbell(sq16, p);
            }
            if status == SqdbStatus::Success {
                return Ok(barrier);
            }
            // An earlier entry is reserved but not written yet; its writer
            // will publish ours too.
            self.sim.sleep(self.cfg.sqe_write_ns.max(1)).await;
        }
    }

    /// Read `key` through the cache. A `waiter` receives the block once it
    /// is valid (immediately on a hit).
    pub async fn cache_read(
        &self,
        thread_idx: usize,
        chain: &LockChain,
        key: BlockKey,
        waiter: Option<Waiter>,
    ) -> Result<Access, ApiError> {
        self.check_key(key)?;
        loop {
            let gen = self.cache.generation();
            match self.cache.lookup(key, Intent::Read, chain) {
                Step::Hit(line) => {
                    if let Some(w) = waiter {
                        self.cache.read_into(line, key, &w.buf);
                        let _ = w.barrier.complete(0);
                    }
                    return Ok(Access::Hit(line));
                }
                Step::Filling(line) => {
                    if let Some(w) = waiter {
                        self.cache.add_waiter(line, w);
                    }
                    return Ok(Access::Filling(line));
                }
                Step::FillStarted(line) => {
                    if let Some(w) = waiter {
                        self.cache.add_waiter(line, w);
                    }
                    let buf = self.cache.line_buf(line);
                    self.issue(thread_idx, chain, Opcode::Read, key, buf, Target::CacheFill { line })
                        .await?;
                    return Ok(Access::MissFillStarted(line));
                }
                Step::WritebackStarted { line, old } => {
                    let buf = self.cache.line_buf(line);
                    self.issue(thread_idx, chain, Opcode::Write, old, buf, Target::CacheWriteback { line })
                        .await?;
                    self.cache.changed_since(gen).await;
                }
                Step::Deferred(_) | Step::Exhausted => self.cache.changed_since(gen).await,
                Step::StoreStarted(_) => unreachable!("read lookups never store"),
            }
        }
    }

    /// Synchronous read of `len` bytes at `offset` within `key`.
    pub async fn read_sync(
        &self,
        thread_idx: usize,
        chain: &LockChain,
        key: BlockKey,
        offset: usize,
        len: usize,
    ) -> Result<Vec<u8>, ApiError> {
        let buf = DmaBuf::zeroed(self.block_size());
        let barrier = Barrier::new(Some(chain.task()), self.sim.now());
        self.cache_read(
            thread_idx,
            chain,
            key,
            Some(Waiter {
                buf: buf.clone(),
                barrier: barrier.clone(),
            }),
        )
        .await?;
        let status = self.wait_barrier(chain, &barrier).await;
        if status != 0 {
            return Err(ApiError::Device { status });
        }
        Ok(buf.read_at(offset, len))
    }

    /// Replace the cached copy of `key` with `bytes`. With `eager` a WRITE is
    /// started and its barrier returned; otherwise a resident line is only
    /// marked MODIFIED (a miss still writes through).
    pub async fn cache_store(
        &self,
        thread_idx: usize,
        chain: &LockChain,
        key: BlockKey,
        bytes: &[u8],
        eager: bool,
    ) -> Result<Option<Barrier>, ApiError> {
        self.check_key(key)?;
        if bytes.len() != self.block_size() {
            return Err(ApiError::BadLength {
                got: bytes.len(),
                want: self.block_size(),
            });
        }
        loop {
            let gen = self.cache.generation();
            let intent = if eager {
                Intent::Store(bytes)
            } else {
                Intent::StoreLazy(bytes)
            };
            match self.cache.lookup(key, intent, chain) {
                Step::Hit(_) => return Ok(None),
                Step::StoreStarted(line) => {
                    let buf = self.cache.line_buf(line);
                    let b = self
                        .issue(thread_idx, chain, Opcode::Write, key, buf, Target::CacheWriteback { line })
                        .await?;
                    return Ok(Some(b));
                }
                Step::WritebackStarted { line, old } => {
                    let buf = self.cache.line_buf(line);
                    self.issue(thread_idx, chain, Opcode::Write, old, buf, Target::CacheWriteback { line })
                        .await?;
                    self.cache.changed_since(gen).await;
                }
                Step::Filling(_) | Step::Deferred(_) | Step::Exhausted => {
                    self.cache.changed_since(gen).await
                }
                Step::FillStarted(_) => unreachable!("store lookups never fill"),
            }
        }
    }

    /// Write every MODIFIED line back and wait for the writes.
    pub async fn flush(&self, thread_idx: usize, chain: &LockChain) -> Result<(), ApiError> {
        loop {
            let dirty = self.cache.modified_lines();
            if dirty.is_empty() {
                return Ok(());
            }
            let mut barriers = Vec::new();
            for (line, _) in dirty {
                if let Some(key) = self.cache.start_flush(line, chain) {
                    let buf = self.cache.line_buf(line);
                    barriers.push(
                        self.issue(thread_idx, chain, Opcode::Write, key, buf, Target::CacheWriteback { line })
                            .await?,
                    );
                }
            }
            for b in &barriers {
                self.wait_barrier(chain, b).await;
            }
        }
    }
}
