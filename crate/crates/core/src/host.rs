//! Host side: builds a controller, launches kernels and collects reports.

use std::cell::RefCell;
use std::future::Future;
use std::rc::Rc;

use thiserror::Error;

use crate::api::{ApiError, BlockGroup, GpuThread, WarpGroup};
use crate::cache::CacheStats;
use crate::config::{AgileConfig, ConfigError};
use crate::ctrl::{AgileCtrl, HygieneStats};
use crate::lock_chain::{CycleReport, LockChain};
use crate::nvme::QueueError;
use crate::service::ServiceStats;
use crate::share_table::{ShareError, ShareStats};
use crate::sim::{Nanos, Sim, SimError, SimStats, StopReason, TaskKind};
use crate::ssd::{DeviceStats, SsdError};
use crate::cache::CacheError;
use crate::BlockKey;

#[derive(Debug, Error)]
pub enum HostError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Device(#[from] SsdError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Share(#[from] ShareError),
    #[error("a kernel needs at least one thread")]
    NoThreads,
}

/// Everything measured during one kernel launch.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub sim: SimStats,
    /// Launch time.
    pub started_ns: Nanos,
    /// Time the last user thread returned.
    pub kernel_end_ns: Nanos,
    pub threads: usize,
    pub kernel_errors: usize,
    pub first_error: Option<String>,
    pub service: ServiceStats,
    pub devices: Vec<DeviceStats>,
    pub cache: CacheStats,
    pub share: Option<ShareStats>,
    pub deadlocks: Vec<CycleReport>,
    pub hygiene: HygieneStats,
    pub violations: Vec<String>,
    /// Threads that never returned.
    pub unfinished: usize,
}

impl RunReport {
    pub fn livelock(&self) -> bool {
        self.sim.stop == StopReason::Livelock
    }

    pub fn kernel_ns(&self) -> Nanos {
        self.kernel_end_ns.saturating_sub(self.started_ns)
    }

    pub fn device_reads(&self) -> u64 {
        self.devices.iter().map(|d| d.reads).sum()
    }

    pub fn device_writes(&self) -> u64 {
        self.devices.iter().map(|d| d.writes).sum()
    }

    /// No errors, deadlocks, violations or stuck threads.
    pub fn clean(&self) -> bool {
        self.kernel_errors == 0
            && self.deadlocks.is_empty()
            && self.violations.is_empty()
            && self.unfinished == 0
            && self.hygiene.exits_with_locks.is_empty()
            && self.hygiene.waits_with_locks == 0
            && self.sim.stop == StopReason::Quiescent
    }
}

pub struct AgileHost {
    ctrl: Rc<AgileCtrl>,
}

impl AgileHost {
    pub fn new(cfg: AgileConfig) -> Result<Self, HostError> {
        Ok(AgileHost {
            ctrl: AgileCtrl::new(cfg)?,
        })
    }

    pub fn ctrl(&self) -> &Rc<AgileCtrl> {
        &self.ctrl
    }

    pub fn sim(&self) -> &Sim {
        self.ctrl.sim()
    }

    pub fn config(&self) -> &AgileConfig {
        self.ctrl.config()
    }

    /// Write a block directly into the device store (no simulated time).
    pub fn preload(&self, key: BlockKey, data: &[u8]) -> Result<(), HostError> {
        self.ctrl.device(key.dev).write_block(key.blk, data)?;
        Ok(())
    }

    /// Read a block straight from the device store.
    pub fn device_block(&self, key: BlockKey) -> Result<Vec<u8>, HostError> {
        Ok(self.ctrl.device(key.dev).read_block(key.blk)?)
    }

    /// Launch `threads` threads running `kernel`, then flush the cache, stop
    /// the service and run the simulation until it goes quiet.
    pub fn run_kernel<F, Fut>(&self, threads: usize, kernel: F) -> Result<RunReport, HostError>
    where
        F: Fn(GpuThread) -> Fut + 'static,
        Fut: Future<Output = Result<(), ApiError>> + 'static,
    {
        if threads == 0 {
            return Err(HostError::NoThreads);
        }
        let ctrl = self.ctrl.clone();
        let sim = ctrl.sim().clone();
        let started = sim.now();
        ctrl.start();
        let kernel = Rc::new(kernel);
        let errors: Rc<RefCell<Vec<String>>> = Rc::default();
        let warp_size = ctrl.config().warp_size;
        let block = Rc::new(BlockGroup::new(threads));
        let mut handles = Vec::with_capacity(threads);
        let mut warp = None;
        for i in 0..threads {
            let lane = i % warp_size;
            if lane == 0 {
                let lanes = warp_size.min(threads - i);
                warp = Some(Rc::new(WarpGroup::new(i / warp_size, lanes)));
            }
            let (ctrl, kernel, errors, block) =
                (ctrl.clone(), kernel.clone(), errors.clone(), block.clone());
            let warp = warp.clone().expect("warp group");
            let sim2 = sim.clone();
            handles.push(sim.spawn(TaskKind::UserThread, format!("thread{i}"), async move {
                let task = sim2.current_task().expect("inside a task");
                let t = GpuThread::new(ctrl.clone(), i, lane, warp, block, task);
                let chain = t.chain().clone();
                if let Err(e) = kernel(t).await {
                    errors.borrow_mut().push(format!("thread {i}: {e}"));
                }
                ctrl.note_exit(&chain);
                sim2.progress();
            }));
        }
        let end = Rc::new(RefCell::new(started));
        {
            let (ctrl, end, errors, sim2) = (ctrl.clone(), end.clone(), errors.clone(), sim.clone());
            sim.spawn(TaskKind::Host, "host", async move {
                for h in &handles {
                    h.join().await;
                }
                *end.borrow_mut() = sim2.now();
                let task = sim2.current_task().expect("inside a task");
                if let Err(e) = ctrl.flush(0, &LockChain::new(task)).await {
                    errors.borrow_mut().push(format!("flush: {e}"));
                }
                ctrl.shutdown().await;
            });
        }
        let limit = started + ctrl.config().time_limit_ns;
        let stats = match sim.run_until_quiescent(limit) {
            Ok(s) => s,
            Err(e @ SimError::LivelockSuspected { .. }) => e.stats().clone(),
        };
        let kernel_end = if stats.stop == StopReason::Quiescent || *end.borrow() > started {
            *end.borrow()
        } else {
            sim.now()
        };
        let errors = errors.borrow();
        let mut violations = ctrl.service().stats().violations;
        for d in ctrl.devices() {
            violations.extend(d.violations());
        }
        let unfinished = stats.tasks_blocked;
        Ok(RunReport {
            sim: stats,
            started_ns: started,
            kernel_end_ns: kernel_end,
            threads,
            kernel_errors: errors.len(),
            first_error: errors.first().cloned(),
            service: ctrl.service().stats(),
            devices: ctrl.devices().iter().map(|d| d.stats()).collect(),
            cache: ctrl.cache().stats(),
            share: ctrl.share().map(|s| s.stats()),
            deadlocks: ctrl.locks().reports(),
            hygiene: ctrl.hygiene(),
            violations,
            unfinished,
        })
    }
}
