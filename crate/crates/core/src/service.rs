//! The background completion service.
//!
//! A few service warps rotate over every registered completion queue. Each
//! visit is one window pass: 32 lanes inspect the 32 entries at the current
//! window offset, process the ones whose phase matches, and record them in
//! a bitmap. A fully processed window rings the CQ head doorbell and the
//! window slides by 32. At shutdown a drain pass rings the trailing partial
//! window so the rings end empty.
//!
//! Processing a completion resolves the command identifier to its
//! submission entry, releases the entry and the lock the issuer handed
//! over, applies the command's side effect (cache fill, write-back) and
//! clears the issuer's barrier.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::ctrl::AgileCtrl;
use crate::nvme::{phase_for, Completion, WINDOW};
use crate::sim::{Flag, Nanos, Notify, TaskId, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierState {
    Pending,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("barrier completed twice")]
pub struct BarrierReused;

struct BarrierInner {
    done: Flag,
    owner: Option<TaskId>,
    link: Cell<Option<(u16, u16, u16)>>,
    status: Cell<u16>,
    created: Nanos,
}

/// Per-request completion flag. Only the service (or a cache hit on the
/// issuing path) clears it; the issuer waits on it without holding locks.
#[derive(Clone)]
pub struct Barrier(Rc<BarrierInner>);

impl std::fmt::Debug for Barrier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Barrier")
            .field("state", &self.state())
            .field("owner", &self.0.owner)
            .field("link", &self.0.link.get())
            .finish()
    }
}

impl Barrier {
    pub fn new(owner: Option<TaskId>, now: Nanos) -> Self {
        Barrier(Rc::new(BarrierInner {
            done: Flag::new(),
            owner,
            link: Cell::new(None),
            status: Cell::new(0),
            created: now,
        }))
    }

    /// A barrier that is already DONE.
    pub fn done(owner: Option<TaskId>, now: Nanos) -> Self {
        let b = Self::new(owner, now);
        b.0.done.set();
        b
    }

    pub fn state(&self) -> BarrierState {
        if self.0.done.is_set() {
            BarrierState::Done
        } else {
            BarrierState::Pending
        }
    }

    pub fn is_done(&self) -> bool {
        self.0.done.is_set()
    }

    pub fn owner(&self) -> Option<TaskId> {
        self.0.owner
    }

    pub fn created(&self) -> Nanos {
        self.0.created
    }

    /// The (device, sq, sqe) of the command this barrier tracks.
    pub fn link(&self) -> Option<(u16, u16, u16)> {
        self.0.link.get()
    }

    pub fn set_link(&self, dev: u16, sq: u16, sqe: u16) {
        self.0.link.set(Some((dev, sq, sqe)));
    }

    pub fn status(&self) -> u16 {
        self.0.status.get()
    }

    pub fn complete(&self, status: u16) -> Result<(), BarrierReused> {
        if self.is_done() {
            return Err(BarrierReused);
        }
        self.0.status.set(status);
        self.0.done.set();
        Ok(())
    }

    /// Resolves once DONE, yielding the completion status.
    pub async fn wait(&self) -> u16 {
        self.0.done.wait().await;
        self.status()
    }

    pub fn same(&self, other: &Barrier) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// What the service does with the data once a command completes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    CacheFill { line: usize },
    CacheWriteback { line: usize },
    /// The device moved data straight to or from a user buffer.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct PendingCmd {
    pub barrier: Barrier,
    pub target: Target,
    pub issued_at: Nanos,
}

/// In-flight commands of one submission queue, indexed by CID.
pub struct PendingTable {
    slots: RefCell<Vec<Option<PendingCmd>>>,
}

impl PendingTable {
    pub fn new(depth: u32) -> Self {
        PendingTable {
            slots: RefCell::new(vec![None; depth as usize]),
        }
    }

    /// Returns false if the CID is already in flight.
    pub fn insert(&self, cid: u16, cmd: PendingCmd) -> bool {
        let mut s = self.slots.borrow_mut();
        let slot = &mut s[cid as usize];
        if slot.is_some() {
            return false;
        }
        *slot = Some(cmd);
        true
    }

    pub fn take(&self, cid: u16) -> Option<PendingCmd> {
        self.slots.borrow_mut().get_mut(cid as usize)?.take()
    }

    pub fn in_flight(&self) -> usize {
        self.slots.borrow().iter().filter(|s| s.is_some()).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServiceStats {
    pub completions: u64,
    pub windows_rung: u64,
    pub drain_rings: u64,
    pub drained_entries: u64,
    pub passes: u64,
    pub barrier_latency_total: u64,
    pub unknown_cids: u64,
    pub violations: Vec<String>,
}

impl ServiceStats {
    pub fn mean_barrier_latency_ns(&self) -> f64 {
        if self.completions == 0 {
            0.0
        } else {
            self.barrier_latency_total as f64 / self.completions as f64
        }
    }
}

#[derive(Default)]
pub struct ServiceState {
    pub(crate) outstanding: Cell<u64>,
    pub(crate) work: Notify,
    pub(crate) stop: Cell<bool>,
    pub(crate) running: Cell<bool>,
    pub(crate) holder: Cell<Option<TaskId>>,
    pub(crate) stats: RefCell<ServiceStats>,
}

impl ServiceState {
    pub fn outstanding(&self) -> u64 {
        self.outstanding.get()
    }

    pub fn stats(&self) -> ServiceStats {
        self.stats.borrow().clone()
    }

    /// Task that owns SQE locks handed over by issuers.
    pub fn holder(&self) -> Option<TaskId> {
        self.holder.get()
    }

    pub fn is_running(&self) -> bool {
        self.running.get()
    }

    pub(crate) fn add_outstanding(&self) {
        self.outstanding.set(self.outstanding.get() + 1);
        self.work.notify();
    }
}

/// CQ indices a warp visits: `w, w + n_warps, ...` modulo the CQ count,
/// until the orbit repeats.
pub fn warp_orbit(warp: usize, num_warps: usize, num_cqs: usize) -> Vec<usize> {
    let mut out = Vec::new();
    if num_cqs == 0 {
        return out;
    }
    let mut i = warp % num_cqs;
    loop {
        if out.contains(&i) {
            return out;
        }
        out.push(i);
        i = (i + num_warps) % num_cqs;
    }
}

/// One window pass over CQ `qp` of device `dev`. Returns the number of
/// completions processed.
pub fn cq_polling(ctrl: &AgileCtrl, dev: u16, qp: u16) -> usize {
    let cq = &ctrl.queue_pair(dev, qp).cq;
    let (offset, mut mask, _) = cq.load_window();
    let mut n = 0;
    for lane in 0..WINDOW {
        if mask & (1 << lane) != 0 {
            continue;
        }
        let pos = offset + lane;
        if let Some(c) = cq.load(pos, phase_for(pos, cq.depth())) {
            process_cqe(ctrl, dev, qp, pos, c);
            mask |= 1 << lane;
            n += 1;
        }
    }
    if mask == u32::MAX {
        let new = cq.advance_window();
        let old = cq.ring_head(new);
        ctrl.sim().emit(TraceEvent::CqDoorbell {
            dev,
            cq: qp,
            old,
            new,
            drain: false,
        });
        ctrl.service().stats.borrow_mut().windows_rung += 1;
        ctrl.device(dev).ring_cq_doorbell(qp);
    } else {
        cq.store_mask(mask);
    }
    n
}

/// Shutdown pass: ring the head doorbell past the processed prefix of the
/// current window. The window itself stays put so a later full-window ring
/// is still aligned.
pub fn drain_cq(ctrl: &AgileCtrl, dev: u16, qp: u16) -> u64 {
    cq_polling(ctrl, dev, qp);
    let cq = &ctrl.queue_pair(dev, qp).cq;
    let offset = cq.poll_offset();
    let done = cq.poll_mask().trailing_ones() as u64;
    let target = offset + done;
    let head = cq.head_doorbell();
    if target <= head {
        return 0;
    }
    cq.ring_head(target);
    ctrl.sim().emit(TraceEvent::CqDoorbell {
        dev,
        cq: qp,
        old: head,
        new: target,
        drain: true,
    });
    let mut st = ctrl.service().stats.borrow_mut();
    st.drain_rings += 1;
    st.drained_entries += target - head;
    drop(st);
    ctrl.device(dev).ring_cq_doorbell(qp);
    target - head
}

fn violation(ctrl: &AgileCtrl, what: String) {
    ctrl.sim().emit(TraceEvent::Violation {
        module: "service",
        what: what.clone(),
    });
    ctrl.service().stats.borrow_mut().violations.push(what);
}

/// Handle the completion `c` found at ring position `pos`.
pub fn process_cqe(ctrl: &AgileCtrl, dev: u16, cq: u16, pos: u64, c: Completion) {
    let sim = ctrl.sim();
    sim.emit(TraceEvent::CqeProcessed {
        dev,
        cq,
        pos,
        sq: c.sq,
        cid: c.cid,
    });
    let Some(entry) = ctrl.pending(dev, c.sq).take(c.cid) else {
        ctrl.service().stats.borrow_mut().unknown_cids += 1;
        violation(
            ctrl,
            format!("unknown cid {} on dev {dev} sq {}", c.cid, c.sq),
        );
        return;
    };
    let sq = &ctrl.queue_pair(dev, c.sq).sq;
    if let Err(e) = sq.release_sqe(c.cid) {
        violation(ctrl, e.to_string());
    }
    ctrl.sq_released(dev);
    sim.emit(TraceEvent::SqeRelease {
        dev,
        sq: c.sq,
        sqe: c.cid,
    });
    if let Some(owner) = ctrl.service().holder() {
        if let Err(e) = ctrl
            .locks()
            .release_owned(ctrl.sqe_lock(dev, c.sq, c.cid), owner)
        {
            violation(ctrl, format!("sqe lock: {e}"));
        }
    }
    match entry.target {
        Target::CacheFill { line } => ctrl.cache().complete_fill(line, c.status),
        Target::CacheWriteback { line } => ctrl.cache().complete_writeback(line, c.status),
        Target::Buffer => {}
    }
    if entry.barrier.complete(c.status).is_err() {
        violation(ctrl, format!("barrier for cid {} completed twice", c.cid));
    }
    let latency = sim.now() - entry.issued_at;
    sim.emit(TraceEvent::BarrierDone {
        dev,
        sq: c.sq,
        cid: c.cid,
        latency,
    });
    {
        let mut st = ctrl.service().stats.borrow_mut();
        st.completions += 1;
        st.barrier_latency_total += latency;
    }
    let svc = ctrl.service();
    svc.outstanding.set(svc.outstanding.get() - 1);
    if svc.outstanding.get() == 0 {
        svc.work.notify();
    }
    sim.progress();
}

/// Body of service warp `warp`.
pub(crate) async fn service_warp(ctrl: Rc<AgileCtrl>, warp: usize, num_warps: usize) {
    let cqs = ctrl.all_cqs();
    let orbit = warp_orbit(warp, num_warps, cqs.len());
    let interval = ctrl.config().poll_interval_ns;
    let svc = ctrl.service();
    loop {
        let seen = svc.work.generation();
        if svc.outstanding.get() == 0 {
            if svc.stop.get() {
                if warp == 0 {
                    for &(dev, qp) in &cqs {
                        drain_cq(&ctrl, dev, qp);
                    }
                }
                return;
            }
            // Nothing in flight: park instead of spinning.
            svc.work.changed_since(seen).await;
            continue;
        }
        for &i in &orbit {
            let (dev, qp) = cqs[i];
            cq_polling(&ctrl, dev, qp);
        }
        svc.stats.borrow_mut().passes += 1;
        ctrl.sim().sleep(interval).await;
    }
}
