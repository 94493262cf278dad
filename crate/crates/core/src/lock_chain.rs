//! Per-task lock chains and wait-for cycle detection.
//!
//! Each task records the locks it holds in acquisition order. With debug
//! mode on, a failed acquisition marks every held lock as dependent on the
//! target and then walks the dependency edges out of the target; reaching
//! a lock the task already holds closes a cycle. A cycle is revalidated
//! against the live holder/waiting state before it is reported, and each
//! distinct cycle is reported once.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::sim::{Sim, TaskId, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LockId(pub u64);

impl fmt::Display for LockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

const FREE: u64 = 0;

/// A lock word. `holder` is 0 when free, otherwise task id + 1.
pub struct AgileLock {
    id: LockId,
    label: String,
    holder: AtomicU64,
}

impl fmt::Debug for AgileLock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.id, self.label)?;
        if let Some(t) = self.holder() {
            write!(f, " held by {t}")?;
        }
        Ok(())
    }
}

impl AgileLock {
    pub fn id(&self) -> LockId {
        self.id
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn holder(&self) -> Option<TaskId> {
        match self.holder.load(Ordering::Acquire) {
            FREE => None,
            h => Some(TaskId((h - 1) as u32)),
        }
    }

    fn try_take(&self, task: TaskId) -> bool {
        self.holder
            .compare_exchange(FREE, task.0 as u64 + 1, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }
}

/// Locks held by one task, in acquisition order.
#[derive(Clone)]
pub struct LockChain {
    task: TaskId,
    held: Rc<RefCell<Vec<LockId>>>,
}

impl fmt::Debug for LockChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LockChain")
            .field("task", &self.task)
            .field("held", &self.held.borrow())
            .finish()
    }
}

impl LockChain {
    pub fn new(task: TaskId) -> Self {
        LockChain {
            task,
            held: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn held(&self) -> Vec<LockId> {
        self.held.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.held.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn holds(&self, id: LockId) -> bool {
        self.held.borrow().contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleReport {
    pub task: TaskId,
    /// Closed path: first and last element are the same lock.
    pub cycle: Vec<LockId>,
}

impl fmt::Display for CycleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DEADLOCK: task {} cycle ", self.task)?;
        for (i, l) in self.cycle.iter().enumerate() {
            if i > 0 {
                f.write_str(" -> ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LockError {
    #[error("lock {0} is held by another task")]
    Contended(LockId),
    #[error("{0}")]
    WouldDeadlock(CycleReport),
    #[error("lock {0} is not held by this task")]
    NotHeld(LockId),
}

#[derive(Default)]
struct DetectorState {
    /// held lock -> locks its holder failed to acquire while holding it
    dependents: HashMap<LockId, BTreeSet<LockId>>,
    holders: HashMap<LockId, TaskId>,
    waiting: HashMap<TaskId, LockId>,
    reported: HashSet<Vec<LockId>>,
    reports: Vec<CycleReport>,
    labels: HashMap<LockId, String>,
}

/// Owner of all lock words of one controller plus the dependency graph.
pub struct LockDetector {
    sim: Sim,
    debug: bool,
    next_id: Cell<u64>,
    st: RefCell<DetectorState>,
    acquisitions: Cell<u64>,
}

impl LockDetector {
    pub fn new(sim: Sim, debug: bool) -> Self {
        LockDetector {
            sim,
            debug,
            next_id: Cell::new(1),
            st: RefCell::new(DetectorState::default()),
            acquisitions: Cell::new(0),
        }
    }

    pub fn debug(&self) -> bool {
        self.debug
    }

    pub fn new_lock(&self, label: impl Into<String>) -> AgileLock {
        let id = self.next_id.get();
        self.next_id.set(id + 1);
        let label = label.into();
        self.st.borrow_mut().labels.insert(LockId(id), label.clone());
        AgileLock {
            id: LockId(id),
            label,
            holder: AtomicU64::new(FREE),
        }
    }

    pub fn acquisitions(&self) -> u64 {
        self.acquisitions.get()
    }

    pub fn try_acquire(&self, lock: &AgileLock, chain: &LockChain) -> Result<(), LockError> {
        if lock.try_take(chain.task) {
            chain.held.borrow_mut().push(lock.id);
            self.acquisitions.set(self.acquisitions.get() + 1);
            if self.debug {
                let mut st = self.st.borrow_mut();
                st.holders.insert(lock.id, chain.task);
                st.waiting.remove(&chain.task);
            }
            return Ok(());
        }
        if !self.debug {
            return Err(LockError::Contended(lock.id));
        }
        match self.note_failed(lock.id, chain) {
            Some(report) => Err(LockError::WouldDeadlock(report)),
            None => Err(LockError::Contended(lock.id)),
        }
    }

    /// Record that `chain`'s task failed to acquire `target` and look for a
    /// cycle through it.
    fn note_failed(&self, target: LockId, chain: &LockChain) -> Option<CycleReport> {
        let held = chain.held.borrow();
        let mut st = self.st.borrow_mut();
        st.waiting.insert(chain.task, target);
        for &h in held.iter() {
            st.dependents.entry(h).or_default().insert(target);
        }
        let cycle = find_cycle(&st.dependents, target, &held)?;
        if !revalidate(&st, &cycle) {
            return None;
        }
        let report = CycleReport {
            task: chain.task,
            cycle,
        };
        if st.reported.insert(normalize(&report.cycle)) {
            st.reports.push(report.clone());
            drop(st);
            self.sim.emit(TraceEvent::Deadlock {
                task: report.task,
                cycle: report.cycle.iter().map(|l| l.0).collect(),
            });
        }
        Some(report)
    }

    /// The task gave up waiting (or got what it wanted by another route).
    pub fn clear_wait(&self, task: TaskId) {
        if self.debug {
            self.st.borrow_mut().waiting.remove(&task);
        }
    }

    pub fn release(&self, lock: &AgileLock, chain: &LockChain) -> Result<(), LockError> {
        let mut held = chain.held.borrow_mut();
        let Some(i) = held.iter().position(|&l| l == lock.id) else {
            return Err(LockError::NotHeld(lock.id));
        };
        held.remove(i);
        drop(held);
        self.free(lock, chain.task)
    }

    /// Move a held lock from `chain` to `to`; the new holder releases it
    /// with [`LockDetector::release_owned`].
    pub fn handoff(&self, lock: &AgileLock, chain: &LockChain, to: TaskId) -> Result<(), LockError> {
        let mut held = chain.held.borrow_mut();
        let Some(i) = held.iter().position(|&l| l == lock.id) else {
            return Err(LockError::NotHeld(lock.id));
        };
        held.remove(i);
        lock.holder.store(to.0 as u64 + 1, Ordering::Release);
        if self.debug {
            let mut st = self.st.borrow_mut();
            st.holders.insert(lock.id, to);
            st.dependents.remove(&lock.id);
        }
        Ok(())
    }

    pub fn release_owned(&self, lock: &AgileLock, owner: TaskId) -> Result<(), LockError> {
        self.free(lock, owner)
    }

    fn free(&self, lock: &AgileLock, owner: TaskId) -> Result<(), LockError> {
        if lock
            .holder
            .compare_exchange(owner.0 as u64 + 1, FREE, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(LockError::NotHeld(lock.id));
        }
        if self.debug {
            let mut st = self.st.borrow_mut();
            st.holders.remove(&lock.id);
            // Edges out of a free lock are stale.
            st.dependents.remove(&lock.id);
        }
        Ok(())
    }

    pub fn reports(&self) -> Vec<CycleReport> {
        self.st.borrow().reports.clone()
    }

    /// `report` with lock labels in place of ids.
    pub fn describe(&self, report: &CycleReport) -> String {
        let st = self.st.borrow();
        let path: Vec<&str> = report
            .cycle
            .iter()
            .map(|l| st.labels.get(l).map_or("?", String::as_str))
            .collect();
        format!("task {} waits in cycle {}", report.task, path.join(" -> "))
    }

    pub fn report_count(&self) -> usize {
        self.st.borrow().reports.len()
    }
}

/// Depth-first walk along dependency edges starting at `target`; the first
/// held lock reached closes the cycle `target -> ... -> held -> target`.
fn find_cycle(
    deps: &HashMap<LockId, BTreeSet<LockId>>,
    target: LockId,
    held: &[LockId],
) -> Option<Vec<LockId>> {
    if held.contains(&target) {
        return Some(vec![target, target]);
    }
    let mut seen = HashSet::new();
    let mut path = vec![target];
    fn dfs(
        deps: &HashMap<LockId, BTreeSet<LockId>>,
        node: LockId,
        held: &[LockId],
        seen: &mut HashSet<LockId>,
        path: &mut Vec<LockId>,
    ) -> bool {
        if !seen.insert(node) {
            return false;
        }
        if let Some(next) = deps.get(&node) {
            for &n in next {
                path.push(n);
                if held.contains(&n) || dfs(deps, n, held, seen, path) {
                    return true;
                }
                path.pop();
            }
        }
        false
    }
    if dfs(deps, target, held, &mut seen, &mut path) {
        path.push(target);
        Some(path)
    } else {
        None
    }
}

/// Every edge a -> b must still mean "the holder of a is waiting for b".
fn revalidate(st: &DetectorState, cycle: &[LockId]) -> bool {
    cycle.windows(2).all(|w| {
        st.holders
            .get(&w[0])
            .and_then(|t| st.waiting.get(t))
            .is_some_and(|&waited| waited == w[1])
    })
}

fn normalize(cycle: &[LockId]) -> Vec<LockId> {
    let body = &cycle[..cycle.len() - 1];
    let start = (0..body.len()).min_by_key(|&i| body[i]).unwrap_or(0);
    body[start..].iter().chain(&body[..start]).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;
    use proptest::prelude::*;

    fn detector() -> LockDetector {
        LockDetector::new(Sim::new(SimConfig::default()), true)
    }

    #[test]
    fn free_lock_is_acquired() {
        let d = detector();
        let l = d.new_lock("a");
        let c = LockChain::new(TaskId(0));
        d.try_acquire(&l, &c).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(l.holder(), Some(TaskId(0)));
    }

    #[test]
    fn two_task_cycle_is_reported() {
        let d = detector();
        let (l1, l2) = (d.new_lock("1"), d.new_lock("2"));
        let (a, b) = (LockChain::new(TaskId(1)), LockChain::new(TaskId(2)));
        d.try_acquire(&l1, &a).unwrap();
        d.try_acquire(&l2, &b).unwrap();
        assert_eq!(d.try_acquire(&l2, &a), Err(LockError::Contended(l2.id())));
        let err = d.try_acquire(&l1, &b).unwrap_err();
        let LockError::WouldDeadlock(r) = err else {
            panic!("expected a cycle, got {err:?}")
        };
        assert_eq!(r.cycle, vec![l1.id(), l2.id(), l1.id()]);
        assert_eq!(r.to_string(), "DEADLOCK: task 2 cycle L1 -> L2 -> L1");
        assert_eq!(d.report_count(), 1);
        // Spinning on the same cycle does not duplicate the report.
        let _ = d.try_acquire(&l1, &b);
        assert_eq!(d.report_count(), 1);
    }

    #[test]
    fn self_reacquire_is_a_one_cycle() {
        let d = detector();
        let l = d.new_lock("x");
        let c = LockChain::new(TaskId(3));
        d.try_acquire(&l, &c).unwrap();
        let LockError::WouldDeadlock(r) = d.try_acquire(&l, &c).unwrap_err() else {
            panic!()
        };
        assert_eq!(r.cycle, vec![l.id(), l.id()]);
    }

    #[test]
    fn release_rules() {
        let d = detector();
        let (l1, l2) = (d.new_lock("1"), d.new_lock("2"));
        let c = LockChain::new(TaskId(0));
        assert_eq!(d.release(&l1, &c), Err(LockError::NotHeld(l1.id())));
        d.try_acquire(&l1, &c).unwrap();
        d.try_acquire(&l2, &c).unwrap();
        // Out of acquisition order is fine.
        d.release(&l1, &c).unwrap();
        d.release(&l2, &c).unwrap();
        assert!(c.is_empty());
        assert_eq!(l1.holder(), None);
    }

    #[test]
    fn stale_edge_does_not_produce_report() {
        let d = detector();
        let (l1, l2) = (d.new_lock("1"), d.new_lock("2"));
        let (a, b) = (LockChain::new(TaskId(1)), LockChain::new(TaskId(2)));
        d.try_acquire(&l1, &a).unwrap();
        d.try_acquire(&l2, &b).unwrap();
        let _ = d.try_acquire(&l2, &a); // edge l1 -> l2
        d.clear_wait(a.task()); // a gave up waiting but still holds l1
        assert!(matches!(d.try_acquire(&l1, &b), Err(LockError::Contended(_))));
        assert_eq!(d.report_count(), 0);
    }

    #[test]
    fn handoff_moves_ownership() {
        let d = detector();
        let l = d.new_lock("sqe");
        let c = LockChain::new(TaskId(4));
        d.try_acquire(&l, &c).unwrap();
        d.handoff(&l, &c, TaskId(9)).unwrap();
        assert!(c.is_empty());
        assert_eq!(l.holder(), Some(TaskId(9)));
        d.release_owned(&l, TaskId(9)).unwrap();
        assert_eq!(l.holder(), None);
    }

    #[test]
    fn release_mode_degrades_to_plain_lock() {
        let d = LockDetector::new(Sim::new(SimConfig::default()), false);
        let l = d.new_lock("x");
        let c = LockChain::new(TaskId(0));
        d.try_acquire(&l, &c).unwrap();
        assert_eq!(d.try_acquire(&l, &c), Err(LockError::Contended(l.id())));
    }

    proptest! {
        // A ring of n tasks, each holding lock i and then waiting for lock
        // i+1, is always detected by the last task to block.
        #[test]
        fn planted_ring_is_always_detected(n in 1usize..9, order in proptest::collection::vec(any::<u32>(), 9)) {
            let d = detector();
            let locks: Vec<_> = (0..n).map(|i| d.new_lock(format!("r{i}"))).collect();
            let chains: Vec<_> = (0..n).map(|i| LockChain::new(TaskId(i as u32))).collect();
            for i in 0..n {
                d.try_acquire(&locks[i], &chains[i]).unwrap();
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| order[i]);
            let mut found = None;
            for &i in &idx {
                if let Err(LockError::WouldDeadlock(r)) = d.try_acquire(&locks[(i + 1) % n], &chains[i]) {
                    found = Some(r);
                }
            }
            let r = found.expect("cycle missed");
            prop_assert_eq!(r.cycle.len(), n + 1);
            prop_assert_eq!(d.report_count(), 1);
        }

        // Acyclic waits (a chain) never report.
        #[test]
        fn chain_without_cycle_never_reports(n in 2usize..9) {
            let d = detector();
            let locks: Vec<_> = (0..n).map(|i| d.new_lock(format!("c{i}"))).collect();
            let chains: Vec<_> = (0..n).map(|i| LockChain::new(TaskId(i as u32))).collect();
            for i in 0..n {
                d.try_acquire(&locks[i], &chains[i]).unwrap();
            }
            for i in 0..n - 1 {
                prop_assert!(matches!(d.try_acquire(&locks[i + 1], &chains[i]), Err(LockError::Contended(_))));
            }
            prop_assert_eq!(d.report_count(), 0);
        }
    }
}
