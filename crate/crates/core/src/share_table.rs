//! Ownership table for user buffers that hold device blocks.
//!
//! The first task to read a block into its own buffer registers that
//! buffer; later readers of the same block get a reference to it instead of
//! a private copy, so at most one user-visible copy of a block exists. The
//! table is open addressed with linear probing over a power-of-two bucket
//! array and uses backward-shift deletion, so lookups never see tombstones.
//!
//! An entry that was modified is written into the software cache by the
//! last task to release it; the entry stays in the table until that
//! propagation has finished, so new readers keep finding the fresh copy.

use std::cell::{Cell, RefCell};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::lock_chain::{AgileLock, LockChain, LockDetector};
use crate::sim::{Sim, TaskId, TraceEvent};
use crate::BlockKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShareState {
    Exclusive,
    Shared,
    Modified,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ShareError {
    #[error("{0} is not registered")]
    NotRegistered(BlockKey),
    #[error("task {task} holds no reference to {key}")]
    DoubleRelease { key: BlockKey, task: TaskId },
    #[error("share table is full ({0} buckets)")]
    Full(usize),
    #[error("bucket count {0} must be a power of two")]
    BadBuckets(usize),
}

#[derive(Debug, Clone)]
pub struct ShareEntry<B> {
    pub key: BlockKey,
    pub buf: B,
    pub owner: TaskId,
    pub state: ShareState,
    pub refcount: u32,
    pub holders: Vec<TaskId>,
    /// Bumped by every modification.
    pub epoch: u64,
    /// The last releaser is writing the buffer into the cache.
    pub propagating: bool,
}

/// Outcome of a release.
#[derive(Debug, Clone, PartialEq)]
pub enum Release<B> {
    /// Other holders remain, or a propagation already in progress will pick
    /// up this task's changes.
    Remaining(u32),
    /// Clean entry dropped.
    Removed,
    /// The caller must write `buf` into the cache, then call
    /// [`ShareTable::finish_propagation`] with `epoch`.
    Propagate { buf: B, epoch: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Finish {
    /// Entry dropped.
    Removed,
    /// New holders arrived; the last of them takes over.
    StillHeld,
    /// Modified again while propagating with nobody left; propagate again.
    Again { epoch: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShareStats {
    pub registers: u64,
    pub joins: u64,
    pub releases: u64,
    pub propagations: u64,
    pub transfers: u64,
    pub max_probe: usize,
    pub max_live: usize,
}

pub struct ShareTable<B> {
    sim: Sim,
    locks: std::rc::Rc<LockDetector>,
    mask: usize,
    slots: RefCell<Vec<Option<ShareEntry<B>>>>,
    bucket_locks: Vec<AgileLock>,
    live: Cell<usize>,
    stats: RefCell<ShareStats>,
}

fn bucket_hash(key: BlockKey) -> u64 {
    let mut h = DefaultHasher::new();
    key.hash(&mut h);
    h.finish()
}

impl<B: Clone> ShareTable<B> {
    pub fn new(sim: Sim, locks: std::rc::Rc<LockDetector>, buckets: usize) -> Result<Self, ShareError> {
        if buckets == 0 || !buckets.is_power_of_two() {
            return Err(ShareError::BadBuckets(buckets));
        }
        let bucket_locks = (0..buckets).map(|i| locks.new_lock(format!("bucket{i}"))).collect();
        Ok(ShareTable {
            sim,
            locks,
            mask: buckets - 1,
            slots: RefCell::new((0..buckets).map(|_| None).collect()),
            bucket_locks,
            live: Cell::new(0),
            stats: RefCell::new(ShareStats::default()),
        })
    }

    pub fn buckets(&self) -> usize {
        self.mask + 1
    }

    pub fn len(&self) -> usize {
        self.live.get()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> ShareStats {
        self.stats.borrow().clone()
    }

    fn home(&self, key: BlockKey) -> usize {
        bucket_hash(key) as usize & self.mask
    }

    /// Slot holding `key`, or the first empty slot of its probe run.
    fn probe(&self, slots: &[Option<ShareEntry<B>>], key: BlockKey) -> (usize, bool) {
        let mut i = self.home(key);
        for n in 0..=self.mask {
            match &slots[i] {
                Some(e) if e.key == key => {
                    self.note_probe(n);
                    return (i, true);
                }
                Some(_) => i = (i + 1) & self.mask,
                None => {
                    self.note_probe(n);
                    return (i, false);
                }
            }
        }
        (usize::MAX, false)
    }

    fn note_probe(&self, n: usize) {
        let mut s = self.stats.borrow_mut();
        s.max_probe = s.max_probe.max(n);
    }

    fn locked<R>(&self, key: BlockKey, chain: &LockChain, f: impl FnOnce() -> R) -> R {
        let lock = &self.bucket_locks[self.home(key)];
        let ok = self.locks.try_acquire(lock, chain).is_ok();
        let r = f();
        if ok {
            let _ = self.locks.release(lock, chain);
        }
        r
    }

    pub fn get(&self, key: BlockKey) -> Option<ShareEntry<B>> {
        let slots = self.slots.borrow();
        match self.probe(&slots, key) {
            (i, true) => slots[i].clone(),
            _ => None,
        }
    }

    /// Join the live buffer for `key`, or register `mine` as that buffer.
    pub fn lookup_or_register(
        &self,
        key: BlockKey,
        mine: &B,
        chain: &LockChain,
    ) -> Result<(B, bool), ShareError> {
        let task = chain.task();
        self.locked(key, chain, || {
            let mut slots = self.slots.borrow_mut();
            match self.probe(&slots, key) {
                (i, true) => {
                    let e = slots[i].as_mut().unwrap();
                    e.refcount += 1;
                    e.holders.push(task);
                    if e.state == ShareState::Exclusive && e.refcount > 1 {
                        e.state = ShareState::Shared;
                    }
                    self.stats.borrow_mut().joins += 1;
                    self.sim.emit(TraceEvent::ShareJoin {
                        dev: key.dev,
                        blk: key.blk,
                        refcount: e.refcount,
                    });
                    Ok((e.buf.clone(), false))
                }
                (usize::MAX, _) => Err(ShareError::Full(self.buckets())),
                (i, false) => {
                    slots[i] = Some(ShareEntry {
                        key,
                        buf: mine.clone(),
                        owner: task,
                        state: ShareState::Exclusive,
                        refcount: 1,
                        holders: vec![task],
                        epoch: 0,
                        propagating: false,
                    });
                    self.live.set(self.live.get() + 1);
                    let mut s = self.stats.borrow_mut();
                    s.registers += 1;
                    s.max_live = s.max_live.max(self.live.get());
                    self.sim.emit(TraceEvent::ShareRegister {
                        dev: key.dev,
                        blk: key.blk,
                        owner: task,
                    });
                    Ok((mine.clone(), true))
                }
            }
        })
    }

    pub fn mark_buffer_modified(&self, key: BlockKey, chain: &LockChain) -> Result<(), ShareError> {
        self.locked(key, chain, || {
            let mut slots = self.slots.borrow_mut();
            let (i, found) = self.probe(&slots, key);
            if !found {
                return Err(ShareError::NotRegistered(key));
            }
            let e = slots[i].as_mut().unwrap();
            e.state = ShareState::Modified;
            e.epoch += 1;
            self.sim.emit(TraceEvent::ShareModified {
                dev: key.dev,
                blk: key.blk,
            });
            Ok(())
        })
    }

    pub fn release(&self, key: BlockKey, chain: &LockChain) -> Result<Release<B>, ShareError> {
        let task = chain.task();
        self.locked(key, chain, || {
            let mut slots = self.slots.borrow_mut();
            let (i, found) = self.probe(&slots, key);
            if !found {
                return Err(ShareError::NotRegistered(key));
            }
            let e = slots[i].as_mut().unwrap();
            let Some(h) = e.holders.iter().position(|&t| t == task) else {
                return Err(ShareError::DoubleRelease { key, task });
            };
            e.holders.remove(h);
            e.refcount -= 1;
            self.stats.borrow_mut().releases += 1;
            self.sim.emit(TraceEvent::ShareRelease {
                dev: key.dev,
                blk: key.blk,
                refcount: e.refcount,
            });
            if e.refcount > 0 || e.propagating {
                return Ok(Release::Remaining(e.refcount));
            }
            if e.state != ShareState::Modified {
                self.remove_at(&mut slots, i);
                return Ok(Release::Removed);
            }
            if e.owner != task {
                self.stats.borrow_mut().transfers += 1;
                self.sim.emit(TraceEvent::ShareTransfer {
                    dev: key.dev,
                    blk: key.blk,
                    from: e.owner,
                    to: task,
                });
            }
            e.propagating = true;
            self.stats.borrow_mut().propagations += 1;
            self.sim.emit(TraceEvent::SharePropagate {
                dev: key.dev,
                blk: key.blk,
            });
            Ok(Release::Propagate {
                buf: e.buf.clone(),
                epoch: e.epoch,
            })
        })
    }

    /// The propagating task copied the buffer (as of `epoch`) into the cache.
    pub fn finish_propagation(&self, key: BlockKey, epoch: u64, chain: &LockChain) -> Result<Finish, ShareError> {
        self.locked(key, chain, || {
            let mut slots = self.slots.borrow_mut();
            let (i, found) = self.probe(&slots, key);
            if !found {
                return Err(ShareError::NotRegistered(key));
            }
            let e = slots[i].as_mut().unwrap();
            let clean = e.epoch == epoch;
            if e.refcount == 0 {
                if clean {
                    self.remove_at(&mut slots, i);
                    return Ok(Finish::Removed);
                }
                return Ok(Finish::Again { epoch: e.epoch });
            }
            e.propagating = false;
            if clean {
                e.state = if e.refcount > 1 {
                    ShareState::Shared
                } else {
                    ShareState::Exclusive
                };
            }
            Ok(Finish::StillHeld)
        })
    }

    /// Backward-shift deletion: pull later members of the probe run into
    /// the hole so every key stays reachable from its home bucket.
    fn remove_at(&self, slots: &mut [Option<ShareEntry<B>>], mut hole: usize) {
        slots[hole] = None;
        self.live.set(self.live.get() - 1);
        let mut j = hole;
        loop {
            j = (j + 1) & self.mask;
            let Some(e) = &slots[j] else {
                return;
            };
            let home = self.home(e.key);
            // Move e back if its home does not lie cyclically in (hole, j].
            let dist_home = j.wrapping_sub(home) & self.mask;
            let dist_hole = j.wrapping_sub(hole) & self.mask;
            if dist_home >= dist_hole {
                slots[hole] = slots[j].take();
                hole = j;
            }
        }
    }

    /// Every live key, for audits.
    pub fn keys(&self) -> Vec<BlockKey> {
        self.slots.borrow().iter().flatten().map(|e| e.key).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;
    use proptest::prelude::*;
    use std::collections::HashMap;
    use std::rc::Rc;

    fn table(buckets: usize) -> ShareTable<u32> {
        let sim = Sim::new(SimConfig::default());
        let locks = Rc::new(LockDetector::new(sim.clone(), true));
        ShareTable::new(sim, locks, buckets).unwrap()
    }

    fn chain(t: u32) -> LockChain {
        LockChain::new(TaskId(t))
    }

    #[test]
    fn first_registers_second_joins() {
        let t = table(8);
        let k = BlockKey::new(0, 4);
        assert_eq!(t.lookup_or_register(k, &1, &chain(1)).unwrap(), (1, true));
        assert_eq!(t.get(k).unwrap().state, ShareState::Exclusive);
        assert_eq!(t.lookup_or_register(k, &2, &chain(2)).unwrap(), (1, false));
        let e = t.get(k).unwrap();
        assert_eq!((e.refcount, e.state), (2, ShareState::Shared));
        t.lookup_or_register(BlockKey::new(0, 5), &3, &chain(3)).unwrap();
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn release_rules() {
        let t = table(8);
        let k = BlockKey::new(1, 1);
        assert_eq!(t.release(k, &chain(1)), Err(ShareError::NotRegistered(k)));
        t.lookup_or_register(k, &1, &chain(1)).unwrap();
        t.lookup_or_register(k, &1, &chain(2)).unwrap();
        assert_eq!(t.release(k, &chain(1)), Ok(Release::Remaining(1)));
        assert!(matches!(t.release(k, &chain(1)), Err(ShareError::DoubleRelease { .. })));
        assert_eq!(t.release(k, &chain(2)), Ok(Release::Removed));
        assert!(t.is_empty());
    }

    #[test]
    fn modified_entry_is_propagated_by_last_releaser() {
        let t = table(8);
        let k = BlockKey::new(0, 9);
        t.lookup_or_register(k, &7, &chain(1)).unwrap();
        t.lookup_or_register(k, &8, &chain(2)).unwrap();
        assert_eq!(
            t.mark_buffer_modified(BlockKey::new(0, 10), &chain(1)),
            Err(ShareError::NotRegistered(BlockKey::new(0, 10)))
        );
        t.mark_buffer_modified(k, &chain(2)).unwrap();
        t.mark_buffer_modified(k, &chain(2)).unwrap();
        assert_eq!(t.release(k, &chain(1)), Ok(Release::Remaining(1)));
        let Release::Propagate { buf, epoch } = t.release(k, &chain(2)).unwrap() else {
            panic!()
        };
        assert_eq!(buf, 7);
        assert_eq!(t.stats().transfers, 1, "owner left first");
        // Still visible while propagating.
        assert!(t.get(k).is_some());
        assert_eq!(t.finish_propagation(k, epoch, &chain(2)), Ok(Finish::Removed));
        assert!(t.is_empty());
    }

    #[test]
    fn modification_during_propagation_repeats_it() {
        let t = table(4);
        let k = BlockKey::new(0, 1);
        t.lookup_or_register(k, &1, &chain(1)).unwrap();
        t.mark_buffer_modified(k, &chain(1)).unwrap();
        let Release::Propagate { epoch, .. } = t.release(k, &chain(1)).unwrap() else {
            panic!()
        };
        t.lookup_or_register(k, &2, &chain(2)).unwrap();
        t.mark_buffer_modified(k, &chain(2)).unwrap();
        assert_eq!(t.release(k, &chain(2)), Ok(Release::Remaining(0)));
        assert_eq!(t.finish_propagation(k, epoch, &chain(1)), Ok(Finish::Again { epoch: epoch + 1 }));
        assert_eq!(t.finish_propagation(k, epoch + 1, &chain(1)), Ok(Finish::Removed));
    }

    #[test]
    fn full_table_is_reported() {
        let t = table(2);
        t.lookup_or_register(BlockKey::new(0, 1), &1, &chain(1)).unwrap();
        t.lookup_or_register(BlockKey::new(0, 2), &1, &chain(1)).unwrap();
        assert_eq!(
            t.lookup_or_register(BlockKey::new(0, 3), &1, &chain(1)),
            Err(ShareError::Full(2))
        );
    }

    proptest! {
        // Against a HashMap model: random register/release sequences keep
        // every live key reachable and refcounts conserved.
        #[test]
        fn matches_map_model(ops in proptest::collection::vec((0u64..24, 0u32..4, any::<bool>()), 1..300)) {
            let t = table(32);
            let mut model: HashMap<u64, Vec<u32>> = HashMap::new();
            for (blk, task, reg) in ops {
                let k = BlockKey::new(0, blk);
                let holders = model.entry(blk).or_default();
                if reg && !holders.contains(&task) {
                    let (_, registered) = t.lookup_or_register(k, &task, &chain(task)).unwrap();
                    prop_assert_eq!(registered, holders.is_empty());
                    holders.push(task);
                } else if !reg {
                    let r = t.release(k, &chain(task));
                    if let Some(p) = holders.iter().position(|&h| h == task) {
                        holders.remove(p);
                        prop_assert!(r.is_ok());
                    } else {
                        prop_assert!(r.is_err());
                    }
                }
                model.retain(|_, h| !h.is_empty());
                prop_assert_eq!(t.len(), model.len());
                for (&b, h) in &model {
                    let e = t.get(BlockKey::new(0, b)).unwrap();
                    prop_assert_eq!(e.refcount as usize, h.len());
                }
            }
        }
    }
}
