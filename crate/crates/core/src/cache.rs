//! Block-granular software cache.
//!
//! Lines move through INVALID, BUSY, READY and MODIFIED. The cache itself is
//! a synchronous state machine: [`SoftwareCache::lookup`] decides what the
//! caller must do next (use a hit, join a fill, start a fill, start a
//! write-back, wait) and performs the corresponding state change; the
//! controller issues the device command and the service calls back into
//! [`SoftwareCache::complete_fill`] / [`SoftwareCache::complete_writeback`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::lock_chain::{AgileLock, LockChain, LockDetector};
use crate::nvme::DmaBuf;
use crate::service::Barrier;
use crate::sim::{Notify, Sim, TraceEvent};
use crate::BlockKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LineState {
    Invalid,
    Busy,
    Ready,
    Modified,
}

impl LineState {
    pub fn name(self) -> &'static str {
        match self {
            LineState::Invalid => "INVALID",
            LineState::Busy => "BUSY",
            LineState::Ready => "READY",
            LineState::Modified => "MODIFIED",
        }
    }

    pub fn from_name(s: &str) -> Option<LineState> {
        Some(match s {
            "INVALID" => LineState::Invalid,
            "BUSY" => LineState::Busy,
            "READY" => LineState::Ready,
            "MODIFIED" => LineState::Modified,
            _ => return None,
        })
    }
}

/// The only transitions a line may take.
pub const LEGAL_TRANSITIONS: [(LineState, LineState); 6] = [
    (LineState::Invalid, LineState::Busy),
    (LineState::Busy, LineState::Ready),
    (LineState::Ready, LineState::Modified),
    (LineState::Modified, LineState::Busy),
    (LineState::Busy, LineState::Invalid),
    (LineState::Ready, LineState::Invalid),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusyReason {
    Fill,
    /// WRITE in flight. `evicting` lines are released when it completes
    /// unless readers queued up meanwhile.
    Writeback { evicting: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BusyEviction {
    #[default]
    Wait,
    FindAnother,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineView {
    pub state: LineState,
    pub tag: Option<BlockKey>,
}

/// Replacement policy plug-in.
pub trait CachePolicy {
    fn name(&self) -> &'static str;
    /// Candidate line for a key that is not resident. `None` when every line
    /// is BUSY.
    fn map(&mut self, key: BlockKey, lines: &[LineView]) -> Option<usize>;
    /// Another candidate after `busy` turned out BUSY (find_another mode).
    fn remap(&mut self, key: BlockKey, lines: &[LineView], busy: usize) -> Option<usize> {
        let _ = busy;
        self.map(key, lines)
    }
    fn on_hit(&mut self, _line: usize) {}
    fn on_fill(&mut self, _line: usize) {}
    fn busy_eviction(&self) -> BusyEviction {
        BusyEviction::Wait
    }
}

/// Second-chance clock over all lines (fully associative).
pub struct ClockPolicy {
    hand: usize,
    referenced: Vec<bool>,
    busy_eviction: BusyEviction,
}

impl ClockPolicy {
    pub fn new(lines: usize) -> Self {
        ClockPolicy {
            hand: 0,
            referenced: vec![false; lines],
            busy_eviction: BusyEviction::Wait,
        }
    }

    pub fn with_busy_eviction(mut self, b: BusyEviction) -> Self {
        self.busy_eviction = b;
        self
    }

    pub fn hand(&self) -> usize {
        self.hand
    }
}

impl CachePolicy for ClockPolicy {
    fn name(&self) -> &'static str {
        "clock"
    }

    fn map(&mut self, _key: BlockKey, lines: &[LineView]) -> Option<usize> {
        let n = lines.len();
        // Two sweeps: the first may only clear reference bits.
        for _ in 0..2 * n {
            let i = self.hand;
            self.hand = (self.hand + 1) % n;
            match lines[i].state {
                LineState::Invalid => return Some(i),
                LineState::Busy => continue,
                _ if self.referenced[i] => self.referenced[i] = false,
                _ => return Some(i),
            }
        }
        None
    }

    fn on_hit(&mut self, line: usize) {
        self.referenced[line] = true;
    }

    fn on_fill(&mut self, line: usize) {
        self.referenced[line] = true;
    }

    fn busy_eviction(&self) -> BusyEviction {
        self.busy_eviction
    }
}

/// `blk mod lines`; `find_another` probes the next line.
pub struct DirectMappedPolicy {
    busy_eviction: BusyEviction,
}

impl DirectMappedPolicy {
    pub fn new(busy_eviction: BusyEviction) -> Self {
        DirectMappedPolicy { busy_eviction }
    }
}

impl CachePolicy for DirectMappedPolicy {
    fn name(&self) -> &'static str {
        "direct"
    }

    fn map(&mut self, key: BlockKey, lines: &[LineView]) -> Option<usize> {
        Some(((key.blk + key.dev as u64) % lines.len() as u64) as usize)
    }

    fn remap(&mut self, _key: BlockKey, lines: &[LineView], busy: usize) -> Option<usize> {
        Some((busy + 1) % lines.len())
    }

    fn busy_eviction(&self) -> BusyEviction {
        self.busy_eviction
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolicyKind {
    #[default]
    Clock,
    DirectMapped,
}

pub fn make_policy(kind: PolicyKind, lines: usize, b: BusyEviction) -> Box<dyn CachePolicy> {
    match kind {
        PolicyKind::Clock => Box::new(ClockPolicy::new(lines).with_busy_eviction(b)),
        PolicyKind::DirectMapped => Box::new(DirectMappedPolicy::new(b)),
    }
}

/// A reader parked on a BUSY line.
#[derive(Debug, Clone)]
pub struct Waiter {
    pub buf: DmaBuf,
    pub barrier: Barrier,
}

struct CacheLine {
    state: LineState,
    tag: Option<BlockKey>,
    data: DmaBuf,
    busy: Option<BusyReason>,
    waiters: Vec<Waiter>,
}

/// What the caller of [`SoftwareCache::lookup`] has to do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// (a) resident and valid.
    Hit(usize),
    /// (c) resident, fill or write-back in flight.
    Filling(usize),
    /// (b)/(d) line claimed for the key; issue the READ.
    FillStarted(usize),
    /// Line claimed and loaded with the caller's bytes; issue the WRITE.
    StoreStarted(usize),
    /// (d) victim was MODIFIED; issue the WRITE of `old`, then retry.
    WritebackStarted { line: usize, old: BlockKey },
    /// (d) victim is BUSY; wait for a line change and retry.
    Deferred(usize),
    /// Every line is BUSY.
    Exhausted,
}

#[derive(Debug, Clone, Copy)]
pub enum Intent<'a> {
    Read,
    /// Replace the whole block; on a hit the line becomes MODIFIED and a
    /// WRITE is started.
    Store(&'a [u8]),
    /// Replace the whole block; on a hit the line is only marked MODIFIED.
    StoreLazy(&'a [u8]),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CacheError {
    #[error("line {line} is {state:?}, expected READY or MODIFIED")]
    IllegalState { line: usize, state: LineState },
    #[error("line {line} does not hold {key}")]
    TagMismatch { line: usize, key: BlockKey },
    #[error("cache needs at least one line")]
    Empty,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub accesses: u64,
    pub hits: u64,
    pub joins: u64,
    pub fills: u64,
    pub stores: u64,
    pub resets: u64,
    pub eviction_writebacks: u64,
    pub flush_writebacks: u64,
    pub deferred: u64,
    pub exhausted: u64,
    pub max_fills_in_flight_per_key: u32,
    pub illegal_transitions: u64,
    pub lock_violations: u64,
}

pub struct SoftwareCache {
    sim: Sim,
    locks: Rc<LockDetector>,
    block_size: usize,
    lines: RefCell<Vec<CacheLine>>,
    tags: RefCell<HashMap<BlockKey, usize>>,
    policy: RefCell<Box<dyn CachePolicy>>,
    line_locks: Vec<AgileLock>,
    changed: Notify,
    fills_in_flight: RefCell<HashMap<BlockKey, u32>>,
    transitions: RefCell<HashMap<(LineState, LineState), u64>>,
    stats: RefCell<CacheStats>,
}

impl SoftwareCache {
    pub fn new(
        sim: Sim,
        locks: Rc<LockDetector>,
        lines: usize,
        block_size: usize,
        policy: Box<dyn CachePolicy>,
    ) -> Result<Self, CacheError> {
        if lines == 0 {
            return Err(CacheError::Empty);
        }
        let line_locks = (0..lines).map(|i| locks.new_lock(format!("line{i}"))).collect();
        Ok(SoftwareCache {
            sim,
            locks,
            block_size,
            lines: RefCell::new(
                (0..lines)
                    .map(|_| CacheLine {
                        state: LineState::Invalid,
                        tag: None,
                        data: DmaBuf::zeroed(block_size),
                        busy: None,
                        waiters: Vec::new(),
                    })
                    .collect(),
            ),
            tags: RefCell::new(HashMap::new()),
            policy: RefCell::new(policy),
            line_locks,
            changed: Notify::new(),
            fills_in_flight: RefCell::new(HashMap::new()),
            transitions: RefCell::new(HashMap::new()),
            stats: RefCell::new(CacheStats::default()),
        })
    }

    pub fn num_lines(&self) -> usize {
        self.line_locks.len()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn policy_name(&self) -> &'static str {
        self.policy.borrow().name()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats.borrow().clone()
    }

    /// Observed state transitions and their counts.
    pub fn transitions(&self) -> HashMap<(LineState, LineState), u64> {
        self.transitions.borrow().clone()
    }

    pub fn state(&self, line: usize) -> LineState {
        self.lines.borrow()[line].state
    }

    pub fn tag(&self, line: usize) -> Option<BlockKey> {
        self.lines.borrow()[line].tag
    }

    pub fn waiter_count(&self, line: usize) -> usize {
        self.lines.borrow()[line].waiters.len()
    }

    pub fn busy_reason(&self, line: usize) -> Option<BusyReason> {
        self.lines.borrow()[line].busy
    }

    pub fn line_of(&self, key: BlockKey) -> Option<usize> {
        self.tags.borrow().get(&key).copied()
    }

    /// DMA target of a line.
    pub fn line_buf(&self, line: usize) -> DmaBuf {
        self.lines.borrow()[line].data.clone()
    }

    pub fn line_lock(&self, line: usize) -> &AgileLock {
        &self.line_locks[line]
    }

    /// Generation of the change notifier; pair with [`Self::changed_since`].
    pub fn generation(&self) -> u64 {
        self.changed.generation()
    }

    pub async fn changed_since(&self, gen: u64) {
        self.changed.changed_since(gen).await
    }

    fn views(lines: &[CacheLine]) -> Vec<LineView> {
        lines
            .iter()
            .map(|l| LineView {
                state: l.state,
                tag: l.tag,
            })
            .collect()
    }

    fn set_state(&self, lines: &mut [CacheLine], i: usize, to: LineState) {
        let from = lines[i].state;
        if from == to {
            return;
        }
        if !LEGAL_TRANSITIONS.contains(&(from, to)) {
            self.stats.borrow_mut().illegal_transitions += 1;
            self.sim.emit(TraceEvent::Violation {
                module: "cache",
                what: format!("line {i} {}->{}", from.name(), to.name()),
            });
        }
        lines[i].state = to;
        *self.transitions.borrow_mut().entry((from, to)).or_default() += 1;
        let key = lines[i].tag.unwrap_or(BlockKey::new(0, 0));
        self.sim.emit(TraceEvent::LineState {
            line: i,
            from: from.name(),
            to: to.name(),
            dev: key.dev,
            blk: key.blk,
        });
    }

    /// Run `f` under the line lock of `line`. A caller must never hold two
    /// line locks; a second one is counted as a violation.
    fn with_line_lock<R>(&self, line: usize, chain: &LockChain, f: impl FnOnce() -> R) -> R {
        let lock = &self.line_locks[line];
        let nested = chain
            .held()
            .iter()
            .any(|l| self.line_locks.iter().any(|x| x.id() == *l));
        if nested {
            self.stats.borrow_mut().lock_violations += 1;
        }
        let acquired = self.locks.try_acquire(lock, chain).is_ok();
        if !acquired {
            self.stats.borrow_mut().lock_violations += 1;
        }
        let r = f();
        if acquired {
            let _ = self.locks.release(lock, chain);
        }
        r
    }

    fn outcome(&self, key: BlockKey, line: usize, outcome: &'static str) {
        self.sim.emit(TraceEvent::CacheAccess {
            dev: key.dev,
            blk: key.blk,
            line,
            outcome,
        });
    }

    /// One step of the access state machine for `key`.
    pub fn lookup(&self, key: BlockKey, intent: Intent<'_>, chain: &LockChain) -> Step {
        self.stats.borrow_mut().accesses += 1;
        let resident = self.tags.borrow().get(&key).copied();
        if let Some(i) = resident {
            return self.with_line_lock(i, chain, || self.resident(key, i, intent));
        }
        let lines = self.lines.borrow_mut();
        let views = Self::views(&lines);
        let mut policy = self.policy.borrow_mut();
        let Some(mut cand) = policy.map(key, &views) else {
            self.stats.borrow_mut().exhausted += 1;
            self.outcome(key, usize::MAX, "EXHAUSTED");
            return Step::Exhausted;
        };
        let mut tries = 0;
        while lines[cand].state == LineState::Busy
            && policy.busy_eviction() == BusyEviction::FindAnother
            && tries < lines.len()
        {
            match policy.remap(key, &views, cand) {
                Some(c) => cand = c,
                None => break,
            }
            tries += 1;
        }
        drop(policy);
        drop(lines);
        self.with_line_lock(cand, chain, || self.claim(key, cand, intent))
    }

    fn resident(&self, key: BlockKey, i: usize, intent: Intent<'_>) -> Step {
        let mut lines = self.lines.borrow_mut();
        match lines[i].state {
            LineState::Ready | LineState::Modified => {
                self.policy.borrow_mut().on_hit(i);
                self.stats.borrow_mut().hits += 1;
                match intent {
                    Intent::Read => {
                        self.outcome(key, i, "HIT");
                        Step::Hit(i)
                    }
                    Intent::StoreLazy(bytes) => {
                        lines[i].data.copy_from(bytes);
                        self.set_state(&mut lines, i, LineState::Modified);
                        self.outcome(key, i, "HIT");
                        Step::Hit(i)
                    }
                    Intent::Store(bytes) => {
                        lines[i].data.copy_from(bytes);
                        self.set_state(&mut lines, i, LineState::Modified);
                        self.set_state(&mut lines, i, LineState::Busy);
                        lines[i].busy = Some(BusyReason::Writeback { evicting: false });
                        self.stats.borrow_mut().stores += 1;
                        self.outcome(key, i, "HIT_STORE");
                        Step::StoreStarted(i)
                    }
                }
            }
            LineState::Busy => {
                self.stats.borrow_mut().joins += 1;
                self.outcome(key, i, "FILLING");
                Step::Filling(i)
            }
            LineState::Invalid => unreachable!("tag index points at an INVALID line"),
        }
    }

    fn claim(&self, key: BlockKey, i: usize, intent: Intent<'_>) -> Step {
        let mut lines = self.lines.borrow_mut();
        match lines[i].state {
            LineState::Busy => {
                self.stats.borrow_mut().deferred += 1;
                self.outcome(key, i, "DEFERRED");
                return Step::Deferred(i);
            }
            LineState::Modified => {
                let old = lines[i].tag.expect("MODIFIED line has a tag");
                self.set_state(&mut lines, i, LineState::Busy);
                lines[i].busy = Some(BusyReason::Writeback { evicting: true });
                self.stats.borrow_mut().eviction_writebacks += 1;
                self.outcome(key, i, "WRITEBACK_STARTED");
                return Step::WritebackStarted { line: i, old };
            }
            LineState::Ready => {
                let old = lines[i].tag.take().expect("READY line has a tag");
                self.tags.borrow_mut().remove(&old);
                self.set_state(&mut lines, i, LineState::Invalid);
                self.stats.borrow_mut().resets += 1;
            }
            LineState::Invalid => {}
        }
        lines[i].tag = Some(key);
        self.tags.borrow_mut().insert(key, i);
        self.set_state(&mut lines, i, LineState::Busy);
        self.policy.borrow_mut().on_fill(i);
        match intent {
            Intent::Read => {
                lines[i].busy = Some(BusyReason::Fill);
                let mut f = self.fills_in_flight.borrow_mut();
                let n = f.entry(key).or_default();
                *n += 1;
                let mut s = self.stats.borrow_mut();
                s.max_fills_in_flight_per_key = s.max_fills_in_flight_per_key.max(*n);
                s.fills += 1;
                self.outcome(key, i, "MISS_FILL_STARTED");
                Step::FillStarted(i)
            }
            Intent::Store(bytes) | Intent::StoreLazy(bytes) => {
                lines[i].data.copy_from(bytes);
                lines[i].busy = Some(BusyReason::Writeback { evicting: false });
                self.stats.borrow_mut().stores += 1;
                self.outcome(key, i, "MISS_STORE");
                Step::StoreStarted(i)
            }
        }
    }

    /// Queue an asynchronous reader on a BUSY line.
    pub fn add_waiter(&self, line: usize, w: Waiter) {
        let mut lines = self.lines.borrow_mut();
        debug_assert_eq!(lines[line].state, LineState::Busy);
        lines[line].waiters.push(w);
    }

    /// Copy the line into `out` if it holds valid data for `key`.
    pub fn read_into(&self, line: usize, key: BlockKey, out: &DmaBuf) -> bool {
        let lines = self.lines.borrow();
        let l = &lines[line];
        if l.tag != Some(key) || !matches!(l.state, LineState::Ready | LineState::Modified) {
            return false;
        }
        out.copy_from_buf(&l.data);
        true
    }

    /// Bytes `[offset, offset+len)` of `key`'s line if it holds valid data.
    pub fn read_bytes(&self, key: BlockKey, offset: usize, len: usize) -> Option<Vec<u8>> {
        let i = self.line_of(key)?;
        let lines = self.lines.borrow();
        let l = &lines[i];
        matches!(l.state, LineState::Ready | LineState::Modified).then(|| l.data.read_at(offset, len))
    }

    pub fn mark_modified(&self, line: usize, key: BlockKey, chain: &LockChain) -> Result<(), CacheError> {
        self.with_line_lock(line, chain, || {
            let mut lines = self.lines.borrow_mut();
            if lines[line].tag != Some(key) {
                return Err(CacheError::TagMismatch { line, key });
            }
            match lines[line].state {
                LineState::Ready | LineState::Modified => {
                    self.set_state(&mut lines, line, LineState::Modified);
                    Ok(())
                }
                state => Err(CacheError::IllegalState { line, state }),
            }
        })
    }

    /// MODIFIED lines with their tags.
    pub fn modified_lines(&self) -> Vec<(usize, BlockKey)> {
        self.lines
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.state == LineState::Modified)
            .map(|(i, l)| (i, l.tag.unwrap()))
            .collect()
    }

    /// Flush: MODIFIED -> BUSY with a write-back that keeps the line.
    pub fn start_flush(&self, line: usize, chain: &LockChain) -> Option<BlockKey> {
        self.with_line_lock(line, chain, || {
            let mut lines = self.lines.borrow_mut();
            if lines[line].state != LineState::Modified {
                return None;
            }
            self.set_state(&mut lines, line, LineState::Busy);
            lines[line].busy = Some(BusyReason::Writeback { evicting: false });
            self.stats.borrow_mut().flush_writebacks += 1;
            lines[line].tag
        })
    }

    fn drain_waiters(&self, lines: &mut [CacheLine], i: usize, status: u16) {
        let waiters = std::mem::take(&mut lines[i].waiters);
        for w in waiters {
            if status == 0 {
                w.buf.copy_from_buf(&lines[i].data);
            }
            let _ = w.barrier.complete(status);
        }
    }

    /// READ into `line` finished.
    pub fn complete_fill(&self, line: usize, status: u16) {
        let mut lines = self.lines.borrow_mut();
        if lines[line].busy != Some(BusyReason::Fill) {
            self.sim.emit(TraceEvent::Violation {
                module: "cache",
                what: format!("fill completion on line {line} that is not filling"),
            });
            return;
        }
        lines[line].busy = None;
        let key = lines[line].tag.expect("filling line has a tag");
        if let Some(n) = self.fills_in_flight.borrow_mut().get_mut(&key) {
            *n -= 1;
        }
        if status == 0 {
            self.set_state(&mut lines, line, LineState::Ready);
        } else {
            self.tags.borrow_mut().remove(&key);
            self.set_state(&mut lines, line, LineState::Invalid);
            lines[line].tag = None;
        }
        self.drain_waiters(&mut lines, line, status);
        drop(lines);
        self.changed.notify();
    }

    /// WRITE from `line` finished.
    pub fn complete_writeback(&self, line: usize, status: u16) {
        let mut lines = self.lines.borrow_mut();
        let Some(BusyReason::Writeback { evicting }) = lines[line].busy else {
            self.sim.emit(TraceEvent::Violation {
                module: "cache",
                what: format!("write-back completion on line {line} that is not writing"),
            });
            return;
        };
        lines[line].busy = None;
        if evicting && lines[line].waiters.is_empty() {
            let key = lines[line].tag.take().expect("written line has a tag");
            self.tags.borrow_mut().remove(&key);
            self.set_state(&mut lines, line, LineState::Invalid);
        } else {
            self.set_state(&mut lines, line, LineState::Ready);
            self.drain_waiters(&mut lines, line, 0);
        }
        let _ = status;
        drop(lines);
        self.changed.notify();
    }

    /// Every line with its state, for audits.
    pub fn snapshot(&self) -> Vec<LineView> {
        Self::views(&self.lines.borrow())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{SimConfig, TaskId};

    fn views(states: &[LineState]) -> Vec<LineView> {
        states
            .iter()
            .map(|&state| LineView { state, tag: None })
            .collect()
    }

    /// Independent second-chance oracle: a queue of (block, bit) pairs
    /// where the victim is the first entry with a clear bit.
    fn clock_oracle(lines: usize, accesses: &[u64]) -> Vec<Option<u64>> {
        let mut slots: Vec<Option<(u64, bool)>> = vec![None; lines];
        let mut hand = 0;
        let mut evicted = Vec::new();
        for &b in accesses {
            if let Some(s) = slots.iter_mut().flatten().find(|(blk, _)| *blk == b) {
                s.1 = true;
                evicted.push(None);
                continue;
            }
            loop {
                match slots[hand] {
                    None => break,
                    Some((_, true)) => slots[hand].as_mut().unwrap().1 = false,
                    Some((_, false)) => break,
                }
                hand = (hand + 1) % lines;
            }
            evicted.push(slots[hand].map(|(blk, _)| blk));
            slots[hand] = Some((b, true));
            hand = (hand + 1) % lines;
        }
        evicted
    }

    fn run_clock(lines: usize, accesses: &[u64]) -> Vec<Option<u64>> {
        let mut p = ClockPolicy::new(lines);
        let mut tags: Vec<Option<u64>> = vec![None; lines];
        let mut out = Vec::new();
        for &b in accesses {
            if let Some(i) = tags.iter().position(|t| *t == Some(b)) {
                p.on_hit(i);
                out.push(None);
                continue;
            }
            let v: Vec<LineView> = tags
                .iter()
                .map(|t| LineView {
                    state: if t.is_some() { LineState::Ready } else { LineState::Invalid },
                    tag: t.map(|b| BlockKey::new(0, b)),
                })
                .collect();
            let i = p.map(BlockKey::new(0, b), &v).unwrap();
            out.push(tags[i]);
            tags[i] = Some(b);
            p.on_fill(i);
        }
        out
    }

    #[test]
    fn clock_evicts_first_block_after_full_sweep() {
        let got = run_clock(4, &[1, 2, 3, 4, 5]);
        assert_eq!(got[4], Some(1));
        assert_eq!(got, clock_oracle(4, &[1, 2, 3, 4, 5]));
    }

    #[test]
    fn clock_reference_bit_spares_block() {
        let seq = [1, 2, 3, 4, 5, 2, 6];
        let got = run_clock(4, &seq);
        assert_eq!(got, clock_oracle(4, &seq));
        assert_eq!(got[6], Some(3), "block 2 was re-referenced and survives");
    }

    #[test]
    fn clock_matches_oracle_on_random_streams() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let lines = rng.random_range(1..8);
            let seq: Vec<u64> = (0..60).map(|_| rng.random_range(0..12)).collect();
            assert_eq!(run_clock(lines, &seq), clock_oracle(lines, &seq));
        }
    }

    #[test]
    fn clock_skips_busy_and_waits_when_all_busy() {
        let mut p = ClockPolicy::new(3);
        let v = views(&[LineState::Busy, LineState::Ready, LineState::Busy]);
        assert_eq!(p.map(BlockKey::new(0, 1), &v), Some(1));
        let v = views(&[LineState::Busy; 3]);
        assert_eq!(p.map(BlockKey::new(0, 1), &v), None);
    }

    fn cache(lines: usize, policy: Box<dyn CachePolicy>) -> (Sim, SoftwareCache, LockChain) {
        let sim = Sim::new(SimConfig {
            trace: true,
            ..SimConfig::default()
        });
        let locks = Rc::new(LockDetector::new(sim.clone(), true));
        let c = SoftwareCache::new(sim.clone(), locks, lines, 8, policy).unwrap();
        (sim, c, LockChain::new(TaskId(0)))
    }

    #[test]
    fn miss_then_join_then_hit() {
        let (_, c, ch) = cache(2, Box::new(ClockPolicy::new(2)));
        let k = BlockKey::new(0, 7);
        let Step::FillStarted(l) = c.lookup(k, Intent::Read, &ch) else { panic!() };
        assert_eq!(c.lookup(k, Intent::Read, &ch), Step::Filling(l));
        let b = Barrier::new(None, 0);
        let buf = DmaBuf::zeroed(8);
        c.add_waiter(l, Waiter { buf: buf.clone(), barrier: b.clone() });
        c.line_buf(l).copy_from(&[9; 8]);
        c.complete_fill(l, 0);
        assert!(b.is_done());
        assert_eq!(buf.to_vec(), vec![9; 8]);
        assert_eq!(c.lookup(k, Intent::Read, &ch), Step::Hit(l));
        assert!(ch.is_empty());
    }

    #[test]
    fn modified_victim_writes_back_then_refills() {
        let (_, c, ch) = cache(1, Box::new(ClockPolicy::new(1)));
        let (a, b) = (BlockKey::new(0, 1), BlockKey::new(0, 2));
        let Step::FillStarted(l) = c.lookup(a, Intent::Read, &ch) else { panic!() };
        c.complete_fill(l, 0);
        c.mark_modified(l, a, &ch).unwrap();
        assert_eq!(c.lookup(b, Intent::Read, &ch), Step::WritebackStarted { line: l, old: a });
        assert_eq!(c.lookup(b, Intent::Read, &ch), Step::Exhausted);
        c.complete_writeback(l, 0);
        assert_eq!(c.state(l), LineState::Invalid);
        assert_eq!(c.lookup(b, Intent::Read, &ch), Step::FillStarted(l));
    }

    #[test]
    fn ready_victim_is_reset_without_traffic() {
        let (_, c, ch) = cache(1, Box::new(ClockPolicy::new(1)));
        let Step::FillStarted(l) = c.lookup(BlockKey::new(0, 1), Intent::Read, &ch) else { panic!() };
        c.complete_fill(l, 0);
        assert_eq!(c.lookup(BlockKey::new(0, 2), Intent::Read, &ch), Step::FillStarted(l));
        assert_eq!(c.stats().resets, 1);
        assert_eq!(c.line_of(BlockKey::new(0, 1)), None);
    }

    #[test]
    fn busy_victim_defers_or_finds_another() {
        let (_, c, ch) = cache(2, Box::new(DirectMappedPolicy::new(BusyEviction::Wait)));
        c.lookup(BlockKey::new(0, 0), Intent::Read, &ch);
        assert_eq!(c.lookup(BlockKey::new(0, 2), Intent::Read, &ch), Step::Deferred(0));

        let (_, c, ch) = cache(2, Box::new(DirectMappedPolicy::new(BusyEviction::FindAnother)));
        c.lookup(BlockKey::new(0, 0), Intent::Read, &ch);
        assert_eq!(c.lookup(BlockKey::new(0, 2), Intent::Read, &ch), Step::FillStarted(1));
    }

    #[test]
    fn mark_modified_guards_state() {
        let (_, c, ch) = cache(1, Box::new(ClockPolicy::new(1)));
        let k = BlockKey::new(0, 3);
        let Step::FillStarted(l) = c.lookup(k, Intent::Read, &ch) else { panic!() };
        assert!(matches!(
            c.mark_modified(l, k, &ch),
            Err(CacheError::IllegalState { state: LineState::Busy, .. })
        ));
        c.complete_fill(l, 0);
        c.mark_modified(l, k, &ch).unwrap();
        c.mark_modified(l, k, &ch).unwrap();
        assert_eq!(c.state(l), LineState::Modified);
    }

    #[test]
    fn writeback_with_queued_reader_keeps_line() {
        let (_, c, ch) = cache(1, Box::new(ClockPolicy::new(1)));
        let a = BlockKey::new(0, 1);
        let Step::FillStarted(l) = c.lookup(a, Intent::Read, &ch) else { panic!() };
        c.line_buf(l).copy_from(&[4; 8]);
        c.complete_fill(l, 0);
        c.mark_modified(l, a, &ch).unwrap();
        c.lookup(BlockKey::new(0, 2), Intent::Read, &ch);
        // A reader of the old tag queues on the BUSY line.
        assert_eq!(c.lookup(a, Intent::Read, &ch), Step::Filling(l));
        let buf = DmaBuf::zeroed(8);
        c.add_waiter(l, Waiter { buf: buf.clone(), barrier: Barrier::new(None, 0) });
        c.complete_writeback(l, 0);
        assert_eq!(c.state(l), LineState::Ready);
        assert_eq!(buf.to_vec(), vec![4; 8]);
    }

    #[test]
    fn store_claims_line_without_fill() {
        let (_, c, ch) = cache(2, Box::new(ClockPolicy::new(2)));
        let k = BlockKey::new(0, 5);
        let Step::StoreStarted(l) = c.lookup(k, Intent::Store(&[1; 8]), &ch) else { panic!() };
        assert_eq!(c.stats().fills, 0);
        c.complete_writeback(l, 0);
        assert_eq!(c.read_bytes(k, 0, 8), Some(vec![1; 8]));
        let Step::StoreStarted(_) = c.lookup(k, Intent::Store(&[2; 8]), &ch) else { panic!() };
        let t = c.transitions();
        assert!(t.keys().all(|tr| LEGAL_TRANSITIONS.contains(tr)));
        assert_eq!(c.stats().illegal_transitions, 0);
    }
}
