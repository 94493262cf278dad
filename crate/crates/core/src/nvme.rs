//! NVMe queue-pair protocol state.
//!
//! Queue positions are kept as unwrapped 64-bit counters; the ring slot of
//! position `p` is `p & (depth - 1)`. Every shared word is an atomic, so the
//! same structures serve the deterministic simulator and the threaded stress
//! mode in [`crate::stress`].
//!
//! Submission entries carry a three-state lock word:
//!
//! ```text
//! EMPTY --enqueue--> UPDATED --doorbell scan--> ISSUED --completion--> EMPTY
//! ```

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex};

use crate::BlockKey;

/// Largest ring the 16-bit command identifier can address.
pub const MAX_QUEUE_DEPTH: u32 = 1 << 16;

/// Entries per completion polling window (one warp).
pub const WINDOW: u64 = 32;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum QueueError {
    #[error("queue depth {0} must be a power of two in 2..=65536")]
    BadDepth(u32),
    #[error("completion queue depth {0} must be a multiple of 32 and at least 64")]
    BadCqDepth(u32),
    #[error("protocol violation on sq {sq} sqe {sqe}: {what}")]
    ProtocolViolation { sq: u16, sqe: u16, what: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Read,
    Write,
}

impl Opcode {
    pub fn is_write(self) -> bool {
        matches!(self, Opcode::Write)
    }
}

/// Byte buffer the device transfers into or out of (a cache line or a user
/// buffer in simulated HBM).
#[derive(Clone)]
pub struct DmaBuf(Arc<Mutex<Vec<u8>>>);

impl DmaBuf {
    pub fn zeroed(len: usize) -> Self {
        DmaBuf(Arc::new(Mutex::new(vec![0; len])))
    }

    pub fn from_vec(v: Vec<u8>) -> Self {
        DmaBuf(Arc::new(Mutex::new(v)))
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.0.lock().unwrap().clone()
    }

    pub fn copy_from(&self, src: &[u8]) {
        let mut d = self.0.lock().unwrap();
        d[..src.len()].copy_from_slice(src);
    }

    pub fn copy_from_buf(&self, src: &DmaBuf) {
        if Arc::ptr_eq(&self.0, &src.0) {
            return;
        }
        let s = src.to_vec();
        self.copy_from(&s);
    }

    pub fn write_at(&self, offset: usize, bytes: &[u8]) {
        let mut d = self.0.lock().unwrap();
        d[offset..offset + bytes.len()].copy_from_slice(bytes);
    }

    pub fn read_at(&self, offset: usize, len: usize) -> Vec<u8> {
        self.0.lock().unwrap()[offset..offset + len].to_vec()
    }

    pub fn same_memory(&self, other: &DmaBuf) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for DmaBuf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DmaBuf({} bytes)", self.len())
    }
}

#[derive(Debug, Clone)]
pub struct NvmeCommand {
    pub opcode: Opcode,
    pub cid: u16,
    pub key: BlockKey,
    pub dest: DmaBuf,
    pub len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SqeState {
    Empty = 0,
    Updated = 1,
    Issued = 2,
}

impl SqeState {
    fn from_u8(v: u8) -> SqeState {
        match v {
            0 => SqeState::Empty,
            1 => SqeState::Updated,
            2 => SqeState::Issued,
            _ => unreachable!("corrupt sqe lock word {v}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqdbStatus {
    Success,
    Pending,
}

/// A doorbell write: positions `[old, new)` became visible to the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Published {
    pub old: u64,
    pub new: u64,
}

struct SqSlot {
    state: AtomicU8,
    cmd: Mutex<Option<NvmeCommand>>,
}

pub struct SubmissionQueue {
    idx: u16,
    depth: u32,
    mask: u64,
    slots: Box<[SqSlot]>,
    tail: AtomicU64,
    head: AtomicU64,
    doorbell_lock: AtomicBool,
    doorbell_value: AtomicU64,
}

impl fmt::Debug for SubmissionQueue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubmissionQueue")
            .field("idx", &self.idx)
            .field("depth", &self.depth)
            .field("head", &self.head())
            .field("tail", &self.tail())
            .field("doorbell", &self.doorbell())
            .finish()
    }
}

pub fn check_depth(depth: u32) -> Result<(), QueueError> {
    if !(2..=MAX_QUEUE_DEPTH).contains(&depth) || !depth.is_power_of_two() {
        return Err(QueueError::BadDepth(depth));
    }
    Ok(())
}

impl SubmissionQueue {
    pub fn new(idx: u16, depth: u32) -> Result<Self, QueueError> {
        check_depth(depth)?;
        let slots = (0..depth)
            .map(|_| SqSlot {
                state: AtomicU8::new(SqeState::Empty as u8),
                cmd: Mutex::new(None),
            })
            .collect();
        Ok(SubmissionQueue {
            idx,
            depth,
            mask: depth as u64 - 1,
            slots,
            tail: AtomicU64::new(0),
            head: AtomicU64::new(0),
            doorbell_lock: AtomicBool::new(false),
            doorbell_value: AtomicU64::new(0),
        })
    }

    pub fn idx(&self) -> u16 {
        self.idx
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn slot_of(&self, pos: u64) -> u16 {
        (pos & self.mask) as u16
    }

    pub fn head(&self) -> u64 {
        self.head.load(Ordering::Acquire)
    }

    pub fn tail(&self) -> u64 {
        self.tail.load(Ordering::Acquire)
    }

    pub fn doorbell(&self) -> u64 {
        self.doorbell_value.load(Ordering::Acquire)
    }

    pub fn in_flight(&self) -> u64 {
        self.tail() - self.head()
    }

    /// One slot stays unused so a full ring is distinguishable from an empty one.
    pub fn capacity(&self) -> u64 {
        self.depth as u64 - 1
    }

    pub fn is_full(&self) -> bool {
        self.in_flight() >= self.capacity()
    }

    pub fn state(&self, sqe: u16) -> SqeState {
        SqeState::from_u8(self.slots[sqe as usize].state.load(Ordering::Acquire))
    }

    /// Claim the next free position (`check_full`). The command identifier of
    /// the claimed entry is its slot index.
    pub fn try_reserve(&self) -> Option<u64> {
        let mut t = self.tail.load(Ordering::Acquire);
        loop {
            let h = self.head.load(Ordering::Acquire);
            if t - h >= self.capacity() {
                return None;
            }
            match self
                .tail
                .compare_exchange_weak(t, t + 1, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return Some(t),
                Err(cur) => t = cur,
            }
        }
    }

    /// CID allocation: the slot index of a fresh reservation.
    pub fn allocate_cid(&self) -> Option<(u64, u16)> {
        self.try_reserve().map(|p| (p, self.slot_of(p)))
    }

    /// Write the command into a reserved entry and flip EMPTY -> UPDATED.
    pub fn write_entry(&self, pos: u64, mut cmd: NvmeCommand) -> Result<u16, QueueError> {
        let sqe = self.slot_of(pos);
        cmd.cid = sqe;
        let slot = &self.slots[sqe as usize];
        *slot.cmd.lock().unwrap() = Some(cmd);
        self.transition(sqe, SqeState::Empty, SqeState::Updated, "enqueue into non-empty entry")?;
        Ok(sqe)
    }

    fn transition(
        &self,
        sqe: u16,
        from: SqeState,
        to: SqeState,
        what: &'static str,
    ) -> Result<(), QueueError> {
        self.slots[sqe as usize]
            .state
            .compare_exchange(from as u8, to as u8, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| ())
            .map_err(|_| QueueError::ProtocolViolation {
                sq: self.idx,
                sqe,
                what,
            })
    }

    /// Whether the entry at `pos` has been handed to the device.
    pub fn check_sqe(&self, pos: u64) -> bool {
        // A published position may already have completed and been recycled.
        pos < self.doorbell() || self.state(self.slot_of(pos)) == SqeState::Issued
    }

    /// One round of the doorbell protocol for the entry at `pos`. If the
    /// doorbell lock is free, scan forward from the published tail flipping
    /// UPDATED -> ISSUED until the first non-UPDATED entry and publish the new
    /// tail once.
    pub fn attempt_sqdb(&self, pos: u64) -> (SqdbStatus, Option<Published>) {
        let mut published = None;
        if self
            .doorbell_lock
            .compare_exchange(false, true, Ordering::Acquire, Ordering::Relaxed)
            .is_ok()
        {
            published = self.move_tail();
            self.doorbell_lock.store(false, Ordering::Release);
        }
        let status = if self.check_sqe(pos) {
            SqdbStatus::Success
        } else {
            SqdbStatus::Pending
        };
        (status, published)
    }

    fn move_tail(&self) -> Option<Published> {
        let old = self.doorbell_value.load(Ordering::Acquire);
        let limit = self.tail.load(Ordering::Acquire);
        let mut new = old;
        while new < limit {
            let sqe = self.slot_of(new);
            if self.transition(sqe, SqeState::Updated, SqeState::Issued, "").is_err() {
                break;
            }
            new += 1;
        }
        if new == old {
            return None;
        }
        // Release store: command writes scanned above are visible before the tail.
        self.doorbell_value.store(new, Ordering::Release);
        Some(Published { old, new })
    }

    /// Device-side read of a published entry.
    pub fn fetch(&self, pos: u64) -> Result<NvmeCommand, QueueError> {
        let sqe = self.slot_of(pos);
        if self.state(sqe) != SqeState::Issued {
            return Err(QueueError::ProtocolViolation {
                sq: self.idx,
                sqe,
                what: "device fetched an entry that is not ISSUED",
            });
        }
        self.slots[sqe as usize]
            .cmd
            .lock()
            .unwrap()
            .clone()
            .ok_or(QueueError::ProtocolViolation {
                sq: self.idx,
                sqe,
                what: "issued entry holds no command",
            })
    }

    /// Completion consumed: ISSUED -> EMPTY, then advance the head over the
    /// contiguous run of released entries below the published tail.
    pub fn release_sqe(&self, sqe: u16) -> Result<(), QueueError> {
        self.transition(sqe, SqeState::Issued, SqeState::Empty, "release of an entry that is not ISSUED")?;
        self.slots[sqe as usize].cmd.lock().unwrap().take();
        loop {
            let h = self.head.load(Ordering::Acquire);
            if h >= self.doorbell() || self.state(self.slot_of(h)) != SqeState::Empty {
                return Ok(());
            }
            // Losing the race means someone else advanced it; re-check.
            let _ = self
                .head
                .compare_exchange(h, h + 1, Ordering::AcqRel, Ordering::Acquire);
        }
    }

    /// Enqueue and keep driving the doorbell until the entry is issued,
    /// spinning between attempts. Used by the threaded stress mode; the
    /// simulated path interleaves attempts with task yields instead.
    pub fn attempt_enqueue(
        &self,
        cmd: NvmeCommand,
        mut ring: impl FnMut(Published),
    ) -> Result<Option<u16>, QueueError> {
        let Some(pos) = self.try_reserve() else {
            return Ok(None);
        };
        let sqe = self.write_entry(pos, cmd)?;
        loop {
            let (status, published) = self.attempt_sqdb(pos);
            if let Some(p) = published {
                ring(p);
            }
            if status == SqdbStatus::Success {
                return Ok(Some(sqe));
            }
            std::hint::spin_loop();
        }
    }
}

/// Initial submission queue for a thread, before any full-queue retries.
pub fn select_sq(thread_idx: usize, num_sqs: usize) -> usize {
    assert!(num_sqs > 0, "device has no submission queues");
    thread_idx % num_sqs
}

/// Fallback after a full queue.
pub fn next_sq(sq_idx: usize, num_sqs: usize) -> usize {
    (sq_idx + 1) % num_sqs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub cid: u16,
    pub sq: u16,
    pub status: u16,
    pub phase: u8,
}

impl Completion {
    fn pack(self) -> u64 {
        self.cid as u64
            | (self.sq as u64) << 16
            | (self.status as u64) << 32
            | ((self.phase & 1) as u64) << 48
    }

    fn unpack(w: u64) -> Completion {
        Completion {
            cid: w as u16,
            sq: (w >> 16) as u16,
            status: (w >> 32) as u16,
            phase: ((w >> 48) & 1) as u8,
        }
    }
}

/// Completion ring. The device owns the tail and its phase; the host owns
/// the head doorbell and the polling window (`poll_offset`, `poll_mask`).
pub struct CompletionQueue {
    idx: u16,
    depth: u32,
    mask: u64,
    entries: Box<[AtomicU64]>,
    dev_tail: AtomicU64,
    head_doorbell: AtomicU64,
    poll_offset: AtomicU64,
    poll_mask: AtomicU32,
}

impl fmt::Debug for CompletionQueue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompletionQueue")
            .field("idx", &self.idx)
            .field("depth", &self.depth)
            .field("dev_tail", &self.device_tail())
            .field("head_doorbell", &self.head_doorbell())
            .field("poll_offset", &self.poll_offset())
            .field("poll_mask", &format_args!("{:#010x}", self.poll_mask()))
            .finish()
    }
}

/// Phase value written (and expected) on the lap containing position `pos`.
pub fn phase_for(pos: u64, depth: u32) -> u8 {
    if (pos / depth as u64).is_multiple_of(2) {
        1
    } else {
        0
    }
}

impl CompletionQueue {
    pub fn new(idx: u16, depth: u32) -> Result<Self, QueueError> {
        check_depth(depth)?;
        if depth < 2 * WINDOW as u32 {
            return Err(QueueError::BadCqDepth(depth));
        }
        Ok(CompletionQueue {
            idx,
            depth,
            mask: depth as u64 - 1,
            entries: (0..depth).map(|_| AtomicU64::new(0)).collect(),
            dev_tail: AtomicU64::new(0),
            head_doorbell: AtomicU64::new(0),
            poll_offset: AtomicU64::new(0),
            poll_mask: AtomicU32::new(0),
        })
    }

    pub fn idx(&self) -> u16 {
        self.idx
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn device_tail(&self) -> u64 {
        self.dev_tail.load(Ordering::Acquire)
    }

    pub fn head_doorbell(&self) -> u64 {
        self.head_doorbell.load(Ordering::Acquire)
    }

    pub fn poll_offset(&self) -> u64 {
        self.poll_offset.load(Ordering::Acquire)
    }

    pub fn poll_mask(&self) -> u32 {
        self.poll_mask.load(Ordering::Acquire)
    }

    /// Expected phase for the current polling window.
    pub fn phase_bit(&self) -> u8 {
        phase_for(self.poll_offset(), self.depth)
    }

    pub fn free_entries(&self) -> u64 {
        (self.depth as u64 - 1) - (self.device_tail() - self.head_doorbell())
    }

    /// Device side: write a completion into the next entry, or hand it back
    /// when the ring is full.
    pub fn try_post(&self, cid: u16, sq: u16, status: u16) -> Result<(u64, u8), Completion> {
        let tail = self.device_tail();
        let phase = phase_for(tail, self.depth);
        let c = Completion {
            cid,
            sq,
            status,
            phase,
        };
        if tail - self.head_doorbell() >= self.depth as u64 - 1 {
            return Err(c);
        }
        self.entries[(tail & self.mask) as usize].store(c.pack(), Ordering::Release);
        self.dev_tail.store(tail + 1, Ordering::Release);
        Ok((tail, phase))
    }

    /// Host side: the completion at `pos` if its phase matches `phase_bit`.
    pub fn load(&self, pos: u64, phase_bit: u8) -> Option<Completion> {
        let c = Completion::unpack(self.entries[(pos & self.mask) as usize].load(Ordering::Acquire));
        (c.phase == phase_bit).then_some(c)
    }

    pub fn load_window(&self) -> (u64, u32, u8) {
        (self.poll_offset(), self.poll_mask(), self.phase_bit())
    }

    pub fn store_mask(&self, mask: u32) {
        self.poll_mask.store(mask, Ordering::Release);
    }

    /// Retire the current (fully processed) window.
    pub fn advance_window(&self) -> u64 {
        self.poll_mask.store(0, Ordering::Release);
        self.poll_offset.fetch_add(WINDOW, Ordering::AcqRel) + WINDOW
    }

    /// Host writes the CQ head doorbell. Returns the previous value.
    pub fn ring_head(&self, new_head: u64) -> u64 {
        let old = self.head_doorbell.swap(new_head, Ordering::AcqRel);
        debug_assert!(new_head >= old, "cq head doorbell moved backwards");
        debug_assert!(new_head <= self.device_tail(), "cq head passed device tail");
        old
    }
}

/// A submission/completion queue pair bound to one device.
#[derive(Debug)]
pub struct QueuePair {
    pub sq: SubmissionQueue,
    pub cq: CompletionQueue,
}

impl QueuePair {
    /// The completion ring is at least two polling windows deep and never
    /// shallower than the submission ring.
    pub fn new(idx: u16, sq_depth: u32) -> Result<Self, QueueError> {
        let cq_depth = sq_depth.max(2 * WINDOW as u32);
        Ok(QueuePair {
            sq: SubmissionQueue::new(idx, sq_depth)?,
            cq: CompletionQueue::new(idx, cq_depth)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cmd(blk: u64) -> NvmeCommand {
        NvmeCommand {
            opcode: Opcode::Read,
            cid: 0,
            key: BlockKey::new(0, blk),
            dest: DmaBuf::zeroed(8),
            len: 8,
        }
    }

    fn enqueue(sq: &SubmissionQueue, blk: u64) -> u64 {
        let pos = sq.try_reserve().expect("not full");
        sq.write_entry(pos, cmd(blk)).unwrap();
        pos
    }

    #[test]
    fn select_sq_is_modulo_with_wraparound_retry() {
        assert_eq!(select_sq(5, 4), 1);
        assert_eq!(select_sq(0, 1), 0);
        assert_eq!(next_sq(3, 4), 0);
    }

    #[test]
    fn depth_must_be_power_of_two() {
        assert!(SubmissionQueue::new(0, 3).is_err());
        assert!(SubmissionQueue::new(0, 1).is_err());
        assert!(SubmissionQueue::new(0, 1 << 17).is_err());
        assert!(SubmissionQueue::new(0, 256).is_ok());
    }

    #[test]
    fn fresh_queue_accepts_and_first_cid_is_zero() {
        let sq = SubmissionQueue::new(0, 256).unwrap();
        assert_eq!(sq.allocate_cid(), Some((0, 0)));
    }

    #[test]
    fn depth_two_holds_one_command() {
        let sq = SubmissionQueue::new(0, 2).unwrap();
        enqueue(&sq, 0);
        assert!(sq.is_full());
        assert_eq!(sq.try_reserve(), None);
    }

    #[test]
    fn batch_scan_issues_contiguous_updated_entries() {
        let sq = SubmissionQueue::new(0, 4).unwrap();
        enqueue(&sq, 0);
        enqueue(&sq, 1);
        let (st, p) = sq.attempt_sqdb(0);
        assert_eq!(st, SqdbStatus::Success);
        assert_eq!(p, Some(Published { old: 0, new: 2 }));
        assert_eq!(sq.state(0), SqeState::Issued);
        assert_eq!(sq.state(1), SqeState::Issued);
        assert_eq!(sq.state(2), SqeState::Empty);
    }

    #[test]
    fn scan_stops_at_invisible_entry() {
        let sq = SubmissionQueue::new(0, 4).unwrap();
        let a = enqueue(&sq, 0);
        let b = sq.try_reserve().unwrap(); // reserved, command not yet written
        let c = enqueue(&sq, 2);
        let (st, p) = sq.attempt_sqdb(c);
        assert_eq!(st, SqdbStatus::Pending);
        assert_eq!(p, Some(Published { old: 0, new: 1 }));
        assert!(sq.check_sqe(a));
        sq.write_entry(b, cmd(1)).unwrap();
        let (st, p) = sq.attempt_sqdb(b);
        assert_eq!(st, SqdbStatus::Success);
        assert_eq!(p, Some(Published { old: 1, new: 3 }));
        assert!(sq.check_sqe(c));
    }

    #[test]
    fn losing_the_doorbell_race_still_succeeds_when_covered() {
        let sq = SubmissionQueue::new(0, 8).unwrap();
        let a = enqueue(&sq, 0);
        let b = enqueue(&sq, 1);
        sq.attempt_sqdb(a);
        // b was covered by a's scan.
        sq.doorbell_lock.store(true, Ordering::Release);
        assert_eq!(sq.attempt_sqdb(b), (SqdbStatus::Success, None));
    }

    #[test]
    fn release_rules() {
        let sq = SubmissionQueue::new(0, 4).unwrap();
        let a = enqueue(&sq, 0);
        assert!(sq.release_sqe(0).is_err(), "UPDATED cannot be released");
        sq.attempt_sqdb(a);
        sq.release_sqe(0).unwrap();
        assert_eq!(sq.state(0), SqeState::Empty);
        assert_eq!(sq.head(), 1);
        assert!(matches!(
            sq.release_sqe(0),
            Err(QueueError::ProtocolViolation { .. })
        ));
    }

    #[test]
    fn out_of_order_release_frees_everything() {
        let sq = SubmissionQueue::new(0, 4).unwrap();
        let p: Vec<u64> = (0..3).map(|b| enqueue(&sq, b)).collect();
        sq.attempt_sqdb(p[0]);
        sq.release_sqe(2).unwrap();
        assert_eq!(sq.head(), 0);
        sq.release_sqe(1).unwrap();
        assert_eq!(sq.head(), 0);
        sq.release_sqe(0).unwrap();
        assert_eq!(sq.head(), 3);
        assert!((0..4).all(|i| sq.state(i) == SqeState::Empty));
    }

    #[test]
    fn fetch_requires_issued() {
        let sq = SubmissionQueue::new(0, 4).unwrap();
        let a = enqueue(&sq, 9);
        assert!(sq.fetch(a).is_err());
        sq.attempt_sqdb(a);
        assert_eq!(sq.fetch(a).unwrap().key.blk, 9);
    }

    #[test]
    fn completion_phase_flips_per_lap() {
        let cq = CompletionQueue::new(0, 64).unwrap();
        assert_eq!(cq.try_post(0, 0, 0), Ok((0, 1)));
        assert!(cq.load(0, 1).is_some());
        assert!(cq.load(1, 1).is_none());
        assert_eq!(phase_for(64, 64), 0);
        assert_eq!(phase_for(128, 64), 1);
    }

    #[test]
    fn completion_ring_stalls_when_full() {
        let cq = CompletionQueue::new(0, 64).unwrap();
        for i in 0..63 {
            cq.try_post(i, 0, 0).unwrap();
        }
        assert!(cq.try_post(63, 0, 0).is_err());
        cq.ring_head(32);
        assert!(cq.try_post(63, 0, 0).is_ok());
    }

    proptest! {
        // Random interleavings of reserve / write / doorbell / release keep
        // the ring invariants and issue every command exactly once.
        #[test]
        fn ring_invariants(depth_log in 1u32..7, ops in proptest::collection::vec(0u8..4, 1..400)) {
            let depth = 1u32 << depth_log;
            let sq = SubmissionQueue::new(0, depth).unwrap();
            let mut reserved: Vec<u64> = Vec::new();
            let mut written: Vec<u64> = Vec::new();
            let mut issued_total = 0u64;
            let mut enq_total = 0u64;
            let mut last_db = 0u64;
            for op in ops {
                match op {
                    0 => if let Some(p) = sq.try_reserve() { reserved.push(p) } else {
                        prop_assert!(sq.in_flight() >= sq.capacity());
                    },
                    1 => if let Some(p) = reserved.pop() {
                        sq.write_entry(p, cmd(p)).unwrap();
                        written.push(p);
                        enq_total += 1;
                    },
                    2 => if let Some(&p) = written.first() {
                        let (_, publ) = sq.attempt_sqdb(p);
                        if let Some(pb) = publ {
                            prop_assert_eq!(pb.old, last_db);
                            prop_assert!(pb.new > pb.old && pb.new - pb.old <= depth as u64);
                            issued_total += pb.new - pb.old;
                            last_db = pb.new;
                        }
                    },
                    _ => if let Some(i) = written.iter().position(|&p| p < sq.doorbell()) {
                        let p = written.remove(i);
                        sq.release_sqe(sq.slot_of(p)).unwrap();
                    },
                }
                prop_assert!(sq.in_flight() <= sq.capacity());
                prop_assert!(sq.doorbell() <= sq.tail());
                prop_assert!(sq.head() <= sq.doorbell());
                for p in sq.doorbell()..sq.tail() {
                    let st = sq.state(sq.slot_of(p));
                    let is_reserved = reserved.contains(&p);
                    prop_assert!(st == SqeState::Updated || (st == SqeState::Empty && is_reserved));
                }
            }
            prop_assert!(issued_total <= enq_total);
        }
    }
}
