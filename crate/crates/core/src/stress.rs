//! Threaded stress mode for the submission queue: real producer threads
//! race on reservation and the doorbell scan while a device thread fetches
//! published entries and releases them. Used for race hunting only; the
//! simulator never depends on it.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use crate::nvme::{DmaBuf, NvmeCommand, Opcode, Published, QueueError, SubmissionQueue};
use crate::BlockKey;

#[derive(Debug, Clone, Copy)]
pub struct StressConfig {
    pub producers: usize,
    pub commands_per_producer: u64,
    pub depth: u32,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            producers: 4,
            commands_per_producer: 10_000,
            depth: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StressReport {
    pub enqueued: u64,
    /// Entries covered by published doorbell ranges.
    pub issued: u64,
    pub fetched: u64,
    pub released: u64,
    /// Commands fetched more than once or never.
    pub duplicates: u64,
    pub missing: u64,
    /// Published ranges that overlap or leave a gap.
    pub range_errors: u64,
    pub violations: Vec<String>,
}

impl StressReport {
    pub fn is_clean(&self) -> bool {
        let n = self.enqueued;
        self.issued == n
            && self.fetched == n
            && self.released == n
            && self.duplicates == 0
            && self.missing == 0
            && self.range_errors == 0
            && self.violations.is_empty()
    }
}

pub fn run_stress(cfg: StressConfig) -> Result<StressReport, QueueError> {
    let sq = Arc::new(SubmissionQueue::new(0, cfg.depth)?);
    let ranges: Arc<Mutex<Vec<Published>>> = Arc::default();
    let done = Arc::new(AtomicBool::new(false));
    let total = cfg.producers as u64 * cfg.commands_per_producer;

    let device = {
        let (sq, done) = (sq.clone(), done.clone());
        thread::spawn(move || {
            let mut seen = HashSet::new();
            let (mut fetched, mut released, mut dup) = (0u64, 0u64, 0u64);
            let mut violations = Vec::new();
            let mut next = 0u64;
            while released < total {
                let tail = sq.doorbell();
                if next == tail {
                    if done.load(Ordering::Acquire) && released == total {
                        break;
                    }
                    thread::yield_now();
                    continue;
                }
                for pos in next..tail {
                    match sq.fetch(pos) {
                        Ok(cmd) => {
                            fetched += 1;
                            if !seen.insert(cmd.key.blk) {
                                dup += 1;
                            }
                        }
                        Err(e) => violations.push(e.to_string()),
                    }
                    match sq.release_sqe(sq.slot_of(pos)) {
                        Ok(()) => released += 1,
                        Err(e) => violations.push(e.to_string()),
                    }
                }
                next = tail;
                if !violations.is_empty() {
                    break;
                }
            }
            (seen, fetched, released, dup, violations)
        })
    };

    let producers: Vec<_> = (0..cfg.producers)
        .map(|p| {
            let (sq, ranges) = (sq.clone(), ranges.clone());
            thread::spawn(move || -> Result<u64, QueueError> {
                let mut n = 0;
                for i in 0..cfg.commands_per_producer {
                    let id = p as u64 * cfg.commands_per_producer + i;
                    loop {
                        let cmd = NvmeCommand {
                            opcode: Opcode::Read,
                            cid: 0,
                            key: BlockKey::new(0, id),
                            dest: DmaBuf::zeroed(0),
                            len: 0,
                        };
                        let r = sq.attempt_enqueue(cmd, |pb| ranges.lock().unwrap().push(pb))?;
                        if r.is_some() {
                            n += 1;
                            break;
                        }
                        thread::yield_now();
                    }
                }
                Ok(n)
            })
        })
        .collect();

    let mut enqueued = 0;
    for h in producers {
        enqueued += h.join().expect("producer panicked")?;
    }
    done.store(true, Ordering::Release);
    let (seen, fetched, released, duplicates, violations) = device.join().expect("device panicked");

    let mut rs = ranges.lock().unwrap().clone();
    rs.sort_by_key(|r| r.old);
    let mut range_errors = 0;
    let mut expect = 0;
    for r in &rs {
        if r.old != expect || r.new <= r.old {
            range_errors += 1;
        }
        expect = r.new;
    }
    Ok(StressReport {
        enqueued,
        issued: rs.iter().map(|r| r.new - r.old).sum(),
        fetched,
        released,
        duplicates,
        missing: total - seen.len() as u64,
        range_errors,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threaded_queue_is_exactly_once() {
        for depth in [2, 8, 64] {
            let r = run_stress(StressConfig {
                producers: 4,
                commands_per_producer: 2_000,
                depth,
            })
            .unwrap();
            assert!(r.is_clean(), "depth {depth}: {r:?}");
            assert_eq!(r.enqueued, 8_000);
        }
    }
}
