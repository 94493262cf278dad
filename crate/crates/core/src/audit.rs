//! Trace audits: recount protocol events from a recorded trace and check
//! the queue, window and cache-line rules against them.

use std::collections::{HashMap, HashSet};

use crate::cache::{LineState, LEGAL_TRANSITIONS};
use crate::nvme::WINDOW;
use crate::sim::{TraceEvent, TraceRecord};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueueAudit {
    pub enqueues: u64,
    pub issues: u64,
    pub fetches: u64,
    pub posts: u64,
    pub completions: u64,
    pub releases: u64,
    pub doorbells: u64,
    /// Enqueue of a CID still in flight on the same SQ.
    pub cid_reuse: u64,
    /// Entries issued, fetched or released out of order.
    pub lifecycle_errors: u64,
    /// Doorbell writes that are not a contiguous, forward, at-most-depth step.
    pub doorbell_errors: u64,
    pub violations: u64,
}

impl QueueAudit {
    /// Every enqueued command was issued, fetched, completed and released
    /// exactly once.
    pub fn exactly_once(&self) -> bool {
        let n = self.enqueues;
        self.issues == n
            && self.fetches == n
            && self.posts == n
            && self.completions == n
            && self.releases == n
    }

    pub fn is_clean(&self) -> bool {
        self.exactly_once()
            && self.cid_reuse == 0
            && self.lifecycle_errors == 0
            && self.doorbell_errors == 0
            && self.violations == 0
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    Enqueued,
    Issued,
    Fetched,
}

pub fn audit_queues(records: &[TraceRecord]) -> QueueAudit {
    let mut a = QueueAudit::default();
    let mut stage: HashMap<(u16, u16, u16), Stage> = HashMap::new();
    let mut tail: HashMap<(u16, u16), u64> = HashMap::new();
    let advance = |stage: &mut HashMap<_, _>, a: &mut QueueAudit, k, from, to: Option<Stage>| {
        if stage.get(&k).copied() != from {
            a.lifecycle_errors += 1;
        }
        match to {
            Some(s) => stage.insert(k, s),
            None => stage.remove(&k),
        };
    };
    for r in records {
        match &r.event {
            TraceEvent::Enqueue { dev, sq, cid, sqe, .. } => {
                a.enqueues += 1;
                if stage.contains_key(&(*dev, *sq, *cid)) {
                    a.cid_reuse += 1;
                }
                advance(&mut stage, &mut a, (*dev, *sq, *sqe), None, Some(Stage::Enqueued));
            }
            TraceEvent::SqeIssued { dev, sq, sqe } => {
                a.issues += 1;
                advance(&mut stage, &mut a, (*dev, *sq, *sqe), Some(Stage::Enqueued), Some(Stage::Issued));
            }
            TraceEvent::Fetch { dev, sq, sqe, .. } => {
                a.fetches += 1;
                advance(&mut stage, &mut a, (*dev, *sq, *sqe), Some(Stage::Issued), Some(Stage::Fetched));
            }
            TraceEvent::SqeRelease { dev, sq, sqe } => {
                a.releases += 1;
                advance(&mut stage, &mut a, (*dev, *sq, *sqe), Some(Stage::Fetched), None);
            }
            TraceEvent::CqePost { .. } => a.posts += 1,
            TraceEvent::CqeProcessed { .. } => a.completions += 1,
            TraceEvent::SqDoorbell { dev, sq, old, new, depth } => {
                a.doorbells += 1;
                let prev = tail.insert((*dev, *sq), *new).unwrap_or(0);
                if *old != prev || *new <= *old || *new - *old > *depth as u64 {
                    a.doorbell_errors += 1;
                }
            }
            TraceEvent::Violation { module, .. } if matches!(*module, "nvme" | "ssd" | "service") => {
                a.violations += 1
            }
            _ => {}
        }
    }
    a
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WindowAudit {
    pub steady_rings: u64,
    /// Steady-state head rings that are not exactly one aligned window.
    pub misaligned: u64,
    pub drain_rings: u64,
    pub max_drain_residual: u64,
    /// Drain rings that moved the head by a full window or more, or
    /// backwards.
    pub bad_drains: u64,
    /// Posted completions never consumed.
    pub unconsumed: u64,
}

impl WindowAudit {
    pub fn is_clean(&self) -> bool {
        self.misaligned == 0 && self.bad_drains == 0 && self.unconsumed == 0
    }
}

pub fn audit_windows(records: &[TraceRecord]) -> WindowAudit {
    let w = WINDOW;
    let mut a = WindowAudit::default();
    let mut head: HashMap<(u16, u16), u64> = HashMap::new();
    let mut posted: HashSet<(u16, u16, u64)> = HashSet::new();
    for r in records {
        match &r.event {
            TraceEvent::CqePost { dev, cq, pos, .. } => {
                posted.insert((*dev, *cq, *pos));
            }
            TraceEvent::CqeProcessed { dev, cq, pos, .. } => {
                posted.remove(&(*dev, *cq, *pos));
            }
            TraceEvent::CqDoorbell { dev, cq, old, new, drain } => {
                let prev = head.insert((*dev, *cq), *new).unwrap_or(0);
                if *drain {
                    a.drain_rings += 1;
                    let step = new.wrapping_sub(*old);
                    a.max_drain_residual = a.max_drain_residual.max(step);
                    if *old != prev || *new <= *old || step >= w {
                        a.bad_drains += 1;
                    }
                } else {
                    a.steady_rings += 1;
                    if *old != prev || *new != *old + w || *new % w != 0 {
                        a.misaligned += 1;
                    }
                }
            }
            _ => {}
        }
    }
    a.unconsumed = posted.len() as u64;
    a
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LineAudit {
    pub transitions: u64,
    pub illegal: u64,
}

pub fn audit_lines(records: &[TraceRecord]) -> LineAudit {
    let mut a = LineAudit::default();
    for r in records {
        if let TraceEvent::LineState { from, to, .. } = &r.event {
            a.transitions += 1;
            let pair = (LineState::from_name(from), LineState::from_name(to));
            let legal = matches!(pair, (Some(f), Some(t)) if LEGAL_TRANSITIONS.contains(&(f, t)));
            if !legal {
                a.illegal += 1;
            }
        }
    }
    a
}

/// Number of deadlock reports in the trace.
pub fn deadlock_reports(records: &[TraceRecord]) -> usize {
    records
        .iter()
        .filter(|r| matches!(r.event, TraceEvent::Deadlock { .. }))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TaskId;

    fn rec(event: TraceEvent) -> TraceRecord {
        TraceRecord {
            time: 0,
            task: Some(TaskId(0)),
            event,
        }
    }

    fn lifecycle(sqe: u16) -> Vec<TraceRecord> {
        vec![
            rec(TraceEvent::Enqueue { dev: 0, sq: 0, sqe, cid: sqe, write: false, blk: 1 }),
            rec(TraceEvent::SqeIssued { dev: 0, sq: 0, sqe }),
            rec(TraceEvent::Fetch { dev: 0, sq: 0, sqe, cid: sqe, write: false, blk: 1 }),
            rec(TraceEvent::CqePost { dev: 0, cq: 0, pos: sqe as u64, sq: 0, cid: sqe, phase: 1 }),
            rec(TraceEvent::CqeProcessed { dev: 0, cq: 0, pos: sqe as u64, sq: 0, cid: sqe }),
            rec(TraceEvent::SqeRelease { dev: 0, sq: 0, sqe }),
        ]
    }

    #[test]
    fn clean_lifecycle_passes() {
        let mut t = lifecycle(0);
        t.insert(2, rec(TraceEvent::SqDoorbell { dev: 0, sq: 0, old: 0, new: 1, depth: 4 }));
        let a = audit_queues(&t);
        assert!(a.is_clean(), "{a:?}");
        assert_eq!(a.enqueues, 1);
    }

    #[test]
    fn double_issue_is_caught() {
        let mut t = lifecycle(0);
        t.insert(2, rec(TraceEvent::SqeIssued { dev: 0, sq: 0, sqe: 0 }));
        let a = audit_queues(&t);
        assert!(!a.exactly_once());
        assert_eq!(a.lifecycle_errors, 1);
    }

    #[test]
    fn cid_reuse_is_caught() {
        let mut t = lifecycle(3);
        t.insert(1, rec(TraceEvent::Enqueue { dev: 0, sq: 0, sqe: 3, cid: 3, write: true, blk: 2 }));
        assert_eq!(audit_queues(&t).cid_reuse, 1);
    }

    #[test]
    fn doorbell_must_move_forward_within_depth() {
        let t = [
            rec(TraceEvent::SqDoorbell { dev: 0, sq: 0, old: 0, new: 3, depth: 4 }),
            rec(TraceEvent::SqDoorbell { dev: 0, sq: 0, old: 3, new: 3, depth: 4 }),
            rec(TraceEvent::SqDoorbell { dev: 0, sq: 0, old: 3, new: 8, depth: 4 }),
            rec(TraceEvent::SqDoorbell { dev: 0, sq: 0, old: 5, new: 6, depth: 4 }),
        ];
        assert_eq!(audit_queues(&t).doorbell_errors, 3);
    }

    #[test]
    fn windows_must_be_aligned() {
        let t = [
            rec(TraceEvent::CqDoorbell { dev: 0, cq: 0, old: 0, new: 32, drain: false }),
            rec(TraceEvent::CqDoorbell { dev: 0, cq: 0, old: 32, new: 40, drain: false }),
            rec(TraceEvent::CqDoorbell { dev: 0, cq: 0, old: 40, new: 71, drain: true }),
        ];
        let a = audit_windows(&t);
        assert_eq!(a.steady_rings, 2);
        assert_eq!(a.misaligned, 1);
        assert_eq!(a.max_drain_residual, 31);
        assert_eq!(a.bad_drains, 0);
    }

    #[test]
    fn illegal_line_transition_is_counted() {
        let t = [
            rec(TraceEvent::LineState { line: 0, from: "INVALID", to: "BUSY", dev: 0, blk: 0 }),
            rec(TraceEvent::LineState { line: 0, from: "INVALID", to: "READY", dev: 0, blk: 0 }),
        ];
        let a = audit_lines(&t);
        assert_eq!((a.transitions, a.illegal), (2, 1));
    }
}
