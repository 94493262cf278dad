//! Structured event trace.
//!
//! Every record renders as one line: `<time_ns> <task_id> <module> <action> <details>`,
//! with `-` standing in for the task when an event fires outside any task.

use std::cell::RefCell;
use std::fmt::{self, Write as _};
use std::io;
use std::path::Path;

use super::{Nanos, TaskId, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    TaskSpawn { task: TaskId, kind: TaskKind, name: String },
    TaskExit { task: TaskId },
    Note { module: &'static str, text: String },

    SqeReserve { dev: u16, sq: u16, sqe: u16 },
    Enqueue { dev: u16, sq: u16, sqe: u16, cid: u16, write: bool, blk: u64 },
    SqeIssued { dev: u16, sq: u16, sqe: u16 },
    SqDoorbell { dev: u16, sq: u16, old: u64, new: u64, depth: u32 },
    SqeRelease { dev: u16, sq: u16, sqe: u16 },
    SqFull { dev: u16, sq: u16 },

    Fetch { dev: u16, sq: u16, sqe: u16, cid: u16, write: bool, blk: u64 },
    Dispatch { dev: u16, sq: u16, cid: u16, done_at: Nanos },
    CqePost { dev: u16, cq: u16, pos: u64, sq: u16, cid: u16, phase: u8 },
    CqStall { dev: u16, cq: u16, cid: u16 },
    Violation { module: &'static str, what: String },

    CqeProcessed { dev: u16, cq: u16, pos: u64, sq: u16, cid: u16 },
    CqDoorbell { dev: u16, cq: u16, old: u64, new: u64, drain: bool },
    BarrierDone { dev: u16, sq: u16, cid: u16, latency: Nanos },

    CacheAccess { dev: u16, blk: u64, line: usize, outcome: &'static str },
    LineState { line: usize, from: &'static str, to: &'static str, dev: u16, blk: u64 },

    ShareRegister { dev: u16, blk: u64, owner: TaskId },
    ShareJoin { dev: u16, blk: u64, refcount: u32 },
    ShareModified { dev: u16, blk: u64 },
    ShareRelease { dev: u16, blk: u64, refcount: u32 },
    SharePropagate { dev: u16, blk: u64 },
    ShareTransfer { dev: u16, blk: u64, from: TaskId, to: TaskId },

    Deadlock { task: TaskId, cycle: Vec<u64> },
}

impl TraceEvent {
    pub fn module(&self) -> &'static str {
        use TraceEvent::*;
        match self {
            TaskSpawn { .. } | TaskExit { .. } => "sim",
            Note { module, .. } | Violation { module, .. } => module,
            SqeReserve { .. } | Enqueue { .. } | SqeIssued { .. } | SqDoorbell { .. }
            | SqeRelease { .. } | SqFull { .. } => "nvme",
            Fetch { .. } | Dispatch { .. } | CqePost { .. } | CqStall { .. } => "ssd",
            CqeProcessed { .. } | CqDoorbell { .. } | BarrierDone { .. } => "service",
            CacheAccess { .. } | LineState { .. } => "cache",
            ShareRegister { .. } | ShareJoin { .. } | ShareModified { .. } | ShareRelease { .. }
            | SharePropagate { .. } | ShareTransfer { .. } => "share",
            Deadlock { .. } => "lock",
        }
    }

    pub fn action(&self) -> &'static str {
        use TraceEvent::*;
        match self {
            TaskSpawn { .. } => "spawn",
            TaskExit { .. } => "exit",
            Note { .. } => "note",
            Violation { .. } => "violation",
            SqeReserve { .. } => "reserve",
            Enqueue { .. } => "enqueue",
            SqeIssued { .. } => "issued",
            SqDoorbell { .. } => "sq_doorbell",
            SqeRelease { .. } => "release",
            SqFull { .. } => "full",
            Fetch { .. } => "fetch",
            Dispatch { .. } => "dispatch",
            CqePost { .. } => "cqe_post",
            CqStall { .. } => "cq_stall",
            CqeProcessed { .. } => "cqe",
            CqDoorbell { .. } => "cq_doorbell",
            BarrierDone { .. } => "barrier_done",
            CacheAccess { .. } => "access",
            LineState { .. } => "line",
            ShareRegister { .. } => "register",
            ShareJoin { .. } => "join",
            ShareModified { .. } => "modified",
            ShareRelease { .. } => "release",
            SharePropagate { .. } => "propagate",
            ShareTransfer { .. } => "transfer",
            Deadlock { .. } => "DEADLOCK",
        }
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use TraceEvent::*;
        let op = |w: bool| if w { "WRITE" } else { "READ" };
        match self {
            TaskSpawn { task, kind, name } => write!(f, "task={task} kind={kind:?} name={name}"),
            TaskExit { task } => write!(f, "task={task}"),
            Note { text, .. } => write!(f, "{text}"),
            Violation { what, .. } => write!(f, "{what}"),
            SqeReserve { dev, sq, sqe } => write!(f, "dev={dev} sq={sq} sqe={sqe}"),
            Enqueue { dev, sq, sqe, cid, write, blk } => {
                write!(f, "dev={dev} sq={sq} sqe={sqe} cid={cid} op={} blk={blk}", op(*write))
            }
            SqeIssued { dev, sq, sqe } => write!(f, "dev={dev} sq={sq} sqe={sqe}"),
            SqDoorbell { dev, sq, old, new, depth } => write!(
                f,
                "dev={dev} sq={sq} tail={} published={}..{}",
                new % *depth as u64,
                old,
                new
            ),
            SqeRelease { dev, sq, sqe } => write!(f, "dev={dev} sq={sq} sqe={sqe}"),
            SqFull { dev, sq } => write!(f, "dev={dev} sq={sq}"),
            Fetch { dev, sq, sqe, cid, write, blk } => {
                write!(f, "dev={dev} sq={sq} sqe={sqe} cid={cid} op={} blk={blk}", op(*write))
            }
            Dispatch { dev, sq, cid, done_at } => {
                write!(f, "dev={dev} sq={sq} cid={cid} done_at={done_at}")
            }
            CqePost { dev, cq, pos, sq, cid, phase } => {
                write!(f, "dev={dev} cq={cq} pos={pos} sq={sq} cid={cid} phase={phase}")
            }
            CqStall { dev, cq, cid } => write!(f, "dev={dev} cq={cq} cid={cid}"),
            CqeProcessed { dev, cq, pos, sq, cid } => {
                write!(f, "dev={dev} cq={cq} pos={pos} sq={sq} cid={cid}")
            }
            CqDoorbell { dev, cq, old, new, drain } => write!(
                f,
                "dev={dev} cq={cq} head={old}->{new}{}",
                if *drain { " drain" } else { "" }
            ),
            BarrierDone { dev, sq, cid, latency } => {
                write!(f, "dev={dev} sq={sq} cid={cid} latency={latency}")
            }
            CacheAccess { dev, blk, line, outcome } => {
                write!(f, "dev={dev} blk={blk} line={line} {outcome}")
            }
            LineState { line, from, to, dev, blk } => {
                write!(f, "line={line} {from}->{to} dev={dev} blk={blk}")
            }
            ShareRegister { dev, blk, owner } => write!(f, "dev={dev} blk={blk} owner={owner}"),
            ShareJoin { dev, blk, refcount } => write!(f, "dev={dev} blk={blk} refcount={refcount}"),
            ShareModified { dev, blk } => write!(f, "dev={dev} blk={blk}"),
            ShareRelease { dev, blk, refcount } => {
                write!(f, "dev={dev} blk={blk} refcount={refcount}")
            }
            SharePropagate { dev, blk } => write!(f, "dev={dev} blk={blk}"),
            ShareTransfer { dev, blk, from, to } => {
                write!(f, "dev={dev} blk={blk} writeback_duty {from}->{to}")
            }
            Deadlock { task, cycle } => {
                write!(f, "task {task} cycle ")?;
                for (i, l) in cycle.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" -> ")?;
                    }
                    write!(f, "L{l}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: Nanos,
    pub task: Option<TaskId>,
    pub event: TraceEvent,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ", self.time)?;
        match self.task {
            Some(t) => write!(f, "{t}")?,
            None => f.write_str("-")?,
        }
        write!(f, " {} {} {}", self.event.module(), self.event.action(), self.event)
    }
}

pub struct Trace {
    enabled: bool,
    records: RefCell<Vec<TraceRecord>>,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Trace {
            enabled,
            records: RefCell::new(Vec::new()),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&self, time: Nanos, task: Option<TaskId>, event: TraceEvent) {
        // Deadlock reports and violations are kept even with tracing off.
        let always = matches!(event, TraceEvent::Deadlock { .. } | TraceEvent::Violation { .. });
        if self.enabled || always {
            self.records.borrow_mut().push(TraceRecord { time, task, event });
        }
    }

    pub fn records(&self) -> std::cell::Ref<'_, Vec<TraceRecord>> {
        self.records.borrow()
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in self.records.borrow().iter() {
            let _ = writeln!(out, "{r}");
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.render())
    }
}
