//! Shared-queue deadlock demonstration.
//!
//! Naive mode models issuers that keep their SQE lock until they have
//! personally consumed their own completion, with all lanes of one warp
//! serialized on a lockstep execution token: a lane spinning on a full
//! queue holds the token, and the lane owning the queue's only entry needs
//! the token to poll. Agile mode runs the same requests through the
//! controller, where SQE locks are handed to the service and issuers wait
//! on barriers holding nothing.

use std::cell::Cell;
use std::rc::Rc;

use crate::bench::{BenchError, Csv, Outcome};
use crate::config::{AgileConfig, ConfigError, KvDoc};
use crate::host::AgileHost;
use crate::lock_chain::{AgileLock, LockChain, LockDetector, LockError};
use crate::nvme::{phase_for, DmaBuf, NvmeCommand, Opcode, QueuePair, SqdbStatus};
use crate::sim::{Nanos, Sim, StopReason, TaskKind, TraceEvent};
use crate::ssd::SsdDevice;
use crate::BlockKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemoMode {
    Naive,
    Agile,
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeadlockParams {
    pub mode: DemoMode,
    pub threads: usize,
    pub commands_per_thread: usize,
    /// Submission queue depth; `None` uses the base configuration's.
    pub depth: Option<u32>,
    /// Delay between spin attempts of naive issuers.
    pub spin_ns: Nanos,
    /// Livelock budget for naive runs.
    pub naive_budget: u64,
}

impl Default for DeadlockParams {
    fn default() -> Self {
        DeadlockParams {
            mode: DemoMode::Both,
            threads: 4,
            commands_per_thread: 1,
            depth: None,
            spin_ns: 100,
            naive_budget: 200_000,
        }
    }
}

impl DeadlockParams {
    pub fn from_doc(doc: &KvDoc) -> Result<Self, ConfigError> {
        let d = DeadlockParams::default();
        let mode = match doc.get::<String>("mode")?.as_deref() {
            None | Some("both") => DemoMode::Both,
            Some("naive") => DemoMode::Naive,
            Some("agile") => DemoMode::Agile,
            Some(m) => {
                return Err(ConfigError::Value {
                    key: "mode".into(),
                    msg: format!("`{m}` is not naive|agile|both"),
                })
            }
        };
        Ok(DeadlockParams {
            mode,
            threads: doc.get_or("threads", d.threads)?,
            commands_per_thread: doc.get_or("commands_per_thread", d.commands_per_thread)?,
            depth: None,
            spin_ns: doc.get_or("spin_ns", d.spin_ns)?,
            naive_budget: doc.get_or("naive_budget", d.naive_budget)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoReport {
    pub mode: &'static str,
    pub depth: u32,
    pub threads: usize,
    pub commands: usize,
    pub completed: usize,
    /// User tasks that never finished.
    pub blocked: usize,
    pub cycles: Vec<String>,
    pub stop: StopReason,
    pub elapsed_ns: Nanos,
}

impl DemoReport {
    pub fn deadlocked(&self) -> bool {
        self.blocked > 0 || !self.cycles.is_empty()
    }
}

struct Naive {
    sim: Sim,
    locks: LockDetector,
    qp: Rc<Vec<QueuePair>>,
    dev: Rc<SsdDevice>,
    token: AgileLock,
    sqe_locks: Vec<AgileLock>,
    spin_ns: Nanos,
    completed: Cell<usize>,
}

/// How a spin-acquire ended.
enum Spin {
    Got,
    Deadlock,
}

impl Naive {
    async fn spin_acquire(&self, lock: &AgileLock, chain: &LockChain) -> Spin {
        loop {
            match self.locks.try_acquire(lock, chain) {
                Ok(()) => return Spin::Got,
                Err(LockError::WouldDeadlock(_)) => return Spin::Deadlock,
                Err(_) => self.sim.sleep(self.spin_ns).await,
            }
        }
    }

    /// Returns false if the task ran into a reported cycle.
    async fn command(&self, chain: &LockChain, blk: u64) -> bool {
        let sq = &self.qp[0].sq;
        let cq = &self.qp[0].cq;
        if let Spin::Deadlock = self.spin_acquire(&self.token, chain).await {
            return false;
        }
        // Spin on the full queue while holding the lockstep token.
        let pos = loop {
            if let Some(p) = sq.try_reserve() {
                self.locks.clear_wait(chain.task());
                break p;
            }
            let head = &self.sqe_locks[sq.slot_of(sq.head()) as usize];
            match self.locks.try_acquire(head, chain) {
                Ok(()) => {
                    let _ = self.locks.release(head, chain);
                }
                Err(LockError::WouldDeadlock(_)) => return false,
                Err(_) => {}
            }
            self.sim.sleep(self.spin_ns).await;
        };
        let sqe = sq.slot_of(pos);
        let lock = &self.sqe_locks[sqe as usize];
        if self.locks.try_acquire(lock, chain).is_err() {
            return false;
        }
        let cmd = NvmeCommand {
            opcode: Opcode::Read,
            cid: 0,
            key: BlockKey::new(0, blk),
            dest: DmaBuf::zeroed(self.dev.block_size()),
            len: self.dev.block_size() as u32,
        };
        if sq.write_entry(pos, cmd).is_err() {
            return false;
        }
        loop {
            let (st, published) = sq.attempt_sqdb(pos);
            if let Some(p) = published {
                self.dev.ring_sq_doorbell(0, p);
            }
            if st == SqdbStatus::Success {
                break;
            }
            self.sim.sleep(self.spin_ns).await;
        }
        let _ = self.locks.release(&self.token, chain);
        // Poll for our own completion, one token-holding attempt at a time.
        loop {
            if let Spin::Deadlock = self.spin_acquire(&self.token, chain).await {
                return false;
            }
            let head = cq.head_doorbell();
            let mine = cq
                .load(head, phase_for(head, cq.depth()))
                .filter(|c| c.cid == sqe);
            if mine.is_some() {
                cq.ring_head(head + 1);
                self.dev.ring_cq_doorbell(0);
                let _ = sq.release_sqe(sqe);
                let _ = self.locks.release(lock, chain);
                let _ = self.locks.release(&self.token, chain);
                self.completed.set(self.completed.get() + 1);
                self.sim.progress();
                return true;
            }
            let _ = self.locks.release(&self.token, chain);
            self.sim.sleep(self.spin_ns).await;
        }
    }
}

pub fn run_naive(base: &AgileConfig, p: &DeadlockParams, out: &mut Outcome) -> Result<DemoReport, BenchError> {
    let depth = p.depth.unwrap_or(base.queue_depth);
    let mut simcfg = base.sim.clone();
    simcfg.livelock_budget = simcfg.livelock_budget.min(p.naive_budget);
    let sim = Sim::new(simcfg);
    let locks = LockDetector::new(sim.clone(), true);
    let qp = Rc::new(vec![QueuePair::new(0, depth)?]);
    let dev = SsdDevice::new(sim.clone(), 0, base.devices[0].clone(), qp.clone())?;
    let engine = dev.start();
    let token = locks.new_lock("warp0.lockstep");
    let sqe_locks = (0..depth).map(|s| locks.new_lock(format!("sq0.sqe{s}"))).collect();
    let naive = Rc::new(Naive {
        sim: sim.clone(),
        locks,
        qp,
        dev: dev.clone(),
        token,
        sqe_locks,
        spin_ns: p.spin_ns,
        completed: Cell::new(0),
    });
    let mut handles = Vec::new();
    for i in 0..p.threads {
        let (n, cmds) = (naive.clone(), p.commands_per_thread);
        handles.push(sim.spawn(TaskKind::UserThread, format!("naive{i}"), async move {
            let chain = LockChain::new(n.sim.current_task().expect("task"));
            for c in 0..cmds {
                if !n.command(&chain, (i * cmds + c) as u64).await {
                    n.sim.emit(TraceEvent::Note {
                        module: "bench",
                        text: format!("naive{i} stuck holding {:?}", chain.held()),
                    });
                    std::future::pending::<()>().await;
                }
            }
        }));
    }
    let watch = handles.clone();
    {
        let dev = dev.clone();
        sim.spawn(TaskKind::Host, "host", async move {
            for h in &handles {
                h.join().await;
            }
            dev.stop();
            engine.join().await;
        });
    }
    let stats = match sim.run_until_quiescent(base.time_limit_ns) {
        Ok(s) => s,
        Err(e) => e.stats().clone(),
    };
    let mut cycles: Vec<String> = naive.locks.reports().iter().map(|r| naive.locks.describe(r)).collect();
    cycles.sort();
    if sim.trace().is_enabled() {
        out.trace.push_str(&format!("# run naive depth={depth}\n"));
        out.trace.push_str(&sim.trace().render());
    }
    let blocked = watch.iter().filter(|h| !h.is_finished()).count();
    Ok(DemoReport {
        mode: "naive",
        depth,
        threads: p.threads,
        commands: p.threads * p.commands_per_thread,
        completed: naive.completed.get(),
        blocked,
        cycles,
        stop: stats.stop,
        elapsed_ns: stats.final_clock,
    })
}

pub fn run_agile(base: &AgileConfig, p: &DeadlockParams, out: &mut Outcome) -> Result<DemoReport, BenchError> {
    let mut cfg = base.clone();
    if let Some(d) = p.depth {
        cfg.queue_depth = d;
    }
    let depth = cfg.queue_depth;
    let host = AgileHost::new(cfg)?;
    let done = Rc::new(Cell::new(0usize));
    let (d2, cmds) = (done.clone(), p.commands_per_thread);
    let report = host.run_kernel(p.threads, move |mut t| {
        let done = d2.clone();
        async move {
            let buf = t.new_buf();
            for c in 0..cmds {
                t.raw_read(0, (t.index() * cmds + c) as u64, &buf).await?;
                t.wait(&buf).await?;
                done.set(done.get() + 1);
            }
            t.finish()
        }
    })?;
    out.absorb(&format!("agile depth={depth}"), &host, &report);
    let mut cycles: Vec<String> = report.deadlocks.iter().map(|r| host.ctrl().locks().describe(r)).collect();
    cycles.sort();
    Ok(DemoReport {
        mode: "agile",
        depth,
        threads: p.threads,
        commands: p.threads * p.commands_per_thread,
        completed: done.get(),
        blocked: report.unfinished,
        cycles,
        stop: report.sim.stop,
        elapsed_ns: report.kernel_ns(),
    })
}

pub fn run(base: &AgileConfig, p: &DeadlockParams) -> Result<Outcome, BenchError> {
    let mut out = Outcome::default();
    let mut reports = Vec::new();
    if matches!(p.mode, DemoMode::Naive | DemoMode::Both) {
        reports.push(run_naive(base, p, &mut out)?);
    }
    if matches!(p.mode, DemoMode::Agile | DemoMode::Both) {
        reports.push(run_agile(base, p, &mut out)?);
    }
    let mut csv = Csv::new(&[
        "mode", "depth", "threads", "commands", "completed", "blocked", "deadlock", "cycles",
    ]);
    for r in &reports {
        csv.push(vec![
            r.mode.into(),
            r.depth.to_string(),
            r.threads.to_string(),
            r.commands.to_string(),
            r.completed.to_string(),
            r.blocked.to_string(),
            r.deadlocked().to_string(),
            r.cycles.join(" | "),
        ]);
        let verdict = if r.deadlocked() { "DEADLOCK" } else { "completed" };
        out.summary.push(format!(
            "{}: depth {} -> {verdict}, {}/{} commands done, {} blocked",
            r.mode, r.depth, r.completed, r.commands, r.blocked
        ));
        for c in &r.cycles {
            out.summary.push(format!("  {c}"));
        }
        match r.mode {
            "naive" if r.deadlocked() => out.flagged = true,
            "agile" if r.deadlocked() => out.agile_deadlock = true,
            _ => {}
        }
    }
    out.csv = Some(csv);
    Ok(out)
}
