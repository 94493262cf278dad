//! Deterministic discrete-event substrate.
//!
//! Simulated GPU threads, service warps and SSD engines are ordinary Rust
//! futures driven by a single-threaded executor on a virtual clock. Timed
//! events live in a min-heap keyed by `(fire_at, tie, seq)`; with
//! [`TieBreak::Fifo`] the tie key is the scheduling sequence number, so events
//! scheduled for the same instant fire in scheduling order.

mod sync;
mod trace;

pub use sync::{Flag, Notify, Rendezvous, WaitList};
pub use trace::{Trace, TraceEvent, TraceRecord};

use std::cell::{Cell, RefCell};
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Simulated nanoseconds.
pub type Nanos = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    UserThread,
    ServiceWarp,
    SsdEngine,
    Host,
}

impl TaskKind {
    pub fn is_daemon(self) -> bool {
        matches!(self, TaskKind::ServiceWarp | TaskKind::SsdEngine)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Runnable,
    Blocked,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    /// Equal timestamps fire in scheduling order; ready tasks run FIFO.
    #[default]
    Fifo,
    /// Seeded random order among equal timestamps and among ready tasks.
    Random,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub tie_break: TieBreak,
    /// Maximum number of events processed without any progress mark before
    /// the run is declared a livelock.
    pub livelock_budget: u64,
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            tie_break: TieBreak::Fifo,
            livelock_budget: 2_000_000,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// No runnable task and no pending event.
    Quiescent,
    /// The next event lies beyond the time limit.
    TimeLimit,
    /// The livelock budget ran out.
    Livelock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimStats {
    pub final_clock: Nanos,
    pub events: u64,
    pub tasks_finished: usize,
    /// Non-daemon tasks that never finished.
    pub tasks_blocked: usize,
    /// Daemon tasks (service warps, SSD engines) still alive.
    pub daemons_alive: usize,
    pub stop: StopReason,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("livelock suspected: {events_since_progress} events without progress at t={}ns", stats.final_clock)]
    LivelockSuspected {
        events_since_progress: u64,
        stats: SimStats,
    },
}

impl SimError {
    pub fn stats(&self) -> &SimStats {
        match self {
            SimError::LivelockSuspected { stats, .. } => stats,
        }
    }
}

type LocalFuture = Pin<Box<dyn Future<Output = ()>>>;

struct TaskSlot {
    name: String,
    kind: TaskKind,
    state: TaskState,
    future: Option<LocalFuture>,
    waker: Arc<TaskWaker>,
    done: Flag,
}

struct TaskWaker {
    id: TaskId,
    queued: AtomicBool,
    ready: Arc<Mutex<VecDeque<TaskId>>>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        if !self.queued.swap(true, Ordering::AcqRel) {
            self.ready.lock().unwrap().push_back(self.id);
        }
    }
}

struct Scheduled {
    fire_at: Nanos,
    tie: u64,
    seq: u64,
    action: Box<dyn FnOnce()>,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // BinaryHeap is a max-heap; reverse to pop the earliest event.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.key().cmp(&self.key())
    }
}
impl Scheduled {
    fn key(&self) -> (Nanos, u64, u64) {
        (self.fire_at, self.tie, self.seq)
    }
}

struct Inner {
    cfg: SimConfig,
    now: Cell<Nanos>,
    next_seq: Cell<u64>,
    events: RefCell<BinaryHeap<Scheduled>>,
    ready: Arc<Mutex<VecDeque<TaskId>>>,
    tasks: RefCell<Vec<TaskSlot>>,
    current: Cell<Option<TaskId>>,
    rng: RefCell<ChaCha8Rng>,
    processed: Cell<u64>,
    since_progress: Cell<u64>,
    trace: Trace,
}

/// Handle to the simulator. Cheap to clone; all clones share one world.
#[derive(Clone)]
pub struct Sim {
    inner: Rc<Inner>,
}

impl fmt::Debug for Sim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sim")
            .field("now", &self.now())
            .field("tasks", &self.inner.tasks.borrow().len())
            .finish()
    }
}

impl Sim {
    pub fn new(cfg: SimConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let trace = Trace::new(cfg.trace);
        Sim {
            inner: Rc::new(Inner {
                cfg,
                now: Cell::new(0),
                next_seq: Cell::new(0),
                events: RefCell::new(BinaryHeap::new()),
                ready: Arc::new(Mutex::new(VecDeque::new())),
                tasks: RefCell::new(Vec::new()),
                current: Cell::new(None),
                rng: RefCell::new(rng),
                processed: Cell::new(0),
                since_progress: Cell::new(0),
                trace,
            }),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.inner.cfg
    }

    pub fn now(&self) -> Nanos {
        self.inner.now.get()
    }

    /// Task currently being polled, if any.
    pub fn current_task(&self) -> Option<TaskId> {
        self.inner.current.get()
    }

    /// Run `action` at `now + delay_ns`.
    pub fn schedule(&self, delay_ns: Nanos, action: impl FnOnce() + 'static) -> EventId {
        let seq = self.inner.next_seq.get();
        self.inner.next_seq.set(seq + 1);
        let tie = match self.inner.cfg.tie_break {
            TieBreak::Fifo => seq,
            TieBreak::Random => self.inner.rng.borrow_mut().random(),
        };
        self.inner.events.borrow_mut().push(Scheduled {
            fire_at: self.now() + delay_ns,
            tie,
            seq,
            action: Box::new(action),
        });
        EventId(seq)
    }

    pub fn spawn<F>(&self, kind: TaskKind, name: impl Into<String>, fut: F) -> TaskHandle
    where
        F: Future<Output = ()> + 'static,
    {
        let mut tasks = self.inner.tasks.borrow_mut();
        let id = TaskId(tasks.len() as u32);
        let waker = Arc::new(TaskWaker {
            id,
            queued: AtomicBool::new(false),
            ready: self.inner.ready.clone(),
        });
        let done = Flag::new();
        let name = name.into();
        self.inner.trace.record(
            self.now(),
            self.current_task(),
            TraceEvent::TaskSpawn {
                task: id,
                kind,
                name: name.clone(),
            },
        );
        tasks.push(TaskSlot {
            name,
            kind,
            state: TaskState::Runnable,
            future: Some(Box::pin(fut)),
            waker: waker.clone(),
            done: done.clone(),
        });
        drop(tasks);
        waker.wake_by_ref();
        TaskHandle { id, done }
    }

    pub fn task_state(&self, id: TaskId) -> TaskState {
        self.inner.tasks.borrow()[id.0 as usize].state
    }

    pub fn task_kind(&self, id: TaskId) -> TaskKind {
        self.inner.tasks.borrow()[id.0 as usize].kind
    }

    pub fn task_name(&self, id: TaskId) -> String {
        self.inner.tasks.borrow()[id.0 as usize].name.clone()
    }

    pub fn task_count(&self) -> usize {
        self.inner.tasks.borrow().len()
    }

    /// Mark forward progress; resets the livelock counter.
    pub fn progress(&self) {
        self.inner.since_progress.set(0);
    }

    /// Seeded randomness shared by the whole run.
    pub fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        f(&mut self.inner.rng.borrow_mut())
    }

    pub fn trace(&self) -> &Trace {
        &self.inner.trace
    }

    pub fn emit(&self, event: TraceEvent) {
        self.inner
            .trace
            .record(self.now(), self.current_task(), event);
    }

    pub fn sleep(&self, delay_ns: Nanos) -> Sleep {
        Sleep {
            sim: self.clone(),
            delay_ns,
            fired: None,
        }
    }

    /// Give other ready tasks a turn without advancing the clock.
    pub fn yield_now(&self) -> YieldNow {
        YieldNow { yielded: false }
    }

    fn pop_ready(&self) -> Option<TaskId> {
        let mut ready = self.inner.ready.lock().unwrap();
        if ready.is_empty() {
            return None;
        }
        match self.inner.cfg.tie_break {
            TieBreak::Fifo => ready.pop_front(),
            TieBreak::Random => {
                let i = self.inner.rng.borrow_mut().random_range(0..ready.len());
                ready.remove(i)
            }
        }
    }

    fn poll_task(&self, id: TaskId) {
        let (mut fut, waker) = {
            let mut tasks = self.inner.tasks.borrow_mut();
            let slot = &mut tasks[id.0 as usize];
            slot.waker.queued.store(false, Ordering::Release);
            match slot.future.take() {
                Some(f) => {
                    slot.state = TaskState::Runnable;
                    (f, slot.waker.clone())
                }
                None => return,
            }
        };
        let waker = Waker::from(waker);
        let mut cx = Context::from_waker(&waker);
        self.inner.current.set(Some(id));
        let res = fut.as_mut().poll(&mut cx);
        self.inner.current.set(None);
        let mut tasks = self.inner.tasks.borrow_mut();
        let slot = &mut tasks[id.0 as usize];
        match res {
            Poll::Ready(()) => {
                slot.state = TaskState::Finished;
                let done = slot.done.clone();
                drop(tasks);
                self.inner
                    .trace
                    .record(self.now(), Some(id), TraceEvent::TaskExit { task: id });
                done.set();
                self.progress();
            }
            Poll::Pending => {
                slot.future = Some(fut);
                if !slot.waker.queued.load(Ordering::Acquire) {
                    slot.state = TaskState::Blocked;
                }
            }
        }
    }

    fn tick(&self) -> Result<(), SimError> {
        self.inner.processed.set(self.inner.processed.get() + 1);
        let since = self.inner.since_progress.get() + 1;
        self.inner.since_progress.set(since);
        if since > self.inner.cfg.livelock_budget {
            return Err(SimError::LivelockSuspected {
                events_since_progress: since,
                stats: self.stats(StopReason::Livelock),
            });
        }
        Ok(())
    }

    /// Drive the world until nothing is runnable and no event is pending, or
    /// until the next event would fire after `limit_ns`.
    pub fn run_until_quiescent(&self, limit_ns: Nanos) -> Result<SimStats, SimError> {
        loop {
            if let Some(id) = self.pop_ready() {
                self.poll_task(id);
                self.tick()?;
                continue;
            }
            let next = self.inner.events.borrow_mut().pop();
            match next {
                None => return Ok(self.stats(StopReason::Quiescent)),
                Some(ev) if ev.fire_at > limit_ns => {
                    self.inner.events.borrow_mut().push(ev);
                    self.inner.now.set(self.now().max(limit_ns));
                    return Ok(self.stats(StopReason::TimeLimit));
                }
                Some(ev) => {
                    debug_assert!(ev.fire_at >= self.now());
                    self.inner.now.set(ev.fire_at);
                    (ev.action)();
                    self.tick()?;
                }
            }
        }
    }

    pub fn stats(&self, stop: StopReason) -> SimStats {
        let tasks = self.inner.tasks.borrow();
        let mut finished = 0;
        let mut blocked = 0;
        let mut daemons = 0;
        for t in tasks.iter() {
            match (t.state, t.kind.is_daemon()) {
                (TaskState::Finished, _) => finished += 1,
                (_, true) => daemons += 1,
                (_, false) => blocked += 1,
            }
        }
        SimStats {
            final_clock: self.now(),
            events: self.inner.processed.get(),
            tasks_finished: finished,
            tasks_blocked: blocked,
            daemons_alive: daemons,
            stop,
        }
    }
}

/// Completion handle of a spawned task.
#[derive(Clone)]
pub struct TaskHandle {
    pub id: TaskId,
    done: Flag,
}

impl TaskHandle {
    pub fn is_finished(&self) -> bool {
        self.done.is_set()
    }

    pub async fn join(&self) {
        self.done.wait().await
    }
}

pub struct Sleep {
    sim: Sim,
    delay_ns: Nanos,
    fired: Option<Rc<Cell<bool>>>,
}

impl Future for Sleep {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        match &self.fired {
            Some(f) if f.get() => Poll::Ready(()),
            Some(_) => Poll::Pending,
            None => {
                let fired = Rc::new(Cell::new(false));
                let f2 = fired.clone();
                let waker = cx.waker().clone();
                self.sim.schedule(self.delay_ns, move || {
                    f2.set(true);
                    waker.wake();
                });
                self.fired = Some(fired);
                Poll::Pending
            }
        }
    }
}

pub struct YieldNow {
    yielded: bool,
}

impl Future for YieldNow {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.yielded {
            Poll::Ready(())
        } else {
            self.yielded = true;
            cx.waker().wake_by_ref();
            Poll::Pending
        }
    }
}
