//! Single-threaded wait primitives for simulated tasks.

use std::cell::{Cell, RefCell};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

/// A list of parked wakers.
#[derive(Default)]
pub struct WaitList {
    wakers: RefCell<Vec<Waker>>,
}

impl WaitList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, waker: &Waker) {
        let mut w = self.wakers.borrow_mut();
        if !w.iter().any(|x| x.will_wake(waker)) {
            w.push(waker.clone());
        }
    }

    pub fn wake_all(&self) {
        let wakers = std::mem::take(&mut *self.wakers.borrow_mut());
        for w in wakers {
            w.wake();
        }
    }

    pub fn len(&self) -> usize {
        self.wakers.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One-shot event: once set, every current and future waiter passes.
#[derive(Clone, Default)]
pub struct Flag {
    inner: Rc<FlagInner>,
}

#[derive(Default)]
struct FlagInner {
    set: Cell<bool>,
    waiters: WaitList,
}

impl Flag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self) {
        if !self.inner.set.replace(true) {
            self.inner.waiters.wake_all();
        }
    }

    pub fn is_set(&self) -> bool {
        self.inner.set.get()
    }

    pub fn wait(&self) -> FlagWait {
        FlagWait { flag: self.clone() }
    }
}

pub struct FlagWait {
    flag: Flag,
}

impl Future for FlagWait {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.flag.is_set() {
            Poll::Ready(())
        } else {
            self.flag.inner.waiters.register(cx.waker());
            Poll::Pending
        }
    }
}

/// Change notification. `notify` wakes everyone currently waiting; a task
/// that calls `notified` after a notify it has not observed yet returns at
/// once (generation counting, so no wakeup is lost between check and park).
#[derive(Clone, Default)]
pub struct Notify {
    inner: Rc<NotifyInner>,
}

#[derive(Default)]
struct NotifyInner {
    generation: Cell<u64>,
    waiters: WaitList,
}

impl Notify {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn generation(&self) -> u64 {
        self.inner.generation.get()
    }

    pub fn notify(&self) {
        self.inner.generation.set(self.inner.generation.get() + 1);
        self.inner.waiters.wake_all();
    }

    /// Wait until a notify happens after generation `seen`.
    pub fn changed_since(&self, seen: u64) -> Notified {
        Notified {
            notify: self.clone(),
            seen,
        }
    }

    /// Wait for the next notify.
    pub fn notified(&self) -> Notified {
        self.changed_since(self.generation())
    }

    pub fn waiter_count(&self) -> usize {
        self.inner.waiters.len()
    }
}

pub struct Notified {
    notify: Notify,
    seen: u64,
}

impl Future for Notified {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.notify.generation() != self.seen {
            Poll::Ready(())
        } else {
            self.notify.inner.waiters.register(cx.waker());
            Poll::Pending
        }
    }
}

/// Reusable N-party rendezvous. Every party contributes one value; the last
/// arrival runs `combine` over all contributions and every party receives the
/// shared result.
pub struct Rendezvous<T, R> {
    parties: usize,
    state: RefCell<RendezvousState<T, R>>,
    waiters: WaitList,
}

struct RendezvousState<T, R> {
    generation: u64,
    slots: Vec<Option<T>>,
    arrived: usize,
    last: Option<Rc<R>>,
}

impl<T, R> Rendezvous<T, R> {
    pub fn new(parties: usize) -> Self {
        assert!(parties > 0, "rendezvous needs at least one party");
        Rendezvous {
            parties,
            state: RefCell::new(RendezvousState {
                generation: 0,
                slots: (0..parties).map(|_| None).collect(),
                arrived: 0,
                last: None,
            }),
            waiters: WaitList::new(),
        }
    }

    pub fn parties(&self) -> usize {
        self.parties
    }

    pub async fn arrive(&self, party: usize, value: T, combine: impl FnOnce(Vec<T>) -> R) -> Rc<R> {
        let generation = {
            let mut st = self.state.borrow_mut();
            assert!(st.slots[party].is_none(), "party {party} arrived twice");
            st.slots[party] = Some(value);
            st.arrived += 1;
            if st.arrived == self.parties {
                let values = st.slots.iter_mut().map(|s| s.take().unwrap()).collect();
                let result = Rc::new(combine(values));
                st.last = Some(result.clone());
                st.arrived = 0;
                st.generation += 1;
                drop(st);
                self.waiters.wake_all();
                return result;
            }
            st.generation
        };
        RendezvousWait {
            rv: self,
            generation,
        }
        .await;
        self.state.borrow().last.clone().unwrap()
    }
}

struct RendezvousWait<'a, T, R> {
    rv: &'a Rendezvous<T, R>,
    generation: u64,
}

impl<T, R> Future for RendezvousWait<'_, T, R> {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.rv.state.borrow().generation != self.generation {
            Poll::Ready(())
        } else {
            self.rv.waiters.register(cx.waker());
            Poll::Pending
        }
    }
}
