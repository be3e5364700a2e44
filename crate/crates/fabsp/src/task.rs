//! Cooperative task scheduling for one PE.
//!
//! Each PE drives a single-threaded [`Executor`]: tasks are plain futures on
//! a FIFO run queue, so scheduling within a PE is reproducible. Tasks never
//! migrate across PEs; anything shared between tasks of one PE can use
//! `Rc`/`RefCell`. Blocking always happens through runtime primitives:
//! [`yield_now`] requeues the current task, [`SignalSlot::wait`] parks it
//! until the slot is filled, and [`finish`] parks it until every task spawned
//! under the scope (transitively) has completed.

use std::cell::{Cell, RefCell};
use std::collections::VecDeque;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use thiserror::Error;

type TaskId = usize;
type LocalFuture = Pin<Box<dyn Future<Output = ()> + 'static>>;

/// Identifier handed back by [`spawn`]; useful only for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskHandle {
    id: TaskId,
}

impl TaskHandle {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Filling an already-filled [`SignalSlot`] violates single assignment.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("signal slot already filled")]
pub struct SlotFilled;

// The run queue is shared with wakers, which the Waker contract requires to
// be Send + Sync even though every wake here happens on the owning thread.
struct ReadyQueue {
    queue: Mutex<VecDeque<TaskId>>,
}

impl ReadyQueue {
    fn push(&self, id: TaskId) {
        self.queue.lock().unwrap().push_back(id);
    }

    fn pop(&self) -> Option<TaskId> {
        self.queue.lock().unwrap().pop_front()
    }
}

struct TaskWaker {
    id: TaskId,
    ready: Arc<ReadyQueue>,
    queued: AtomicBool,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        if !self.queued.swap(true, Ordering::AcqRel) {
            self.ready.push(self.id);
        }
    }
}

struct ScopeInner {
    pending: Cell<usize>,
    closed: Cell<bool>,
    waiters: RefCell<Vec<Waker>>,
}

impl ScopeInner {
    fn charge(&self) {
        assert!(
            !self.closed.get(),
            "spawn into a closed finish scope (the finish already returned)"
        );
        self.pending.set(self.pending.get() + 1);
    }

    fn complete_one(&self) {
        let left = self.pending.get() - 1;
        self.pending.set(left);
        if left == 0 {
            for w in self.waiters.borrow_mut().drain(..) {
                w.wake();
            }
        }
    }
}

/// Handle to a finish scope; tasks spawned through it are awaited by the
/// enclosing [`finish`] before it returns.
#[derive(Clone)]
pub struct FinishScope {
    inner: Rc<ScopeInner>,
}

impl FinishScope {
    /// Number of charged tasks that have not completed yet.
    pub fn pending(&self) -> usize {
        self.inner.pending.get()
    }

    /// Spawns a task charged to this scope regardless of the ambient scope.
    pub fn spawn<F: Future<Output = ()> + 'static>(&self, fut: F) -> TaskHandle {
        self.inner.charge();
        ExecInner::with(|exec| exec.insert_task(Box::pin(fut), Some(self.inner.clone())))
    }
}

struct TaskSlot {
    future: Option<LocalFuture>,
    waker_state: Arc<TaskWaker>,
    waker: Waker,
    // Scope this task counts toward; inherited by its ambient spawns.
    scope: Option<Rc<ScopeInner>>,
    // Finish scopes entered by this task and not yet exited, innermost last.
    entered: Vec<Rc<ScopeInner>>,
}

struct ExecInner {
    label: String,
    tasks: RefCell<Vec<Option<TaskSlot>>>,
    free: RefCell<Vec<TaskId>>,
    ready: Arc<ReadyQueue>,
    live: Cell<usize>,
    current: Cell<Option<TaskId>>,
    steps: Cell<u64>,
    step_limit: Cell<Option<u64>>,
}

thread_local! {
    static CURRENT: RefCell<Option<Rc<ExecInner>>> = const { RefCell::new(None) };
}

impl ExecInner {
    fn with<R>(f: impl FnOnce(&Rc<ExecInner>) -> R) -> R {
        CURRENT.with(|c| {
            let cur = c.borrow();
            let exec = cur
                .as_ref()
                .expect("task operation outside a running scheduler");
            f(exec)
        })
    }

    fn insert_task(self: &Rc<Self>, fut: LocalFuture, scope: Option<Rc<ScopeInner>>) -> TaskHandle {
        let id = self.free.borrow_mut().pop().unwrap_or_else(|| {
            let mut tasks = self.tasks.borrow_mut();
            tasks.push(None);
            tasks.len() - 1
        });
        let waker_state = Arc::new(TaskWaker {
            id,
            ready: self.ready.clone(),
            queued: AtomicBool::new(true),
        });
        let waker = Waker::from(waker_state.clone());
        self.tasks.borrow_mut()[id] = Some(TaskSlot {
            future: Some(fut),
            waker_state,
            waker,
            scope,
            entered: Vec::new(),
        });
        self.live.set(self.live.get() + 1);
        self.ready.push(id);
        TaskHandle { id }
    }

    // Scope new ambient spawns from the current task are charged to.
    fn current_charge(&self) -> Option<Rc<ScopeInner>> {
        let id = self.current.get().expect("spawn outside a task");
        let tasks = self.tasks.borrow();
        let slot = tasks[id].as_ref().unwrap();
        slot.entered.last().cloned().or_else(|| slot.scope.clone())
    }

    fn with_current_slot<R>(&self, f: impl FnOnce(&mut TaskSlot) -> R) -> R {
        let id = self.current.get().expect("finish scope outside a task");
        let mut tasks = self.tasks.borrow_mut();
        f(tasks[id].as_mut().unwrap())
    }

    fn run_until_empty(self: &Rc<Self>) {
        while self.live.get() > 0 {
            let Some(id) = self.ready.pop() else {
                panic!(
                    "{}: scheduler stalled: {} tasks alive but none runnable (deadlock)",
                    self.label,
                    self.live.get()
                );
            };
            let (mut fut, waker) = {
                let mut tasks = self.tasks.borrow_mut();
                let Some(slot) = tasks[id].as_mut() else {
                    continue; // stale wake for a completed task
                };
                slot.waker_state.queued.store(false, Ordering::Release);
                let Some(fut) = slot.future.take() else {
                    continue; // spurious duplicate entry
                };
                (fut, slot.waker.clone())
            };

            let steps = self.steps.get() + 1;
            self.steps.set(steps);
            if let Some(limit) = self.step_limit.get() {
                assert!(
                    steps <= limit,
                    "{}: step watchdog exceeded after {} task polls",
                    self.label,
                    steps
                );
            }

            self.current.set(Some(id));
            let poll = fut.as_mut().poll(&mut Context::from_waker(&waker));
            self.current.set(None);

            match poll {
                Poll::Ready(()) => {
                    let slot = self.tasks.borrow_mut()[id].take().unwrap();
                    self.free.borrow_mut().push(id);
                    self.live.set(self.live.get() - 1);
                    if let Some(scope) = slot.scope {
                        scope.complete_one();
                    }
                }
                Poll::Pending => {
                    let mut tasks = self.tasks.borrow_mut();
                    tasks[id].as_mut().unwrap().future = Some(fut);
                }
            }
        }
    }
}

/// A single-threaded cooperative scheduler; one per PE.
pub struct Executor {
    inner: Rc<ExecInner>,
}

impl Executor {
    pub fn new(label: impl Into<String>) -> Self {
        Executor {
            inner: Rc::new(ExecInner {
                label: label.into(),
                tasks: RefCell::new(Vec::new()),
                free: RefCell::new(Vec::new()),
                ready: Arc::new(ReadyQueue {
                    queue: Mutex::new(VecDeque::new()),
                }),
                live: Cell::new(0),
                current: Cell::new(None),
                steps: Cell::new(0),
                step_limit: Cell::new(None),
            }),
        }
    }

    /// Aborts the run with a diagnostic once the scheduler has polled tasks
    /// this many times; a watchdog for tests that must terminate.
    pub fn set_step_limit(&self, limit: Option<u64>) {
        self.inner.step_limit.set(limit);
    }

    /// Runs `root` plus everything it spawns, returning when no task remains.
    pub fn run<F: Future<Output = ()> + 'static>(&self, root: F) {
        CURRENT.with(|c| {
            let mut cur = c.borrow_mut();
            assert!(cur.is_none(), "nested scheduler on one thread");
            *cur = Some(self.inner.clone());
        });
        // Clear the thread-local even when a task panics, so the thread (or a
        // later test on it) can host a fresh scheduler.
        struct Reset;
        impl Drop for Reset {
            fn drop(&mut self) {
                CURRENT.with(|c| c.borrow_mut().take());
            }
        }
        let _reset = Reset;
        self.inner.insert_task(Box::pin(root), None);
        self.inner.run_until_empty();
    }
}

/// Runs a future to completion on a fresh scheduler on this thread.
pub fn run_local<F: Future<Output = ()> + 'static>(root: F) {
    Executor::new("local").run(root);
}

/// Spawns a task charged to the innermost finish scope of the caller (or to
/// the caller's own scope when it is not inside a `finish`).
pub fn spawn<F: Future<Output = ()> + 'static>(fut: F) -> TaskHandle {
    ExecInner::with(|exec| {
        let scope = exec.current_charge();
        if let Some(s) = &scope {
            s.charge();
        }
        exec.insert_task(Box::pin(fut), scope)
    })
}

/// Handle to the innermost finish scope entered by the current task.
pub fn current_scope() -> Option<FinishScope> {
    ExecInner::with(|exec| {
        exec.with_current_slot(|slot| {
            slot.entered
                .last()
                .cloned()
                .map(|inner| FinishScope { inner })
        })
    })
}

/// Runs `body` and then waits until every task spawned under it, transitively,
/// has completed. Further spawns into the scope afterwards are an error.
pub async fn finish<T, F: Future<Output = T>>(body: F) -> T {
    let inner = Rc::new(ScopeInner {
        pending: Cell::new(0),
        closed: Cell::new(false),
        waiters: RefCell::new(Vec::new()),
    });
    ExecInner::with(|exec| exec.with_current_slot(|slot| slot.entered.push(inner.clone())));
    let out = body.await;
    ExecInner::with(|exec| {
        exec.with_current_slot(|slot| {
            let top = slot.entered.pop().expect("finish scope stack underflow");
            assert!(Rc::ptr_eq(&top, &inner), "finish scopes exited out of order");
        })
    });
    WaitQuiesce {
        inner: inner.clone(),
    }
    .await;
    inner.closed.set(true);
    out
}

struct WaitQuiesce {
    inner: Rc<ScopeInner>,
}

impl Future for WaitQuiesce {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.inner.pending.get() == 0 {
            Poll::Ready(())
        } else {
            self.inner.waiters.borrow_mut().push(cx.waker().clone());
            Poll::Pending
        }
    }
}

/// Requeues the current task behind every other runnable task.
pub fn yield_now() -> YieldNow {
    YieldNow { yielded: false }
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

enum SlotState<T> {
    Empty { waiters: Vec<Waker> },
    Filled(T),
}

/// Single-assignment slot: `put` once, any number of same-PE tasks `wait`.
pub struct SignalSlot<T> {
    state: Rc<RefCell<SlotState<T>>>,
}

impl<T> Clone for SignalSlot<T> {
    fn clone(&self) -> Self {
        SignalSlot {
            state: self.state.clone(),
        }
    }
}

impl<T: Clone> Default for SignalSlot<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Clone> SignalSlot<T> {
    pub fn new() -> Self {
        SignalSlot {
            state: Rc::new(RefCell::new(SlotState::Empty {
                waiters: Vec::new(),
            })),
        }
    }

    /// Fills the slot and wakes all waiters. A second put is an error.
    pub fn put(&self, value: T) -> Result<(), SlotFilled> {
        let mut state = self.state.borrow_mut();
        match &mut *state {
            SlotState::Filled(_) => Err(SlotFilled),
            SlotState::Empty { waiters } => {
                let waiters = std::mem::take(waiters);
                *state = SlotState::Filled(value);
                drop(state);
                for w in waiters {
                    w.wake();
                }
                Ok(())
            }
        }
    }

    pub fn is_filled(&self) -> bool {
        matches!(&*self.state.borrow(), SlotState::Filled(_))
    }

    pub fn try_get(&self) -> Option<T> {
        match &*self.state.borrow() {
            SlotState::Filled(v) => Some(v.clone()),
            SlotState::Empty { .. } => None,
        }
    }

    /// Resolves once the slot is filled, yielding a clone of the value.
    pub fn wait(&self) -> SlotWait<T> {
        SlotWait {
            state: self.state.clone(),
        }
    }
}

pub struct SlotWait<T> {
    state: Rc<RefCell<SlotState<T>>>,
}

impl<T: Clone> Future for SlotWait<T> {
    type Output = T;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<T> {
        let mut state = self.state.borrow_mut();
        match &mut *state {
            SlotState::Filled(v) => Poll::Ready(v.clone()),
            SlotState::Empty { waiters } => {
                waiters.push(cx.waker().clone());
                Poll::Pending
            }
        }
    }
}
