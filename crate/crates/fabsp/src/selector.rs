//! Selectors: actors with multiple guarded mailboxes and automatic
//! termination detection.
//!
//! A selector owns `n` mailboxes, each with a message handler. Every PE
//! constructs the same selector (SPMD), and `send(mbx, pe, msg)` delivers
//! `msg` to mailbox `mbx` of the selector instance on `pe`, batched through
//! an aggregating [`Conveyor`] per mailbox. Handlers run on the destination
//! PE, one message at a time per mailbox.
//!
//! Termination is declared, not inferred: a [`TerminationGraph`] names who
//! may feed each mailbox — the world outside handlers ([`GraphNode::Outside`])
//! and/or specific other mailboxes. The graph must be acyclic. A mailbox
//! finishes when all of its declared feeders have finished: outside feeding
//! stops when the program calls [`SelectorHandle::done`], and a feeder
//! mailbox stops when its own conveyor session completes everywhere. The
//! runtime then closes downstream mailboxes automatically, so one `done`
//! call per outside-fed mailbox terminates an arbitrarily deep cascade.
//!
//! Sends are validated against the graph: a handler for mailbox `s` may only
//! send along a declared `s → t` edge, and outside code only along an
//! `Outside → t` edge. Because the graph is acyclic, a handler can never
//! send to its own mailbox, which is what makes the per-mailbox ring buffer
//! a safe backpressure point (awaiting ring space inside a handler can never
//! wait on the very mailbox that handler is blocking).

use std::cell::{Cell, RefCell};
use std::collections::BTreeSet;
use std::collections::VecDeque;
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use thiserror::Error;

use crate::conveyor::{Conveyor, ConveyorStats};
use crate::fabric::launch::PANIC_CONTEXT;
use crate::fabric::{Pe, PeId};
use crate::task::{spawn, yield_now, SignalSlot};
use crate::wire::WireRecord;

/// A boxed, non-`Send` future, the return type of sending handlers.
pub type LocalBoxFuture<'a, T = ()> = Pin<Box<dyn Future<Output = T> + 'a>>;

// ---------------------------------------------------------------------------
// Termination graph
// ---------------------------------------------------------------------------

/// A source that may feed a mailbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GraphNode {
    /// Program code running outside any handler of this selector.
    Outside,
    /// The handler of the given mailbox.
    Mailbox(usize),
}

impl fmt::Display for GraphNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphNode::Outside => write!(f, "outside"),
            GraphNode::Mailbox(m) => write!(f, "mailbox {m}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("termination graph references mailbox {0}, but the selector has {1} mailboxes")]
    OutOfRange(usize, usize),
    #[error("termination graph has a cycle through mailbox {0}")]
    Cyclic(usize),
    #[error("mailbox {0} has no incoming edge; declare Outside or another mailbox as its source")]
    Unfed(usize),
}

/// Who may feed each mailbox of a selector. Immutable once built; the
/// constructor rejects cyclic graphs and mailboxes nothing can feed.
#[derive(Debug, Clone)]
pub struct TerminationGraph {
    n: usize,
    outside: Vec<bool>,
    succ: Vec<Vec<usize>>,
    pred_count: Vec<usize>,
}

impl TerminationGraph {
    pub fn new(
        mailboxes: usize,
        edges: impl IntoIterator<Item = (GraphNode, usize)>,
    ) -> Result<Self, GraphError> {
        assert!(mailboxes > 0, "a selector needs at least one mailbox");
        let unique: BTreeSet<(GraphNode, usize)> = edges.into_iter().collect();
        let mut outside = vec![false; mailboxes];
        let mut succ = vec![Vec::new(); mailboxes];
        let mut pred_count = vec![0usize; mailboxes];
        for (src, dst) in unique {
            if dst >= mailboxes {
                return Err(GraphError::OutOfRange(dst, mailboxes));
            }
            match src {
                GraphNode::Outside => outside[dst] = true,
                GraphNode::Mailbox(s) => {
                    if s >= mailboxes {
                        return Err(GraphError::OutOfRange(s, mailboxes));
                    }
                    succ[s].push(dst);
                    pred_count[dst] += 1;
                }
            }
        }
        for (m, (&out, &preds)) in outside.iter().zip(&pred_count).enumerate() {
            if !out && preds == 0 {
                return Err(GraphError::Unfed(m));
            }
        }
        // Kahn's algorithm over the mailbox-to-mailbox edges: if some node is
        // never released, the leftover subgraph contains a cycle.
        let mut indeg = pred_count.clone();
        let mut queue: VecDeque<usize> =
            (0..mailboxes).filter(|&m| indeg[m] == 0).collect();
        let mut released = 0;
        while let Some(m) = queue.pop_front() {
            released += 1;
            for &t in &succ[m] {
                indeg[t] -= 1;
                if indeg[t] == 0 {
                    queue.push_back(t);
                }
            }
        }
        if released < mailboxes {
            let culprit = (0..mailboxes).find(|&m| indeg[m] > 0).unwrap();
            return Err(GraphError::Cyclic(culprit));
        }
        Ok(TerminationGraph {
            n: mailboxes,
            outside,
            succ,
            pred_count,
        })
    }

    pub fn mailboxes(&self) -> usize {
        self.n
    }

    pub fn outside_feeds(&self, mbx: usize) -> bool {
        self.outside[mbx]
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.succ[src].contains(&dst)
    }

    fn config_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(self.n as u64);
        for m in 0..self.n {
            eat(self.outside[m] as u64);
            for &t in &self.succ[m] {
                eat(m as u64);
                eat(t as u64);
            }
        }
        h
    }
}

// ---------------------------------------------------------------------------
// Handlers
// ---------------------------------------------------------------------------

/// The reaction to one message: either a plain function, or a *sending*
/// handler that may itself send along declared graph edges (and therefore
/// may suspend awaiting ring space).
///
/// A sending handler receives a [`SelectorSender`] scoped to its mailbox and
/// must return an owned future; state shared with the closure is cloned into
/// each invocation (typically an `Rc` clone).
pub enum Handler<P: WireRecord> {
    Sync(Box<dyn FnMut(P, PeId)>),
    Sending(Box<dyn for<'a> FnMut(&'a SelectorSender<P>, P, PeId) -> LocalBoxFuture<'a>>),
}

impl<P: WireRecord> Handler<P> {
    pub fn sync(f: impl FnMut(P, PeId) + 'static) -> Self {
        Handler::Sync(Box::new(f))
    }

    pub fn sending(
        f: impl for<'a> FnMut(&'a SelectorSender<P>, P, PeId) -> LocalBoxFuture<'a> + 'static,
    ) -> Self {
        Handler::Sending(Box::new(f))
    }
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectorError {
    #[error("mailbox {0} does not exist")]
    NoSuchMailbox(usize),
    #[error("no declared route from {from} to mailbox {mbx}")]
    UndeclaredRoute { from: GraphNode, mbx: usize },
    #[error("send to mailbox {mbx} from {from} after that source declared done")]
    SendAfterDone { from: GraphNode, mbx: usize },
    #[error("done({0}) called twice")]
    DoubleDone(usize),
    #[error("done({0}) is invalid: mailbox {0} is not fed from outside")]
    DoneOnInternal(usize),
}

// ---------------------------------------------------------------------------
// Shared runtime state
// ---------------------------------------------------------------------------

enum RingEntry<P> {
    Item { dest: PeId, payload: P },
    Done,
}

struct MailboxState<P> {
    ring: VecDeque<RingEntry<P>>,
    /// Outside may still feed this mailbox (cleared by `done`, or never set).
    outside_open: bool,
    /// Feeder mailboxes that have not completed yet.
    pending_preds: usize,
    marker_enqueued: bool,
    complete: bool,
    space_waiters: Vec<Waker>,
}

struct SelectorShared<P: WireRecord> {
    pe: Pe,
    graph: TerminationGraph,
    ring_capacity: usize,
    mailboxes: Vec<RefCell<MailboxState<P>>>,
    stats: RefCell<Vec<ConveyorStats>>,
    remaining: Cell<usize>,
    all_done: SignalSlot<()>,
}

impl<P: WireRecord> SelectorShared<P> {
    fn enqueue_marker(&self, mbx: usize) {
        let mut st = self.mailboxes[mbx].borrow_mut();
        debug_assert!(!st.marker_enqueued, "second done marker for mailbox {mbx}");
        st.marker_enqueued = true;
        st.ring.push_back(RingEntry::Done);
    }

    /// Validates that `from` may send to `mbx` right now, distinguishing
    /// routes that never existed from routes whose source already finished.
    fn check_route(&self, from: Option<usize>, mbx: usize) -> Result<(), SelectorError> {
        if mbx >= self.graph.n {
            return Err(SelectorError::NoSuchMailbox(mbx));
        }
        match from {
            None => {
                if !self.graph.outside_feeds(mbx) {
                    return Err(SelectorError::UndeclaredRoute {
                        from: GraphNode::Outside,
                        mbx,
                    });
                }
                if !self.mailboxes[mbx].borrow().outside_open {
                    return Err(SelectorError::SendAfterDone {
                        from: GraphNode::Outside,
                        mbx,
                    });
                }
            }
            Some(src) => {
                if !self.graph.has_edge(src, mbx) {
                    return Err(SelectorError::UndeclaredRoute {
                        from: GraphNode::Mailbox(src),
                        mbx,
                    });
                }
                if self.mailboxes[src].borrow().complete {
                    return Err(SelectorError::SendAfterDone {
                        from: GraphNode::Mailbox(src),
                        mbx,
                    });
                }
            }
        }
        Ok(())
    }

    /// Worker for mailbox `src` finished: release its successors.
    fn on_mailbox_complete(&self, src: usize) {
        self.mailboxes[src].borrow_mut().complete = true;
        for &t in &self.graph.succ[src] {
            let release = {
                let mut st = self.mailboxes[t].borrow_mut();
                st.pending_preds -= 1;
                st.pending_preds == 0 && !st.outside_open && !st.marker_enqueued
            };
            if release {
                self.enqueue_marker(t);
            }
        }
        let left = self.remaining.get() - 1;
        self.remaining.set(left);
        if left == 0 {
            self.all_done
                .put(())
                .expect("selector completion signaled twice");
        }
    }
}

// ---------------------------------------------------------------------------
// Send futures
// ---------------------------------------------------------------------------

struct RingSend<'a, P: WireRecord> {
    shared: &'a SelectorShared<P>,
    from: Option<usize>,
    mbx: usize,
    dest: PeId,
    payload: Option<P>,
}

// No field is structurally pinned; payload is a plain record.
impl<P: WireRecord> Unpin for RingSend<'_, P> {}

impl<P: WireRecord> Future for RingSend<'_, P> {
    type Output = Result<(), SelectorError>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let this = self.get_mut();
        // Revalidate on every poll: the route can close while we wait.
        if let Err(e) = this.shared.check_route(this.from, this.mbx) {
            return Poll::Ready(Err(e));
        }
        assert!(
            this.dest.rank() < this.shared.pe.npes(),
            "send to {:?}, but only {} PEs are running",
            this.dest,
            this.shared.pe.npes()
        );
        let mut st = this.shared.mailboxes[this.mbx].borrow_mut();
        if st.ring.len() < this.shared.ring_capacity {
            let payload = this.payload.take().expect("send future polled after Ready");
            st.ring.push_back(RingEntry::Item {
                dest: this.dest,
                payload,
            });
            Poll::Ready(Ok(()))
        } else {
            st.space_waiters.push(cx.waker().clone());
            Poll::Pending
        }
    }
}

// ---------------------------------------------------------------------------
// Public handles
// ---------------------------------------------------------------------------

/// Sending capability scoped to one source. Handlers receive one scoped to
/// their mailbox; [`SelectorHandle`] derefs to one scoped to `Outside`.
pub struct SelectorSender<P: WireRecord> {
    shared: Rc<SelectorShared<P>>,
    from: Option<usize>,
}

impl<P: WireRecord> SelectorSender<P> {
    /// Queues `payload` for mailbox `mbx` of the selector on `dest`.
    /// Suspends while the local ring for `mbx` is full. Fails if the
    /// termination graph does not declare this route, or if the route's
    /// source has already declared done.
    pub async fn send(&self, mbx: usize, dest: PeId, payload: P) -> Result<(), SelectorError> {
        RingSend {
            shared: &self.shared,
            from: self.from,
            mbx,
            dest,
            payload: Some(payload),
        }
        .await
    }

    /// Rank of the PE this selector instance runs on.
    pub fn rank(&self) -> PeId {
        self.shared.pe.rank()
    }

    /// Number of PEs in the run.
    pub fn npes(&self) -> usize {
        self.shared.pe.npes()
    }
}

/// Control handle for a running selector, returned by [`Selector::start`].
/// Cloneable; all clones refer to the same selector instance on this PE.
pub struct SelectorHandle<P: WireRecord> {
    sender: SelectorSender<P>,
}

impl<P: WireRecord> Clone for SelectorHandle<P> {
    fn clone(&self) -> Self {
        SelectorHandle {
            sender: SelectorSender {
                shared: self.sender.shared.clone(),
                from: None,
            },
        }
    }
}

impl<P: WireRecord> std::ops::Deref for SelectorHandle<P> {
    type Target = SelectorSender<P>;

    fn deref(&self) -> &SelectorSender<P> {
        &self.sender
    }
}

impl<P: WireRecord> SelectorHandle<P> {
    /// Declares that outside code on this PE will send nothing more to
    /// mailbox `mbx`. Valid only for outside-fed mailboxes, once each.
    pub fn done(&self, mbx: usize) -> Result<(), SelectorError> {
        let shared = &self.sender.shared;
        if mbx >= shared.graph.n {
            return Err(SelectorError::NoSuchMailbox(mbx));
        }
        if !shared.graph.outside_feeds(mbx) {
            return Err(SelectorError::DoneOnInternal(mbx));
        }
        let release = {
            let mut st = shared.mailboxes[mbx].borrow_mut();
            if !st.outside_open {
                return Err(SelectorError::DoubleDone(mbx));
            }
            st.outside_open = false;
            st.pending_preds == 0 && !st.marker_enqueued
        };
        if release {
            shared.enqueue_marker(mbx);
        }
        Ok(())
    }

    /// Resolves once every mailbox of this PE's selector instance has
    /// terminated (all feeders done, all messages handled, globally).
    pub async fn all_done(&self) {
        self.sender.shared.all_done.wait().await;
    }

    /// Per-mailbox conveyor counters. Complete once [`Self::all_done`] has
    /// resolved; before that, finished mailboxes only.
    pub fn stats(&self) -> Vec<ConveyorStats> {
        self.sender.shared.stats.borrow().clone()
    }

    /// Counters summed over all mailboxes.
    pub fn total_stats(&self) -> ConveyorStats {
        let mut total = ConveyorStats::default();
        for s in self.sender.shared.stats.borrow().iter() {
            total += *s;
        }
        total
    }
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

/// A selector under construction: a termination graph plus one handler per
/// mailbox. [`Selector::start`] brings it to life collectively.
pub struct Selector<P: WireRecord> {
    graph: TerminationGraph,
    handlers: Vec<Option<Handler<P>>>,
    ring_capacity: usize,
    buffer_items: usize,
}

impl<P: WireRecord> Selector<P> {
    pub fn new(graph: TerminationGraph) -> Self {
        let n = graph.mailboxes();
        Selector {
            graph,
            handlers: (0..n).map(|_| None).collect(),
            ring_capacity: 64,
            buffer_items: 1024,
        }
    }

    /// Capacity of each mailbox's local send ring (backpressure point for
    /// senders on this PE).
    pub fn ring_capacity(mut self, entries: usize) -> Self {
        assert!(entries > 0, "ring capacity must be at least 1");
        self.ring_capacity = entries;
        self
    }

    /// Items aggregated per destination before a frame is shipped.
    pub fn buffer_items(mut self, items: usize) -> Self {
        assert!(items > 0, "conveyor buffers must hold at least one item");
        self.buffer_items = items;
        self
    }

    pub fn on_sync(self, mbx: usize, f: impl FnMut(P, PeId) + 'static) -> Self {
        self.on(mbx, Handler::sync(f))
    }

    pub fn on_sending(
        self,
        mbx: usize,
        f: impl for<'a> FnMut(&'a SelectorSender<P>, P, PeId) -> LocalBoxFuture<'a> + 'static,
    ) -> Self {
        self.on(mbx, Handler::sending(f))
    }

    pub fn on(mut self, mbx: usize, handler: Handler<P>) -> Self {
        assert!(mbx < self.handlers.len(), "mailbox {mbx} does not exist");
        assert!(
            self.handlers[mbx].is_none(),
            "mailbox {mbx} already has a handler"
        );
        self.handlers[mbx] = Some(handler);
        self
    }

    /// Starts the selector. Collective: every PE must call `start` for the
    /// same selector at the same point in its conveyor/collective order, and
    /// the configurations must match. Spawns one worker task per mailbox and
    /// returns immediately; await [`SelectorHandle::all_done`] to join.
    pub async fn start(self, pe: &Pe) -> SelectorHandle<P> {
        let n = self.graph.mailboxes();
        let handlers: Vec<Handler<P>> = self
            .handlers
            .into_iter()
            .enumerate()
            .map(|(m, h)| h.unwrap_or_else(|| panic!("mailbox {m} has no handler")))
            .collect();

        let mut hash = self.graph.config_hash();
        hash ^= (self.buffer_items as u64).wrapping_mul(0x9e3779b97f4a7c15);
        let sum = pe.allreduce_sum(hash).await;
        assert_eq!(
            sum,
            hash.wrapping_mul(pe.npes() as u64),
            "selector configuration differs across PEs"
        );

        let first_id = pe.alloc_conveyor_ids(n as u64);
        let shared = Rc::new(SelectorShared {
            pe: pe.clone(),
            ring_capacity: self.ring_capacity,
            mailboxes: (0..n)
                .map(|m| {
                    RefCell::new(MailboxState {
                        ring: VecDeque::new(),
                        outside_open: self.graph.outside_feeds(m),
                        pending_preds: self.graph.pred_count[m],
                        marker_enqueued: false,
                        complete: false,
                        space_waiters: Vec::new(),
                    })
                })
                .collect(),
            graph: self.graph,
            stats: RefCell::new(vec![ConveyorStats::default(); n]),
            remaining: Cell::new(n),
            all_done: SignalSlot::new(),
        });

        for (m, handler) in handlers.into_iter().enumerate() {
            let conveyor = Conveyor::begin(pe, first_id + m as u64, self.buffer_items);
            spawn(worker(shared.clone(), m, conveyor, handler));
        }

        SelectorHandle {
            sender: SelectorSender { shared, from: None },
        }
    }
}

// ---------------------------------------------------------------------------
// Worker
// ---------------------------------------------------------------------------

/// Keeps the panic-context diagnostic set during each poll of a handler
/// future, so a panic at any await point still reports its mailbox.
struct WithDiag<'a> {
    inner: LocalBoxFuture<'a>,
    context: String,
}

impl Future for WithDiag<'_> {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        PANIC_CONTEXT.with(|c| *c.borrow_mut() = Some(self.context.clone()));
        let result = self.inner.as_mut().poll(cx);
        PANIC_CONTEXT.with(|c| *c.borrow_mut() = None);
        result
    }
}

async fn worker<P: WireRecord>(
    shared: Rc<SelectorShared<P>>,
    mbx: usize,
    mut conveyor: Conveyor<P>,
    mut handler: Handler<P>,
) {
    let sender = SelectorSender {
        shared: shared.clone(),
        from: Some(mbx),
    };
    let mut local_done = false;
    loop {
        let stats_before = conveyor.stats();
        let done_before = local_done;
        // Move ring entries into the conveyor until the ring runs dry, the
        // transport refuses a flush, or the done marker appears (which the
        // runtime guarantees is the final entry).
        loop {
            let entry = {
                let mut st = shared.mailboxes[mbx].borrow_mut();
                st.ring.pop_front()
            };
            match entry {
                None => break,
                Some(RingEntry::Done) => {
                    debug_assert!(
                        shared.mailboxes[mbx].borrow().ring.is_empty(),
                        "entries behind the done marker of mailbox {mbx}"
                    );
                    local_done = true;
                    break;
                }
                Some(RingEntry::Item { dest, payload }) => {
                    match conveyor.push(dest, payload) {
                        Ok(true) => {
                            let waiters = {
                                let mut st = shared.mailboxes[mbx].borrow_mut();
                                std::mem::take(&mut st.space_waiters)
                            };
                            for w in waiters {
                                w.wake();
                            }
                        }
                        Ok(false) => {
                            let mut st = shared.mailboxes[mbx].borrow_mut();
                            st.ring.push_front(RingEntry::Item { dest, payload });
                            break;
                        }
                        Err(e) => unreachable!("worker pushed after done: {e}"),
                    }
                }
            }
        }

        let more = conveyor
            .advance(local_done)
            .expect("worker drives local_done monotonically");

        while let Some((payload, from)) = conveyor.pull() {
            let context =
                format!("handling mailbox {mbx}, message from PE {}", from.rank());
            match &mut handler {
                Handler::Sync(f) => {
                    PANIC_CONTEXT.with(|c| *c.borrow_mut() = Some(context));
                    f(payload, from);
                    PANIC_CONTEXT.with(|c| *c.borrow_mut() = None);
                }
                Handler::Sending(f) => {
                    let fut = f(&sender, payload, from);
                    WithDiag {
                        inner: fut,
                        context,
                    }
                    .await;
                }
            }
        }

        if !more {
            break;
        }
        // A cycle that moved nothing is waiting on other PEs. Handing the
        // core back to the OS lets sibling PE threads progress immediately
        // instead of after a full scheduler timeslice — essential when PEs
        // outnumber cores.
        if conveyor.stats() == stats_before && local_done == done_before {
            std::thread::yield_now();
        }
        yield_now().await;
    }

    debug_assert!(
        shared.mailboxes[mbx].borrow().ring.is_empty(),
        "mailbox {mbx} completed with ring entries left"
    );
    shared.stats.borrow_mut()[mbx] = conveyor.stats();
    shared.on_mailbox_complete(mbx);
}

// ---------------------------------------------------------------------------
