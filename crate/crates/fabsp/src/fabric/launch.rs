//! Thread-per-PE SPMD launcher and the per-PE fabric handle.

use std::cell::{Cell, RefCell};
use std::future::Future;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::rc::Rc;
use std::sync::Arc;
use std::time::Duration;

use super::layout::PartitionedLayout;
use super::router::Router;
use super::transport::{BufferFrame, Transport};
use super::PeId;
use crate::task::Executor;

#[derive(Debug, Clone)]
pub struct FabricConfig {
    pub npes: usize,
    /// Frames a destination inbox holds before refusing sends.
    pub inbox_capacity: usize,
    /// Base seed; applications derive their streams from it.
    pub seed: u64,
    /// Abort a collective that waits longer than this (deadlock watchdog).
    pub collective_timeout: Option<Duration>,
    /// Abort a PE whose scheduler exceeds this many task polls.
    pub step_limit: Option<u64>,
}

impl FabricConfig {
    pub fn new(npes: usize) -> Self {
        FabricConfig {
            npes,
            ..Default::default()
        }
    }
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            npes: 4,
            inbox_capacity: 64,
            seed: 0,
            collective_timeout: Some(Duration::from_secs(120)),
            step_limit: None,
        }
    }
}

pub(crate) struct PeInner {
    pub(crate) rank: PeId,
    pub(crate) npes: usize,
    pub(crate) seed: u64,
    pub(crate) transport: Arc<Transport>,
    pub(crate) router: Router,
    pub(crate) next_conveyor_id: Cell<u64>,
    pub(crate) next_collective_seq: Cell<u64>,
    pub(crate) collective_timeout: Option<Duration>,
}

/// Per-PE fabric handle passed to `pe_main`; cheap to clone, not `Send`.
#[derive(Clone)]
pub struct Pe {
    pub(crate) inner: Rc<PeInner>,
}

impl Pe {
    pub fn rank(&self) -> PeId {
        self.inner.rank
    }

    pub fn npes(&self) -> usize {
        self.inner.npes
    }

    pub fn seed(&self) -> u64 {
        self.inner.seed
    }

    pub fn layout(&self) -> PartitionedLayout {
        PartitionedLayout::new(self.inner.npes)
    }

    /// Raw transport send; false when the destination inbox is full. Layered
    /// protocols retry after yielding. Mixing raw `poll_frame` with live
    /// conveyor or collective traffic would steal their frames; it exists for
    /// transport-level tests and diagnostics.
    pub fn send_frame(&self, dest: PeId, frame: BufferFrame) -> bool {
        self.inner.transport.send_frame(dest, frame)
    }

    pub fn poll_frame(&self) -> Option<BufferFrame> {
        self.inner.transport.poll_frame(self.inner.rank)
    }

    /// Claims `n` consecutive conveyor ids and returns the first. All PEs
    /// must allocate collectively in the same order, so ids agree without
    /// communication; selectors allocate one id per mailbox this way.
    pub fn alloc_conveyor_ids(&self, n: u64) -> u64 {
        let base = self.inner.next_conveyor_id.get();
        self.inner.next_conveyor_id.set(base + n);
        base
    }

    pub(crate) fn router(&self) -> &Router {
        &self.inner.router
    }
}

thread_local! {
    /// Extra context (e.g. which handler was running) appended to the abort
    /// report when a PE panics.
    pub(crate) static PANIC_CONTEXT: RefCell<Option<String>> = const { RefCell::new(None) };
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic with non-string payload".to_string()
    }
}

/// Runs `pe_main(pe)` to completion on `npes` OS threads, one PE each.
///
/// Returns after every PE finishes. If any PE panics, the transport is
/// poisoned so the remaining PEs abort promptly, and this call panics with
/// the collected per-PE reports.
pub fn launch_spmd<F, Fut>(config: FabricConfig, pe_main: F)
where
    F: Fn(Pe) -> Fut + Send + Clone + 'static,
    Fut: Future<Output = ()> + 'static,
{
    assert!(config.npes > 0, "launch requires at least one PE");
    let transport = Arc::new(Transport::new(config.npes, config.inbox_capacity));
    let mut joins = Vec::with_capacity(config.npes);
    for rank in 0..config.npes {
        let transport = transport.clone();
        let pe_main = pe_main.clone();
        let config = config.clone();
        joins.push(
            std::thread::Builder::new()
                .name(format!("pe-{rank}"))
                .spawn(move || {
                    let me = PeId::new(rank);
                    let pe = Pe {
                        inner: Rc::new(PeInner {
                            rank: me,
                            npes: config.npes,
                            seed: config.seed,
                            transport: transport.clone(),
                            router: Router::new(me, transport.clone()),
                            next_conveyor_id: Cell::new(0),
                            next_collective_seq: Cell::new(0),
                            collective_timeout: config.collective_timeout,
                        }),
                    };
                    let result = catch_unwind(AssertUnwindSafe(|| {
                        let exec = Executor::new(format!("PE {rank}"));
                        exec.set_step_limit(config.step_limit);
                        exec.run(pe_main(pe));
                    }));
                    if let Err(payload) = result {
                        let mut report = panic_message(payload.as_ref());
                        if let Some(ctx) = PANIC_CONTEXT.with(|c| c.borrow_mut().take()) {
                            report = format!("{report} ({ctx})");
                        }
                        transport.poison(me, report);
                    }
                })
                .expect("failed to spawn PE thread"),
        );
    }
    for join in joins {
        // PE threads catch their own panics; a failed join means the panic
        // machinery itself broke.
        join.join().expect("PE thread died outside catch_unwind");
    }
    if transport.aborted() {
        panic!(
            "SPMD run aborted:\n  {}",
            transport.abort_reports().join("\n  ")
        );
    }
}
