//! An SPMD actor runtime built around partitioned global mailboxes.
//!
//! The crate stacks four layers:
//!
//! * [`task`]: a cooperative, single-threaded task scheduler run by each PE
//!   (processing element). Tasks are futures on a FIFO run queue; blocking
//!   primitives are [`task::yield_now`], [`task::finish`] scopes, and the
//!   single-assignment [`task::SignalSlot`].
//! * [`fabric`]: the SPMD substrate. [`fabric::launch_spmd`] runs one OS
//!   thread per PE, each with its own scheduler. PEs exchange
//!   [`fabric::BufferFrame`]s through bounded in-process inboxes and share a
//!   cyclic [`fabric::PartitionedLayout`] plus naive collectives.
//! * [`conveyor`]: buffered, aggregating point-to-point sessions over the
//!   fabric. Items pushed toward a destination accumulate in fixed-capacity
//!   buffers and travel in batched frames; a counting handshake detects
//!   global termination without relying on delivery order.
//! * [`selector`]: the programming model. A selector owns N mailboxes, each
//!   backed by a conveyor and a registered handler, plus a termination graph
//!   that propagates `done` signals from externally fed mailboxes through
//!   internal dependencies automatically.
//!
//! Messages are fixed-size records serialized via [`wire::WireRecord`].

pub mod conveyor;
pub mod fabric;
pub mod selector;
pub mod task;
pub mod wire;

pub use conveyor::{Conveyor, ConveyorError, ConveyorStats};
pub use fabric::{launch_spmd, BufferFrame, FabricConfig, FrameKind, PartitionedLayout, Pe, PeId};
pub use selector::{
    GraphError, GraphNode, Handler, LocalBoxFuture, Selector, SelectorError, SelectorHandle,
    SelectorSender, TerminationGraph,
};
pub use task::{finish, spawn, yield_now, FinishScope, SignalSlot, TaskHandle};
