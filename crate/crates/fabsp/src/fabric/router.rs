//! Per-PE demultiplexer for incoming frames.
//!
//! The transport gives each PE a single inbox shared by every conveyor and by
//! the collective control channel. Whoever polls first drains the inbox and
//! buckets frames by conveyor id (or by collective sequence number), so no
//! consumer can starve another by leaving foreign frames stuck in the inbox.

use std::cell::RefCell;
use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use super::transport::{BufferFrame, FrameKind, Transport, CONTROL_CHANNEL};
use super::PeId;

pub(crate) struct Router {
    me: PeId,
    transport: Arc<Transport>,
    conveyor_frames: RefCell<HashMap<u64, VecDeque<BufferFrame>>>,
    control_frames: RefCell<HashMap<u64, VecDeque<(PeId, Vec<u8>)>>>,
}

impl Router {
    pub fn new(me: PeId, transport: Arc<Transport>) -> Self {
        Router {
            me,
            transport,
            conveyor_frames: RefCell::new(HashMap::new()),
            control_frames: RefCell::new(HashMap::new()),
        }
    }

    fn drain_inbox(&self) {
        while let Some(frame) = self.transport.poll_frame(self.me) {
            match &frame.kind {
                FrameKind::Control { seq, bytes } => {
                    assert_eq!(frame.conveyor_id, CONTROL_CHANNEL);
                    self.control_frames
                        .borrow_mut()
                        .entry(*seq)
                        .or_default()
                        .push_back((frame.sender, bytes.clone()));
                }
                FrameKind::Data { .. } | FrameKind::Fin { .. } => {
                    self.conveyor_frames
                        .borrow_mut()
                        .entry(frame.conveyor_id)
                        .or_default()
                        .push_back(frame);
                }
            }
        }
    }

    /// Next frame addressed to conveyor `id`, in per-sender FIFO order.
    pub fn poll_conveyor(&self, id: u64) -> Option<BufferFrame> {
        self.drain_inbox();
        self.conveyor_frames
            .borrow_mut()
            .get_mut(&id)
            .and_then(|q| q.pop_front())
    }

    /// Next control payload for collective sequence number `seq`.
    pub fn poll_control(&self, seq: u64) -> Option<(PeId, Vec<u8>)> {
        self.drain_inbox();
        let mut control = self.control_frames.borrow_mut();
        let q = control.get_mut(&seq)?;
        let item = q.pop_front();
        if q.is_empty() {
            control.remove(&seq);
        }
        item
    }

    /// Drops the bucket of a finished conveyor. The termination protocol
    /// guarantees the bucket is already empty.
    pub fn retire_conveyor(&self, id: u64) {
        let stale = self.conveyor_frames.borrow_mut().remove(&id);
        if let Some(q) = stale {
            assert!(
                q.is_empty(),
                "conveyor {id} retired with {} undelivered frames",
                q.len()
            );
        }
    }
}
