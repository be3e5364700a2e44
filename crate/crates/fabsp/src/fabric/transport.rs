//! Reliable in-process frame transport with bounded multi-producer inboxes.
//!
//! Every PE owns one inbox; any PE may push a frame into it. A full inbox
//! refuses the frame (`send_frame` returns false) and the sender retries
//! after yielding. Delivery is exactly-once and FIFO per sender-receiver
//! pair; protocol layers above must not rely on the FIFO property.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use super::PeId;

/// Frames on the control channel carry this conveyor id.
pub(crate) const CONTROL_CHANNEL: u64 = u64::MAX;

/// Unit of transfer between PEs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferFrame {
    pub conveyor_id: u64,
    pub sender: PeId,
    pub kind: FrameKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameKind {
    /// `item_count` fixed-size records, back to back.
    Data { items: Vec<u8>, item_count: u32 },
    /// Sender's final count of data items it pushed toward the receiver.
    Fin { total_sent: u64 },
    /// Collective payload, matched by sequence number.
    Control { seq: u64, bytes: Vec<u8> },
}

pub(crate) struct Transport {
    capacity: usize,
    inboxes: Vec<Mutex<VecDeque<BufferFrame>>>,
    aborted: AtomicBool,
    abort_reports: Mutex<Vec<String>>,
}

impl Transport {
    pub fn new(npes: usize, capacity: usize) -> Self {
        assert!(npes > 0, "transport requires at least one PE");
        assert!(capacity > 0, "inbox capacity must be at least one frame");
        Transport {
            capacity,
            inboxes: (0..npes).map(|_| Mutex::new(VecDeque::new())).collect(),
            aborted: AtomicBool::new(false),
            abort_reports: Mutex::new(Vec::new()),
        }
    }

    /// Delivers `frame` to `dest`'s inbox; false when the inbox is full.
    pub fn send_frame(&self, dest: PeId, frame: BufferFrame) -> bool {
        self.check_abort(frame.sender);
        let mut inbox = self.inboxes[dest.rank()].lock().unwrap();
        if inbox.len() >= self.capacity {
            return false;
        }
        inbox.push_back(frame);
        true
    }

    pub fn poll_frame(&self, me: PeId) -> Option<BufferFrame> {
        self.check_abort(me);
        self.inboxes[me.rank()].lock().unwrap().pop_front()
    }

    /// Records a PE failure and poisons the transport so that every other PE
    /// aborts the next time it touches the network.
    pub fn poison(&self, me: PeId, report: String) {
        let mut reports = self.abort_reports.lock().unwrap();
        reports.push(format!("PE {me}: {report}"));
        self.aborted.store(true, Ordering::Release);
    }

    pub fn aborted(&self) -> bool {
        self.aborted.load(Ordering::Acquire)
    }

    pub fn abort_reports(&self) -> Vec<String> {
        self.abort_reports.lock().unwrap().clone()
    }

    fn check_abort(&self, me: PeId) {
        if self.aborted() {
            panic!("PE {me}: run aborted by a failure on another PE");
        }
    }
}
