//! Aggregating point-to-point sessions with counting-based termination.
//!
//! A conveyor buffers pushed items per destination and ships them in batched
//! [`BufferFrame`]s of up to `buffer_items` records, so fine-grained messages
//! cross the transport in coarse units. Termination is detected by counting,
//! not by delivery order: when a PE signals local completion, the conveyor
//! freezes its per-destination send totals and emits a `Fin(total)` frame to
//! every PE (itself included). A conveyor is globally complete once its own
//! buffers are flushed and acknowledged, every peer's Fin has arrived, the
//! received item count from each peer equals that peer's declared total, and
//! the receive queue has been drained by `pull`.
//!
//! The canonical drive loop interleaves the three operations until `advance`
//! reports completion:
//!
//! ```text
//! while conveyor.advance(no_more_local_pushes)? {
//!     while work_left && conveyor.push(dest, item)? {}
//!     while let Some((item, from)) = conveyor.pull() { consume(item, from); }
//!     yield_now().await;
//! }
//! ```

use std::collections::VecDeque;
use std::ops::AddAssign;

use thiserror::Error;

use crate::fabric::{BufferFrame, FrameKind, Pe, PeId};
use crate::wire::{decode_items, encode_items, WireRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Accepting pushes; only full buffers are flushed (maximal aggregation).
    Active,
    /// Local completion signaled: flushing residual buffers and Fins.
    Endgame,
    /// Globally terminated; `advance` has returned false.
    Complete,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ConveyorError {
    #[error("push after local done was signaled")]
    PushAfterDone,
    #[error("advance regressed locally_done from true back to false")]
    DoneRegressed,
}

/// Counters for one conveyor session. Frame counts cover data frames only;
/// Fin frames are fixed protocol overhead (one per PE pair) and are not part
/// of the aggregation accounting.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ConveyorStats {
    pub items_pushed: u64,
    pub items_pulled: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
}

impl AddAssign for ConveyorStats {
    fn add_assign(&mut self, rhs: Self) {
        self.items_pushed += rhs.items_pushed;
        self.items_pulled += rhs.items_pulled;
        self.frames_sent += rhs.frames_sent;
        self.frames_received += rhs.frames_received;
    }
}

pub struct Conveyor<P: WireRecord> {
    pe: Pe,
    id: u64,
    buffer_items: usize,
    phase: Phase,
    done_latched: bool,
    send_bufs: Vec<Vec<P>>,
    sent_counts: Vec<u64>,
    fin_totals: Vec<u64>,
    fins_to_send: VecDeque<usize>,
    recv: VecDeque<(P, PeId)>,
    received_counts: Vec<u64>,
    fins_seen: Vec<Option<u64>>,
    stats: ConveyorStats,
}

impl<P: WireRecord> Conveyor<P> {
    /// Opens session `id` on this PE. Collective: every PE must begin the
    /// same id with the same record type and buffer capacity.
    pub fn begin(pe: &Pe, id: u64, buffer_items: usize) -> Self {
        assert!(buffer_items > 0, "conveyor buffers must hold at least one item");
        let npes = pe.npes();
        Conveyor {
            pe: pe.clone(),
            id,
            buffer_items,
            phase: Phase::Active,
            done_latched: false,
            send_bufs: (0..npes).map(|_| Vec::new()).collect(),
            sent_counts: vec![0; npes],
            fin_totals: vec![0; npes],
            fins_to_send: VecDeque::new(),
            recv: VecDeque::new(),
            received_counts: vec![0; npes],
            fins_seen: vec![None; npes],
            stats: ConveyorStats::default(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn stats(&self) -> ConveyorStats {
        self.stats
    }

    /// Buffers one item toward `dest`. `Ok(false)` means the buffer is full
    /// and the transport refused the flush: nothing changed, try again after
    /// the next `advance`. Pushing after local done is a programming error.
    pub fn push(&mut self, dest: PeId, item: P) -> Result<bool, ConveyorError> {
        if self.phase != Phase::Active {
            return Err(ConveyorError::PushAfterDone);
        }
        let d = dest.rank();
        if self.send_bufs[d].len() >= self.buffer_items && !self.flush_one(d) {
            return Ok(false);
        }
        self.send_bufs[d].push(item);
        self.sent_counts[d] += 1;
        self.stats.items_pushed += 1;
        Ok(true)
    }

    /// Next received item and its sender, if any.
    pub fn pull(&mut self) -> Option<(P, PeId)> {
        let item = self.recv.pop_front();
        if item.is_some() {
            self.stats.items_pulled += 1;
        }
        item
    }

    /// Makes communication progress: receives frames, flushes buffers, and
    /// runs the termination handshake. Returns false once the session is
    /// globally complete. `locally_done` is sticky; regressing it is an
    /// error. Completion additionally requires the receive queue to have
    /// been drained by `pull`.
    pub fn advance(&mut self, locally_done: bool) -> Result<bool, ConveyorError> {
        if self.done_latched && !locally_done {
            return Err(ConveyorError::DoneRegressed);
        }
        if locally_done && !self.done_latched {
            self.done_latched = true;
            self.phase = Phase::Endgame;
            self.fin_totals.copy_from_slice(&self.sent_counts);
            self.fins_to_send = (0..self.pe.npes()).collect();
        }
        if self.phase == Phase::Complete {
            return Ok(false);
        }

        self.receive();

        match self.phase {
            Phase::Active => {
                for d in 0..self.send_bufs.len() {
                    if self.send_bufs[d].len() >= self.buffer_items {
                        self.flush_one(d);
                    }
                }
                Ok(true)
            }
            Phase::Endgame => {
                for d in 0..self.send_bufs.len() {
                    if !self.send_bufs[d].is_empty() {
                        self.flush_one(d);
                    }
                }
                while let Some(&d) = self.fins_to_send.front() {
                    let frame = BufferFrame {
                        conveyor_id: self.id,
                        sender: self.pe.rank(),
                        kind: FrameKind::Fin {
                            total_sent: self.fin_totals[d],
                        },
                    };
                    if !self.pe.send_frame(PeId::new(d), frame) {
                        break;
                    }
                    self.fins_to_send.pop_front();
                }
                if self.is_globally_complete() {
                    self.phase = Phase::Complete;
                    self.pe.router().retire_conveyor(self.id);
                    Ok(false)
                } else {
                    Ok(true)
                }
            }
            Phase::Complete => unreachable!(),
        }
    }

    fn receive(&mut self) {
        while let Some(frame) = self.pe.router().poll_conveyor(self.id) {
            let s = frame.sender;
            match frame.kind {
                FrameKind::Data { items, item_count } => {
                    let decoded = decode_items::<P>(&items);
                    assert_eq!(decoded.len(), item_count as usize, "frame miscounted items");
                    self.received_counts[s.rank()] += decoded.len() as u64;
                    self.recv.extend(decoded.into_iter().map(|p| (p, s)));
                    self.stats.frames_received += 1;
                }
                FrameKind::Fin { total_sent } => {
                    let prev = self.fins_seen[s.rank()].replace(total_sent);
                    assert!(prev.is_none(), "duplicate Fin from {s:?}");
                }
                FrameKind::Control { .. } => {
                    unreachable!("control frame routed to a conveyor")
                }
            }
        }
    }

    fn flush_one(&mut self, d: usize) -> bool {
        if self.send_bufs[d].is_empty() {
            return true;
        }
        let frame = BufferFrame {
            conveyor_id: self.id,
            sender: self.pe.rank(),
            kind: FrameKind::Data {
                items: encode_items(&self.send_bufs[d]),
                item_count: self.send_bufs[d].len() as u32,
            },
        };
        if self.pe.send_frame(PeId::new(d), frame) {
            self.send_bufs[d].clear();
            self.stats.frames_sent += 1;
            true
        } else {
            false
        }
    }

    fn is_globally_complete(&self) -> bool {
        self.send_bufs.iter().all(Vec::is_empty)
            && self.fins_to_send.is_empty()
            && self
                .fins_seen
                .iter()
                .zip(&self.received_counts)
                .all(|(fin, got)| *fin == Some(*got))
            && self.recv.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{launch_spmd, FabricConfig};
    use crate::task::yield_now;
    use std::sync::{Arc, Mutex};

    async fn drive_to_completion(conv: &mut Conveyor<u64>) -> Vec<(u64, PeId)> {
        let mut pulled = Vec::new();
        loop {
            let more = conv.advance(true).unwrap();
            while let Some(item) = conv.pull() {
                pulled.push(item);
            }
            if !more {
                break;
            }
            yield_now().await;
        }
        pulled
    }

    #[test]
    fn loopback_single_pe() {
        launch_spmd(FabricConfig::new(1), |pe| async move {
            let mut conv: Conveyor<u64> = Conveyor::begin(&pe, pe.alloc_conveyor_ids(1), 8);
            assert!(conv.push(PeId::new(0), 99).unwrap());
            let pulled = drive_to_completion(&mut conv).await;
            assert_eq!(pulled, vec![(99, PeId::new(0))]);
            assert_eq!(conv.phase(), Phase::Complete);
            assert_eq!(conv.pull(), None);
        });
    }

    #[test]
    fn five_items_one_direction() {
        launch_spmd(FabricConfig::new(2), |pe| async move {
            let mut conv: Conveyor<u64> = Conveyor::begin(&pe, pe.alloc_conveyor_ids(1), 4);
            if pe.rank().rank() == 0 {
                for v in 0..5u64 {
                    assert!(conv.push(PeId::new(1), v).unwrap());
                }
            }
            let pulled = drive_to_completion(&mut conv).await;
            if pe.rank().rank() == 1 {
                assert_eq!(
                    pulled,
                    (0..5u64).map(|v| (v, PeId::new(0))).collect::<Vec<_>>()
                );
            } else {
                assert!(pulled.is_empty());
            }
            // After completion, pulls stay empty and advance stays false.
            assert_eq!(conv.pull(), None);
            assert!(!conv.advance(true).unwrap());
        });
    }

    #[test]
    fn immediate_done_everywhere_completes_empty() {
        launch_spmd(FabricConfig::new(4), |pe| async move {
            let mut conv: Conveyor<u64> = Conveyor::begin(&pe, pe.alloc_conveyor_ids(1), 4);
            let pulled = drive_to_completion(&mut conv).await;
            assert!(pulled.is_empty());
            let stats = conv.stats();
            assert_eq!(stats.items_pushed, 0);
            assert_eq!(stats.frames_sent, 0);
        });
    }

    #[test]
    fn push_after_done_is_distinct_error() {
        launch_spmd(FabricConfig::new(1), |pe| async move {
            let mut conv: Conveyor<u64> = Conveyor::begin(&pe, pe.alloc_conveyor_ids(1), 4);
            conv.advance(true).unwrap();
            assert_eq!(
                conv.push(PeId::new(0), 1),
                Err(ConveyorError::PushAfterDone)
            );
            drive_to_completion(&mut conv).await;
        });
    }

    #[test]
    fn done_regression_is_error() {
        launch_spmd(FabricConfig::new(1), |pe| async move {
            let mut conv: Conveyor<u64> = Conveyor::begin(&pe, pe.alloc_conveyor_ids(1), 4);
            conv.advance(true).unwrap();
            assert_eq!(conv.advance(false), Err(ConveyorError::DoneRegressed));
            drive_to_completion(&mut conv).await;
        });
    }

    #[test]
    fn full_buffer_with_stalled_transport_refuses_push() {
        let mut config = FabricConfig::new(1);
        config.inbox_capacity = 1;
        launch_spmd(config, |pe| async move {
            // Stuff the only inbox slot so flushes are refused.
            let plug = BufferFrame {
                conveyor_id: 7777,
                sender: pe.rank(),
                kind: FrameKind::Fin { total_sent: 0 },
            };
            assert!(pe.send_frame(pe.rank(), plug));

            let mut conv: Conveyor<u64> = Conveyor::begin(&pe, pe.alloc_conveyor_ids(1), 4);
            for v in 0..4u64 {
                assert!(conv.push(PeId::new(0), v).unwrap());
            }
            // Buffer is at capacity and the flush is refused: no state change.
            let stats_before = conv.stats();
            assert!(!conv.push(PeId::new(0), 4).unwrap());
            assert_eq!(conv.stats(), stats_before);

            // Draining the inbox (via advance's receive) unblocks the flush.
            assert!(conv.advance(false).unwrap());
            assert!(conv.push(PeId::new(0), 4).unwrap());
            let pulled = drive_to_completion(&mut conv).await;
            assert_eq!(pulled.len(), 5);
        });
    }

    #[test]
    fn frames_aggregate_exactly_by_buffer_capacity() {
        // Both PEs push 10 items to each destination with B=4: every
        // destination gets ceil(10/4) = 3 frames from each sender.
        launch_spmd(FabricConfig::new(2), |pe| async move {
            let mut conv: Conveyor<u64> = Conveyor::begin(&pe, pe.alloc_conveyor_ids(1), 4);
            for v in 0..10u64 {
                for d in 0..2 {
                    assert!(conv.push(PeId::new(d), v).unwrap());
                }
            }
            let pulled = drive_to_completion(&mut conv).await;
            assert_eq!(pulled.len(), 20);
            let stats = conv.stats();
            assert_eq!(stats.items_pushed, 20);
            assert_eq!(stats.items_pulled, 20);
            assert_eq!(stats.frames_sent, 6);
            assert_eq!(stats.frames_received, 6);
        });
    }

    #[test]
    fn interleaved_push_advance_pull_conserves_items() {
        let totals = Arc::new(Mutex::new(Vec::new()));
        let t = totals.clone();
        launch_spmd(FabricConfig::new(4), move |pe| {
            let totals = t.clone();
            async move {
                let npes = pe.npes() as u64;
                let me = pe.rank().rank() as u64;
                let mut conv: Conveyor<u64> = Conveyor::begin(&pe, pe.alloc_conveyor_ids(1), 3);
                let mut pulled = Vec::new();
                let mut next = 0u64;
                let total = 50u64;
                loop {
                    let done = next == total;
                    let more = conv.advance(done).unwrap();
                    while next < total {
                        let dest = PeId::new(((me + next) % npes) as usize);
                        let tag = me * 1000 + next;
                        if !conv.push(dest, tag).unwrap() {
                            break;
                        }
                        next += 1;
                    }
                    while let Some((v, from)) = conv.pull() {
                        // Tags identify the sender; delivery must match.
                        assert_eq!(v / 1000, from.rank() as u64);
                        pulled.push(v);
                    }
                    if !more {
                        break;
                    }
                    yield_now().await;
                }
                totals.lock().unwrap().extend(pulled);
            }
        });
        let mut got = totals.lock().unwrap().clone();
        got.sort_unstable();
        let mut want: Vec<u64> = (0..4u64)
            .flat_map(|me| (0..50u64).map(move |i| me * 1000 + i))
            .collect();
        want.sort_unstable();
        assert_eq!(got, want, "pushed and pulled multisets differ");
    }
}
